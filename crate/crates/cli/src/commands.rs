use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use msresnet::checkpoint;
use msresnet::data::{load_image_dir, save_image_dir, split_dataset, synth_dataset, AugmentConfig, LabeledDataset, SplitSpec, Standardize};
use msresnet::experiment::{init_seed, run_ablation, run_kfold, Holdout};
use msresnet::gradcheck::suite::{cases, run_case, CaseKind};
use msresnet::metrics::{percent, render_kfold, render_report};
use msresnet::model::{build_model, ModelConfig};
use msresnet::train::{evaluate, train, Datasets, TrainConfig};
use msresnet::{DType, Error, Scalar};

use crate::args::*;

/// What went wrong, mapped onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, missing inputs, unwritable outputs (exit 1).
    Usage(String),
    /// Anything that failed while running (exit 2).
    Runtime(Error),
    /// A gradient check exceeded its tolerance (exit 3).
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other),
        }
    }
}

type Outcome = Result<(), Failure>;

const TABLE1_CLASSES: [&str; 4] = ["Meningioma", "Glioma", "Pituitary", "No tumor"];
const TABLE1_SIZES: [usize; 4] = [708, 1426, 930, 1436];

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn out_dir(dir: &Path) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create output directory {}: {e}", dir.display())))?;
    let probe = dir.join(".msresnet-write-test");
    fs::write(&probe, b"").map_err(|e| usage(format!("output directory {} is not writable: {e}", dir.display())))?;
    let _ = fs::remove_file(&probe);
    Ok(dir.to_path_buf())
}

fn write(path: &Path, contents: &str) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::Runtime(e.into()))
}

fn print(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
}

fn load_data(d: &DataArgs, seed: u64) -> Result<LabeledDataset, Failure> {
    match (&d.data, d.synthetic) {
        (Some(root), None) => {
            if !root.is_dir() {
                return Err(usage(format!("data root {} is not a directory", root.display())));
            }
            Ok(load_image_dir(root)?)
        }
        (None, Some(n)) => Ok(synth_dataset(n, d.synthetic_size, seed)?),
        _ => Err(usage("give exactly one of --data or --synthetic")),
    }
}

fn load_split(d: &DataArgs, data: &LabeledDataset, seed: u64) -> Result<SplitSpec, Failure> {
    match &d.split {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read split {}: {e}", path.display())))?;
            Ok(SplitSpec::from_text(&text)?)
        }
        None => Ok(split_dataset(&data.class_sizes(), seed)?),
    }
}

fn four(v: &[usize], what: &str) -> Result<[usize; 4], Failure> {
    v.try_into()
        .map_err(|_| usage(format!("--{what} takes exactly four comma-separated values")))
}

fn parse_modules(list: &str) -> Result<(bool, bool, bool), Failure> {
    let list = list.trim();
    if list.eq_ignore_ascii_case("none") {
        return Ok((false, false, false));
    }
    let (mut a, mut b, mut c) = (false, false, false);
    for tok in list.split(|ch: char| ch == ',' || ch == '+' || ch.is_whitespace()) {
        match tok.to_ascii_uppercase().as_str() {
            "" => {}
            "A" => a = true,
            "B" => b = true,
            "C" => c = true,
            other => return Err(usage(format!("unknown module `{other}`; expected A, B, C or none"))),
        }
    }
    Ok((a, b, c))
}

fn model_config(
    arch: &ArchArgs,
    modules: Option<&ModuleArgs>,
    num_classes: usize,
    data_channels: usize,
) -> Result<ModelConfig, Failure> {
    let mut cfg = ModelConfig {
        num_classes,
        in_channels: arch.channels.unwrap_or(data_channels),
        stage_widths: four(&arch.widths, "widths")?,
        stage_depths: four(&arch.depths, "depths")?,
        input_resolution: arch.resolution,
        se_reduction: arch.se_reduction,
        ..ModelConfig::default()
    };
    if let Some(m) = modules {
        let preset = ModelConfig::preset(m.preset as usize, num_classes)?;
        let (a, b, c) = match &m.modules {
            Some(list) => parse_modules(list)?,
            None => (preset.use_inception_down, preset.use_multiscale_stem, preset.use_se),
        };
        cfg = cfg.with_flags(a, b, c);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(t: &TrainArgs, seed: u64, resolution: usize) -> Result<TrainConfig, Failure> {
    let augment = if t.no_augment {
        AugmentConfig::identity(resolution)
    } else {
        AugmentConfig {
            resolution,
            ..AugmentConfig::default()
        }
    };
    let cfg = TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        lr0: t.lr,
        decay_factor: t.decay_factor,
        decay_every: t.decay_every,
        seed,
        precision: t.precision,
        augment,
        eval_batch_size: t.eval_batch_size,
        checkpoint: None,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Dataset converted to the channel count the model expects.
fn matching_channels(data: LabeledDataset, channels: usize) -> Result<LabeledDataset, Failure> {
    if data.channels() == Some(channels) {
        Ok(data)
    } else {
        Ok(data.with_channels(channels)?)
    }
}

pub fn split(a: &SplitArgs) -> Outcome {
    let seed = a.common.seed;
    let (names, sizes): (Vec<String>, Vec<usize>) = if a.table1_sizes {
        (TABLE1_CLASSES.iter().map(|s| s.to_string()).collect(), TABLE1_SIZES.to_vec())
    } else if let Some(sizes) = &a.sizes {
        ((0..sizes.len()).map(|i| format!("class{i}")).collect(), sizes.clone())
    } else {
        let data = load_data(
            &DataArgs {
                data: a.data.clone(),
                synthetic: a.synthetic,
                synthetic_size: 64,
                split: None,
            },
            seed,
        )?;
        (data.class_names().to_vec(), data.class_sizes())
    };
    let spec = split_dataset(&sizes, seed)?;
    let mut csv = String::from("Tumor types,Training set,Validation set,Test set,total\n");
    for (name, (tr, va, te)) in names.iter().zip(spec.counts()) {
        let _ = writeln!(csv, "{name},{tr},{va},{te},{}", tr + va + te);
    }
    if let Some(dir) = &a.out {
        let dir = out_dir(dir)?;
        write(&dir.join("split.txt"), &spec.to_text())?;
        write(&dir.join("split_counts.csv"), &csv)?;
    }
    print(&csv);
    Ok(())
}

pub fn train_cmd(a: &TrainCmd) -> Outcome {
    match a.train.precision {
        DType::F32 => train_in::<f32>(a),
        DType::F64 => train_in::<f64>(a),
    }
}

fn train_in<T: Scalar>(a: &TrainCmd) -> Outcome {
    let seed = a.common.seed;
    let dir = out_dir(&a.out)?;
    let data = load_data(&a.data, seed)?;
    let spec = load_split(&a.data, &data, seed)?;
    let mc = model_config(&a.arch, Some(&a.modules), data.num_classes(), data.channels().unwrap_or(3))?;
    let data = matching_channels(data, mc.in_channels)?;
    let (tr, va, te) = spec.resolve(&data)?;
    let mut cfg = train_config(&a.train, seed, mc.input_resolution)?;
    let ckpt = dir.join("model.ckpt");
    cfg.checkpoint = Some(ckpt.clone());
    log::info!("training {mc} on {} train / {} val / {} test images", tr.len(), va.len(), te.len());
    let mut model = build_model::<T>(&mc, init_seed(seed))?;
    let record = train(
        &mut model,
        Datasets {
            data: &data,
            train: &tr,
            val: &va,
        },
        &cfg,
    )?;
    write(&dir.join("curves.csv"), &record.curves_csv())?;
    write(&dir.join("split.txt"), &spec.to_text())?;
    let mut summary = format!(
        "model,{mc}\nparameters,{}\nbest_epoch,{}\nbest_val_accuracy,{}\n",
        model.count_params(),
        record.best_epoch,
        percent(record.best_val_acc)
    );
    if !te.is_empty() {
        let report = evaluate(&model, &data, &te, &cfg.augment, &record.norm, cfg.eval_batch_size)?;
        let _ = writeln!(summary, "test_accuracy,{}", percent(report.accuracy));
    }
    write(&dir.join("summary.csv"), &summary)?;
    print(&summary);
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Outcome {
    match a.precision {
        DType::F32 => eval_in::<f32>(a),
        DType::F64 => eval_in::<f64>(a),
    }
}

fn eval_in<T: Scalar>(a: &EvalArgs) -> Outcome {
    let seed = a.common.seed;
    if !a.checkpoint.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", a.checkpoint.display())));
    }
    let dir = out_dir(&a.out)?;
    let ck = checkpoint::load::<T>(&a.checkpoint)?;
    let mc = ck.model.config().clone();
    let data = load_data(&a.data, seed)?;
    let spec = load_split(&a.data, &data, seed)?;
    let data = matching_channels(data, mc.in_channels)?;
    let (tr, va, te) = spec.resolve(&data)?;
    let indices = match a.part {
        Part::Train => tr.clone(),
        Part::Val => va,
        Part::Test => te,
        Part::All => (0..data.len()).collect(),
    };
    let norm = match ck.norm {
        Some(n) => n,
        None => Standardize::fit(&data, &tr)?,
    };
    let aug = AugmentConfig {
        resolution: mc.input_resolution,
        ..AugmentConfig::default()
    };
    let report = evaluate(&ck.model, &data, &indices, &aug, &norm, a.eval_batch_size)?;
    let metrics = render_report(&report, data.class_names())?;
    write(&dir.join("metrics.csv"), &metrics)?;
    write(&dir.join("confusion.csv"), &report.confusion.to_csv(data.class_names())?)?;
    print(&format!("accuracy,{}\n{metrics}", percent(report.accuracy)));
    Ok(())
}

pub fn ablation(a: &AblationArgs) -> Outcome {
    match a.train.precision {
        DType::F32 => ablation_in::<f32>(a),
        DType::F64 => ablation_in::<f64>(a),
    }
}

fn ablation_in<T: Scalar>(a: &AblationArgs) -> Outcome {
    let seed = a.common.seed;
    let dir = out_dir(&a.out)?;
    let data = load_data(&a.data, seed)?;
    let spec = load_split(&a.data, &data, seed)?;
    let template = model_config(&a.arch, None, data.num_classes(), data.channels().unwrap_or(3))?;
    template.clone().with_flags(true, true, true).validate()?;
    let data = matching_channels(data, template.in_channels)?;
    let (tr, va, te) = spec.resolve(&data)?;
    let cfg = train_config(&a.train, seed, template.input_resolution)?;
    let report = run_ablation::<T>(
        &template,
        Holdout {
            data: &data,
            train: &tr,
            val: &va,
            test: &te,
        },
        &cfg,
        a.kfold,
    )?;
    let csv = report.to_csv();
    write(&dir.join("ablation.csv"), &csv)?;
    print(&csv);
    Ok(())
}

pub fn kfold(a: &KfoldArgs) -> Outcome {
    match a.train.precision {
        DType::F32 => kfold_in::<f32>(a),
        DType::F64 => kfold_in::<f64>(a),
    }
}

fn kfold_in<T: Scalar>(a: &KfoldArgs) -> Outcome {
    let seed = a.common.seed;
    let dir = out_dir(&a.out)?;
    let data = load_data(&a.data, seed)?;
    let mc = model_config(&a.arch, Some(&a.modules), data.num_classes(), data.channels().unwrap_or(3))?;
    let data = matching_channels(data, mc.in_channels)?;
    let cfg = train_config(&a.train, seed, mc.input_resolution)?;
    let report = run_kfold::<T>(&mc, &data, a.folds, &cfg)?;
    for (i, r) in report.reports.iter().enumerate() {
        write(&dir.join(format!("fold{}_metrics.csv", i + 1)), &render_report(r, data.class_names())?)?;
    }
    let csv = render_kfold(&report.table);
    write(&dir.join("kfold.csv"), &csv)?;
    print(&csv);
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Outcome {
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let selected: Vec<_> = cases()
        .into_iter()
        .filter(|c| a.only.as_deref().is_none_or(|s| c.name.contains(s)))
        .collect();
    if selected.is_empty() {
        return Err(usage(format!("no gradient check matches `{}`", a.only.as_deref().unwrap_or(""))));
    }
    let start = a.common.seed;
    let mut failed = Vec::new();
    print("case,kind,seeds,max_rel_error,worst_seed,result\n");
    for case in &selected {
        let s = run_case(case, start..start + a.seeds, a.tolerance)?;
        let kind = match s.kind {
            CaseKind::Primitive => "primitive",
            CaseKind::Block => "block",
        };
        let result = if s.passed() { "PASS" } else { "FAIL" };
        print(&format!(
            "{},{kind},{},{:.3e},{},{result}\n",
            s.name, s.seeds, s.max_rel_error, s.worst_seed
        ));
        if !s.passed() {
            failed.push(s.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub fn params(a: &ParamsArgs) -> Outcome {
    let base = model_config(&a.arch, Some(&a.modules), a.classes, 3)?;
    let count = |cfg: &ModelConfig| -> Result<usize, Failure> { Ok(build_model::<f32>(cfg, 0)?.count_params()) };
    let mark = |b: bool| if b { "√" } else { "×" };
    let mut csv = String::from("Model,ResNet34,A,B,C,Parameters,Millions,Ratio\n");
    let configs: Vec<ModelConfig> = if a.all {
        (1..=5)
            .map(|i| {
                let p = ModelConfig::preset(i, a.classes)?;
                let cfg = base.clone().with_flags(p.use_inception_down, p.use_multiscale_stem, p.use_se);
                cfg.validate()?;
                Ok(cfg)
            })
            .collect::<Result<_, Error>>()?
    } else {
        vec![base.clone()]
    };
    let baseline = count(&base.clone().with_flags(false, false, false))?;
    for cfg in &configs {
        let n = count(cfg)?;
        let _ = writeln!(
            csv,
            "{},√,{},{},{},{n},{:.2},{:.3}",
            cfg.preset_index().map_or("custom".to_string(), |i| i.to_string()),
            mark(cfg.use_inception_down),
            mark(cfg.use_multiscale_stem),
            mark(cfg.use_se),
            n as f64 / 1e6,
            n as f64 / baseline as f64
        );
    }
    print(&csv);
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Outcome {
    let dir = out_dir(&a.out)?;
    let data = synth_dataset(a.per_class, a.size, a.common.seed)?;
    save_image_dir(&data, &dir)?;
    print(&format!("wrote {} images in {} classes to {}\n", data.len(), data.num_classes(), dir.display()));
    Ok(())
}
