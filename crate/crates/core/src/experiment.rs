//! Ablation and k-fold drivers built on [`train`](crate::train::train).

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::data::{stratified_kfold_split, LabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::{kfold_aggregate_reports, percent, KFoldTable, MetricsReport};
use crate::model::{ablation_configs, build_model, ModelConfig};
use crate::rng;
use crate::tensor::Scalar;
use crate::train::{evaluate, train, Datasets, RunRecord, TrainConfig};

/// Fixed train/val/test indices into one dataset.
#[derive(Debug, Clone, Copy)]
pub struct Holdout<'a> {
    pub data: &'a LabeledDataset,
    pub train: &'a [usize],
    pub val: &'a [usize],
    pub test: &'a [usize],
}

/// Seed for parameter initialization derived from the run seed.
pub fn init_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, "init", &[])
}

/// Trains one configuration on a holdout split and scores the test part.
pub fn run_holdout<T: Scalar>(
    model_cfg: &ModelConfig,
    sets: Holdout<'_>,
    cfg: &TrainConfig,
) -> Result<(RunRecord, MetricsReport)> {
    let mut model = build_model::<T>(model_cfg, init_seed(cfg.seed))?;
    let record = train(
        &mut model,
        Datasets {
            data: sets.data,
            train: sets.train,
            val: sets.val,
        },
        cfg,
    )?;
    let report = evaluate(&model, sets.data, sets.test, &cfg.augment, &record.norm, cfg.eval_batch_size)?;
    Ok((record, report))
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub config: ModelConfig,
    pub test: MetricsReport,
    pub kfold: Option<KFoldTable>,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// `Model,ResNet34,A,B,C,Accuracy` with `√`/`×` marks, plus a
    /// `KFoldAccuracy` column when the k-fold average was computed.
    pub fn to_csv(&self) -> String {
        let with_kfold = self.rows.iter().any(|r| r.kfold.is_some());
        let mut s = String::from("Model,ResNet34,A,B,C,Accuracy");
        if with_kfold {
            s.push_str(",KFoldAccuracy");
        }
        s.push('\n');
        let mark = |b: bool| if b { "√" } else { "×" };
        for (i, r) in self.rows.iter().enumerate() {
            let c = &r.config;
            let _ = write!(
                s,
                "{},√,{},{},{},{}",
                c.preset_index().unwrap_or(i + 1),
                mark(c.use_inception_down),
                mark(c.use_multiscale_stem),
                mark(c.use_se),
                percent(r.test.accuracy)
            );
            if with_kfold {
                let v = r.kfold.as_ref().map(|t| percent(t.average.accuracy)).unwrap_or_default();
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Trains the five ablation configurations under one seed and split.
/// `template` supplies everything except the A/B/C flags. With
/// `kfold = Some(k)` each row also gets a k-fold average over all of `data`.
pub fn run_ablation<T: Scalar>(
    template: &ModelConfig,
    sets: Holdout<'_>,
    cfg: &TrainConfig,
    kfold: Option<usize>,
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(5);
    for preset in ablation_configs(template.num_classes) {
        let model_cfg = template
            .clone()
            .with_flags(preset.use_inception_down, preset.use_multiscale_stem, preset.use_se);
        log::info!("ablation: {model_cfg}");
        let (_, test) = run_holdout::<T>(&model_cfg, sets, cfg)?;
        let kfold = match kfold {
            Some(k) => Some(run_kfold::<T>(&model_cfg, sets.data, k, cfg)?.table),
            None => None,
        };
        rows.push(AblationRow {
            config: model_cfg,
            test,
            kfold,
        });
    }
    Ok(AblationReport { rows })
}

/// Splits `indices` per class into `(train, val)` with `floor(n/5)` of each
/// class held out for validation.
pub fn carve_validation(data: &LabeledDataset, indices: &[usize], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut per_class = vec![Vec::new(); data.num_classes()];
    for &i in indices {
        let item = data
            .items()
            .get(i)
            .ok_or_else(|| Error::arg(format!("index {i} outside dataset of {}", data.len())))?;
        per_class[item.label].push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (c, members) in per_class.iter_mut().enumerate() {
        members.shuffle(&mut rng::stream(seed, "holdout-val", &[c as u64]));
        let n_val = members.len() / 5;
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::arg(format!(
            "{} samples are too few to carve a validation set",
            indices.len()
        )));
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[derive(Debug, Clone)]
pub struct KFoldReport {
    pub folds: Vec<Vec<usize>>,
    pub reports: Vec<MetricsReport>,
    pub table: KFoldTable,
}

/// Stratified k-fold cross-validation. Each fold trains on the other k−1
/// folds (minus a validation slice used for model selection) and is scored
/// on the held-out fold.
pub fn run_kfold<T: Scalar>(
    model_cfg: &ModelConfig,
    data: &LabeledDataset,
    k: usize,
    cfg: &TrainConfig,
) -> Result<KFoldReport> {
    let folds = stratified_kfold_split(&data.labels(), k, cfg.seed)?;
    let mut reports = Vec::with_capacity(k);
    for (f, held_out) in folds.iter().enumerate() {
        let rest: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != f)
            .flat_map(|(_, fold)| fold.iter().copied())
            .collect();
        let fold_seed = rng::derive_seed(cfg.seed, "fold", &[f as u64]);
        let (train_idx, val_idx) = carve_validation(data, &rest, fold_seed)?;
        let fold_cfg = TrainConfig {
            seed: fold_seed,
            checkpoint: None,
            ..cfg.clone()
        };
        log::info!("fold {}/{k}: {} train, {} val, {} test", f + 1, train_idx.len(), val_idx.len(), held_out.len());
        let (_, report) = run_holdout::<T>(
            model_cfg,
            Holdout {
                data,
                train: &train_idx,
                val: &val_idx,
                test: held_out,
            },
            &fold_cfg,
        )?;
        reports.push(report);
    }
    let table = kfold_aggregate_reports(&reports)?;
    Ok(KFoldReport { folds, reports, table })
}
