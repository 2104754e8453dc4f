use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn msresnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msresnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("failed to run msresnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("terminated by signal")
}

const TINY: &[&str] = &[
    "--synthetic", "8", "--resolution", "64", "--widths", "8,16,32,64", "--se-reduction", "4",
    "--batch-size", "8", "--seed", "3",
];

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    msresnet(&args)
}

#[test]
fn every_subcommand_documents_its_flags() {
    let expect: &[(&str, &[&str])] = &[
        ("split", &["--table1-sizes", "--sizes", "--out", "--seed", "--config"]),
        ("train", &["--synthetic", "--data", "--preset", "--modules", "--epochs", "--precision", "--out"]),
        ("eval", &["--checkpoint", "--part", "--precision", "--out"]),
        ("ablation", &["--kfold", "--epochs", "--out"]),
        ("kfold", &["--folds", "--preset", "--out"]),
        ("gradcheck", &["--seeds", "--tolerance", "--only"]),
        ("params", &["--all", "--preset", "--classes"]),
        ("synth", &["--per-class", "--size", "--out"]),
    ];
    for (cmd, flags) in expect {
        let o = msresnet(&[cmd, "--help"]);
        assert_eq!(code(&o), 0, "{cmd}");
        let text = stdout(&o);
        for f in *flags {
            assert!(text.contains(f), "`{cmd} --help` lacks {f}");
        }
    }
}

#[test]
fn unknown_and_malformed_flags_are_usage_errors() {
    assert_eq!(code(&msresnet(&["params", "--bogus"])), 1);
    assert_eq!(code(&msresnet(&["params", "--preset", "9"])), 1);
    assert_eq!(code(&msresnet(&["params", "--widths", "1,2"])), 1);
    assert_eq!(code(&msresnet(&["frobnicate"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&msresnet(&["train", "--out", out])), 1, "no data source");
    assert_eq!(code(&msresnet(&["train", "--out", out, "--synthetic", "4", "--data", out])), 1);
    let missing = dir.path().join("missing");
    let o = msresnet(&["train", "--out", out, "--data", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("not a directory"));
}

#[test]
fn unwritable_output_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    fs::write(&file, "x").unwrap();
    let o = msresnet(&["split", "--sizes", "10,10", "--out", file.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn split_reproduces_reference_counts() {
    let o = msresnet(&["split", "--table1-sizes"]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        stdout(&o),
        "Tumor types,Training set,Validation set,Test set,total\n\
         Meningioma,454,113,141,708\n\
         Glioma,913,228,285,1426\n\
         Pituitary,596,148,186,930\n\
         No tumor,920,229,287,1436\n"
    );
}

#[test]
fn split_file_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        assert_eq!(code(&msresnet(&["split", "--synthetic", "7", "--seed", "4", "--out", d.to_str().unwrap()])), 0);
    }
    assert_eq!(fs::read(a.join("split.txt")).unwrap(), fs::read(b.join("split.txt")).unwrap());
}

#[test]
fn params_reports_all_models() {
    let o = msresnet(&["params", "--all"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 6);
    assert!(text.contains("1,√,×,×,×,21286724,21.29,1.000"));
    let ratio: f64 = text.lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!((0.70..=0.90).contains(&ratio));
}

#[test]
fn gradcheck_exit_codes() {
    let o = msresnet(&["gradcheck", "--only", "relu", "--seeds", "3"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("relu,primitive,3,"));
    let o = msresnet(&["gradcheck", "--only", "sigmoid", "--seeds", "1", "--tolerance", "1e-30"]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("FAIL"));
    assert_eq!(code(&msresnet(&["gradcheck", "--only", "no-such-case"])), 1);
}

#[test]
fn train_then_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train_tiny(&run, &["--epochs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.ckpt", "curves.csv", "split.txt", "summary.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let curves = fs::read_to_string(run.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().next(), Some("epoch,lr,train_loss,val_acc"));
    assert_eq!(curves.lines().count(), 3);

    let ckpt = run.join("model.ckpt");
    let split = run.join("split.txt");
    let eval = |out: &Path| {
        msresnet(&[
            "eval", "--synthetic", "8", "--seed", "3", "--checkpoint", ckpt.to_str().unwrap(),
            "--split", split.to_str().unwrap(), "--out", out.to_str().unwrap(),
        ])
    };
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    assert_eq!(code(&eval(&e1)), 0);
    assert_eq!(code(&eval(&e2)), 0);
    for f in ["metrics.csv", "confusion.csv"] {
        assert_eq!(fs::read(e1.join(f)).unwrap(), fs::read(e2.join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(e1.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("Type,Precision,Recall,Specificity,F1\n"));
    assert!(metrics.lines().last().unwrap().starts_with("Average,"));
    assert_eq!(metrics.lines().count(), 6);
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "epochs = 1\nno_augment = true\nwidths = 8,16,32,64\n").unwrap();
    let a = dir.path().join("a");
    let o = train_tiny(&a, &["--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(a.join("curves.csv")).unwrap().lines().count(), 2);
    let b = dir.path().join("b");
    let o = train_tiny(&b, &["--config", cfg.to_str().unwrap(), "--epochs", "2"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(b.join("curves.csv")).unwrap().lines().count(), 3);

    fs::write(&cfg, "epochs = 1\nnot_a_flag = 3\n").unwrap();
    assert_eq!(code(&train_tiny(&a, &["--config", cfg.to_str().unwrap()])), 1);
    let missing = dir.path().join("nope.cfg");
    assert_eq!(code(&train_tiny(&a, &["--config", missing.to_str().unwrap()])), 1);
}

#[test]
fn shipped_config_parses_for_training_commands() {
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.cfg");
    for cmd in ["train", "kfold", "ablation"] {
        let o = msresnet(&[cmd, "--config", cfg, "--out", "unused", "--help"]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn kfold_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["kfold", "--folds", "2", "--epochs", "1", "--out", dir.path().to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--synthetic", "10"]);
    let o = msresnet(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(dir.path().join("kfold.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "K-Fold,Accuracy,Precision,Recall,Specificity,F1");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("Average,"));
    assert!(dir.path().join("fold2_metrics.csv").is_file());
}

#[test]
fn synth_writes_png_tree() {
    let dir = tempfile::tempdir().unwrap();
    let o = msresnet(&["synth", "--per-class", "5", "--size", "32", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let mut classes: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    classes.sort();
    assert_eq!(classes.len(), 4);
    for c in classes {
        assert_eq!(fs::read_dir(dir.path().join(c)).unwrap().count(), 5);
    }
    let o = msresnet(&["split", "--data", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).lines().all(|l| l.starts_with("Tumor") || l.ends_with(",4,0,1,5")));
}

#[test]
fn training_from_a_png_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&msresnet(&["synth", "--per-class", "6", "--size", "64", "--out", data.to_str().unwrap()])), 0);
    let run = dir.path().join("run");
    let o = msresnet(&[
        "train", "--data", data.to_str().unwrap(), "--resolution", "64", "--widths", "8,16,32,64",
        "--se-reduction", "4", "--epochs", "1", "--batch-size", "8", "--out", run.to_str().unwrap(),
        "--precision", "f64",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("test_accuracy,"));
}
