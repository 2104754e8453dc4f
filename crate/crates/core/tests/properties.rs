use msresnet::data::{kfold_split, split_dataset, stratified_kfold_split};
use msresnet::metrics::{confusion, kfold_aggregate, per_class_metrics, FoldRow};
use msresnet::ops;
use msresnet::Tensor;
use proptest::prelude::*;

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Counts straight from the prediction and label lists.
fn oracle(preds: &[usize], labels: &[usize], c: usize) -> [f64; 4] {
    let pairs = || preds.iter().zip(labels);
    let tp = pairs().filter(|&(&p, &l)| p == c && l == c).count();
    let fp = pairs().filter(|&(&p, &l)| p == c && l != c).count();
    let fn_ = pairs().filter(|&(&p, &l)| p != c && l == c).count();
    let tn = pairs().filter(|&(&p, &l)| p != c && l != c).count();
    [ratio(tp, tp + fp), ratio(tp, tp + fn_), ratio(tn, tn + fp), ratio(2 * tp, 2 * tp + fp + fn_)]
}

fn predictions(max_k: usize, max_n: usize) -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
    (2..=max_k, 1..=max_n).prop_flat_map(|(k, n)| {
        (Just(k), prop::collection::vec(0..k, n), prop::collection::vec(0..k, n))
    })
}

proptest! {
    #[test]
    fn metrics_match_counting_oracle((k, preds, labels) in predictions(5, 200)) {
        let report = per_class_metrics(&confusion(&preds, &labels, k).unwrap()).unwrap();
        for c in 0..k {
            let want = oracle(&preds, &labels, c);
            for (got, want) in report.per_class[c].values().iter().zip(want) {
                prop_assert!((got - want).abs() <= 1e-12, "class {c}: {got} vs {want}");
            }
        }
        let hits = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        prop_assert!((report.accuracy - hits as f64 / preds.len() as f64).abs() <= 1e-12);
        for m in 0..4 {
            let mean = (0..k).map(|c| oracle(&preds, &labels, c)[m]).sum::<f64>() / k as f64;
            prop_assert!((report.macro_avg[m] - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn confusion_matrix_tallies((k, preds, labels) in predictions(6, 100)) {
        let cm = confusion(&preds, &labels, k).unwrap();
        prop_assert_eq!(cm.total() as usize, preds.len());
        for c in 0..k {
            let (tp, fp, fn_, tn) = cm.one_vs_rest(c);
            prop_assert_eq!((tp + fp + fn_ + tn) as usize, preds.len());
            let column: u64 = (0..k).map(|p| cm.get(p, c)).sum();
            prop_assert_eq!(column as usize, labels.iter().filter(|&&l| l == c).count());
        }
    }

    #[test]
    fn split_partitions_every_class(sizes in prop::collection::vec(5usize..300, 1..6), seed: u64) {
        let spec = split_dataset(&sizes, seed).unwrap();
        for (class, &n) in spec.classes.iter().zip(&sizes) {
            let test = n / 5;
            let val = (n - test) / 5;
            prop_assert_eq!(class.test.len(), test);
            prop_assert_eq!(class.val.len(), val);
            prop_assert_eq!(class.train.len(), n - test - val);
            let mut all: Vec<usize> = class.train.iter().chain(&class.val).chain(&class.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
        prop_assert_eq!(split_dataset(&sizes, seed).unwrap(), spec);
    }

    #[test]
    fn stratified_folds_partition_and_balance(
        labels in prop::collection::vec(0usize..4, 10..120),
        k in 2usize..7,
        seed: u64,
    ) {
        let folds = stratified_kfold_split(&labels, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for c in 0..4 {
            let per: Vec<usize> = folds.iter().map(|f| f.iter().filter(|&&i| labels[i] == c).count()).collect();
            prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1, "class {c}: {per:?}");
        }
    }

    #[test]
    fn plain_folds_partition(n in 2usize..200, k in 2usize..8, seed: u64) {
        prop_assume!(n >= k);
        let folds = kfold_split(n, k, seed).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn kfold_average_is_the_mean(rows in prop::collection::vec(prop::array::uniform5(0.0f64..1.0), 2..10)) {
        let folds: Vec<FoldRow> = rows
            .iter()
            .map(|r| FoldRow { accuracy: r[0], precision: r[1], recall: r[2], specificity: r[3], f1: r[4] })
            .collect();
        let table = kfold_aggregate(&folds).unwrap();
        for m in 0..5 {
            let mean = rows.iter().map(|r| r[m]).sum::<f64>() / rows.len() as f64;
            prop_assert!((table.average.values()[m] - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(
        n in 1usize..5,
        k in 2usize..7,
        raw in prop::collection::vec(-50.0f64..50.0, 30),
    ) {
        let logits = Tensor::from_fn(&[n, k], |i| raw[i % raw.len()]).unwrap();
        let p = ops::softmax(&logits).unwrap();
        for row in p.data().chunks_exact(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let (loss, _) = ops::softmax_cross_entropy(&logits, &labels).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
    }
}

#[test]
fn worked_binary_example() {
    // 50 TP, 10 FP, 10 FN, 30 TN for class 0 against class 1.
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for (p, l, n) in [(0, 0, 50), (0, 1, 10), (1, 0, 10), (1, 1, 30)] {
        preds.extend(std::iter::repeat_n(p, n));
        labels.extend(std::iter::repeat_n(l, n));
    }
    let report = per_class_metrics(&confusion(&preds, &labels, 2).unwrap()).unwrap();
    let m = report.per_class[0];
    assert!((report.accuracy - 0.8).abs() < 1e-12);
    assert!((m.precision.value - 50.0 / 60.0).abs() < 1e-12);
    assert!((m.recall.value - 50.0 / 60.0).abs() < 1e-12);
    assert!((m.f1.value - 50.0 / 60.0).abs() < 1e-12);
    assert!((m.specificity.value - 0.75).abs() < 1e-12);
}
