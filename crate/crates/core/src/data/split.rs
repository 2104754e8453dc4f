use std::fmt::Write as _;

use rand::seq::SliceRandom;

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;

/// Class-local indices (0..class size) of one class's train/val/test parts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub seed: u64,
    pub classes: Vec<ClassSplit>,
}

/// Per class of size `N`: `floor(N/5)` test items; of the remaining `R`,
/// `floor(R/5)` validation and the rest training. Selection is uniform at
/// random under `seed`.
pub fn split_dataset(class_sizes: &[usize], seed: u64) -> Result<SplitSpec> {
    if class_sizes.is_empty() {
        return Err(Error::arg("split needs at least one class"));
    }
    let mut classes = Vec::with_capacity(class_sizes.len());
    for (c, &n) in class_sizes.iter().enumerate() {
        if n < 5 {
            return Err(Error::arg(format!("class {c} has {n} items; at least 5 are required")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(seed, "split", &[c as u64]));
        let n_test = n / 5;
        let n_val = (n - n_test) / 5;
        let mut test = idx[..n_test].to_vec();
        let mut val = idx[n_test..n_test + n_val].to_vec();
        let mut train = idx[n_test + n_val..].to_vec();
        test.sort_unstable();
        val.sort_unstable();
        train.sort_unstable();
        classes.push(ClassSplit { train, val, test });
    }
    Ok(SplitSpec { seed, classes })
}

impl SplitSpec {
    /// `(train, val, test)` sizes per class.
    pub fn counts(&self) -> Vec<(usize, usize, usize)> {
        self.classes
            .iter()
            .map(|c| (c.train.len(), c.val.len(), c.test.len()))
            .collect()
    }

    /// Maps the class-local lists onto dataset indices.
    pub fn resolve(&self, data: &LabeledDataset) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let per_class = data.class_indices();
        if per_class.len() != self.classes.len() {
            return Err(Error::arg(format!(
                "split has {} classes, dataset has {}",
                self.classes.len(),
                per_class.len()
            )));
        }
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for (c, (split, members)) in self.classes.iter().zip(&per_class).enumerate() {
            let total = split.train.len() + split.val.len() + split.test.len();
            if total != members.len() {
                return Err(Error::arg(format!(
                    "split covers {total} items of class {c}, dataset has {}",
                    members.len()
                )));
            }
            for (src, dst) in [(&split.train, &mut train), (&split.val, &mut val), (&split.test, &mut test)] {
                for &i in src {
                    dst.push(*members.get(i).ok_or_else(|| Error::arg(format!("split index {i} out of range")))?);
                }
            }
        }
        Ok((train, val, test))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("split seed={} classes={}\n", self.seed, self.classes.len());
        for (c, split) in self.classes.iter().enumerate() {
            for (part, idx) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
                let _ = write!(s, "class {c} {part}");
                for i in idx {
                    let _ = write!(s, " {i}");
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<SplitSpec> {
        let bad = |detail: String| Error::format("split file", detail);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut seed = None;
        let mut n_classes = None;
        let mut tokens = header.split_whitespace();
        if tokens.next() != Some("split") {
            return Err(bad("missing `split` header".into()));
        }
        for tok in tokens {
            match tok.split_once('=') {
                Some(("seed", v)) => seed = v.parse().ok(),
                Some(("classes", v)) => n_classes = v.parse().ok(),
                _ => return Err(bad(format!("unexpected header token `{tok}`"))),
            }
        }
        let (seed, n_classes): (u64, usize) = match (seed, n_classes) {
            (Some(s), Some(n)) => (s, n),
            _ => return Err(bad("header needs seed= and classes=".into())),
        };
        let mut classes = vec![ClassSplit::default(); n_classes];
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut t = line.split_whitespace();
            if t.next() != Some("class") {
                return Err(bad(format!("unexpected line `{line}`")));
            }
            let c: usize = t
                .next()
                .and_then(|v| v.parse().ok())
                .filter(|&c| c < n_classes)
                .ok_or_else(|| bad(format!("bad class index in `{line}`")))?;
            let part = match t.next() {
                Some("train") => &mut classes[c].train,
                Some("val") => &mut classes[c].val,
                Some("test") => &mut classes[c].test,
                _ => return Err(bad(format!("bad part name in `{line}`"))),
            };
            for v in t {
                part.push(v.parse().map_err(|_| bad(format!("bad index `{v}`")))?);
            }
        }
        Ok(SplitSpec { seed, classes })
    }
}

/// Stratified k-fold assignment: each class is shuffled and dealt round-robin
/// into folds, continuing the rotation across classes, so folds are balanced
/// within one item both overall and per class.
pub fn stratified_kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::arg(format!("k-fold needs k >= 2, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::arg(format!("cannot split {} items into {k} folds", labels.len())));
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut per_class = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (c, members) in per_class.iter_mut().enumerate() {
        members.shuffle(&mut rng::stream(seed, "kfold", &[c as u64]));
        for &i in members.iter() {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Unstratified k-fold over `0..n_items`.
pub fn kfold_split(n_items: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    stratified_kfold_split(&vec![0; n_items], k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_class() {
        let s = split_dataset(&[5], 1).unwrap();
        assert_eq!(s.counts(), vec![(4, 0, 1)]);
        assert!(split_dataset(&[4], 1).is_err());
    }

    #[test]
    fn text_round_trip() {
        let s = split_dataset(&[7, 12, 5], 42).unwrap();
        assert_eq!(SplitSpec::from_text(&s.to_text()).unwrap(), s);
        assert!(SplitSpec::from_text("nonsense").is_err());
    }

    #[test]
    fn fold_sizes() {
        let folds = kfold_split(10, 5, 0).unwrap();
        assert!(folds.iter().all(|f| f.len() == 2));
        let mut sizes: Vec<_> = kfold_split(11, 5, 0).unwrap().iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        assert!(kfold_split(3, 5, 0).is_err());
        assert!(kfold_split(10, 1, 0).is_err());
        assert_eq!(kfold_split(30, 5, 9).unwrap(), kfold_split(30, 5, 9).unwrap());
    }
}
