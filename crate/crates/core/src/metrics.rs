//! Confusion-matrix accumulation and mean intersection-over-union.

use serde::{Deserialize, Serialize};

use crate::datagen::IGNORE_INDEX;
use crate::error::{Error, Result};

/// `counts[label * k + pred]`, accumulated over every non-ignored pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub miou: f64,
    /// `None` for classes absent from both predictions and labels.
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, label: usize, pred: usize) -> u64 {
        self.counts[label * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, preds: &[u8], labels: &[u8]) -> Result<()> {
        if preds.len() != labels.len() {
            return Err(Error::contract(format!(
                "{} predictions for {} labels",
                preds.len(),
                labels.len()
            )));
        }
        for (&p, &l) in preds.iter().zip(labels) {
            if l == IGNORE_INDEX {
                continue;
            }
            let (p, l) = (p as usize, l as usize);
            if p >= self.k || l >= self.k {
                return Err(Error::data(format!(
                    "class id out of range 0..{}: pred {p}, label {l}",
                    self.k
                )));
            }
            self.counts[l * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::contract(format!(
                "cannot merge confusion matrices with {} and {} classes",
                self.k, other.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class, `TP / (TP + FP + FN)`, averaged over classes that
    /// occur in either predictions or labels.
    pub fn miou(&self) -> Result<MiouReport> {
        let k = self.k;
        let mut per_class = Vec::with_capacity(k);
        let mut excluded = Vec::new();
        for c in 0..k {
            let tp = self.get(c, c);
            let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let col: u64 = (0..k).map(|l| self.get(l, c)).sum();
            let union = row + col - tp;
            if union == 0 {
                per_class.push(None);
                excluded.push(c);
            } else {
                per_class.push(Some(tp as f64 / union as f64));
            }
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::data("mIoU undefined: no class present"));
        }
        Ok(MiouReport {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
            excluded,
        })
    }
}

/// Fraction of non-ignored pixels whose prediction matches the label.
pub fn pixel_accuracy(cm: &ConfusionMatrix) -> Option<f64> {
    let total = cm.total();
    (total > 0).then(|| (0..cm.k).map(|c| cm.get(c, c)).sum::<u64>() as f64 / total as f64)
}

/// Fraction of pixels whose predicted class changes between consecutive
/// frames, pooled over all frame pairs of a clip.
pub fn flip_rate(preds: &[Vec<u8>]) -> Result<f64> {
    if preds.len() < 2 {
        return Err(Error::data("flip rate needs at least two frames"));
    }
    let n = preds[0].len();
    if preds.iter().any(|p| p.len() != n) {
        return Err(Error::contract("frames of one clip must have equal sizes"));
    }
    let flips: usize = preds
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).filter(|(a, b)| a != b).count())
        .sum();
    Ok(flips as f64 / ((preds.len() - 1) * n) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    // set-based IoU straight from pixel index sets
    fn oracle(preds: &[u8], labels: &[u8], k: usize) -> Option<f64> {
        let mut ious = Vec::new();
        for c in 0..k as u8 {
            let valid = |i: &usize| labels[*i] != IGNORE_INDEX;
            let p: BTreeSet<usize> = (0..preds.len()).filter(valid).filter(|&i| preds[i] == c).collect();
            let g: BTreeSet<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let union = p.union(&g).count();
            if union > 0 {
                ious.push(p.intersection(&g).count() as f64 / union as f64);
            }
        }
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }

    #[test]
    fn two_by_two_example() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[0, 1, 1, 0], &[0, 0, 1, IGNORE_INDEX]).unwrap();
        assert_eq!(
            (cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)),
            (1, 1, 0, 1)
        );
        let r = cm.miou().unwrap();
        assert!((r.miou - 0.5).abs() < 1e-12);
    }

    #[test]
    fn known_confusion_matrix() {
        let mut cm = ConfusionMatrix::new(2);
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for (l, p, n) in [(0u8, 0u8, 3), (0, 1, 1), (1, 0, 2), (1, 1, 4)] {
            preds.extend(std::iter::repeat(p).take(n));
            labels.extend(std::iter::repeat(l).take(n));
        }
        cm.update(&preds, &labels).unwrap();
        assert!((cm.miou().unwrap().miou - 0.535714).abs() < 1e-6);
    }

    #[test]
    fn perfect_and_ignored() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1, 2, 0], &[0, 1, 2, IGNORE_INDEX]).unwrap();
        assert_eq!(cm.miou().unwrap().miou, 1.0);
        assert_eq!(cm.total(), 3);
    }

    #[test]
    fn absent_class_is_excluded() {
        let mut cm = ConfusionMatrix::new(4);
        cm.update(&[0, 1, 1], &[0, 1, 0]).unwrap();
        let r = cm.miou().unwrap();
        assert_eq!(r.excluded, vec![2, 3]);
        assert_eq!(r.per_class[2], None);
        assert!((r.miou - 0.5).abs() < 1e-12);
    }

    #[test]
    fn all_absent_is_an_error() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1], &[IGNORE_INDEX, IGNORE_INDEX]).unwrap();
        assert!(matches!(cm.miou(), Err(Error::Data(_))));
    }

    #[test]
    fn merge_requires_same_k() {
        let mut a = ConfusionMatrix::new(2);
        assert!(matches!(a.merge(&ConfusionMatrix::new(3)), Err(Error::Contract(_))));
    }

    #[test]
    fn out_of_range_ids() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.update(&[2], &[0]).is_err());
        assert!(cm.update(&[0], &[5]).is_err());
        assert!(cm.update(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn matches_set_oracle_on_many_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let (k, n) = (4usize, 64usize);
            let preds: Vec<u8> = (0..n).map(|_| rng.random_range(0..k) as u8).collect();
            let labels: Vec<u8> = (0..n)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        IGNORE_INDEX
                    } else {
                        rng.random_range(0..k) as u8
                    }
                })
                .collect();
            let mut cm = ConfusionMatrix::new(k);
            cm.update(&preds, &labels).unwrap();
            match (cm.miou(), oracle(&preds, &labels, k)) {
                (Ok(r), Some(o)) => assert!((r.miou - o).abs() < 1e-12),
                (Err(_), None) => {}
                (a, b) => panic!("disagreement {a:?} vs {b:?}"),
            }
        }
    }

    proptest! {
        #[test]
        fn miou_bounded_and_merge_additive(
            a in proptest::collection::vec((0u8..3, 0u8..3), 1..30),
            b in proptest::collection::vec((0u8..3, 0u8..3), 1..30),
        ) {
            let (pa, la): (Vec<u8>, Vec<u8>) = a.into_iter().unzip();
            let (pb, lb): (Vec<u8>, Vec<u8>) = b.into_iter().unzip();
            let mut merged = ConfusionMatrix::new(3);
            merged.update(&pa, &la).unwrap();
            let mut other = ConfusionMatrix::new(3);
            other.update(&pb, &lb).unwrap();
            merged.merge(&other).unwrap();
            let mut joint = ConfusionMatrix::new(3);
            joint.update(&[pa, pb].concat(), &[la, lb].concat()).unwrap();
            prop_assert_eq!(&merged, &joint);
            let m = joint.miou().unwrap().miou;
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn flip_rate_counts_changes() {
        let p = vec![vec![0, 0, 1, 1], vec![0, 1, 1, 1], vec![0, 1, 1, 0]];
        assert_eq!(flip_rate(&p).unwrap(), 2.0 / 8.0);
        assert_eq!(flip_rate(&[vec![1, 2], vec![1, 2]]).unwrap(), 0.0);
        assert!(flip_rate(&[vec![1]]).is_err());
        assert!(flip_rate(&[vec![1], vec![1, 2]]).is_err());
    }
}
