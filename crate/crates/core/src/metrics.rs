//! Intersection-over-union accounting.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, IGNORE};

/// Accumulates per-category TP/FP/FN over any number of label maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    k: usize,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    gt: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouReport {
    /// `None` for categories absent from both truth and prediction.
    pub per_category: Vec<Option<f64>>,
    /// Mean over categories present in the ground truth.
    pub miou: f64,
}

impl Confusion {
    pub fn new(num_categories: usize) -> Self {
        Self {
            k: num_categories,
            tp: vec![0; num_categories],
            fp: vec![0; num_categories],
            fn_: vec![0; num_categories],
            gt: vec![0; num_categories],
        }
    }

    /// Pixels whose truth is ignore are skipped.
    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::shape("prediction and truth differ in size"));
        }
        if pred.num_categories() != self.k || truth.num_categories() != self.k {
            return Err(Error::Category("label space differs from the accumulator".into()));
        }
        for (&p, &t) in pred.values().iter().zip(truth.values()) {
            if t == IGNORE {
                continue;
            }
            let t = t as usize;
            self.gt[t] += 1;
            if p == IGNORE {
                self.fn_[t] += 1;
            } else if p as usize == t {
                self.tp[t] += 1;
            } else {
                self.fn_[t] += 1;
                self.fp[p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MiouReport {
        let per_category: Vec<Option<f64>> = (0..self.k)
            .map(|c| {
                let denom = self.tp[c] + self.fp[c] + self.fn_[c];
                (denom > 0).then(|| self.tp[c] as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = (0..self.k)
            .filter(|&c| self.gt[c] > 0)
            .map(|c| per_category[c].unwrap_or(0.0))
            .collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport { per_category, miou }
    }
}

/// IoU report for paired predictions and truths.
pub fn miou(pairs: &[(&LabelMap, &LabelMap)]) -> Result<MiouReport> {
    let k = pairs
        .first()
        .map(|(p, _)| p.num_categories())
        .ok_or_else(|| Error::shape("no label maps to score"))?;
    let mut c = Confusion::new(k);
    for (p, t) in pairs {
        c.add(p, t)?;
    }
    Ok(c.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn halves() -> LabelMap {
        LabelMap::from_vec(4, 4, (0..16).map(|i| u16::from(i >= 8)).collect(), 2).unwrap()
    }

    /// TP/FP/FN counted independently by set membership.
    fn iou_oracle(pred: &[u16], truth: &[u16], k: u16) -> f64 {
        let inter = pred.iter().zip(truth).filter(|(p, t)| **p == k && **t == k).count();
        let union = pred.iter().zip(truth).filter(|(p, t)| **p == k || **t == k).count();
        inter as f64 / union as f64
    }

    #[test]
    fn perfect_and_disjoint() {
        let t = halves();
        let r = miou(&[(&t, &t)]).unwrap();
        assert_eq!(r.per_category, vec![Some(1.0), Some(1.0)]);
        assert_eq!(r.miou, 1.0);
        let flipped = LabelMap::from_vec(4, 4, t.values().iter().map(|v| 1 - v).collect(), 2).unwrap();
        assert_eq!(miou(&[(&flipped, &t)]).unwrap().per_category, vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn one_mismatched_pixel() {
        let t = halves();
        let mut p = t.values().to_vec();
        p[0] = 1;
        let pred = LabelMap::from_vec(4, 4, p.clone(), 2).unwrap();
        let r = miou(&[(&pred, &t)]).unwrap();
        let expect = [iou_oracle(&p, t.values(), 0), iou_oracle(&p, t.values(), 1)];
        assert_eq!(expect, [7.0 / 8.0, 8.0 / 9.0]);
        assert_eq!(r.per_category, vec![Some(expect[0]), Some(expect[1])]);
    }

    #[test]
    fn swapped_pair_gives_seven_ninths() {
        let t = halves();
        let mut p = t.values().to_vec();
        p.swap(0, 15);
        let pred = LabelMap::from_vec(4, 4, p.clone(), 2).unwrap();
        let r = miou(&[(&pred, &t)]).unwrap();
        assert_eq!(iou_oracle(&p, t.values(), 0), 7.0 / 9.0);
        assert_eq!(r.per_category, vec![Some(7.0 / 9.0), Some(7.0 / 9.0)]);
        assert!((r.miou - 7.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn ignore_and_absent_categories() {
        let t = LabelMap::from_vec(1, 4, vec![0, 0, IGNORE, 1], 3).unwrap();
        let p = LabelMap::from_vec(1, 4, vec![0, 2, 2, 1], 3).unwrap();
        let r = miou(&[(&p, &t)]).unwrap();
        assert_eq!(r.per_category, vec![Some(0.5), Some(1.0), Some(0.0)]);
        // Category 2 is absent from the truth, so only 0 and 1 count.
        assert_eq!(r.miou, 0.75);
    }

    #[test]
    fn permutation_and_relabel_invariance() {
        let mut rng = Rng::new(3);
        let k = 4;
        for _ in 0..20 {
            let t: Vec<u16> = (0..25).map(|_| rng.below(k) as u16).collect();
            let p: Vec<u16> = (0..25).map(|_| rng.below(k) as u16).collect();
            let base = miou(&[(&LabelMap::from_vec(5, 5, p.clone(), 4).unwrap(), &LabelMap::from_vec(5, 5, t.clone(), 4).unwrap())]).unwrap();
            let order: Vec<usize> = (0..25).rev().collect();
            let pp: Vec<u16> = order.iter().map(|&i| p[i]).collect();
            let tp: Vec<u16> = order.iter().map(|&i| t[i]).collect();
            let perm = miou(&[(&LabelMap::from_vec(5, 5, pp, 4).unwrap(), &LabelMap::from_vec(5, 5, tp, 4).unwrap())]).unwrap();
            assert_eq!(base, perm);
            let relabel = |v: &u16| (v + 1) % 4;
            let pr: Vec<u16> = p.iter().map(relabel).collect();
            let tr: Vec<u16> = t.iter().map(relabel).collect();
            let rel = miou(&[(&LabelMap::from_vec(5, 5, pr, 4).unwrap(), &LabelMap::from_vec(5, 5, tr, 4).unwrap())]).unwrap();
            for c in 0..4 {
                assert_eq!(rel.per_category[(c + 1) % 4], base.per_category[c]);
            }
        }
    }
}
