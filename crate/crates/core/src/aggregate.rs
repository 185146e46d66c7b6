//! Category-aware feature aggregation across space and time, and the MMD
//! alignment loss between the two domains' aggregated features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{LabelMap, Tensor, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    Linear,
    /// Gaussian kernel; `sigma: null` selects the median pairwise distance.
    Rbf { sigma: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    /// Frame offsets `d` (meaning `t − d`) aggregated for the target domain.
    pub target_offsets: Vec<usize>,
    pub source_offsets: Vec<usize>,
    pub kernel: Kernel,
    pub lambda_f: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            target_offsets: Self::target_offsets_for(1),
            source_offsets: vec![1],
            kernel: Kernel::Linear,
            lambda_f: 0.01,
        }
    }
}

impl AggregationConfig {
    /// `{1, τ, τ + 1}` without duplicates, ascending.
    pub fn target_offsets_for(tau: usize) -> Vec<usize> {
        let mut v = vec![1, tau, tau + 1];
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_offsets.is_empty() || self.source_offsets.is_empty() {
            return Err(Error::Config("aggregation timestep sets must be non-empty".into()));
        }
        if self.lambda_f.is_nan() || self.lambda_f < 0.0 {
            return Err(Error::Config(format!("lambda_f must be >= 0, got {}", self.lambda_f)));
        }
        if let Kernel::Rbf { sigma: Some(s) } = self.kernel {
            if s.is_nan() || s <= 0.0 {
                return Err(Error::Config(format!("rbf sigma must be > 0, got {s}")));
            }
        }
        Ok(())
    }

    /// Deepest frame offset any aggregation timestep reaches back to.
    pub fn max_offset(&self) -> usize {
        self.target_offsets
            .iter()
            .chain(&self.source_offsets)
            .copied()
            .max()
            .unwrap_or(0)
    }
}

/// Per-category mean feature vectors with presence flags.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryFeatureBank {
    means: Tensor,
    valid: Vec<bool>,
}

impl CategoryFeatureBank {
    pub fn new(means: Tensor, valid: Vec<bool>) -> Result<Self> {
        let (k, _) = match *means.shape() {
            [k, c] => (k, c),
            ref s => return Err(Error::shape(format!("bank must be K×C, got {s:?}"))),
        };
        if valid.len() != k {
            return Err(Error::shape(format!("{} validity flags for {k} categories", valid.len())));
        }
        let c = means.shape()[1];
        let vals = means.as_f32()?;
        for (i, ok) in valid.iter().enumerate() {
            if !ok && vals[i * c..(i + 1) * c].iter().any(|&v| v != 0.0) {
                return Err(Error::shape(format!("invalid category {i} has a non-zero vector")));
            }
        }
        Ok(Self { means, valid })
    }

    pub(crate) fn from_f64(k: usize, c: usize, means: &[f64], valid: Vec<bool>) -> Self {
        Self {
            means: Tensor::from_f32(vec![k, c], means.iter().map(|&v| v as f32).collect()).unwrap(),
            valid,
        }
    }

    pub fn num_categories(&self) -> usize {
        self.valid.len()
    }

    pub fn channels(&self) -> usize {
        self.means.shape()[1]
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn vector(&self, k: usize) -> &[f32] {
        let c = self.channels();
        &self.means.as_f32().unwrap()[k * c..(k + 1) * c]
    }
}

/// Masked means of a planar C×N feature map per label id; returns K×C sums
/// divided by counts, plus the counts.
pub(crate) fn category_means(feat: &[f64], c: usize, labels: &[u16], k: usize) -> (Vec<f64>, Vec<usize>) {
    let n = labels.len();
    let mut sums = vec![0.0; k * c];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        let l = l as usize;
        counts[l] += 1;
        for ch in 0..c {
            sums[l * c + ch] += feat[ch * n + i];
        }
    }
    for (kk, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            for ch in 0..c {
                sums[kk * c + ch] /= cnt as f64;
            }
        }
    }
    (sums, counts)
}

/// Mean per-pixel entropy (natural log) of the channel softmax of a C×N map.
pub(crate) fn mean_entropy(feat: &[f64], c: usize) -> f64 {
    let n = feat.len() / c;
    let p = math::softmax_channels(feat, c);
    let lp = math::log_softmax_channels(feat, c);
    let total: f64 = p.iter().zip(&lp).map(|(a, b)| -a * b).sum();
    total / n as f64
}

/// Per-category masked means of `fused` over pixels labelled with each id.
pub fn spatial_aggregate(fused: &Tensor, labels_warped: &LabelMap) -> Result<CategoryFeatureBank> {
    let (c, h, w) = match *fused.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape(format!("features must be C×H×W, got {s:?}"))),
    };
    if labels_warped.height() != h || labels_warped.width() != w {
        return Err(Error::shape("labels and features differ in size"));
    }
    let feat: Vec<f64> = fused.as_f32()?.iter().map(|&v| v as f64).collect();
    let k = labels_warped.num_categories();
    let (means, counts) = category_means(&feat, c, labels_warped.values(), k);
    Ok(CategoryFeatureBank::from_f64(k, c, &means, counts.iter().map(|&n| n > 0).collect()))
}

/// Softmax over timesteps of negative mean entropy: confident steps weigh more.
pub fn entropy_weights(fused_list: &[&Tensor]) -> Result<Tensor> {
    let first = fused_list
        .first()
        .ok_or_else(|| Error::shape("need at least one timestep"))?;
    let c = match *first.shape() {
        [c, _, _] => c,
        ref s => return Err(Error::shape(format!("features must be K×H×W, got {s:?}"))),
    };
    if c < 2 {
        return Err(Error::shape(format!("entropy needs at least 2 channels, got {c}")));
    }
    let mut neg = Vec::with_capacity(fused_list.len());
    for t in fused_list {
        if t.shape() != first.shape() {
            return Err(Error::shape("timesteps differ in shape"));
        }
        let f: Vec<f64> = t.as_f32()?.iter().map(|&v| v as f64).collect();
        neg.push(-mean_entropy(&f, c));
    }
    let w = math::softmax(&neg);
    Tensor::from_f32(vec![w.len()], w.into_iter().map(|v| v as f32).collect())
}

/// Weighted sum per category, renormalizing over the timesteps at which that
/// category is present.
pub(crate) fn combine_banks(
    means: &[&[f64]],
    valid: &[&[bool]],
    weights: &[f64],
    k: usize,
    c: usize,
) -> (Vec<f64>, Vec<bool>) {
    let mut out = vec![0.0; k * c];
    let mut ok = vec![false; k];
    for kk in 0..k {
        let norm: f64 = (0..means.len()).filter(|&t| valid[t][kk]).map(|t| weights[t]).sum();
        if norm <= 0.0 {
            continue;
        }
        ok[kk] = true;
        for t in 0..means.len() {
            if !valid[t][kk] {
                continue;
            }
            let wt = weights[t] / norm;
            for ch in 0..c {
                out[kk * c + ch] += wt * means[t][kk * c + ch];
            }
        }
    }
    (out, ok)
}

pub fn temporal_aggregate(banks: &[&CategoryFeatureBank], weights: &Tensor) -> Result<CategoryFeatureBank> {
    let first = banks.first().ok_or_else(|| Error::shape("need at least one bank"))?;
    let (k, c) = (first.num_categories(), first.channels());
    if banks.iter().any(|b| b.num_categories() != k || b.channels() != c) {
        return Err(Error::shape("banks differ in category count or width"));
    }
    let w: Vec<f64> = weights.as_f32()?.iter().map(|&v| v as f64).collect();
    if w.len() != banks.len() {
        return Err(Error::shape(format!("{} weights for {} banks", w.len(), banks.len())));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::shape(format!("weights sum to {sum}, expected 1")));
    }
    let means: Vec<Vec<f64>> = banks
        .iter()
        .map(|b| b.means.as_f32().unwrap().iter().map(|&v| v as f64).collect())
        .collect();
    let mrefs: Vec<&[f64]> = means.iter().map(|m| m.as_slice()).collect();
    let vrefs: Vec<&[bool]> = banks.iter().map(|b| b.valid.as_slice()).collect();
    let (out, ok) = combine_banks(&mrefs, &vrefs, &w, k, c);
    Ok(CategoryFeatureBank::from_f64(k, c, &out, ok))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdOutcome {
    pub loss: f64,
    /// No category was present in every bank, so nothing was aligned.
    pub no_overlap: bool,
}

/// Categories valid in every bank, ascending.
pub(crate) fn common_categories<'a>(banks: impl IntoIterator<Item = &'a [bool]> + Clone, k: usize) -> Vec<usize> {
    (0..k)
        .filter(|&kk| banks.clone().into_iter().all(|v| v[kk]))
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of all pairwise Euclidean distances; 1.0 when every point coincides.
pub(crate) fn median_bandwidth(points: &[Vec<f64>]) -> f64 {
    let mut d = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// MMD between two mini-batches of concatenated category vectors.
pub fn mmd_align_batch(
    src: &[&CategoryFeatureBank],
    tgt: &[&CategoryFeatureBank],
    cfg: &AggregationConfig,
) -> Result<MmdOutcome> {
    cfg.validate()?;
    let first = src
        .first()
        .or(tgt.first())
        .ok_or_else(|| Error::shape("empty mini-batch"))?;
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::shape("both domains need at least one bank"));
    }
    let (k, c) = (first.num_categories(), first.channels());
    if src.iter().chain(tgt).any(|b| b.num_categories() != k || b.channels() != c) {
        return Err(Error::shape("banks differ in category count or width"));
    }
    let common = common_categories(src.iter().chain(tgt).map(|b| b.valid()), k);
    if common.is_empty() {
        return Ok(MmdOutcome {
            loss: 0.0,
            no_overlap: true,
        });
    }
    let concat = |b: &CategoryFeatureBank| -> Vec<f64> {
        common
            .iter()
            .flat_map(|&kk| b.vector(kk).iter().map(|&v| v as f64))
            .collect()
    };
    let xs: Vec<Vec<f64>> = src.iter().map(|b| concat(b)).collect();
    let ys: Vec<Vec<f64>> = tgt.iter().map(|b| concat(b)).collect();
    let mean = |v: &[Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; v[0].len()];
        for x in v {
            for (a, b) in m.iter_mut().zip(x) {
                *a += b / v.len() as f64;
            }
        }
        m
    };
    let raw = match cfg.kernel {
        Kernel::Linear => sq_dist(&mean(&xs), &mean(&ys)),
        Kernel::Rbf { sigma } => {
            let sigma = sigma.unwrap_or_else(|| {
                let all: Vec<Vec<f64>> = xs.iter().chain(&ys).cloned().collect();
                median_bandwidth(&all)
            });
            let kern = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp();
            let avg = |p: &[Vec<f64>], q: &[Vec<f64>]| -> f64 {
                let mut s = 0.0;
                for a in p {
                    for b in q {
                        s += kern(a, b);
                    }
                }
                s / (p.len() * q.len()) as f64
            };
            (avg(&xs, &xs) + avg(&ys, &ys) - 2.0 * avg(&xs, &ys)).max(0.0)
        }
    };
    Ok(MmdOutcome {
        loss: cfg.lambda_f * raw,
        no_overlap: false,
    })
}

/// Batch-size-one alignment loss.
pub fn mmd_align(
    src: &CategoryFeatureBank,
    tgt: &CategoryFeatureBank,
    cfg: &AggregationConfig,
) -> Result<MmdOutcome> {
    mmd_align_batch(&[src], &[tgt], cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_feat(rng: &mut Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_f32(
            vec![c, h, w],
            (0..c * h * w).map(|_| rng.uniform(-2.0, 2.0) as f32).collect(),
        )
        .unwrap()
    }

    fn random_bank(rng: &mut Rng, k: usize, c: usize) -> CategoryFeatureBank {
        let valid: Vec<bool> = (0..k).map(|_| rng.bernoulli(0.7)).collect();
        let means = (0..k * c)
            .map(|i| if valid[i / c] { rng.uniform(-1.0, 1.0) as f32 } else { 0.0 })
            .collect();
        CategoryFeatureBank::new(Tensor::from_f32(vec![k, c], means).unwrap(), valid).unwrap()
    }

    #[test]
    fn single_category_is_spatial_mean() {
        let mut rng = Rng::new(1);
        let f = random_feat(&mut rng, 3, 4, 4);
        let l = LabelMap::filled(4, 4, 2, 3).unwrap();
        let b = spatial_aggregate(&f, &l).unwrap();
        assert_eq!(b.valid(), &[false, false, true]);
        for ch in 0..3 {
            let mean: f64 = f.as_f32().unwrap()[ch * 16..(ch + 1) * 16].iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            assert!((b.vector(2)[ch] as f64 - mean).abs() < 1e-6);
        }
        assert!(b.vector(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_matches_loop_oracle_and_is_permutation_invariant() {
        let mut rng = Rng::new(2);
        let (c, h, w, k) = (4, 4, 4, 3);
        let f = random_feat(&mut rng, c, h, w);
        let lv: Vec<u16> = (0..16).map(|_| if rng.bernoulli(0.1) { IGNORE } else { rng.below(3) as u16 }).collect();
        let l = LabelMap::from_vec(h, w, lv.clone(), k).unwrap();
        let b = spatial_aggregate(&f, &l).unwrap();
        let fv = f.as_f32().unwrap();
        for kk in 0..k {
            let px: Vec<usize> = (0..16).filter(|&i| lv[i] == kk as u16).collect();
            assert_eq!(b.valid()[kk], !px.is_empty());
            for ch in 0..c {
                let m = if px.is_empty() {
                    0.0
                } else {
                    px.iter().map(|&i| fv[ch * 16 + i] as f64).sum::<f64>() / px.len() as f64
                };
                assert!((b.vector(kk)[ch] as f64 - m).abs() < 1e-6);
            }
        }
        // Reverse pixel order in both features and labels.
        let perm: Vec<usize> = (0..16).rev().collect();
        let fp: Vec<f32> = (0..c).flat_map(|ch| perm.iter().map(move |&i| fv[ch * 16 + i])).collect();
        let lp: Vec<u16> = perm.iter().map(|&i| lv[i]).collect();
        let b2 = spatial_aggregate(
            &Tensor::from_f32(vec![c, h, w], fp).unwrap(),
            &LabelMap::from_vec(h, w, lp, k).unwrap(),
        )
        .unwrap();
        for (a, b) in b.means().as_f32().unwrap().iter().zip(b2.means().as_f32().unwrap()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn entropy_weight_examples() {
        let mut rng = Rng::new(3);
        let f = random_feat(&mut rng, 4, 3, 3);
        let w = entropy_weights(&[&f, &f, &f]).unwrap();
        for v in w.as_f32().unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        assert_eq!(entropy_weights(&[&f]).unwrap().as_f32().unwrap(), &[1.0]);

        let mut confident = vec![0.0f32; 4 * 9];
        confident[..9].iter_mut().for_each(|v| *v = 50.0);
        let confident = Tensor::from_f32(vec![4, 3, 3], confident).unwrap();
        let uniform = Tensor::zeros_f32(vec![4, 3, 3]).unwrap();
        let w = entropy_weights(&[&confident, &uniform]).unwrap();
        // Entropies 0 and ln 4, then a two-way softmax of their negatives.
        let e = [1.0f64, (-(4f64).ln()).exp()];
        let expect = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        let wv = w.as_f32().unwrap();
        assert!((wv[0] as f64 - expect[0]).abs() < 1e-3);
        assert!((wv[1] as f64 - expect[1]).abs() < 1e-3);
        assert!((wv[0] - 0.8).abs() < 1e-3);

        let one = Tensor::zeros_f32(vec![1, 2, 2]).unwrap();
        assert!(matches!(entropy_weights(&[&one]), Err(Error::Shape(_))));
    }

    #[test]
    fn entropy_weights_are_a_distribution_ordered_by_confidence() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let base = random_feat(&mut rng, 5, 4, 4);
            // Scaling logits up lowers entropy, so weights must increase with scale.
            let scaled: Vec<Tensor> = [0.5f32, 1.0, 2.0, 4.0]
                .iter()
                .map(|s| Tensor::from_f32(vec![5, 4, 4], base.as_f32().unwrap().iter().map(|v| v * s).collect()).unwrap())
                .collect();
            let refs: Vec<&Tensor> = scaled.iter().collect();
            let w = entropy_weights(&refs).unwrap();
            let wv = w.as_f32().unwrap();
            assert!((wv.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(wv.windows(2).all(|p| p[1] > p[0]));
        }
    }

    #[test]
    fn temporal_examples() {
        let mut rng = Rng::new(5);
        let b = random_bank(&mut rng, 4, 3);
        let one = Tensor::from_f32(vec![1], vec![1.0]).unwrap();
        assert_eq!(temporal_aggregate(&[&b], &one).unwrap(), b);
        let w = Tensor::from_f32(vec![2], vec![0.3, 0.7]).unwrap();
        let same = temporal_aggregate(&[&b, &b], &w).unwrap();
        for (x, y) in same.means().as_f32().unwrap().iter().zip(b.means().as_f32().unwrap()) {
            assert!((x - y).abs() < 1e-6);
        }

        // Category 1 present only in the first bank (weight 0.3).
        let a = CategoryFeatureBank::new(
            Tensor::from_f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            vec![true, true],
        )
        .unwrap();
        let c = CategoryFeatureBank::new(
            Tensor::from_f32(vec![2, 2], vec![5.0, 6.0, 0.0, 0.0]).unwrap(),
            vec![true, false],
        )
        .unwrap();
        let out = temporal_aggregate(&[&a, &c], &w).unwrap();
        assert_eq!(out.vector(1), a.vector(1));
        for ch in 0..2 {
            let oracle = 0.3 * a.vector(0)[ch] as f64 + 0.7 * c.vector(0)[ch] as f64;
            assert!((out.vector(0)[ch] as f64 - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn temporal_errors() {
        let mut rng = Rng::new(6);
        let a = random_bank(&mut rng, 3, 2);
        let b = random_bank(&mut rng, 4, 2);
        let w = Tensor::from_f32(vec![2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(temporal_aggregate(&[&a, &b], &w), Err(Error::Shape(_))));
    }

    #[test]
    fn mmd_closed_forms() {
        let cfg = AggregationConfig {
            lambda_f: 0.25,
            ..Default::default()
        };
        let a = CategoryFeatureBank::new(
            Tensor::from_f32(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap(),
            vec![true, false],
        )
        .unwrap();
        let b = CategoryFeatureBank::new(
            Tensor::from_f32(vec![2, 3], vec![1.0, 2.5, 3.0, 9.0, 9.0, 9.0]).unwrap(),
            vec![true, true],
        )
        .unwrap();
        let out = mmd_align(&a, &b, &cfg).unwrap();
        assert!(!out.no_overlap);
        assert!((out.loss - 0.25 * 0.25).abs() < 1e-9);
        assert_eq!(mmd_align(&a, &a, &cfg).unwrap().loss, 0.0);

        let none = CategoryFeatureBank::new(Tensor::zeros_f32(vec![2, 3]).unwrap(), vec![false, false]).unwrap();
        let out = mmd_align(&a, &none, &cfg).unwrap();
        assert!(out.no_overlap);
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn mmd_properties() {
        let mut rng = Rng::new(7);
        for kernel in [Kernel::Linear, Kernel::Rbf { sigma: None }, Kernel::Rbf { sigma: Some(0.7) }] {
            let cfg = AggregationConfig {
                kernel,
                lambda_f: 1.0,
                ..Default::default()
            };
            for _ in 0..100 {
                let a = random_bank(&mut rng, 5, 3);
                let b = random_bank(&mut rng, 5, 3);
                assert!(mmd_align(&a, &a, &cfg).unwrap().loss.abs() < 1e-9);
                let ab = mmd_align(&a, &b, &cfg).unwrap().loss;
                let ba = mmd_align(&b, &a, &cfg).unwrap().loss;
                assert!((ab - ba).abs() < 1e-12);
                assert!(ab >= 0.0);
            }
        }
    }

    #[test]
    fn rbf_batch_matches_direct_estimator() {
        let mut rng = Rng::new(8);
        let mk = |rng: &mut Rng| {
            CategoryFeatureBank::new(
                Tensor::from_f32(vec![2, 2], (0..4).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap(),
                vec![true, true],
            )
            .unwrap()
        };
        let s: Vec<CategoryFeatureBank> = (0..3).map(|_| mk(&mut rng)).collect();
        let t: Vec<CategoryFeatureBank> = (0..2).map(|_| mk(&mut rng)).collect();
        let sigma = 0.9;
        let cfg = AggregationConfig {
            kernel: Kernel::Rbf { sigma: Some(sigma) },
            lambda_f: 1.0,
            ..Default::default()
        };
        let got = mmd_align_batch(&s.iter().collect::<Vec<_>>(), &t.iter().collect::<Vec<_>>(), &cfg)
            .unwrap()
            .loss;
        let vec_of = |b: &CategoryFeatureBank| -> Vec<f64> { b.means().as_f32().unwrap().iter().map(|&v| v as f64).collect() };
        let k = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
            (-d / (2.0 * sigma * sigma)).exp()
        };
        let (xs, ys): (Vec<_>, Vec<_>) = (s.iter().map(vec_of).collect(), t.iter().map(vec_of).collect());
        let mut kxx = 0.0;
        for a in &xs {
            for b in &xs {
                kxx += k(a, b);
            }
        }
        let mut kyy = 0.0;
        for a in &ys {
            for b in &ys {
                kyy += k(a, b);
            }
        }
        let mut kxy = 0.0;
        for a in &xs {
            for b in &ys {
                kxy += k(a, b);
            }
        }
        let oracle = kxx / 9.0 + kyy / 4.0 - 2.0 * kxy / 6.0;
        assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn config_checks() {
        assert_eq!(AggregationConfig::target_offsets_for(1), vec![1, 2]);
        assert_eq!(AggregationConfig::target_offsets_for(3), vec![1, 3, 4]);
        let bad = AggregationConfig {
            lambda_f: -1.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let parsed: AggregationConfig =
            serde_json::from_str(r#"{"kernel": {"kind": "rbf", "sigma": null}}"#).unwrap();
        assert_eq!(parsed.kernel, Kernel::Rbf { sigma: None });
        assert!(serde_json::from_str::<AggregationConfig>(r#"{"lamda_f": 1}"#).is_err());
    }
}
