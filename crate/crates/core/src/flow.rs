//! Flow-guided operations: backward warping, temporal feature fusion and
//! cross-frame pseudo-label generation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{FlowField, LabelMap, Tensor, IGNORE};

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(format!("expected C×H×W, got {s:?}"))),
    }
}

fn check_flow(flow: &FlowField, h: usize, w: usize) -> Result<()> {
    if flow.height() != h || flow.width() != w {
        return Err(Error::shape(format!(
            "flow is {}×{}, operand is {h}×{w}",
            flow.height(),
            flow.width()
        )));
    }
    Ok(())
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Samples `src` at `(x + u, y + v)` for every output pixel; coordinates are
/// clamped to the image before bilinear interpolation.
pub fn warp_bilinear(src: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let (c, h, w) = chw(src)?;
    check_flow(flow, h, w)?;
    let taps = math::flow_taps(flow.values(), h, w);
    let out = math::gather(&to_f64(src.as_f32()?), c, &taps);
    Tensor::from_f32(vec![c, h, w], to_f32(&out))
}

/// Nearest-neighbour backward warp for categorical maps.
pub fn warp_labels(src: &LabelMap, flow: &FlowField) -> Result<LabelMap> {
    let (h, w) = (src.height(), src.width());
    check_flow(flow, h, w)?;
    let fv = flow.values();
    let sv = src.values();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = (x as f64 + fv[2 * i] as f64).clamp(0.0, (w - 1) as f64).round() as usize;
            let sy = (y as f64 + fv[2 * i + 1] as f64).clamp(0.0, (h - 1) as f64).round() as usize;
            out.push(sv[sy * w + sx]);
        }
    }
    LabelMap::from_vec(h, w, out, src.num_categories())
}

/// Chains two backward flows: the result maps frame `t` pixels to frame `t−2`
/// given `later = o(t−1→t)` and `earlier = o(t−2→t−1)`.
pub fn compose_flows(later: &FlowField, earlier: &FlowField) -> Result<FlowField> {
    let (h, w) = (later.height(), later.width());
    check_flow(earlier, h, w)?;
    let n = h * w;
    let ev = earlier.values();
    let mut planar = vec![0.0; 2 * n];
    for i in 0..n {
        planar[i] = ev[2 * i] as f64;
        planar[n + i] = ev[2 * i + 1] as f64;
    }
    let taps = math::flow_taps(later.values(), h, w);
    let sampled = math::gather(&planar, 2, &taps);
    let lv = later.values();
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        out.push((lv[2 * i] as f64 + sampled[i]) as f32);
        out.push((lv[2 * i + 1] as f64 + sampled[n + i]) as f32);
    }
    FlowField::from_vec(h, w, out)
}

/// Linear map over the channel concatenation `[warped_prev; current]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    weights: Tensor,
    bias: Tensor,
}

impl FusionParams {
    /// `weights` is C×2C, `bias` is C.
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let (c_out, c_in2) = match *weights.shape() {
            [a, b] => (a, b),
            ref s => return Err(Error::shape(format!("fusion weights must be 2-D, got {s:?}"))),
        };
        if c_in2 != 2 * c_out {
            return Err(Error::shape(format!(
                "fusion must map 2C -> C, got {c_out}×{c_in2}"
            )));
        }
        if bias.shape() != [c_out] {
            return Err(Error::shape(format!(
                "fusion bias must have {c_out} entries, got {:?}",
                bias.shape()
            )));
        }
        if weights
            .as_f32()?
            .iter()
            .chain(bias.as_f32()?)
            .any(|v| !v.is_finite())
        {
            return Err(Error::shape("fusion parameters must be finite"));
        }
        Ok(Self { weights, bias })
    }

    /// The averaging map `0.5·a + 0.5·b` for `channels` channels.
    pub fn averaging(channels: usize) -> Self {
        let mut w = vec![0.0f32; channels * 2 * channels];
        for c in 0..channels {
            w[c * 2 * channels + c] = 0.5;
            w[c * 2 * channels + channels + c] = 0.5;
        }
        Self::new(
            Tensor::from_f32(vec![channels, 2 * channels], w).unwrap(),
            Tensor::from_f32(vec![channels], vec![0.0; channels]).unwrap(),
        )
        .expect("valid averaging params")
    }

    pub fn channels(&self) -> usize {
        self.bias.shape()[0]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub(crate) fn weights_f64(&self) -> Vec<f64> {
        to_f64(self.weights.as_f32().unwrap())
    }

    pub(crate) fn bias_f64(&self) -> Vec<f64> {
        to_f64(self.bias.as_f32().unwrap())
    }
}

/// Applies a 2C→C map per pixel to a pair of C×H×W tensors.
pub(crate) fn apply_pair(a: &Tensor, b: &Tensor, p: &FusionParams) -> Result<Tensor> {
    let (c, h, w) = chw(a)?;
    if b.shape() != a.shape() {
        return Err(Error::shape(format!(
            "operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if p.channels() != c {
        return Err(Error::shape(format!(
            "params map {} channels, operands have {c}",
            p.channels()
        )));
    }
    let n = h * w;
    let out = math::affine_pixels(
        &p.weights_f64(),
        &p.bias_f64(),
        &[&to_f64(a.as_f32()?), &to_f64(b.as_f32()?)],
        &[c, c],
        n,
    );
    Tensor::from_f32(vec![c, h, w], to_f32(&out))
}

/// Temporal fusion of the flow-warped previous feature with the current one.
pub fn fuse(prev_warped: &Tensor, current: &Tensor, p: &FusionParams) -> Result<Tensor> {
    apply_pair(prev_warped, current, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoLabelConfig {
    /// Temporal deviation between the labelling pass and the labelled frame.
    pub tau: usize,
    pub confidence_threshold: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            tau: 1,
            confidence_threshold: 0.9,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 {
            return Err(Error::Config("tau must be >= 1".into()));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "confidence threshold {} outside (0, 1]",
                self.confidence_threshold
            )));
        }
        Ok(())
    }
}

/// Softmax, warp each probability channel along `flow`, renormalize, then
/// argmax with confidence filtering. Kernel shared with the training engine.
pub(crate) fn pseudo_label_kernel(
    logits: &[f64],
    k: usize,
    h: usize,
    w: usize,
    flow: &FlowField,
    threshold: f64,
) -> Vec<u16> {
    let n = h * w;
    let probs = math::softmax_channels(logits, k);
    let taps = math::flow_taps(flow.values(), h, w);
    let warped = math::gather(&probs, k, &taps);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let total: f64 = (0..k).map(|c| warped[c * n + i]).sum();
        let (best, pmax) = (0..k)
            .map(|c| (c, warped[c * n + i]))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        let conf = pmax / total;
        out.push(if conf < threshold { IGNORE } else { best as u16 });
    }
    out
}

/// Cross-frame pseudo-label for frame `t` from logits decoded at `t − τ`.
pub fn generate_pseudo_label(
    logits: &Tensor,
    flow: &FlowField,
    cfg: &PseudoLabelConfig,
) -> Result<LabelMap> {
    cfg.validate()?;
    let (k, h, w) = chw(logits)?;
    if k < 2 {
        return Err(Error::shape(format!("need at least 2 classes, got {k}")));
    }
    check_flow(flow, h, w)?;
    let labels = pseudo_label_kernel(
        &to_f64(logits.as_f32()?),
        k,
        h,
        w,
        flow,
        cfg.confidence_threshold,
    );
    LabelMap::from_vec(h, w, labels, k)
}

/// Pixels where `labels_t` agrees with `labels_prev` carried forward along
/// `flow`, counted over pixels where both are labelled. Returns (agree, total).
pub fn temporal_consistency(
    labels_t: &LabelMap,
    labels_prev: &LabelMap,
    flow: &FlowField,
) -> Result<(usize, usize)> {
    if labels_t.height() != labels_prev.height() || labels_t.width() != labels_prev.width() {
        return Err(Error::shape("label maps differ in size"));
    }
    let carried = warp_labels(labels_prev, flow)?;
    let mut agree = 0;
    let mut total = 0;
    for (&a, &b) in labels_t.values().iter().zip(carried.values()) {
        if a != IGNORE && b != IGNORE {
            total += 1;
            agree += usize::from(a == b);
        }
    }
    Ok((agree, total))
}
