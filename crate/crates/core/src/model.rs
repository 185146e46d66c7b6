//! The toy segmentation network: fixed per-pixel features, learned temporal
//! fusion, learned linear decoder, and the learned feature-mixing map.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FusionParams;
use crate::math;
use crate::tensor::{read_tensor, write_tensor, FlowField, FrameStack, LabelMap, Tensor};

/// R, G, B, x/W, y/H and the 3×3 local mean of R, G, B, each shifted by
/// [`FEATURE_CENTER`].
pub const FEATURE_CHANNELS: usize = 9;
const F: usize = FEATURE_CHANNELS;
/// Subtracted from every channel so features sit around zero, which keeps
/// SGD well conditioned.
pub const FEATURE_CENTER: f64 = 0.5;

/// Fixed feature map of one RGB frame, planar 9×N.
pub(crate) fn pixel_features(frame: &[f32], h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    let mut out = vec![0.0; F * n];
    for c in 0..3 {
        for i in 0..n {
            out[c * n + i] = frame[c * n + i] as f64 - FEATURE_CENTER;
        }
    }
    for y in 0..h {
        for x in 0..w {
            out[3 * n + y * w + x] = x as f64 / w as f64 - FEATURE_CENTER;
            out[4 * n + y * w + x] = y as f64 / h as f64 - FEATURE_CENTER;
        }
    }
    // Separable 3×3 box sum with edge clamping.
    let clamp = |i: usize, d: isize, len: usize| (i as isize + d).clamp(0, len as isize - 1) as usize;
    let mut rows = vec![0.0f64; n];
    for c in 0..3 {
        let plane = &frame[c * n..(c + 1) * n];
        for y in 0..h {
            let r = &plane[y * w..(y + 1) * w];
            for x in 0..w {
                rows[y * w + x] = r[clamp(x, -1, w)] as f64 + r[x] as f64 + r[clamp(x, 1, w)] as f64;
            }
        }
        let dst = &mut out[(5 + c) * n..(6 + c) * n];
        for y in 0..h {
            let (up, down) = (clamp(y, -1, h) * w, clamp(y, 1, h) * w);
            for x in 0..w {
                dst[y * w + x] = (rows[up + x] + rows[y * w + x] + rows[down + x]) / 9.0 - FEATURE_CENTER;
            }
        }
    }
    out
}

/// Fixed features of every frame in a stack.
pub(crate) fn stack_features(frames: &FrameStack) -> Vec<Vec<f64>> {
    (0..frames.len())
        .map(|i| pixel_features(frames.frame(i), frames.height(), frames.width()))
        .collect()
}

/// Index ranges of each parameter group inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub k: usize,
}

impl Layout {
    pub fn fusion_w(&self) -> std::ops::Range<usize> {
        0..F * 2 * F
    }
    pub fn fusion_b(&self) -> std::ops::Range<usize> {
        let s = F * 2 * F;
        s..s + F
    }
    pub fn cls_w(&self) -> std::ops::Range<usize> {
        let s = self.fusion_b().end;
        s..s + self.k * F
    }
    pub fn cls_b(&self) -> std::ops::Range<usize> {
        let s = self.cls_w().end;
        s..s + self.k
    }
    pub fn psi_w(&self) -> std::ops::Range<usize> {
        let s = self.cls_b().end;
        s..s + F * 2 * F
    }
    pub fn psi_b(&self) -> std::ops::Range<usize> {
        let s = self.psi_w().end;
        s..s + F
    }
    pub fn len(&self) -> usize {
        self.psi_b().end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    num_categories: usize,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    num_categories: usize,
    feature_channels: usize,
}

fn averaging_block(out: &mut [f64]) {
    for c in 0..F {
        out[c * 2 * F + c] = 0.5;
        out[c * 2 * F + F + c] = 0.5;
    }
}

impl ToyModel {
    /// Averaging fusion and feature-mix maps, zero decoder.
    pub fn new(num_categories: usize) -> Result<Self> {
        if num_categories < 2 {
            return Err(Error::shape(format!("need at least 2 categories, got {num_categories}")));
        }
        let layout = Layout { k: num_categories };
        let mut params = vec![0.0; layout.len()];
        averaging_block(&mut params[layout.fusion_w()]);
        averaging_block(&mut params[layout.psi_w()]);
        Ok(Self {
            num_categories,
            params,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout {
            k: self.num_categories,
        }
    }

    /// All learned parameters as one flat vector.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("parameters must be finite"));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn group_tensor(&self, r: std::ops::Range<usize>, shape: Vec<usize>) -> Tensor {
        Tensor::from_f32(shape, self.params[r].iter().map(|&v| v as f32).collect()).unwrap()
    }

    pub fn fusion(&self) -> FusionParams {
        let l = self.layout();
        FusionParams::new(
            self.group_tensor(l.fusion_w(), vec![F, 2 * F]),
            self.group_tensor(l.fusion_b(), vec![F]),
        )
        .expect("fusion shape")
    }

    pub fn psi(&self) -> FusionParams {
        let l = self.layout();
        FusionParams::new(
            self.group_tensor(l.psi_w(), vec![F, 2 * F]),
            self.group_tensor(l.psi_b(), vec![F]),
        )
        .expect("psi shape")
    }

    /// Decoder weights (K×9) and bias (K).
    pub fn classifier(&self) -> (Tensor, Tensor) {
        let l = self.layout();
        (
            self.group_tensor(l.cls_w(), vec![self.num_categories, F]),
            self.group_tensor(l.cls_b(), vec![self.num_categories]),
        )
    }

    pub(crate) fn fuse_f64(&self, prev_warped: &[f64], current: &[f64], n: usize) -> Vec<f64> {
        let l = self.layout();
        math::affine_pixels(
            &self.params[l.fusion_w()],
            &self.params[l.fusion_b()],
            &[prev_warped, current],
            &[F, F],
            n,
        )
    }

    pub(crate) fn decode_f64(&self, fused: &[f64], n: usize) -> Vec<f64> {
        let l = self.layout();
        math::affine_pixels(&self.params[l.cls_w()], &self.params[l.cls_b()], &[fused], &[F], n)
    }

    /// Fused feature of the last frame: fusion of the flow-warped previous
    /// feature with the current one, or of the current feature with itself for
    /// a single frame.
    pub(crate) fn fused_from_features(&self, feats: &[Vec<f64>], flow: Option<&FlowField>, h: usize, w: usize) -> Vec<f64> {
        let n = h * w;
        match (feats.len(), flow) {
            (2, Some(fl)) => {
                let taps = math::flow_taps(fl.values(), h, w);
                let warped = math::gather(&feats[0], F, &taps);
                self.fuse_f64(&warped, &feats[1], n)
            }
            _ => {
                let cur = feats.last().expect("at least one frame");
                self.fuse_f64(cur, cur, n)
            }
        }
    }

    fn check_input(frames: &FrameStack, flow: Option<&FlowField>) -> Result<()> {
        if frames.channels() != 3 {
            return Err(Error::shape(format!("model expects RGB frames, got {} channels", frames.channels())));
        }
        match (frames.len(), flow) {
            (2, Some(f)) if f.height() == frames.height() && f.width() == frames.width() => Ok(()),
            (1, None) => Ok(()),
            _ => Err(Error::shape(
                "video input needs two frames and a matching flow; image input one frame and no flow",
            )),
        }
    }

    pub(crate) fn logits_f64(&self, frames: &FrameStack, flow: Option<&FlowField>) -> Vec<f64> {
        let (h, w) = (frames.height(), frames.width());
        let fused = self.fused_from_features(&stack_features(frames), flow, h, w);
        self.decode_f64(&fused, h * w)
    }

    /// Fused features of the last frame, C×H×W.
    pub fn fused_features(&self, frames: &FrameStack, flow: Option<&FlowField>) -> Result<Tensor> {
        Self::check_input(frames, flow)?;
        let (h, w) = (frames.height(), frames.width());
        let fused = self.fused_from_features(&stack_features(frames), flow, h, w);
        Tensor::from_f32(vec![F, h, w], fused.into_iter().map(|v| v as f32).collect())
    }

    /// Decoder logits for the last frame of the stack, K×H×W.
    pub fn logits(&self, frames: &FrameStack, flow: Option<&FlowField>) -> Result<Tensor> {
        Self::check_input(frames, flow)?;
        let (h, w) = (frames.height(), frames.width());
        let z = self.logits_f64(frames, flow);
        Tensor::from_f32(
            vec![self.num_categories, h, w],
            z.into_iter().map(|v| v as f32).collect(),
        )
    }

    /// Arg-max prediction for the last frame of the stack.
    pub fn predict(&self, frames: &FrameStack, flow: Option<&FlowField>) -> Result<LabelMap> {
        Self::check_input(frames, flow)?;
        let (h, w) = (frames.height(), frames.width());
        let n = h * w;
        let k = self.num_categories;
        let z = self.logits_f64(frames, flow);
        let labels = (0..n)
            .map(|i| {
                (0..k)
                    .fold((0usize, f64::NEG_INFINITY), |best, c| {
                        if z[c * n + i] > best.1 {
                            (c, z[c * n + i])
                        } else {
                            best
                        }
                    })
                    .0 as u16
            })
            .collect();
        LabelMap::from_vec(h, w, labels, k)
    }

    /// Writes the parameter groups as QTNS files plus `model.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let io = |source| Error::Io { offset: 0, source };
        std::fs::create_dir_all(dir).map_err(io)?;
        let (cw, cb) = self.classifier();
        let fusion = self.fusion();
        let psi = self.psi();
        let groups: [(&str, &Tensor); 6] = [
            ("fusion_weight", fusion.weights()),
            ("fusion_bias", fusion.bias()),
            ("classifier_weight", &cw),
            ("classifier_bias", &cb),
            ("psi_weight", psi.weights()),
            ("psi_bias", psi.bias()),
        ];
        for (name, t) in groups {
            let f = File::create(dir.join(format!("{name}.qtns"))).map_err(io)?;
            write_tensor(t, BufWriter::new(f))?;
        }
        let meta = ModelMeta {
            num_categories: self.num_categories,
            feature_channels: F,
        };
        let json = serde_json::to_string_pretty(&meta).expect("serializable");
        std::fs::write(dir.join("model.json"), json + "\n").map_err(io)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let io = |source| Error::Io { offset: 0, source };
        let meta: ModelMeta = serde_json::from_str(
            &std::fs::read_to_string(dir.join("model.json")).map_err(io)?,
        )
        .map_err(|e| Error::Format(format!("model.json: {e}")))?;
        if meta.feature_channels != F {
            return Err(Error::Format(format!(
                "model has {} feature channels, this build uses {F}",
                meta.feature_channels
            )));
        }
        let mut model = Self::new(meta.num_categories)?;
        let l = model.layout();
        let groups = [
            ("fusion_weight", l.fusion_w()),
            ("fusion_bias", l.fusion_b()),
            ("classifier_weight", l.cls_w()),
            ("classifier_bias", l.cls_b()),
            ("psi_weight", l.psi_w()),
            ("psi_bias", l.psi_b()),
        ];
        for (name, range) in groups {
            let f = File::open(dir.join(format!("{name}.qtns"))).map_err(io)?;
            let t = read_tensor(BufReader::new(f))?;
            let v = t.as_f32().map_err(|_| Error::Format(format!("{name} must be F32")))?;
            if v.len() != range.len() {
                return Err(Error::Format(format!(
                    "{name} has {} values, expected {}",
                    v.len(),
                    range.len()
                )));
            }
            for (dst, &src) in model.params[range].iter_mut().zip(v) {
                *dst = src as f64;
            }
        }
        if model.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("model parameters must be finite".into()));
        }
        Ok(model)
    }
}
