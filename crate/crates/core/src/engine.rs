//! Forward and hand-written backward passes of the full training objective
//! for one prepared batch. Labels, pseudo-labels, masks and flows inside a
//! batch are constants; gradients flow through fusion, feature mixing,
//! warping of learned features, aggregation and alignment.

use serde::Serialize;

use crate::aggregate::{self, Kernel};
use crate::error::{Error, Result};
use crate::flow::compose_flows;
use crate::math::{self, Taps};
use crate::mixer::{self, MixBundle, UnionMask};
use crate::model::{pixel_features, stack_features, ToyModel, FEATURE_CHANNELS as F};
use crate::tensor::{FlowField, FrameStack, LabelMap, Tensor, IGNORE};

/// Which objective a cross-entropy term is reported under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossGroup {
    QuadMix,
    Ssl,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub quadmix: f64,
    pub agg: f64,
    pub ssl: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.quadmix + self.agg + self.ssl
    }

    pub fn is_finite(&self) -> bool {
        self.quadmix.is_finite() && self.agg.is_finite() && self.ssl.is_finite()
    }
}

/// Fixed features of a one- or two-frame stack and the warp taps from the
/// previous frame onto the current one.
#[derive(Debug, Clone)]
struct StackInput {
    feats: Vec<Vec<f64>>,
    taps: Option<Vec<Taps>>,
}

impl StackInput {
    fn new(frames: &FrameStack, flow: Option<&FlowField>) -> Self {
        let (h, w) = (frames.height(), frames.width());
        Self {
            feats: stack_features(frames),
            taps: flow.map(|f| math::flow_taps(f.values(), h, w)),
        }
    }
}

#[derive(Debug, Clone)]
struct FeatureMixInput {
    /// Per-frame features of the inter-mixed source sample.
    other: Vec<Vec<f64>>,
    /// Per-frame soft union mask at feature resolution.
    masks: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct CeTerm {
    group: LossGroup,
    input: StackInput,
    labels: Vec<u16>,
    weight: f64,
    mix: Option<FeatureMixInput>,
}

#[derive(Debug, Clone)]
struct AggStep {
    input: StackInput,
    /// Taps carrying the fused feature at `t′` into `t`; `None` when `t′ = t`.
    to_t: Option<Vec<Taps>>,
}

#[derive(Debug, Clone)]
struct AggDomain {
    steps: Vec<AggStep>,
    labels: Vec<u16>,
}

#[derive(Debug, Clone)]
struct AggTerm {
    source: AggDomain,
    target: AggDomain,
    kernel: Kernel,
    lambda_f: f64,
}

/// Frames and labels of one clip as seen by the aggregation branch.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentView<'a> {
    /// One 3×H×W tensor per time index.
    pub frames: &'a [Tensor],
    /// `flows[i]` maps frame `i` pixels back into frame `i − 1`.
    pub flows: &'a [FlowField],
    pub t: usize,
    /// Labels (or pseudo-labels) in the geometry of frame `t`.
    pub labels: &'a LabelMap,
    /// Aggregated timesteps as offsets `d` meaning `t − d`; 0 is `t` itself.
    pub offsets: &'a [usize],
}

/// Everything one optimization step needs, with all labels detached.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    k: usize,
    h: usize,
    w: usize,
    ce: Vec<CeTerm>,
    agg: Option<AggTerm>,
}

impl PreparedBatch {
    pub fn new(num_categories: usize, h: usize, w: usize) -> Self {
        Self {
            k: num_categories,
            h,
            w,
            ce: Vec::new(),
            agg: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ce.is_empty() && self.agg.is_none()
    }

    fn check_frames(&self, frames: &FrameStack, flow: Option<&FlowField>, labels: &LabelMap) -> Result<()> {
        if frames.height() != self.h || frames.width() != self.w || frames.channels() != 3 {
            return Err(Error::shape(format!(
                "batch is {}×{} RGB, frames are {}×{}×{}",
                self.h,
                self.w,
                frames.channels(),
                frames.height(),
                frames.width()
            )));
        }
        if labels.height() != self.h || labels.width() != self.w {
            return Err(Error::shape("labels do not match the batch size"));
        }
        if labels.num_categories() != self.k {
            return Err(Error::Category(format!(
                "labels have {} categories, batch has {}",
                labels.num_categories(),
                self.k
            )));
        }
        match (frames.len(), flow) {
            (2, Some(f)) if f.height() == self.h && f.width() == self.w => Ok(()),
            (1, None) => Ok(()),
            _ => Err(Error::shape("video terms need two frames and a flow; image terms one frame")),
        }
    }

    /// Adds `weight · CE(G(frames), labels)`.
    pub fn push_cross_entropy(
        &mut self,
        group: LossGroup,
        frames: &FrameStack,
        flow: Option<&FlowField>,
        labels: &LabelMap,
        weight: f64,
    ) -> Result<()> {
        self.check_frames(frames, flow, labels)?;
        self.ce.push(CeTerm {
            group,
            input: StackInput::new(frames, flow),
            labels: labels.values().to_vec(),
            weight,
            mix: None,
        });
        Ok(())
    }

    /// Adds `weight · CE(G(target), labels of target)` where the target's
    /// per-frame features are first blended with the source's under `union`.
    pub fn push_feature_mixed_cross_entropy(
        &mut self,
        group: LossGroup,
        source: &MixBundle,
        target: &MixBundle,
        union: &UnionMask,
        weight: f64,
    ) -> Result<()> {
        self.check_frames(target.frames(), target.flow(), target.label())?;
        if source.frames().tensor().shape() != target.frames().tensor().shape() {
            return Err(Error::shape("source and target bundles differ in shape"));
        }
        if union.frames() != target.frames().len() {
            return Err(Error::shape("union mask frame count differs from the bundles"));
        }
        let (h, w) = (self.h, self.w);
        let masks = (0..union.frames())
            .map(|i| mixer::resize_bilinear(&union.plane_f64(i), union.height(), union.width(), h, w))
            .collect();
        self.ce.push(CeTerm {
            group,
            input: StackInput::new(target.frames(), target.flow()),
            labels: target.label().values().to_vec(),
            weight,
            mix: Some(FeatureMixInput {
                other: stack_features(source.frames()),
                masks,
            }),
        });
        Ok(())
    }

    fn agg_domain(&self, view: &AlignmentView<'_>) -> Result<AggDomain> {
        let (h, w) = (self.h, self.w);
        if view.labels.height() != h || view.labels.width() != w {
            return Err(Error::shape("alignment labels do not match the batch size"));
        }
        if view.labels.num_categories() != self.k {
            return Err(Error::Category("alignment labels use a different label space".into()));
        }
        if view.t >= view.frames.len() || view.flows.len() != view.frames.len() {
            return Err(Error::shape("alignment view needs one flow per frame and t inside the clip"));
        }
        let frame_at = |i: usize| -> Result<&[f32]> {
            let f = &view.frames[i];
            if f.shape() != [3, h, w] {
                return Err(Error::shape(format!("frame {i} has shape {:?}", f.shape())));
            }
            f.as_f32()
        };
        let mut steps = Vec::new();
        for &d in view.offsets {
            if d == 0 {
                let cur = pixel_features(frame_at(view.t)?, h, w);
                steps.push(AggStep {
                    input: StackInput {
                        feats: vec![cur],
                        taps: None,
                    },
                    to_t: None,
                });
                continue;
            }
            if d + 1 > view.t {
                return Err(Error::shape(format!(
                    "offset {d} at t = {} reaches before the start of the clip",
                    view.t
                )));
            }
            let tp = view.t - d;
            // Chain o(t−1→t), o(t−2→t−1), … down to t′.
            let mut to_t = view.flows[view.t].clone();
            for i in (tp + 1..view.t).rev() {
                to_t = compose_flows(&to_t, &view.flows[i])?;
            }
            steps.push(AggStep {
                input: StackInput {
                    feats: vec![pixel_features(frame_at(tp - 1)?, h, w), pixel_features(frame_at(tp)?, h, w)],
                    taps: Some(math::flow_taps(view.flows[tp].values(), h, w)),
                },
                to_t: Some(math::flow_taps(to_t.values(), h, w)),
            });
        }
        if steps.is_empty() {
            return Err(Error::shape("alignment needs at least one timestep"));
        }
        Ok(AggDomain {
            steps,
            labels: view.labels.values().to_vec(),
        })
    }

    /// Sets the aggregation/alignment term between the two domains.
    pub fn set_alignment(
        &mut self,
        source: AlignmentView<'_>,
        target: AlignmentView<'_>,
        kernel: Kernel,
        lambda_f: f64,
    ) -> Result<()> {
        self.agg = Some(AggTerm {
            source: self.agg_domain(&source)?,
            target: self.agg_domain(&target)?,
            kernel,
            lambda_f,
        });
        Ok(())
    }
}

/// Mean cross-entropy over labelled pixels and its gradient w.r.t. logits.
pub(crate) fn ce_with_grad(logits: &[f64], k: usize, labels: &[u16]) -> (f64, Vec<f64>, usize) {
    let n = labels.len();
    let valid = labels.iter().filter(|&&l| l != IGNORE).count();
    let mut grad = vec![0.0; k * n];
    if valid == 0 {
        return (0.0, grad, 0);
    }
    let lsm = math::log_softmax_channels(logits, k);
    let inv = 1.0 / valid as f64;
    let mut loss = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        let l = l as usize;
        loss -= lsm[l * n + i];
        for c in 0..k {
            grad[c * n + i] = lsm[c * n + i].exp() * inv;
        }
        grad[l * n + i] -= inv;
    }
    (loss * inv, grad, valid)
}

#[derive(Default)]
struct Grads {
    fw: Vec<f64>,
    fb: Vec<f64>,
    cw: Vec<f64>,
    cb: Vec<f64>,
    pw: Vec<f64>,
    pb: Vec<f64>,
}

impl Grads {
    fn zeros(k: usize) -> Self {
        Self {
            fw: vec![0.0; F * 2 * F],
            fb: vec![0.0; F],
            cw: vec![0.0; k * F],
            cb: vec![0.0; k],
            pw: vec![0.0; F * 2 * F],
            pb: vec![0.0; F],
        }
    }

    fn flatten(self) -> Vec<f64> {
        [self.fw, self.fb, self.cw, self.cb, self.pw, self.pb].concat()
    }
}

fn masked(feat: &[f64], mask: &[f64]) -> Vec<f64> {
    let n = mask.len();
    let mut out = feat.to_vec();
    for ch in 0..out.len() / n {
        for i in 0..n {
            out[ch * n + i] *= mask[i];
        }
    }
    out
}

fn ce_term(model: &ToyModel, term: &CeTerm, n: usize, grads: &mut Grads) -> f64 {
    let p = model.params();
    let l = model.layout();
    let (psi_w, psi_b) = (&p[l.psi_w()], &p[l.psi_b()]);
    let g: Vec<Vec<f64>> = match &term.mix {
        Some(m) => (0..term.input.feats.len())
            .map(|f| mixer::feature_mix_kernel(&m.other[f], &term.input.feats[f], &m.masks[f], F, psi_w, psi_b))
            .collect(),
        None => term.input.feats.clone(),
    };
    let cur = g.last().expect("at least one frame");
    let prev_w = match &term.input.taps {
        Some(t) => math::gather(&g[0], F, t),
        None => cur.clone(),
    };
    let fused = model.fuse_f64(&prev_w, cur, n);
    let logits = model.decode_f64(&fused, n);
    let k = model.num_categories();
    let (loss, mut dlog, valid) = ce_with_grad(&logits, k, &term.labels);
    if valid == 0 || term.weight == 0.0 {
        return loss * term.weight;
    }
    dlog.iter_mut().for_each(|v| *v *= term.weight);

    let dfused = math::affine_pixels_backward(
        &p[l.cls_w()],
        &[&fused],
        &[F],
        n,
        &dlog,
        &mut grads.cw,
        &mut grads.cb,
        true,
    )
    .remove(0);
    let din = math::affine_pixels_backward(
        &p[l.fusion_w()],
        &[&prev_w, cur],
        &[F, F],
        n,
        &dfused,
        &mut grads.fw,
        &mut grads.fb,
        term.mix.is_some(),
    );
    if let Some(m) = &term.mix {
        let dg: Vec<Vec<f64>> = match &term.input.taps {
            Some(t) => vec![math::scatter(&din[0], F, t), din[1].clone()],
            None => vec![din[0].iter().zip(&din[1]).map(|(a, b)| a + b).collect()],
        };
        for (f, d) in dg.iter().enumerate() {
            let ms = masked(&m.other[f], &m.masks[f]);
            let mt = masked(&term.input.feats[f], &m.masks[f]);
            math::affine_pixels_backward(psi_w, &[&ms, &mt], &[F, F], n, d, &mut grads.pw, &mut grads.pb, false);
        }
    }
    loss * term.weight
}

/// Cached forward quantities of one domain's aggregation branch.
struct DomainForward {
    prev_w: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    means: Vec<Vec<f64>>,
    counts: Vec<Vec<usize>>,
    valid: Vec<Vec<bool>>,
    omega: Vec<f64>,
    bank: Vec<f64>,
    bank_valid: Vec<bool>,
}

fn agg_forward(model: &ToyModel, dom: &AggDomain, k: usize, n: usize) -> DomainForward {
    let mut out = DomainForward {
        prev_w: Vec::new(),
        g: Vec::new(),
        means: Vec::new(),
        counts: Vec::new(),
        valid: Vec::new(),
        omega: Vec::new(),
        bank: Vec::new(),
        bank_valid: Vec::new(),
    };
    let mut neg_entropy = Vec::new();
    for step in &dom.steps {
        let cur = step.input.feats.last().unwrap();
        let prev_w = match &step.input.taps {
            Some(t) => math::gather(&step.input.feats[0], F, t),
            None => cur.clone(),
        };
        let fused = model.fuse_f64(&prev_w, cur, n);
        let g = match &step.to_t {
            Some(t) => math::gather(&fused, F, t),
            None => fused,
        };
        let (means, counts) = aggregate::category_means(&g, F, &dom.labels, k);
        neg_entropy.push(-aggregate::mean_entropy(&g, F));
        out.valid.push(counts.iter().map(|&c| c > 0).collect());
        out.means.push(means);
        out.counts.push(counts);
        out.prev_w.push(prev_w);
        out.g.push(g);
    }
    out.omega = math::softmax(&neg_entropy);
    let mrefs: Vec<&[f64]> = out.means.iter().map(|m| m.as_slice()).collect();
    let vrefs: Vec<&[bool]> = out.valid.iter().map(|v| v.as_slice()).collect();
    let (bank, ok) = aggregate::combine_banks(&mrefs, &vrefs, &out.omega, k, F);
    out.bank = bank;
    out.bank_valid = ok;
    out
}

fn agg_backward(
    model: &ToyModel,
    dom: &AggDomain,
    fwd: &DomainForward,
    gbank: &[f64],
    k: usize,
    n: usize,
    grads: &mut Grads,
) {
    let p = model.params();
    let l = model.layout();
    let steps = dom.steps.len();
    let norm: Vec<f64> = (0..k)
        .map(|kk| (0..steps).filter(|&s| fwd.valid[s][kk]).map(|s| fwd.omega[s]).sum())
        .collect();
    let active: Vec<bool> = (0..k).map(|kk| gbank[kk * F..(kk + 1) * F].iter().any(|&v| v != 0.0)).collect();

    let mut domega = vec![0.0; steps];
    let mut dg: Vec<Vec<f64>> = vec![vec![0.0; F * n]; steps];
    for s in 0..steps {
        for kk in 0..k {
            if !active[kk] || !fwd.valid[s][kk] {
                continue;
            }
            let row = &gbank[kk * F..(kk + 1) * F];
            domega[s] += (0..F)
                .map(|c| row[c] * (fwd.means[s][kk * F + c] - fwd.bank[kk * F + c]))
                .sum::<f64>()
                / norm[kk];
        }
        for (i, &lab) in dom.labels.iter().enumerate() {
            if lab == IGNORE {
                continue;
            }
            let kk = lab as usize;
            if !active[kk] {
                continue;
            }
            let scale = fwd.omega[s] / norm[kk] / fwd.counts[s][kk] as f64;
            for c in 0..F {
                dg[s][c * n + i] += gbank[kk * F + c] * scale;
            }
        }
    }
    // Softmax over negative entropies.
    let dot: f64 = fwd.omega.iter().zip(&domega).map(|(a, b)| a * b).sum();
    for s in 0..steps {
        let dz = fwd.omega[s] * (domega[s] - dot);
        let de = -dz;
        if de == 0.0 {
            continue;
        }
        let prob = math::softmax_channels(&fwd.g[s], F);
        for i in 0..n {
            let mut h = 0.0;
            for c in 0..F {
                let pc = prob[c * n + i];
                if pc > 0.0 {
                    h -= pc * pc.ln();
                }
            }
            for c in 0..F {
                let pc = prob[c * n + i];
                if pc > 0.0 {
                    dg[s][c * n + i] += de * (-pc * (pc.ln() + h)) / n as f64;
                }
            }
        }
    }
    for (s, step) in dom.steps.iter().enumerate() {
        let dfused = match &step.to_t {
            Some(t) => math::scatter(&dg[s], F, t),
            None => std::mem::take(&mut dg[s]),
        };
        let cur = step.input.feats.last().unwrap();
        math::affine_pixels_backward(
            &p[l.fusion_w()],
            &[&fwd.prev_w[s], cur],
            &[F, F],
            n,
            &dfused,
            &mut grads.fw,
            &mut grads.fb,
            false,
        );
    }
}

fn agg_term(model: &ToyModel, term: &AggTerm, k: usize, n: usize, grads: &mut Grads) -> f64 {
    let fs = agg_forward(model, &term.source, k, n);
    let ft = agg_forward(model, &term.target, k, n);
    let common: Vec<usize> = (0..k).filter(|&kk| fs.bank_valid[kk] && ft.bank_valid[kk]).collect();
    if common.is_empty() || term.lambda_f == 0.0 {
        return 0.0;
    }
    let mut diff = vec![0.0; k * F];
    let mut d2 = 0.0;
    for &kk in &common {
        for c in 0..F {
            let d = fs.bank[kk * F + c] - ft.bank[kk * F + c];
            diff[kk * F + c] = d;
            d2 += d * d;
        }
    }
    let (loss, dl_dd2) = match term.kernel {
        Kernel::Linear => (term.lambda_f * d2, term.lambda_f),
        Kernel::Rbf { sigma } => {
            // Bandwidth is a constant of the step (median of one pair is its distance).
            let s2 = match sigma {
                Some(s) => s * s,
                None if d2 > 0.0 => d2,
                None => 1.0,
            };
            let kv = (-d2 / (2.0 * s2)).exp();
            (term.lambda_f * (2.0 - 2.0 * kv), term.lambda_f * kv / s2)
        }
    };
    let gs: Vec<f64> = diff.iter().map(|d| 2.0 * dl_dd2 * d).collect();
    let gt: Vec<f64> = gs.iter().map(|v| -v).collect();
    agg_backward(model, &term.source, &fs, &gs, k, n, grads);
    agg_backward(model, &term.target, &ft, &gt, k, n, grads);
    loss
}

/// Loss breakdown and the gradient of the total w.r.t. [`ToyModel::params`].
pub fn loss_and_grad(model: &ToyModel, batch: &PreparedBatch) -> Result<(LossBreakdown, Vec<f64>)> {
    let k = model.num_categories();
    if k != batch.k {
        return Err(Error::Category(format!(
            "model has {k} categories, batch has {}",
            batch.k
        )));
    }
    let n = batch.h * batch.w;
    let mut grads = Grads::zeros(k);
    let mut out = LossBreakdown::default();
    for term in &batch.ce {
        let v = ce_term(model, term, n, &mut grads);
        match term.group {
            LossGroup::QuadMix => out.quadmix += v,
            LossGroup::Ssl => out.ssl += v,
        }
    }
    if let Some(a) = &batch.agg {
        out.agg = agg_term(model, a, k, n, &mut grads);
    }
    Ok((out, grads.flatten()))
}
