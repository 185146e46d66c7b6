//! The self-training loop over ShiftWorld clips, with optional quad-mixing,
//! feature mixing and flow-guided alignment.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregate::AggregationConfig;
use crate::augment::augment;
use crate::config::{Mode, RunConfig, TrainingConfig};
use crate::engine::{loss_and_grad, AlignmentView, LossBreakdown, LossGroup, PreparedBatch};
use crate::error::{Error, Result};
use crate::flow::{compose_flows, generate_pseudo_label, PseudoLabelConfig};
use crate::metrics::{Confusion, MiouReport};
use crate::mixer::{extract_template, quadmix_step, Domain, MixBundle, PatchTemplate};
use crate::model::ToyModel;
use crate::rng::{pick_categories, CategoryPolicy, Rng};
use crate::shiftworld::{Clip, ShiftWorld};
use crate::tensor::{FlowField, FrameStack, LabelMap, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SourceOnly,
    SelfTraining,
    VTemplate,
    FTemplate,
    Agg,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::SourceOnly,
        Variant::SelfTraining,
        Variant::VTemplate,
        Variant::FTemplate,
        Variant::Agg,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::SelfTraining => "self_training",
            Variant::VTemplate => "v_template",
            Variant::FTemplate => "f_template",
            Variant::Agg => "agg",
            Variant::Full => "full",
        }
    }

    fn self_training(self) -> bool {
        self != Variant::SourceOnly
    }

    fn quadmix(self) -> bool {
        matches!(self, Variant::VTemplate | Variant::FTemplate | Variant::Full)
    }

    fn feature_mix(self) -> bool {
        matches!(self, Variant::FTemplate | Variant::Full)
    }

    fn alignment(self) -> bool {
        matches!(self, Variant::Agg | Variant::Full)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub l_quadmix: f64,
    pub l_agg: f64,
    pub l_ssl: f64,
    pub l_all: f64,
    pub target_miou: Option<f64>,
}

/// Renders the trace as CSV with a header row; mIoU is blank when not evaluated.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iteration,L_QuadMix,L_Agg,L_SSL,L_all,target_mIoU\n");
    for r in rows {
        let miou = r.target_miou.map(|m| format!("{m:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.iteration, r.l_quadmix, r.l_agg, r.l_ssl, r.l_all, miou
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub trace: Vec<TraceRow>,
    /// Target-test report after the last iteration.
    pub report: MiouReport,
}

/// Flow sending frame-`to` pixels back to frame `from` (`from < to`).
pub fn chain_flow(flows: &[FlowField], to: usize, from: usize) -> Result<FlowField> {
    if from >= to || to >= flows.len() {
        return Err(Error::shape(format!("cannot chain flows from {to} back to {from}")));
    }
    let mut out = flows[to].clone();
    for i in (from + 1..to).rev() {
        out = compose_flows(&out, &flows[i])?;
    }
    Ok(out)
}

fn model_input(clip: &Clip, t: usize, mode: Mode) -> (FrameStack, Option<&FlowField>) {
    match mode {
        Mode::Video => (clip.pair(t), Some(&clip.flows[t])),
        Mode::Image => (clip.single(t), None),
    }
}

/// Filtered pseudo-label for frame `t`. Video mode decodes frame `t − τ` and
/// carries its probabilities forward along the chained flow (or, with
/// `warp = false`, leaves them in place); image mode filters the prediction
/// at `t` itself.
pub fn pseudo_label(
    model: &ToyModel,
    clip: &Clip,
    t: usize,
    cfg: &PseudoLabelConfig,
    mode: Mode,
    warp: bool,
) -> Result<LabelMap> {
    let (h, w) = (clip.labels[t].height(), clip.labels[t].width());
    match mode {
        Mode::Video => {
            let s = t.checked_sub(cfg.tau).filter(|&s| s >= 1).ok_or_else(|| {
                Error::shape(format!("pseudo-label at {t} needs frame {t} − {} and its predecessor", cfg.tau))
            })?;
            let (frames, flow) = model_input(clip, s, mode);
            let logits = model.logits(&frames, flow)?;
            let carry = if warp { chain_flow(&clip.flows, t, s)? } else { FlowField::zeros(h, w) };
            generate_pseudo_label(&logits, &carry, cfg)
        }
        Mode::Image => {
            let logits = model.logits(&clip.single(t), None)?;
            generate_pseudo_label(&logits, &FlowField::zeros(h, w), cfg)
        }
    }
}

/// Per-category IoU of predictions at the last frame of every clip.
pub fn evaluate_miou(model: &ToyModel, clips: &[Clip], mode: Mode) -> Result<MiouReport> {
    let mut conf = Confusion::new(model.num_categories());
    for clip in clips {
        let t = clip.len() - 1;
        let (frames, flow) = model_input(clip, t, mode);
        conf.add(&model.predict(&frames, flow)?, &clip.labels[t])?;
    }
    Ok(conf.report())
}

/// One drawn source clip and target clip with the labels training needs.
struct Sample<'a> {
    src: &'a Clip,
    tgt: &'a Clip,
    /// Pseudo-labels for target frames `t − 1` and `t`.
    tgt_prev: LabelMap,
    tgt_label: LabelMap,
}

impl<'a> Sample<'a> {
    /// Without `pseudo` the target labels are left all-ignore.
    fn draw(rng: &mut Rng, world: &'a ShiftWorld, model: &ToyModel, cfg: &RunConfig, t: usize, pseudo: bool) -> Result<Self> {
        let src = &world.source[rng.below(world.source.len() as u64) as usize];
        let tgt = &world.target[rng.below(world.target.len() as u64) as usize];
        let pcfg = cfg.mixing.pseudo();
        let label = |i: usize| match pseudo {
            true => pseudo_label(model, tgt, i, &pcfg, cfg.mode, true),
            false => {
                let l = &tgt.labels[i];
                LabelMap::filled(l.height(), l.width(), IGNORE, l.num_categories())
            }
        };
        Ok(Self {
            src,
            tgt,
            tgt_prev: label(t - 1)?,
            tgt_label: label(t)?,
        })
    }

    fn bundles(&self, t: usize, mode: Mode) -> Result<(MixBundle, MixBundle)> {
        let (sf, sflow) = model_input(self.src, t, mode);
        let (tf, tflow) = model_input(self.tgt, t, mode);
        Ok((
            MixBundle::raw(sf, self.src.labels[t].clone(), sflow.cloned(), Domain::Source)?,
            MixBundle::raw(tf, self.tgt_label.clone(), tflow.cloned(), Domain::Target)?,
        ))
    }

    fn templates(&self, t: usize, mode: Mode, src_cats: &[u16], tgt_cats: &[u16]) -> Result<(PatchTemplate, PatchTemplate)> {
        let (sf, sflow) = model_input(self.src, t, mode);
        let (tf, tflow) = model_input(self.tgt, t, mode);
        let video = mode == Mode::Video;
        Ok((
            extract_template(
                &sf,
                &self.src.labels[t],
                sflow,
                video.then_some(&self.src.labels[t - 1]),
                src_cats,
                Domain::Source,
            )?,
            extract_template(
                &tf,
                &self.tgt_label,
                tflow,
                video.then_some(&self.tgt_prev),
                tgt_cats,
                Domain::Target,
            )?,
        ))
    }
}

/// Learning-rate factor at `iteration`: `(1 − n/N)^power`.
pub fn lr_factor(tc: &TrainingConfig, iteration: usize) -> f64 {
    if tc.iterations == 0 {
        return 1.0;
    }
    (1.0 - iteration as f64 / tc.iterations as f64).max(0.0).powf(tc.lr_decay_power)
}

/// Rescales `grad` to Euclidean norm `max_norm` when it is longer; a
/// non-positive `max_norm` disables clipping. Returns the original norm.
pub fn clip_gradient(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// `v ← μv + g + λθ`, `θ ← θ − lr·v`, with the decoder's lr scaled by
/// `head_lr_multiplier` and both scaled by `factor`.
pub fn sgd_step(model: &mut ToyModel, velocity: &mut [f64], grad: &[f64], tc: &TrainingConfig, factor: f64) {
    let layout = model.layout();
    let head = layout.cls_w().start..layout.cls_b().end;
    let base = tc.learning_rate * factor;
    for (i, ((p, v), g)) in model.params_mut().iter_mut().zip(velocity.iter_mut()).zip(grad).enumerate() {
        let lr = if head.contains(&i) { base * tc.head_lr_multiplier } else { base };
        *v = tc.momentum * *v + g + tc.weight_decay * *p;
        *p -= lr * *v;
    }
}

fn policy(world: &ShiftWorld, cfg: &RunConfig) -> Result<CategoryPolicy> {
    let d = &world.config;
    CategoryPolicy::from_division(
        (0..d.num_categories as u16).collect(),
        &d.division(),
        cfg.mixing.pool,
        d.long_tail(),
        cfg.mixing.picks_per_iteration,
        cfg.mixing.include_long_tail,
    )
}

/// Assembles the detached batch for one iteration.
#[allow(clippy::too_many_arguments)]
fn build_batch(
    rng: &mut Rng,
    cfg: &RunConfig,
    variant: Variant,
    t: usize,
    cur: &Sample<'_>,
    donor: &Sample<'_>,
    policy: &CategoryPolicy,
    agg: &AggregationConfig,
) -> Result<PreparedBatch> {
    let lambda_t = cfg.training.lambda_t;
    let (src, tgt) = cur.bundles(t, cfg.mode)?;
    let f = src.frames();
    let mut batch = PreparedBatch::new(src.label().num_categories(), f.height(), f.width());
    if variant.quadmix() {
        let src_cats = pick_categories(rng, policy, &[])?;
        let tgt_cats = pick_categories(rng, policy, &src_cats)?;
        let (st, tt) = donor.templates(t, cfg.mode, &src_cats, &tgt_cats)?;
        let mixed = quadmix_step(&src, &tgt, &st, &tt)?;
        let tgt_aug = mixed.target.with_frames(augment(rng, mixed.target.frames(), &cfg.augment))?;
        let s = &mixed.source;
        batch.push_cross_entropy(LossGroup::QuadMix, s.frames(), s.flow(), s.label(), 1.0)?;
        if variant.feature_mix() {
            batch.push_feature_mixed_cross_entropy(LossGroup::QuadMix, s, &tgt_aug, &mixed.union, lambda_t)?;
        } else {
            batch.push_cross_entropy(LossGroup::QuadMix, tgt_aug.frames(), tgt_aug.flow(), tgt_aug.label(), lambda_t)?;
        }
    }
    batch.push_cross_entropy(LossGroup::Ssl, src.frames(), src.flow(), src.label(), 1.0)?;
    if variant.self_training() {
        let frames = augment(rng, tgt.frames(), &cfg.augment);
        batch.push_cross_entropy(LossGroup::Ssl, &frames, tgt.flow(), tgt.label(), lambda_t)?;
    }
    if variant.alignment() && cfg.mode == Mode::Video {
        batch.set_alignment(
            AlignmentView {
                frames: &cur.src.frames,
                flows: &cur.src.flows,
                t,
                labels: &cur.src.labels[t],
                offsets: &agg.source_offsets,
            },
            AlignmentView {
                frames: &cur.tgt.frames,
                flows: &cur.tgt.flows,
                t,
                labels: &cur.tgt_label,
                offsets: &agg.target_offsets,
            },
            agg.kernel,
            agg.lambda_f,
        )?;
    }
    Ok(batch)
}

/// Trains a fresh model on `world` for `cfg.training.iterations` steps.
///
/// The first `warmup_iterations` steps see only labelled source data. After
/// that, templates for iteration `n` come from the samples drawn at `n − 1`;
/// an extra draw before the loop bootstraps the first donor.
pub fn train(world: &ShiftWorld, cfg: &RunConfig, variant: Variant, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if world.config.clip_length != cfg.dataset.clip_length {
        return Err(Error::Config("dataset clip length differs from the run config".into()));
    }
    if world.source.is_empty() || world.target.is_empty() {
        return Err(Error::Config("training needs at least one clip per domain".into()));
    }
    let tc = &cfg.training;
    let t = world.config.clip_length - 1;
    let policy = policy(world, cfg)?;
    let mut model = ToyModel::new(world.config.num_categories)?;
    let mut velocity = vec![0.0; model.params().len()];
    let mut rng = Rng::new(seed);
    let mut trace = Vec::with_capacity(tc.iterations);
    let phase = |it: usize| if it < tc.warmup_iterations { Variant::SourceOnly } else { variant };
    let mut donor = Sample::draw(&mut rng, world, &model, cfg, t, phase(0).self_training())?;
    for it in 0..tc.iterations {
        let active = phase(it);
        let cur = Sample::draw(&mut rng, world, &model, cfg, t, active.self_training())?;
        let batch = build_batch(&mut rng, cfg, active, t, &cur, &donor, &policy, &cfg.aggregation)?;
        let (loss, mut grad) = loss_and_grad(&model, &batch)?;
        check_finite(&loss, &grad, it)?;
        clip_gradient(&mut grad, tc.max_grad_norm);
        sgd_step(&mut model, &mut velocity, &grad, tc, lr_factor(tc, it));
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Training {
                iteration: it,
                reason: "parameters overflowed".into(),
            });
        }
        donor = cur;
        let last = it + 1 == tc.iterations;
        let target_miou = if last || (it + 1) % tc.eval_every == 0 {
            Some(evaluate_miou(&model, &world.target_test, cfg.mode)?.miou)
        } else {
            None
        };
        trace.push(TraceRow {
            iteration: it,
            l_quadmix: loss.quadmix,
            l_agg: loss.agg,
            l_ssl: loss.ssl,
            l_all: loss.total(),
            target_miou,
        });
    }
    let report = evaluate_miou(&model, &world.target_test, cfg.mode)?;
    Ok(TrainOutcome { model, trace, report })
}

fn check_finite(loss: &LossBreakdown, grad: &[f64], iteration: usize) -> Result<()> {
    if !loss.is_finite() {
        let terms = [("L_QuadMix", loss.quadmix), ("L_Agg", loss.agg), ("L_SSL", loss.ssl)];
        let bad: Vec<String> = terms.iter().filter(|t| !t.1.is_finite()).map(|(n, v)| format!("{n} is {v}")).collect();
        return Err(Error::Training {
            iteration,
            reason: bad.join(", "),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Training {
            iteration,
            reason: "gradient is not finite".into(),
        });
    }
    Ok(())
}
