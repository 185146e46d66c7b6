//! Segmentation losses over tensors and mixed bundles.

use serde::{Deserialize, Serialize};

use crate::engine::{ce_with_grad, loss_and_grad, LossGroup, PreparedBatch};
use crate::error::{Error, Result};
use crate::mixer::{MixBundle, Tag, UnionMask};
use crate::model::ToyModel;
use crate::tensor::{LabelMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of every target-domain term.
    pub lambda_t: f64,
    /// Weight of the alignment loss.
    pub lambda_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_t: 1.0,
            lambda_f: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_t >= 0.0 && self.lambda_f >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0, got lambda_t={} lambda_f={}",
                self.lambda_t, self.lambda_f
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// Every pixel was ignore, so the loss is defined as 0.
    pub empty: bool,
}

/// Mean of `−log softmax(logits)[target]` over labelled pixels.
pub fn cross_entropy(logits: &Tensor, target: &LabelMap) -> Result<CrossEntropy> {
    let k = match *logits.shape() {
        [k, h, w] if h == target.height() && w == target.width() => k,
        ref s => {
            return Err(Error::shape(format!(
                "logits {s:?} do not match a {}×{} label map",
                target.height(),
                target.width()
            )))
        }
    };
    if target.values().iter().any(|&v| v != crate::tensor::IGNORE && v as usize >= k) {
        return Err(Error::Category(format!("label id outside {k} logit channels")));
    }
    let z: Vec<f64> = logits.as_f32()?.iter().map(|&v| v as f64).collect();
    let (loss, _, valid) = ce_with_grad(&z, k, target.values());
    Ok(CrossEntropy {
        loss,
        empty: valid == 0,
    })
}

fn evaluate(model: &ToyModel, batch: &PreparedBatch) -> Result<f64> {
    Ok(loss_and_grad(model, batch)?.0.total())
}

/// `CE(G(S′), y^{S′}) + λ_T · CE(G(T′), ŷ^{T′})` on the two inter-mixed
/// bundles. `target` is expected to carry already-augmented frames. With a
/// union mask the target forward pass blends in source features first.
pub fn quadmix_loss(
    model: &ToyModel,
    source: &MixBundle,
    target: &MixBundle,
    union: Option<&UnionMask>,
    w: &LossWeights,
) -> Result<f64> {
    w.validate()?;
    if source.tag() != Tag::TargetIntoSourceIntra || target.tag() != Tag::SourceIntoTargetIntra {
        return Err(Error::Policy(format!(
            "quad-mix loss expects T→(S→S) and S→(T→T) bundles, got {} and {}",
            source.tag(),
            target.tag()
        )));
    }
    let f = source.frames();
    let mut batch = PreparedBatch::new(model.num_categories(), f.height(), f.width());
    batch.push_cross_entropy(LossGroup::QuadMix, f, source.flow(), source.label(), 1.0)?;
    match union {
        Some(u) => batch.push_feature_mixed_cross_entropy(LossGroup::QuadMix, source, target, u, w.lambda_t)?,
        None => batch.push_cross_entropy(
            LossGroup::QuadMix,
            target.frames(),
            target.flow(),
            target.label(),
            w.lambda_t,
        )?,
    }
    evaluate(model, &batch)
}

/// `CE(G(S), y) + λ_T · CE(G(A(T)), ŷ)` on unmixed samples; the target bundle
/// holds augmented frames and filtered pseudo-labels.
pub fn ssl_loss(model: &ToyModel, source: &MixBundle, target: &MixBundle, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    if source.tag() != Tag::S || target.tag() != Tag::T {
        return Err(Error::Policy(format!(
            "self-supervised loss expects raw S and T bundles, got {} and {}",
            source.tag(),
            target.tag()
        )));
    }
    let f = source.frames();
    let mut batch = PreparedBatch::new(model.num_categories(), f.height(), f.width());
    batch.push_cross_entropy(LossGroup::Ssl, f, source.flow(), source.label(), 1.0)?;
    batch.push_cross_entropy(LossGroup::Ssl, target.frames(), target.flow(), target.label(), w.lambda_t)?;
    evaluate(model, &batch)
}

/// The overall objective: plain sum of its three parts.
pub fn total_loss(quadmix: f64, agg: f64, ssl: f64) -> f64 {
    quadmix + agg + ssl
}
