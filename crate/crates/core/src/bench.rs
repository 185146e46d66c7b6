//! Multi-seed adaptation benchmark over ShiftWorld.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flow::temporal_consistency;
use crate::model::ToyModel;
use crate::shiftworld::{Clip, ShiftWorld, CATEGORY_NAMES};
use crate::train::{pseudo_label, train, Variant};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRun {
    pub variant: Variant,
    pub seed: u64,
    pub miou: f64,
    pub per_category: Vec<Option<f64>>,
    /// Pseudo-label temporal consistency with and without flow warping.
    pub consistency_warp: f64,
    pub consistency_no_warp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub categories: Vec<String>,
    pub runs: Vec<BenchRun>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VariantSummary {
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub consistency_warp: f64,
    pub consistency_no_warp: f64,
}

/// Fraction of labelled pixels where `ŷ_t` agrees with `ŷ_{t−1}` carried along
/// the true flow, pooled over the last frame of every clip.
pub fn pseudo_label_consistency(model: &ToyModel, clips: &[Clip], cfg: &RunConfig, warp: bool) -> Result<f64> {
    let pcfg = cfg.mixing.pseudo();
    let (mut agree, mut total) = (0usize, 0usize);
    for clip in clips {
        let t = clip.len() - 1;
        let cur = pseudo_label(model, clip, t, &pcfg, cfg.mode, warp)?;
        let prev = pseudo_label(model, clip, t - 1, &pcfg, cfg.mode, warp)?;
        let (a, n) = temporal_consistency(&cur, &prev, &clip.flows[t])?;
        agree += a;
        total += n;
    }
    Ok(if total == 0 { 0.0 } else { agree as f64 / total as f64 })
}

/// Trains every variant for every seed, in that order.
pub fn run_benchmark(world: &ShiftWorld, cfg: &RunConfig, variants: &[Variant], seeds: &[u64]) -> Result<BenchReport> {
    let mut runs = Vec::with_capacity(variants.len() * seeds.len());
    for &variant in variants {
        for &seed in seeds {
            let out = train(world, cfg, variant, seed).map_err(|e| match e {
                Error::Training { iteration, reason } => Error::Training {
                    iteration,
                    reason: format!("{variant} seed {seed}: {reason}"),
                },
                other => other,
            })?;
            runs.push(BenchRun {
                variant,
                seed,
                miou: out.report.miou,
                per_category: out.report.per_category,
                consistency_warp: pseudo_label_consistency(&out.model, &world.target_test, cfg, true)?,
                consistency_no_warp: pseudo_label_consistency(&out.model, &world.target_test, cfg, false)?,
            });
        }
    }
    let k = world.config.num_categories;
    Ok(BenchReport {
        categories: CATEGORY_NAMES[..k].iter().map(|s| s.to_string()).collect(),
        runs,
    })
}

/// One pass/fail verdict derived from a benchmark report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// The adaptation-gain and temporal-consistency verdicts. Checks whose
/// variants were not run are reported as failed.
pub fn adaptation_checks(report: &BenchReport) -> Vec<Check> {
    let summary = |v| report.summary(v);
    let gain = match (summary(Variant::Full), summary(Variant::VTemplate), summary(Variant::SourceOnly)) {
        (Some(full), Some(vt), Some(so)) => {
            let mut wins = 0;
            let mut seeds = 0;
            for r in report.runs_of(Variant::Full) {
                if let Some(base) = report.runs_of(Variant::SourceOnly).find(|b| b.seed == r.seed) {
                    seeds += 1;
                    wins += usize::from(r.miou > base.miou);
                }
            }
            // At least four of every five paired seeds.
            let enough = seeds > 0 && 5 * wins >= 4 * seeds;
            Check {
                name: "adaptation gain".into(),
                passed: enough && full.mean > so.mean && full.mean >= vt.mean && vt.mean >= so.mean,
                detail: format!(
                    "full {:.4} / v_template {:.4} / source_only {:.4} mean mIoU; full wins {wins} of {seeds} seeds; \
                     full >= v_template: {}, v_template >= source_only: {}",
                    full.mean,
                    vt.mean,
                    so.mean,
                    full.mean >= vt.mean,
                    vt.mean >= so.mean
                ),
            }
        }
        _ => Check {
            name: "adaptation gain".into(),
            passed: false,
            detail: "needs full, v_template and source_only runs".into(),
        },
    };
    let consistency = match summary(Variant::Full) {
        Some(s) => Check {
            name: "warped pseudo-label consistency".into(),
            passed: s.consistency_warp > s.consistency_no_warp,
            detail: format!("warp {:.4} vs no warp {:.4}", s.consistency_warp, s.consistency_no_warp),
        },
        None => Check {
            name: "warped pseudo-label consistency".into(),
            passed: false,
            detail: "needs full runs".into(),
        },
    };
    vec![gain, consistency]
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl BenchReport {
    pub fn variants(&self) -> Vec<Variant> {
        let mut out: Vec<Variant> = Vec::new();
        for r in &self.runs {
            if !out.contains(&r.variant) {
                out.push(r.variant);
            }
        }
        out
    }

    pub fn runs_of(&self, v: Variant) -> impl Iterator<Item = &BenchRun> {
        self.runs.iter().filter(move |r| r.variant == v)
    }

    pub fn summary(&self, v: Variant) -> Option<VariantSummary> {
        let runs: Vec<&BenchRun> = self.runs_of(v).collect();
        if runs.is_empty() {
            return None;
        }
        let m: Vec<f64> = runs.iter().map(|r| r.miou).collect();
        let mu = mean(&m);
        let var = m.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / m.len() as f64;
        Some(VariantSummary {
            mean: mu,
            std: var.sqrt(),
            consistency_warp: mean(&runs.iter().map(|r| r.consistency_warp).collect::<Vec<_>>()),
            consistency_no_warp: mean(&runs.iter().map(|r| r.consistency_no_warp).collect::<Vec<_>>()),
        })
    }

    /// Mean IoU of one category over a variant's seeds, skipping runs where it was undefined.
    fn category_mean(&self, v: Variant, c: usize) -> Option<f64> {
        let vals: Vec<f64> = self.runs_of(v).filter_map(|r| r.per_category[c]).collect();
        (!vals.is_empty()).then(|| mean(&vals))
    }

    /// One row per run.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,miou");
        for c in &self.categories {
            write!(out, ",iou_{c}").unwrap();
        }
        out.push_str(",consistency_warp,consistency_no_warp\n");
        for r in &self.runs {
            write!(out, "{},{},{:.6}", r.variant, r.seed, r.miou).unwrap();
            for v in &r.per_category {
                match v {
                    Some(x) => write!(out, ",{x:.6}").unwrap(),
                    None => out.push(','),
                }
            }
            writeln!(out, ",{:.6},{:.6}", r.consistency_warp, r.consistency_no_warp).unwrap();
        }
        out
    }

    /// Fixed-width table of mean ± std and per-category means.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<14} {:>16}", "variant", "mIoU (mean±std)");
        for c in &self.categories {
            write!(out, " {:>10}", c).unwrap();
        }
        out.push_str(&format!(" {:>10} {:>10}\n", "cons_warp", "cons_none"));
        for v in self.variants() {
            let s = self.summary(v).expect("variant has runs");
            write!(out, "{:<14} {:>16}", v.name(), format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std)).unwrap();
            for c in 0..self.categories.len() {
                match self.category_mean(v, c) {
                    Some(x) => write!(out, " {:>10.2}", 100.0 * x).unwrap(),
                    None => write!(out, " {:>10}", "-").unwrap(),
                }
            }
            writeln!(out, " {:>10.4} {:>10.4}", s.consistency_warp, s.consistency_no_warp).unwrap();
        }
        out
    }
}
