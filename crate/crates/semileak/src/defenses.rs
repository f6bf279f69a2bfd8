//! Defenses that reduce membership leakage: posterior truncation, model
//! stacking, per-sample gradient clipping with noise, and early stopping.
//!
//! Output-side defenses wrap a posterior source. The wrapper applies to the
//! shadow source as well as the target during evaluation, so the attacker is
//! always modeled as adaptive (fitting on defended outputs).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{config_err, data_err, Error, Result};
use crate::models::{PosteriorSource, PosteriorVector};

/// Zero every probability outside the k largest, keeping the survivors
/// unnormalized. Ties on the k-th value keep the lowest class index.
pub fn topk_filter(probs: &mut [f64], k: usize) -> Result<()> {
    if k == 0 {
        return config_err("top-k filter needs k >= 1");
    }
    if k >= probs.len() {
        return Ok(());
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable sort: equal probabilities stay in index order, so the cut
    // keeps lower indices
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    for &i in &order[k..] {
        probs[i] = 0.0;
    }
    Ok(())
}

/// Posterior source with only the top-k probabilities exposed.
pub struct TopKSource<S> {
    pub inner: S,
    pub k: usize,
}

impl<S: PosteriorSource> PosteriorSource for TopKSource<S> {
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    fn predict(&self, images: &[Image]) -> Result<Vec<PosteriorVector>> {
        let mut posts = self.inner.predict(images)?;
        for p in &mut posts {
            topk_filter(&mut p.probs, self.k)?;
        }
        Ok(posts)
    }
}

/// Posterior source averaging several member models' posteriors.
pub struct StackedSource<S> {
    pub members: Vec<S>,
}

impl<S: PosteriorSource> PosteriorSource for StackedSource<S> {
    fn class_count(&self) -> usize {
        self.members[0].class_count()
    }

    fn predict(&self, images: &[Image]) -> Result<Vec<PosteriorVector>> {
        if self.members.is_empty() {
            return data_err("stacked source has no member models");
        }
        let classes = self.members[0].class_count();
        if self.members.iter().any(|m| m.class_count() != classes) {
            return Err(Error::Shape("stacked members disagree on class count".into()));
        }
        let mut acc: Vec<Vec<f64>> = vec![vec![0.0; classes]; images.len()];
        for member in &self.members {
            let posts = member.predict(images)?;
            for (slot, p) in acc.iter_mut().zip(&posts) {
                for (s, &v) in slot.iter_mut().zip(&p.probs) {
                    *s += v;
                }
            }
        }
        let count = self.members.len() as f64;
        Ok(acc
            .into_iter()
            .map(|mut slot| {
                for v in &mut slot {
                    *v /= count;
                }
                PosteriorVector { probs: slot }
            })
            .collect())
    }
}

/// Aggregate per-sample gradients with bounded per-sample influence:
/// each gradient is scaled to norm at most `clip_norm`, the batch mean is
/// taken, and Gaussian noise with standard deviation
/// `noise_scale * clip_norm / batch` is added to every coordinate.
pub fn dpsgd_update<R: Rng>(
    per_sample: &[Vec<f32>],
    clip_norm: f32,
    noise_scale: f32,
    rng: &mut R,
) -> Result<Vec<f32>> {
    if per_sample.is_empty() {
        return data_err("clipped aggregation over an empty batch");
    }
    if !(clip_norm > 0.0) {
        return config_err(format!("clip norm must be positive, got {clip_norm}"));
    }
    if noise_scale < 0.0 {
        return config_err(format!("noise scale must be nonnegative, got {noise_scale}"));
    }
    let dim = per_sample[0].len();
    if per_sample.iter().any(|g| g.len() != dim) {
        return Err(Error::Shape("per-sample gradients differ in length".into()));
    }
    let batch = per_sample.len() as f64;
    let mut agg = vec![0.0f64; dim];
    for g in per_sample {
        let norm = g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        let factor = if norm > clip_norm as f64 { clip_norm as f64 / norm } else { 1.0 };
        for (a, &v) in agg.iter_mut().zip(g) {
            *a += v as f64 * factor;
        }
    }
    for a in &mut agg {
        *a /= batch;
    }
    let sigma = noise_scale as f64 * clip_norm as f64 / batch;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| Error::Numeric(format!("noise distribution: {e}")))?;
        for a in &mut agg {
            *a += normal.sample(rng);
        }
    }
    Ok(agg.into_iter().map(|v| v as f32).collect())
}

/// The checkpoint an early-stopping defense deploys: the latest saved step
/// not beyond `stop_step`.
pub fn early_stop_step(available: &[usize], stop_step: usize) -> Result<usize> {
    available
        .iter()
        .copied()
        .filter(|&s| s <= stop_step)
        .max()
        .ok_or_else(|| Error::Data(format!("no checkpoint at or before step {stop_step}")))
}

/// Defense selection, serialized into run manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum DefenseKind {
    None,
    TopK { k: usize },
    Stacking { count: usize },
    DpSgd { clip_norm: f64, noise_scale: f64 },
    EarlyStop { step: usize },
}

impl DefenseKind {
    /// Resolve a CLI defense name plus its optional parameters.
    pub fn parse(name: &str, k: Option<usize>, stop_step: Option<usize>) -> Result<DefenseKind> {
        match name {
            "none" => Ok(DefenseKind::None),
            "topk" => Ok(DefenseKind::TopK { k: k.unwrap_or(1) }),
            "stacking" => Ok(DefenseKind::Stacking { count: k.unwrap_or(2).max(2) }),
            "dpsgd" => Ok(DefenseKind::DpSgd { clip_norm: 1.0, noise_scale: 1e-5 }),
            "early_stop" => match stop_step {
                Some(step) => Ok(DefenseKind::EarlyStop { step }),
                None => config_err("early_stop requires --stop-step"),
            },
            other => config_err(format!(
                "unknown defense '{other}', expected none, topk, stacking, dpsgd, early_stop"
            )),
        }
    }

    pub fn label(&self) -> String {
        match self {
            DefenseKind::None => "none".into(),
            DefenseKind::TopK { k } => format!("topk{k}"),
            DefenseKind::Stacking { count } => format!("stacking{count}"),
            DefenseKind::DpSgd { .. } => "dpsgd".into(),
            DefenseKind::EarlyStop { step } => format!("early_stop{step}"),
        }
    }
}
