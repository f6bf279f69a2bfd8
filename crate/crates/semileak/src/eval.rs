//! Evaluation: classification accuracy, attack ranking quality, and
//! distribution-level leakage indicators tracked across checkpoints.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::{js_divergence, run_attack, AttackKind, ScoredSet};
use crate::config::ExperimentConfig;
use crate::data::{SampleStore, SplitBundle, Subset};
use crate::error::{data_err, Error, Result};
use crate::models::{PosteriorSource, PosteriorVector, TrainState};
use crate::rng::{stream, StreamSeed};

/// Top-1 accuracy of a posterior source over the given sample ids.
pub fn accuracy(source: &dyn PosteriorSource, store: &SampleStore, ids: &[usize]) -> Result<f64> {
    if ids.is_empty() {
        return data_err("accuracy over an empty id set");
    }
    let imgs: Vec<_> = ids.iter().map(|&id| store.get(id).image.clone()).collect();
    let posts = source.predict(&imgs)?;
    let correct = posts
        .iter()
        .zip(ids)
        .filter(|(p, &id)| p.argmax() == store.get(id).label)
        .count();
    Ok(correct as f64 / ids.len() as f64)
}

/// Area under the ROC curve of member-vs-nonmember scores, computed exactly
/// from average ranks so ties contribute one half.
pub fn auc(member: &[f64], nonmember: &[f64]) -> Result<f64> {
    if member.is_empty() || nonmember.is_empty() {
        return data_err("ranking needs both member and nonmember scores");
    }
    if member.iter().chain(nonmember).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("ranking saw a non-finite score".into()));
    }
    let m = member.len();
    let n = nonmember.len();
    // (score, is_member) sorted ascending; equal runs share their mean rank
    let mut all: Vec<(f64, bool)> = member
        .iter()
        .map(|&s| (s, true))
        .chain(nonmember.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_members = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share the average
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_members += avg_rank;
            }
        }
        i = j;
    }
    Ok((rank_sum_members - (m * (m + 1)) as f64 / 2.0) / (m as f64 * n as f64))
}

/// AUC of one member subset (labeled or unlabeled) against all nonmembers.
pub fn subset_auc(set: &ScoredSet, subset: Subset) -> Result<f64> {
    if !subset.is_member() {
        return data_err("subset ranking is defined for member subsets");
    }
    let members: Vec<f64> = set
        .subset
        .iter()
        .zip(&set.score)
        .filter(|(&s, _)| s == subset)
        .map(|(_, &v)| v)
        .collect();
    auc(&members, &set.nonmember_scores())
}

/// Overall AUC of a scored set.
pub fn overall_auc(set: &ScoredSet) -> Result<f64> {
    auc(&set.member_scores(), &set.nonmember_scores())
}

/// Train-minus-test accuracy: the classical generalization gap.
pub fn overfit_gap(
    source: &dyn PosteriorSource,
    store: &SampleStore,
    train_ids: &[usize],
    test_ids: &[usize],
) -> Result<f64> {
    Ok(accuracy(source, store, train_ids)? - accuracy(source, store, test_ids)?)
}

/// Normalized histogram of posterior entropies over [0, ln class_count].
pub fn entropy_histogram(
    posts: &[PosteriorVector],
    bins: usize,
    class_count: usize,
) -> Result<Vec<f64>> {
    if bins == 0 {
        return data_err("entropy histogram needs at least one bin");
    }
    if posts.is_empty() {
        return data_err("entropy histogram over an empty posterior set");
    }
    if class_count < 2 {
        return data_err("entropy histogram needs at least two classes");
    }
    let max_h = (class_count as f64).ln();
    let mut counts = vec![0usize; bins];
    for p in posts {
        let h = crate::attacks::entropy(&p.probs);
        let idx = ((h / max_h * bins as f64).floor() as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let total = posts.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}

/// Divergence between the entropy distributions of train-side and
/// test-side posteriors: a per-model leakage indicator that needs no
/// attack model. Grows as members separate from nonmembers.
pub fn js_entropy_distance(
    train_posts: &[PosteriorVector],
    test_posts: &[PosteriorVector],
    bins: usize,
    class_count: usize,
) -> Result<f64> {
    let a = entropy_histogram(train_posts, bins, class_count)?;
    let b = entropy_histogram(test_posts, bins, class_count)?;
    js_divergence(&a, &b)
}

/// Leakage indicators of one checkpoint pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub auc: BTreeMap<String, f64>,
    pub js_entropy: f64,
    pub overfit_gap: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Attack a sequence of aligned target/shadow checkpoints with a fixed
/// attack stream, so the only thing varying across steps is the model
/// under attack. Checkpoints align by step; unmatched steps are skipped.
pub fn step_sweep(
    store: &SampleStore,
    bundle: &SplitBundle,
    cfg: &ExperimentConfig,
    kinds: &[AttackKind],
    target_ckpts: &[(usize, TrainState)],
    shadow_ckpts: &[(usize, TrainState)],
) -> Result<Vec<StepReport>> {
    let shadow_by_step: BTreeMap<usize, &TrainState> =
        shadow_ckpts.iter().map(|(k, s)| (*k, s)).collect();
    let attack_root: StreamSeed = stream(cfg.seed, "attack");
    let mut reports = Vec::new();
    let mut steps_seen = std::collections::BTreeSet::new();
    for (step, t_state) in target_ckpts {
        let Some(s_state) = shadow_by_step.get(step) else { continue };
        if !steps_seen.insert(*step) {
            return data_err(format!("duplicate checkpoint step {step}"));
        }
        let target = t_state.ema_snapshot()?;
        let shadow = s_state.ema_snapshot()?;
        let mut auc_map = BTreeMap::new();
        for &kind in kinds {
            let report = run_attack(
                kind,
                store,
                bundle,
                cfg,
                &shadow,
                &target,
                &attack_root.child(kind.as_str()),
            )?;
            auc_map.insert(kind.as_str().to_string(), overall_auc(&report.target)?);
        }
        let train_imgs: Vec<_> =
            bundle.target_train.iter().map(|&id| store.get(id).image.clone()).collect();
        let test_imgs: Vec<_> =
            bundle.target_test.iter().map(|&id| store.get(id).image.clone()).collect();
        let train_posts = target.predict(&train_imgs)?;
        let test_posts = target.predict(&test_imgs)?;
        let js_entropy = js_entropy_distance(
            &train_posts,
            &test_posts,
            cfg.entropy_bins,
            store.class_count(),
        )?;
        let train_acc = {
            let correct = train_posts
                .iter()
                .zip(&bundle.target_train)
                .filter(|(p, &id)| p.argmax() == store.get(id).label)
                .count();
            correct as f64 / bundle.target_train.len() as f64
        };
        let test_acc = {
            let correct = test_posts
                .iter()
                .zip(&bundle.target_test)
                .filter(|(p, &id)| p.argmax() == store.get(id).label)
                .count();
            correct as f64 / bundle.target_test.len() as f64
        };
        reports.push(StepReport {
            step: *step,
            auc: auc_map,
            js_entropy,
            overfit_gap: train_acc - test_acc,
            train_acc,
            test_acc,
        });
    }
    if reports.is_empty() {
        return data_err("no aligned checkpoint steps between target and shadow");
    }
    Ok(reports)
}
