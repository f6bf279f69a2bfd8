//! Membership inference attacks against trained classifiers.
//!
//! Every attack fits on the shadow model's train/test split and scores the
//! target model's samples. Scores are oriented so that larger means more
//! member-like, which lets a single ranking metric compare attacks that
//! otherwise threshold very different quantities.
//!
//! The attack surface is the posterior vector of a queried image. The
//! augmentation-consistency attack additionally queries k weak and k strong
//! views per sample and summarizes the three view-pair distance blocks
//! (weak-weak, strong-strong, weak-strong), each sorted descending, into a
//! 3*k*k feature vector.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::augment::{strong_augment, weak_augment};
use crate::config::{ExperimentConfig, SimFn};
use crate::data::{SampleStore, SplitBundle, Subset};
use crate::error::{config_err, data_err, Error, Result};
use crate::models::loss::{batch_grads, LossItem, Target};
use crate::models::optim::AdamState;
use crate::models::{softmax, AttackMlpSpec, Net, PosteriorSource, PosteriorVector, Tape};
use crate::rng::StreamSeed;

/// Jensen-Shannon divergence in bits; symmetric, bounded to [0, 1].
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "divergence needs equal lengths, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    let kl_to_mix = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let m = 0.5 * (x + y);
                if x > 0.0 {
                    x * (x / m).log2()
                } else {
                    0.0
                }
            })
            .sum()
    };
    let d = 0.5 * kl_to_mix(p, q) + 0.5 * kl_to_mix(q, p);
    if !d.is_finite() {
        return Err(Error::Numeric("divergence is not finite".into()));
    }
    // clamp float dust so the bound holds exactly
    Ok(d.clamp(0.0, 1.0))
}

/// 1 - cosine similarity; zero vectors are rejected.
pub fn cosine_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape("cosine distance needs equal lengths".into()));
    }
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let np: f64 = p.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nq: f64 = q.iter().map(|a| a * a).sum::<f64>().sqrt();
    if np == 0.0 || nq == 0.0 {
        return Err(Error::Numeric("cosine distance of a zero vector".into()));
    }
    Ok((1.0 - dot / (np * nq)).max(0.0))
}

/// 1 - Pearson correlation. A constant vector (zero variance) carries no
/// correlation signal; its distance to anything is defined as 0 so that
/// degenerate models, which emit uniform posteriors, produce all-zero
/// features instead of saturated ones.
pub fn correlation_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape("correlation distance needs equal lengths".into()));
    }
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mq = q.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vq = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        cov += (a - mp) * (b - mq);
        vp += (a - mp) * (a - mp);
        vq += (b - mq) * (b - mq);
    }
    if vp == 0.0 || vq == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - cov / (vp.sqrt() * vq.sqrt()))
}

pub fn euclidean_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape("euclidean distance needs equal lengths".into()));
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Distance under the configured similarity function.
pub fn distance(sim: SimFn, p: &[f64], q: &[f64]) -> Result<f64> {
    match sim {
        SimFn::Js => js_divergence(p, q),
        SimFn::Cosine => cosine_distance(p, q),
        SimFn::Correlation => correlation_distance(p, q),
        SimFn::Euclidean => euclidean_distance(p, q),
    }
}

/// Shannon entropy in nats with the 0 log 0 = 0 convention.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 }).sum()
}

const LOG_CLAMP: f64 = 1e-12;

/// Label-aware entropy variant: -(1 - p_y) ln p_y - sum_{i != y} p_i ln(1 - p_i).
/// Low for confident correct predictions, high for confident mistakes.
pub fn modified_entropy(p: &[f64], label: usize) -> Result<f64> {
    if label >= p.len() {
        return Err(Error::Shape(format!(
            "label {label} out of range for {} classes",
            p.len()
        )));
    }
    let clamp = |x: f64| x.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
    let mut total = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        if i == label {
            total -= (1.0 - pi) * clamp(pi).ln();
        } else {
            total -= pi * clamp(1.0 - pi).ln();
        }
    }
    Ok(total)
}

/// Posterior probabilities sorted descending: a class-permutation-invariant
/// feature for the posterior-only neural attack.
pub fn sorted_posterior_feature(p: &PosteriorVector) -> Vec<f64> {
    let mut v = p.probs.clone();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Nn,
    Corr,
    Conf,
    Ent,
    Ment,
    Da,
}

impl AttackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Nn => "nn",
            AttackKind::Corr => "corr",
            AttackKind::Conf => "conf",
            AttackKind::Ent => "ent",
            AttackKind::Ment => "ment",
            AttackKind::Da => "da",
        }
    }

    pub fn parse(s: &str) -> Result<AttackKind> {
        match s {
            "nn" => Ok(AttackKind::Nn),
            "corr" => Ok(AttackKind::Corr),
            "conf" => Ok(AttackKind::Conf),
            "ent" => Ok(AttackKind::Ent),
            "ment" => Ok(AttackKind::Ment),
            "da" => Ok(AttackKind::Da),
            other => config_err(format!(
                "unknown attack '{other}', expected one of nn, corr, conf, ent, ment, da"
            )),
        }
    }

    pub fn all() -> [AttackKind; 6] {
        [
            AttackKind::Nn,
            AttackKind::Corr,
            AttackKind::Conf,
            AttackKind::Ent,
            AttackKind::Ment,
            AttackKind::Da,
        ]
    }

    /// Parse a comma-separated list; "all" expands to every attack.
    pub fn parse_list(s: &str) -> Result<Vec<AttackKind>> {
        if s.trim() == "all" {
            return Ok(AttackKind::all().to_vec());
        }
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(AttackKind::parse)
            .collect()
    }
}

/// Member-larger score of a single metric attack on one sample. The
/// confidence score is the posterior at the ground-truth class, not the
/// maximum: a confidently wrong prediction must score low.
pub fn oriented_metric(kind: AttackKind, p: &PosteriorVector, label: usize) -> Result<f64> {
    if label >= p.probs.len() {
        return Err(Error::Shape(format!(
            "label {label} out of range for {} classes",
            p.probs.len()
        )));
    }
    match kind {
        AttackKind::Corr => Ok(if p.argmax() == label { 1.0 } else { 0.0 }),
        AttackKind::Conf => Ok(p.probs[label]),
        AttackKind::Ent => Ok(-entropy(&p.probs)),
        AttackKind::Ment => Ok(-modified_entropy(&p.probs, label)?),
        other => config_err(format!("{} is not a metric attack", other.as_str())),
    }
}

/// Best accept-if-at-least threshold by balanced accuracy over candidate
/// cuts: observed scores, midpoints between adjacent distinct scores, and a
/// sentinel above the maximum (the rule that accepts nobody, floor 0.5).
/// Returns the threshold and its balanced accuracy on the fit set.
pub fn learn_threshold(member: &[f64], nonmember: &[f64]) -> Result<(f64, f64)> {
    if member.is_empty() || nonmember.is_empty() {
        return data_err("threshold fit needs both member and nonmember scores");
    }
    if member.iter().chain(nonmember).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("threshold fit saw a non-finite score".into()));
    }
    let mut values: Vec<f64> = member.iter().chain(nonmember).copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut candidates = values.clone();
    for w in values.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    candidates.push(values[values.len() - 1] + 1.0);
    candidates.sort_by(f64::total_cmp);
    let balanced = |t: f64| -> f64 {
        let tpr = member.iter().filter(|&&s| s >= t).count() as f64 / member.len() as f64;
        let tnr = nonmember.iter().filter(|&&s| s < t).count() as f64 / nonmember.len() as f64;
        0.5 * (tpr + tnr)
    };
    let mut best = (candidates[0], balanced(candidates[0]));
    for &t in &candidates[1..] {
        let acc = balanced(t);
        if acc > best.1 {
            best = (t, acc);
        }
    }
    Ok(best)
}

/// A fitted metric attack: one accept threshold per true class, classes
/// unseen on the fit side falling back to the global threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricAttack {
    pub kind: AttackKind,
    pub thresholds: Vec<f64>,
}

impl MetricAttack {
    pub fn decide(&self, score: f64, label: usize) -> Result<bool> {
        if label >= self.thresholds.len() {
            return Err(Error::Shape(format!("label {label} beyond fitted classes")));
        }
        Ok(score >= self.thresholds[label])
    }
}

/// Fit per-class thresholds from oriented shadow scores.
pub fn fit_metric_attack(
    kind: AttackKind,
    class_count: usize,
    member: &[(usize, f64)],
    nonmember: &[(usize, f64)],
) -> Result<MetricAttack> {
    let all_m: Vec<f64> = member.iter().map(|&(_, s)| s).collect();
    let all_n: Vec<f64> = nonmember.iter().map(|&(_, s)| s).collect();
    let (global, _) = learn_threshold(&all_m, &all_n)?;
    let mut thresholds = vec![global; class_count];
    for (c, slot) in thresholds.iter_mut().enumerate() {
        let m: Vec<f64> = member.iter().filter(|&&(l, _)| l == c).map(|&(_, s)| s).collect();
        let n: Vec<f64> =
            nonmember.iter().filter(|&&(l, _)| l == c).map(|&(_, s)| s).collect();
        if !m.is_empty() && !n.is_empty() {
            *slot = learn_threshold(&m, &n)?.0;
        }
    }
    Ok(MetricAttack { kind, thresholds })
}

/// A trained binary membership classifier over feature vectors.
#[derive(Debug, Clone)]
pub struct AttackModel {
    pub spec: AttackMlpSpec,
    pub theta: Vec<f32>,
}

impl AttackModel {
    pub fn net(&self) -> Result<Net> {
        self.spec.build()
    }

    /// Membership probability of one feature vector.
    pub fn score(&self, net: &Net, features: &[f64]) -> Result<f64> {
        if features.len() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "feature length {} does not match attack input {}",
                features.len(),
                self.spec.input_dim
            )));
        }
        let x: Vec<f32> = features.iter().map(|&v| v as f32).collect();
        let mut tape = Tape::disabled();
        let logits = net.forward(&self.theta, &x, &mut tape);
        Ok(softmax(&logits).probs[1])
    }
}

const ATTACK_EPOCHS: usize = 100;
const ATTACK_BATCH: usize = 256;
const ATTACK_LR: f32 = 1e-3;

/// Train the membership MLP with Adam on cross-entropy. Deterministic:
/// initialization and per-epoch shuffles derive from `root`.
pub fn train_attack_nn(
    features: &[Vec<f64>],
    is_member: &[bool],
    root: &StreamSeed,
) -> Result<AttackModel> {
    if features.len() != is_member.len() {
        return Err(Error::Shape("features and labels differ in length".into()));
    }
    if features.is_empty() {
        return data_err("attack training set is empty");
    }
    if is_member.iter().all(|&m| m) || is_member.iter().all(|&m| !m) {
        return data_err("attack training set holds a single membership class");
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("attack features have inconsistent lengths".into()));
    }
    let spec = AttackMlpSpec { input_dim: dim };
    let net = spec.build()?;
    let mut theta: Vec<f32> = net.init(&mut root.child("init").rng(&[0]));
    let mut adam = AdamState::new(theta.len());
    let order_stream = root.child("order");
    let n = features.len();
    for epoch in 0..ATTACK_EPOCHS {
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut order_stream.rng(&[epoch as u64]));
        for chunk in order.chunks(ATTACK_BATCH) {
            let items: Vec<LossItem> = chunk
                .iter()
                .map(|&i| LossItem {
                    x: features[i].iter().map(|&v| v as f32).collect(),
                    target: Target::Hard(usize::from(is_member[i])),
                    weight: 1.0 / chunk.len() as f64,
                })
                .collect();
            let mut grad = vec![0.0f32; theta.len()];
            batch_grads(&net, &theta, &items, &mut grad)?;
            adam.step(&mut theta, &grad, ATTACK_LR)?;
        }
    }
    Ok(AttackModel { spec, theta })
}

// View-role tags inside the attack view stream.
const ATTACK_VIEW_WEAK: u64 = 0;
const ATTACK_VIEW_STRONG: u64 = 1;

/// Augmentation-consistency features for a batch of samples: per sample,
/// k weak and k strong views are queried and the three full k-by-k
/// distance blocks (weak-weak, strong-strong, weak-strong) are each sorted
/// descending and concatenated.
pub fn da_features_batch(
    source: &dyn PosteriorSource,
    store: &SampleStore,
    ids: &[usize],
    k: usize,
    sim: SimFn,
    aug_level: usize,
    views_stream: &StreamSeed,
) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return config_err("augmentation attack needs at least one view per side");
    }
    let mut queries = Vec::with_capacity(ids.len() * 2 * k);
    for &id in ids {
        let img = &store.get(id).image;
        for v in 0..k {
            queries.push(weak_augment(
                img,
                &mut views_stream.rng(&[id as u64, v as u64, ATTACK_VIEW_WEAK]),
            ));
        }
        for v in 0..k {
            queries.push(strong_augment(
                img,
                &mut views_stream.rng(&[id as u64, v as u64, ATTACK_VIEW_STRONG]),
                aug_level,
            ));
        }
    }
    let posts = source.predict(&queries)?;
    if posts.len() != queries.len() {
        return Err(Error::Shape("posterior source returned a short batch".into()));
    }
    let mut out = Vec::with_capacity(ids.len());
    for (idx, &id) in ids.iter().enumerate() {
        let base = idx * 2 * k;
        let weak = &posts[base..base + k];
        let strong = &posts[base + k..base + 2 * k];
        let block = |a: &[PosteriorVector], b: &[PosteriorVector]| -> Result<Vec<f64>> {
            let mut vals = Vec::with_capacity(k * k);
            for (i, pa) in a.iter().enumerate() {
                for (j, pb) in b.iter().enumerate() {
                    let d = distance(sim, &pa.probs, &pb.probs)?;
                    if !d.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite view distance at pair ({i}, {j}) of sample {id}"
                        )));
                    }
                    vals.push(d);
                }
            }
            vals.sort_by(|x, y| y.total_cmp(x));
            Ok(vals)
        };
        let mut feat = block(weak, weak)?;
        feat.extend(block(strong, strong)?);
        feat.extend(block(weak, strong)?);
        out.push(feat);
    }
    Ok(out)
}

/// Scored target samples of one attack, aligned index-wise.
#[derive(Debug, Clone)]
pub struct ScoredSet {
    pub ids: Vec<usize>,
    pub subset: Vec<Subset>,
    pub label: Vec<usize>,
    pub is_member: Vec<bool>,
    pub score: Vec<f64>,
    pub decision: Vec<bool>,
}

impl ScoredSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn member_scores(&self) -> Vec<f64> {
        self.iter_scores(true)
    }

    pub fn nonmember_scores(&self) -> Vec<f64> {
        self.iter_scores(false)
    }

    fn iter_scores(&self, member: bool) -> Vec<f64> {
        self.is_member
            .iter()
            .zip(&self.score)
            .filter(|(&m, _)| m == member)
            .map(|(_, &s)| s)
            .collect()
    }
}

/// One attack's fitted artifacts and target scores.
#[derive(Debug, Clone)]
pub struct AttackReport {
    pub kind: AttackKind,
    /// Balanced accuracy of the fitted rule on the shadow fit set.
    pub shadow_fit_acc: f64,
    pub target: ScoredSet,
    /// Raw feature vectors of the target samples for the neural attacks.
    pub features: Option<Vec<Vec<f64>>>,
}

fn base_posteriors(
    source: &dyn PosteriorSource,
    store: &SampleStore,
    ids: &[usize],
) -> Result<Vec<PosteriorVector>> {
    let imgs: Vec<_> = ids.iter().map(|&id| store.get(id).image.clone()).collect();
    source.predict(&imgs)
}

/// Mean of true-positive and true-negative rates; zero when either side
/// of the truth is empty.
pub fn balanced_accuracy(decisions: &[bool], truth: &[bool]) -> f64 {
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return 0.0;
    }
    let tp = decisions.iter().zip(truth).filter(|(&d, &t)| d && t).count();
    let tn = decisions.iter().zip(truth).filter(|(&d, &t)| !d && !t).count();
    0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64)
}

struct TargetLayout {
    ids: Vec<usize>,
    subset: Vec<Subset>,
    label: Vec<usize>,
    is_member: Vec<bool>,
}

fn target_layout(store: &SampleStore, bundle: &SplitBundle) -> TargetLayout {
    let labeled: std::collections::HashSet<usize> = bundle.labeled_ids().into_iter().collect();
    let mut ids = Vec::new();
    let mut subset = Vec::new();
    for &id in &bundle.target_train {
        ids.push(id);
        subset.push(if labeled.contains(&id) {
            Subset::LabeledMember
        } else {
            Subset::UnlabeledMember
        });
    }
    for &id in &bundle.target_test {
        ids.push(id);
        subset.push(Subset::NonMember);
    }
    let label = ids.iter().map(|&id| store.get(id).label).collect();
    let is_member = subset.iter().map(|s| s.is_member()).collect();
    TargetLayout { ids, subset, label, is_member }
}

/// Fit `kind` on the shadow model and score every target-side sample.
/// `attack_root` isolates this attack's randomness (view draws, MLP
/// initialization, shuffles) from training streams.
pub fn run_attack(
    kind: AttackKind,
    store: &SampleStore,
    bundle: &SplitBundle,
    cfg: &ExperimentConfig,
    shadow: &dyn PosteriorSource,
    target: &dyn PosteriorSource,
    attack_root: &StreamSeed,
) -> Result<AttackReport> {
    let layout = target_layout(store, bundle);
    let shadow_member = &bundle.shadow_train;
    let shadow_nonmember = &bundle.shadow_test;
    let label_of = |id: usize| store.get(id).label;

    match kind {
        AttackKind::Corr | AttackKind::Conf | AttackKind::Ent | AttackKind::Ment => {
            let score_ids = |src: &dyn PosteriorSource, ids: &[usize]| -> Result<Vec<(usize, f64)>> {
                let posts = base_posteriors(src, store, ids)?;
                ids.iter()
                    .zip(&posts)
                    .map(|(&id, p)| Ok((label_of(id), oriented_metric(kind, p, label_of(id))?)))
                    .collect()
            };
            let m = score_ids(shadow, shadow_member)?;
            let n = score_ids(shadow, shadow_nonmember)?;
            let rule = fit_metric_attack(kind, store.class_count(), &m, &n)?;
            let fit_decisions: Vec<bool> = m
                .iter()
                .map(|&(l, s)| rule.decide(s, l))
                .chain(n.iter().map(|&(l, s)| rule.decide(s, l)))
                .collect::<Result<_>>()?;
            let fit_truth: Vec<bool> =
                std::iter::repeat(true).take(m.len()).chain(std::iter::repeat(false).take(n.len())).collect();
            let shadow_fit_acc = balanced_accuracy(&fit_decisions, &fit_truth);

            let posts = base_posteriors(target, store, &layout.ids)?;
            let mut score = Vec::with_capacity(layout.ids.len());
            let mut decision = Vec::with_capacity(layout.ids.len());
            for (p, &l) in posts.iter().zip(&layout.label) {
                let s = oriented_metric(kind, p, l)?;
                decision.push(rule.decide(s, l)?);
                score.push(s);
            }
            Ok(AttackReport {
                kind,
                shadow_fit_acc,
                target: ScoredSet {
                    ids: layout.ids,
                    subset: layout.subset,
                    label: layout.label,
                    is_member: layout.is_member,
                    score,
                    decision,
                },
                features: None,
            })
        }
        AttackKind::Nn | AttackKind::Da => {
            let featurize = |src: &dyn PosteriorSource, ids: &[usize]| -> Result<Vec<Vec<f64>>> {
                match kind {
                    AttackKind::Nn => {
                        let posts = base_posteriors(src, store, ids)?;
                        Ok(posts.iter().map(sorted_posterior_feature).collect())
                    }
                    _ => da_features_batch(
                        src,
                        store,
                        ids,
                        cfg.views,
                        cfg.sim_fn,
                        cfg.aug_level,
                        &attack_root.child("views"),
                    ),
                }
            };
            let mut fit_features = featurize(shadow, shadow_member)?;
            fit_features.extend(featurize(shadow, shadow_nonmember)?);
            let fit_truth: Vec<bool> = std::iter::repeat(true)
                .take(shadow_member.len())
                .chain(std::iter::repeat(false).take(shadow_nonmember.len()))
                .collect();
            let model = train_attack_nn(&fit_features, &fit_truth, &attack_root.child("mlp"))?;
            let net = model.net()?;
            let fit_decisions: Vec<bool> = fit_features
                .iter()
                .map(|f| Ok(model.score(&net, f)? >= 0.5))
                .collect::<Result<_>>()?;
            let shadow_fit_acc = balanced_accuracy(&fit_decisions, &fit_truth);

            let features = featurize(target, &layout.ids)?;
            let mut score = Vec::with_capacity(features.len());
            let mut decision = Vec::with_capacity(features.len());
            for f in &features {
                let s = model.score(&net, f)?;
                score.push(s);
                decision.push(s >= 0.5);
            }
            Ok(AttackReport {
                kind,
                shadow_fit_acc,
                target: ScoredSet {
                    ids: layout.ids,
                    subset: layout.subset,
                    label: layout.label,
                    is_member: layout.is_member,
                    score,
                    decision,
                },
                features: Some(features),
            })
        }
    }
}

/// Run several attacks against the same pair of sources.
pub fn run_attacks(
    kinds: &[AttackKind],
    store: &SampleStore,
    bundle: &SplitBundle,
    cfg: &ExperimentConfig,
    shadow: &dyn PosteriorSource,
    target: &dyn PosteriorSource,
    attack_stream: &StreamSeed,
) -> Result<Vec<AttackReport>> {
    let mut seen = HashMap::new();
    for k in kinds {
        if seen.insert(k.as_str(), ()).is_some() {
            return config_err(format!("attack '{}' listed twice", k.as_str()));
        }
    }
    kinds
        .iter()
        .map(|&k| {
            run_attack(k, store, bundle, cfg, shadow, target, &attack_stream.child(k.as_str()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;
    use crate::rng::stream;
    use std::sync::Mutex;

    const JS_HALF: f64 = 0.311_278_124_459_133_24; // js([1,0],[0.5,0.5]) in bits

    /// Independent divergence oracle with a different derivation: entropy of
    /// the mixture minus the mean entropy, in bits.
    fn js_oracle(p: &[f64], q: &[f64]) -> f64 {
        let h = |v: &[f64]| -> f64 {
            v.iter().map(|&x| if x > 0.0 { -x * x.log2() } else { 0.0 }).sum()
        };
        let m: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| 0.5 * (a + b)).collect();
        h(&m) - 0.5 * h(p) - 0.5 * h(q)
    }

    #[test]
    fn js_divergence_matches_mixture_entropy_oracle() {
        let cases: Vec<(Vec<f64>, Vec<f64>)> = vec![
            (vec![1.0, 0.0], vec![0.5, 0.5]),
            (vec![1.0, 0.0], vec![0.0, 1.0]),
            (vec![0.25, 0.75], vec![0.75, 0.25]),
            (vec![0.2, 0.3, 0.5], vec![0.5, 0.3, 0.2]),
        ];
        for (p, q) in cases {
            let d = js_divergence(&p, &q).unwrap();
            assert!((d - js_oracle(&p, &q)).abs() < 1e-12, "{p:?} {q:?}");
            assert!((d - js_divergence(&q, &p).unwrap()).abs() < 1e-15);
        }
        assert!((js_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - JS_HALF).abs() < 1e-12);
        assert_eq!(js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    }

    #[test]
    fn js_divergence_stays_in_unit_interval() {
        let mut rng = stream(1, "jsprop").rng(&[0]);
        use rand::Rng;
        for _ in 0..300 {
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0f64)).collect();
                let z: f64 = raw.iter().sum();
                raw.iter().map(|v| v / z).collect()
            };
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            let d = js_divergence(&p, &q).unwrap();
            assert!((0.0..=1.0).contains(&d));
        }
    }

    #[test]
    fn other_distances_match_hand_values() {
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap().abs() < 1e-12);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        // perfectly anti-correlated vectors sit at distance 2
        let d = correlation_distance(&[0.9, 0.1], &[0.1, 0.9]).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        // zero-variance vectors carry no signal: distance 0 by convention,
        // which also keeps identical constant inputs at distance zero
        let d = correlation_distance(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(correlation_distance(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let e = euclidean_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((e - 2.0f64.sqrt()).abs() < 1e-15);
        assert!(distance(SimFn::Js, &[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn entropy_matches_closed_forms() {
        assert!((entropy(&[0.25; 4]) - 4.0f64.ln()).abs() < 1e-12);
        assert!((entropy(&[0.5, 0.25, 0.25]) - 1.5 * 2.0f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn modified_entropy_matches_closed_forms() {
        let v = modified_entropy(&[0.5, 0.5], 0).unwrap();
        assert!((v - 2.0f64.ln()).abs() < 1e-9);
        // confident and correct: near zero
        let v = modified_entropy(&[1.0, 0.0], 0).unwrap();
        assert!(v.abs() < 1e-9);
        // confident and wrong: large
        let wrong = modified_entropy(&[1.0, 0.0], 1).unwrap();
        let right = modified_entropy(&[1.0, 0.0], 0).unwrap();
        assert!(wrong > right + 1.0);
        assert!(modified_entropy(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn sorted_feature_is_descending_and_permutation_invariant() {
        let a = PosteriorVector { probs: vec![0.1, 0.6, 0.3] };
        let b = PosteriorVector { probs: vec![0.6, 0.3, 0.1] };
        let fa = sorted_posterior_feature(&a);
        assert_eq!(fa, vec![0.6, 0.3, 0.1]);
        assert_eq!(fa, sorted_posterior_feature(&b));
    }

    #[test]
    fn threshold_learner_maximizes_balanced_accuracy() {
        let (t, acc) = learn_threshold(&[0.9, 0.4], &[0.5, 0.1]).unwrap();
        assert_eq!(acc, 0.75);
        // the fitted rule classifies exactly one nonmember wrongly
        assert!(0.9 >= t && 0.4 >= t);
        assert!(0.1 < t);
        // separable sets reach balanced accuracy 1
        let (t, acc) = learn_threshold(&[0.8, 0.9], &[0.1, 0.2]).unwrap();
        assert_eq!(acc, 1.0);
        assert!(t > 0.2 && t <= 0.8);
        assert!(learn_threshold(&[], &[0.1]).is_err());
        assert!(learn_threshold(&[0.1], &[f64::NAN]).is_err());
    }

    #[test]
    fn per_class_thresholds_fall_back_to_global() {
        // class 1 never appears among nonmembers; both classes get a rule
        let member = vec![(0, 0.9), (0, 0.8), (1, 0.7)];
        let nonmember = vec![(0, 0.2), (0, 0.3)];
        let rule = fit_metric_attack(AttackKind::Conf, 2, &member, &nonmember).unwrap();
        assert_eq!(rule.thresholds.len(), 2);
        let (global, _) = learn_threshold(&[0.9, 0.8, 0.7], &[0.2, 0.3]).unwrap();
        assert_eq!(rule.thresholds[1], global);
        assert!(rule.decide(0.9, 0).unwrap());
        assert!(!rule.decide(0.1, 0).unwrap());
        assert!(rule.decide(0.9, 2).is_err());
    }

    #[test]
    fn metric_orientation_puts_members_higher() {
        let member = PosteriorVector { probs: vec![0.97, 0.01, 0.01, 0.01] };
        let non = PosteriorVector { probs: vec![0.4, 0.3, 0.2, 0.1] };
        for kind in [AttackKind::Corr, AttackKind::Conf, AttackKind::Ent, AttackKind::Ment] {
            let sm = oriented_metric(kind, &member, 0).unwrap();
            let sn = oriented_metric(kind, &non, 1).unwrap();
            assert!(sm > sn, "{kind:?}: member {sm} vs nonmember {sn}");
        }
        assert!(oriented_metric(AttackKind::Nn, &member, 0).is_err());
    }

    #[test]
    fn attack_kind_list_parsing() {
        assert_eq!(AttackKind::parse_list("all").unwrap().len(), 6);
        let kinds = AttackKind::parse_list("nn, da").unwrap();
        assert_eq!(kinds, vec![AttackKind::Nn, AttackKind::Da]);
        assert!(AttackKind::parse_list("nn,bogus").is_err());
        assert_eq!(AttackKind::Da.as_str(), "da");
        assert_eq!(AttackKind::parse(AttackKind::Ment.as_str()).unwrap(), AttackKind::Ment);
    }

    #[test]
    fn attack_nn_separates_separable_features() {
        let root = stream(7, "attacktest");
        let mut rng = root.child("gen").rng(&[0]);
        use rand::Rng;
        let mut features = Vec::new();
        let mut truth = Vec::new();
        for i in 0..200 {
            let member = i % 2 == 0;
            let center = if member { 0.8 } else { 0.2 };
            features.push(vec![
                center + rng.gen_range(-0.05..0.05),
                1.0 - center + rng.gen_range(-0.05..0.05),
            ]);
            truth.push(member);
        }
        let model = train_attack_nn(&features, &truth, &root.child("mlp")).unwrap();
        let net = model.net().unwrap();
        let mut correct = 0;
        for (f, &t) in features.iter().zip(&truth) {
            let s = model.score(&net, f).unwrap();
            if (s >= 0.5) == t {
                correct += 1;
            }
        }
        assert!(correct >= 190, "separable features only {correct}/200 correct");
        // determinism: retraining from the same stream gives identical weights
        let again = train_attack_nn(&features, &truth, &root.child("mlp")).unwrap();
        assert_eq!(model.theta, again.theta);
    }

    #[test]
    fn attack_nn_rejects_single_class() {
        let features = vec![vec![0.5], vec![0.6]];
        assert!(train_attack_nn(&features, &[true, true], &stream(0, "x")).is_err());
        assert!(train_attack_nn(&features, &[false, false], &stream(0, "x")).is_err());
    }

    /// Posterior source that replays a scripted queue, recording how many
    /// images each call carried.
    struct ScriptedSource {
        queue: Mutex<Vec<PosteriorVector>>,
        calls: Mutex<Vec<usize>>,
        classes: usize,
    }

    impl PosteriorSource for ScriptedSource {
        fn class_count(&self) -> usize {
            self.classes
        }

        fn predict(&self, images: &[Image]) -> Result<Vec<PosteriorVector>> {
            self.calls.lock().unwrap().push(images.len());
            let mut q = self.queue.lock().unwrap();
            if q.len() < images.len() {
                return data_err("scripted source exhausted");
            }
            Ok(q.drain(..images.len()).collect())
        }
    }

    #[test]
    fn da_features_match_worked_two_view_example() {
        // scripted posteriors: weak views [1,0] and [.5,.5]; strong views
        // [1,0] and [0,1]
        let source = ScriptedSource {
            queue: Mutex::new(vec![
                PosteriorVector { probs: vec![1.0, 0.0] },
                PosteriorVector { probs: vec![0.5, 0.5] },
                PosteriorVector { probs: vec![1.0, 0.0] },
                PosteriorVector { probs: vec![0.0, 1.0] },
            ]),
            calls: Mutex::new(Vec::new()),
            classes: 2,
        };
        let img = Image::filled(3, 8, 8, 0.5);
        let store = SampleStore::new(
            vec![crate::data::ImageSample { id: 0, image: img, label: 0 }],
            2,
        )
        .unwrap();
        let feats = da_features_batch(
            &source,
            &store,
            &[0],
            2,
            SimFn::Js,
            2,
            &stream(5, "attack").child("views"),
        )
        .unwrap();
        assert_eq!(feats.len(), 1);
        let f = &feats[0];
        assert_eq!(f.len(), 12);
        let expect_ww = [JS_HALF, JS_HALF, 0.0, 0.0];
        let expect_ss = [1.0, 1.0, 0.0, 0.0];
        let expect_ws = [1.0, JS_HALF, JS_HALF, 0.0];
        for (i, &e) in expect_ww.iter().chain(&expect_ss).chain(&expect_ws).enumerate() {
            assert!((f[i] - e).abs() < 1e-12, "slot {i}: {} vs {e}", f[i]);
        }
        // all views went through one batched query
        assert_eq!(*source.calls.lock().unwrap(), vec![4]);
    }

    #[test]
    fn da_feature_length_scales_with_views() {
        let k = 3;
        let source = ScriptedSource {
            queue: Mutex::new(vec![PosteriorVector { probs: vec![0.5, 0.5] }; 2 * k]),
            calls: Mutex::new(Vec::new()),
            classes: 2,
        };
        let img = Image::filled(3, 8, 8, 0.3);
        let store = SampleStore::new(
            vec![crate::data::ImageSample { id: 0, image: img, label: 1 }],
            2,
        )
        .unwrap();
        let feats = da_features_batch(
            &source,
            &store,
            &[0],
            k,
            SimFn::Euclidean,
            1,
            &stream(6, "attack").child("views"),
        )
        .unwrap();
        assert_eq!(feats[0].len(), 3 * k * k);
        // identical posteriors: every distance is zero
        assert!(feats[0].iter().all(|&d| d == 0.0));
    }
}
