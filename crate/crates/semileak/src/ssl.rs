//! Semi-supervised training: batch assembly, step rules, and the run loop.
//!
//! One step consumes a labeled batch of size B and (for semi-supervised
//! methods) uratio*B unlabeled samples with fresh weak and strong views.
//! Labeled and unlabeled pools cycle through independent reshuffled epochs,
//! and every view derives from `(stream, step, sample id, view role)`, so
//! two methods sharing a seed see identical labeled data. A method whose
//! confidence gate never opens therefore reproduces the supervised baseline
//! parameter-for-parameter.

use std::collections::BTreeSet;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{strong_augment, weak_augment};
use crate::config::{ExperimentConfig, SslMethod};
use crate::data::{Image, SampleStore, SplitBundle};
use crate::defenses::dpsgd_update;
use crate::error::{config_err, Error, Result};
use crate::eval::accuracy;
use crate::models::loss::{batch_grads, per_sample_grads, LossItem, Target};
use crate::models::optim::{sgd_step, SgdConfig};
use crate::models::{
    cosine_lr, ema_update, softmax, ClassifierSpec, Dims, Net, PosteriorVector, Tape, TrainState,
};
use crate::rng::{stream, StreamSeed};

/// One line of the per-step metric stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss_labeled: f64,
    pub loss_unlabeled: f64,
    pub mask_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_acc: Option<f64>,
}

/// Temperature sharpening: p_i^(1/T) renormalized. T = 1 is the identity;
/// T -> 0 approaches the one-hot argmax.
pub fn sharpen(p: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 {
        return config_err(format!("sharpening temperature must be positive, got {temperature}"));
    }
    let inv = 1.0 / temperature;
    let pows: Vec<f64> = p.iter().map(|&x| if x > 0.0 { x.powf(inv) } else { 0.0 }).collect();
    let z: f64 = pows.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Numeric("sharpening degenerate posterior".into()));
    }
    Ok(pows.iter().map(|&x| x / z).collect())
}

/// Confident pseudo-label: argmax class when its probability clears `tau`,
/// ties resolving to the lowest class index.
pub fn pseudo_label(p: &PosteriorVector, tau: f64) -> Option<usize> {
    let c = p.argmax();
    if p.probs[c] >= tau {
        Some(c)
    } else {
        None
    }
}

/// Per-class curriculum state: the latest confident class of every unlabeled
/// pool sample, or -1 for samples never confident so far.
#[derive(Debug, Clone)]
pub struct FlexState {
    status: Vec<i64>,
    slot_of: HashMap<usize, usize>,
    class_count: usize,
}

impl FlexState {
    pub fn new(pool_ids: &[usize], class_count: usize) -> Self {
        Self::with_status(pool_ids, class_count, vec![-1; pool_ids.len()])
            .expect("fresh status always consistent")
    }

    pub fn with_status(pool_ids: &[usize], class_count: usize, status: Vec<i64>) -> Result<Self> {
        if status.len() != pool_ids.len() {
            return Err(Error::Shape(format!(
                "curriculum status holds {} slots for a pool of {}",
                status.len(),
                pool_ids.len()
            )));
        }
        if status.iter().any(|&s| s < -1 || s >= class_count as i64) {
            return Err(Error::Data("curriculum status class out of range".into()));
        }
        let slot_of = pool_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Ok(FlexState { status, slot_of, class_count })
    }

    pub fn status(&self) -> &[i64] {
        &self.status
    }

    /// sigma_c / max(max_c' sigma_c', never-confident count), zero for an
    /// empty pool.
    pub fn betas(&self) -> Vec<f64> {
        let mut sigma = vec![0usize; self.class_count];
        let mut unconfident = 0usize;
        for &s in &self.status {
            if s < 0 {
                unconfident += 1;
            } else {
                sigma[s as usize] += 1;
            }
        }
        let denom = sigma.iter().copied().max().unwrap_or(0).max(unconfident);
        if denom == 0 {
            return vec![0.0; self.class_count];
        }
        sigma.iter().map(|&s| s as f64 / denom as f64).collect()
    }

    /// Per-class thresholds tau_c = tau * beta_c; always within [0, tau].
    pub fn thresholds(&self, tau: f64) -> Vec<f64> {
        self.betas().iter().map(|&b| tau * b).collect()
    }

    pub fn mark(&mut self, sample_id: usize, class: usize) {
        if let Some(&slot) = self.slot_of.get(&sample_id) {
            self.status[slot] = class as i64;
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledItem {
    pub id: usize,
    pub view: Image,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct UnlabeledItem {
    pub id: usize,
    pub weak: Image,
    pub strong: Image,
}

/// Views and labels consumed by one training step.
#[derive(Debug, Clone)]
pub struct SslBatch {
    pub labeled: Vec<LabeledItem>,
    pub unlabeled: Vec<UnlabeledItem>,
}

/// How the aggregated batch gradient is formed.
#[derive(Debug, Clone, Copy)]
pub enum UpdateRule {
    Sgd,
    /// Per-sample clipping plus Gaussian noise on the aggregated gradient.
    DpSgd { clip_norm: f32, noise_scale: f32 },
}

/// Everything a training run needs besides the pixel store.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub cfg: ExperimentConfig,
    pub spec: ClassifierSpec,
    pub input: Dims,
    pub labeled_ids: Vec<usize>,
    pub unlabeled_ids: Vec<usize>,
    pub train_eval_ids: Vec<usize>,
    pub test_eval_ids: Vec<usize>,
    /// Named rng stream of this run ("target", "shadow", defense children).
    pub stream_name: String,
    pub update_rule: UpdateRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Target,
    Shadow,
}

impl Role {
    pub fn stream_name(&self) -> &'static str {
        match self {
            Role::Target => "target",
            Role::Shadow => "shadow",
        }
    }
}

/// Build the training plan of one audit role. The target uses the split's
/// labeled mask; the shadow draws its own stratified labeled subset from its
/// stream, mirroring the target recipe on disjoint data.
pub fn role_plan(
    cfg: &ExperimentConfig,
    store: &SampleStore,
    bundle: &SplitBundle,
    role: Role,
) -> Result<TrainPlan> {
    let (train_ids, test_ids): (Vec<usize>, Vec<usize>) = match role {
        Role::Target => (bundle.target_train.clone(), bundle.target_test.clone()),
        Role::Shadow => (bundle.shadow_train.clone(), bundle.shadow_test.clone()),
    };
    let (labeled_ids, unlabeled_ids) = match role {
        Role::Target => (bundle.labeled_ids(), bundle.unlabeled_ids()),
        Role::Shadow => {
            let labels: Vec<usize> = train_ids.iter().map(|&id| store.get(id).label).collect();
            let mask = crate::data::stratified_mask(
                &train_ids,
                &labels,
                store.class_count(),
                cfg.labeled_count,
                &mut stream(cfg.seed, role.stream_name()).child("labeled_mask").rng(&[0]),
            )?;
            let labeled = train_ids
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m)
                .map(|(&id, _)| id)
                .collect();
            let unlabeled = train_ids
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| !m)
                .map(|(&id, _)| id)
                .collect();
            (labeled, unlabeled)
        }
    };
    let sample = store.get(train_ids[0]);
    let input = Dims::new(sample.image.c, sample.image.h, sample.image.w);
    Ok(TrainPlan {
        cfg: cfg.clone(),
        spec: ClassifierSpec {
            family: cfg.family,
            widen_factor: cfg.widen_factor,
            class_count: store.class_count(),
        },
        input,
        labeled_ids,
        unlabeled_ids,
        train_eval_ids: train_ids,
        test_eval_ids: test_ids,
        stream_name: role.stream_name().to_string(),
        update_rule: UpdateRule::Sgd,
    })
}

/// Ids at positions `start..start+count` of the infinite concatenation of
/// per-epoch shuffles of `pool`.
fn cycle_ids(pool: &[usize], order: &StreamSeed, start: usize, count: usize) -> Vec<usize> {
    let n = pool.len();
    debug_assert!(n > 0);
    let mut out = Vec::with_capacity(count);
    let mut pos = start;
    while out.len() < count {
        let epoch = pos / n;
        let within = pos % n;
        let mut perm: Vec<usize> = pool.to_vec();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut order.rng(&[epoch as u64]));
        let take = (n - within).min(count - out.len());
        out.extend_from_slice(&perm[within..within + take]);
        pos += take;
    }
    out
}

// View-role tags inside the per-step augmentation stream.
const VIEW_LABELED_WEAK: u64 = 0;
const VIEW_UNLABELED_WEAK: u64 = 1;
const VIEW_UNLABELED_STRONG: u64 = 2;

/// Assemble the batch for `step`. Supervised plans skip unlabeled views.
pub fn make_batch(plan: &TrainPlan, store: &SampleStore, step: usize) -> Result<SslBatch> {
    if plan.labeled_ids.is_empty() {
        return config_err("labeled pool is empty");
    }
    let cfg = &plan.cfg;
    let root = stream(cfg.seed, &plan.stream_name);
    let aug = root.child("aug");
    let b = cfg.batch_size;

    let lab_ids = cycle_ids(&plan.labeled_ids, &root.child("order_labeled"), step * b, b);
    let labeled: Vec<LabeledItem> = lab_ids
        .par_iter()
        .map(|&id| {
            let s = store.get(id);
            let view = weak_augment(
                &s.image,
                &mut aug.rng(&[step as u64, id as u64, VIEW_LABELED_WEAK]),
            );
            LabeledItem { id, view, label: s.label }
        })
        .collect();

    let unlabeled = if cfg.ssl_method == SslMethod::Supervised {
        Vec::new()
    } else {
        if plan.unlabeled_ids.is_empty() {
            return config_err("unlabeled pool is empty for a semi-supervised method");
        }
        let u = cfg.uratio * b;
        let ids = cycle_ids(&plan.unlabeled_ids, &root.child("order_unlabeled"), step * u, u);
        ids.par_iter()
            .map(|&id| {
                let s = store.get(id);
                let weak = weak_augment(
                    &s.image,
                    &mut aug.rng(&[step as u64, id as u64, VIEW_UNLABELED_WEAK]),
                );
                let strong = strong_augment(
                    &s.image,
                    &mut aug.rng(&[step as u64, id as u64, VIEW_UNLABELED_STRONG]),
                    cfg.aug_level,
                );
                UnlabeledItem { id, weak, strong }
            })
            .collect()
    };

    Ok(SslBatch { labeled, unlabeled })
}

fn labeled_items(batch: &SslBatch) -> Vec<LossItem> {
    let b = batch.labeled.len() as f64;
    batch
        .labeled
        .iter()
        .map(|it| LossItem {
            x: it.view.data.clone(),
            target: Target::Hard(it.label),
            weight: 1.0 / b,
        })
        .collect()
}

/// Raw-parameter posteriors of the weak unlabeled views; guidance queries do
/// not flow gradients and use the training weights, not the EMA copy.
fn weak_posteriors(net: &Net, theta: &[f32], batch: &SslBatch) -> Vec<PosteriorVector> {
    batch
        .unlabeled
        .par_iter()
        .map(|it| {
            let mut tape = Tape::disabled();
            let logits = net.forward(theta, &it.weak.data, &mut tape);
            softmax(&logits)
        })
        .collect()
}

struct StepOutcome {
    loss_labeled: f64,
    loss_unlabeled: f64,
    mask_rate: f64,
}

/// Shared backbone of all step rules: accumulate labeled and unlabeled
/// gradients in that order, apply the optimizer, update the EMA copy.
/// `unlabeled_total` is the full unlabeled batch size including masked
/// samples; the reported unlabeled loss averages over it with masked
/// samples contributing zero.
fn apply_step(
    state: &mut TrainState,
    net: &Net,
    lab_items: Vec<LossItem>,
    unl_items: Vec<LossItem>,
    unlabeled_total: usize,
    cfg: &ExperimentConfig,
    rule: UpdateRule,
) -> Result<StepOutcome> {
    let lr = cosine_lr(state.step, state.total_steps, cfg.lr0)?;
    let lab_count = lab_items.len();
    let pass_count = unl_items.len();
    let mut grad = vec![0.0f32; state.theta.len()];
    let (lab_losses, unl_losses) = match rule {
        UpdateRule::Sgd => {
            let lab = batch_grads(net, &state.theta, &lab_items, &mut grad)?;
            let unl = batch_grads(net, &state.theta, &unl_items, &mut grad)?;
            (lab, unl)
        }
        UpdateRule::DpSgd { clip_norm, noise_scale } => {
            // Clipping bounds each sample's influence individually, so the
            // per-item weights are dropped and the aggregation normalizes
            // over the item count instead.
            let unit: Vec<LossItem> = lab_items
                .iter()
                .chain(&unl_items)
                .map(|it| LossItem { x: it.x.clone(), target: it.target.clone(), weight: 1.0 })
                .collect();
            let results = per_sample_grads(net, &state.theta, &unit)?;
            let per: Vec<Vec<f32>> = results.iter().map(|(_, g)| g.clone()).collect();
            let mut noise_rng = stream(state.seed, &state.stream_name)
                .child("dpsgd")
                .rng(&[state.step as u64]);
            let agg = dpsgd_update(&per, clip_norm, noise_scale, &mut noise_rng)?;
            grad.copy_from_slice(&agg);
            let losses: Vec<f64> = results.iter().map(|(l, _)| *l).collect();
            (losses[..lab_count].to_vec(), losses[lab_count..].to_vec())
        }
    };
    sgd_step(
        &mut state.theta,
        &mut state.velocity,
        &grad,
        lr as f32,
        SgdConfig {
            momentum: cfg.sgd_momentum as f32,
            weight_decay: cfg.weight_decay as f32,
        },
    )?;
    ema_update(&mut state.theta_ema, &state.theta, cfg.ema_momentum)?;
    state.step += 1;
    let loss_labeled = if lab_losses.is_empty() {
        0.0
    } else {
        lab_losses.iter().sum::<f64>() / lab_losses.len() as f64
    };
    let (loss_unlabeled, mask_rate) = if unlabeled_total == 0 {
        (0.0, 0.0)
    } else {
        (
            unl_losses.iter().sum::<f64>() / unlabeled_total as f64,
            pass_count as f64 / unlabeled_total as f64,
        )
    };
    Ok(StepOutcome { loss_labeled, loss_unlabeled, mask_rate })
}

/// Supervised baseline step: cross-entropy on weak labeled views only.
pub fn supervised_step(
    state: &mut TrainState,
    net: &Net,
    batch: &SslBatch,
    cfg: &ExperimentConfig,
    rule: UpdateRule,
) -> Result<StepMetrics> {
    if batch.labeled.is_empty() {
        return config_err("supervised step requires a non-empty labeled batch");
    }
    let step = state.step;
    let lr = cosine_lr(step, state.total_steps, cfg.lr0)?;
    let out = apply_step(state, net, labeled_items(batch), Vec::new(), 0, cfg, rule)?;
    Ok(StepMetrics {
        step,
        lr,
        loss_labeled: out.loss_labeled,
        loss_unlabeled: 0.0,
        mask_rate: 0.0,
        train_acc: None,
        test_acc: None,
    })
}

/// Confidence-gated consistency step: hard pseudo-labels from weak views
/// train the model on strong views; samples below `tau` contribute exactly
/// nothing to loss or gradient.
pub fn fixmatch_step(
    state: &mut TrainState,
    net: &Net,
    batch: &SslBatch,
    cfg: &ExperimentConfig,
    rule: UpdateRule,
) -> Result<StepMetrics> {
    if batch.labeled.is_empty() {
        return config_err("step requires a non-empty labeled batch");
    }
    let step = state.step;
    let lr = cosine_lr(step, state.total_steps, cfg.lr0)?;
    let posts = weak_posteriors(net, &state.theta, batch);
    let u_total = batch.unlabeled.len();
    let w = cfg.lambda_u / u_total.max(1) as f64;
    let mut unl_items = Vec::new();
    for (it, p) in batch.unlabeled.iter().zip(&posts) {
        if let Some(c) = pseudo_label(p, cfg.tau) {
            unl_items.push(LossItem {
                x: it.strong.data.clone(),
                target: Target::Hard(c),
                weight: w,
            });
        }
    }
    let out = apply_step(state, net, labeled_items(batch), unl_items, u_total, cfg, rule)?;
    Ok(StepMetrics {
        step,
        lr,
        loss_labeled: out.loss_labeled,
        loss_unlabeled: out.loss_unlabeled,
        mask_rate: out.mask_rate,
        train_acc: None,
        test_acc: None,
    })
}

/// Consistency step with sharpened soft targets: the weak posterior is
/// sharpened at `uda_temperature` and, when its confidence clears `tau`,
/// the strong view is pulled toward it under KL divergence. Targets are
/// stop-gradients.
pub fn uda_step(
    state: &mut TrainState,
    net: &Net,
    batch: &SslBatch,
    cfg: &ExperimentConfig,
    rule: UpdateRule,
) -> Result<StepMetrics> {
    if batch.labeled.is_empty() {
        return config_err("step requires a non-empty labeled batch");
    }
    let step = state.step;
    let lr = cosine_lr(step, state.total_steps, cfg.lr0)?;
    let posts = weak_posteriors(net, &state.theta, batch);
    let u_total = batch.unlabeled.len();
    let w = cfg.lambda_u / u_total.max(1) as f64;
    let mut unl_items = Vec::new();
    for (it, p) in batch.unlabeled.iter().zip(&posts) {
        if p.max_prob() >= cfg.tau {
            let target = sharpen(&p.probs, cfg.uda_temperature)?;
            unl_items.push(LossItem {
                x: it.strong.data.clone(),
                target: Target::Soft(target),
                weight: w,
            });
        }
    }
    let out = apply_step(state, net, labeled_items(batch), unl_items, u_total, cfg, rule)?;
    Ok(StepMetrics {
        step,
        lr,
        loss_labeled: out.loss_labeled,
        loss_unlabeled: out.loss_unlabeled,
        mask_rate: out.mask_rate,
        train_acc: None,
        test_acc: None,
    })
}

/// Curriculum variant of the confidence-gated step: class c uses threshold
/// tau * beta_c computed from the pre-step curriculum state; a class never
/// confident keeps its gate closed. The state then absorbs this batch's
/// confident predictions at the global threshold.
pub fn flexmatch_step(
    state: &mut TrainState,
    flex: &mut FlexState,
    net: &Net,
    batch: &SslBatch,
    cfg: &ExperimentConfig,
    rule: UpdateRule,
) -> Result<StepMetrics> {
    if batch.labeled.is_empty() {
        return config_err("step requires a non-empty labeled batch");
    }
    let step = state.step;
    let lr = cosine_lr(step, state.total_steps, cfg.lr0)?;
    let posts = weak_posteriors(net, &state.theta, batch);
    let betas = flex.betas();
    let thresholds = flex.thresholds(cfg.tau);
    let u_total = batch.unlabeled.len();
    let w = cfg.lambda_u / u_total.max(1) as f64;
    let mut unl_items = Vec::new();
    for (it, p) in batch.unlabeled.iter().zip(&posts) {
        let c = p.argmax();
        if betas[c] > 0.0 && p.probs[c] >= thresholds[c] {
            unl_items.push(LossItem {
                x: it.strong.data.clone(),
                target: Target::Hard(c),
                weight: w,
            });
        }
    }
    // Curriculum bookkeeping happens at the global threshold, after the
    // pre-step thresholds were read.
    for (it, p) in batch.unlabeled.iter().zip(&posts) {
        if let Some(c) = pseudo_label(p, cfg.tau) {
            flex.mark(it.id, c);
        }
    }
    let out = apply_step(state, net, labeled_items(batch), unl_items, u_total, cfg, rule)?;
    state.flex_status = flex.status().to_vec();
    Ok(StepMetrics {
        step,
        lr,
        loss_labeled: out.loss_labeled,
        loss_unlabeled: out.loss_unlabeled,
        mask_rate: out.mask_rate,
        train_acc: None,
        test_acc: None,
    })
}

/// Checkpoint steps of a schedule: step 0, every N/20 steps, and N itself.
pub fn checkpoint_steps(total_steps: usize) -> Vec<usize> {
    let mut set = BTreeSet::new();
    set.insert(0);
    set.insert(total_steps);
    let cadence = (total_steps / 20).max(1);
    let mut k = cadence;
    while k < total_steps {
        set.insert(k);
        k += cadence;
    }
    set.into_iter().collect()
}

/// Run (or resume) a full training schedule. `on_checkpoint` fires whenever
/// the state reaches a checkpoint step, `on_metrics` after every step.
pub fn train(
    plan: &TrainPlan,
    store: &SampleStore,
    resume: Option<TrainState>,
    on_checkpoint: &mut dyn FnMut(&TrainState) -> Result<()>,
    on_metrics: &mut dyn FnMut(&StepMetrics) -> Result<()>,
) -> Result<TrainState> {
    let cfg = &plan.cfg;
    if plan.labeled_ids.is_empty() {
        return config_err("labeled pool is empty");
    }
    let mut state = match resume {
        Some(s) => {
            if s.total_steps != cfg.total_steps {
                return config_err(format!(
                    "resumed state targets {} steps, config says {}",
                    s.total_steps, cfg.total_steps
                ));
            }
            s
        }
        None => {
            let mut s = TrainState::init(
                plan.spec,
                plan.input,
                cfg.total_steps,
                cfg.seed,
                &plan.stream_name,
                &stream(cfg.seed, &plan.stream_name).child("init"),
            )?;
            if cfg.ssl_method == SslMethod::Flexmatch {
                s.flex_status = vec![-1; plan.unlabeled_ids.len()];
            }
            s
        }
    };
    let net = state.net()?;
    let mut flex = if cfg.ssl_method == SslMethod::Flexmatch {
        Some(FlexState::with_status(
            &plan.unlabeled_ids,
            plan.spec.class_count,
            state.flex_status.clone(),
        )?)
    } else {
        None
    };
    let ckpts: BTreeSet<usize> = checkpoint_steps(cfg.total_steps).into_iter().collect();
    if state.step == 0 && ckpts.contains(&0) {
        on_checkpoint(&state)?;
    }
    while state.step < cfg.total_steps {
        let batch = make_batch(plan, store, state.step)?;
        let mut metrics = match cfg.ssl_method {
            SslMethod::Supervised => {
                supervised_step(&mut state, &net, &batch, cfg, plan.update_rule)?
            }
            SslMethod::Fixmatch => fixmatch_step(&mut state, &net, &batch, cfg, plan.update_rule)?,
            SslMethod::Uda => uda_step(&mut state, &net, &batch, cfg, plan.update_rule)?,
            SslMethod::Flexmatch => flexmatch_step(
                &mut state,
                flex.as_mut().expect("flex state initialized"),
                &net,
                &batch,
                cfg,
                plan.update_rule,
            )?,
        };
        if ckpts.contains(&state.step) {
            let snap = state.ema_snapshot()?;
            metrics.train_acc = Some(accuracy(&snap, store, &plan.train_eval_ids)?);
            metrics.test_acc = Some(accuracy(&snap, store, &plan.test_eval_ids)?);
            on_metrics(&metrics)?;
            on_checkpoint(&state)?;
        } else {
            on_metrics(&metrics)?;
        }
    }
    Ok(state)
}

/// Convenience wrapper collecting checkpoints in memory.
pub fn train_collecting(
    plan: &TrainPlan,
    store: &SampleStore,
) -> Result<(TrainState, Vec<(usize, TrainState)>, Vec<StepMetrics>)> {
    let mut snaps = Vec::new();
    let mut metrics = Vec::new();
    let final_state = train(
        plan,
        store,
        None,
        &mut |s| {
            snaps.push((s.step, s.clone()));
            Ok(())
        },
        &mut |m| {
            metrics.push(m.clone());
            Ok(())
        },
    )?;
    Ok((final_state, snaps, metrics))
}
