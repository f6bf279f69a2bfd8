//! Run orchestration: a run directory holds a manifest, the dataset split,
//! per-role checkpoints and metric streams, attack artifacts, and report
//! files. Stages build strictly on one another (prepare, train, attack,
//! defend, report) and each stage records its completion in the manifest.
//!
//! Everything written here is byte-deterministic for a given config and
//! seed except `timings.json`, which exists precisely to keep wall-clock
//! readings out of the deterministic artifacts.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{balanced_accuracy, run_attacks, AttackKind, AttackReport};
use crate::config::ExperimentConfig;
use crate::data::{
    load_cifar_binary, make_synthetic_dataset, SampleStore, SplitBundle, Subset,
};
use crate::defenses::{early_stop_step, DefenseKind, StackedSource, TopKSource};
use crate::error::{config_err, data_err, Error, Result};
use crate::eval::{accuracy, js_entropy_distance, overall_auc, subset_auc};
use crate::models::checkpoint::{load_classifier, save_classifier};
use crate::models::{ModelSnapshot, PosteriorSource, TrainState};
use crate::report::{atomic_write, line_chart, write_csv, Series};
use crate::rng::stream;
use crate::ssl::{role_plan, train, Role, StepMetrics, TrainPlan, UpdateRule};

pub const MANIFEST_VERSION: u32 = 1;
const CIFAR_CLASSES: usize = 10;

/// Where a run's samples come from. Synthetic data is regenerated from the
/// seed on demand, so no pixels are ever stored in the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { n: usize, classes: usize },
    Cifar { path: String },
}

impl DataSource {
    /// Parse a CLI data spec: `synthetic:<n>:<classes>` or a path to a
    /// binary batch file or a directory of them.
    pub fn parse(spec: &str) -> Result<DataSource> {
        if let Some(rest) = spec.strip_prefix("synthetic:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 2 {
                return config_err(format!(
                    "synthetic data spec is synthetic:<n>:<classes>, got '{spec}'"
                ));
            }
            let n = parts[0]
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad sample count '{}': {e}", parts[0])))?;
            let classes = parts[1]
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad class count '{}': {e}", parts[1])))?;
            return Ok(DataSource::Synthetic { n, classes });
        }
        Ok(DataSource::Cifar { path: spec.to_string() })
    }

    pub fn class_count(&self) -> usize {
        match self {
            DataSource::Synthetic { classes, .. } => *classes,
            DataSource::Cifar { .. } => CIFAR_CLASSES,
        }
    }

    /// Materialize the sample store. Synthetic pixels derive from `seed`.
    pub fn load(&self, seed: u64) -> Result<SampleStore> {
        match self {
            DataSource::Synthetic { n, classes } => {
                SampleStore::new(make_synthetic_dataset(*n, *classes, seed)?, *classes)
            }
            DataSource::Cifar { path } => {
                let p = Path::new(path);
                let mut files: Vec<PathBuf> = if p.is_dir() {
                    let mut v: Vec<PathBuf> = std::fs::read_dir(p)
                        .map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))?
                        .filter_map(|entry| entry.ok().map(|d| d.path()))
                        .filter(|f| f.extension().is_some_and(|e| e == "bin"))
                        .collect();
                    v.sort();
                    v
                } else {
                    vec![p.to_path_buf()]
                };
                if files.is_empty() {
                    return data_err(format!("no .bin batch files under {}", p.display()));
                }
                let mut samples = Vec::new();
                for f in files.drain(..) {
                    let batch = load_cifar_binary(&f)?;
                    for mut s in batch {
                        s.id = samples.len();
                        samples.push(s);
                    }
                }
                SampleStore::new(samples, CIFAR_CLASSES)
            }
        }
    }
}

/// The run directory's source of truth: configuration, provenance, stage
/// completion, and artifact locations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub run_id: String,
    pub config: ExperimentConfig,
    pub data: DataSource,
    pub stages: BTreeMap<String, bool>,
    pub checkpoints: BTreeMap<String, Vec<usize>>,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn stage_done(&self, stage: &str) -> bool {
        self.stages.get(stage).copied().unwrap_or(false)
    }
}

fn run_id(config: &ExperimentConfig, data: &DataSource) -> Result<String> {
    let blob = serde_json::to_string(&(config, data))?;
    let digest = Sha256::digest(blob.as_bytes());
    Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
}

/// Path layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn timings_path(&self) -> PathBuf {
        self.root.join("timings.json")
    }

    pub fn split_path(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn metrics_path(&self, role: &str) -> PathBuf {
        self.root.join(format!("metrics_{role}.jsonl"))
    }

    pub fn ckpt_dir(&self) -> PathBuf {
        self.root.join("ckpt")
    }

    pub fn ckpt_path(&self, role: &str, step: usize) -> PathBuf {
        self.ckpt_dir().join(format!("{role}_step{step:06}.slkc"))
    }

    pub fn aux_ckpt_path(&self, name: &str) -> PathBuf {
        self.ckpt_dir().join(format!("{name}.slkc"))
    }

    pub fn attack_summary_path(&self) -> PathBuf {
        self.root.join("attack_summary.json")
    }

    pub fn attack_scores_path(&self) -> PathBuf {
        self.root.join("attack_scores.csv")
    }

    pub fn features_path(&self, kind: AttackKind) -> PathBuf {
        self.root.join(format!("features_{}.jsonl", kind.as_str()))
    }

    pub fn defense_summary_path(&self, label: &str) -> PathBuf {
        self.root.join(format!("defense_{label}.json"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn load_manifest(&self) -> Result<RunManifest> {
        let path = self.manifest_path();
        if !path.exists() {
            return Err(Error::MissingStage(format!(
                "no manifest at {}; run prepare first",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(&path)?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.format_version != MANIFEST_VERSION {
            return data_err(format!(
                "manifest format {} unsupported (expected {MANIFEST_VERSION})",
                m.format_version
            ));
        }
        Ok(m)
    }

    pub fn save_manifest(&self, m: &RunManifest) -> Result<()> {
        let mut text = serde_json::to_string_pretty(m)?;
        text.push('\n');
        atomic_write(&self.manifest_path(), text.as_bytes())
    }

    /// Record a stage duration in the wall-clock sidecar. Kept out of the
    /// manifest so repeated same-seed runs produce identical manifests.
    pub fn record_timing(&self, stage: &str, seconds: f64) -> Result<()> {
        let mut timings: BTreeMap<String, f64> = match std::fs::read_to_string(self.timings_path())
        {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        timings.insert(stage.to_string(), seconds);
        let mut text = serde_json::to_string_pretty(&timings)?;
        text.push('\n');
        atomic_write(&self.timings_path(), text.as_bytes())
    }

    fn load_split(&self) -> Result<SplitBundle> {
        let path = self.split_path();
        if !path.exists() {
            return Err(Error::MissingStage("split file missing; run prepare first".into()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(&path)?)?)
    }

    /// Checkpoint steps present on disk for a role, ascending.
    fn saved_steps(&self, role: &str) -> Result<Vec<usize>> {
        let dir = self.ckpt_dir();
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let prefix = format!("{role}_step");
        let mut steps = Vec::new();
        for entry in std::fs::read_dir(&dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(rest) = name.strip_prefix(&prefix) {
                if let Some(num) = rest.strip_suffix(".slkc") {
                    if let Ok(step) = num.parse::<usize>() {
                        steps.push(step);
                    }
                }
            }
        }
        steps.sort_unstable();
        Ok(steps)
    }
}

pub fn subset_str(s: Subset) -> &'static str {
    match s {
        Subset::LabeledMember => "labeled_member",
        Subset::UnlabeledMember => "unlabeled_member",
        Subset::NonMember => "non_member",
    }
}

/// Create the run directory: validate the config, materialize and split the
/// dataset, and write the manifest. Idempotent for an identical config;
/// refuses to adopt a directory prepared with a different one.
pub fn cmd_prepare(dir: &RunDir, config: &ExperimentConfig, data: &DataSource) -> Result<RunManifest> {
    let started = Instant::now();
    config.validate()?;
    let id = run_id(config, data)?;
    if dir.manifest_path().exists() {
        let existing = dir.load_manifest()?;
        if existing.run_id != id {
            return config_err(format!(
                "directory {} already holds run {} with a different configuration",
                dir.root.display(),
                existing.run_id
            ));
        }
        return Ok(existing);
    }
    let store = data.load(config.seed)?;
    if store.class_count() != data.class_count() {
        return data_err("data source class count mismatch");
    }
    let bundle = crate::data::split_dataset(&store, config.labeled_count, config.seed)?;
    bundle.validate(&store)?;
    std::fs::create_dir_all(&dir.root)?;
    let mut split_text = serde_json::to_string_pretty(&bundle)?;
    split_text.push('\n');
    atomic_write(&dir.split_path(), split_text.as_bytes())?;
    let mut stages = BTreeMap::new();
    stages.insert("prepared".to_string(), true);
    let mut artifacts = BTreeMap::new();
    artifacts.insert("split".to_string(), "split.json".to_string());
    let manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        run_id: id,
        config: config.clone(),
        data: data.clone(),
        stages,
        checkpoints: BTreeMap::new(),
        artifacts,
    };
    dir.save_manifest(&manifest)?;
    dir.record_timing("prepare", started.elapsed().as_secs_f64())?;
    Ok(manifest)
}

fn require_stage(manifest: &RunManifest, stage: &str, hint: &str) -> Result<()> {
    if !manifest.stage_done(stage) {
        return Err(Error::MissingStage(format!(
            "stage '{stage}' has not completed; run {hint} first"
        )));
    }
    Ok(())
}

/// Drop metric lines at or past the resume point so re-executed steps do
/// not appear twice.
fn trim_metrics(path: &Path, resume_step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let kept: Vec<&str> = text
        .lines()
        .filter(|line| {
            serde_json::from_str::<StepMetrics>(line)
                .map(|m| m.step < resume_step)
                .unwrap_or(false)
        })
        .collect();
    let mut out = kept.join("\n");
    if !out.is_empty() {
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Train one role to completion, resuming from the newest checkpoint when
/// the directory already holds a partial run.
pub fn cmd_train_role(dir: &RunDir, role: Role) -> Result<()> {
    let started = Instant::now();
    let mut manifest = dir.load_manifest()?;
    require_stage(&manifest, "prepared", "prepare")?;
    let role_name = role.stream_name();
    let stage_key = format!("trained_{role_name}");
    let cfg = manifest.config.clone();
    let saved = dir.saved_steps(role_name)?;
    if manifest.stage_done(&stage_key) && saved.contains(&cfg.total_steps) {
        return Ok(());
    }
    let store = manifest.data.load(cfg.seed)?;
    let bundle = dir.load_split()?;
    let plan = role_plan(&cfg, &store, &bundle, role)?;
    let resume = match saved.last() {
        Some(&last) => {
            let state = load_classifier(&dir.ckpt_path(role_name, last))?;
            trim_metrics(&dir.metrics_path(role_name), state.step)?;
            Some(state)
        }
        None => {
            trim_metrics(&dir.metrics_path(role_name), 0)?;
            None
        }
    };
    std::fs::create_dir_all(dir.ckpt_dir())?;
    let mut metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.metrics_path(role_name))?;
    let mut steps_written: Vec<usize> = saved;
    train(
        &plan,
        &store,
        resume,
        &mut |state| {
            save_classifier(&dir.ckpt_path(role_name, state.step), state)?;
            if !steps_written.contains(&state.step) {
                steps_written.push(state.step);
            }
            Ok(())
        },
        &mut |m| {
            let line = serde_json::to_string(m)?;
            metrics_file.write_all(line.as_bytes())?;
            metrics_file.write_all(b"\n")?;
            Ok(())
        },
    )?;
    metrics_file.flush()?;
    steps_written.sort_unstable();
    steps_written.dedup();
    manifest.checkpoints.insert(role_name.to_string(), steps_written);
    manifest.stages.insert(stage_key, true);
    manifest
        .artifacts
        .insert(format!("metrics_{role_name}"), format!("metrics_{role_name}.jsonl"));
    dir.save_manifest(&manifest)?;
    dir.record_timing(&format!("train_{role_name}"), started.elapsed().as_secs_f64())?;
    Ok(())
}

pub fn cmd_train(dir: &RunDir, roles: &[Role]) -> Result<()> {
    for &role in roles {
        cmd_train_role(dir, role)?;
    }
    Ok(())
}

/// Metrics of one attack against one target source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub auc: f64,
    pub auc_labeled: f64,
    pub auc_unlabeled: f64,
    pub balanced_acc: f64,
    pub shadow_fit_acc: f64,
}

fn attack_metrics(report: &AttackReport) -> Result<AttackMetrics> {
    Ok(AttackMetrics {
        auc: overall_auc(&report.target)?,
        auc_labeled: subset_auc(&report.target, Subset::LabeledMember)?,
        auc_unlabeled: subset_auc(&report.target, Subset::UnlabeledMember)?,
        balanced_acc: balanced_accuracy(&report.target.decision, &report.target.is_member),
        shadow_fit_acc: report.shadow_fit_acc,
    })
}

/// Undefended attack results of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSummary {
    pub per_attack: BTreeMap<String, AttackMetrics>,
    pub js_entropy: f64,
    pub overfit_gap: f64,
    pub target_train_acc: f64,
    pub target_test_acc: f64,
}

fn load_final_state(dir: &RunDir, manifest: &RunManifest, role: Role) -> Result<TrainState> {
    let role_name = role.stream_name();
    require_stage(manifest, &format!("trained_{role_name}"), "train")?;
    let path = dir.ckpt_path(role_name, manifest.config.total_steps);
    if !path.exists() {
        return Err(Error::MissingStage(format!(
            "final checkpoint {} missing; run train",
            path.display()
        )));
    }
    load_classifier(&path)
}

fn write_attack_artifacts(
    dir: &RunDir,
    manifest: &mut RunManifest,
    reports: &[AttackReport],
) -> Result<()> {
    let mut rows = Vec::new();
    for r in reports {
        let t = &r.target;
        for i in 0..t.len() {
            rows.push(vec![
                r.kind.as_str().to_string(),
                t.ids[i].to_string(),
                subset_str(t.subset[i]).to_string(),
                t.label[i].to_string(),
                t.is_member[i].to_string(),
                format!("{:.9}", t.score[i]),
                t.decision[i].to_string(),
            ]);
        }
    }
    write_csv(
        &dir.attack_scores_path(),
        &["attack", "id", "subset", "label", "is_member", "score", "decision"],
        &rows,
    )?;
    manifest
        .artifacts
        .insert("attack_scores".to_string(), "attack_scores.csv".to_string());
    for r in reports {
        if let Some(features) = &r.features {
            let mut text = String::new();
            for i in 0..r.target.len() {
                let line = serde_json::json!({
                    "id": r.target.ids[i],
                    "subset": subset_str(r.target.subset[i]),
                    "label": r.target.label[i],
                    "values": features[i],
                });
                text.push_str(&serde_json::to_string(&line)?);
                text.push('\n');
            }
            atomic_write(&dir.features_path(r.kind), text.as_bytes())?;
            manifest.artifacts.insert(
                format!("features_{}", r.kind.as_str()),
                format!("features_{}.jsonl", r.kind.as_str()),
            );
        }
    }
    Ok(())
}

/// Attack the final target model using rules fitted on the final shadow
/// model, and write scores, features, and the summary.
pub fn cmd_attack(dir: &RunDir, kinds: &[AttackKind]) -> Result<AttackSummary> {
    let started = Instant::now();
    let mut manifest = dir.load_manifest()?;
    if kinds.is_empty() {
        return config_err("no attacks requested");
    }
    let cfg = manifest.config.clone();
    let target_state = load_final_state(dir, &manifest, Role::Target)?;
    let shadow_state = load_final_state(dir, &manifest, Role::Shadow)?;
    let store = manifest.data.load(cfg.seed)?;
    let bundle = dir.load_split()?;
    let target = target_state.ema_snapshot()?;
    let shadow = shadow_state.ema_snapshot()?;
    let reports = run_attacks(
        kinds,
        &store,
        &bundle,
        &cfg,
        &shadow,
        &target,
        &stream(cfg.seed, "attack"),
    )?;
    let mut per_attack = BTreeMap::new();
    for r in &reports {
        per_attack.insert(r.kind.as_str().to_string(), attack_metrics(r)?);
    }
    let train_imgs: Vec<_> =
        bundle.target_train.iter().map(|&id| store.get(id).image.clone()).collect();
    let test_imgs: Vec<_> =
        bundle.target_test.iter().map(|&id| store.get(id).image.clone()).collect();
    let train_posts = target.predict(&train_imgs)?;
    let test_posts = target.predict(&test_imgs)?;
    let js_entropy =
        js_entropy_distance(&train_posts, &test_posts, cfg.entropy_bins, store.class_count())?;
    let target_train_acc = accuracy(&target, &store, &bundle.target_train)?;
    let target_test_acc = accuracy(&target, &store, &bundle.target_test)?;
    let summary = AttackSummary {
        per_attack,
        js_entropy,
        overfit_gap: target_train_acc - target_test_acc,
        target_train_acc,
        target_test_acc,
    };
    write_attack_artifacts(dir, &mut manifest, &reports)?;
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    atomic_write(&dir.attack_summary_path(), text.as_bytes())?;
    manifest
        .artifacts
        .insert("attack_summary".to_string(), "attack_summary.json".to_string());
    manifest.stages.insert("attacked".to_string(), true);
    dir.save_manifest(&manifest)?;
    dir.record_timing("attack", started.elapsed().as_secs_f64())?;
    Ok(summary)
}

/// Defended attack results, comparable row-for-row with the undefended
/// summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseSummary {
    pub defense: String,
    pub utility_test_acc: f64,
    pub per_attack: BTreeMap<String, AttackMetrics>,
}

/// Train an auxiliary full-schedule model (stacking member or noisy
/// retraining) with its own stream name, cached as a single checkpoint.
fn aux_model(
    dir: &RunDir,
    cfg: &ExperimentConfig,
    store: &SampleStore,
    base_plan: &TrainPlan,
    stream_name: &str,
    rule: UpdateRule,
) -> Result<TrainState> {
    let path = dir.aux_ckpt_path(stream_name);
    if path.exists() {
        return load_classifier(&path);
    }
    let mut plan = base_plan.clone();
    plan.stream_name = stream_name.to_string();
    plan.update_rule = rule;
    let final_state = train(&plan, store, None, &mut |_| Ok(()), &mut |_| Ok(()))?;
    let _ = cfg;
    save_classifier(&path, &final_state)?;
    Ok(final_state)
}

/// Apply one defense to both roles, rerun the requested attacks against the
/// defended sources, and record leakage plus utility.
pub fn cmd_defend(dir: &RunDir, defense: DefenseKind, kinds: &[AttackKind]) -> Result<DefenseSummary> {
    let started = Instant::now();
    let mut manifest = dir.load_manifest()?;
    if kinds.is_empty() {
        return config_err("no attacks requested");
    }
    let cfg = manifest.config.clone();
    let store = manifest.data.load(cfg.seed)?;
    let bundle = dir.load_split()?;
    let label = defense.label();

    // Both roles receive the defense: the attacker fits on defended shadow
    // outputs, so results measure the defense against an adaptive attacker.
    let build = |role: Role| -> Result<Box<dyn PosteriorSource>> {
        let final_state = load_final_state(dir, &manifest, role)?;
        let plan = role_plan(&cfg, &store, &bundle, role)?;
        let role_name = role.stream_name();
        match defense {
            DefenseKind::None => Ok(Box::new(final_state.ema_snapshot()?)),
            DefenseKind::TopK { k } => Ok(Box::new(TopKSource {
                inner: final_state.ema_snapshot()?,
                k,
            })),
            DefenseKind::Stacking { count } => {
                if count < 2 {
                    return config_err("stacking needs at least two member models");
                }
                let mut members: Vec<ModelSnapshot> = vec![final_state.ema_snapshot()?];
                for i in 1..count {
                    let aux = aux_model(
                        dir,
                        &cfg,
                        &store,
                        &plan,
                        &format!("{role_name}_stack{i}"),
                        UpdateRule::Sgd,
                    )?;
                    members.push(aux.ema_snapshot()?);
                }
                Ok(Box::new(StackedSource { members }))
            }
            DefenseKind::DpSgd { clip_norm, noise_scale } => {
                let aux = aux_model(
                    dir,
                    &cfg,
                    &store,
                    &plan,
                    &format!("{role_name}_dpsgd"),
                    UpdateRule::DpSgd {
                        clip_norm: clip_norm as f32,
                        noise_scale: noise_scale as f32,
                    },
                )?;
                Ok(Box::new(aux.ema_snapshot()?))
            }
            DefenseKind::EarlyStop { step } => {
                let saved = dir.saved_steps(role_name)?;
                let chosen = early_stop_step(&saved, step)?;
                let state = load_classifier(&dir.ckpt_path(role_name, chosen))?;
                Ok(Box::new(state.ema_snapshot()?))
            }
        }
    };
    let target_src = build(Role::Target)?;
    let shadow_src = build(Role::Shadow)?;
    let reports = run_attacks(
        kinds,
        &store,
        &bundle,
        &cfg,
        shadow_src.as_ref(),
        target_src.as_ref(),
        &stream(cfg.seed, "attack"),
    )?;
    let mut per_attack = BTreeMap::new();
    for r in &reports {
        per_attack.insert(r.kind.as_str().to_string(), attack_metrics(r)?);
    }
    let summary = DefenseSummary {
        defense: label.clone(),
        utility_test_acc: accuracy(target_src.as_ref(), &store, &bundle.target_test)?,
        per_attack,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    atomic_write(&dir.defense_summary_path(&label), text.as_bytes())?;
    manifest
        .artifacts
        .insert(format!("defense_{label}"), format!("defense_{label}.json"));
    manifest.stages.insert(format!("defended_{label}"), true);
    dir.save_manifest(&manifest)?;
    dir.record_timing(&format!("defend_{label}"), started.elapsed().as_secs_f64())?;
    Ok(summary)
}

/// Metric lines of one role with re-run duplicates collapsed (last wins).
fn read_metrics(dir: &RunDir, role: &str) -> Result<Vec<StepMetrics>> {
    let path = dir.metrics_path(role);
    if !path.exists() {
        return Err(Error::MissingStage(format!("no metrics for role {role}; run train")));
    }
    let text = std::fs::read_to_string(&path)?;
    let mut by_step: BTreeMap<usize, StepMetrics> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: StepMetrics = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        by_step.insert(m.step, m);
    }
    Ok(by_step.into_values().collect())
}

/// Render tables and charts from the artifacts written by earlier stages.
pub fn cmd_report(dir: &RunDir) -> Result<()> {
    let started = Instant::now();
    let mut manifest = dir.load_manifest()?;
    require_stage(&manifest, "attacked", "attack")?;
    let report_dir = dir.report_dir();
    std::fs::create_dir_all(&report_dir)?;

    // training curves from the target metric stream
    let metrics = read_metrics(dir, Role::Target.stream_name())?;
    if !metrics.is_empty() {
        let series = vec![
            Series {
                name: "labeled loss".into(),
                points: metrics.iter().map(|m| (m.step as f64, m.loss_labeled)).collect(),
            },
            Series {
                name: "unlabeled loss".into(),
                points: metrics.iter().map(|m| (m.step as f64, m.loss_unlabeled)).collect(),
            },
            Series {
                name: "mask rate".into(),
                points: metrics.iter().map(|m| (m.step as f64, m.mask_rate)).collect(),
            },
        ];
        let svg = line_chart("training curves", "step", "value", &series)?;
        atomic_write(&report_dir.join("train_curves.svg"), svg.as_bytes())?;
        let acc_points: Vec<(f64, f64)> = metrics
            .iter()
            .filter_map(|m| m.train_acc.map(|a| (m.step as f64, a)))
            .collect();
        let test_points: Vec<(f64, f64)> = metrics
            .iter()
            .filter_map(|m| m.test_acc.map(|a| (m.step as f64, a)))
            .collect();
        if !acc_points.is_empty() {
            let svg = line_chart(
                "accuracy",
                "step",
                "accuracy",
                &[
                    Series { name: "train".into(), points: acc_points },
                    Series { name: "test".into(), points: test_points },
                ],
            )?;
            atomic_write(&report_dir.join("acc_curves.svg"), svg.as_bytes())?;
        }
    }

    // attack summary table and chart
    let summary: AttackSummary =
        serde_json::from_str(&std::fs::read_to_string(dir.attack_summary_path())?)?;
    let mut rows = Vec::new();
    for (name, m) in &summary.per_attack {
        rows.push(vec![
            name.clone(),
            format!("{:.6}", m.auc),
            format!("{:.6}", m.auc_labeled),
            format!("{:.6}", m.auc_unlabeled),
            format!("{:.6}", m.balanced_acc),
            format!("{:.6}", m.shadow_fit_acc),
        ]);
    }
    write_csv(
        &report_dir.join("summary.csv"),
        &["attack", "auc", "auc_labeled", "auc_unlabeled", "balanced_acc", "shadow_fit_acc"],
        &rows,
    )?;
    let auc_series: Vec<Series> = summary
        .per_attack
        .iter()
        .enumerate()
        .map(|(i, (name, m))| Series {
            name: format!("{name} ({:.3})", m.auc),
            points: vec![(i as f64, 0.5), (i as f64, m.auc)],
        })
        .collect();
    let svg = line_chart("attack auc (bars rise from chance)", "attack", "auc", &auc_series)?;
    atomic_write(&report_dir.join("auc_by_attack.svg"), svg.as_bytes())?;

    // defense comparison, when any defense summaries exist
    let mut defense_rows = Vec::new();
    let mut names: Vec<String> = manifest
        .artifacts
        .iter()
        .filter(|(k, _)| k.starts_with("defense_"))
        .map(|(_, v)| v.clone())
        .collect();
    names.sort();
    for file in names {
        let ds: DefenseSummary =
            serde_json::from_str(&std::fs::read_to_string(dir.root.join(&file))?)?;
        for (attack, m) in &ds.per_attack {
            defense_rows.push(vec![
                ds.defense.clone(),
                attack.clone(),
                format!("{:.6}", m.auc),
                format!("{:.6}", m.balanced_acc),
                format!("{:.6}", ds.utility_test_acc),
            ]);
        }
    }
    if !defense_rows.is_empty() {
        write_csv(
            &report_dir.join("defenses.csv"),
            &["defense", "attack", "auc", "balanced_acc", "utility_test_acc"],
            &defense_rows,
        )?;
    }
    manifest.stages.insert("reported".to_string(), true);
    manifest.artifacts.insert("report".to_string(), "report".to_string());
    dir.save_manifest(&manifest)?;
    dir.record_timing("report", started.elapsed().as_secs_f64())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_source_parsing() {
        assert_eq!(
            DataSource::parse("synthetic:200:4").unwrap(),
            DataSource::Synthetic { n: 200, classes: 4 }
        );
        assert_eq!(
            DataSource::parse("/data/batches").unwrap(),
            DataSource::Cifar { path: "/data/batches".into() }
        );
        assert!(DataSource::parse("synthetic:200").is_err());
        assert!(DataSource::parse("synthetic:x:4").is_err());
    }

    #[test]
    fn run_ids_depend_on_config_and_data() {
        let cfg = ExperimentConfig::default();
        let a = run_id(&cfg, &DataSource::Synthetic { n: 100, classes: 4 }).unwrap();
        let b = run_id(&cfg, &DataSource::Synthetic { n: 101, classes: 4 }).unwrap();
        assert_ne!(a, b);
        let mut cfg2 = cfg.clone();
        cfg2.seed = cfg.seed + 1;
        let c = run_id(&cfg2, &DataSource::Synthetic { n: 100, classes: 4 }).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.len(), 12);
        assert_eq!(a, run_id(&cfg, &DataSource::Synthetic { n: 100, classes: 4 }).unwrap());
    }

    #[test]
    fn subset_strings_are_stable() {
        assert_eq!(subset_str(Subset::LabeledMember), "labeled_member");
        assert_eq!(subset_str(Subset::UnlabeledMember), "unlabeled_member");
        assert_eq!(subset_str(Subset::NonMember), "non_member");
    }
}
