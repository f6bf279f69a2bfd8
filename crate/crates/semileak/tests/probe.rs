//! Scratch probe for tuning the end-to-end leakage setup. Ignored by
//! default; run explicitly with env overrides:
//!   P_SEED, P_URATIO, P_EMA, P_WIDEN, P_STEPS, P_BATCH, P_AUG,
//!   P_LAMBDA, P_TAU, P_WD, P_LR
use std::time::Instant;

use semileak::attacks::{da_features_batch, AttackKind};
use semileak::config::{ExperimentConfig, SimFn, SslMethod};
use semileak::data::{make_synthetic_dataset, split_dataset, SampleStore};
use semileak::eval::{auc, step_sweep};
use semileak::rng::stream;
use semileak::ssl::{role_plan, train_collecting, Role};

fn envv<T: std::str::FromStr>(key: &str, default: T) -> T
where
    T::Err: std::fmt::Debug,
{
    std::env::var(key).map(|v| v.parse().unwrap()).unwrap_or(default)
}

#[test]
#[ignore]
fn probe_leakage() {
    let seed: u64 = envv("P_SEED", 11);
    let cfg = ExperimentConfig {
        ssl_method: SslMethod::Fixmatch,
        labeled_count: 40,
        total_steps: envv("P_STEPS", 3000),
        batch_size: envv("P_BATCH", 8),
        uratio: envv("P_URATIO", 7),
        views: 10,
        sim_fn: SimFn::Js,
        aug_level: envv("P_AUG", 2),
        ema_momentum: envv("P_EMA", 0.999),
        widen_factor: envv("P_WIDEN", 1),
        lambda_u: envv("P_LAMBDA", 1.0),
        tau: envv("P_TAU", 0.95),
        weight_decay: envv("P_WD", 5e-4),
        lr0: envv("P_LR", 0.03),
        seed,
        ..ExperimentConfig::default()
    };
    let t0 = Instant::now();
    let store = SampleStore::new(make_synthetic_dataset(2000, 4, seed).unwrap(), 4).unwrap();
    let bundle = split_dataset(&store, 40, seed).unwrap();
    let tplan = role_plan(&cfg, &store, &bundle, Role::Target).unwrap();
    let (tfinal, tsnaps, tmetrics) = train_collecting(&tplan, &store).unwrap();
    let splan = role_plan(&cfg, &store, &bundle, Role::Shadow).unwrap();
    let (sfinal, ssnaps, _) = train_collecting(&splan, &store).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();

    let tail = &tmetrics[tmetrics.len().saturating_sub(200)..];
    let mask: f64 = tail.iter().map(|m| m.mask_rate).sum::<f64>() / tail.len() as f64;

    let reports = step_sweep(
        &store,
        &bundle,
        &cfg,
        &[AttackKind::Da],
        &[(0, tsnaps[0].1.clone()), (cfg.total_steps, tfinal.clone())],
        &[(0, ssnaps[0].1.clone()), (cfg.total_steps, sfinal)],
    )
    .unwrap();

    // Ceiling check: skip the learned MLP and score each target sample by the
    // negated mean of its view-distance features. Shows how much signal the
    // raw features hold independent of attack-model fit quality.
    let tsnap = tfinal.ema_snapshot().unwrap();
    let probe_views = stream(seed, "probe").child("views");
    let feat = |ids: &[usize]| -> Vec<Vec<f64>> {
        let rows = da_features_batch(
            &tsnap, &store, ids, cfg.views, cfg.sim_fn, cfg.aug_level, &probe_views,
        )
        .unwrap();
        let k2 = cfg.views * cfg.views;
        rows.iter()
            .map(|row| {
                let block = |b: usize| -> f64 {
                    -row[b * k2..(b + 1) * k2].iter().sum::<f64>() / k2 as f64
                };
                let all = (block(0) + block(1) + block(2)) / 3.0;
                // ww block is sorted descending: index 0 is the largest
                // weak-view disagreement, the middle of the nonzero range
                // tracks the bulk.
                vec![all, block(0), block(1), block(2), -row[0], -row[k2 * 2 / 5]]
            })
            .collect()
    };
    let m_rows = feat(&bundle.target_train);
    let n_rows = feat(&bundle.target_test);
    let col = |rows: &[Vec<f64>], j: usize| -> Vec<f64> { rows.iter().map(|r| r[j]).collect() };
    let oracle: Vec<f64> = (0..6)
        .map(|j| auc(&col(&m_rows, j), &col(&n_rows, j)).unwrap())
        .collect();

    // How hard does the learned attack head fit its own shadow rows?
    let report = semileak::attacks::run_attack(
        semileak::attacks::AttackKind::Da,
        &store,
        &bundle,
        &cfg,
        &ssnap,
        &tsnap,
        &stream(seed, "probe-attack"),
    )
    .unwrap();
    let fit_acc = report.shadow_fit_acc;
    let secs = t0.elapsed().as_secs_f64();
    println!(
        "seed {seed} uratio {} ema {} widen {} steps {} aug {} lam {} tau {} wd {} lr {}: \
         auc {:.3} -> {:.3} (raw {:.3} ww {:.3} ss {:.3} ws {:.3} wwmax {:.3} wwmid {:.3}), \
         js {:.3} -> {:.3}, train_acc {:.3}, test_acc {:.3}, mask(last200) {:.3}, \
         train {:.0}s total {:.0}s",
        cfg.uratio,
        cfg.ema_momentum,
        cfg.widen_factor,
        cfg.total_steps,
        cfg.aug_level,
        cfg.lambda_u,
        cfg.tau,
        cfg.weight_decay,
        cfg.lr0,
        reports[0].auc["da"],
        reports[1].auc["da"],
        oracle[0],
        oracle[1],
        oracle[2],
        oracle[3],
        oracle[4],
        oracle[5],
        reports[0].js_entropy,
        reports[1].js_entropy,
        reports[1].train_acc,
        reports[1].test_acc,
        mask,
        train_secs,
        secs,
    );
}
