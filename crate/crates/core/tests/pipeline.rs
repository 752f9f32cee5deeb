use std::sync::OnceLock;

use rail_core::config::OfflineConfig;
use rail_core::datasets::DemoSet;
use rail_core::envs::{EnvId, EnvSpec};
use rail_core::experiments::{online_seed, standard_data, train_seed};
use rail_core::offline::{load_artifacts, run_offline_with, write_artifacts, OfflineArtifacts};
use rail_core::online::{gating_violations, AdaptMode, OnlineConfig};
use rail_core::parallel::Parallelism;

fn tiny() -> OfflineConfig {
    OfflineConfig {
        ref_steps: 300,
        disc_steps: 400,
        bc_steps: 400,
        eval_every: 100,
        ..Default::default()
    }
}

fn trained() -> &'static (OfflineArtifacts, DemoSet) {
    static A: OnceLock<(OfflineArtifacts, DemoSet)> = OnceLock::new();
    A.get_or_init(|| train_seed(&tiny(), "me+m", 1, Parallelism::Sequential).unwrap())
}

#[test]
fn sequential_and_rayon_train_identically() {
    let spec = EnvSpec::new(EnvId::PointMass2d);
    let (e, s) = standard_data(&spec, "me", 2, Parallelism::Sequential).unwrap();
    let (e2, s2) = standard_data(&spec, "me", 2, Parallelism::Rayon).unwrap();
    assert_eq!(e, e2);
    assert_eq!(s, s2);
    let a = run_offline_with(&tiny(), &e, &s, Parallelism::Sequential).unwrap();
    let b = run_offline_with(&tiny(), &e, &s, Parallelism::Rayon).unwrap();
    assert_eq!(a.policy.flat_params(), b.policy.flat_params());
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn artifacts_survive_a_round_trip() {
    let (a, _) = trained();
    let dir = tempfile::tempdir().unwrap();
    let written = write_artifacts(dir.path(), a).unwrap();
    assert!(written.iter().all(|p| p.exists()));
    let b = load_artifacts(dir.path()).unwrap();
    assert_eq!(a.policy.flat_params(), b.policy.flat_params());
}

#[test]
fn off_mode_never_updates() {
    let (a, e) = trained();
    let run = online_seed(a, e, 0.3, 5, AdaptMode::Off, &OnlineConfig::default(), 0).unwrap();
    assert_eq!(run.update_count(), 0);
    assert_eq!(run.learner.policy.flat_params(), a.policy.flat_params());
}

#[test]
fn gating_holds_and_zero_threshold_never_fires() {
    let (a, e) = trained();
    let cfg = OnlineConfig {
        kappa_threshold: 0.95,
        ..Default::default()
    };
    let run = online_seed(a, e, 0.3, 6, AdaptMode::On, &cfg, 3).unwrap();
    assert_eq!(gating_violations(&run.kappa_log, &run.trigger_log, 0.95, cfg.consecutive_required), 0);
    let zero = OnlineConfig {
        kappa_threshold: 0.0,
        ..Default::default()
    };
    let run = online_seed(a, e, 0.3, 6, AdaptMode::On, &zero, 3).unwrap();
    assert_eq!(run.update_count(), 0);
}

#[test]
fn always_mode_updates_on_schedule() {
    let (a, e) = trained();
    let cfg = OnlineConfig::default();
    let run = online_seed(a, e, 0.0, 2, AdaptMode::Always, &cfg, 5).unwrap();
    assert!(run.update_count() > 0);
    let n = cfg.consecutive_required;
    assert!(run.trigger_log.iter().all(|t| (t.step + 1) % n == 0));
}
