//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 1 5`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rail_core::config::OfflineConfig;
use rail_core::datasets::{generate_tier_with, mix_supplementary, split_holdout, DemoSet, Tier};
use rail_core::density::{fit_gmm_with, GmmConfig, JointDensityModel};
use rail_core::discriminator::{
    combined_offline_loss, odds, offline_disc_loss, online_disc_loss, pointwise_optimum, reg_loss, Discriminator,
    LambdaSchedule, Pair, TargetPair, WeightedPair, CLIP_HI, CLIP_LO,
};
use rail_core::envs::{reference_returns, EnvId, EnvSpec};
use rail_core::evaluation::{grid_search_kth, mean, normalized_score, ScoreNormalizer};
use rail_core::experiments::{adaptation_gain, offline_score, online_seed, train_seed};
use rail_core::offline::{fit_densities, train_discriminator, OfflineArtifacts};
use rail_core::online::{gating_violations, AdaptMode, OnlineConfig, OnlineRun};
use rail_core::parallel::Parallelism;
use rail_core::policy::{train_reference_policy, weighted_bc_loss, BcConfig, GaussianPolicy, WeightedSample};
use rail_core::rng::RngStream;

type Outcome = Result<(bool, String), String>;

const SEQ: Parallelism = Parallelism::Sequential;
const SEEDS: u64 = 10;
const EVAL_EPISODES: usize = 20;
const ONLINE_EPISODES: usize = 100;
const GRID_SEEDS: [u64; 3] = [100, 101, 102];

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn pointmass() -> EnvSpec {
    EnvSpec::new(EnvId::PointMass2d)
}

// ---------------------------------------------------------------- shared runs

struct SeedModels {
    rail: OfflineArtifacts,
    bc: OfflineArtifacts,
    expert: DemoSet,
}

fn normalizer() -> &'static ScoreNormalizer {
    static N: OnceLock<ScoreNormalizer> = OnceLock::new();
    N.get_or_init(|| {
        let r = reference_returns(&pointmass(), 100, 0, SEQ).expect("reference returns");
        ScoreNormalizer::from_reference(&r).expect("normalizer")
    })
}

/// RAIL and plain BC per seed on 10 expert + 200 four-tier episodes.
fn seed_models() -> &'static Vec<SeedModels> {
    static M: OnceLock<Vec<SeedModels>> = OnceLock::new();
    M.get_or_init(|| {
        let base = OfflineConfig::default();
        (0..SEEDS)
            .map(|seed| {
                let (rail, expert) = train_seed(&base, "me+m+mr+r", seed, SEQ).expect("rail training");
                let bc_cfg = OfflineConfig {
                    plain_bc: true,
                    ..base.clone()
                };
                let (bc, _) = train_seed(&bc_cfg, "me+m+mr+r", seed, SEQ).expect("bc training");
                SeedModels { rail, bc, expert }
            })
            .collect()
    })
}

/// Shift threshold re-derived by grid search at sigma 0.1 on seeds disjoint
/// from the ones the criteria score.
fn derived_kth() -> &'static (f64, String) {
    static K: OnceLock<(f64, String)> = OnceLock::new();
    K.get_or_init(|| {
        let models = seed_models();
        let norm = normalizer();
        let (rows, best) = grid_search_kth(&GRID_SEEDS, SEQ, |k, s| {
            let m = &models[(s as usize) % models.len()];
            let cfg = OnlineConfig {
                kappa_threshold: k,
                ..Default::default()
            };
            let run = online_seed(&m.rail, &m.expert, 0.1, ONLINE_EPISODES, AdaptMode::On, &cfg, s)?;
            Ok((normalized_score(mean(&run.episode_returns()), norm), run.update_count()))
        })
        .expect("grid search");
        let table = rows
            .iter()
            .map(|r| format!("{:.1}:{:.2}", r.kappa_threshold, r.mean))
            .collect::<Vec<_>>()
            .join(" ");
        (best, table)
    })
}

fn online_config() -> OnlineConfig {
    OnlineConfig {
        kappa_threshold: derived_kth().0,
        ..Default::default()
    }
}

/// Online runs keyed by (sigma in thousandths, adapt mode).
fn online_runs(sigma: f64, adapt: AdaptMode) -> Vec<OnlineRun> {
    static CACHE: OnceLock<std::sync::Mutex<BTreeMap<(u64, &'static str), Vec<OnlineRun>>>> = OnceLock::new();
    let key = ((sigma * 1000.0).round() as u64, adapt.as_str());
    let cache = CACHE.get_or_init(Default::default);
    if let Some(v) = cache.lock().expect("cache").get(&key) {
        return v.clone();
    }
    let cfg = online_config();
    let runs: Vec<OnlineRun> = seed_models()
        .iter()
        .enumerate()
        .map(|(s, m)| online_seed(&m.rail, &m.expert, sigma, ONLINE_EPISODES, adapt, &cfg, s as u64).expect("online run"))
        .collect();
    cache.lock().expect("cache").insert(key, runs.clone());
    runs
}

// ------------------------------------------------------------- criteria 1..5

fn c1_boundary_oracle() -> Outcome {
    let mut rng = RngStream::new(2024, 1);
    let log_uniform = |rng: &mut RngStream, lo: f64, hi: f64| (rng.uniform(lo.ln(), hi.ln())).exp();
    let mut worst_closed: f64 = 0.0;
    let mut worst_limit: f64 = 0.0;
    for _ in 0..100 {
        let p_e = log_uniform(&mut rng, 1e-3, 10.0);
        let p_s = log_uniform(&mut rng, 1e-3, 10.0);
        let beta = log_uniform(&mut rng, 1e-2, 1e2);
        let (a_e, a_s) = (1.0 / (1.0 + beta), beta / (1.0 + beta));
        let gamma = a_e * p_e + a_s * p_s;
        let d0 = pointwise_optimum(p_e, p_s, a_e, a_s, 0.0, gamma).map_err(err)?;
        worst_closed = worst_closed.max((d0 - p_e / (p_e + beta * p_s)).abs());
        let dinf = pointwise_optimum(p_e, p_s, a_e, a_s, 1e8, gamma).map_err(err)?;
        worst_limit = worst_limit.max((dinf - p_e / (p_e + p_s)).abs());
    }
    Ok((
        worst_closed < 1e-9 && worst_limit < 1e-4,
        format!("max |d - closed form| {worst_closed:.2e} at lambda 0, max |d - posterior| {worst_limit:.2e} at lambda 1e8"),
    ))
}

fn c2_monotone_interpolation() -> Outcome {
    let lambdas = [0.0, 1.0, 10.0, 100.0, 1e4];
    let points = [(1.0, 1.0), (2.0, 0.5), (0.3, 1.7), (0.05, 0.04)];
    let mut failures = Vec::new();
    for beta in [2.0, 9.0, 100.0] {
        let (a_e, a_s) = (1.0 / (1.0 + beta), beta / (1.0 + beta));
        for &(p_e, p_s) in &points {
            let gamma = a_e * p_e + a_s * p_s;
            let biased = p_e / (p_e + beta * p_s);
            let eta = p_e / (p_e + p_s);
            let mut prev = f64::NEG_INFINITY;
            for &l in &lambdas {
                let d = pointwise_optimum(p_e, p_s, a_e, a_s, l, gamma).map_err(err)?;
                if d < prev {
                    failures.push(format!("beta {beta} p ({p_e},{p_s}) decreases at lambda {l}"));
                }
                if l > 0.0 && !(d > biased && d < eta) {
                    failures.push(format!("beta {beta} p ({p_e},{p_s}) lambda {l}: {d} not in ({biased}, {eta})"));
                }
                prev = d;
            }
        }
    }
    Ok((
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} (beta, p) cases monotone and strictly interior", 3 * points.len())
        } else {
            failures.join("; ")
        },
    ))
}

fn c3_normalization() -> Outcome {
    let mut rng = RngStream::new(33, 0);
    let data: Vec<(Vec<f64>, Vec<f64>)> = (0..500)
        .map(|i| {
            let s = if i % 2 == 0 { -0.8 } else { 0.6 } + 0.4 * rng.normal();
            (vec![s], vec![(2.0 * s).sin() + 0.25 * rng.normal()])
        })
        .collect();
    let states: Vec<Vec<f64>> = data.iter().map(|d| d.0.clone()).collect();
    let gmm = fit_gmm_with(
        &states,
        &GmmConfig {
            components: 3,
            ..Default::default()
        },
        5,
        "toy",
        SEQ,
    )
    .map_err(err)?
    .model;
    let bc = BcConfig {
        steps: 600,
        batch_size: 32,
        learning_rate: 5e-3,
        hidden: vec![8],
    };
    let (policy, _) = train_reference_policy(&data, vec![(-50.0, 50.0)], &bc, 5, "toy").map_err(err)?;
    let sd_a = policy.log_std()[0].exp();
    let joint = JointDensityModel::new(policy, gmm.clone()).map_err(err)?;
    // 6-sigma trapezoid grid: states over every component, actions around
    // the conditional mean.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (m, v) in gmm.means.iter().zip(&gmm.variances) {
        lo = lo.min(m[0] - 6.0 * v[0].sqrt());
        hi = hi.max(m[0] + 6.0 * v[0].sqrt());
    }
    let n = 301;
    let w = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
    let hs = (hi - lo) / (n - 1) as f64;
    let mut total = 0.0;
    for i in 0..n {
        let s = lo + hs * i as f64;
        let mu = joint.policy().mean(&[s]).map_err(err)?[0];
        let ha = 12.0 * sd_a / (n - 1) as f64;
        let mut inner = 0.0;
        for j in 0..n {
            let a = mu - 6.0 * sd_a + ha * j as f64;
            inner += w(j) * joint.log_density(&[s], &[a]).map_err(err)?.exp();
        }
        total += w(i) * inner * ha;
    }
    let z = total * hs;
    Ok(((z - 1.0).abs() <= 2e-2, format!("integral {z:.6}")))
}

fn central_difference(x: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let o = p[i];
            p[i] = o + h;
            let up = f(&p);
            p[i] = o - h;
            let down = f(&p);
            p[i] = o;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

type Raw = Vec<(Vec<f64>, Vec<f64>, f64)>;

fn raw(rng: &mut RngStream, n: usize) -> Raw {
    (0..n)
        .map(|_| (vec![rng.normal(), rng.normal(), rng.normal()], vec![0.6 * rng.normal(), 0.6 * rng.normal()], rng.uniform(0.05, 0.95)))
        .collect()
}

fn disc_case(seed: u64) -> (Discriminator, Raw, Raw) {
    let mut rng = RngStream::new(seed, 404);
    let mut d = Discriminator::new(3, 2, &[7, 5], &mut rng).expect("disc");
    // Keep instances away from the exact ReLU kink at zero-initialized biases.
    for p in d.net.params_mut() {
        *p += 0.1 * rng.normal();
    }
    let a = raw(&mut rng, 6);
    let b = raw(&mut rng, 6);
    (d, a, b)
}

fn disc_loss_error(kind: &str, seed: u64) -> Result<f64, String> {
    let (model, a, b) = disc_case(seed);
    let eval = |m: &Discriminator| -> rail_core::Result<(f64, Vec<f64>)> {
        let e: Vec<Pair<'_>> = a.iter().map(|(s, x, _)| Pair { state: s, action: x }).collect();
        let w = |scale: f64| -> Vec<WeightedPair<'_>> {
            b.iter()
                .map(|(s, x, v)| WeightedPair {
                    state: s,
                    action: x,
                    weight: scale * v,
                })
                .collect()
        };
        let t: Vec<TargetPair<'_>> = b
            .iter()
            .map(|(s, x, v)| TargetPair {
                state: s,
                action: x,
                target: 1.0 - v,
            })
            .collect();
        match kind {
            "offline" => offline_disc_loss(m, &e, &w(9.0)),
            "reg" => reg_loss(m, &t),
            "combined" => combined_offline_loss(m, &e, &w(9.0), &t, 0.5907),
            _ => online_disc_loss(m, &e, &w(1.0)),
        }
    };
    let (_, g) = eval(&model).map_err(err)?;
    let mut probe = model.clone();
    let fd = central_difference(model.net.params(), &mut |x| {
        probe.net.params_mut().copy_from_slice(x);
        eval(&probe).map(|r| r.0).unwrap_or(f64::NAN)
    });
    Ok(rel_error(&g, &fd))
}

fn bc_loss_error(seed: u64) -> Result<f64, String> {
    let mut rng = RngStream::new(seed, 505);
    let policy = GaussianPolicy::new(3, &[7, 5], vec![(-10.0, 10.0); 2], &mut rng).map_err(err)?;
    let data = raw(&mut rng, 6);
    let batch: Vec<WeightedSample<'_>> = data
        .iter()
        .map(|(s, a, w)| WeightedSample {
            state: s,
            action: a,
            weight: 5.0 * w,
        })
        .collect();
    let (_, g) = weighted_bc_loss(&policy, &batch).map_err(err)?;
    let mut probe = policy.clone();
    let fd = central_difference(&policy.flat_params(), &mut |x| {
        probe.set_flat_params(x).expect("params");
        weighted_bc_loss(&probe, &batch).map(|r| r.0).unwrap_or(f64::NAN)
    });
    Ok(rel_error(&g, &fd))
}

fn c4_gradients() -> Outcome {
    let mut worst = Vec::new();
    let mut ok = true;
    for kind in ["weighted_bc", "offline", "reg", "combined", "online"] {
        let mut w: f64 = 0.0;
        for seed in 0..20 {
            let e = if kind == "weighted_bc" {
                bc_loss_error(seed)?
            } else {
                disc_loss_error(kind, seed)?
            };
            w = w.max(e);
        }
        ok &= w < 1e-4;
        worst.push(format!("{kind} {w:.1e}"));
    }
    Ok((ok, format!("max relative error over 20 instances: {}", worst.join(", "))))
}

fn c5_exact_formulas() -> Outcome {
    let s = LambdaSchedule::default();
    let expected = [
        (1u64, 1.0),
        (10_000, 1.0),
        (10_001, 1.0 / (1.0 + 2f64.ln())),
        (100_000, 1.0 / (1.0 + 90_001f64.ln())),
    ];
    let lambda_err = expected.iter().map(|&(t, v)| (s.value(t) - v).abs()).fold(0.0, f64::max);
    let omega_ok = odds(0.5) == 1.0 && (odds(CLIP_HI) - 99.0).abs() < 1e-12 && (odds(CLIP_LO) - 1.0 / 99.0).abs() < 1e-15;
    let n = normalizer();
    let anchors_ok = normalized_score(n.random_return, n) == 0.0 && normalized_score(n.expert_return, n) == 100.0;
    Ok((
        lambda_err < 1e-9 && omega_ok && anchors_ok,
        format!(
            "lambda max error {lambda_err:.1e}; omega(0.5)={} omega(0.99)={:.12} omega(0.01)={:.12}; score(R_random)={} score(R_expert)={}",
            odds(0.5),
            odds(CLIP_HI),
            odds(CLIP_LO),
            normalized_score(n.random_return, n),
            normalized_score(n.expert_return, n)
        ),
    ))
}

// ------------------------------------------------------------- criteria 6..11

fn c6_imbalance_stability() -> Outcome {
    let spec = pointmass();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..SEEDS {
        let expert = generate_tier_with(&spec, Tier::Expert, 1, seed, SEQ).map_err(err)?.set;
        let supp_seed = seed ^ 0xabc;
        let supp = mix_supplementary(
            &[
                generate_tier_with(&spec, Tier::Medium, 50, supp_seed, SEQ).map_err(err)?.set,
                generate_tier_with(&spec, Tier::Random, 50, supp_seed, SEQ).map_err(err)?.set,
            ],
            &[1.0, 1.0],
        )
        .map_err(err)?;
        let (te, he) = split_holdout(&expert);
        let (ts, hs) = split_holdout(&supp);
        let cfg = OfflineConfig {
            seed,
            ref_steps: 2000,
            disc_steps: 4000,
            eval_every: 1000,
            ..Default::default()
        };
        let quarter = cfg.disc_steps / 4;
        let (mut metrics, mut timing) = (Vec::new(), Vec::new());
        let d = fit_densities(&cfg, &te, &ts, &spec.action_bounds, &mut metrics, &mut timing, SEQ).map_err(err)?;
        let mut at_quarter = [0.0; 2];
        for (i, disable) in [false, true].into_iter().enumerate() {
            let c = OfflineConfig {
                disable_reg: disable,
                ..cfg.clone()
            };
            let mut m = Vec::new();
            train_discriminator(&c, Some(&d), &te, &ts, &he, &hs, &mut m, SEQ).map_err(err)?;
            at_quarter[i] = m
                .iter()
                .find(|r| r.stage == "disc_eval" && r.step == quarter)
                .map(|r| r.loss)
                .ok_or("no held-out loss at 25% of the budget")?;
        }
        if at_quarter[0] < at_quarter[1] {
            wins += 1;
        }
        pairs.push(format!("{:.3}/{:.3}", at_quarter[0], at_quarter[1]));
    }
    Ok((
        wins >= 8,
        format!("regularized lower in {wins}/10 seeds (reg/unreg: {})", pairs.join(" ")),
    ))
}

fn c7_offline_robustness() -> Outcome {
    let spec = pointmass();
    let norm = normalizer();
    let mut rows = Vec::new();
    let mut ok = true;
    for sigma in [0.0, 0.1, 0.2] {
        let mut rail = Vec::new();
        let mut bc = Vec::new();
        for (s, m) in seed_models().iter().enumerate() {
            rail.push(offline_score(&m.rail, &spec, sigma, EVAL_EPISODES, s as u64, norm, SEQ).map_err(err)?);
            bc.push(offline_score(&m.bc, &spec, sigma, EVAL_EPISODES, s as u64, norm, SEQ).map_err(err)?);
        }
        let (r, b) = (mean(&rail), mean(&bc));
        if sigma == 0.0 {
            ok &= r > 80.0 && b > 80.0;
        } else {
            ok &= r > b;
        }
        rows.push(format!("sigma {sigma}: rail {r:.2} bc {b:.2}"));
    }
    Ok((ok, rows.join("; ")))
}

fn count_improved(runs: &[OnlineRun]) -> Result<(usize, f64), String> {
    let gains = runs
        .iter()
        .map(|r| adaptation_gain(&r.episode_returns(), 10))
        .collect::<rail_core::Result<Vec<f64>>>()
        .map_err(err)?;
    Ok((gains.iter().filter(|g| **g > 0.0).count(), mean(&gains)))
}

fn c8_online_adaptation() -> Outcome {
    let (kth, grid) = derived_kth();
    let (on, on_gain) = count_improved(&online_runs(0.1, AdaptMode::On))?;
    let (off, off_gain) = count_improved(&online_runs(0.1, AdaptMode::Off))?;
    Ok((
        on >= 8 && off < 8,
        format!(
            "kth {kth:.1} from grid [{grid}]; on improved {on}/10 (mean gain {on_gain:.2}), off improved {off}/10 (mean gain {off_gain:.2})"
        ),
    ))
}

fn c9_utm_efficiency() -> Outcome {
    let on = online_runs(0.2, AdaptMode::On);
    let always = online_runs(0.2, AdaptMode::Always);
    let mut ok = true;
    let mut cells = Vec::new();
    for (a, b) in on.iter().zip(&always) {
        ok &= a.update_count() < b.update_count() && a.update_wall_ms() < b.update_wall_ms();
        cells.push(format!(
            "{}/{} ({:.0}/{:.0} ms)",
            a.update_count(),
            b.update_count(),
            a.update_wall_ms(),
            b.update_wall_ms()
        ));
    }
    Ok((ok, format!("on/always updates per seed: {}", cells.join(" "))))
}

fn c10_tier_coverage() -> Outcome {
    let spec = pointmass();
    let norm = normalizer();
    let base = OfflineConfig::default();
    let mut narrow = Vec::new();
    let mut rich = Vec::new();
    for (s, m) in seed_models().iter().enumerate() {
        let (me, _) = train_seed(&base, "me", s as u64, SEQ).map_err(err)?;
        narrow.push(offline_score(&me, &spec, 0.2, EVAL_EPISODES, s as u64, norm, SEQ).map_err(err)?);
        rich.push(offline_score(&m.rail, &spec, 0.2, EVAL_EPISODES, s as u64, norm, SEQ).map_err(err)?);
    }
    let (r, n) = (mean(&rich), mean(&narrow));
    Ok((r >= n, format!("sigma 0.2: me+m+mr+r {r:.2}, me {n:.2}")))
}

fn c11_gating() -> Outcome {
    let cfg = online_config();
    let mut replayed = 0;
    let mut violations = 0;
    let mut triggers = 0;
    for sigma in [0.1, 0.2] {
        for run in online_runs(sigma, AdaptMode::On) {
            violations += gating_violations(&run.kappa_log, &run.trigger_log, cfg.kappa_threshold, cfg.consecutive_required);
            triggers += run.update_count();
            replayed += 1;
        }
    }
    let zero = OnlineConfig {
        kappa_threshold: 0.0,
        ..Default::default()
    };
    let mut zero_triggers = 0;
    for (s, m) in seed_models().iter().enumerate().take(3) {
        let run = online_seed(&m.rail, &m.expert, 0.2, 30, AdaptMode::On, &zero, s as u64).map_err(err)?;
        zero_triggers += run.update_count();
        violations += gating_violations(&run.kappa_log, &run.trigger_log, 0.0, zero.consecutive_required);
    }
    Ok((
        violations == 0 && zero_triggers == 0 && triggers > 0,
        format!("{replayed} logs with {triggers} triggers replayed, {violations} violations; kth 0 gave {zero_triggers} triggers"),
    ))
}

// ------------------------------------------------------------------ criterion 12

fn rail(cwd: &Path, args: &[String]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_rail"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RAIL_OUT_ROOT")
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!("rail {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn is_timing_sidecar(p: &Path) -> bool {
    matches!(
        p.file_name().and_then(|n| n.to_str()),
        Some("timing.ndjson" | "update_timing.ndjson")
    )
}

/// Runs `args`, then deletes every listed output and reruns the command
/// recorded in the manifest. Returns the number of compared files and the
/// names of any that differ.
fn rerun_matches(cwd: &Path, args: &[&str], manifest: &str) -> Result<(usize, Vec<String>), String> {
    let mut full: Vec<String> = vec!["--jobs".into(), "1".into()];
    full.extend(args.iter().map(|s| s.to_string()));
    rail(cwd, &full)?;
    let manifest_path = cwd.join(manifest);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest_path).map_err(err)?).map_err(err)?;
    let files: Vec<PathBuf> = m["artifacts"]
        .as_array()
        .ok_or("manifest without artifacts")?
        .iter()
        .filter_map(|v| v.as_str().map(PathBuf::from))
        .collect();
    let recorded: Vec<String> = m["args"]
        .as_array()
        .ok_or("manifest without args")?
        .iter()
        .filter_map(|v| v.as_str().map(String::from))
        .collect();
    let mut first = BTreeMap::new();
    for f in &files {
        first.insert(f.clone(), fs::read(cwd.join(f)).map_err(err)?);
        fs::remove_file(cwd.join(f)).map_err(err)?;
    }
    fs::remove_file(&manifest_path).map_err(err)?;
    rail(cwd, &recorded)?;
    let mut compared = 0;
    let mut differ = Vec::new();
    for (f, bytes) in &first {
        if is_timing_sidecar(f) {
            continue;
        }
        compared += 1;
        if fs::read(cwd.join(f)).map_err(err)? != *bytes {
            differ.push(f.display().to_string());
        }
    }
    Ok((compared, differ))
}

fn c12_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let cwd = dir.path();
    fs::write(
        cwd.join("tiny.cfg"),
        "expert_path=expert.demo\nsupp_path=supp.demo\nseed=3\nref_steps=300\ndisc_steps=400\nbc_steps=400\neval_every=100\n",
    )
    .map_err(err)?;
    let steps: [(&str, Vec<&str>, &str); 9] = [
        (
            "gen-data",
            vec!["gen-data", "--env", "pointmass2d", "--tier", "expert", "--episodes", "6", "--seed", "3", "--out", "expert.demo"],
            "expert.demo.manifest.json",
        ),
        (
            "gen-data mix",
            vec!["gen-data", "--env", "pointmass2d", "--mix", "me", "--seed", "3", "--out", "supp.demo"],
            "supp.demo.manifest.json",
        ),
        (
            "ref-returns",
            vec!["ref-returns", "--env", "pointmass2d", "--episodes", "20", "--out", "refs.txt"],
            "refs.txt.manifest.json",
        ),
        (
            "train-offline",
            vec!["train-offline", "--config", "tiny.cfg", "--out", "art"],
            "art/manifest.json",
        ),
        (
            "run-online",
            vec!["run-online", "--artifacts", "art", "--sigma", "0.2", "--episodes", "6", "--kth", "0.9", "--out", "online"],
            "online/manifest.json",
        ),
        (
            "evaluate",
            vec!["evaluate", "--artifacts", "art", "--runs", "2", "--episodes", "3", "--refs", "refs.txt", "--out", "eval"],
            "eval/manifest.json",
        ),
        (
            "grid-kth",
            vec!["grid-kth", "--artifacts", "art", "--runs", "1", "--episodes", "3", "--refs", "refs.txt", "--out", "grid"],
            "grid/manifest.json",
        ),
        (
            "tier-ablation",
            vec![
                "tier-ablation", "--config", "tiny.cfg", "--mixes", "me", "--sweep", "0,0.2", "--runs", "1", "--episodes", "3",
                "--refs", "refs.txt", "--out", "ablation",
            ],
            "ablation/manifest.json",
        ),
        ("verify", vec!["verify", "--out", "verify"], "verify/manifest.json"),
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, args, manifest) in steps {
        let (n, differ) = rerun_matches(cwd, &args, manifest)?;
        ok &= differ.is_empty() && n > 0;
        notes.push(if differ.is_empty() {
            format!("{name} {n} files identical")
        } else {
            format!("{name} differs in {}", differ.join(","))
        });
    }
    Ok((ok, notes.join("; ")))
}

// ------------------------------------------------------------------------ runner

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    check: fn() -> Outcome,
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mins = |m: u64| Duration::from_secs(60 * m);
    let criteria = [
        Criterion { id: 1, name: "biased boundary oracle", budget: Duration::from_secs(5), check: c1_boundary_oracle },
        Criterion { id: 2, name: "monotone interpolation", budget: Duration::from_secs(5), check: c2_monotone_interpolation },
        Criterion { id: 3, name: "joint density normalization", budget: Duration::from_secs(30), check: c3_normalization },
        Criterion { id: 4, name: "gradient suite", budget: mins(2), check: c4_gradients },
        Criterion { id: 5, name: "exact formulas", budget: Duration::from_secs(60), check: c5_exact_formulas },
        Criterion { id: 6, name: "discriminator stability under imbalance", budget: mins(10), check: c6_imbalance_stability },
        Criterion { id: 7, name: "offline robustness trend", budget: mins(45), check: c7_offline_robustness },
        Criterion { id: 8, name: "online adaptation trend", budget: mins(30), check: c8_online_adaptation },
        Criterion { id: 9, name: "update gating efficiency", budget: mins(30), check: c9_utm_efficiency },
        Criterion { id: 10, name: "tier coverage trend", budget: mins(60), check: c10_tier_coverage },
        Criterion { id: 11, name: "gating correctness", budget: mins(10), check: c11_gating },
        Criterion { id: 12, name: "reproducibility", budget: mins(10), check: c12_reproducibility },
    ];
    let mut failed = Vec::new();
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.check)();
        let elapsed = start.elapsed();
        let (passed, detail) = match outcome {
            Ok((_, d)) if elapsed > c.budget => (false, format!("{d}; over budget {:.0}s", c.budget.as_secs_f64())),
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "{} criterion {:>2} {} ({:.1}s): {}",
            if passed { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            detail
        );
        if !passed {
            failed.push(c.id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
