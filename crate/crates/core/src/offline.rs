//! Offline pipeline: reference policies, state mixtures, the regularized
//! discriminator, then weighted behavior cloning on the union of both sets.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::OfflineConfig;
use crate::datasets::{split_holdout, DemoSample, DemoSet};
use crate::density::{clamped_ratio, fit_gmm_with, GmmConfig, GmmModel, JointDensityModel};
use crate::discriminator::{
    logistic, DiscTrainer, Discriminator, LambdaSchedule, Pair, TargetPair, WeightedPair,
};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Header;
use crate::parallel::{self, Parallelism};
use crate::policy::{train_bc, train_reference_policy, BcConfig, GaussianPolicy};
use crate::rng::RngStream;

pub const POLICY_FILE: &str = "policy.ckpt";
pub const DISC_FILE: &str = "disc.ckpt";
pub const REF_EXPERT_FILE: &str = "ref_expert.ckpt";
pub const REF_SUPP_FILE: &str = "ref_supp.ckpt";
pub const GMM_EXPERT_FILE: &str = "gmm_expert.ckpt";
pub const GMM_SUPP_FILE: &str = "gmm_supp.ckpt";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const TIMING_FILE: &str = "timing.ndjson";
pub const CONFIG_FILE: &str = "config.txt";

/// Checkpoints required by the online phase.
pub const FULL_ARTIFACTS: [&str; 6] = [
    POLICY_FILE,
    DISC_FILE,
    REF_EXPERT_FILE,
    REF_SUPP_FILE,
    GMM_EXPERT_FILE,
    GMM_SUPP_FILE,
];

/// One line of the metrics log. Stages: `ref_expert`, `ref_supp`,
/// `gmm_expert`, `gmm_supp` (EM log-likelihood per iteration), `disc`,
/// `disc_eval` (held-out loss), `weights` (mean omega per tier), `bc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<String>,
}

impl MetricRecord {
    fn new(stage: &str, step: usize, loss: f64) -> Self {
        Self {
            stage: stage.to_string(),
            step,
            loss,
            lambda: None,
            tier: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct DensityArtifacts {
    pub ref_expert: GaussianPolicy,
    pub ref_supp: GaussianPolicy,
    pub gmm_expert: GmmModel,
    pub gmm_supp: GmmModel,
}

#[derive(Debug, Clone)]
pub struct OfflineArtifacts {
    pub config: OfflineConfig,
    pub config_hash: String,
    pub policy: GaussianPolicy,
    pub discriminator: Option<Discriminator>,
    pub densities: Option<DensityArtifacts>,
    pub metrics: Vec<MetricRecord>,
    pub timing: Vec<StageTiming>,
}

impl OfflineArtifacts {
    pub fn header(&self, kind: &str) -> Header {
        Header::new(kind)
            .with("config_hash", &self.config_hash)
            .with("seed", self.config.seed)
    }

    /// Held-out discriminator losses as `(step, loss)`.
    pub fn eval_curve(&self) -> Vec<(usize, f64)> {
        self.metrics
            .iter()
            .filter(|m| m.stage == "disc_eval")
            .map(|m| (m.step, m.loss))
            .collect()
    }

    /// Mean training-set omega per tier, from the `weights` records.
    pub fn tier_weights(&self) -> Vec<(String, f64)> {
        self.metrics
            .iter()
            .filter(|m| m.stage == "weights")
            .map(|m| (m.tier.clone().unwrap_or_default(), m.loss))
            .collect()
    }
}

/// Balanced held-out cross-entropy:
/// `(mean_E[-ln d] + mean_S[-ln(1 - d)]) / 2`.
pub fn eval_discriminator(disc: &Discriminator, held_expert: &[DemoSample], held_supp: &[DemoSample]) -> Result<f64> {
    if held_expert.is_empty() {
        return Err(Error::EmptySplit("held-out expert"));
    }
    if held_supp.is_empty() {
        return Err(Error::EmptySplit("held-out supplementary"));
    }
    let mut e = 0.0;
    for s in held_expert {
        e -= disc.forward(&s.state, &s.action)?.ln();
    }
    let mut x = 0.0;
    for s in held_supp {
        x -= (1.0 - disc.forward(&s.state, &s.action)?).ln();
    }
    Ok(0.5 * (e / held_expert.len() as f64 + x / held_supp.len() as f64))
}

fn abort(stage: &'static str, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NumericAbort {
            stage: stage.to_string(),
            step,
        },
        other => other,
    }
}

/// Fits the reference policies and state mixtures on the training splits.
pub fn fit_densities(
    config: &OfflineConfig,
    train_expert: &[DemoSample],
    train_supp: &[DemoSample],
    bounds: &[(f64, f64)],
    metrics: &mut Vec<MetricRecord>,
    timing: &mut Vec<StageTiming>,
    mode: Parallelism,
) -> Result<DensityArtifacts> {
    let bc = BcConfig {
        steps: config.ref_steps,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        hidden: config.policy_hidden.clone(),
    };
    let mut refs = Vec::new();
    for (stage, source, data) in [("ref_expert", "expert", train_expert), ("ref_supp", "supplementary", train_supp)] {
        let t = Instant::now();
        let (policy, losses) = train_reference_policy(data, bounds.to_vec(), &bc, config.seed, source)
            .map_err(|e| match e {
                Error::NumericAbort { step, .. } => Error::NumericAbort {
                    stage: stage.into(),
                    step,
                },
                other => other,
            })?;
        metrics.extend(losses.iter().enumerate().map(|(i, l)| MetricRecord::new(stage, i + 1, *l)));
        timing.push(StageTiming {
            stage: stage.into(),
            wall_ms: t.elapsed().as_secs_f64() * 1e3,
        });
        refs.push(policy);
    }
    let gmm_cfg = GmmConfig {
        components: config.gmm_components,
        alpha: config.gmm_alpha,
        ..GmmConfig::default()
    };
    let mut gmms = Vec::new();
    for (stage, source, data) in [("gmm_expert", "expert", train_expert), ("gmm_supp", "supplementary", train_supp)] {
        let t = Instant::now();
        let states: Vec<Vec<f64>> = data.iter().map(|s| s.state.clone()).collect();
        let fit = fit_gmm_with(&states, &gmm_cfg, config.seed, source, mode)?;
        metrics.extend(
            fit.log_likelihood_trace
                .iter()
                .enumerate()
                .map(|(i, ll)| MetricRecord::new(stage, i + 1, -ll)),
        );
        timing.push(StageTiming {
            stage: stage.into(),
            wall_ms: t.elapsed().as_secs_f64() * 1e3,
        });
        gmms.push(fit.model);
    }
    let ref_supp = refs.pop().expect("two policies");
    let ref_expert = refs.pop().expect("two policies");
    let gmm_supp = gmms.pop().expect("two mixtures");
    let gmm_expert = gmms.pop().expect("two mixtures");
    Ok(DensityArtifacts {
        ref_expert,
        ref_supp,
        gmm_expert,
        gmm_supp,
    })
}

/// `(log p_E, log p_S)` under the joint surrogates for every sample.
fn joint_log_densities(
    densities: &DensityArtifacts,
    samples: &[DemoSample],
    mode: Parallelism,
) -> Result<Vec<(f64, f64)>> {
    let je = JointDensityModel::new(densities.ref_expert.clone(), densities.gmm_expert.clone())?;
    let js = JointDensityModel::new(densities.ref_supp.clone(), densities.gmm_supp.clone())?;
    parallel::map(mode, samples, |s| {
        Ok((je.log_density(&s.state, &s.action)?, js.log_density(&s.state, &s.action)?))
    })
    .into_iter()
    .collect()
}

/// Step indices (1-based) at which the held-out loss is recorded.
pub fn eval_steps(config: &OfflineConfig) -> Vec<usize> {
    let mut steps: Vec<usize> = (1..=config.disc_steps)
        .filter(|t| t % config.eval_every == 0)
        .collect();
    steps.push((config.disc_steps / 4).max(1));
    steps.push(config.disc_steps);
    steps.sort_unstable();
    steps.dedup();
    steps
}

/// Trains the discriminator on `L_off + lambda(t) L_reg` (or `L_off` alone
/// under `disable_reg`), logging the held-out loss along the way.
#[allow(clippy::too_many_arguments)]
pub fn train_discriminator(
    config: &OfflineConfig,
    densities: Option<&DensityArtifacts>,
    train_expert: &[DemoSample],
    train_supp: &[DemoSample],
    held_expert: &[DemoSample],
    held_supp: &[DemoSample],
    metrics: &mut Vec<MetricRecord>,
    mode: Parallelism,
) -> Result<Discriminator> {
    let densities = densities.ok_or(Error::StageOrder {
        stage: "discriminator",
        missing: "reference policies and state mixtures",
    })?;
    if train_expert.is_empty() || train_supp.is_empty() {
        return Err(Error::EmptySplit("discriminator training data"));
    }
    let log_e = joint_log_densities(densities, train_expert, mode)?;
    let log_s = joint_log_densities(densities, train_supp, mode)?;
    let ratios: Vec<f64> = log_s
        .iter()
        .map(|(le, ls)| clamped_ratio(ls - le, config.ratio_min, config.ratio_max))
        .collect();
    let target = |(le, ls): (f64, f64)| logistic(le - ls);
    let targets_e: Vec<f64> = log_e.iter().copied().map(target).collect();
    let targets_s: Vec<f64> = log_s.iter().copied().map(target).collect();

    let first = &train_expert[0];
    let mut init = RngStream::named(config.seed, "disc-init");
    let mut disc = Discriminator::new(first.state.len(), first.action.len(), &config.disc_hidden, &mut init)?;
    let mut trainer = DiscTrainer::new(&disc, config.disc_learning_rate);
    let mut rng = RngStream::named(config.seed, "disc-train");
    let schedule = LambdaSchedule {
        cutoff: config.lambda_cutoff,
    };
    let evals = eval_steps(config);
    let b = config.batch_size;
    let half = (b / 2).max(1);
    let mut ie = vec![0usize; b];
    let mut is = vec![0usize; b];
    for t in 1..=config.disc_steps {
        ie.iter_mut().for_each(|i| *i = rng.index(train_expert.len()));
        is.iter_mut().for_each(|i| *i = rng.index(train_supp.len()));
        let expert: Vec<Pair<'_>> = ie
            .iter()
            .map(|&i| Pair {
                state: &train_expert[i].state,
                action: &train_expert[i].action,
            })
            .collect();
        let supp: Vec<WeightedPair<'_>> = is
            .iter()
            .map(|&i| WeightedPair {
                state: &train_supp[i].state,
                action: &train_supp[i].action,
                weight: ratios[i],
            })
            .collect();
        let mixed: Vec<TargetPair<'_>> = ie[..half]
            .iter()
            .map(|&i| TargetPair {
                state: &train_expert[i].state,
                action: &train_expert[i].action,
                target: targets_e[i],
            })
            .chain(is[..half].iter().map(|&i| TargetPair {
                state: &train_supp[i].state,
                action: &train_supp[i].action,
                target: targets_s[i],
            }))
            .collect();
        let lambda = if config.disable_reg { 0.0 } else { schedule.value(t as u64) };
        let loss = trainer
            .step_offline(&mut disc, &expert, &supp, &mixed, lambda)
            .map_err(abort("disc", t))?;
        metrics.push(MetricRecord {
            lambda: Some(lambda),
            ..MetricRecord::new("disc", t, loss)
        });
        if evals.binary_search(&t).is_ok() {
            let eval = eval_discriminator(&disc, held_expert, held_supp)?;
            metrics.push(MetricRecord::new("disc_eval", t, eval));
        }
    }
    Ok(disc)
}

/// Weighted BC on `samples` with the given weights (unit weights if `None`).
pub fn train_policy(
    config: &OfflineConfig,
    samples: &[DemoSample],
    weights: Option<&[f64]>,
    bounds: &[(f64, f64)],
    metrics: &mut Vec<MetricRecord>,
) -> Result<GaussianPolicy> {
    let first = samples.first().ok_or(Error::EmptySplit("policy training data"))?;
    let bc = BcConfig {
        steps: config.bc_steps,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        hidden: config.policy_hidden.clone(),
    };
    let mut init = RngStream::named(config.seed, "policy-init");
    let mut policy = GaussianPolicy::new(first.state.len(), &bc.hidden, bounds.to_vec(), &mut init)?;
    policy.source = "main".into();
    let mut rng = RngStream::named(config.seed, "policy-train");
    let losses = train_bc(&mut policy, samples, weights, &bc, &mut rng)?;
    metrics.extend(losses.iter().enumerate().map(|(i, l)| MetricRecord::new("bc", i + 1, *l)));
    Ok(policy)
}

/// Weighted BC that refuses to start without a discriminator.
pub fn weighted_bc_stage(
    config: &OfflineConfig,
    disc: Option<&Discriminator>,
    samples: &[DemoSample],
    bounds: &[(f64, f64)],
    metrics: &mut Vec<MetricRecord>,
    mode: Parallelism,
) -> Result<GaussianPolicy> {
    let disc = disc.ok_or(Error::StageOrder {
        stage: "weighted BC",
        missing: "trained discriminator",
    })?;
    let weights = parallel::map(mode, samples, |s| disc.bc_weight(&s.state, &s.action))
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    let mut tiers: Vec<String> = samples.iter().map(|s| s.tier.to_string()).collect();
    tiers.sort();
    tiers.dedup();
    for tier in tiers {
        let (sum, n) = samples
            .iter()
            .zip(&weights)
            .filter(|(s, _)| s.tier.as_str() == tier)
            .fold((0.0, 0usize), |(a, n), (_, w)| (a + w, n + 1));
        metrics.push(MetricRecord {
            tier: Some(tier),
            ..MetricRecord::new("weights", 0, sum / n as f64)
        });
    }
    train_policy(config, samples, Some(&weights), bounds, metrics).map_err(|e| match e {
        Error::NumericAbort { step, .. } => Error::NumericAbort {
            stage: "bc".into(),
            step,
        },
        other => other,
    })
}

/// Runs every offline stage in order.
pub fn run_offline(config: &OfflineConfig, expert: &DemoSet, supp: &DemoSet) -> Result<OfflineArtifacts> {
    run_offline_with(config, expert, supp, Parallelism::current())
}

pub fn run_offline_with(
    config: &OfflineConfig,
    expert: &DemoSet,
    supp: &DemoSet,
    mode: Parallelism,
) -> Result<OfflineArtifacts> {
    config.validate()?;
    for set in [expert, supp] {
        if set.env != config.env_id {
            return Err(Error::Data(format!(
                "demonstrations are for {} but the config names {}",
                set.env, config.env_id
            )));
        }
    }
    let spec = crate::envs::EnvSpec::new(config.env_id);
    let bounds = spec.action_bounds.clone();
    let mut metrics = Vec::new();
    let mut timing = Vec::new();
    let (train_e, held_e) = split_holdout(expert);
    let (train_s, held_s) = split_holdout(supp);
    let union: Vec<DemoSample> = train_e.iter().chain(&train_s).cloned().collect();

    if config.plain_bc {
        let t = Instant::now();
        let policy = train_policy(config, &union, None, &bounds, &mut metrics)?;
        timing.push(StageTiming {
            stage: "bc".into(),
            wall_ms: t.elapsed().as_secs_f64() * 1e3,
        });
        return Ok(OfflineArtifacts {
            config: config.clone(),
            config_hash: config.hash(),
            policy,
            discriminator: None,
            densities: None,
            metrics,
            timing,
        });
    }

    let densities = fit_densities(config, &train_e, &train_s, &bounds, &mut metrics, &mut timing, mode)?;

    let t = Instant::now();
    let disc = train_discriminator(
        config,
        Some(&densities),
        &train_e,
        &train_s,
        &held_e,
        &held_s,
        &mut metrics,
        mode,
    )?;
    timing.push(StageTiming {
        stage: "disc".into(),
        wall_ms: t.elapsed().as_secs_f64() * 1e3,
    });

    let t = Instant::now();
    let policy = weighted_bc_stage(config, Some(&disc), &union, &bounds, &mut metrics, mode)?;
    timing.push(StageTiming {
        stage: "bc".into(),
        wall_ms: t.elapsed().as_secs_f64() * 1e3,
    });

    Ok(OfflineArtifacts {
        config: config.clone(),
        config_hash: config.hash(),
        policy,
        discriminator: Some(disc),
        densities: Some(densities),
        metrics,
        timing,
    })
}

pub fn write_ndjson<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ndjson<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })
}

fn create(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<PathBuf> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write(&mut w)?;
    w.flush()?;
    Ok(path.to_path_buf())
}

/// Writes every artifact into `dir` and returns the written paths.
pub fn write_artifacts(dir: &Path, a: &OfflineArtifacts) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    written.push(create(&dir.join(CONFIG_FILE), |w| Ok(w.write_all(a.config.to_text().as_bytes())?))?);
    written.push(create(&dir.join(POLICY_FILE), |w| a.policy.write_to(w, &a.header("policy")))?);
    if let Some(d) = &a.discriminator {
        written.push(create(&dir.join(DISC_FILE), |w| d.write_to(w, &a.header("disc")))?);
    }
    if let Some(d) = &a.densities {
        written.push(create(&dir.join(REF_EXPERT_FILE), |w| d.ref_expert.write_to(w, &a.header("policy")))?);
        written.push(create(&dir.join(REF_SUPP_FILE), |w| d.ref_supp.write_to(w, &a.header("policy")))?);
        written.push(create(&dir.join(GMM_EXPERT_FILE), |w| d.gmm_expert.write_to(w, &a.header("gmm")))?);
        written.push(create(&dir.join(GMM_SUPP_FILE), |w| d.gmm_supp.write_to(w, &a.header("gmm")))?);
    }
    write_ndjson(&dir.join(METRICS_FILE), &a.metrics)?;
    written.push(dir.join(METRICS_FILE));
    write_ndjson(&dir.join(TIMING_FILE), &a.timing)?;
    written.push(dir.join(TIMING_FILE));
    Ok(written)
}

/// Lists the checkpoints the online phase needs that are absent from `dir`.
pub fn missing_artifacts(dir: &Path) -> Vec<PathBuf> {
    FULL_ARTIFACTS
        .iter()
        .chain(std::iter::once(&CONFIG_FILE))
        .map(|f| dir.join(f))
        .filter(|p| !p.exists())
        .collect()
}

fn read_ckpt<T>(dir: &Path, file: &str, read: impl FnOnce(&mut BufReader<fs::File>) -> Result<(Header, T)>) -> Result<T> {
    let mut r = BufReader::new(open(&dir.join(file))?);
    Ok(read(&mut r)?.1)
}

/// Loads the config and policy of any training run, including plain BC.
pub fn load_policy(dir: &Path) -> Result<(OfflineConfig, GaussianPolicy)> {
    let config = OfflineConfig::parse(&read_text(&dir.join(CONFIG_FILE))?)?;
    Ok((config, read_ckpt(dir, POLICY_FILE, GaussianPolicy::read_from)?))
}

fn read_text(path: &Path) -> Result<String> {
    let mut s = String::new();
    open(path)?.read_to_string(&mut s)?;
    Ok(s)
}

/// Loads a complete artifact directory.
pub fn load_artifacts(dir: &Path) -> Result<OfflineArtifacts> {
    if let Some(p) = missing_artifacts(dir).into_iter().next() {
        return Err(Error::MissingArtifact(p));
    }
    let config = OfflineConfig::parse(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let policy = read_ckpt(dir, POLICY_FILE, GaussianPolicy::read_from)?;
    let disc = read_ckpt(dir, DISC_FILE, Discriminator::read_from)?;
    let densities = DensityArtifacts {
        ref_expert: read_ckpt(dir, REF_EXPERT_FILE, GaussianPolicy::read_from)?,
        ref_supp: read_ckpt(dir, REF_SUPP_FILE, GaussianPolicy::read_from)?,
        gmm_expert: read_ckpt(dir, GMM_EXPERT_FILE, GmmModel::read_from)?,
        gmm_supp: read_ckpt(dir, GMM_SUPP_FILE, GmmModel::read_from)?,
    };
    let metrics = if dir.join(METRICS_FILE).exists() {
        read_ndjson(&dir.join(METRICS_FILE))?
    } else {
        Vec::new()
    };
    Ok(OfflineArtifacts {
        config_hash: config.hash(),
        config,
        policy,
        discriminator: Some(disc),
        densities: Some(densities),
        metrics,
        timing: Vec::new(),
    })
}
