//! Standard data recipes and per-seed protocol helpers shared by the CLI and
//! the trend checks.

use crate::config::OfflineConfig;
use crate::datasets::{generate_tier_with, mix_supplementary, DemoSet, Tier};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_policy, mean, normalized_score, ScoreNormalizer};
use crate::offline::{run_offline_with, OfflineArtifacts};
use crate::online::{run_online, AdaptMode, OnlineConfig, OnlineInputs, OnlineRun};
use crate::parallel::Parallelism;

pub const EXPERT_EPISODES: usize = 10;

/// Episodes generated per tier for the supplementary pool. The medium tier
/// is split: its first third joins the expert tier to form `me`.
pub const POOL_EPISODES: [(Tier, usize); 4] = [
    (Tier::Expert, 25),
    (Tier::Medium, 75),
    (Tier::MediumReplayLike, 50),
    (Tier::Random, 50),
];

const SUPP_SALT: u64 = 0x5u64 << 40;

/// Seed used for supplementary generation, kept apart from the expert seed.
pub fn supplementary_seed(seed: u64) -> u64 {
    seed ^ SUPP_SALT
}

/// Per-tier proportions of the pool for a named mix (`me`, `me+m`,
/// `me+m+mr`, `me+m+mr+r`). A zero proportion drops the tier.
pub fn mix_proportions(name: &str) -> Result<[f64; 4]> {
    match name {
        "me" => Ok([1.0, 1.0 / 3.0, 0.0, 0.0]),
        "me+m" => Ok([1.0, 1.0, 0.0, 0.0]),
        "me+m+mr" => Ok([1.0, 1.0, 1.0, 0.0]),
        "me+m+mr+r" => Ok([1.0, 1.0, 1.0, 1.0]),
        _ => Err(Error::Config(format!(
            "unknown mix `{name}`; valid: me, me+m, me+m+mr, me+m+mr+r"
        ))),
    }
}

pub fn expert_demos(spec: &EnvSpec, seed: u64, mode: Parallelism) -> Result<DemoSet> {
    Ok(generate_tier_with(spec, Tier::Expert, EXPERT_EPISODES, seed, mode)?.set)
}

pub fn supplementary_mix(spec: &EnvSpec, name: &str, seed: u64, mode: Parallelism) -> Result<DemoSet> {
    let props = mix_proportions(name)?;
    let s = supplementary_seed(seed);
    let mut sets = Vec::new();
    let mut kept = Vec::new();
    for ((tier, episodes), p) in POOL_EPISODES.iter().zip(props) {
        if p > 0.0 {
            sets.push(generate_tier_with(spec, *tier, *episodes, s, mode)?.set);
            kept.push(p);
        }
    }
    mix_supplementary(&sets, &kept)
}

/// Expert data plus a named supplementary mix, both derived from `seed`.
pub fn standard_data(spec: &EnvSpec, mix: &str, seed: u64, mode: Parallelism) -> Result<(DemoSet, DemoSet)> {
    Ok((expert_demos(spec, seed, mode)?, supplementary_mix(spec, mix, seed, mode)?))
}

/// Trains with `base` at `seed` on the standard data for `mix`.
pub fn train_seed(base: &OfflineConfig, mix: &str, seed: u64, mode: Parallelism) -> Result<(OfflineArtifacts, DemoSet)> {
    let spec = EnvSpec::new(base.env_id);
    let (expert, supp) = standard_data(&spec, mix, seed, mode)?;
    let config = OfflineConfig {
        seed,
        ..base.clone()
    };
    Ok((run_offline_with(&config, &expert, &supp, mode)?, expert))
}

/// Mean normalized score of deterministic rollouts.
pub fn offline_score(
    artifacts: &OfflineArtifacts,
    spec: &EnvSpec,
    sigma: f64,
    episodes: usize,
    eval_seed: u64,
    normalizer: &ScoreNormalizer,
    mode: Parallelism,
) -> Result<f64> {
    let r = evaluate_policy(&artifacts.policy, spec, sigma, episodes, eval_seed, mode)?;
    Ok(normalized_score(mean(&r), normalizer))
}

pub fn online_inputs<'a>(artifacts: &'a OfflineArtifacts, expert: &'a DemoSet) -> Result<OnlineInputs<'a>> {
    let disc = artifacts
        .discriminator
        .as_ref()
        .ok_or(Error::StageOrder {
            stage: "online",
            missing: "discriminator",
        })?;
    let d = artifacts.densities.as_ref().ok_or(Error::StageOrder {
        stage: "online",
        missing: "state density models",
    })?;
    Ok(OnlineInputs {
        policy: &artifacts.policy,
        disc,
        gmm_expert: &d.gmm_expert,
        gmm_supp: &d.gmm_supp,
        expert: &expert.samples,
    })
}

/// Online run on trained artifacts.
pub fn online_seed(
    artifacts: &OfflineArtifacts,
    expert: &DemoSet,
    sigma: f64,
    episodes: usize,
    adapt: AdaptMode,
    config: &OnlineConfig,
    seed: u64,
) -> Result<OnlineRun> {
    let spec = EnvSpec::new(artifacts.config.env_id);
    run_online(online_inputs(artifacts, expert)?, &spec, sigma, episodes, adapt, config, seed)
}

/// Mean of the last `window` returns minus the mean of the first `window`.
pub fn adaptation_gain(returns: &[f64], window: usize) -> Result<f64> {
    if window == 0 || returns.len() < 2 * window {
        return Err(Error::Data(format!(
            "{} returns cannot form two windows of {window}",
            returns.len()
        )));
    }
    Ok(mean(&returns[returns.len() - window..]) - mean(&returns[..window]))
}
