//! Scoring, noise sweeps, the shift-threshold grid and report formats.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::envs::{rollout, EnvSpec, NoiseWrapper, ReferenceReturns};
use crate::error::{Error, Result};
use crate::parallel::{self, Parallelism};
use crate::policy::{ActionMode, GaussianPolicy};
use crate::rng::RngStream;

pub const SIGMAS: [f64; 4] = [0.0, 0.05, 0.1, 0.2];
pub const DEFAULT_EMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreNormalizer {
    pub expert_return: f64,
    pub random_return: f64,
}

impl ScoreNormalizer {
    pub fn new(expert_return: f64, random_return: f64) -> Result<Self> {
        if !(expert_return > random_return) {
            return Err(Error::Config(format!(
                "expert return {expert_return} must exceed random return {random_return}"
            )));
        }
        Ok(Self {
            expert_return,
            random_return,
        })
    }

    pub fn from_reference(r: &ReferenceReturns) -> Result<Self> {
        Self::new(r.expert_return, r.random_return)
    }
}

/// `100 (R - R_random) / (R_expert - R_random)`.
pub fn normalized_score(r: f64, n: &ScoreNormalizer) -> f64 {
    100.0 * (r - n.random_return) / (n.expert_return - n.random_return)
}

/// Mean absolute deviation between returns and their EMA, with
/// `ema_0 = r_0` and `ema_t = (1 - c) ema_{t-1} + c r_t`.
pub fn stability_metric(returns: &[f64], coefficient: f64) -> Result<f64> {
    if returns.len() < 2 {
        return Err(Error::Data("stability needs at least two returns".into()));
    }
    if !(coefficient > 0.0 && coefficient <= 1.0) {
        return Err(Error::Config("EMA coefficient must lie in (0, 1]".into()));
    }
    let mut ema = returns[0];
    let mut total = 0.0;
    for &r in returns {
        ema = (1.0 - coefficient) * ema + coefficient * r;
        total += (r - ema).abs();
    }
    Ok(total / returns.len() as f64)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (zero for fewer than two values).
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Deterministic-action returns under observation noise. Episode `i` of seed
/// `s` always sees the same start state and noise draws, so methods evaluated
/// with the same seed are paired.
pub fn evaluate_policy(
    policy: &GaussianPolicy,
    spec: &EnvSpec,
    sigma: f64,
    episodes: usize,
    seed: u64,
    mode: Parallelism,
) -> Result<Vec<f64>> {
    let resets = RngStream::named(seed, "eval-reset");
    let noises = RngStream::named(seed, "eval-noise");
    parallel::map_range(mode, episodes, |ep| {
        let mut r = resets.fork(ep as u64);
        let mut noise = NoiseWrapper::new(sigma, noises.fork(ep as u64));
        let mut unused = RngStream::new(seed, 0);
        rollout(spec, &mut r, &mut noise, |obs| {
            policy.sample_action(obs, &mut unused, ActionMode::Deterministic)
        })
        .map(|rec| rec.total_return)
    })
    .into_iter()
    .collect()
}

/// One `(sigma, method)` cell: per-seed mean normalized scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: String,
    pub sigma: f64,
    pub seeds: Vec<u64>,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl SweepCell {
    pub fn new(method: &str, sigma: f64, seeds: Vec<u64>, scores: Vec<f64>) -> Self {
        Self {
            method: method.to_string(),
            sigma,
            mean: mean(&scores),
            std: sample_std(&scores),
            seeds,
            scores,
        }
    }
}

/// Evaluates `returns(sigma, seed)` for every cell and normalizes the mean
/// episode return of each run.
pub fn noise_sweep(
    method: &str,
    sigmas: &[f64],
    seeds: &[u64],
    normalizer: &ScoreNormalizer,
    mode: Parallelism,
    returns: impl Fn(f64, u64) -> Result<Vec<f64>> + Sync + Send,
) -> Result<Vec<SweepCell>> {
    let jobs: Vec<(f64, u64)> = sigmas.iter().flat_map(|&s| seeds.iter().map(move |&seed| (s, seed))).collect();
    let scores = parallel::map(mode, &jobs, |&(sigma, seed)| {
        returns(sigma, seed).map(|r| normalized_score(mean(&r), normalizer))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    Ok(sigmas
        .iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let chunk = scores[i * seeds.len()..(i + 1) * seeds.len()].to_vec();
            SweepCell::new(method, sigma, seeds.to_vec(), chunk)
        })
        .collect())
}

/// Eleven thresholds `0.0, 0.1, ..., 1.0`.
pub fn kth_candidates() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub kappa_threshold: f64,
    pub seeds: Vec<u64>,
    pub scores: Vec<f64>,
    pub updates: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

/// Runs `score(threshold, seed) -> (normalized score, update count)` over the
/// candidate grid and returns the rows plus the best threshold.
pub fn grid_search_kth(
    seeds: &[u64],
    mode: Parallelism,
    score: impl Fn(f64, u64) -> Result<(f64, usize)> + Sync + Send,
) -> Result<(Vec<GridRow>, f64)> {
    let candidates = kth_candidates();
    let jobs: Vec<(f64, u64)> = candidates
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results = parallel::map(mode, &jobs, |&(k, s)| score(k, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<GridRow> = candidates
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let cell = &results[i * seeds.len()..(i + 1) * seeds.len()];
            let scores: Vec<f64> = cell.iter().map(|c| c.0).collect();
            GridRow {
                kappa_threshold: k,
                seeds: seeds.to_vec(),
                updates: cell.iter().map(|c| c.1).collect(),
                mean: mean(&scores),
                std: sample_std(&scores),
                scores,
            }
        })
        .collect();
    let best = rows
        .iter()
        .fold((f64::NEG_INFINITY, 0.0), |acc, r| if r.mean > acc.0 { (r.mean, r.kappa_threshold) } else { acc })
        .1;
    Ok((rows, best))
}

/// Named supplementary mixes ordered by coverage.
pub const TIER_MIXES: [&str; 4] = ["me", "me+m", "me+m+mr", "me+m+mr+r"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mix: String,
    pub cells: Vec<SweepCell>,
}

/// Sweeps each mix (already trained per seed inside `sweep`) and keeps the
/// coverage order.
pub fn tier_ablation(
    mixes: &[&str],
    sweep: impl Fn(&str) -> Result<Vec<SweepCell>>,
) -> Result<Vec<AblationRow>> {
    mixes
        .iter()
        .map(|m| {
            Ok(AblationRow {
                mix: m.to_string(),
                cells: sweep(m)?,
            })
        })
        .collect()
}

/// Plain-text table: one row per cell, `mean +- std (n)`.
pub fn summary_table(cells: &[SweepCell]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:>6} {:>10} {:>8} {:>4}", "method", "sigma", "mean", "std", "n");
    for c in cells {
        let _ = writeln!(
            out,
            "{:<24} {:>6.2} {:>10.2} {:>8.2} {:>4}",
            c.method,
            c.sigma,
            c.mean,
            c.std,
            c.scores.len()
        );
    }
    out
}

/// `curve,x,y,err` rows for external plotting.
pub fn plot_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("curve,x,y,err\n");
    for c in cells {
        let _ = writeln!(out, "{},{:?},{:?},{:?}", c.method, c.sigma, c.mean, c.std);
    }
    out
}
