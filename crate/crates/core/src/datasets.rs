//! Tiered demonstration sets and their on-disk format.
//!
//! File layout: a header line
//! `RAIL demo v1 env_id=.. state_dim=.. action_dim=.. episodes=.. samples=.. tiers=tier:episodes@seed,..`
//! followed by one row per sample: episode (u32), step (u32), state length
//! (u16), action length (u16), then the state and action as little-endian f64.
//! Episodes are numbered contiguously in tier order.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::envs::{rollout, scripted_expert, EnvId, EnvSpec, NoiseWrapper};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Header;
use crate::parallel::{self, Parallelism};
use crate::policy::{train_bc, ActionMode, BcConfig, GaussianPolicy, StateAction};
use crate::rng::RngStream;

/// Action noise standard deviation of the medium tier.
pub const MEDIUM_ACTION_NOISE: f64 = 0.3;
/// Reference-policy budget; the medium_replay_like policy trains for a fifth of it.
pub const REFERENCE_BUDGET: usize = 5000;
const REPLAY_POLICY_EPISODES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tier {
    Expert,
    Medium,
    MediumReplayLike,
    Random,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::Expert, Tier::Medium, Tier::MediumReplayLike, Tier::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Expert => "expert",
            Tier::Medium => "medium",
            Tier::MediumReplayLike => "medium_replay_like",
            Tier::Random => "random",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tier::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown tier `{s}`; valid tiers: expert, medium, medium_replay_like, random"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSample {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub episode: u32,
    pub step: u32,
    pub tier: Tier,
}

impl StateAction for DemoSample {
    fn state(&self) -> &[f64] {
        &self.state
    }
    fn action(&self) -> &[f64] {
        &self.action
    }
}

/// A contiguous run of episodes from one tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TierBlock {
    pub tier: Tier,
    pub episodes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub env: EnvId,
    pub state_dim: usize,
    pub action_dim: usize,
    pub tiers: Vec<TierBlock>,
    pub samples: Vec<DemoSample>,
}

impl DemoSet {
    pub fn episodes(&self) -> usize {
        self.tiers.iter().map(|t| t.episodes).sum()
    }

    pub fn states(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.state.clone()).collect()
    }

    /// Label written into the header, e.g. `expert:25@1,medium:25@2`.
    pub fn mix_label(&self) -> String {
        self.tiers
            .iter()
            .map(|t| format!("{}:{}@{}", t.tier, t.episodes, t.seed))
            .collect::<Vec<_>>()
            .join(",")
    }

    fn tier_of(&self, episode: u32) -> Option<Tier> {
        let mut end = 0usize;
        for block in &self.tiers {
            end += block.episodes;
            if (episode as usize) < end {
                return Some(block.tier);
            }
        }
        None
    }
}

/// Per-episode returns observed while generating a tier.
#[derive(Debug, Clone)]
pub struct GeneratedTier {
    pub set: DemoSet,
    pub returns: Vec<f64>,
}

impl GeneratedTier {
    pub fn mean_return(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }
}

pub fn generate_tier(spec: &EnvSpec, tier: Tier, episodes: usize, seed: u64) -> Result<DemoSet> {
    Ok(generate_tier_with(spec, tier, episodes, seed, Parallelism::current())?.set)
}

/// Rolls `episodes` noise-free episodes of the tier's behavior policy and
/// records the executed actions.
pub fn generate_tier_with(
    spec: &EnvSpec,
    tier: Tier,
    episodes: usize,
    seed: u64,
    mode: Parallelism,
) -> Result<GeneratedTier> {
    if episodes == 0 {
        return Err(Error::Config("a tier needs at least one episode".into()));
    }
    let replay_policy = match tier {
        Tier::MediumReplayLike => Some(undertrained_policy(spec, seed, mode)?),
        _ => None,
    };
    let resets = RngStream::named(seed, &format!("demo-reset-{tier}"));
    let actions = RngStream::named(seed, &format!("demo-action-{tier}"));
    let records = parallel::map_range(mode, episodes, |ep| {
        let mut reset_rng = resets.fork(ep as u64);
        let mut act_rng = actions.fork(ep as u64);
        let mut noise = NoiseWrapper::new(0.0, RngStream::new(seed, 0));
        rollout(spec, &mut reset_rng, &mut noise, |s| match tier {
            Tier::Expert => Ok(scripted_expert(spec, s)),
            Tier::Medium => Ok(scripted_expert(spec, s)
                .into_iter()
                .map(|a| a + MEDIUM_ACTION_NOISE * act_rng.normal())
                .collect()),
            Tier::MediumReplayLike => replay_policy
                .as_ref()
                .expect("policy trained above")
                .sample_action(s, &mut act_rng, ActionMode::Stochastic),
            Tier::Random => Ok(spec.random_action(&mut act_rng)),
        })
    });
    let mut samples = Vec::new();
    let mut returns = Vec::with_capacity(episodes);
    for (ep, rec) in records.into_iter().enumerate() {
        let rec = rec?;
        returns.push(rec.total_return);
        for (step, t) in rec.transitions.into_iter().enumerate() {
            samples.push(DemoSample {
                state: t.true_state,
                action: t.action,
                episode: ep as u32,
                step: step as u32,
                tier,
            });
        }
    }
    Ok(GeneratedTier {
        set: DemoSet {
            env: spec.id,
            state_dim: spec.state_dim,
            action_dim: spec.action_dim,
            tiers: vec![TierBlock { tier, episodes, seed }],
            samples,
        },
        returns,
    })
}

/// BC on a few expert episodes for a fifth of the reference budget.
fn undertrained_policy(spec: &EnvSpec, seed: u64, mode: Parallelism) -> Result<GaussianPolicy> {
    let expert = generate_tier_with(spec, Tier::Expert, REPLAY_POLICY_EPISODES, seed ^ 0x5eed, mode)?.set;
    let config = BcConfig {
        steps: REFERENCE_BUDGET / 5,
        ..BcConfig::default()
    };
    let mut init = RngStream::named(seed, "replay-policy-init");
    let mut policy = GaussianPolicy::new(spec.state_dim, &config.hidden, spec.action_bounds.clone(), &mut init)?;
    let mut rng = RngStream::named(seed, "replay-policy-train");
    train_bc(&mut policy, &expert.samples, None, &config, &mut rng)?;
    Ok(policy)
}

/// Concatenates tiers, keeping the first `ceil(p * episodes)` episodes of each
/// and renumbering episodes contiguously.
pub fn mix_supplementary(sets: &[DemoSet], proportions: &[f64]) -> Result<DemoSet> {
    let first = sets.first().ok_or_else(|| Error::Data("no tiers to mix".into()))?;
    if sets.len() != proportions.len() {
        return Err(Error::Config(format!(
            "{} tiers but {} proportions",
            sets.len(),
            proportions.len()
        )));
    }
    let mut out = DemoSet {
        env: first.env,
        state_dim: first.state_dim,
        action_dim: first.action_dim,
        tiers: Vec::new(),
        samples: Vec::new(),
    };
    for (set, &p) in sets.iter().zip(proportions) {
        if set.env != first.env || set.state_dim != first.state_dim || set.action_dim != first.action_dim {
            return Err(Error::Data(format!("cannot mix {} data into a {} set", set.env, first.env)));
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Config(format!("proportion {p} outside (0, 1]")));
        }
        let mut offset_in = 0usize;
        for block in &set.tiers {
            let keep = ((block.episodes as f64) * p).ceil() as usize;
            let base = out.episodes() as u32;
            out.samples.extend(
                set.samples
                    .iter()
                    .filter(|s| {
                        let e = s.episode as usize;
                        e >= offset_in && e < offset_in + keep
                    })
                    .map(|s| DemoSample {
                        episode: base + (s.episode - offset_in as u32),
                        ..s.clone()
                    }),
            );
            out.tiers.push(TierBlock {
                tier: block.tier,
                episodes: keep,
                seed: block.seed,
            });
            offset_in += block.episodes;
        }
    }
    Ok(out)
}

/// Reserves the last tenth of each tier's episodes (at least one). A tier with
/// a single episode holds out the last tenth of that episode's steps instead.
pub fn split_holdout(set: &DemoSet) -> (Vec<DemoSample>, Vec<DemoSample>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    let mut start = 0u32;
    for block in &set.tiers {
        let end = start + block.episodes as u32;
        let in_block: Vec<&DemoSample> = set
            .samples
            .iter()
            .filter(|s| s.episode >= start && s.episode < end)
            .collect();
        if block.episodes == 1 {
            let keep = in_block.len() - (in_block.len() / 10).max(1).min(in_block.len().saturating_sub(1));
            for (i, s) in in_block.into_iter().enumerate() {
                if i < keep {
                    train.push(s.clone());
                } else {
                    held.push(s.clone());
                }
            }
        } else {
            let held_eps = (block.episodes / 10).max(1) as u32;
            for s in in_block {
                if s.episode >= end - held_eps {
                    held.push(s.clone());
                } else {
                    train.push(s.clone());
                }
            }
        }
        start = end;
    }
    (train, held)
}

pub fn save_demoset(w: &mut impl Write, set: &DemoSet) -> Result<()> {
    let header = Header::new("demo")
        .with("env_id", set.env)
        .with("state_dim", set.state_dim)
        .with("action_dim", set.action_dim)
        .with("episodes", set.episodes())
        .with("samples", set.samples.len())
        .with("tiers", set.mix_label());
    header.write_to(w)?;
    let row = 12 + 8 * (set.state_dim + set.action_dim);
    let mut buf = Vec::with_capacity(row * set.samples.len());
    for s in &set.samples {
        if s.state.len() != set.state_dim || s.action.len() != set.action_dim {
            return Err(Error::Data("sample dimensions disagree with the set".into()));
        }
        buf.extend_from_slice(&s.episode.to_le_bytes());
        buf.extend_from_slice(&s.step.to_le_bytes());
        buf.extend_from_slice(&(s.state.len() as u16).to_le_bytes());
        buf.extend_from_slice(&(s.action.len() as u16).to_le_bytes());
        for v in s.state.iter().chain(&s.action) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn parse_tiers(raw: &str) -> Result<Vec<TierBlock>> {
    raw.split(',')
        .map(|item| {
            let bad = || Error::MalformedHeader(format!("bad tier entry `{item}`"));
            let (tier, rest) = item.split_once(':').ok_or_else(bad)?;
            let (episodes, seed) = rest.split_once('@').ok_or_else(bad)?;
            Ok(TierBlock {
                tier: tier.parse().map_err(|_| bad())?,
                episodes: episodes.parse().map_err(|_| bad())?,
                seed: seed.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn load_demoset(r: &mut impl BufRead) -> Result<DemoSet> {
    let header = Header::read_from(r)?;
    header.expect_kind("demo")?;
    let env: EnvId = header
        .require("env_id")?
        .parse()
        .map_err(|_| Error::MalformedHeader("unknown env_id".into()))?;
    let state_dim: usize = header.parse_field("state_dim")?;
    let action_dim: usize = header.parse_field("action_dim")?;
    let episodes: usize = header.parse_field("episodes")?;
    let count: usize = header.parse_field("samples")?;
    let tiers = parse_tiers(header.require("tiers")?)?;
    if tiers.iter().map(|t| t.episodes).sum::<usize>() != episodes {
        return Err(Error::MalformedHeader("tier episode counts do not sum to `episodes`".into()));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let row = 12 + 8 * (state_dim + action_dim);
    let expected = (row * count) as u64;
    let mut set = DemoSet {
        env,
        state_dim,
        action_dim,
        tiers,
        samples: Vec::with_capacity(count),
    };
    let mut pos = 0usize;
    let truncated = || Error::Truncated {
        missing: expected.saturating_sub(bytes.len() as u64),
    };
    for i in 0..count {
        let prefix = bytes.get(pos..pos + 12).ok_or_else(truncated)?;
        let episode = u32::from_le_bytes(prefix[0..4].try_into().unwrap());
        let step = u32::from_le_bytes(prefix[4..8].try_into().unwrap());
        let sd = u16::from_le_bytes(prefix[8..10].try_into().unwrap()) as usize;
        let ad = u16::from_le_bytes(prefix[10..12].try_into().unwrap()) as usize;
        if sd != state_dim || ad != action_dim {
            return Err(Error::RowDimension {
                row: i,
                expected_state: state_dim,
                expected_action: action_dim,
                state: sd,
                action: ad,
            });
        }
        let body = bytes.get(pos + 12..pos + row).ok_or_else(truncated)?;
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tier = set
            .tier_of(episode)
            .ok_or_else(|| Error::Data(format!("row {i} names episode {episode} beyond the declared {episodes}")))?;
        set.samples.push(DemoSample {
            state: values[..sd].to_vec(),
            action: values[sd..].to_vec(),
            episode,
            step,
            tier,
        });
        pos += row;
    }
    if pos != bytes.len() {
        return Err(Error::Data(format!("{} trailing bytes after {count} samples", bytes.len() - pos)));
    }
    Ok(set)
}

pub fn save_demoset_file(path: &std::path::Path, set: &DemoSet) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_demoset(&mut w, set)?;
    w.flush()?;
    Ok(())
}

pub fn load_demoset_file(path: &std::path::Path) -> Result<DemoSet> {
    let f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })?;
    load_demoset(&mut std::io::BufReader::new(f))
}
