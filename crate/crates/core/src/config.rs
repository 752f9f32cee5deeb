//! Flat `key=value` configuration for the offline phase.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::envs::EnvId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineConfig {
    pub env_id: EnvId,
    pub expert_path: PathBuf,
    pub supp_path: PathBuf,
    pub seed: u64,
    pub ref_steps: usize,
    pub disc_steps: usize,
    pub bc_steps: usize,
    pub lambda_cutoff: u64,
    pub gmm_components: usize,
    pub gmm_alpha: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub learning_rate: f64,
    pub disc_learning_rate: f64,
    pub batch_size: usize,
    pub policy_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    /// Held-out discriminator evaluation interval, in steps.
    pub eval_every: usize,
    pub disable_reg: bool,
    /// Skips densities and the discriminator: unit-weight BC on the same
    /// expert plus supplementary training split.
    pub plain_bc: bool,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            env_id: EnvId::PointMass2d,
            expert_path: PathBuf::from("expert.demo"),
            supp_path: PathBuf::from("supp.demo"),
            seed: 0,
            ref_steps: 5000,
            disc_steps: 20_000,
            bc_steps: 30_000,
            lambda_cutoff: 10_000,
            gmm_components: 8,
            gmm_alpha: 0.05,
            ratio_min: 0.1,
            ratio_max: 10.0,
            learning_rate: 5e-4,
            disc_learning_rate: 5e-4,
            batch_size: 64,
            policy_hidden: vec![64, 64],
            disc_hidden: vec![64, 64],
            eval_every: 1000,
            disable_reg: false,
            plain_bc: false,
        }
    }
}

pub const KEYS: [&str; 20] = [
    "env_id",
    "expert_path",
    "supp_path",
    "seed",
    "ref_steps",
    "disc_steps",
    "bc_steps",
    "lambda_cutoff",
    "gmm_components",
    "gmm_alpha",
    "ratio_min",
    "ratio_max",
    "learning_rate",
    "disc_learning_rate",
    "batch_size",
    "policy_hidden",
    "disc_hidden",
    "eval_every",
    "disable_reg",
    "plain_bc",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl OfflineConfig {
    /// Parses `key=value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "env_id" => self.env_id = value.parse()?,
            "expert_path" => self.expert_path = PathBuf::from(value),
            "supp_path" => self.supp_path = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "ref_steps" => self.ref_steps = parse(key, value)?,
            "disc_steps" => self.disc_steps = parse(key, value)?,
            "bc_steps" => self.bc_steps = parse(key, value)?,
            "lambda_cutoff" => self.lambda_cutoff = parse(key, value)?,
            "gmm_components" => self.gmm_components = parse(key, value)?,
            "gmm_alpha" => self.gmm_alpha = parse(key, value)?,
            "ratio_min" => self.ratio_min = parse(key, value)?,
            "ratio_max" => self.ratio_max = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "disc_learning_rate" => self.disc_learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "policy_hidden" => self.policy_hidden = parse_list(key, value)?,
            "disc_hidden" => self.disc_hidden = parse_list(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "disable_reg" => self.disable_reg = parse(key, value)?,
            "plain_bc" => self.plain_bc = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ref_steps", self.ref_steps),
            ("disc_steps", self.disc_steps),
            ("bc_steps", self.bc_steps),
            ("gmm_components", self.gmm_components),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if !(self.gmm_alpha > 0.0 && self.gmm_alpha < 1.0) {
            return Err(Error::Config("gmm_alpha must lie in (0, 1)".into()));
        }
        if !(self.ratio_min > 0.0 && self.ratio_min <= self.ratio_max) {
            return Err(Error::Config("ratio clamps must satisfy 0 < ratio_min <= ratio_max".into()));
        }
        if !(self.learning_rate > 0.0 && self.disc_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.plain_bc && self.disable_reg {
            return Err(Error::Config("plain_bc skips the discriminator; disable_reg has no meaning with it".into()));
        }
        Ok(())
    }

    pub fn value_of(&self, key: &str) -> Option<String> {
        Some(match key {
            "env_id" => self.env_id.to_string(),
            "expert_path" => self.expert_path.display().to_string(),
            "supp_path" => self.supp_path.display().to_string(),
            "seed" => self.seed.to_string(),
            "ref_steps" => self.ref_steps.to_string(),
            "disc_steps" => self.disc_steps.to_string(),
            "bc_steps" => self.bc_steps.to_string(),
            "lambda_cutoff" => self.lambda_cutoff.to_string(),
            "gmm_components" => self.gmm_components.to_string(),
            "gmm_alpha" => format!("{:?}", self.gmm_alpha),
            "ratio_min" => format!("{:?}", self.ratio_min),
            "ratio_max" => format!("{:?}", self.ratio_max),
            "learning_rate" => format!("{:?}", self.learning_rate),
            "disc_learning_rate" => format!("{:?}", self.disc_learning_rate),
            "batch_size" => self.batch_size.to_string(),
            "policy_hidden" => join(&self.policy_hidden),
            "disc_hidden" => join(&self.disc_hidden),
            "eval_every" => self.eval_every.to_string(),
            "disable_reg" => self.disable_reg.to_string(),
            "plain_bc" => self.plain_bc.to_string(),
            _ => return None,
        })
    }

    /// Canonical text: every key in fixed order, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k}={}", self.value_of(k).expect("known key"));
        }
        out
    }

    /// Hash of the canonical text.
    pub fn hash(&self) -> String {
        hash_text(&self.to_text())
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn hash_text(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
