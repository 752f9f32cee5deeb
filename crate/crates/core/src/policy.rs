//! Diagonal-Gaussian policies and the weighted behavior-cloning objective
//! `E[-w(s,a) log pi(a|s)]`.

use std::io::{BufRead, Write};

use crate::error::{check_len, Error, Result};
use crate::nn::checkpoint::{describe_mlp, expect_eof, read_f64s, read_mlp_payload, write_f64s, Header};
use crate::nn::gaussian::log_prob_unchecked;
use crate::nn::{Activation, Adam, Mlp, Tape};
use crate::rng::RngStream;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Stochastic,
    /// The clamped mean action, used for evaluation.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean_net: Mlp,
    log_std: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
    /// Label of the data the policy was fitted on.
    pub source: String,
}

/// One term of the weighted BC objective.
#[derive(Debug, Clone, Copy)]
pub struct WeightedSample<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
    pub weight: f64,
}

impl GaussianPolicy {
    pub fn new(
        state_dim: usize,
        hidden: &[usize],
        bounds: Vec<(f64, f64)>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut dims = vec![state_dim];
        dims.extend_from_slice(hidden);
        dims.push(bounds.len());
        let mean_net = Mlp::init(&dims, Activation::Tanh, rng)?;
        Self::from_parts(mean_net, vec![0.0; bounds.len()], bounds)
    }

    pub fn from_parts(mean_net: Mlp, log_std: Vec<f64>, bounds: Vec<(f64, f64)>) -> Result<Self> {
        check_len("policy output", bounds.len(), mean_net.output_dim())?;
        check_len("log_std", bounds.len(), log_std.len())?;
        let mut p = Self {
            mean_net,
            log_std,
            bounds,
            source: String::new(),
        };
        p.clamp_log_std();
        Ok(p)
    }

    pub fn state_dim(&self) -> usize {
        self.mean_net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn set_log_std(&mut self, log_std: &[f64]) -> Result<()> {
        check_len("log_std", self.action_dim(), log_std.len())?;
        self.log_std.copy_from_slice(log_std);
        self.clamp_log_std();
        Ok(())
    }

    fn clamp_log_std(&mut self) {
        for l in &mut self.log_std {
            *l = l.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    /// Number of trainable values: network parameters then log-std entries.
    pub fn num_params(&self) -> usize {
        self.mean_net.num_params() + self.log_std.len()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.mean_net.params().to_vec();
        v.extend_from_slice(&self.log_std);
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        check_len("policy parameters", self.num_params(), flat.len())?;
        let n = self.mean_net.num_params();
        self.mean_net.params_mut().copy_from_slice(&flat[..n]);
        self.log_std.copy_from_slice(&flat[n..]);
        self.clamp_log_std();
        Ok(())
    }

    pub fn mean(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.mean_net.forward(state)
    }

    pub fn clamp_action(&self, action: &mut [f64]) {
        for (a, &(lo, hi)) in action.iter_mut().zip(&self.bounds) {
            *a = a.clamp(lo, hi);
        }
    }

    pub fn sample_action(&self, state: &[f64], rng: &mut RngStream, mode: ActionMode) -> Result<Vec<f64>> {
        let mut a = self.mean(state)?;
        if mode == ActionMode::Stochastic {
            for (ai, ls) in a.iter_mut().zip(&self.log_std) {
                *ai += ls.exp() * rng.normal();
            }
        }
        self.clamp_action(&mut a);
        Ok(a)
    }

    /// Unclamped Gaussian log-likelihood of `action` at `state`.
    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        check_len("action", self.action_dim(), action.len())?;
        let mu = self.mean(state)?;
        Ok(log_prob_unchecked(&mu, &self.log_std, action))
    }

    pub fn write_to(&self, w: &mut impl Write, header: &Header) -> Result<()> {
        let mut header = header.clone();
        header.kind = "policy".into();
        header.set("source", if self.source.is_empty() { "-" } else { &self.source });
        describe_mlp(&mut header, &self.mean_net);
        header.write_to(w)?;
        write_f64s(w, self.mean_net.params())?;
        write_f64s(w, &self.log_std)?;
        let flat: Vec<f64> = self.bounds.iter().flat_map(|&(lo, hi)| [lo, hi]).collect();
        write_f64s(w, &flat)
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<(Header, Self)> {
        let header = Header::read_from(r)?;
        header.expect_kind("policy")?;
        let net = read_mlp_payload(&header, r)?;
        let a = net.output_dim();
        let log_std = read_f64s(r, a)?;
        let flat = read_f64s(r, 2 * a)?;
        expect_eof(r)?;
        let bounds = flat.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let mut p = Self::from_parts(net, log_std, bounds)?;
        let source = header.require("source")?;
        p.source = if source == "-" { String::new() } else { source.to_string() };
        Ok((header, p))
    }
}

/// Mean of `-w * log pi(a|s)` over the batch, with gradients laid out as
/// [network parameters, log-std].
pub fn weighted_bc_loss(policy: &GaussianPolicy, batch: &[WeightedSample<'_>]) -> Result<(f64, Vec<f64>)> {
    let mut grads = vec![0.0; policy.num_params()];
    let loss = weighted_bc_loss_into(policy, batch, &mut grads, &mut Tape::default())?;
    Ok((loss, grads))
}

pub(crate) fn weighted_bc_loss_into(
    policy: &GaussianPolicy,
    batch: &[WeightedSample<'_>],
    grads: &mut [f64],
    tape: &mut Tape,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("weighted BC batch is empty".into()));
    }
    check_len("policy gradient buffer", policy.num_params(), grads.len())?;
    grads.iter_mut().for_each(|g| *g = 0.0);
    let n_net = policy.mean_net.num_params();
    let (g_net, g_ls) = grads.split_at_mut(n_net);
    let inv_var: Vec<f64> = policy.log_std.iter().map(|l| (-2.0 * l).exp()).collect();
    let scale = 1.0 / batch.len() as f64;
    let mut upstream = vec![0.0; policy.action_dim()];
    let mut loss = 0.0;
    for sample in batch {
        let w = sample.weight;
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Data(format!("BC weight {w} is not a finite non-negative number")));
        }
        check_len("action", policy.action_dim(), sample.action.len())?;
        let mu = policy.mean_net.forward_tape(sample.state, tape)?;
        let lp = log_prob_unchecked(mu, &policy.log_std, sample.action);
        loss -= w * lp * scale;
        if w == 0.0 {
            continue;
        }
        let c = w * scale;
        for i in 0..upstream.len() {
            let diff = sample.action[i] - mu[i];
            upstream[i] = -c * diff * inv_var[i];
            g_ls[i] += c * (1.0 - diff * diff * inv_var[i]);
        }
        policy.mean_net.backward_tape(tape, &upstream, g_net, None)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            steps: 5_000,
            batch_size: 64,
            learning_rate: 5e-4,
            hidden: vec![64, 64],
        }
    }
}

/// Stateful weighted-BC optimizer bound to one policy.
#[derive(Debug, Clone)]
pub struct BcTrainer {
    adam: Adam,
    grads: Vec<f64>,
    tape: Tape,
    pub batch_size: usize,
}

impl BcTrainer {
    pub fn new(policy: &GaussianPolicy, batch_size: usize, learning_rate: f64) -> Self {
        Self {
            adam: Adam::new(policy.num_params(), learning_rate),
            grads: vec![0.0; policy.num_params()],
            tape: Tape::default(),
            batch_size,
        }
    }

    /// One Adam step on the given batch; returns the pre-update loss.
    pub fn step(&mut self, policy: &mut GaussianPolicy, batch: &[WeightedSample<'_>]) -> Result<f64> {
        let loss = weighted_bc_loss_into(policy, batch, &mut self.grads, &mut self.tape)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "weighted BC loss",
                layer: 0,
            });
        }
        let GaussianPolicy { mean_net, log_std, .. } = policy;
        self.adam.step_parts(&mut [mean_net.params_mut(), log_std.as_mut_slice()], &self.grads)?;
        policy.clamp_log_std();
        Ok(loss)
    }
}

/// A training pair borrowed from a dataset.
pub trait StateAction {
    fn state(&self) -> &[f64];
    fn action(&self) -> &[f64];
}

/// Weighted BC with uniform minibatches drawn with replacement. `weights`
/// defaults to one per sample. Returns the per-step training loss.
pub fn train_bc<S: StateAction>(
    policy: &mut GaussianPolicy,
    data: &[S],
    weights: Option<&[f64]>,
    config: &BcConfig,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Config("behavior cloning on an empty dataset".into()));
    }
    if let Some(w) = weights {
        check_len("BC weights", data.len(), w.len())?;
    }
    let mut trainer = BcTrainer::new(policy, config.batch_size, config.learning_rate);
    let mut losses = Vec::with_capacity(config.steps);
    let mut idx = vec![0usize; config.batch_size];
    for step in 0..config.steps {
        for i in idx.iter_mut() {
            *i = rng.index(data.len());
        }
        let batch: Vec<WeightedSample<'_>> = idx
            .iter()
            .map(|&i| WeightedSample {
                state: data[i].state(),
                action: data[i].action(),
                weight: weights.map_or(1.0, |w| w[i]),
            })
            .collect();
        let loss = trainer.step(policy, &batch).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NumericAbort {
                stage: "bc".into(),
                step,
            },
            other => other,
        })?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Fits a reference policy with unit weights, as used inside the joint
/// density surrogates.
pub fn train_reference_policy<S: StateAction>(
    data: &[S],
    bounds: Vec<(f64, f64)>,
    config: &BcConfig,
    seed: u64,
    source: &str,
) -> Result<(GaussianPolicy, Vec<f64>)> {
    let first = data
        .first()
        .ok_or_else(|| Error::Config("reference policy needs a non-empty dataset".into()))?;
    let mut init_rng = RngStream::named(seed, &format!("ref-init-{source}"));
    let mut policy = GaussianPolicy::new(first.state().len(), &config.hidden, bounds, &mut init_rng)?;
    policy.source = source.to_string();
    let mut rng = RngStream::named(seed, &format!("ref-train-{source}"));
    let losses = train_bc(&mut policy, data, None, config, &mut rng)?;
    Ok((policy, losses))
}

impl StateAction for (Vec<f64>, Vec<f64>) {
    fn state(&self) -> &[f64] {
        &self.0
    }
    fn action(&self) -> &[f64] {
        &self.1
    }
}
