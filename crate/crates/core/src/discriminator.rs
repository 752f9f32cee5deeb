//! Expert-vs-supplementary discriminator.
//!
//! Offline objective:
//!
//! ```text
//! L_off   = E_E[-log d] + E_S[-(p_S/p_E) log(1 - d)]
//! L_reg   = E_mix[(d - p_E/(p_E + p_S))^2]
//! L_final = L_off + lambda(t) * L_reg
//! ```
//!
//! Online objective: `E_E[-log d] + E_X[-kappa(s) log(1 - d)]`.
//!
//! `d` is the logistic of the network output clipped to `[0.01, 0.99]`; the
//! clip has zero gradient where it is active. Density ratios, posterior
//! targets and kappa values are constants with respect to the network.

use std::io::{BufRead, Write};

use crate::error::{check_len, Error, Result};
use crate::nn::checkpoint::{describe_mlp, expect_eof, read_f64s, read_mlp_payload, write_f64s, Header};
use crate::nn::{Activation, Adam, Mlp, Tape};
use crate::rng::RngStream;

pub const CLIP_LO: f64 = 0.01;
pub const CLIP_HI: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub net: Mlp,
    pub clip_lo: f64,
    pub clip_hi: f64,
    state_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Pair<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
}

/// A negative-class pair with its loss weight (density ratio offline, kappa
/// online).
#[derive(Debug, Clone, Copy)]
pub struct WeightedPair<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
    pub weight: f64,
}

/// A pair with its posterior target `p_E / (p_E + p_S)`.
#[derive(Debug, Clone, Copy)]
pub struct TargetPair<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
    pub target: f64,
}

#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Posterior target computed in log space: `logistic(log p_E - log p_S)`.
pub fn reg_target(log_p_expert: f64, log_p_supp: f64) -> f64 {
    logistic(log_p_expert - log_p_supp)
}

/// Odds of a clipped discriminator output: `d / (1 - d)`.
pub fn odds(d: f64) -> f64 {
    d / (1.0 - d)
}

impl Discriminator {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut RngStream) -> Result<Self> {
        let mut dims = vec![state_dim + action_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Ok(Self {
            net: Mlp::init(&dims, Activation::Relu, rng)?,
            clip_lo: CLIP_LO,
            clip_hi: CLIP_HI,
            state_dim,
        })
    }

    pub fn from_net(net: Mlp, state_dim: usize) -> Result<Self> {
        check_len("discriminator output", 1, net.output_dim())?;
        if state_dim > net.input_dim() {
            return Err(Error::Config("state_dim exceeds discriminator input".into()));
        }
        Ok(Self {
            net,
            clip_lo: CLIP_LO,
            clip_hi: CLIP_HI,
            state_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.net.input_dim() - self.state_dim
    }

    fn fill_input(&self, state: &[f64], action: &[f64], buf: &mut Vec<f64>) -> Result<()> {
        check_len("discriminator state", self.state_dim, state.len())?;
        check_len("discriminator action", self.action_dim(), action.len())?;
        buf.clear();
        buf.extend_from_slice(state);
        buf.extend_from_slice(action);
        Ok(())
    }

    /// Logit before squashing.
    pub fn logit(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let mut x = Vec::with_capacity(self.net.input_dim());
        self.fill_input(state, action, &mut x)?;
        Ok(self.net.forward(&x)?[0])
    }

    /// Clipped output `d(s,a)` in `[clip_lo, clip_hi]`.
    pub fn forward(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.clip(logistic(self.logit(state, action)?)))
    }

    pub fn clip(&self, d: f64) -> f64 {
        d.clamp(self.clip_lo, self.clip_hi)
    }

    /// BC weight `d / (1 - d)` from the clipped output.
    pub fn bc_weight(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(odds(self.forward(state, action)?))
    }

    pub fn write_to(&self, w: &mut impl Write, header: &Header) -> Result<()> {
        let mut header = header.clone();
        header.kind = "disc".into();
        header.set("state_dim", self.state_dim);
        describe_mlp(&mut header, &self.net);
        header.write_to(w)?;
        write_f64s(w, self.net.params())?;
        write_f64s(w, &[self.clip_lo, self.clip_hi])
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<(Header, Self)> {
        let header = Header::read_from(r)?;
        header.expect_kind("disc")?;
        let net = read_mlp_payload(&header, r)?;
        let clips = read_f64s(r, 2)?;
        expect_eof(r)?;
        let mut d = Self::from_net(net, header.parse_field("state_dim")?)?;
        d.clip_lo = clips[0];
        d.clip_hi = clips[1];
        Ok((header, d))
    }
}

/// `lambda(t) = 1` for `t <= cutoff`, else `1 / (1 + ln(t - cutoff + 1))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSchedule {
    pub cutoff: u64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self { cutoff: 10_000 }
    }
}

impl LambdaSchedule {
    pub fn value(&self, t: u64) -> f64 {
        if t <= self.cutoff {
            1.0
        } else {
            1.0 / (1.0 + ((t - self.cutoff + 1) as f64).ln())
        }
    }
}

/// Reusable buffers for loss evaluation.
#[derive(Debug, Clone, Default)]
pub struct LossScratch {
    tape: Tape,
    input: Vec<f64>,
}

/// Adds `scale * sum_i term(d_i)` and its gradient for each pair, where `term`
/// returns `(value, d value / d d)`.
fn accumulate<'a>(
    model: &Discriminator,
    pairs: impl Iterator<Item = (&'a [f64], &'a [f64], f64)>,
    scale: f64,
    grads: &mut [f64],
    scratch: &mut LossScratch,
    term: impl Fn(f64, f64) -> (f64, f64),
) -> Result<f64> {
    let mut total = 0.0;
    for (s, a, aux) in pairs {
        model.fill_input(s, a, &mut scratch.input)?;
        let z = model.net.forward_tape(&scratch.input, &mut scratch.tape)?[0];
        let raw = logistic(z);
        let d = model.clip(raw);
        let (value, dvalue_dd) = term(d, aux);
        total += scale * value;
        let dd_dz = if raw > model.clip_lo && raw < model.clip_hi {
            raw * (1.0 - raw)
        } else {
            0.0
        };
        let up = scale * dvalue_dd * dd_dz;
        if up != 0.0 {
            model.net.backward_tape(&mut scratch.tape, &[up], grads, None)?;
        }
    }
    Ok(total)
}

fn positive_term(d: f64, _: f64) -> (f64, f64) {
    (-d.ln(), -1.0 / d)
}

fn negative_term(d: f64, w: f64) -> (f64, f64) {
    (-w * (1.0 - d).ln(), w / (1.0 - d))
}

fn squared_term(d: f64, target: f64) -> (f64, f64) {
    let e = d - target;
    (e * e, 2.0 * e)
}

fn bce_into(
    model: &Discriminator,
    expert: &[Pair<'_>],
    negatives: &[WeightedPair<'_>],
    grads: &mut [f64],
    scratch: &mut LossScratch,
) -> Result<f64> {
    if expert.is_empty() || negatives.is_empty() {
        return Err(Error::Data("discriminator loss needs non-empty batches".into()));
    }
    if let Some(p) = negatives.iter().find(|p| !p.weight.is_finite() || p.weight < 0.0) {
        return Err(Error::Data(format!("negative-class weight {} is invalid", p.weight)));
    }
    let pos = accumulate(
        model,
        expert.iter().map(|p| (p.state, p.action, 0.0)),
        1.0 / expert.len() as f64,
        grads,
        scratch,
        positive_term,
    )?;
    let neg = accumulate(
        model,
        negatives.iter().map(|p| (p.state, p.action, p.weight)),
        1.0 / negatives.len() as f64,
        grads,
        scratch,
        negative_term,
    )?;
    Ok(pos + neg)
}

fn reg_into(
    model: &Discriminator,
    mixed: &[TargetPair<'_>],
    scale: f64,
    grads: &mut [f64],
    scratch: &mut LossScratch,
) -> Result<f64> {
    if mixed.is_empty() {
        return Err(Error::Data("regularizer batch is empty".into()));
    }
    accumulate(
        model,
        mixed.iter().map(|p| (p.state, p.action, p.target)),
        scale / mixed.len() as f64,
        grads,
        scratch,
        squared_term,
    )
}

/// Importance-weighted offline loss; each supplementary pair carries its
/// density ratio `p_S/p_E`.
pub fn offline_disc_loss(
    model: &Discriminator,
    expert: &[Pair<'_>],
    supplementary: &[WeightedPair<'_>],
) -> Result<(f64, Vec<f64>)> {
    let mut grads = vec![0.0; model.net.num_params()];
    let loss = bce_into(model, expert, supplementary, &mut grads, &mut LossScratch::default())?;
    Ok((loss, grads))
}

/// Offline loss with the ratio supplied by a function of `(s, a)`.
pub fn offline_disc_loss_with(
    model: &Discriminator,
    expert: &[Pair<'_>],
    supplementary: &[Pair<'_>],
    ratio: impl Fn(&[f64], &[f64]) -> Result<f64>,
) -> Result<(f64, Vec<f64>)> {
    let weighted = supplementary
        .iter()
        .map(|p| {
            Ok(WeightedPair {
                state: p.state,
                action: p.action,
                weight: ratio(p.state, p.action)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    offline_disc_loss(model, expert, &weighted)
}

/// Mean squared deviation of `d` from the posterior targets.
pub fn reg_loss(model: &Discriminator, mixed: &[TargetPair<'_>]) -> Result<(f64, Vec<f64>)> {
    let mut grads = vec![0.0; model.net.num_params()];
    let loss = reg_into(model, mixed, 1.0, &mut grads, &mut LossScratch::default())?;
    Ok((loss, grads))
}

/// `L_off + lambda * L_reg`; `lambda == 0` skips the regularizer entirely.
pub fn combined_offline_loss(
    model: &Discriminator,
    expert: &[Pair<'_>],
    supplementary: &[WeightedPair<'_>],
    mixed: &[TargetPair<'_>],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut grads = vec![0.0; model.net.num_params()];
    let loss = combined_into(model, expert, supplementary, mixed, lambda, &mut grads, &mut LossScratch::default())?;
    Ok((loss, grads))
}

fn combined_into(
    model: &Discriminator,
    expert: &[Pair<'_>],
    supplementary: &[WeightedPair<'_>],
    mixed: &[TargetPair<'_>],
    lambda: f64,
    grads: &mut [f64],
    scratch: &mut LossScratch,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut loss = bce_into(model, expert, supplementary, grads, scratch)?;
    if lambda > 0.0 {
        loss += reg_into(model, mixed, lambda, grads, scratch)?;
    }
    Ok(loss)
}

/// Online loss; each online pair carries its kappa value in [0, 1].
pub fn online_disc_loss(
    model: &Discriminator,
    expert: &[Pair<'_>],
    online: &[WeightedPair<'_>],
) -> Result<(f64, Vec<f64>)> {
    if let Some(p) = online.iter().find(|p| !(0.0..=1.0).contains(&p.weight)) {
        return Err(Error::Data(format!("kappa {} outside [0, 1]", p.weight)));
    }
    offline_disc_loss(model, expert, online)
}

/// Adam-driven discriminator updates with persistent buffers.
#[derive(Debug, Clone)]
pub struct DiscTrainer {
    adam: Adam,
    grads: Vec<f64>,
    scratch: LossScratch,
}

impl DiscTrainer {
    pub fn new(model: &Discriminator, learning_rate: f64) -> Self {
        Self {
            adam: Adam::new(model.net.num_params(), learning_rate),
            grads: vec![0.0; model.net.num_params()],
            scratch: LossScratch::default(),
        }
    }

    fn apply(&mut self, model: &mut Discriminator, loss: f64) -> Result<f64> {
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "discriminator loss",
                layer: 0,
            });
        }
        self.adam.step(model.net.params_mut(), &self.grads)?;
        Ok(loss)
    }

    /// One step on `L_off + lambda * L_reg`; returns the pre-update loss.
    pub fn step_offline(
        &mut self,
        model: &mut Discriminator,
        expert: &[Pair<'_>],
        supplementary: &[WeightedPair<'_>],
        mixed: &[TargetPair<'_>],
        lambda: f64,
    ) -> Result<f64> {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
        let loss = combined_into(model, expert, supplementary, mixed, lambda, &mut self.grads, &mut self.scratch)?;
        self.apply(model, loss)
    }

    pub fn step_online(
        &mut self,
        model: &mut Discriminator,
        expert: &[Pair<'_>],
        online: &[WeightedPair<'_>],
    ) -> Result<f64> {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
        let loss = bce_into(model, expert, online, &mut self.grads, &mut self.scratch)?;
        self.apply(model, loss)
    }

    /// One step on a pooled, label-mixed batch (class priors follow the batch
    /// composition) plus `lambda` times the posterior regularizer on the same
    /// batch. Used by the imbalance demonstration.
    pub fn step_pooled(
        &mut self,
        model: &mut Discriminator,
        pooled: &[(Pair<'_>, bool, f64)],
        lambda: f64,
    ) -> Result<f64> {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / pooled.len() as f64;
        let mut loss = accumulate(
            model,
            pooled.iter().map(|(p, is_expert, _)| (p.state, p.action, if *is_expert { 1.0 } else { 0.0 })),
            scale,
            &mut self.grads,
            &mut self.scratch,
            |d, y| {
                if y > 0.5 {
                    positive_term(d, 0.0)
                } else {
                    negative_term(d, 1.0)
                }
            },
        )?;
        if lambda > 0.0 {
            loss += accumulate(
                model,
                pooled.iter().map(|(p, _, target)| (p.state, p.action, *target)),
                lambda * scale,
                &mut self.grads,
                &mut self.scratch,
                squared_term,
            )?;
        }
        self.apply(model, loss)
    }
}

/// Pointwise optimum of the regularized objective: the root in (0,1) of
/// `-aE pE / d + aS pS / (1 - d) + 2 lambda gamma (d - eta)` with
/// `eta = pE / (pE + pS)`, found by bisection to full double precision.
pub fn pointwise_optimum(p_e: f64, p_s: f64, alpha_e: f64, alpha_s: f64, lambda: f64, gamma: f64) -> Result<f64> {
    if !(p_e > 0.0 && p_s > 0.0 && alpha_e > 0.0 && alpha_s > 0.0 && lambda >= 0.0 && gamma >= 0.0) {
        return Err(Error::Config("pointwise optimum needs positive densities and weights".into()));
    }
    let eta = p_e / (p_e + p_s);
    let f = |d: f64| -alpha_e * p_e / d + alpha_s * p_s / (1.0 - d) + 2.0 * lambda * gamma * (d - eta);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    // f -> -inf at 0+ and +inf at 1-, and f is strictly increasing.
    let probe_lo = f64::MIN_POSITIVE.max(1e-300);
    if f(probe_lo) >= 0.0 || f(1.0 - f64::EPSILON / 2.0) <= 0.0 {
        return Err(Error::NoBracket);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Closed-form unregularized optimum `pE / (pE + beta pS)`.
pub fn biased_optimum(p_e: f64, p_s: f64, beta: f64) -> f64 {
    p_e / (p_e + beta * p_s)
}

/// Settings for the 1-D imbalance demonstration.
#[derive(Debug, Clone)]
pub struct BoundaryDemoConfig {
    pub expert_samples: usize,
    pub supp_samples: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
}

impl Default for BoundaryDemoConfig {
    fn default() -> Self {
        Self {
            expert_samples: 400,
            supp_samples: 3600,
            steps: 6000,
            batch_size: 128,
            learning_rate: 3e-3,
            hidden: vec![16, 16],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundaryReport {
    /// Learned `d = 0.5` crossing without the regularizer.
    pub crossing_unregularized: f64,
    /// Learned crossing with `lambda = 1`.
    pub crossing_regularized: f64,
    /// Crossings predicted by the pointwise optimum.
    pub oracle_unregularized: f64,
    pub oracle_regularized: f64,
    pub equal_density_point: f64,
}

/// Expert class `N(+1, 1)`, supplementary class `N(-1, 1)`, sampled at the
/// configured imbalance. Trains the discriminator on pooled batches with and
/// without the posterior regularizer (exact posterior targets) and reports
/// where each crosses `d = 0.5`.
pub fn boundary_bias_demo(config: &BoundaryDemoConfig, seed: u64) -> Result<BoundaryReport> {
    let mut data_rng = RngStream::named(seed, "boundary-data");
    let mut pool: Vec<(f64, bool)> = Vec::with_capacity(config.expert_samples + config.supp_samples);
    for _ in 0..config.expert_samples {
        pool.push((1.0 + data_rng.normal(), true));
    }
    for _ in 0..config.supp_samples {
        pool.push((-1.0 + data_rng.normal(), false));
    }
    let states: Vec<[f64; 1]> = pool.iter().map(|(x, _)| [*x]).collect();
    // Exact posterior for unit-variance classes at +-1.
    let targets: Vec<f64> = pool.iter().map(|(x, _)| logistic(2.0 * x)).collect();

    let train = |lambda: f64| -> Result<f64> {
        let mut init = RngStream::named(seed, "boundary-init");
        let mut model = Discriminator::new(1, 0, &config.hidden, &mut init)?;
        let mut trainer = DiscTrainer::new(&model, config.learning_rate);
        let mut rng = RngStream::named(seed, "boundary-train");
        for _ in 0..config.steps {
            let batch: Vec<(Pair<'_>, bool, f64)> = (0..config.batch_size)
                .map(|_| {
                    let i = rng.index(pool.len());
                    (
                        Pair {
                            state: &states[i],
                            action: &[],
                        },
                        pool[i].1,
                        targets[i],
                    )
                })
                .collect();
            trainer.step_pooled(&mut model, &batch, lambda)?;
        }
        let d = |x: f64| model.forward(&[x], &[]);
        find_crossing(-3.0, 3.0, |x| Ok(d(x)? - 0.5))
    };

    let alpha_e = config.expert_samples as f64 / pool.len() as f64;
    let alpha_s = 1.0 - alpha_e;
    let oracle = |lambda: f64| -> Result<f64> {
        find_crossing(-3.0, 3.0, |x| {
            let pe = crate::nn::gaussian::normal_pdf(x - 1.0);
            let ps = crate::nn::gaussian::normal_pdf(x + 1.0);
            let gamma = alpha_e * pe + alpha_s * ps;
            Ok(pointwise_optimum(pe, ps, alpha_e, alpha_s, lambda, gamma)? - 0.5)
        })
    };

    Ok(BoundaryReport {
        crossing_unregularized: train(0.0)?,
        crossing_regularized: train(1.0)?,
        oracle_unregularized: oracle(0.0)?,
        oracle_regularized: oracle(1.0)?,
        equal_density_point: 0.0,
    })
}

/// First sign change of `f` on a grid of step 1e-3, refined linearly.
fn find_crossing(lo: f64, hi: f64, f: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    let steps = ((hi - lo) / 1e-3).round() as usize;
    let mut prev_x = lo;
    let mut prev = f(lo)?;
    for i in 1..=steps {
        let x = lo + i as f64 * 1e-3;
        let v = f(x)?;
        if prev < 0.0 && v >= 0.0 {
            return Ok(prev_x + (x - prev_x) * (-prev) / (v - prev));
        }
        prev_x = x;
        prev = v;
    }
    Err(Error::Data("no d = 0.5 crossing on the scan interval".into()))
}
