//! Online phase: shift scoring, gated collection of shifted experience and
//! triggered discriminator and policy refreshes.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::DemoSample;
use crate::density::GmmModel;
use crate::discriminator::{DiscTrainer, Discriminator, Pair, WeightedPair};
use crate::envs::{reset, step, EnvSpec, NoiseWrapper};
use crate::error::{Error, Result};
use crate::policy::{ActionMode, BcTrainer, GaussianPolicy, WeightedSample};
use crate::rng::RngStream;

/// `(m_E(s) + m_S(s)) / 2` with calibrated membership scores.
pub fn kappa(state: &[f64], gmm_expert: &GmmModel, gmm_supp: &GmmModel) -> Result<f64> {
    Ok(0.5 * (gmm_expert.membership_score(state)? + gmm_supp.membership_score(state)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMode {
    On,
    Off,
    /// Updates every `N_ds` steps regardless of the shift score.
    Always,
}

impl AdaptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptMode::On => "on",
            AdaptMode::Off => "off",
            AdaptMode::Always => "always",
        }
    }
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(AdaptMode::On),
            "off" => Ok(AdaptMode::Off),
            "always" => Ok(AdaptMode::Always),
            _ => Err(Error::Config(format!("unknown adapt mode `{s}`; valid: on, off, always"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineSample {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineConfig {
    pub kappa_threshold: f64,
    pub consecutive_required: usize,
    pub buffer_capacity: usize,
    pub disc_steps_per_trigger: usize,
    pub policy_steps_per_trigger: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            kappa_threshold: 0.4,
            consecutive_required: 20,
            buffer_capacity: 2000,
            disc_steps_per_trigger: 50,
            policy_steps_per_trigger: 50,
            batch_size: 64,
            learning_rate: 5e-4,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.consecutive_required == 0
            || self.buffer_capacity == 0
            || self.disc_steps_per_trigger == 0
            || self.policy_steps_per_trigger == 0
            || self.batch_size == 0
        {
            return Err(Error::Config("online counts and budgets must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.kappa_threshold) {
            return Err(Error::Config("kappa threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Consecutive-shift counter with a bounded experience buffer.
#[derive(Debug, Clone)]
pub struct ShiftDetector {
    pub kappa_threshold: f64,
    pub consecutive_required: usize,
    pub consecutive_count: usize,
    pub capacity: usize,
    buffer: VecDeque<OnlineSample>,
}

impl ShiftDetector {
    pub fn new(kappa_threshold: f64, consecutive_required: usize, capacity: usize) -> Self {
        Self {
            kappa_threshold,
            consecutive_required,
            consecutive_count: 0,
            capacity,
            buffer: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, sample: OnlineSample) {
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(sample);
    }

    /// Records one step; returns `true` when the shift has persisted for the
    /// required number of consecutive steps.
    pub fn observe_step(&mut self, state: &[f64], action: &[f64], kappa: f64) -> bool {
        if kappa < self.kappa_threshold {
            self.consecutive_count += 1;
            self.push(OnlineSample {
                state: state.to_vec(),
                action: action.to_vec(),
                kappa,
            });
            if self.consecutive_count >= self.consecutive_required {
                self.consecutive_count = 0;
                return true;
            }
        } else {
            self.consecutive_count = 0;
        }
        false
    }

    pub fn reset_count(&mut self) {
        self.consecutive_count = 0;
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn snapshot(&self) -> Vec<OnlineSample> {
        self.buffer.iter().cloned().collect()
    }
}

/// Policy and discriminator being adapted, with persistent optimizer state.
#[derive(Debug, Clone)]
pub struct OnlineLearner {
    pub policy: GaussianPolicy,
    pub disc: Discriminator,
    disc_trainer: DiscTrainer,
    bc_trainer: BcTrainer,
}

impl OnlineLearner {
    pub fn new(policy: GaussianPolicy, disc: Discriminator, config: &OnlineConfig) -> Self {
        let disc_trainer = DiscTrainer::new(&disc, config.learning_rate);
        let bc_trainer = BcTrainer::new(&policy, config.batch_size, config.learning_rate);
        Self {
            policy,
            disc,
            disc_trainer,
            bc_trainer,
        }
    }

    /// Discriminator steps on the online loss, then weighted BC on
    /// `D_E u D_X` with fresh weights. On failure every parameter and
    /// optimizer moment is restored to its pre-trigger value.
    pub fn update(
        &mut self,
        snapshot: &[OnlineSample],
        expert: &[DemoSample],
        config: &OnlineConfig,
        rng: &mut RngStream,
    ) -> Result<()> {
        if snapshot.is_empty() || expert.is_empty() {
            return Err(Error::Data("online update needs expert data and a non-empty snapshot".into()));
        }
        let saved = self.clone();
        let result = self.update_inner(snapshot, expert, config, rng);
        if result.is_err() {
            *self = saved;
        }
        result
    }

    fn update_inner(
        &mut self,
        snapshot: &[OnlineSample],
        expert: &[DemoSample],
        config: &OnlineConfig,
        rng: &mut RngStream,
    ) -> Result<()> {
        let b = config.batch_size;
        for _ in 0..config.disc_steps_per_trigger {
            let e: Vec<Pair<'_>> = (0..b)
                .map(|_| {
                    let s = &expert[rng.index(expert.len())];
                    Pair {
                        state: &s.state,
                        action: &s.action,
                    }
                })
                .collect();
            let x: Vec<WeightedPair<'_>> = (0..b)
                .map(|_| {
                    let s = &snapshot[rng.index(snapshot.len())];
                    WeightedPair {
                        state: &s.state,
                        action: &s.action,
                        weight: s.kappa,
                    }
                })
                .collect();
            self.disc_trainer.step_online(&mut self.disc, &e, &x)?;
        }
        let total = expert.len() + snapshot.len();
        for _ in 0..config.policy_steps_per_trigger {
            let picks: Vec<(&[f64], &[f64])> = (0..b)
                .map(|_| {
                    let i = rng.index(total);
                    if i < expert.len() {
                        (expert[i].state.as_slice(), expert[i].action.as_slice())
                    } else {
                        let s = &snapshot[i - expert.len()];
                        (s.state.as_slice(), s.action.as_slice())
                    }
                })
                .collect();
            let batch = picks
                .into_iter()
                .map(|(state, action)| {
                    Ok(WeightedSample {
                        state,
                        action,
                        weight: self.disc.bc_weight(state, action)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            self.bc_trainer.step(&mut self.policy, &batch)?;
        }
        Ok(())
    }
}

/// One line of the shift-score log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaRecord {
    pub episode: usize,
    pub step: usize,
    pub kappa: f64,
}

/// One line of the trigger log, written at every update decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerRecord {
    pub episode: usize,
    pub step: usize,
    pub kappa: f64,
    pub triggered: bool,
    /// False when the update aborted and parameters were rolled back.
    pub applied: bool,
}

/// Wall time of one update, kept apart from the deterministic logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateTiming {
    pub episode: usize,
    pub step: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReturn {
    pub episode: usize,
    pub total_return: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct OnlineRun {
    pub returns: Vec<EpisodeReturn>,
    pub kappa_log: Vec<KappaRecord>,
    pub trigger_log: Vec<TriggerRecord>,
    pub timing: Vec<UpdateTiming>,
    pub learner: OnlineLearner,
}

impl OnlineRun {
    pub fn update_count(&self) -> usize {
        self.trigger_log.iter().filter(|t| t.triggered).count()
    }

    pub fn update_wall_ms(&self) -> f64 {
        self.timing.iter().map(|t| t.wall_ms).sum()
    }

    pub fn episode_returns(&self) -> Vec<f64> {
        self.returns.iter().map(|r| r.total_return).collect()
    }
}

/// Frozen inputs to an online run.
#[derive(Debug, Clone, Copy)]
pub struct OnlineInputs<'a> {
    pub policy: &'a GaussianPolicy,
    pub disc: &'a Discriminator,
    pub gmm_expert: &'a GmmModel,
    pub gmm_supp: &'a GmmModel,
    pub expert: &'a [DemoSample],
}

/// Start states repeat with this period, so any window of that many
/// consecutive episodes sees the same starts.
pub const RESET_CYCLE: usize = 10;

/// Rolls `episodes` episodes under observation noise `sigma`. The shift
/// counter restarts with each episode; the experience buffer and optimizer
/// state persist for the whole run. Noise and action draws are fresh per
/// episode; start states cycle with period [`RESET_CYCLE`].
pub fn run_online(
    inputs: OnlineInputs<'_>,
    spec: &EnvSpec,
    sigma: f64,
    episodes: usize,
    mode: AdaptMode,
    config: &OnlineConfig,
    seed: u64,
) -> Result<OnlineRun> {
    config.validate()?;
    let mut learner = OnlineLearner::new(inputs.policy.clone(), inputs.disc.clone(), config);
    let mut detector = ShiftDetector::new(config.kappa_threshold, config.consecutive_required, config.buffer_capacity);
    let resets = RngStream::named(seed, "online-reset");
    let noises = RngStream::named(seed, "online-noise");
    let acts = RngStream::named(seed, "online-action");
    let mut update_rng = RngStream::named(seed, "online-update");
    let mut run = OnlineRun {
        returns: Vec::with_capacity(episodes),
        kappa_log: Vec::new(),
        trigger_log: Vec::new(),
        timing: Vec::new(),
        learner: learner.clone(),
    };
    for ep in 0..episodes {
        let mut reset_rng = resets.fork((ep % RESET_CYCLE) as u64);
        let mut noise = NoiseWrapper::new(sigma, noises.fork(ep as u64));
        let mut act_rng = acts.fork(ep as u64);
        let mut state = reset(spec, &mut reset_rng);
        detector.reset_count();
        let mut total = 0.0;
        let mut steps = 0;
        for t in 0..spec.horizon {
            let observed = noise.observe(&state);
            let k = kappa(&observed, inputs.gmm_expert, inputs.gmm_supp)?;
            let action = learner.policy.sample_action(&observed, &mut act_rng, ActionMode::Stochastic)?;
            run.kappa_log.push(KappaRecord {
                episode: ep,
                step: t,
                kappa: k,
            });
            let trigger = match mode {
                AdaptMode::Off => false,
                AdaptMode::On => detector.observe_step(&observed, &action, k),
                AdaptMode::Always => {
                    detector.push(OnlineSample {
                        state: observed.clone(),
                        action: action.clone(),
                        kappa: k,
                    });
                    (t + 1) % config.consecutive_required == 0
                }
            };
            if trigger {
                let started = Instant::now();
                let outcome = learner.update(&detector.snapshot(), inputs.expert, config, &mut update_rng);
                let applied = match outcome {
                    Ok(()) => true,
                    Err(Error::NonFinite { .. }) => {
                        log::warn!("online update at episode {ep} step {t} aborted on a non-finite loss");
                        false
                    }
                    Err(e) => return Err(e),
                };
                run.timing.push(UpdateTiming {
                    episode: ep,
                    step: t,
                    wall_ms: started.elapsed().as_secs_f64() * 1e3,
                });
                run.trigger_log.push(TriggerRecord {
                    episode: ep,
                    step: t,
                    kappa: k,
                    triggered: true,
                    applied,
                });
            }
            let out = step(spec, &state, &action)?;
            total += out.reward;
            steps += 1;
            state = out.next_state;
            if out.done {
                break;
            }
        }
        run.returns.push(EpisodeReturn {
            episode: ep,
            total_return: total,
            steps,
        });
    }
    run.learner = learner;
    Ok(run)
}

/// Replays the gating rule over a shift-score log and counts disagreements
/// with the trigger log: missing triggers, spurious triggers and mismatched
/// shift scores.
pub fn gating_violations(
    kappa_log: &[KappaRecord],
    trigger_log: &[TriggerRecord],
    kappa_threshold: f64,
    consecutive_required: usize,
) -> usize {
    let mut violations = 0;
    let mut count = 0usize;
    let mut episode = usize::MAX;
    let mut triggers = trigger_log.iter().peekable();
    for rec in kappa_log {
        if rec.episode != episode {
            episode = rec.episode;
            count = 0;
        }
        let mut expected = false;
        if rec.kappa < kappa_threshold {
            count += 1;
            if count >= consecutive_required {
                count = 0;
                expected = true;
            }
        } else {
            count = 0;
        }
        let logged = match triggers.peek() {
            Some(t) if t.episode == rec.episode && t.step == rec.step => {
                let t = triggers.next().expect("peeked");
                if t.kappa != rec.kappa {
                    violations += 1;
                }
                t.triggered
            }
            _ => false,
        };
        if logged != expected {
            violations += 1;
        }
    }
    violations + triggers.count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kappa_cases() {
        let g = |mean: f64| GmmModel {
            weights: vec![1.0],
            means: vec![vec![mean]],
            variances: vec![vec![1.0]],
            cov_floor: 1e-4,
            alpha: 0.05,
            log_quantile: -1.0,
            source: String::new(),
        };
        // log N(0;0,1) = -0.919 > -1 so the score clamps to 1.
        assert_eq!(kappa(&[0.0], &g(0.0), &g(0.0)).unwrap(), 1.0);
        let far = kappa(&[20.0], &g(0.0), &g(0.0)).unwrap();
        assert!(far < 0.01);
        // Scores 0.6 and 0.2 average to 0.4.
        let mut a = g(0.0);
        let mut b = g(0.0);
        a.log_quantile = a.log_density(&[0.0]).unwrap() - 0.6f64.ln();
        b.log_quantile = b.log_density(&[0.0]).unwrap() - 0.2f64.ln();
        assert!((kappa(&[0.0], &a, &b).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn detector_boundaries() {
        let mut d = ShiftDetector::new(0.4, 20, 100);
        for _ in 0..19 {
            assert!(!d.observe_step(&[0.0], &[0.0], 0.1));
        }
        assert!(!d.observe_step(&[0.0], &[0.0], 0.9));
        assert_eq!(d.consecutive_count, 0);
        for i in 1..=20 {
            assert_eq!(d.observe_step(&[0.0], &[0.0], 0.1), i == 20);
        }
        assert_eq!(d.consecutive_count, 0);
        let mut d = ShiftDetector::new(0.4, 20, 5);
        for i in 0..1000 {
            assert!(!d.observe_step(&[i as f64], &[0.0], if i % 2 == 0 { 0.1 } else { 0.5 }));
        }
        assert_eq!(d.buffer_len(), 5);
        assert_eq!(d.snapshot()[0].state, vec![990.0]);
    }

    #[test]
    fn replay_flags_bad_logs() {
        let kappas: Vec<KappaRecord> = (0..45)
            .map(|t| KappaRecord {
                episode: 0,
                step: t,
                kappa: if t == 30 { 0.9 } else { 0.1 },
            })
            .collect();
        let good = vec![TriggerRecord {
            episode: 0,
            step: 19,
            kappa: 0.1,
            triggered: true,
            applied: true,
        }];
        assert_eq!(gating_violations(&kappas, &good, 0.4, 20), 0);
        let early = vec![TriggerRecord { step: 18, ..good[0].clone() }];
        assert_eq!(gating_violations(&kappas, &early, 0.4, 20), 2);
        assert_eq!(gating_violations(&kappas, &[], 0.4, 20), 1);
        assert_eq!(gating_violations(&kappas, &[], 0.0, 20), 0);
    }
}
