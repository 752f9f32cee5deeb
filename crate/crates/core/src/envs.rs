//! Toy continuous-control tasks, scripted experts and observation noise.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{check_len, Error, Result};
use crate::parallel::{self, Parallelism};
use crate::rng::RngStream;

pub const HORIZON: usize = 200;
pub const DT: f64 = 0.1;
pub const POINTMASS_GOAL: [f64; 2] = [0.8, 0.8];
pub const GOAL_RADIUS: f64 = 0.05;
const DAMPING: f64 = 0.95;
const GRAVITY: f64 = 10.0;
const LENGTH: f64 = 1.0;
const MASS: f64 = 1.0;
const MAX_SPEED: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvId {
    PointMass2d,
    Pendulum1,
}

impl EnvId {
    pub const ALL: [EnvId; 2] = [EnvId::PointMass2d, EnvId::Pendulum1];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::PointMass2d => "pointmass2d",
            EnvId::Pendulum1 => "pendulum1",
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvId::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown env `{s}`; valid envs: pointmass2d, pendulum1")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub id: EnvId,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub dt: f64,
    pub action_bounds: Vec<(f64, f64)>,
}

impl EnvSpec {
    pub fn new(id: EnvId) -> Self {
        match id {
            EnvId::PointMass2d => Self {
                id,
                state_dim: 4,
                action_dim: 2,
                horizon: HORIZON,
                dt: DT,
                action_bounds: vec![(-1.0, 1.0); 2],
            },
            EnvId::Pendulum1 => Self {
                id,
                state_dim: 3,
                action_dim: 1,
                horizon: HORIZON,
                dt: DT,
                action_bounds: vec![(-2.0, 2.0)],
            },
        }
    }

    pub fn clamp_action(&self, action: &mut [f64]) {
        for (a, (lo, hi)) in action.iter_mut().zip(&self.action_bounds) {
            *a = a.clamp(*lo, *hi);
        }
    }

    pub fn random_action(&self, rng: &mut RngStream) -> Vec<f64> {
        self.action_bounds.iter().map(|(lo, hi)| rng.uniform(*lo, *hi)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub fn reset(spec: &EnvSpec, rng: &mut RngStream) -> Vec<f64> {
    match spec.id {
        EnvId::PointMass2d => vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), 0.0, 0.0],
        EnvId::Pendulum1 => {
            let theta = rng.uniform(-PI, PI);
            let omega = rng.uniform(-1.0, 1.0);
            vec![theta.cos(), theta.sin(), omega]
        }
    }
}

/// Angle measured from the hanging position; upright is `pi`.
fn pendulum_angle(state: &[f64]) -> f64 {
    state[1].atan2(state[0])
}

fn wrap_angle(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y == -PI {
        PI
    } else {
        y
    }
}

pub fn angle_from_upright(state: &[f64]) -> f64 {
    wrap_angle(pendulum_angle(state) - PI)
}

/// Advances one step. Actions outside the bounds are clamped; `done` reports
/// goal termination only, the episode runner enforces the horizon.
pub fn step(spec: &EnvSpec, state: &[f64], action: &[f64]) -> Result<StepOutcome> {
    check_len("env state", spec.state_dim, state.len())?;
    check_len("env action", spec.action_dim, action.len())?;
    if state.iter().chain(action).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "env state or action",
            layer: 0,
        });
    }
    let mut a = action.to_vec();
    spec.clamp_action(&mut a);
    let out = match spec.id {
        EnvId::PointMass2d => {
            let vx = DAMPING * state[2] + a[0] * spec.dt;
            let vy = DAMPING * state[3] + a[1] * spec.dt;
            let x = state[0] + vx * spec.dt;
            let y = state[1] + vy * spec.dt;
            let dist = ((x - POINTMASS_GOAL[0]).powi(2) + (y - POINTMASS_GOAL[1]).powi(2)).sqrt();
            StepOutcome {
                next_state: vec![x, y, vx, vy],
                reward: -dist,
                done: dist < GOAL_RADIUS,
            }
        }
        EnvId::Pendulum1 => {
            let theta = pendulum_angle(state);
            let torque = a[0];
            let accel = -(GRAVITY / LENGTH) * theta.sin() + torque / (MASS * LENGTH * LENGTH);
            let omega = (state[2] + accel * spec.dt).clamp(-MAX_SPEED, MAX_SPEED);
            let theta = theta + omega * spec.dt;
            let phi = wrap_angle(theta - PI);
            StepOutcome {
                next_state: vec![theta.cos(), theta.sin(), omega],
                reward: -(phi * phi + 0.1 * omega * omega + 0.001 * torque * torque),
                done: false,
            }
        }
    };
    if out.next_state.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "env next state",
            layer: 0,
        });
    }
    Ok(out)
}

/// Deterministic reference controller.
pub fn scripted_expert(spec: &EnvSpec, state: &[f64]) -> Vec<f64> {
    let mut a = match spec.id {
        EnvId::PointMass2d => vec![
            2.0 * (POINTMASS_GOAL[0] - state[0]) - state[2],
            2.0 * (POINTMASS_GOAL[1] - state[1]) - state[3],
        ],
        EnvId::Pendulum1 => {
            let phi = angle_from_upright(state);
            let omega = state[2];
            if phi.abs() < 0.6 && omega.abs() < 3.0 {
                vec![-20.0 * phi - 5.0 * omega]
            } else {
                // Pump energy toward the upright level.
                let energy = 0.5 * omega * omega - GRAVITY * pendulum_angle(state).cos();
                vec![(GRAVITY - energy) * omega]
            }
        }
    };
    spec.clamp_action(&mut a);
    a
}

/// Additive Gaussian observation noise; `sigma = 0` is the identity.
#[derive(Debug, Clone)]
pub struct NoiseWrapper {
    pub sigma: f64,
    rng: RngStream,
}

impl NoiseWrapper {
    pub fn new(sigma: f64, rng: RngStream) -> Self {
        Self { sigma, rng }
    }

    pub fn observe(&mut self, state: &[f64]) -> Vec<f64> {
        if self.sigma == 0.0 {
            return state.to_vec();
        }
        state.iter().map(|s| s + self.sigma * self.rng.normal()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub true_state: Vec<f64>,
    pub observed_state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub transitions: Vec<Transition>,
    pub total_return: f64,
    pub terminated_early: bool,
}

/// Runs one episode. `act` maps an observation to an action; the executed
/// (clamped) action is recorded.
pub fn rollout(
    spec: &EnvSpec,
    reset_rng: &mut RngStream,
    noise: &mut NoiseWrapper,
    mut act: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<EpisodeRecord> {
    let mut state = reset(spec, reset_rng);
    let mut transitions = Vec::with_capacity(spec.horizon);
    let mut total_return = 0.0;
    let mut terminated_early = false;
    for _ in 0..spec.horizon {
        let observed = noise.observe(&state);
        let mut action = act(&observed)?;
        spec.clamp_action(&mut action);
        let out = step(spec, &state, &action)?;
        total_return += out.reward;
        transitions.push(Transition {
            true_state: std::mem::replace(&mut state, out.next_state),
            observed_state: observed,
            action,
            reward: out.reward,
        });
        if out.done {
            terminated_early = true;
            break;
        }
    }
    Ok(EpisodeRecord {
        transitions,
        total_return,
        terminated_early,
    })
}

/// Expert and random anchors for score normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceReturns {
    pub env: EnvId,
    pub expert_return: f64,
    pub random_return: f64,
    pub episodes: usize,
    pub seed: u64,
}

/// Mean noise-free returns of the scripted expert and of uniform actions.
pub fn reference_returns(spec: &EnvSpec, episodes: usize, seed: u64, mode: Parallelism) -> Result<ReferenceReturns> {
    if episodes == 0 {
        return Err(Error::Config("reference returns need at least one episode".into()));
    }
    let resets = RngStream::named(seed, "reference-reset");
    let actions = RngStream::named(seed, "reference-random");
    let run = |ep: usize, random: bool| -> Result<f64> {
        let mut r = resets.fork(ep as u64);
        let mut a = actions.fork(ep as u64);
        let mut noise = NoiseWrapper::new(0.0, RngStream::new(seed, 0));
        let rec = rollout(spec, &mut r, &mut noise, |s| {
            Ok(if random {
                spec.random_action(&mut a)
            } else {
                scripted_expert(spec, s)
            })
        })?;
        Ok(rec.total_return)
    };
    let expert = parallel::map_range(mode, episodes, |ep| run(ep, false)).into_iter().collect::<Result<Vec<_>>>()?;
    let random = parallel::map_range(mode, episodes, |ep| run(ep, true)).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ReferenceReturns {
        env: spec.id,
        expert_return: expert.iter().sum::<f64>() / episodes as f64,
        random_return: random.iter().sum::<f64>() / episodes as f64,
        episodes,
        seed,
    })
}

/// One line per env: `env_id=.. expert_return=.. random_return=.. episodes=.. seed=..`.
/// Returns are written with round-trip precision.
pub fn write_reference_returns(w: &mut impl Write, refs: &[ReferenceReturns]) -> Result<()> {
    for r in refs {
        writeln!(
            w,
            "env_id={} expert_return={:?} random_return={:?} episodes={} seed={}",
            r.env, r.expert_return, r.random_return, r.episodes, r.seed
        )?;
    }
    Ok(())
}

pub fn read_reference_returns(r: &mut impl BufRead) -> Result<Vec<ReferenceReturns>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let field = |key: &str| -> Result<&str> {
            line.split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|rest| rest.strip_prefix('=')))
                .ok_or_else(|| Error::MalformedHeader(format!("reference returns line lacks `{key}`: {line}")))
        };
        let num = |key: &str| -> Result<f64> {
            field(key)?
                .parse()
                .map_err(|_| Error::MalformedHeader(format!("bad `{key}` in reference returns")))
        };
        out.push(ReferenceReturns {
            env: field("env_id")?.parse()?,
            expert_return: num("expert_return")?,
            random_return: num("random_return")?,
            episodes: num("episodes")? as usize,
            seed: num("seed")? as u64,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm() -> EnvSpec {
        EnvSpec::new(EnvId::PointMass2d)
    }

    #[test]
    fn reset_is_deterministic_and_uniform() {
        let mut a = RngStream::new(4, 0);
        let mut b = RngStream::new(4, 0);
        assert_eq!(reset(&pm(), &mut a), reset(&pm(), &mut b));
        let mut rng = RngStream::new(5, 0);
        let (mut mx, mut my) = (0.0, 0.0);
        for _ in 0..1000 {
            let s = reset(&pm(), &mut rng);
            assert!(s[0].abs() <= 1.0 && s[1].abs() <= 1.0 && s[2] == 0.0 && s[3] == 0.0);
            mx += s[0] / 1000.0;
            my += s[1] / 1000.0;
        }
        assert!(mx.abs() < 0.1 && my.abs() < 0.1);
        let s = reset(&EnvSpec::new(EnvId::Pendulum1), &mut rng);
        assert!((s[0] * s[0] + s[1] * s[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pointmass_step_cases() {
        let out = step(&pm(), &[0.8, 0.8, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(out.done && out.reward >= -0.05);
        let out = step(&pm(), &[-0.3, 0.4, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(&out.next_state[..2], &[-0.3, 0.4]);
        assert!(!out.done);
        // Out-of-bound actions are clamped.
        let a = step(&pm(), &[0.0; 4], &[5.0, -5.0]).unwrap();
        let b = step(&pm(), &[0.0; 4], &[1.0, -1.0]).unwrap();
        assert_eq!(a, b);
        assert!(step(&pm(), &[f64::NAN, 0.0, 0.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn pendulum_upright_equilibrium() {
        let spec = EnvSpec::new(EnvId::Pendulum1);
        let up = [PI.cos(), PI.sin(), 0.0];
        let out = step(&spec, &up, &[0.0]).unwrap();
        assert!(angle_from_upright(&out.next_state).abs() < 1e-6);
        assert!(out.next_state[2].abs() < 1e-6);
    }

    #[test]
    fn pointmass_expert_reaches_goal() {
        let spec = pm();
        assert!(scripted_expert(&spec, &[0.8, 0.8, 0.0, 0.0]).iter().all(|a| a.abs() < 1e-6));
        let resets = RngStream::new(9, 1);
        let mut reached = 0;
        for ep in 0..500 {
            let mut r = resets.fork(ep);
            let mut noise = NoiseWrapper::new(0.0, RngStream::new(0, 0));
            let rec = rollout(&spec, &mut r, &mut noise, |s| Ok(scripted_expert(&spec, s))).unwrap();
            reached += rec.terminated_early as usize;
            let sum: f64 = rec.transitions.iter().map(|t| t.reward).sum();
            assert_eq!(sum, rec.total_return);
            assert!(rec.total_return >= -(spec.horizon as f64) * 8f64.sqrt());
        }
        assert!(reached >= 495, "{reached}");
    }

    #[test]
    fn pendulum_expert_return() {
        let spec = EnvSpec::new(EnvId::Pendulum1);
        let refs = reference_returns(&spec, 100, 3, Parallelism::Sequential).unwrap();
        assert!(refs.expert_return > -200.0, "{}", refs.expert_return);
        assert!(refs.expert_return > refs.random_return);
    }

    #[test]
    fn noise_wrapper_cases() {
        let s = [0.1, -0.2, 0.3, 0.0];
        assert_eq!(NoiseWrapper::new(0.0, RngStream::new(1, 1)).observe(&s), s.to_vec());
        let mut w = NoiseWrapper::new(0.1, RngStream::new(1, 1));
        let n = 10_000;
        let mut sums = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let o = w.observe(&s);
            for i in 0..4 {
                sums[i] += o[i];
                sq[i] += o[i] * o[i];
            }
        }
        for i in 0..4 {
            let mean = sums[i] / n as f64;
            let sd = ((sq[i] - n as f64 * mean * mean) / (n - 1) as f64).sqrt();
            assert!((0.095..=0.105).contains(&sd), "{sd}");
        }
        let mut w = NoiseWrapper::new(0.2, RngStream::new(2, 2));
        assert_ne!(w.observe(&s), w.observe(&s));
    }

    #[test]
    fn noise_leaves_true_trajectory_alone() {
        let spec = pm();
        let actions: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64 * 0.3).sin(), (i as f64 * 0.2).cos()]).collect();
        let run = |sigma: f64| {
            let mut r = RngStream::new(7, 7);
            let mut noise = NoiseWrapper::new(sigma, RngStream::new(8, 8));
            let mut k = 0;
            rollout(&spec, &mut r, &mut noise, |_| {
                k += 1;
                Ok(actions[(k - 1) % actions.len()].clone())
            })
            .unwrap()
            .transitions
            .into_iter()
            .map(|t| t.true_state)
            .collect::<Vec<_>>()
        };
        assert_eq!(run(0.0), run(0.2));
    }

    #[test]
    fn reference_file_round_trip() {
        let refs = vec![reference_returns(&pm(), 20, 1, Parallelism::Sequential).unwrap()];
        let mut buf = Vec::new();
        write_reference_returns(&mut buf, &refs).unwrap();
        assert_eq!(read_reference_returns(&mut buf.as_slice()).unwrap(), refs);
    }

    #[test]
    fn env_names() {
        assert_eq!("pendulum1".parse::<EnvId>().unwrap(), EnvId::Pendulum1);
        let err = "hopper".parse::<EnvId>().unwrap_err().to_string();
        assert!(err.contains("pointmass2d") && err.contains("pendulum1"));
    }
}
