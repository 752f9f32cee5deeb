//! Self-contained oracle suite: gradient checks, EM behaviour, density
//! normalization, the pointwise discriminator optimum and the closed-form
//! schedule and weight values.

use crate::density::gmm::{fit_gmm_with, GmmConfig};
use crate::density::JointDensityModel;
use crate::discriminator::{
    boundary_bias_demo, combined_offline_loss, offline_disc_loss, odds, online_disc_loss, pointwise_optimum,
    reg_loss, BoundaryDemoConfig, Discriminator, LambdaSchedule, Pair, TargetPair, WeightedPair, CLIP_HI, CLIP_LO,
};
use crate::error::Result;
use crate::nn::{finite_difference, max_relative_error};
use crate::parallel::Parallelism;
use crate::policy::{train_reference_policy, weighted_bc_loss, BcConfig, GaussianPolicy, WeightedSample};
use crate::rng::RngStream;

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    fn from_result(name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

/// Random `(state, action, value)` triples with values in `(0.05, 0.95)`.
fn raw_batch(rng: &mut RngStream, n: usize, sdim: usize, adim: usize) -> Vec<(Vec<f64>, Vec<f64>, f64)> {
    (0..n)
        .map(|_| {
            let s = (0..sdim).map(|_| rng.normal()).collect();
            let a = (0..adim).map(|_| 0.5 * rng.normal()).collect();
            (s, a, rng.uniform(0.05, 0.95))
        })
        .collect()
}

fn pairs(raw: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<Pair<'_>> {
    raw.iter().map(|(s, a, _)| Pair { state: s, action: a }).collect()
}

fn weighted(raw: &[(Vec<f64>, Vec<f64>, f64)], scale: f64) -> Vec<WeightedPair<'_>> {
    raw.iter()
        .map(|(s, a, w)| WeightedPair {
            state: s,
            action: a,
            weight: scale * w,
        })
        .collect()
}

fn targets(raw: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<TargetPair<'_>> {
    raw.iter()
        .map(|(s, a, t)| TargetPair {
            state: s,
            action: a,
            target: *t,
        })
        .collect()
}

/// Worst relative error of `loss` over `instances` small discriminators.
pub fn disc_gradient_error(
    instances: usize,
    seed: u64,
    loss: impl Fn(&Discriminator, &[(Vec<f64>, Vec<f64>, f64)], &[(Vec<f64>, Vec<f64>, f64)]) -> Result<(f64, Vec<f64>)>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = RngStream::new(seed, i as u64);
        let mut model = Discriminator::new(2, 1, &[6, 5], &mut rng)?;
        // Zero-initialized biases can leave a unit exactly at the ReLU kink.
        for p in model.net.params_mut() {
            *p += 0.1 * rng.normal();
        }
        let a = raw_batch(&mut rng, 5, 2, 1);
        let b = raw_batch(&mut rng, 5, 2, 1);
        let (_, g) = loss(&model, &a, &b)?;
        let theta = model.net.params().to_vec();
        let mut probe = model.clone();
        let fd = finite_difference(&theta, 1e-5, |x| {
            probe.net.params_mut().copy_from_slice(x);
            loss(&probe, &a, &b).map(|r| r.0).unwrap_or(f64::NAN)
        });
        worst = worst.max(max_relative_error(&g, &fd, 1e-6));
    }
    Ok(worst)
}

pub fn bc_gradient_error(instances: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = RngStream::new(seed, i as u64);
        let policy = GaussianPolicy::new(3, &[6, 5], vec![(-10.0, 10.0); 2], &mut rng)?;
        let raw = raw_batch(&mut rng, 5, 3, 2);
        let batch: Vec<WeightedSample<'_>> = raw
            .iter()
            .map(|(s, a, w)| WeightedSample {
                state: s,
                action: a,
                weight: 3.0 * w,
            })
            .collect();
        let (_, g) = weighted_bc_loss(&policy, &batch)?;
        let mut probe = policy.clone();
        let fd = finite_difference(&policy.flat_params(), 1e-5, |x| {
            probe.set_flat_params(x).ok();
            weighted_bc_loss(&probe, &batch).map(|r| r.0).unwrap_or(f64::NAN)
        });
        worst = worst.max(max_relative_error(&g, &fd, 1e-6));
    }
    Ok(worst)
}

fn gradient_check(name: &'static str, worst: Result<f64>) -> Check {
    Check::from_result(
        name,
        worst.map(|w| (w < GRAD_TOLERANCE, format!("max relative error {w:.2e}"))),
    )
}

/// Finite-difference checks for every loss over `instances` seeded cases.
pub fn gradient_checks(instances: usize) -> Vec<Check> {
    vec![
        gradient_check("grad_weighted_bc", bc_gradient_error(instances, 101)),
        gradient_check(
            "grad_offline_disc",
            disc_gradient_error(instances, 102, |m, a, b| offline_disc_loss(m, &pairs(a), &weighted(b, 4.0))),
        ),
        gradient_check(
            "grad_regularizer",
            disc_gradient_error(instances, 103, |m, _, b| reg_loss(m, &targets(b))),
        ),
        gradient_check(
            "grad_combined",
            disc_gradient_error(instances, 104, |m, a, b| {
                combined_offline_loss(m, &pairs(a), &weighted(b, 4.0), &targets(b), 0.59)
            }),
        ),
        gradient_check(
            "grad_online_disc",
            disc_gradient_error(instances, 105, |m, a, b| online_disc_loss(m, &pairs(a), &weighted(b, 1.0))),
        ),
    ]
}

fn em_monotone() -> Result<(bool, String)> {
    let mut rng = RngStream::new(7, 0);
    let states: Vec<Vec<f64>> = (0..600)
        .map(|i| {
            let c = if i % 3 == 0 { -2.0 } else { 1.5 };
            vec![c + 0.6 * rng.normal(), 0.4 * rng.normal()]
        })
        .collect();
    let cfg = GmmConfig {
        components: 3,
        ..Default::default()
    };
    let fit = fit_gmm_with(&states, &cfg, 3, "verify", Parallelism::Sequential)?;
    let trace = &fit.log_likelihood_trace;
    let drops = trace
        .windows(2)
        .filter(|w| w[1] < w[0] - 1e-9 * w[0].abs().max(1.0))
        .count();
    Ok((
        drops == 0 && trace.len() >= 2,
        format!("{} iterations, {drops} decreases", trace.len()),
    ))
}

/// Trapezoid integral of the joint density of a fitted 1-D/1-D model over a
/// product grid reaching six standard deviations past every component.
pub fn joint_integral(seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed, 0);
    let data: Vec<(Vec<f64>, Vec<f64>)> = (0..400)
        .map(|_| {
            let s = 0.5 * rng.normal();
            (vec![s], vec![0.8 * s + 0.2 * rng.normal()])
        })
        .collect();
    let states: Vec<Vec<f64>> = data.iter().map(|d| d.0.clone()).collect();
    let cfg = GmmConfig {
        components: 2,
        ..Default::default()
    };
    let gmm = fit_gmm_with(&states, &cfg, seed, "toy", Parallelism::Sequential)?.model;
    let bc = BcConfig {
        steps: 400,
        batch_size: 32,
        learning_rate: 5e-3,
        hidden: vec![8],
    };
    let (policy, _) = train_reference_policy(&data, vec![(-50.0, 50.0)], &bc, seed, "toy")?;
    let sigma_a = policy.log_std()[0].exp();
    let joint = JointDensityModel::new(policy, gmm.clone())?;
    let s_sd = gmm.variances.iter().map(|v| v[0].sqrt()).fold(0.0, f64::max);
    let s_lo = gmm.means.iter().map(|m| m[0]).fold(f64::INFINITY, f64::min) - 6.0 * s_sd;
    let s_hi = gmm.means.iter().map(|m| m[0]).fold(f64::NEG_INFINITY, f64::max) + 6.0 * s_sd;
    let n = 241;
    let tw = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
    let hs = (s_hi - s_lo) / (n - 1) as f64;
    let mut total = 0.0;
    for i in 0..n {
        let s = s_lo + i as f64 * hs;
        let mu = joint.policy().mean(&[s])?[0];
        let (a_lo, a_hi) = (mu - 6.0 * sigma_a, mu + 6.0 * sigma_a);
        let ha = (a_hi - a_lo) / (n - 1) as f64;
        let mut inner = 0.0;
        for j in 0..n {
            let a = a_lo + j as f64 * ha;
            inner += tw(j) * joint.log_density(&[s], &[a])?.exp();
        }
        total += tw(i) * inner * ha;
    }
    Ok(total * hs)
}

fn optimum_checks() -> Vec<Check> {
    let closed = pointwise_optimum(1.0, 1.0, 0.1, 0.9, 0.0, 1.0);
    let limit = pointwise_optimum(1.0, 1.0, 0.1, 0.9, 1e8, 1.0);
    vec![
        Check::from_result(
            "optimum_lambda_zero",
            closed.map(|d| ((d - 0.1).abs() < 1e-9, format!("beta=9 optimum {d:.12} (closed form 0.1)"))),
        ),
        Check::from_result(
            "optimum_lambda_large",
            limit.map(|d| ((d - 0.5).abs() < 1e-4, format!("lambda=1e8 optimum {d:.6} (posterior 0.5)"))),
        ),
    ]
}

fn boundary_demo() -> Result<(bool, String)> {
    let r = boundary_bias_demo(&BoundaryDemoConfig::default(), 7)?;
    let passed = (r.crossing_unregularized - r.oracle_unregularized).abs() < 0.15
        && (r.crossing_regularized - r.oracle_regularized).abs() < 0.15
        && r.crossing_regularized.abs() < r.crossing_unregularized.abs();
    Ok((
        passed,
        format!(
            "crossing {:.3} (oracle {:.3}) unregularized, {:.3} (oracle {:.3}) regularized, equal density at {:.1}",
            r.crossing_unregularized,
            r.oracle_unregularized,
            r.crossing_regularized,
            r.oracle_regularized,
            r.equal_density_point
        ),
    ))
}

fn lambda_schedule() -> Check {
    let s = LambdaSchedule::default();
    let v = s.value(10_001);
    let passed = s.value(1) == 1.0 && s.value(10_000) == 1.0 && (v - 0.5907).abs() < 1e-4;
    Check::new("lambda_schedule", passed, format!("lambda(10001) = {v:.5}"))
}

fn omega_bounds() -> Check {
    let cases = [(0.5, 1.0), (CLIP_HI, 99.0), (CLIP_LO, 1.0 / 99.0)];
    let worst = cases.iter().map(|&(d, w)| (odds(d) - w).abs() / w).fold(0.0, f64::max);
    Check::new(
        "omega_bounds",
        worst < 1e-12,
        format!("omega(0.5)={}, omega(0.99)={:.6}, omega(0.01)={:.6}", odds(0.5), odds(CLIP_HI), odds(CLIP_LO)),
    )
}

/// Every check, in a fixed order.
pub fn run_all() -> Vec<Check> {
    let mut out = gradient_checks(5);
    out.push(Check::from_result("em_monotone", em_monotone()));
    out.push(Check::from_result(
        "joint_normalization",
        joint_integral(11).map(|z| ((z - 1.0).abs() < 2e-2, format!("integral {z:.5}"))),
    ));
    out.extend(optimum_checks());
    out.push(Check::from_result("boundary_demo", boundary_demo()));
    out.push(lambda_schedule());
    out.push(omega_bounds());
    out
}
