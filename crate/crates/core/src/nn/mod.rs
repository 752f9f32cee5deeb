//! Differentiable substrate: dense networks, Adam, Gaussian likelihoods and
//! the checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod gaussian;
pub mod mlp;

pub use adam::Adam;
pub use gaussian::gaussian_log_prob;
pub use mlp::{Activation, Gradients, Mlp, Tape};

/// Central finite-difference gradient of `f` at `x` (step `h`).
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let fp = f(&probe);
            probe[i] = orig - h;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between two gradient vectors. Entries where both
/// sides are below `floor` in magnitude compare absolutely against `floor`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
