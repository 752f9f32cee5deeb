//! Diagonal-covariance Gaussian mixtures fitted by EM, plus the quantile
//! calibration that turns mixture densities into membership scores in [0, 1].

use std::io::{BufRead, Write};

use crate::error::{check_len, Error, Result};
use crate::nn::checkpoint::{expect_eof, read_f64s, read_u64, write_f64s, Header};
use crate::parallel::{self, Parallelism};
use crate::rng::RngStream;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const EM_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmConfig {
    pub components: usize,
    pub cov_floor: f64,
    pub max_iter: usize,
    /// Convergence tolerance on the mean per-sample log-likelihood.
    pub tol: f64,
    /// Calibration quantile level.
    pub alpha: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: 8,
            cov_floor: 1e-4,
            max_iter: 200,
            tol: 1e-6,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Diagonal covariances.
    pub variances: Vec<Vec<f64>>,
    pub cov_floor: f64,
    pub alpha: f64,
    /// The alpha-quantile of training-set log-densities.
    pub log_quantile: f64,
    /// Label of the demonstration set the model was fitted on.
    pub source: String,
}

/// A fitted model with its EM log-likelihood trace (total, one entry per
/// E-step).
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    pub log_likelihood_trace: Vec<f64>,
    pub floor_repairs: usize,
}

struct Partial {
    ll: f64,
    nk: Vec<f64>,
    sx: Vec<f64>,
    sxx: Vec<f64>,
}

impl GmmModel {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    fn component_consts(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.variances)
            .map(|(&w, var)| w.ln() - 0.5 * var.iter().map(|v| LN_2PI + v.ln()).sum::<f64>())
            .collect()
    }

    fn component_log_terms(&self, consts: &[f64], s: &[f64], out: &mut [f64]) {
        for (k, slot) in out.iter_mut().enumerate() {
            let mut q = 0.0;
            for ((x, m), v) in s.iter().zip(&self.means[k]).zip(&self.variances[k]) {
                let d = x - m;
                q += d * d / v;
            }
            *slot = consts[k] - 0.5 * q;
        }
    }

    /// Log of the mixture density at `s`.
    pub fn log_density(&self, s: &[f64]) -> Result<f64> {
        check_len("gmm state", self.dim(), s.len())?;
        let consts = self.component_consts();
        let mut terms = vec![0.0; self.components()];
        self.component_log_terms(&consts, s, &mut terms);
        Ok(log_sum_exp(&terms))
    }

    /// Log-densities for many states, sharing the per-component constants.
    pub fn log_density_batch(&self, states: &[Vec<f64>], mode: Parallelism) -> Result<Vec<f64>> {
        if let Some(bad) = states.iter().find(|s| s.len() != self.dim()) {
            return Err(Error::shape("gmm state", self.dim(), bad.len()));
        }
        let consts = self.component_consts();
        let chunks = parallel::map_chunks(mode, states, EM_CHUNK, |chunk| {
            let mut terms = vec![0.0; self.components()];
            chunk
                .iter()
                .map(|s| {
                    self.component_log_terms(&consts, s, &mut terms);
                    log_sum_exp(&terms)
                })
                .collect::<Vec<_>>()
        });
        Ok(chunks.into_iter().flatten().collect())
    }

    /// `min(1, exp(log_density(s) - log_quantile))`.
    pub fn membership_score(&self, s: &[f64]) -> Result<f64> {
        Ok(calibrated_score(self.log_density(s)?, self.log_quantile))
    }

    pub fn write_to(&self, w: &mut impl Write, header: &Header) -> Result<()> {
        let mut header = header.clone();
        header.kind = "gmm".into();
        header.set("dim", self.dim());
        header.set("source", &self.source);
        header.write_to(w)?;
        w.write_all(&(self.components() as u64).to_le_bytes())?;
        write_f64s(w, &[self.alpha, self.log_quantile, self.cov_floor])?;
        for k in 0..self.components() {
            write_f64s(w, &[self.weights[k]])?;
            write_f64s(w, &self.means[k])?;
            write_f64s(w, &self.variances[k])?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<(Header, Self)> {
        let header = Header::read_from(r)?;
        header.expect_kind("gmm")?;
        let dim: usize = header.parse_field("dim")?;
        let source = header.require("source")?.to_string();
        let k = read_u64(r)? as usize;
        let head = read_f64s(r, 3)?;
        let mut model = GmmModel {
            weights: Vec::with_capacity(k),
            means: Vec::with_capacity(k),
            variances: Vec::with_capacity(k),
            alpha: head[0],
            log_quantile: head[1],
            cov_floor: head[2],
            source,
        };
        for _ in 0..k {
            model.weights.push(read_f64s(r, 1)?[0]);
            model.means.push(read_f64s(r, dim)?);
            model.variances.push(read_f64s(r, dim)?);
        }
        expect_eof(r)?;
        Ok((header, model))
    }
}

/// Maps a log-density into [0, 1] against the calibration quantile.
pub fn calibrated_score(log_density: f64, log_quantile: f64) -> f64 {
    (log_density - log_quantile).min(0.0).exp()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn distinct_count(states: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = states
        .iter()
        .map(|s| s.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Farthest-point seeding: a random first center, then repeatedly the state
/// farthest from every chosen center.
fn farthest_point_centers(states: &[Vec<f64>], k: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut centers = vec![states[rng.index(states.len())].clone()];
    let mut nearest: Vec<f64> = states.iter().map(|s| sq_dist(s, &centers[0])).collect();
    while centers.len() < k {
        let (idx, _) = nearest
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        let c = states[idx].clone();
        for (n, s) in nearest.iter_mut().zip(states) {
            *n = n.min(sq_dist(s, &c));
        }
        centers.push(c);
    }
    centers
}

pub fn fit_gmm(states: &[Vec<f64>], config: &GmmConfig, seed: u64, source: &str) -> Result<GmmFit> {
    fit_gmm_with(states, config, seed, source, Parallelism::current())
}

pub fn fit_gmm_with(
    states: &[Vec<f64>],
    config: &GmmConfig,
    seed: u64,
    source: &str,
    mode: Parallelism,
) -> Result<GmmFit> {
    let k = config.components;
    if k == 0 {
        return Err(Error::Config("gmm needs at least one component".into()));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::Config(format!("calibration alpha {} outside (0,1)", config.alpha)));
    }
    if config.cov_floor <= 0.0 {
        return Err(Error::Config("cov_floor must be positive".into()));
    }
    let Some(first) = states.first() else {
        return Err(Error::Config("gmm fit on an empty state set".into()));
    };
    let dim = first.len();
    if let Some(bad) = states.iter().find(|s| s.len() != dim) {
        return Err(Error::shape("gmm state", dim, bad.len()));
    }
    if states.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite state in gmm training set".into()));
    }
    let distinct = distinct_count(states);
    if k > distinct {
        return Err(Error::Config(format!(
            "{k} components requested but only {distinct} distinct states"
        )));
    }

    let n = states.len() as f64;
    let mut rng = RngStream::named(seed, "gmm-init");
    let global_mean: Vec<f64> = (0..dim).map(|j| states.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    let global_var: Vec<f64> = (0..dim)
        .map(|j| {
            let v = states.iter().map(|s| (s[j] - global_mean[j]).powi(2)).sum::<f64>() / n;
            v.max(config.cov_floor)
        })
        .collect();
    let mut model = GmmModel {
        weights: vec![1.0 / k as f64; k],
        means: farthest_point_centers(states, k, &mut rng),
        variances: vec![global_var; k],
        cov_floor: config.cov_floor,
        alpha: config.alpha,
        log_quantile: 0.0,
        source: source.to_string(),
    };

    let mut trace = Vec::new();
    let mut floor_repairs = 0;
    for _ in 0..config.max_iter {
        let consts = model.component_consts();
        let partials = parallel::map_chunks(mode, states, EM_CHUNK, |chunk| {
            let mut p = Partial {
                ll: 0.0,
                nk: vec![0.0; k],
                sx: vec![0.0; k * dim],
                sxx: vec![0.0; k * dim],
            };
            let mut terms = vec![0.0; k];
            for s in chunk {
                model.component_log_terms(&consts, s, &mut terms);
                let lse = log_sum_exp(&terms);
                p.ll += lse;
                for (c, t) in terms.iter().enumerate() {
                    let r = (t - lse).exp();
                    if r == 0.0 {
                        continue;
                    }
                    p.nk[c] += r;
                    for (j, x) in s.iter().enumerate() {
                        p.sx[c * dim + j] += r * x;
                        p.sxx[c * dim + j] += r * x * x;
                    }
                }
            }
            p
        });
        let mut total = Partial {
            ll: 0.0,
            nk: vec![0.0; k],
            sx: vec![0.0; k * dim],
            sxx: vec![0.0; k * dim],
        };
        for p in partials {
            total.ll += p.ll;
            for (a, b) in total.nk.iter_mut().zip(&p.nk) {
                *a += b;
            }
            for (a, b) in total.sx.iter_mut().zip(&p.sx) {
                *a += b;
            }
            for (a, b) in total.sxx.iter_mut().zip(&p.sxx) {
                *a += b;
            }
        }
        trace.push(total.ll);

        for c in 0..k {
            let nk = total.nk[c];
            model.weights[c] = nk / n;
            if nk <= 1e-12 {
                continue;
            }
            for j in 0..dim {
                let mean = total.sx[c * dim + j] / nk;
                let var = total.sxx[c * dim + j] / nk - mean * mean;
                if var < config.cov_floor {
                    floor_repairs += 1;
                }
                model.means[c][j] = mean;
                model.variances[c][j] = var.max(config.cov_floor);
            }
        }
        let wsum: f64 = model.weights.iter().sum();
        for w in &mut model.weights {
            *w /= wsum;
        }

        if let [.., prev, last] = trace[..] {
            if ((last - prev) / n).abs() < config.tol {
                break;
            }
        }
    }
    if floor_repairs > 0 {
        log::warn!("gmm `{source}`: {floor_repairs} variance entries repaired by cov_floor");
    }

    let train_ld = model.log_density_batch(states, mode)?;
    model.log_quantile = quantile(&train_ld, config.alpha);
    Ok(GmmFit {
        model,
        log_likelihood_trace: trace,
        floor_repairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn unit_model(dim: usize) -> GmmModel {
        GmmModel {
            weights: vec![1.0],
            means: vec![vec![0.5; dim]],
            variances: vec![vec![1.0; dim]],
            cov_floor: 1e-4,
            alpha: 0.05,
            log_quantile: 0.0,
            source: "test".into(),
        }
    }

    #[test]
    fn degenerate_cluster() {
        let states = vec![vec![1.5, -2.0]; 30];
        let cfg = GmmConfig {
            components: 1,
            ..Default::default()
        };
        let fit = fit_gmm(&states, &cfg, 0, "deg").unwrap();
        assert_eq!(fit.model.means[0], vec![1.5, -2.0]);
        assert_eq!(fit.model.variances[0], vec![1e-4, 1e-4]);
        assert!(fit.floor_repairs > 0);
    }

    #[test]
    fn recovers_standard_normal() {
        let mut rng = RngStream::new(5, 1);
        let states: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.normal(), rng.normal()]).collect();
        // Sample-statistics oracle.
        let mean: Vec<f64> = (0..2).map(|j| states.iter().map(|s| s[j]).sum::<f64>() / 200.0).collect();
        let var: Vec<f64> = (0..2)
            .map(|j| states.iter().map(|s| (s[j] - mean[j]).powi(2)).sum::<f64>() / 200.0)
            .collect();
        let cfg = GmmConfig {
            components: 1,
            ..Default::default()
        };
        let m = fit_gmm(&states, &cfg, 0, "n").unwrap().model;
        for j in 0..2 {
            assert!((m.means[0][j] - mean[j]).abs() < 1e-9);
            assert!((m.variances[0][j] - var[j]).abs() < 1e-9);
            assert!(m.means[0][j].abs() < 0.2);
            assert!((m.variances[0][j] - 1.0).abs() < 0.3);
        }
    }

    #[test]
    fn separated_clusters_split_evenly() {
        let mut rng = RngStream::new(9, 1);
        let states: Vec<Vec<f64>> = (0..400)
            .map(|i| {
                let c = if i % 2 == 0 { 5.0 } else { -5.0 };
                vec![c + rng.normal(), c + rng.normal()]
            })
            .collect();
        // Nearest-center assignment oracle.
        let pos = states.iter().filter(|s| s[0] + s[1] > 0.0).count() as f64 / 400.0;
        let cfg = GmmConfig {
            components: 2,
            ..Default::default()
        };
        let m = fit_gmm(&states, &cfg, 3, "two").unwrap().model;
        for w in &m.weights {
            assert!((w - 0.5).abs() < 0.1);
        }
        let w_pos = if m.means[0][0] > 0.0 { m.weights[0] } else { m.weights[1] };
        assert!((w_pos - pos).abs() < 0.01);
    }

    #[test]
    fn em_never_decreases() {
        let mut rng = RngStream::new(2, 2);
        let states: Vec<Vec<f64>> = (0..600)
            .map(|i| {
                let c = [(0.0, 0.0), (3.0, 1.0), (-2.0, 4.0)][i % 3];
                vec![c.0 + 0.7 * rng.normal(), c.1 + 0.3 * rng.normal(), rng.uniform(-1.0, 1.0)]
            })
            .collect();
        let cfg = GmmConfig {
            components: 5,
            tol: 0.0,
            max_iter: 60,
            ..Default::default()
        };
        let fit = fit_gmm(&states, &cfg, 1, "em").unwrap();
        for w in fit.log_likelihood_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
        }
        let s: f64 = fit.model.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn too_many_components() {
        let states = vec![vec![0.0], vec![1.0], vec![0.0]];
        let cfg = GmmConfig {
            components: 3,
            ..Default::default()
        };
        assert!(matches!(fit_gmm(&states, &cfg, 0, "x"), Err(Error::Config(_))));
    }

    #[test]
    fn log_density_at_mean() {
        let m = unit_model(2);
        let ld = m.log_density(&[0.5, 0.5]).unwrap();
        assert!((ld - (1.0 / (2.0 * std::f64::consts::PI)).ln()).abs() < 1e-12);
        assert!((ld + 1.837_877_1).abs() < 1e-7);

        let mut twin = m.clone();
        twin.weights = vec![0.5, 0.5];
        twin.means.push(vec![0.5, 0.5]);
        twin.variances.push(vec![1.0, 1.0]);
        assert!((twin.log_density(&[0.5, 0.5]).unwrap() - ld).abs() < 1e-12);
    }

    #[test]
    fn far_state_is_tiny_but_finite() {
        let m = unit_model(2);
        let s = [0.5 + 20.0, 0.5];
        let ld = m.log_density(&s).unwrap();
        // Direct formula: -ln(2 pi) - 200.
        assert!((ld - (-(2.0 * std::f64::consts::PI).ln() - 200.0)).abs() < 1e-9);
        assert!(ld < -150.0 && ld.is_finite());
    }

    #[test]
    fn membership_clamp() {
        let mut m = unit_model(1);
        let ld = m.log_density(&[0.5]).unwrap();
        m.log_quantile = ld;
        assert_eq!(m.membership_score(&[0.5]).unwrap(), 1.0);
        m.log_quantile = ld + std::f64::consts::LN_2;
        assert!((m.membership_score(&[0.5]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn calibration_quantile_covers_training_set() {
        let mut rng = RngStream::new(4, 4);
        let states: Vec<Vec<f64>> = (0..1000).map(|_| vec![rng.normal(), 2.0 * rng.normal()]).collect();
        let cfg = GmmConfig {
            components: 3,
            ..Default::default()
        };
        let m = fit_gmm(&states, &cfg, 0, "cal").unwrap().model;
        let ones = states.iter().filter(|s| m.membership_score(s).unwrap() == 1.0).count();
        let frac = ones as f64 / 1000.0;
        assert!((frac - 0.95).abs() <= 0.002, "{frac}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = RngStream::new(8, 8);
        let states: Vec<Vec<f64>> = (0..300).map(|_| vec![rng.normal(), rng.normal(), rng.normal()]).collect();
        let m = fit_gmm(&states, &GmmConfig::default(), 0, "ck").unwrap().model;
        let mut bytes = Vec::new();
        m.write_to(&mut bytes, &Header::new("gmm").with("seed", 0)).unwrap();
        let (_, back) = GmmModel::read_from(&mut Cursor::new(&bytes)).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        back.write_to(&mut again, &Header::new("gmm").with("seed", 0)).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn modes_give_identical_fits() {
        let mut rng = RngStream::new(6, 6);
        let states: Vec<Vec<f64>> = (0..3000).map(|_| vec![rng.normal(), rng.uniform(0.0, 3.0)]).collect();
        let cfg = GmmConfig::default();
        let a = fit_gmm_with(&states, &cfg, 1, "p", Parallelism::Sequential).unwrap();
        let b = fit_gmm_with(&states, &cfg, 1, "p", Parallelism::Rayon).unwrap();
        assert_eq!(a.model, b.model);
    }
}
