//! State-marginal mixtures, calibrated membership scores and the joint
//! density surrogates `p(s,a) = pi_ref(a|s) * p_gmm(s)`.

pub mod gmm;
pub mod joint;

pub use gmm::{calibrated_score, fit_gmm, fit_gmm_with, log_sum_exp, GmmConfig, GmmFit, GmmModel};
pub use joint::{clamped_ratio, density_ratio, JointDensityModel};
