use crate::density::gmm::GmmModel;
use crate::error::{Error, Result};
use crate::policy::GaussianPolicy;

/// `p(s,a) = pi_ref(a|s) * p_gmm(s)` for one demonstration set.
#[derive(Debug, Clone)]
pub struct JointDensityModel {
    policy: GaussianPolicy,
    gmm: GmmModel,
}

impl JointDensityModel {
    /// Both parts must have been fitted on the same demonstration set.
    pub fn new(policy: GaussianPolicy, gmm: GmmModel) -> Result<Self> {
        if policy.source != gmm.source {
            return Err(Error::Provenance {
                policy: policy.source.clone(),
                gmm: gmm.source.clone(),
            });
        }
        Ok(Self { policy, gmm })
    }

    pub fn policy(&self) -> &GaussianPolicy {
        &self.policy
    }

    pub fn gmm(&self) -> &GmmModel {
        &self.gmm
    }

    pub fn log_density(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.policy.log_prob(state, action)? + self.gmm.log_density(state)?)
    }
}

/// `clamp(exp(log p_S - log p_E), r_min, r_max)`.
pub fn density_ratio(
    expert: &JointDensityModel,
    supplementary: &JointDensityModel,
    state: &[f64],
    action: &[f64],
    r_min: f64,
    r_max: f64,
) -> Result<f64> {
    let log_e = expert.log_density(state, action)?;
    let log_s = supplementary.log_density(state, action)?;
    Ok(clamped_ratio(log_s - log_e, r_min, r_max))
}

pub fn clamped_ratio(log_diff: f64, r_min: f64, r_max: f64) -> f64 {
    log_diff.exp().clamp(r_min, r_max)
}
