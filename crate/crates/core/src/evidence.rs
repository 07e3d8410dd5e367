//! Model evidence by thermodynamic integration over a relaxation schedule.
//!
//! With `phi(r) = exp(-r^2/2)` and `beta = 1/delta^2`, the relaxed normalizer
//! `Z(beta) = int exp(-beta |A(x) - a|^2 / 2) mu(dx)` satisfies
//! `d log Z / d beta = -E_beta[|A(x) - a|^2] / 2`. Summing this over the
//! schedule with the right-endpoint rule gives `log Z(beta_m)`. Dividing by
//! the Gaussian normalizer `(2 pi delta_m^2)^(n/2)` turns it into an estimate
//! of the density of the data `a` under the prior pushforward of `A`.

use serde::{Deserialize, Serialize};

use crate::disintegration::{RelaxationKernel, SamplerHistory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceEstimate {
    /// Estimated log density of the observed information.
    pub log_evidence: f64,
    /// `log Z(delta_m)`, equal to minus the sum of the rung contributions.
    pub relaxed_log_evidence: f64,
    /// `(beta_i - beta_{i-1}) E_i[|A(x) - a|^2] / 2` per rung; nonnegative.
    pub rung_contributions: Vec<f64>,
    pub rung_standard_errors: Vec<f64>,
    /// Rung errors combined as if independent.
    pub standard_error: f64,
    pub final_delta: f64,
    pub info_dim: usize,
    pub fingerprint: u64,
}

/// Thermodynamic-integration estimate from a sampler's rung history.
pub fn estimate_log_evidence(history: &SamplerHistory) -> Result<EvidenceEstimate> {
    if history.kernel != RelaxationKernel::SquaredExponential {
        return Err(Error::UnsupportedConfiguration(
            "evidence needs the squared-exponential relaxation".into(),
        ));
    }
    if history.rungs.is_empty() {
        return Err(Error::EvidenceUnavailable { rung: 0 });
    }
    let mut prev_beta = 0.0;
    let mut contributions = Vec::with_capacity(history.rungs.len());
    let mut errors = Vec::with_capacity(history.rungs.len());
    for (i, r) in history.rungs.iter().enumerate() {
        if !(r.mean_sq_residual.is_finite() && r.mean_sq_residual >= 0.0) {
            return Err(Error::EvidenceUnavailable { rung: i });
        }
        let beta = 1.0 / (r.delta * r.delta);
        let step = 0.5 * (beta - prev_beta);
        contributions.push(step * r.mean_sq_residual);
        errors.push(step * r.mean_sq_residual_se.max(0.0));
        prev_beta = beta;
    }
    let relaxed = -contributions.iter().sum::<f64>();
    let final_delta = history.rungs.last().expect("non-empty").delta;
    let n = history.info_dim as f64;
    let normalizer = 0.5 * n * (2.0 * std::f64::consts::PI * final_delta * final_delta).ln();
    Ok(EvidenceEstimate {
        log_evidence: relaxed - normalizer,
        relaxed_log_evidence: relaxed,
        standard_error: errors.iter().map(|e| e * e).sum::<f64>().sqrt(),
        rung_contributions: contributions,
        rung_standard_errors: errors,
        final_delta,
        info_dim: history.info_dim,
        fingerprint: history.fingerprint,
    })
}

/// `log e1 - log e2`; exactly antisymmetric in its arguments.
pub fn log_bayes_factor(e1: &EvidenceEstimate, e2: &EvidenceEstimate) -> Result<f64> {
    if e1.fingerprint != e2.fingerprint {
        return Err(Error::Comparison(e1.fingerprint, e2.fingerprint));
    }
    Ok(e1.log_evidence - e2.log_evidence)
}

/// Bayes factor of the model behind `e1` against the model behind `e2`.
pub fn bayes_factor(e1: &EvidenceEstimate, e2: &EvidenceEstimate) -> Result<f64> {
    log_bayes_factor(e1, e2).map(f64::exp)
}
