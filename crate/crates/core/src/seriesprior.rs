//! Truncated series priors `u_i = gamma_i xi_i` over Chebyshev coefficients.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::chebbasis::{BasisSet, Offset, SeriesState};
use crate::error::{invalid, Error, Result};
use crate::rng;

/// Standard family of the i.i.d. variables `xi_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorFamily {
    /// `N(0, 1)`.
    Gaussian,
    /// Cauchy with unit scale.
    Cauchy,
    /// `Uniform(-1, 1)`.
    Uniform,
}

impl PriorFamily {
    pub fn name(&self) -> &'static str {
        match self {
            PriorFamily::Gaussian => "gaussian",
            PriorFamily::Cauchy => "cauchy",
            PriorFamily::Uniform => "uniform",
        }
    }

    /// Log density of the standard variable.
    fn log_standard_density(&self, x: f64) -> f64 {
        match self {
            PriorFamily::Gaussian => -0.5 * (2.0 * PI).ln() - 0.5 * x * x,
            PriorFamily::Cauchy => -PI.ln() - (x * x).ln_1p(),
            PriorFamily::Uniform => {
                if x.abs() <= 1.0 {
                    -std::f64::consts::LN_2
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            PriorFamily::Gaussian => StandardNormal.sample(rng),
            PriorFamily::Cauchy => Cauchy::new(0.0, 1.0).expect("unit scale").sample(rng),
            PriorFamily::Uniform => rng.random_range(-1.0..=1.0),
        }
    }
}

/// Scale sequence `gamma_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScaleSequence {
    /// `alpha (i + 1)^(-p)`, `p > 1`.
    PowerDecay { alpha: f64, p: f64 },
    /// `alpha beta^(-i)`, `beta > 1`.
    Geometric { alpha: f64, beta: f64 },
}

impl ScaleSequence {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ScaleSequence::PowerDecay { alpha, p } => {
                positive("alpha", alpha)?;
                if !(p > 1.0 && p.is_finite()) {
                    return Err(invalid("p", format!("power decay needs p > 1, got {p}")));
                }
            }
            ScaleSequence::Geometric { alpha, beta } => {
                positive("alpha", alpha)?;
                if !(beta > 1.0 && beta.is_finite()) {
                    return Err(invalid("beta", format!("geometric decay needs beta > 1, got {beta}")));
                }
            }
        }
        Ok(())
    }

    pub fn gamma(&self, i: usize) -> f64 {
        match *self {
            ScaleSequence::PowerDecay { alpha, p } => alpha * ((i + 1) as f64).powf(-p),
            ScaleSequence::Geometric { alpha, beta } => alpha * beta.powf(-(i as f64)),
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive and finite, got {v}")))
    }
}

/// Prior `mu_N` on the first `N + 1` coefficients of a series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPrior {
    family: PriorFamily,
    scales: ScaleSequence,
    offset: Offset,
    basis: Arc<BasisSet>,
    gammas: Vec<f64>,
}

impl SeriesPrior {
    pub fn new(
        family: PriorFamily,
        scales: ScaleSequence,
        offset: Offset,
        basis: Arc<BasisSet>,
    ) -> Result<Self> {
        scales.validate()?;
        let gammas: Vec<f64> = (0..basis.len()).map(|i| scales.gamma(i)).collect();
        if let Some(i) = gammas.iter().position(|g| !(*g > 0.0)) {
            return Err(invalid("scales", format!("gamma_{i} underflows to zero")));
        }
        Ok(Self {
            family,
            scales,
            offset,
            basis,
            gammas,
        })
    }

    pub fn family(&self) -> PriorFamily {
        self.family
    }

    pub fn scales(&self) -> ScaleSequence {
        self.scales
    }

    pub fn offset(&self) -> Offset {
        self.offset
    }

    pub fn basis(&self) -> &Arc<BasisSet> {
        &self.basis
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn len(&self) -> usize {
        self.gammas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gammas.is_empty()
    }

    /// Truncation level `N`.
    pub fn truncation(&self) -> usize {
        self.len().saturating_sub(1)
    }

    /// Wraps a coefficient vector as a state on this prior's basis.
    pub fn state(&self, coeffs: Vec<f64>) -> Result<SeriesState> {
        SeriesState::new(self.basis.clone(), self.offset, coeffs)
    }

    pub fn sample_coeffs<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.gammas
            .iter()
            .map(|g| g * self.family.draw(rng))
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SeriesState {
        let coeffs = self.sample_coeffs(rng);
        SeriesState::new(self.basis.clone(), self.offset, coeffs).expect("prior length matches basis")
    }

    /// Draw from the stream keyed by `seed` alone.
    pub fn sample_seeded(&self, seed: u64) -> SeriesState {
        self.sample(&mut rng::stream(seed, &[rng::tag::PRIOR]))
    }

    /// `sum_i log f(u_i / gamma_i) - log gamma_i`.
    pub fn log_density(&self, u: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.len());
        u.iter()
            .zip(&self.gammas)
            .map(|(&x, &g)| self.family.log_standard_density(x / g) - g.ln())
            .sum()
    }

    pub fn grad_log_density(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; u.len()];
        self.grad_log_density_into(u, &mut out)?;
        Ok(out)
    }

    pub fn grad_log_density_into(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        match self.family {
            PriorFamily::Gaussian => {
                for ((o, &x), &g) in out.iter_mut().zip(u).zip(&self.gammas) {
                    *o = -x / (g * g);
                }
            }
            PriorFamily::Cauchy => {
                for ((o, &x), &g) in out.iter_mut().zip(u).zip(&self.gammas) {
                    *o = -2.0 * x / (g * g + x * x);
                }
            }
            PriorFamily::Uniform => return Err(Error::UnsupportedFamily("uniform".into())),
        }
        Ok(())
    }
}
