//! Numerical disintegration: sampling the relaxed conditional
//! `mu_delta^a ∝ phi(|A(x) - a| / delta) mu` and driving `delta` towards zero.
//!
//! Two samplers are provided. [`smc_nd`] runs a particle population through a
//! decreasing schedule with Move, Re-weight and Re-sample steps (with the
//! survivor-set variant for the indicator relaxation). [`pt_nd`] runs one
//! Markov chain per temperature and proposes swaps between adjacent chains.
//! Both use preconditioned MALA transition kernels.
//!
//! Randomness is drawn from streams keyed by the run seed and the
//! (rung, particle) or (iteration, chain) indices, so results do not depend
//! on the number of worker threads.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::infoops::{CompiledConstraint, CompiledOperator};
use crate::rng::{self, tag};
use crate::seriesprior::{PriorFamily, SeriesPrior};

// ---------------------------------------------------------------------------
// Relaxation kernels and schedules
// ---------------------------------------------------------------------------

/// Relaxation function `phi`, with `phi(0) = 1` and decreasing in `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaxationKernel {
    /// `exp(-r^2 / 2)`.
    SquaredExponential,
    /// `1[r < 1]`.
    Indicator,
}

impl RelaxationKernel {
    /// `log phi(r)`.
    pub fn log_phi(&self, r: f64) -> f64 {
        match self {
            RelaxationKernel::SquaredExponential => -0.5 * r * r,
            RelaxationKernel::Indicator => {
                if r < 1.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// `log phi(sqrt(r_sq) / delta)`, with `delta = inf` giving zero.
    fn log_phi_sq(&self, r_sq: f64, delta: f64) -> f64 {
        if delta.is_infinite() {
            return 0.0;
        }
        match self {
            RelaxationKernel::SquaredExponential => -0.5 * r_sq / (delta * delta),
            RelaxationKernel::Indicator => {
                if r_sq < delta * delta {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }
}

/// `int r^(alpha+n-1) phi(r) dr / int r^(n-1) phi(r) dr`.
///
/// Squared-exponential values are only defined here for integer `alpha`.
pub fn moment_ratio_constant(kernel: RelaxationKernel, alpha: f64, n: usize) -> Result<f64> {
    if !(alpha > 0.0) || n == 0 {
        return Err(invalid("alpha", "need alpha > 0 and n >= 1"));
    }
    let nf = n as f64;
    match kernel {
        RelaxationKernel::Indicator => Ok(nf / (alpha + nf)),
        RelaxationKernel::SquaredExponential => {
            if alpha.fract() != 0.0 {
                return Err(Error::UnsupportedConfiguration(format!(
                    "non-integer moment order {alpha} for the squared-exponential kernel"
                )));
            }
            // int_0^inf r^k exp(-r^2/2) dr = 2^((k-1)/2) Gamma((k+1)/2)
            let log = 0.5 * alpha * std::f64::consts::LN_2 + libm::lgamma(0.5 * (alpha + nf))
                - libm::lgamma(0.5 * nf);
            Ok(log.exp())
        }
    }
}

/// Strictly decreasing relaxation parameters `delta_1 > ... > delta_m > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    deltas: Vec<f64>,
}

impl TemperatureSchedule {
    pub fn explicit(deltas: Vec<f64>) -> Result<Self> {
        if deltas.is_empty() {
            return Err(invalid("schedule", "at least one temperature is required"));
        }
        if deltas.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(invalid("schedule", "deltas must be positive and finite"));
        }
        if deltas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("schedule", "deltas must be strictly decreasing"));
        }
        Ok(Self { deltas })
    }

    /// `m` values equally spaced in `log delta` from `start` down to `end`.
    pub fn log_uniform(start: f64, end: f64, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(invalid("m", "at least one temperature is required"));
        }
        if m == 1 {
            return Self::explicit(vec![end]);
        }
        if !(start > end && end > 0.0) {
            return Err(invalid("schedule", format!("need start > end > 0, got {start}, {end}")));
        }
        let (ls, le) = (start.ln(), end.ln());
        let deltas = (0..m)
            .map(|i| {
                if i == m - 1 {
                    end
                } else if i == 0 {
                    start
                } else {
                    (ls + (le - ls) * i as f64 / (m - 1) as f64).exp()
                }
            })
            .collect();
        Self::explicit(deltas)
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn last(&self) -> f64 {
        *self.deltas.last().expect("non-empty schedule")
    }
}

/// Diagonal MALA preconditioner.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "entries", rename_all = "snake_case")]
pub enum Preconditioner {
    /// The prior scales `gamma_i`.
    #[default]
    PriorScales,
    /// The prior variances `gamma_i^2`, which whiten a Gaussian prior exactly
    /// and allow much larger steps when the scales decay quickly.
    PriorVariances,
    Diagonal(Vec<f64>),
}

/// Preconditioned MALA settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalaConfig {
    /// Base step `tau_0`; the step at `delta` is `tau_0 * min(1, delta^2)`
    /// unless `tau_cap` or `taus` is given.
    pub tau0: f64,
    /// When set, the step is `min(tau_cap, tau_0 * delta^2)` instead, so hot
    /// rungs are not held to the step that suits `delta = 1`.
    #[serde(default)]
    pub tau_cap: Option<f64>,
    /// Optional explicit step per temperature; overrides the rules above.
    #[serde(default)]
    pub taus: Option<Vec<f64>>,
    /// Langevin steps per kernel application.
    pub steps: usize,
    #[serde(default)]
    pub preconditioner: Preconditioner,
}

impl MalaConfig {
    pub fn new(tau0: f64, steps: usize) -> Self {
        Self {
            tau0,
            tau_cap: None,
            taus: None,
            steps,
            preconditioner: Preconditioner::PriorScales,
        }
    }

    pub fn with_tau_cap(mut self, cap: f64) -> Self {
        self.tau_cap = Some(cap);
        self
    }

    pub fn with_preconditioner(mut self, p: Preconditioner) -> Self {
        self.preconditioner = p;
        self
    }

    pub fn tau(&self, rung: usize, delta: f64) -> f64 {
        match (&self.taus, self.tau_cap) {
            (Some(t), _) => t[rung],
            (None, Some(cap)) => (self.tau0 * delta * delta).min(cap),
            (None, None) => self.tau0 * delta.powi(2).min(1.0),
        }
    }

    fn validate(&self, schedule: &TemperatureSchedule, dim: usize) -> Result<()> {
        if !(self.tau0 > 0.0) {
            return Err(invalid("tau0", "must be positive"));
        }
        if self.tau_cap.is_some_and(|c| !(c > 0.0)) {
            return Err(invalid("tau_cap", "must be positive"));
        }
        if let Some(t) = &self.taus {
            if t.len() != schedule.len() || t.iter().any(|v| !(*v > 0.0)) {
                return Err(invalid("taus", "one positive step per temperature is required"));
            }
        }
        if let Preconditioner::Diagonal(p) = &self.preconditioner {
            if p.len() != dim || p.iter().any(|v| !(*v > 0.0)) {
                return Err(invalid("preconditioner", "one positive entry per coefficient is required"));
            }
        }
        Ok(())
    }

    fn diagonal(&self, prior: &SeriesPrior) -> Vec<f64> {
        match &self.preconditioner {
            Preconditioner::PriorScales => prior.gammas().to_vec(),
            Preconditioner::PriorVariances => prior.gammas().iter().map(|g| g * g).collect(),
            Preconditioner::Diagonal(p) => p.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Relaxed target
// ---------------------------------------------------------------------------

const MAX_REFERENCE_TRIES: usize = 100_000;

/// Unnormalized relaxed posterior over coefficient vectors.
#[derive(Debug, Clone, Copy)]
pub struct RelaxedTarget<'a> {
    pub prior: &'a SeriesPrior,
    pub operator: &'a CompiledOperator,
    pub constraints: &'a [CompiledConstraint],
    pub kernel: RelaxationKernel,
}

/// Cached evaluation of a target at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPoint {
    pub u: Vec<f64>,
    /// `|A(x) - a|^2`, threshold map applied.
    pub r_sq: f64,
    pub log_prior: f64,
    pub feasible: bool,
    /// Gradient of the log target; `None` where the threshold map is active.
    grad_misfit: Option<Vec<f64>>,
    grad_prior: Vec<f64>,
}

impl TargetPoint {
    pub fn log_density(&self, kernel: RelaxationKernel, delta: f64) -> f64 {
        if !self.feasible {
            return f64::NEG_INFINITY;
        }
        kernel.log_phi_sq(self.r_sq, delta) + self.log_prior
    }

    fn drift_gradient(&self, kernel: RelaxationKernel, delta: f64) -> Option<Vec<f64>> {
        let misfit = self.grad_misfit.as_ref()?;
        let w = match kernel {
            RelaxationKernel::SquaredExponential => -0.5 / (delta * delta),
            RelaxationKernel::Indicator => 0.0,
        };
        Some(
            misfit
                .iter()
                .zip(&self.grad_prior)
                .map(|(m, p)| w * m + p)
                .collect(),
        )
    }
}

impl<'a> RelaxedTarget<'a> {
    pub fn new(
        prior: &'a SeriesPrior,
        operator: &'a CompiledOperator,
        constraints: &'a [CompiledConstraint],
        kernel: RelaxationKernel,
    ) -> Self {
        Self {
            prior,
            operator,
            constraints,
            kernel,
        }
    }

    /// Checks that gradients are available for MALA.
    pub fn require_gradients(&self) -> Result<()> {
        if self.prior.family() == PriorFamily::Uniform {
            return Err(Error::UnsupportedConfiguration(
                "MALA needs a differentiable prior; the uniform family has no gradient".into(),
            ));
        }
        Ok(())
    }

    pub fn evaluate(&self, u: Vec<f64>) -> TargetPoint {
        let feasible = self.constraints.iter().all(|c| c.holds(&u));
        let log_prior = self.prior.log_density(&u);
        let grad_prior = self
            .prior
            .grad_log_density(&u)
            .unwrap_or_else(|_| vec![0.0; u.len()]);
        let (r_sq, grad_misfit) = match self.operator.residual_sq_and_grad(&u) {
            Ok((sq, g)) => (sq, Some(g)),
            Err(_) => {
                let r = self.operator.residual_norm(&u);
                (r * r, None)
            }
        };
        TargetPoint {
            u,
            r_sq,
            log_prior,
            feasible,
            grad_misfit,
            grad_prior,
        }
    }

    /// A prior draw conditioned on the inequality constraints, by rejection.
    pub fn sample_reference<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TargetPoint> {
        for _ in 0..MAX_REFERENCE_TRIES {
            let u = self.prior.sample_coeffs(rng);
            if self.constraints.iter().all(|c| c.holds(&u)) {
                return Ok(self.evaluate(u));
            }
        }
        Err(Error::UnsupportedConfiguration(format!(
            "no prior draw satisfied the inequality constraints in {MAX_REFERENCE_TRIES} tries"
        )))
    }

    /// `log phi(|A(x) - a| / delta) + log prior`, or `-inf` when infeasible.
    pub fn log_density(&self, delta: f64, u: &[f64]) -> f64 {
        self.evaluate(u.to_vec()).log_density(self.kernel, delta)
    }
}

// ---------------------------------------------------------------------------
// MALA
// ---------------------------------------------------------------------------

fn drift_mean(p: &TargetPoint, kernel: RelaxationKernel, delta: f64, tau: f64, gamma: &[f64]) -> Vec<f64> {
    match p.drift_gradient(kernel, delta) {
        Some(g) => p
            .u
            .iter()
            .zip(&g)
            .zip(gamma)
            .map(|((u, g), c)| u + tau * c * g)
            .collect(),
        None => p.u.clone(),
    }
}

/// Log density of proposing `to` from `from`, including normalizing constants.
pub fn proposal_log_density(
    kernel: RelaxationKernel,
    delta: f64,
    tau: f64,
    gamma: &[f64],
    from: &TargetPoint,
    to: &[f64],
) -> f64 {
    let mean = drift_mean(from, kernel, delta, tau, gamma);
    to.iter()
        .zip(&mean)
        .zip(gamma)
        .map(|((y, m), c)| {
            let var = 2.0 * tau * c;
            -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (y - m).powi(2) / (2.0 * var)
        })
        .sum()
}

/// `log alpha` of the Metropolis-adjusted Langevin move `from -> to`.
pub fn log_acceptance_ratio(
    kernel: RelaxationKernel,
    delta: f64,
    tau: f64,
    gamma: &[f64],
    from: &TargetPoint,
    to: &TargetPoint,
) -> f64 {
    let log_to = to.log_density(kernel, delta);
    if log_to == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let fwd = drift_mean(from, kernel, delta, tau, gamma);
    let bwd = drift_mean(to, kernel, delta, tau, gamma);
    let mut log_q = 0.0;
    for i in 0..gamma.len() {
        let s = 4.0 * tau * gamma[i];
        log_q += ((to.u[i] - fwd[i]).powi(2) - (from.u[i] - bwd[i]).powi(2)) / s;
    }
    log_to - from.log_density(kernel, delta) + log_q
}

/// Applies `steps` MALA transitions at `delta`; returns the number accepted.
pub fn mala_kernel<R: Rng + ?Sized>(
    target: &RelaxedTarget<'_>,
    delta: f64,
    tau: f64,
    gamma: &[f64],
    steps: usize,
    state: &mut TargetPoint,
    rng: &mut R,
) -> usize {
    let kernel = target.kernel;
    let scale: Vec<f64> = gamma.iter().map(|c| (2.0 * tau * c).sqrt()).collect();
    let mut accepted = 0;
    for _ in 0..steps {
        let mean = drift_mean(state, kernel, delta, tau, gamma);
        let proposal: Vec<f64> = mean
            .iter()
            .zip(&scale)
            .map(|(m, s)| {
                let w: f64 = StandardNormal.sample(rng);
                m + s * w
            })
            .collect();
        let candidate = target.evaluate(proposal);
        let log_alpha = log_acceptance_ratio(kernel, delta, tau, gamma, state, &candidate);
        let u: f64 = rng.random();
        if log_alpha >= 0.0 || u.ln() < log_alpha {
            *state = candidate;
            accepted += 1;
        }
    }
    accepted
}

// ---------------------------------------------------------------------------
// Particle ensembles
// ---------------------------------------------------------------------------

/// Weighted particle approximation at one temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub states: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Index of each particle's initial ancestor.
    pub eves: Vec<usize>,
    /// Index into the schedule of the temperature reached.
    pub rung: usize,
    /// Rung at which every weight vanished, if any.
    pub failed_at: Option<usize>,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn failed(&self) -> bool {
        self.failed_at.is_some()
    }

    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Weighted mean of `f` and its standard error from ancestral lineages.
    pub fn mean_with_se(&self, f: impl Fn(&[f64]) -> f64) -> (f64, f64) {
        let values: Vec<f64> = self.states.iter().map(|s| f(s)).collect();
        let mean: f64 = values.iter().zip(&self.weights).map(|(v, w)| v * w).sum();
        let mut by_eve = std::collections::BTreeMap::<usize, f64>::new();
        for ((v, w), e) in values.iter().zip(&self.weights).zip(&self.eves) {
            *by_eve.entry(*e).or_default() += w * (v - mean);
        }
        let var: f64 = by_eve.values().map(|s| s * s).sum();
        (mean, var.sqrt())
    }

    pub fn weighted_mean(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.states
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| w * f(s))
            .sum()
    }

    pub fn weighted_std(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let m = self.weighted_mean(&f);
        self.states
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| w * (f(s) - m).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn coefficient_means(&self) -> Vec<f64> {
        let dim = self.states.first().map_or(0, Vec::len);
        (0..dim).map(|i| self.weighted_mean(|s| s[i])).collect()
    }
}

/// Diagnostics recorded at one temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungSummary {
    pub delta: f64,
    /// Effective sample size of the re-weighted population.
    pub ess: f64,
    pub acceptance_rate: f64,
    /// Estimate of `E[|A(x) - a|^2]` under the relaxed target at `delta`.
    pub mean_sq_residual: f64,
    pub mean_sq_residual_se: f64,
    /// Range of the incremental potentials `phi(r/delta_i) / phi(r/delta_{i-1})`.
    pub min_potential: f64,
    pub max_potential: f64,
    /// Number of particles inside the indicator set, when applicable.
    pub survivors: Option<usize>,
}

/// Result of a sampler run with its per-temperature history.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerHistory {
    pub rungs: Vec<RungSummary>,
    /// Identifies the information `(A, a)` the run conditioned on.
    pub fingerprint: u64,
    /// Number of scalar observations `n`.
    pub info_dim: usize,
    pub kernel: RelaxationKernel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmcOutput {
    pub ensemble: ParticleEnsemble,
    pub history: SamplerHistory,
}

/// When the SMC sampler re-samples its population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "fraction")]
pub enum Resampling {
    /// Multinomial re-sampling after every re-weighting.
    EveryRung,
    /// Multinomial re-sampling only once the effective sample size falls
    /// below this fraction of the population; weights accumulate otherwise.
    EssBelow(f64),
}

impl Default for Resampling {
    fn default() -> Self {
        Resampling::EveryRung
    }
}

/// Settings shared by both samplers.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub kernel: RelaxationKernel,
    pub schedule: TemperatureSchedule,
    pub mala: MalaConfig,
    pub seed: u64,
    /// Ignored by parallel tempering.
    pub resampling: Resampling,
}

impl SamplerConfig {
    pub fn new(kernel: RelaxationKernel, schedule: TemperatureSchedule, mala: MalaConfig, seed: u64) -> Self {
        Self {
            kernel,
            schedule,
            mala,
            seed,
            resampling: Resampling::EveryRung,
        }
    }

    pub fn with_resampling(mut self, resampling: Resampling) -> Self {
        self.resampling = resampling;
        self
    }
}

fn weighted_moments(values: &[f64], weights: &[f64]) -> (f64, f64) {
    let mean: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
    let var: f64 = values
        .iter()
        .zip(weights)
        .map(|(v, w)| (w * (v - mean)).powi(2))
        .sum();
    (mean, var.sqrt())
}

/// Normalizes log-weights; `None` when every weight vanishes.
fn normalize_log_weights(log_w: &[f64]) -> Option<Vec<f64>> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    Some(w.into_iter().map(|v| v / total).collect())
}

/// Multinomial resampling: ancestor index of each offspring.
pub fn multinomial_resample<R: Rng + ?Sized>(weights: &[f64], count: usize, rng: &mut R) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cdf.push(acc);
    }
    (0..count)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            cdf.partition_point(|c| *c <= u).min(weights.len() - 1)
        })
        .collect()
}

/// Sequential Monte Carlo for numerical disintegration.
///
/// Each rung moves every particle with MALA, re-weights by the ratio of
/// relaxation functions and re-samples. For the indicator relaxation the
/// survivor-set variant is used: particles outside the set are replaced by
/// uniform draws from the survivors, and the kernel targets the previous
/// temperature so that every current state has positive density.
pub fn smc_nd(
    target: &RelaxedTarget<'_>,
    particles: usize,
    cfg: &SamplerConfig,
) -> Result<SmcOutput> {
    if particles < 2 {
        return Err(invalid("particles", "need at least two particles"));
    }
    if cfg.kernel != target.kernel {
        return Err(invalid("kernel", "sampler and target kernels differ"));
    }
    target.require_gradients()?;
    let dim = target.prior.len();
    cfg.mala.validate(&cfg.schedule, dim)?;
    let gamma = cfg.mala.diagonal(target.prior);
    let seed = cfg.seed;
    let deltas = cfg.schedule.deltas();

    let mut states: Vec<TargetPoint> = (0..particles)
        .into_par_iter()
        .map(|j| target.sample_reference(&mut rng::stream(seed, &[tag::PRIOR, j as u64])))
        .collect::<Result<_>>()?;
    if let Resampling::EssBelow(f) = cfg.resampling {
        if !(0.0..=1.0).contains(&f) {
            return Err(invalid("resampling", "ESS fraction must lie in [0, 1]"));
        }
    }
    let mut eves: Vec<usize> = (0..particles).collect();
    // Log-weights carried over from rungs that did not re-sample.
    let mut carried = vec![0.0; particles];
    let mut rungs = Vec::with_capacity(deltas.len());
    let history = |rungs| SamplerHistory {
        rungs,
        fingerprint: target.operator.fingerprint(),
        info_dim: target.operator.len(),
        kernel: cfg.kernel,
    };

    for (i, &delta) in deltas.iter().enumerate() {
        let prev = if i == 0 { f64::INFINITY } else { deltas[i - 1] };
        let tau = cfg.mala.tau(i, delta);
        let move_delta = match cfg.kernel {
            RelaxationKernel::SquaredExponential => delta,
            RelaxationKernel::Indicator => prev,
        };
        let accepted: usize = states
            .par_iter_mut()
            .enumerate()
            .map(|(j, s)| {
                let mut r = rng::stream(seed, &[tag::MOVE, i as u64, j as u64]);
                mala_kernel(target, move_delta, tau, &gamma, cfg.mala.steps, s, &mut r)
            })
            .sum();
        let acceptance_rate = accepted as f64 / (particles * cfg.mala.steps.max(1)) as f64;

        let log_w: Vec<f64> = states
            .iter()
            .map(|s| cfg.kernel.log_phi_sq(s.r_sq, delta) - cfg.kernel.log_phi_sq(s.r_sq, prev))
            .collect();
        let potentials: Vec<f64> = log_w.iter().map(|l| l.exp()).collect();
        for (c, l) in carried.iter_mut().zip(&log_w) {
            *c += l;
        }
        let survivors = match cfg.kernel {
            RelaxationKernel::Indicator => {
                Some(log_w.iter().filter(|l| l.is_finite()).count())
            }
            RelaxationKernel::SquaredExponential => None,
        };
        let Some(weights) = normalize_log_weights(&carried) else {
            rungs.push(RungSummary {
                delta,
                ess: 0.0,
                acceptance_rate,
                mean_sq_residual: f64::NAN,
                mean_sq_residual_se: f64::NAN,
                min_potential: 0.0,
                max_potential: 0.0,
                survivors,
            });
            let n = states.len();
            return Ok(SmcOutput {
                ensemble: ParticleEnsemble {
                    states: states.into_iter().map(|s| s.u).collect(),
                    weights: vec![0.0; n],
                    eves,
                    rung: i,
                    failed_at: Some(i),
                },
                history: history(rungs),
            });
        };
        let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let r_sq: Vec<f64> = states.iter().map(|s| s.r_sq).collect();
        let (mean_sq, se_sq) = weighted_moments(&r_sq, &weights);
        rungs.push(RungSummary {
            delta,
            ess,
            acceptance_rate,
            mean_sq_residual: mean_sq,
            mean_sq_residual_se: se_sq,
            min_potential: potentials.iter().copied().fold(f64::INFINITY, f64::min),
            max_potential: potentials.iter().copied().fold(0.0, f64::max),
            survivors,
        });

        let mut r = rng::stream(seed, &[tag::RESAMPLE, i as u64]);
        let ancestors = match cfg.kernel {
            RelaxationKernel::SquaredExponential => {
                if let Resampling::EssBelow(f) = cfg.resampling {
                    if ess >= f * particles as f64 {
                        continue;
                    }
                }
                multinomial_resample(&weights, particles, &mut r)
            }
            RelaxationKernel::Indicator => {
                let alive: Vec<usize> = (0..particles).filter(|&j| log_w[j].is_finite()).collect();
                (0..particles)
                    .map(|j| {
                        if log_w[j].is_finite() {
                            j
                        } else {
                            alive[r.random_range(0..alive.len())]
                        }
                    })
                    .collect()
            }
        };
        states = ancestors.iter().map(|&a| states[a].clone()).collect();
        eves = ancestors.iter().map(|&a| eves[a]).collect();
        carried.iter_mut().for_each(|c| *c = 0.0);
    }

    let weights = normalize_log_weights(&carried).expect("weights checked at every rung");
    Ok(SmcOutput {
        ensemble: ParticleEnsemble {
            states: states.into_iter().map(|s| s.u).collect(),
            weights,
            eves,
            rung: deltas.len() - 1,
            failed_at: None,
        },
        history: history(rungs),
    })
}

// ---------------------------------------------------------------------------
// Parallel tempering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PtOutput {
    /// Cold-chain states after burn-in, one per iteration.
    pub trace: Vec<Vec<f64>>,
    /// Attempted and accepted swaps for each adjacent pair `(q, q+1)`.
    pub swap_attempts: Vec<usize>,
    pub swap_accepts: Vec<usize>,
    /// Per-chain averages of `|A(x) - a|^2` over the post-burn-in iterations.
    pub history: SamplerHistory,
}

impl PtOutput {
    pub fn coefficient_means(&self) -> Vec<f64> {
        let n = self.trace.len() as f64;
        let dim = self.trace.first().map_or(0, Vec::len);
        (0..dim)
            .map(|i| self.trace.iter().map(|s| s[i]).sum::<f64>() / n)
            .collect()
    }
}

/// Swap acceptance probability between chains `q` and `q + 1`.
pub fn swap_acceptance(
    kernel: RelaxationKernel,
    delta_q: f64,
    delta_next: f64,
    x_q: &TargetPoint,
    x_next: &TargetPoint,
) -> f64 {
    // The prior factors cancel; only the relaxation terms remain.
    let log_alpha = kernel.log_phi_sq(x_next.r_sq, delta_q) + kernel.log_phi_sq(x_q.r_sq, delta_next)
        - kernel.log_phi_sq(x_q.r_sq, delta_q)
        - kernel.log_phi_sq(x_next.r_sq, delta_next);
    if log_alpha.is_nan() {
        return 0.0;
    }
    log_alpha.exp().min(1.0)
}

/// Parallel tempering with one chain per temperature; the cold chain is the
/// last entry of the schedule.
pub fn pt_nd(
    target: &RelaxedTarget<'_>,
    iterations: usize,
    burn_in: usize,
    cfg: &SamplerConfig,
) -> Result<PtOutput> {
    if cfg.kernel != target.kernel {
        return Err(invalid("kernel", "sampler and target kernels differ"));
    }
    target.require_gradients()?;
    let dim = target.prior.len();
    cfg.mala.validate(&cfg.schedule, dim)?;
    let gamma = cfg.mala.diagonal(target.prior);
    let deltas = cfg.schedule.deltas();
    let m = deltas.len();
    let seed = cfg.seed;

    let mut chains: Vec<TargetPoint> = (0..m)
        .into_par_iter()
        .map(|q| target.sample_reference(&mut rng::stream(seed, &[tag::PRIOR, q as u64])))
        .collect::<Result<_>>()?;
    let mut accepted = vec![0usize; m];
    let mut attempts = vec![0usize; m.saturating_sub(1)];
    let mut accepts = vec![0usize; m.saturating_sub(1)];
    let mut sum_sq = vec![0.0; m];
    let mut sum_sq2 = vec![0.0; m];
    let mut trace = Vec::with_capacity(iterations.saturating_sub(burn_in));

    for it in 0..iterations {
        let acc: Vec<usize> = chains
            .par_iter_mut()
            .enumerate()
            .map(|(q, s)| {
                let mut r = rng::stream(seed, &[tag::MOVE, it as u64, q as u64]);
                mala_kernel(
                    target,
                    deltas[q],
                    cfg.mala.tau(q, deltas[q]),
                    &gamma,
                    cfg.mala.steps,
                    s,
                    &mut r,
                )
            })
            .collect();
        for (a, n) in accepted.iter_mut().zip(acc) {
            *a += n;
        }
        if m > 1 {
            let mut r = rng::stream(seed, &[tag::SWAP, it as u64]);
            let q = r.random_range(0..m - 1);
            attempts[q] += 1;
            let alpha = swap_acceptance(cfg.kernel, deltas[q], deltas[q + 1], &chains[q], &chains[q + 1]);
            if r.random::<f64>() < alpha {
                chains.swap(q, q + 1);
                accepts[q] += 1;
            }
        }
        if it >= burn_in {
            for (q, c) in chains.iter().enumerate() {
                sum_sq[q] += c.r_sq;
                sum_sq2[q] += c.r_sq * c.r_sq;
            }
            trace.push(chains[m - 1].u.clone());
        }
    }

    let kept = iterations.saturating_sub(burn_in).max(1) as f64;
    let rungs = (0..m)
        .map(|q| {
            let mean = sum_sq[q] / kept;
            let var = (sum_sq2[q] / kept - mean * mean).max(0.0);
            RungSummary {
                delta: deltas[q],
                ess: f64::NAN,
                acceptance_rate: accepted[q] as f64 / (iterations * cfg.mala.steps.max(1)).max(1) as f64,
                mean_sq_residual: mean,
                mean_sq_residual_se: (var / kept).sqrt(),
                min_potential: f64::NAN,
                max_potential: f64::NAN,
                survivors: None,
            }
        })
        .collect();
    Ok(PtOutput {
        trace,
        swap_attempts: attempts,
        swap_accepts: accepts,
        history: SamplerHistory {
            rungs,
            fingerprint: target.operator.fingerprint(),
            info_dim: target.operator.len(),
            kernel: cfg.kernel,
        },
    })
}

/// Standard error of the mean of a correlated series by non-overlapping batch means.
pub fn batch_means_se(series: &[f64], batches: usize) -> f64 {
    let b = batches.max(2);
    let len = series.len() / b;
    if len == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..b)
        .map(|k| series[k * len..(k + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (b - 1) as f64;
    (var / b as f64).sqrt()
}
