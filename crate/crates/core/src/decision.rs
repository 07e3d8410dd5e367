//! Average-case checks: Bayes risk of linear quadrature rules under the
//! Wiener prior, optimal information at small `n`, Monte Carlo risk of a
//! probabilistic method against the Bayes rule, and an exact discrete example
//! in which the two notions of optimal information disagree.

use std::fmt;

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use nalgebra::{DMatrix, DVector};
use num_rational::Rational64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conjugate::{self, KernelSpec, LinearFunctional};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, tag};

/// Expected squared error of `sum w_i x(t_i)` for `int_0^1 x` under the
/// standard Wiener prior.
pub fn wce1_risk(knots: &[f64], weights: &[f64]) -> f64 {
    let linear: f64 = knots
        .iter()
        .zip(weights)
        .map(|(t, w)| w * (t - 0.5 * t * t))
        .sum();
    let mut quad = 0.0;
    for (ti, wi) in knots.iter().zip(weights) {
        for (tj, wj) in knots.iter().zip(weights) {
            quad += wi * wj * ti.min(*tj);
        }
    }
    1.0 / 3.0 - 2.0 * linear + quad
}

/// Risk-minimizing weights for fixed knots and the resulting risk.
fn optimal_weights(knots: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = knots.len();
    let k = DMatrix::from_fn(n, n, |i, j| knots[i].min(knots[j]));
    let z = DVector::from_iterator(n, knots.iter().map(|t| t - 0.5 * t * t));
    let w = k.cholesky()?.solve(&z);
    let risk = 1.0 / 3.0 - z.dot(&w);
    Some((w.iter().copied().collect(), risk))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub knots: Vec<f64>,
    pub weights: Vec<f64>,
    pub risk: f64,
}

/// Knot placement over unconstrained coordinates: softmax gaps with one
/// implicit trailing gap keep the knots ordered inside `(0, 1)`.
struct KnotSearch;

impl KnotSearch {
    fn gaps(s: &[f64]) -> Vec<f64> {
        let max = s.iter().copied().fold(0.0f64, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
        let total = (-max).exp() + e.iter().sum::<f64>();
        e.into_iter().map(|v| v / total).collect()
    }

    fn knots(s: &[f64]) -> Vec<f64> {
        Self::gaps(s)
            .iter()
            .scan(0.0, |acc, g| {
                *acc += g;
                Some(*acc)
            })
            .collect()
    }
}

impl CostFunction for KnotSearch {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, s: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let t = Self::knots(s);
        Ok(optimal_weights(&t).map_or(f64::INFINITY, |(_, r)| r))
    }
}

impl Gradient for KnotSearch {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, s: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        let g = Self::gaps(s);
        let t = Self::knots(s);
        let n = t.len();
        let Some((w, _)) = optimal_weights(&t) else {
            return Ok(vec![0.0; n]);
        };
        // With w optimal, dR/dt_k is the partial derivative at fixed w.
        let dt: Vec<f64> = (0..n)
            .map(|k| {
                let above: f64 = (0..n).filter(|&j| t[j] > t[k]).map(|j| w[j]).sum();
                -2.0 * (1.0 - t[k]) * w[k] + w[k] * w[k] + 2.0 * w[k] * above
            })
            .collect();
        // dt_i/ds_k = g_k (1[k <= i] - t_i).
        Ok((0..n)
            .map(|k| {
                (0..n)
                    .map(|i| dt[i] * g[k] * (if k <= i { 1.0 } else { 0.0 } - t[i]))
                    .sum()
            })
            .collect())
    }
}

/// Minimizes [`wce1_risk`] over `n` knots and weights by multi-start L-BFGS
/// over the knots with the weights solved in closed form.
pub fn optimal_trapezium(n: usize, seed: u64) -> Result<QuadratureRule> {
    if !(1..=6).contains(&n) {
        return Err(invalid("n", "optimal search is supported for 1 <= n <= 6"));
    }
    const STARTS: u64 = 20;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut converged = false;
    for start in 0..STARTS {
        let mut r = rng::stream(seed, &[tag::DRAW, start]);
        let init: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        let solver = LBFGS::new(MoreThuenteLineSearch::new(), 7)
            .with_tolerance_grad(1e-14)
            .and_then(|s| s.with_tolerance_cost(0.0));
        let Ok(solver) = solver else { continue };
        let Ok(res) = Executor::new(KnotSearch, solver)
            .configure(|st| st.param(init).max_iters(400))
            .run()
        else {
            continue;
        };
        let state = res.state();
        let (Some(p), cost) = (state.get_best_param(), state.get_best_cost()) else {
            continue;
        };
        if cost.is_finite() {
            converged = true;
            if best.as_ref().is_none_or(|(_, c)| cost < *c) {
                best = Some((p.clone(), cost));
            }
        }
    }
    match best {
        Some((s, _)) if converged => {
            let knots = KnotSearch::knots(&s);
            let (weights, risk) = optimal_weights(&knots).expect("finite cost implies a factorization");
            Ok(QuadratureRule { knots, weights, risk })
        }
        other => {
            let (knots, risk) = other.map_or((Vec::new(), f64::INFINITY), |(s, c)| (KnotSearch::knots(&s), c));
            Err(Error::Optimization {
                best_risk: risk,
                best_knots: knots,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Monte Carlo Bayes risk
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    ZeroOne,
}

/// Method whose risk is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMethod {
    /// Outputs the full Gaussian posterior; its loss is the posterior expected loss.
    BpnmGaussian,
    /// Outputs the posterior mean.
    BayesRuleMean,
}

impl fmt::Display for RiskMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RiskMethod::BpnmGaussian => "bpnm_gaussian",
            RiskMethod::BayesRuleMean => "bayes_rule_mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub bayes_risk: f64,
    pub standard_error: f64,
    pub loss: LossKind,
    pub method: RiskMethod,
    pub draws: usize,
}

/// Risks of both methods on common draws, with the ratio of the first to the second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskComparison {
    pub bpnm: RiskReport,
    pub bayes_rule: RiskReport,
    pub ratio: f64,
    /// Delta-method standard error of `ratio`.
    pub ratio_standard_error: f64,
}

const DRAW_CHUNK: usize = 4096;

/// Per-draw squared-loss pairs `(bpnm, bayes_rule)` for a Gaussian prior.
fn conjugate_losses(
    kernel: &KernelSpec,
    observations: &[LinearFunctional],
    qoi: &LinearFunctional,
    draws: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let mut all: Vec<LinearFunctional> = observations.to_vec();
    all.push(qoi.clone());
    let joint = conjugate::gram(kernel, &all)?;
    let m = all.len();
    let mut jitter = joint.clone();
    let scale = 1e-12 * joint.trace() / m as f64;
    for i in 0..m {
        jitter[(i, i)] += scale;
    }
    let chol = jitter.cholesky().ok_or(Error::Conditioning {
        size: m,
        condition_estimate: f64::INFINITY,
    })?;
    let lower = chol.l();
    let means: Vec<f64> = all.iter().map(|l| kernel.mean_of(l)).collect();

    // Posterior mean is affine in the data; the variance does not depend on it.
    let n = observations.len();
    let (weights, variance) = if n == 0 {
        (Vec::new(), joint[(m - 1, m - 1)])
    } else {
        let obs_chol = conjugate::factorize(kernel, joint.view((0, 0), (n, n)).into_owned())?;
        let cross = joint.view((0, n), (n, 1)).into_owned();
        let w = obs_chol.solve(&cross);
        let v = joint[(n, n)] - cross.dot(&w);
        (w.iter().copied().collect::<Vec<f64>>(), v.max(0.0))
    };
    let noise = kernel.noise_variance.sqrt();

    let chunks = draws.div_ceil(DRAW_CHUNK);
    let losses = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut r = rng::stream(seed, &[tag::DRAW, c as u64]);
            let count = DRAW_CHUNK.min(draws - c * DRAW_CHUNK);
            let lower = &lower;
            let means = &means;
            let weights = &weights;
            (0..count)
                .map(move |_| {
                    let xi = DVector::from_iterator(m, (0..m).map(|_| StandardNormal.sample(&mut r)));
                    let y = lower * xi;
                    let q = means[n] + y[n];
                    let mut est = means[n];
                    for i in 0..n {
                        let eps: f64 = if noise > 0.0 { noise * r.sample::<f64, _>(StandardNormal) } else { 0.0 };
                        est += weights[i] * (y[i] + eps);
                    }
                    let err = (q - est).powi(2);
                    (err + variance, err)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(losses)
}

fn mean_and_se(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Monte Carlo squared-loss Bayes risk of `method` under a Gaussian prior.
pub fn mc_bayes_risk(
    kernel: &KernelSpec,
    method: RiskMethod,
    observations: &[LinearFunctional],
    qoi: &LinearFunctional,
    draws: usize,
    seed: u64,
) -> Result<RiskReport> {
    let c = mc_risk_comparison(kernel, observations, qoi, draws, seed)?;
    Ok(match method {
        RiskMethod::BpnmGaussian => c.bpnm,
        RiskMethod::BayesRuleMean => c.bayes_rule,
    })
}

/// Risks of the probabilistic method and the Bayes rule on the same draws.
pub fn mc_risk_comparison(
    kernel: &KernelSpec,
    observations: &[LinearFunctional],
    qoi: &LinearFunctional,
    draws: usize,
    seed: u64,
) -> Result<RiskComparison> {
    if draws < 2 {
        return Err(invalid("draws", "need at least two draws"));
    }
    let losses = conjugate_losses(kernel, observations, qoi, draws, seed)?;
    let (b, b_se) = mean_and_se(losses.iter().map(|l| l.0));
    let (r, r_se) = mean_and_se(losses.iter().map(|l| l.1));
    let ratio = b / r;
    // Var(B/R) ~ Var(B - ratio R) / R^2.
    let (_, lin_se) = mean_and_se(losses.iter().map(|l| l.0 - ratio * l.1));
    let report = |risk, se, method| RiskReport {
        bayes_risk: risk,
        standard_error: se,
        loss: LossKind::Squared,
        method,
        draws,
    };
    Ok(RiskComparison {
        bpnm: report(b, b_se, RiskMethod::BpnmGaussian),
        bayes_rule: report(r, r_se, RiskMethod::BayesRuleMean),
        ratio,
        ratio_standard_error: lin_se / r,
    })
}

// ---------------------------------------------------------------------------
// Discrete counterexample
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suit {
    Spades,
    Diamonds,
    Hearts,
    Clubs,
}

impl Suit {
    pub const ALL: [Suit; 4] = [Suit::Spades, Suit::Diamonds, Suit::Hearts, Suit::Clubs];
}

/// Exact 0-1 loss risks for one choice of observed set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterexampleRow {
    pub observed_set: Vec<Suit>,
    /// Minimum over the four deterministic rules `a -> c_a`.
    pub classical_risk: Rational64,
    /// Risk of reporting the conditional distribution of the indicator.
    pub bpnm_risk: Rational64,
}

fn zero_one(a: u8, b: u8) -> Rational64 {
    Rational64::from_integer((a != b) as i64)
}

/// Uniform prior on four suits, `Q(x) = 1[x = spades]`, `A(x) = 1[x in S]`.
pub fn counterexample_risks(set: &[Suit]) -> CounterexampleRow {
    let prior = Rational64::new(1, Suit::ALL.len() as i64);
    let q = |x: Suit| (x == Suit::Spades) as u8;
    let a = |x: Suit| set.contains(&x) as u8;

    let classical_risk = (0..4u8)
        .map(|rule| {
            let c = [rule & 1, rule >> 1];
            Suit::ALL
                .iter()
                .map(|&x| prior * zero_one(c[a(x) as usize], q(x)))
                .sum::<Rational64>()
        })
        .min()
        .expect("four rules");

    let bpnm_risk = Suit::ALL
        .iter()
        .map(|&x| {
            let fiber: Vec<Suit> = Suit::ALL.iter().copied().filter(|&y| a(y) == a(x)).collect();
            let share = Rational64::new(1, fiber.len() as i64);
            let expected: Rational64 = fiber.iter().map(|&y| share * zero_one(q(y), q(x))).sum();
            prior * expected
        })
        .sum();

    CounterexampleRow {
        observed_set: set.to_vec(),
        classical_risk,
        bpnm_risk,
    }
}

/// The two observed sets `{spades, diamonds}` and `{spades, diamonds, hearts}`.
pub fn discrete_counterexample() -> [CounterexampleRow; 2] {
    [
        counterexample_risks(&[Suit::Spades, Suit::Diamonds]),
        counterexample_risks(&[Suit::Spades, Suit::Diamonds, Suit::Hearts]),
    ]
}
