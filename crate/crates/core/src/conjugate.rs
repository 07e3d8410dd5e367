//! Closed-form Gaussian conditioning on linear information.
//!
//! A Gaussian process prior is described by a [`KernelSpec`]. Linear
//! functionals act on both arguments of the covariance, so conditioning on
//! `L_i x = a_i` and predicting `Q_j x` reduces to Gram matrices
//! `k(L_i, L_j)`. Gram matrices get a relative nugget of `1e-10 * trace / n`
//! before a Cholesky factorization; a failed factorization is reported as
//! [`Error::Conditioning`].

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::chebbasis::{dot, BasisSet, DerivOrder, Offset, SeriesState};
use crate::error::{invalid, Error, Result};
use crate::infoops::{Functional, InformationOperator};

/// Relative nugget added to Gram diagonals.
pub const NUGGET: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Linear functionals
// ---------------------------------------------------------------------------

/// A linear functional in a form the kernels can act on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinearFunctional {
    /// `sum_k c_k D^{alpha_k} x (t)`.
    Pointwise {
        t: Vec<f64>,
        terms: Vec<(f64, DerivOrder)>,
    },
    /// `int_lo^hi x(t) dt` on a 1D domain.
    Integral { lo: f64, hi: f64 },
}

impl LinearFunctional {
    pub fn point(t: Vec<f64>) -> Self {
        LinearFunctional::Pointwise {
            t,
            terms: vec![(1.0, DerivOrder::VALUE)],
        }
    }

    pub fn point_1d(t: f64) -> Self {
        Self::point(vec![t])
    }

    pub fn integral(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(invalid("integral", format!("need lo < hi, got [{lo}, {hi}]")));
        }
        Ok(LinearFunctional::Integral { lo, hi })
    }

    fn max_order(&self) -> usize {
        match self {
            LinearFunctional::Pointwise { terms, .. } => {
                terms.iter().map(|(_, o)| o.total()).max().unwrap_or(0)
            }
            LinearFunctional::Integral { .. } => 0,
        }
    }

    /// Coefficient row and offset part of the functional on a series.
    pub fn series_row(&self, basis: &BasisSet, offset: Offset) -> Result<(Vec<f64>, f64)> {
        match self {
            LinearFunctional::Pointwise { t, terms } => {
                let mut row = vec![0.0; basis.len()];
                let mut constant = 0.0;
                for (c, order) in terms {
                    for (r, v) in row.iter_mut().zip(basis.row(t, *order)?) {
                        *r += c * v;
                    }
                    constant += c * offset.derivative(*order);
                }
                Ok((row, constant))
            }
            LinearFunctional::Integral { lo, hi } => {
                if basis.dim() != 1 {
                    return Err(Error::UnsupportedConfiguration(
                        "integral functionals need a 1D basis".into(),
                    ));
                }
                // Exact for polynomials of degree below 2 * points.
                let points = basis.len() / 2 + 2;
                let (nodes, weights) = gauss_legendre(points);
                let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
                let mut row = vec![0.0; basis.len()];
                for (x, w) in nodes.iter().zip(&weights) {
                    let r = basis.row(&[mid + half * x], DerivOrder::VALUE)?;
                    for (acc, v) in row.iter_mut().zip(r) {
                        *acc += half * w * v;
                    }
                }
                Ok((row, offset.value() * (hi - lo)))
            }
        }
    }

    pub fn eval(&self, x: &SeriesState) -> Result<f64> {
        let (row, c) = self.series_row(x.basis(), x.offset())?;
        Ok(c + dot(&row, x.coeffs()))
    }
}

impl TryFrom<&Functional> for LinearFunctional {
    type Error = Error;

    fn try_from(f: &Functional) -> Result<Self> {
        match f {
            Functional::PointEval { t } => Ok(LinearFunctional::point(t.clone())),
            Functional::DerivEval { t, order } => Ok(LinearFunctional::Pointwise {
                t: t.clone(),
                terms: vec![(1.0, *order)],
            }),
            Functional::PdeInterior { t, kappa } => Ok(LinearFunctional::Pointwise {
                t: t.clone(),
                terms: (0..t.len())
                    .map(|axis| (-kappa, DerivOrder::along(axis, 2)))
                    .collect(),
            }),
            Functional::NeumannBoundary { t, axis, sign } => Ok(LinearFunctional::Pointwise {
                t: t.clone(),
                terms: vec![(*sign, DerivOrder::along(*axis, 1))],
            }),
            Functional::OdeResidualPainleve { .. } => Err(Error::Linearity(format!(
                "{} cannot be used for Gaussian conditioning",
                f.kind_name()
            ))),
        }
    }
}

/// Converts every functional of `op`, failing on the first nonlinear one.
pub fn linearize(op: &InformationOperator) -> Result<Vec<LinearFunctional>> {
    op.functionals.iter().map(LinearFunctional::try_from).collect()
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// Covariance family of the Gaussian prior.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelKind {
    /// `min(t, t')` on `t, t' >= 0`.
    WienerMin,
    /// Once-integrated Wiener process, `min^2 (3 max - min) / 6`.
    IntegratedWiener,
    /// `variance * exp(-|t - t'|^2 / (2 l^2))` in any dimension.
    SquaredExp { lengthscale: f64, variance: f64 },
    /// Finite-rank kernel `sum_i gamma_i^2 phi_i(t) phi_i(t')` of a Gaussian
    /// series prior.
    Series { basis: Arc<BasisSet>, gammas: Vec<f64> },
}

/// Constant prior mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanFunction {
    #[default]
    Zero,
    Constant(f64),
}

/// Gaussian process prior plus optional observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub mean: MeanFunction,
    /// Variance of independent Gaussian noise on each observation.
    pub noise_variance: f64,
}

impl KernelSpec {
    pub fn wiener() -> Self {
        Self::from_kind(KernelKind::WienerMin)
    }

    pub fn integrated_wiener() -> Self {
        Self::from_kind(KernelKind::IntegratedWiener)
    }

    pub fn squared_exp(lengthscale: f64) -> Result<Self> {
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(invalid("lengthscale", format!("must be positive, got {lengthscale}")));
        }
        Ok(Self::from_kind(KernelKind::SquaredExp {
            lengthscale,
            variance: 1.0,
        }))
    }

    /// The covariance of `sum_i gamma_i xi_i phi_i` with standard Gaussian `xi_i`.
    pub fn series(basis: Arc<BasisSet>, gammas: Vec<f64>, offset: Offset) -> Result<Self> {
        if gammas.len() != basis.len() {
            return Err(Error::Dimension(format!(
                "{} scales for a basis of size {}",
                gammas.len(),
                basis.len()
            )));
        }
        Ok(Self {
            kind: KernelKind::Series { basis, gammas },
            mean: match offset {
                Offset::Zero => MeanFunction::Zero,
                Offset::Constant(c) => MeanFunction::Constant(c),
            },
            noise_variance: 0.0,
        })
    }

    fn from_kind(kind: KernelKind) -> Self {
        Self {
            kind,
            mean: MeanFunction::Zero,
            noise_variance: 0.0,
        }
    }

    pub fn with_mean(mut self, mean: MeanFunction) -> Self {
        self.mean = mean;
        self
    }

    pub fn with_noise(mut self, variance: f64) -> Self {
        self.noise_variance = variance;
        self
    }

    /// Prior mean of `L x`.
    pub fn mean_of(&self, l: &LinearFunctional) -> f64 {
        let c = match self.mean {
            MeanFunction::Zero => return 0.0,
            MeanFunction::Constant(c) => c,
        };
        match l {
            LinearFunctional::Pointwise { terms, .. } => terms
                .iter()
                .filter(|(_, o)| o.total() == 0)
                .map(|(w, _)| w * c)
                .sum(),
            LinearFunctional::Integral { lo, hi } => c * (hi - lo),
        }
    }

    /// Prior covariance `Cov(L_a x, L_b x)`.
    pub fn cov(&self, a: &LinearFunctional, b: &LinearFunctional) -> Result<f64> {
        match &self.kind {
            KernelKind::Series { basis, gammas } => {
                let (ra, _) = a.series_row(basis, Offset::Zero)?;
                let (rb, _) = b.series_row(basis, Offset::Zero)?;
                Ok(ra
                    .iter()
                    .zip(&rb)
                    .zip(gammas)
                    .map(|((x, y), g)| g * g * x * y)
                    .sum())
            }
            KernelKind::SquaredExp {
                lengthscale,
                variance,
            } => squared_exp_cov(*lengthscale, *variance, a, b),
            KernelKind::WienerMin | KernelKind::IntegratedWiener => {
                if a.max_order() > 0 || b.max_order() > 0 {
                    return Err(Error::UnsupportedConfiguration(
                        "Wiener-type kernels support values and integrals only".into(),
                    ));
                }
                Ok(self.piecewise_cov(a, b))
            }
        }
    }

    fn point_kernel(&self, s: f64, t: f64) -> f64 {
        match self.kind {
            KernelKind::WienerMin => s.min(t),
            KernelKind::IntegratedWiener => {
                let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
                lo * lo * (3.0 * hi - lo) / 6.0
            }
            _ => unreachable!("only piecewise polynomial kernels"),
        }
    }

    /// Kernel integrated against `b` in its second argument, at point `s`.
    fn half_integrated(&self, s: f64, lo: f64, hi: f64) -> f64 {
        if let KernelKind::WienerMin = self.kind {
            if lo >= 0.0 {
                return wiener_point_integral(s, lo, hi);
            }
        }
        piecewise_integral(|t| self.point_kernel(s, t), lo, hi, &[s])
    }

    fn piecewise_cov(&self, a: &LinearFunctional, b: &LinearFunctional) -> f64 {
        use LinearFunctional::*;
        let pointwise = |l: &LinearFunctional| match l {
            Pointwise { t, terms } => (t[0], terms.iter().map(|(c, _)| c).sum::<f64>()),
            Integral { .. } => unreachable!(),
        };
        match (a, b) {
            (Pointwise { .. }, Pointwise { .. }) => {
                let (s, ca) = pointwise(a);
                let (t, cb) = pointwise(b);
                ca * cb * self.point_kernel(s, t)
            }
            (Pointwise { .. }, Integral { lo, hi }) | (Integral { lo, hi }, Pointwise { .. }) => {
                let p = if matches!(a, Pointwise { .. }) { a } else { b };
                let (s, c) = pointwise(p);
                c * self.half_integrated(s, *lo, *hi)
            }
            (Integral { lo: a0, hi: a1 }, Integral { lo: b0, hi: b1 }) => {
                if let KernelKind::WienerMin = self.kind {
                    if a0 == b0 && a1 == b1 && *a0 >= 0.0 {
                        return wiener_double_integral(*a0, *a1);
                    }
                }
                piecewise_integral(|s| self.half_integrated(s, *b0, *b1), *a0, *a1, &[*b0, *b1])
            }
        }
    }
}

/// `int_lo^hi min(s, t) dt` for `0 <= lo`.
fn wiener_point_integral(s: f64, lo: f64, hi: f64) -> f64 {
    if s <= lo {
        s * (hi - lo)
    } else if s >= hi {
        0.5 * (hi * hi - lo * lo)
    } else {
        0.5 * (s * s - lo * lo) + s * (hi - s)
    }
}

/// `int int_{[lo,hi]^2} min(s, t) ds dt` for `0 <= lo`.
fn wiener_double_integral(lo: f64, hi: f64) -> f64 {
    -(hi.powi(3) - lo.powi(3)) / 6.0 + 0.5 * hi * (hi * hi - lo * lo) - 0.5 * lo * lo * (hi - lo)
}

/// Gauss-Legendre integral of a function that is polynomial of low degree
/// between the given breakpoints.
fn piecewise_integral(f: impl Fn(f64) -> f64, lo: f64, hi: f64, breaks: &[f64]) -> f64 {
    let mut cuts = vec![lo, hi];
    cuts.extend(breaks.iter().copied().filter(|&b| b > lo && b < hi));
    cuts.sort_by(|a, b| a.partial_cmp(b).expect("finite breakpoints"));
    let (nodes, weights) = gauss_legendre(6);
    cuts.windows(2)
        .map(|w| {
            let (mid, half) = (0.5 * (w[0] + w[1]), 0.5 * (w[1] - w[0]));
            nodes
                .iter()
                .zip(&weights)
                .map(|(x, wt)| half * wt * f(mid + half * x))
                .sum::<f64>()
        })
        .sum()
}

/// Probabilists' Hermite polynomial `He_k(x)`.
fn hermite(k: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if k == 0 {
        return 1.0;
    }
    for j in 1..k {
        let next = x * cur - j as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// `d^a/dt^a d^b/dt'^b exp(-(t - t')^2 / (2 l^2))` at `r = t - t'`.
fn squared_exp_axis(r: f64, l: f64, a: usize, b: usize) -> f64 {
    let x = r / l;
    let k = a + b;
    let sign = if b % 2 == 0 { 1.0 } else { -1.0 };
    sign * (-1.0 / l).powi(k as i32) * hermite(k, x) * (-0.5 * x * x).exp()
}

fn squared_exp_cov(
    l: f64,
    variance: f64,
    a: &LinearFunctional,
    b: &LinearFunctional,
) -> Result<f64> {
    match (a, b) {
        (
            LinearFunctional::Pointwise { t: s, terms: ta },
            LinearFunctional::Pointwise { t, terms: tb },
        ) => {
            if s.len() != t.len() {
                return Err(Error::Dimension("functionals on different domains".into()));
            }
            let mut total = 0.0;
            for (ca, oa) in ta {
                for (cb, ob) in tb {
                    let mut prod = 1.0;
                    for axis in 0..s.len() {
                        prod *= squared_exp_axis(s[axis] - t[axis], l, oa.0[axis], ob.0[axis]);
                    }
                    total += ca * cb * prod;
                }
            }
            Ok(variance * total)
        }
        _ => {
            // Integrals by composite Gauss-Legendre on the smooth kernel.
            let quad = |lo: f64, hi: f64, f: &dyn Fn(f64) -> Result<f64>| -> Result<f64> {
                let panels = 64;
                let (nodes, weights) = gauss_legendre(8);
                let h = (hi - lo) / panels as f64;
                let mut acc = 0.0;
                for p in 0..panels {
                    let mid = lo + (p as f64 + 0.5) * h;
                    for (x, w) in nodes.iter().zip(&weights) {
                        acc += 0.5 * h * w * f(mid + 0.5 * h * x)?;
                    }
                }
                Ok(acc)
            };
            match (a, b) {
                (LinearFunctional::Integral { lo, hi }, other)
                | (other, LinearFunctional::Integral { lo, hi }) => quad(*lo, *hi, &|t| {
                    squared_exp_cov(l, variance, &LinearFunctional::point_1d(t), other)
                }),
                _ => unreachable!(),
            }
        }
    }
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let step = p / dp;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

// ---------------------------------------------------------------------------
// Conditioning
// ---------------------------------------------------------------------------

/// Multivariate Gaussian over query functionals.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianPosterior {
    pub fn scalar(mean: f64, variance: f64) -> Self {
        Self {
            mean: DVector::from_element(1, mean),
            covariance: DMatrix::from_element(1, 1, variance),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().copied().collect()
    }

    pub fn std_devs(&self) -> Vec<f64> {
        self.variances().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

pub fn gram(kernel: &KernelSpec, fs: &[LinearFunctional]) -> Result<DMatrix<f64>> {
    let n = fs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.cov(&fs[i], &fs[j])?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

pub fn cross_gram(
    kernel: &KernelSpec,
    rows: &[LinearFunctional],
    cols: &[LinearFunctional],
) -> Result<DMatrix<f64>> {
    let mut g = DMatrix::zeros(rows.len(), cols.len());
    for (i, r) in rows.iter().enumerate() {
        for (j, c) in cols.iter().enumerate() {
            g[(i, j)] = kernel.cov(r, c)?;
        }
    }
    Ok(g)
}

/// Adds noise and the relative nugget, then factorizes.
pub(crate) fn factorize(kernel: &KernelSpec, mut k: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = k.nrows();
    for i in 0..n {
        k[(i, i)] += kernel.noise_variance;
    }
    let nugget = NUGGET * k.trace() / n as f64;
    for i in 0..n {
        k[(i, i)] += nugget;
    }
    let probe = k.clone();
    k.cholesky().ok_or_else(|| {
        let eig = probe.symmetric_eigenvalues();
        let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        Error::Conditioning {
            size: n,
            condition_estimate: max / min,
        }
    })
}

/// Posterior over `queries` given `L_i x = a_i` for the observation functionals.
pub fn condition(
    kernel: &KernelSpec,
    observations: &[LinearFunctional],
    values: &[f64],
    queries: &[LinearFunctional],
) -> Result<GaussianPosterior> {
    if observations.len() != values.len() {
        return Err(Error::Dimension(format!(
            "{} observations but {} values",
            observations.len(),
            values.len()
        )));
    }
    let prior_mean = DVector::from_iterator(queries.len(), queries.iter().map(|q| kernel.mean_of(q)));
    let prior_cov = gram(kernel, queries)?;
    if observations.is_empty() {
        return Ok(GaussianPosterior {
            mean: prior_mean,
            covariance: prior_cov,
        });
    }
    let chol = factorize(kernel, gram(kernel, observations)?)?;
    let g = cross_gram(kernel, observations, queries)?;
    let centred = DVector::from_iterator(
        values.len(),
        observations
            .iter()
            .zip(values)
            .map(|(o, a)| a - kernel.mean_of(o)),
    );
    let mean = prior_mean + g.transpose() * chol.solve(&centred);
    let covariance = prior_cov - g.transpose() * chol.solve(&g);
    let covariance = 0.5 * (&covariance + covariance.transpose());
    Ok(GaussianPosterior { mean, covariance })
}

/// Conditioning on the (linear) information of `op`.
pub fn collocation_posterior(
    kernel: &KernelSpec,
    op: &InformationOperator,
    queries: &[LinearFunctional],
) -> Result<GaussianPosterior> {
    condition(kernel, &linearize(op)?, &op.observed, queries)
}

/// Posterior for `int_0^1 x(t) dt` given `x(t_i) = a_i`.
pub fn bq_posterior(kernel: &KernelSpec, knots: &[f64], values: &[f64]) -> Result<GaussianPosterior> {
    check_distinct(knots)?;
    let obs: Vec<_> = knots.iter().map(|&t| LinearFunctional::point_1d(t)).collect();
    condition(kernel, &obs, values, &[LinearFunctional::integral(0.0, 1.0)?])
}

/// Weights `w = K^{-1} z` of the linear rule given by the posterior mean.
pub fn bq_weights(kernel: &KernelSpec, knots: &[f64]) -> Result<Vec<f64>> {
    check_distinct(knots)?;
    let obs: Vec<_> = knots.iter().map(|&t| LinearFunctional::point_1d(t)).collect();
    let chol = factorize(kernel, gram(kernel, &obs)?)?;
    let z = cross_gram(kernel, &obs, &[LinearFunctional::integral(0.0, 1.0)?])?;
    Ok(chol.solve(&z).iter().copied().collect())
}

fn check_distinct(knots: &[f64]) -> Result<()> {
    let mut sorted = knots.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid("knots", "knots must be distinct"));
    }
    Ok(())
}

/// `log N(a; m_A, K_A)`, where `K_A` includes the observation noise.
pub fn gaussian_evidence(kernel: &KernelSpec, op: &InformationOperator) -> Result<f64> {
    let obs = linearize(op)?;
    let n = obs.len();
    if n == 0 {
        return Ok(0.0);
    }
    let chol = factorize(kernel, gram(kernel, &obs)?)?;
    let centred = DVector::from_iterator(
        n,
        obs.iter()
            .zip(&op.observed)
            .map(|(o, a)| a - kernel.mean_of(o)),
    );
    let quad = centred.dot(&chol.solve(&centred));
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (quad + log_det + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chebbasis::DomainMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn trapezium_knots(n: usize) -> Vec<f64> {
        (1..=n).map(|i| 2.0 * i as f64 / (2 * n + 1) as f64).collect()
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in 1..12 {
            let (x, w) = gauss_legendre(n);
            for deg in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg + 1) as f64 };
                assert!((q - exact).abs() < 1e-13, "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn wiener_closed_forms() {
        let k = KernelSpec::wiener();
        let int = LinearFunctional::integral(0.0, 1.0).unwrap();
        for t in [0.1, 0.5, 0.9] {
            let z = k.cov(&LinearFunctional::point_1d(t), &int).unwrap();
            assert!((z - (t - t * t / 2.0)).abs() < 1e-15);
        }
        assert!((k.cov(&int, &int).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // Generic piecewise quadrature agrees with the closed forms.
        let a = LinearFunctional::integral(0.0, 0.5).unwrap();
        let b = LinearFunctional::integral(0.5, 1.0).unwrap();
        let total = k.cov(&a, &a).unwrap() + 2.0 * k.cov(&a, &b).unwrap() + k.cov(&b, &b).unwrap();
        assert!((total - 1.0 / 3.0).abs() < 1e-14);
        let iw = KernelSpec::integrated_wiener();
        // int_0^1 int_0^1 k = 1/20 for the integrated Wiener kernel.
        assert!((iw.cov(&int, &int).unwrap() - 0.05).abs() < 1e-14);
    }

    #[test]
    fn trapezium_posterior() {
        let k = KernelSpec::wiener();
        for n in 1..=5 {
            let knots = trapezium_knots(n);
            let values: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
            let post = bq_posterior(&k, &knots, &values).unwrap();
            let h = 2.0 / (2 * n + 1) as f64;
            let mean = h * values.iter().sum::<f64>();
            let var = 1.0 / (3.0 * ((2 * n + 1) as f64).powi(2));
            assert!((post.mean[0] - mean).abs() < 1e-9);
            assert!((post.covariance[(0, 0)] - var).abs() < 1e-9);
            for w in bq_weights(&k, &knots).unwrap() {
                assert!((w - h).abs() < 1e-9);
            }
        }
        let one = bq_posterior(&k, &[2.0 / 3.0], &[0.9]).unwrap();
        assert!((one.mean[0] - 0.6).abs() < 1e-9);
        assert!((one.covariance[(0, 0)] - 1.0 / 27.0).abs() < 1e-9);
        let zero = bq_posterior(&k, &[0.2, 0.7], &[0.0, 0.0]).unwrap();
        assert_eq!(zero.mean[0], 0.0);
        assert!(bq_posterior(&k, &[0.2, 0.2], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn interpolation_and_prior_limits() {
        let k = KernelSpec::squared_exp(0.3).unwrap();
        let obs: Vec<_> = [0.1, 0.4, 0.8].iter().map(|&t| LinearFunctional::point_1d(t)).collect();
        let vals = [1.0, -0.5, 2.0];
        let post = condition(&k, &obs, &vals, &obs).unwrap();
        for i in 0..3 {
            assert!((post.mean[i] - vals[i]).abs() < 1e-6);
            assert!(post.covariance[(i, i)] < 1e-8);
        }
        let q = [LinearFunctional::point_1d(0.5)];
        let prior = condition(&k, &[], &[], &q).unwrap();
        assert_eq!(prior.mean[0], 0.0);
        assert_eq!(prior.covariance[(0, 0)], 1.0);
    }

    #[test]
    fn laplace_toy_recovers_linear_solution() {
        let k = KernelSpec::squared_exp(0.5).unwrap();
        let mut fs = vec![Functional::point_1d(0.0), Functional::point_1d(1.0)];
        let mut a = vec![0.0, 1.0];
        for i in 1..=5 {
            fs.push(Functional::deriv_1d(i as f64 / 6.0, 2));
            a.push(0.0);
        }
        let op = InformationOperator::new(fs, a).unwrap();
        let post = collocation_posterior(&k, &op, &[LinearFunctional::point_1d(0.5)]).unwrap();
        assert!((post.mean[0] - 0.5).abs() < 0.05, "{}", post.mean[0]);
        assert!(post.covariance[(0, 0)] <= 1.0 + 1e-10);
    }

    #[test]
    fn nonlinear_information_rejected() {
        let k = KernelSpec::squared_exp(1.0).unwrap();
        let op = InformationOperator::new(vec![Functional::OdeResidualPainleve { t: 1.0 }], vec![0.0])
            .unwrap();
        assert!(matches!(
            collocation_posterior(&k, &op, &[]),
            Err(Error::Linearity(_))
        ));
    }

    #[test]
    fn singular_gram_is_reported() {
        // Two observations of the same value at a kernel with zero variance there.
        let k = KernelSpec::wiener();
        let obs = [LinearFunctional::point_1d(0.0), LinearFunctional::point_1d(0.0)];
        let err = condition(&k, &obs, &[0.0, 0.0], &[]).unwrap_err();
        assert!(matches!(err, Error::Conditioning { size: 2, .. }));
    }

    #[test]
    fn squared_exp_derivatives_match_finite_differences() {
        let l = 0.7;
        let h = 1e-4;
        let f = |s: f64, t: f64| (-(s - t).powi(2) / (2.0 * l * l)).exp();
        let (s, t) = (0.3, -0.45);
        // d/ds d/dt
        let fd11 = (f(s + h, t + h) - f(s + h, t - h) - f(s - h, t + h) + f(s - h, t - h)) / (4.0 * h * h);
        assert!((squared_exp_axis(s - t, l, 1, 1) - fd11).abs() < 1e-6);
        // d^2/ds^2 d^2/dt^2 via differences of the analytic (2,0) entry
        let g = |s: f64, t: f64| squared_exp_axis(s - t, l, 2, 0);
        let fd22 = (g(s, t + h) - 2.0 * g(s, t) + g(s, t - h)) / (h * h);
        assert!((squared_exp_axis(s - t, l, 2, 2) - fd22).abs() < 1e-4);
        let fd21 = -(g(s, t + h) - g(s, t - h)) / (2.0 * h) * -1.0;
        assert!((squared_exp_axis(s - t, l, 2, 1) - fd21).abs() < 1e-6);
    }

    #[test]
    fn series_kernel_matches_direct_covariance() {
        let basis = Arc::new(BasisSet::chebyshev_1d(5, DomainMap::interval(0.0, 1.0).unwrap()).unwrap());
        let gammas: Vec<f64> = (0..6).map(|i| 1.0 / (1.0 + i as f64).powi(2)).collect();
        let k = KernelSpec::series(basis.clone(), gammas.clone(), Offset::Zero).unwrap();
        let a = LinearFunctional::point_1d(0.3);
        let b = LinearFunctional::Pointwise {
            t: vec![0.8],
            terms: vec![(1.0, DerivOrder::along(0, 2))],
        };
        let ra = basis.row(&[0.3], DerivOrder::VALUE).unwrap();
        let rb = basis.row(&[0.8], DerivOrder::along(0, 2)).unwrap();
        let direct: f64 = (0..6).map(|i| gammas[i].powi(2) * ra[i] * rb[i]).sum();
        assert!((k.cov(&a, &b).unwrap() - direct).abs() < 1e-12);
        let int = LinearFunctional::integral(0.0, 1.0).unwrap();
        // The integral row of phi_0 is sqrt(1/pi) * 1.
        let (row, _) = int.series_row(&basis, Offset::Zero).unwrap();
        assert!((row[0] - 1.0 / std::f64::consts::PI.sqrt()).abs() < 1e-14);
        // int_0^1 T_2(2t - 1) dt = -1/3
        assert!((row[2] + (2.0 / std::f64::consts::PI).sqrt() / 3.0).abs() < 1e-14);
    }

    #[test]
    fn evidence_examples() {
        let k = KernelSpec::squared_exp(0.4).unwrap();
        let op = InformationOperator::new(vec![Functional::point_1d(0.2)], vec![0.0]).unwrap();
        let e0 = gaussian_evidence(&k, &op).unwrap();
        let v = 1.0 + NUGGET;
        assert!((e0 + 0.5 * (2.0 * std::f64::consts::PI * v).ln()).abs() < 1e-12);
        let mut last = e0;
        for a in [0.5, 1.0, 2.0] {
            let op = InformationOperator::new(vec![Functional::point_1d(0.2)], vec![a]).unwrap();
            let e = gaussian_evidence(&k, &op).unwrap();
            assert!(e < last);
            last = e;
        }
    }

    #[test]
    fn evidence_matches_kernel_density_estimate() {
        // 1D pushforward: A x = x(0.3) under the series prior.
        let basis = Arc::new(BasisSet::chebyshev_1d(4, DomainMap::interval(0.0, 1.0).unwrap()).unwrap());
        let gammas: Vec<f64> = (0..5).map(|i| 0.8 / (1.0 + i as f64).powi(2)).collect();
        let k = KernelSpec::series(basis.clone(), gammas.clone(), Offset::Zero).unwrap();
        let a = 0.25;
        let op = InformationOperator::new(vec![Functional::point_1d(0.3)], vec![a]).unwrap();
        let exact = gaussian_evidence(&k, &op).unwrap();
        let row = basis.row(&[0.3], DerivOrder::VALUE).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1_000_000;
        let bw = 0.01;
        let mut acc = 0.0;
        for _ in 0..n {
            let y: f64 = (0..5)
                .map(|i| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    gammas[i] * z * row[i]
                })
                .sum();
            let d = (y - a) / bw;
            acc += (-0.5 * d * d).exp();
        }
        let kde = acc / (n as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
        assert!((kde.ln() - exact).abs() < 0.05, "{} vs {}", kde.ln(), exact);
    }

    #[test]
    fn information_never_increases_variance() {
        let k = KernelSpec::squared_exp(0.25).unwrap();
        let q: Vec<_> = (0..11).map(|i| LinearFunctional::point_1d(i as f64 / 10.0)).collect();
        let mut obs = Vec::new();
        let mut vals = Vec::new();
        let mut prev = condition(&k, &obs, &vals, &q).unwrap().variances();
        for t in [0.05, 0.5, 0.33, 0.91, 0.72] {
            obs.push(LinearFunctional::point_1d(t));
            vals.push(t.sin());
            let cur = condition(&k, &obs, &vals, &q).unwrap().variances();
            for (c, p) in cur.iter().zip(&prev) {
                assert!(*c <= p + 1e-10);
            }
            prev = cur;
        }
    }
}
