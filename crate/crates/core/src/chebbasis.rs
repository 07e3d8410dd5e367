//! Normalized Chebyshev bases on intervals and rectangles.
//!
//! Every basis function is `c_n T_n(s)` where `s` is the affine image of the
//! physical point in the reference interval `[-1, 1]`, `T_n` is the Chebyshev
//! polynomial of the first kind and `c_0 = 1/sqrt(pi)`, `c_n = sqrt(2/pi)`.
//! With these constants the family is orthonormal under the Chebyshev weight
//! `1/sqrt(1 - s^2)`. Tensor-product bases on rectangles use the per-axis
//! product and keep the triangle `j + k <= N_C`, ordered by total degree and
//! then lexicographically in `(j, k)`.
//!
//! Derivatives are analytic: `T_n' = n U_{n-1}` and `T_n'' = n U'_{n-1}` with
//! the second-kind recurrence, multiplied by the chain-rule factor
//! `2 / (upper - lower)` per differentiation.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Highest total derivative order supported by the basis.
pub const MAX_DERIVATIVE_ORDER: usize = 2;

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Normalization constant of the degree-`n` polynomial.
#[inline]
pub fn normalization(n: usize) -> f64 {
    if n == 0 {
        FRAC_1_SQRT_PI
    } else {
        SQRT_2_OVER_PI
    }
}

/// Affine map from a physical box onto the reference box `[-1, 1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMap {
    bounds: Vec<(f64, f64)>,
}

impl DomainMap {
    pub fn interval(lower: f64, upper: f64) -> Result<Self> {
        Self::from_bounds(vec![(lower, upper)])
    }

    pub fn rectangle(axis0: (f64, f64), axis1: (f64, f64)) -> Result<Self> {
        Self::from_bounds(vec![axis0, axis1])
    }

    pub fn from_bounds(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() || bounds.len() > 2 {
            return Err(invalid("domain", "only 1D and 2D domains are supported"));
        }
        for &(lo, hi) in &bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(invalid("domain", format!("require lower < upper, got [{lo}, {hi}]")));
            }
        }
        Ok(Self { bounds })
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn lower(&self, axis: usize) -> f64 {
        self.bounds[axis].0
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.bounds[axis].1
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    /// Reference coordinate of `t` along `axis`; the endpoints map to -1 and +1 exactly.
    #[inline]
    pub fn to_reference(&self, axis: usize, t: f64) -> f64 {
        let (lo, hi) = self.bounds[axis];
        ((t - lo) - (hi - t)) / (hi - lo)
    }

    /// Inverse of [`DomainMap::to_reference`].
    pub fn to_physical(&self, axis: usize, s: f64) -> f64 {
        let (lo, hi) = self.bounds[axis];
        lo + 0.5 * (s + 1.0) * (hi - lo)
    }

    /// Chain-rule factor `ds/dt` along `axis`.
    #[inline]
    pub fn scale(&self, axis: usize) -> f64 {
        let (lo, hi) = self.bounds[axis];
        2.0 / (hi - lo)
    }

    pub fn contains(&self, t: &[f64]) -> bool {
        t.len() == self.dim()
            && t
                .iter()
                .zip(&self.bounds)
                .all(|(&x, &(lo, hi))| x >= lo && x <= hi)
    }
}

/// Degree (1D) or degree pair (2D) identifying one basis function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BasisIndex {
    One(usize),
    Two(usize, usize),
}

impl BasisIndex {
    pub fn degrees(&self) -> [usize; 2] {
        match *self {
            BasisIndex::One(n) => [n, 0],
            BasisIndex::Two(j, k) => [j, k],
        }
    }

    pub fn total_degree(&self) -> usize {
        let [j, k] = self.degrees();
        j + k
    }
}

impl fmt::Display for BasisIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasisIndex::One(n) => write!(f, "{n}"),
            BasisIndex::Two(j, k) => write!(f, "({j},{k})"),
        }
    }
}

/// Per-axis derivative counts. In 1D only the first entry is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct DerivOrder(pub [usize; 2]);

impl DerivOrder {
    pub const VALUE: DerivOrder = DerivOrder([0, 0]);

    /// `k`-th derivative along a single axis.
    pub fn along(axis: usize, k: usize) -> Self {
        let mut o = [0, 0];
        o[axis] = k;
        DerivOrder(o)
    }

    pub fn total(&self) -> usize {
        self.0[0] + self.0[1]
    }

    fn check(&self, dim: usize) -> Result<()> {
        if self.total() > MAX_DERIVATIVE_ORDER {
            return Err(Error::UnsupportedOrder(self.total()));
        }
        if dim == 1 && self.0[1] != 0 {
            return Err(invalid("order", "second axis derivative requested on a 1D basis"));
        }
        Ok(())
    }
}

/// Value of a basis or series evaluation together with the domain flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    /// Set when the point lies outside the physical domain; the value is
    /// then the polynomial continuation.
    pub outside_domain: bool,
}

/// `c_n T_n^{(order)}(s)` for `n = 0..=n_max`, in reference coordinates.
pub fn chebyshev_table(s: f64, n_max: usize, order: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_max + 1];
    match order {
        0 => {
            let (mut prev, mut cur) = (1.0, s);
            out[0] = 1.0;
            for n in 1..=n_max {
                out[n] = cur;
                let next = 2.0 * s * cur - prev;
                prev = cur;
                cur = next;
            }
        }
        1 => {
            // T_n' = n U_{n-1}
            let (mut prev, mut cur) = (0.0, 1.0);
            for n in 1..=n_max {
                out[n] = n as f64 * cur;
                let next = 2.0 * s * cur - prev;
                prev = cur;
                cur = next;
            }
        }
        2 => {
            // T_n'' = n U'_{n-1}, U'_{k+1} = 2 U_k + 2 s U'_k - U'_{k-1}
            let (mut u_prev, mut u_cur) = (0.0, 1.0);
            let (mut du_prev, mut du_cur) = (0.0, 0.0);
            for n in 1..=n_max {
                out[n] = n as f64 * du_cur;
                let du_next = 2.0 * u_cur + 2.0 * s * du_cur - du_prev;
                let u_next = 2.0 * s * u_cur - u_prev;
                du_prev = du_cur;
                du_cur = du_next;
                u_prev = u_cur;
                u_cur = u_next;
            }
        }
        _ => unreachable!("derivative order checked by caller"),
    }
    for (n, v) in out.iter_mut().enumerate() {
        *v *= normalization(n);
    }
    out
}

/// An ordered set of normalized Chebyshev basis functions on a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    domain: DomainMap,
    indices: Vec<BasisIndex>,
}

impl BasisSet {
    /// Degrees `0..=degree` on an interval.
    pub fn chebyshev_1d(degree: usize, domain: DomainMap) -> Result<Self> {
        if domain.dim() != 1 {
            return Err(invalid("domain", "1D basis requires an interval"));
        }
        Ok(Self {
            domain,
            indices: (0..=degree).map(BasisIndex::One).collect(),
        })
    }

    /// Tensor-product triangle `j + k <= max_total_degree` on a rectangle.
    pub fn chebyshev_triangle(max_total_degree: usize, domain: DomainMap) -> Result<Self> {
        if domain.dim() != 2 {
            return Err(invalid("domain", "2D basis requires a rectangle"));
        }
        let mut indices = Vec::new();
        for total in 0..=max_total_degree {
            for j in 0..=total {
                indices.push(BasisIndex::Two(j, total - j));
            }
        }
        Ok(Self { domain, indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn domain(&self) -> &DomainMap {
        &self.domain
    }

    pub fn indices(&self) -> &[BasisIndex] {
        &self.indices
    }

    pub fn position(&self, index: BasisIndex) -> Option<usize> {
        self.indices.iter().position(|&i| i == index)
    }

    fn max_degree(&self, axis: usize) -> usize {
        self.indices
            .iter()
            .map(|i| i.degrees()[axis])
            .max()
            .unwrap_or(0)
    }

    /// Keeps the first `terms` functions.
    pub fn truncate(&self, terms: usize) -> Result<Self> {
        if terms > self.len() {
            return Err(Error::Range {
                requested: terms.saturating_sub(1),
                available: self.len().saturating_sub(1),
            });
        }
        Ok(Self {
            domain: self.domain.clone(),
            indices: self.indices[..terms].to_vec(),
        })
    }

    pub fn eval_basis(&self, index: BasisIndex, t: &[f64]) -> Result<Evaluation> {
        self.eval_basis_deriv(index, t, DerivOrder::VALUE)
    }

    pub fn eval_basis_deriv(
        &self,
        index: BasisIndex,
        t: &[f64],
        order: DerivOrder,
    ) -> Result<Evaluation> {
        if self.position(index).is_none() {
            return Err(Error::UnknownIndex(index.to_string()));
        }
        order.check(self.dim())?;
        self.check_point(t)?;
        let degrees = index.degrees();
        let mut value = 1.0;
        for axis in 0..self.dim() {
            let s = self.domain.to_reference(axis, t[axis]);
            let o = order.0[axis];
            let table = chebyshev_table(s, degrees[axis], o);
            value *= table[degrees[axis]] * self.domain.scale(axis).powi(o as i32);
        }
        Ok(Evaluation {
            value,
            outside_domain: !self.domain.contains(t),
        })
    }

    /// Values of every basis function (or the requested derivative) at `t`,
    /// in basis order.
    pub fn row(&self, t: &[f64], order: DerivOrder) -> Result<Vec<f64>> {
        order.check(self.dim())?;
        self.check_point(t)?;
        let tables: Vec<Vec<f64>> = (0..self.dim())
            .map(|axis| {
                let o = order.0[axis];
                let s = self.domain.to_reference(axis, t[axis]);
                let factor = self.domain.scale(axis).powi(o as i32);
                chebyshev_table(s, self.max_degree(axis), o)
                    .into_iter()
                    .map(|v| v * factor)
                    .collect()
            })
            .collect();
        Ok(self
            .indices
            .iter()
            .map(|idx| {
                let d = idx.degrees();
                tables
                    .iter()
                    .enumerate()
                    .map(|(axis, table)| table[d[axis]])
                    .product()
            })
            .collect())
    }

    /// Negative Laplacian `-(d^2/dt_0^2 + d^2/dt_1^2)` of every basis function.
    pub fn neg_laplacian_row(&self, t: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        for axis in 0..self.dim() {
            let r = self.row(t, DerivOrder::along(axis, 2))?;
            for (o, v) in out.iter_mut().zip(r) {
                *o -= v;
            }
        }
        Ok(out)
    }

    fn check_point(&self, t: &[f64]) -> Result<()> {
        if t.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "point has {} coordinates, basis is {}D",
                t.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Deterministic offset `x_0` added to the series.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Offset {
    #[default]
    Zero,
    Constant(f64),
}

impl Offset {
    pub fn value(&self) -> f64 {
        match *self {
            Offset::Zero => 0.0,
            Offset::Constant(c) => c,
        }
    }

    /// Derivative of the offset; zero for any positive order.
    pub fn derivative(&self, order: DerivOrder) -> f64 {
        if order.total() == 0 {
            self.value()
        } else {
            0.0
        }
    }
}

/// A truncated expansion `x = x_0 + sum_i u_i phi_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesState {
    basis: Arc<BasisSet>,
    offset: Offset,
    coeffs: Vec<f64>,
}

impl SeriesState {
    pub fn new(basis: Arc<BasisSet>, offset: Offset, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != basis.len() {
            return Err(Error::Dimension(format!(
                "{} coefficients for a basis of size {}",
                coeffs.len(),
                basis.len()
            )));
        }
        Ok(Self {
            basis,
            offset,
            coeffs,
        })
    }

    pub fn zeros(basis: Arc<BasisSet>, offset: Offset) -> Self {
        let n = basis.len();
        Self {
            basis,
            offset,
            coeffs: vec![0.0; n],
        }
    }

    pub fn basis(&self) -> &Arc<BasisSet> {
        &self.basis
    }

    pub fn offset(&self) -> Offset {
        self.offset
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    /// Truncation level `N` (the state holds `N + 1` coefficients).
    pub fn truncation(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    /// `x_0(t) + sum_i u_i phi_i(t)`.
    pub fn eval(&self, t: &[f64]) -> f64 {
        self.eval_deriv(t, DerivOrder::VALUE)
            .expect("value evaluation of a well-formed state")
    }

    pub fn eval_flagged(&self, t: &[f64]) -> Evaluation {
        Evaluation {
            value: self.eval(t),
            outside_domain: !self.basis.domain().contains(t),
        }
    }

    pub fn eval_deriv(&self, t: &[f64], order: DerivOrder) -> Result<f64> {
        let row = self.basis.row(t, order)?;
        Ok(self.offset.derivative(order) + dot(&row, &self.coeffs))
    }

    /// The projection `P_{N'}`: keeps `u_0..u_{N'}` and the matching basis prefix.
    pub fn project(&self, level: usize) -> Result<SeriesState> {
        if level > self.truncation() {
            return Err(Error::Range {
                requested: level,
                available: self.truncation(),
            });
        }
        if level == self.truncation() {
            return Ok(self.clone());
        }
        let basis = Arc::new(self.basis.truncate(level + 1)?);
        Ok(SeriesState {
            basis,
            offset: self.offset,
            coeffs: self.coeffs[..=level].to_vec(),
        })
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
