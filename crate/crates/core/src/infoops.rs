//! Information operators: scalar functionals of a series, their coefficient
//! Jacobians, stacked operators with observed values, the threshold map and
//! inequality constraints.
//!
//! [`InformationOperator`] is the serializable description. Sampling code
//! works with [`CompiledOperator`], which caches the basis rows at every
//! design point so that evaluation costs one dot product per functional.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::chebbasis::{dot, BasisSet, DerivOrder, DomainMap, Offset, SeriesState};
use crate::error::{invalid, Error, Result};

/// Default threshold `lambda_max` on `|A(x)|`.
pub const DEFAULT_LAMBDA_MAX: f64 = 1e6;

// ---------------------------------------------------------------------------
// Functionals
// ---------------------------------------------------------------------------

/// A scalar functional of the unknown function, with its evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Functional {
    /// `x(t)`.
    PointEval { t: Vec<f64> },
    /// A partial derivative of `x` at `t`.
    DerivEval { t: Vec<f64>, order: DerivOrder },
    /// `x''(t) - x(t)^2`.
    OdeResidualPainleve { t: f64 },
    /// `-kappa * laplacian(x)(t)`.
    PdeInterior { t: Vec<f64>, kappa: f64 },
    /// `sign * dx/dt_axis (t)` with `sign` in `{-1, +1}`.
    NeumannBoundary { t: Vec<f64>, axis: usize, sign: f64 },
}

impl Functional {
    pub fn point_1d(t: f64) -> Self {
        Functional::PointEval { t: vec![t] }
    }

    pub fn deriv_1d(t: f64, k: usize) -> Self {
        Functional::DerivEval {
            t: vec![t],
            order: DerivOrder::along(0, k),
        }
    }

    pub fn point(&self) -> Vec<f64> {
        match self {
            Functional::PointEval { t }
            | Functional::DerivEval { t, .. }
            | Functional::PdeInterior { t, .. }
            | Functional::NeumannBoundary { t, .. } => t.clone(),
            Functional::OdeResidualPainleve { t } => vec![*t],
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, Functional::OdeResidualPainleve { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Functional::PointEval { .. } => "point_eval",
            Functional::DerivEval { .. } => "deriv_eval",
            Functional::OdeResidualPainleve { .. } => "ode_residual_painleve",
            Functional::PdeInterior { .. } => "pde_interior",
            Functional::NeumannBoundary { .. } => "neumann_boundary",
        }
    }

    /// Checks point placement and kind-specific parameters against `domain`.
    pub fn validate(&self, domain: &DomainMap) -> Result<()> {
        let t = self.point();
        if !domain.contains(&t) {
            return Err(invalid(
                "functional",
                format!("{} point {:?} lies outside the domain", self.kind_name(), t),
            ));
        }
        match self {
            Functional::OdeResidualPainleve { .. } if domain.dim() != 1 => {
                Err(invalid("functional", "ODE residual requires a 1D domain"))
            }
            Functional::PdeInterior { kappa, .. } if !(*kappa > 0.0 && kappa.is_finite()) => {
                Err(invalid("kappa", format!("must be positive, got {kappa}")))
            }
            Functional::NeumannBoundary { axis, sign, .. } => {
                if *axis >= domain.dim() {
                    Err(invalid("axis", format!("axis {axis} on a {}D domain", domain.dim())))
                } else if *sign != 1.0 && *sign != -1.0 {
                    Err(invalid("sign", format!("must be +1 or -1, got {sign}")))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Coefficient row `r` and offset part `c` such that the functional equals
    /// `c + r . u`. Errors for nonlinear kinds.
    pub fn linear_row(&self, basis: &BasisSet, offset: Offset) -> Result<(Vec<f64>, f64)> {
        match self {
            Functional::PointEval { t } => Ok((basis.row(t, DerivOrder::VALUE)?, offset.value())),
            Functional::DerivEval { t, order } => {
                Ok((basis.row(t, *order)?, offset.derivative(*order)))
            }
            Functional::PdeInterior { t, kappa } => {
                let row = basis.neg_laplacian_row(t)?;
                Ok((row.into_iter().map(|v| kappa * v).collect(), 0.0))
            }
            Functional::NeumannBoundary { t, axis, sign } => {
                let row = basis.row(t, DerivOrder::along(*axis, 1))?;
                Ok((row.into_iter().map(|v| sign * v).collect(), 0.0))
            }
            Functional::OdeResidualPainleve { .. } => Err(Error::Linearity(format!(
                "{} is nonlinear",
                self.kind_name()
            ))),
        }
    }

    fn compile(&self, basis: &BasisSet, offset: Offset) -> Result<CompiledFunctional> {
        match self {
            Functional::OdeResidualPainleve { t } => Ok(CompiledFunctional::Painleve {
                value_row: basis.row(&[*t], DerivOrder::VALUE)?,
                second_row: basis.row(&[*t], DerivOrder::along(0, 2))?,
                offset: offset.value(),
            }),
            _ => {
                let (row, constant) = self.linear_row(basis, offset)?;
                Ok(CompiledFunctional::Linear { row, constant })
            }
        }
    }

    pub fn eval(&self, x: &SeriesState) -> Result<f64> {
        Ok(self.compile(x.basis(), x.offset())?.value(x.coeffs()))
    }

    pub fn jacobian_row(&self, x: &SeriesState) -> Result<Vec<f64>> {
        let c = self.compile(x.basis(), x.offset())?;
        let mut row = vec![0.0; x.coeffs().len()];
        c.add_scaled_gradient(x.coeffs(), 1.0, &mut row);
        Ok(row)
    }
}

/// A functional with its basis rows cached.
#[derive(Debug, Clone, PartialEq)]
pub enum CompiledFunctional {
    Linear {
        row: Vec<f64>,
        constant: f64,
    },
    Painleve {
        value_row: Vec<f64>,
        second_row: Vec<f64>,
        offset: f64,
    },
}

impl CompiledFunctional {
    #[inline]
    pub fn value(&self, u: &[f64]) -> f64 {
        match self {
            CompiledFunctional::Linear { row, constant } => constant + dot(row, u),
            CompiledFunctional::Painleve {
                value_row,
                second_row,
                offset,
            } => {
                let x = offset + dot(value_row, u);
                dot(second_row, u) - x * x
            }
        }
    }

    /// `out += scale * d(value)/du`.
    #[inline]
    pub fn add_scaled_gradient(&self, u: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            CompiledFunctional::Linear { row, .. } => {
                for (o, r) in out.iter_mut().zip(row) {
                    *o += scale * r;
                }
            }
            CompiledFunctional::Painleve {
                value_row,
                second_row,
                offset,
            } => {
                let x = offset + dot(value_row, u);
                for ((o, d2), v) in out.iter_mut().zip(second_row).zip(value_row) {
                    *o += scale * (d2 - 2.0 * x * v);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Operators
// ---------------------------------------------------------------------------

/// Stacked functionals `A` with observed values `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformationOperator {
    pub functionals: Vec<Functional>,
    pub observed: Vec<f64>,
    /// Threshold `lambda_max`; `None` disables the threshold map.
    #[serde(default = "default_threshold")]
    pub threshold: Option<f64>,
}

fn default_threshold() -> Option<f64> {
    Some(DEFAULT_LAMBDA_MAX)
}

impl InformationOperator {
    /// Operator with the default threshold.
    pub fn new(functionals: Vec<Functional>, observed: Vec<f64>) -> Result<Self> {
        let op = Self {
            functionals,
            observed,
            threshold: default_threshold(),
        };
        op.check_shape()?;
        Ok(op)
    }

    pub fn with_threshold(mut self, threshold: Option<f64>) -> Result<Self> {
        self.threshold = threshold;
        self.check_shape()?;
        Ok(self)
    }

    pub fn empty() -> Self {
        Self {
            functionals: Vec::new(),
            observed: Vec::new(),
            threshold: default_threshold(),
        }
    }

    fn check_shape(&self) -> Result<()> {
        if self.functionals.len() != self.observed.len() {
            return Err(Error::Dimension(format!(
                "{} functionals but {} observed values",
                self.functionals.len(),
                self.observed.len()
            )));
        }
        if let Some(l) = self.threshold {
            if !(l > 0.0) {
                return Err(invalid("threshold", format!("must be positive, got {l}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self, domain: &DomainMap) -> Result<()> {
        self.check_shape()?;
        self.functionals.iter().try_for_each(|f| f.validate(domain))
    }

    /// Number of scalar observations `n`.
    pub fn len(&self) -> usize {
        self.functionals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functionals.is_empty()
    }

    pub fn is_linear(&self) -> bool {
        self.functionals.iter().all(Functional::is_linear)
    }

    /// Identifies the information `(A, a)`; estimates with different
    /// fingerprints are not comparable.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        serde_json::to_string(&self.functionals)
            .expect("functionals serialize")
            .hash(&mut h);
        for a in &self.observed {
            a.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn compile(&self, basis: &BasisSet, offset: Offset) -> Result<CompiledOperator> {
        self.check_shape()?;
        Ok(CompiledOperator {
            entries: self
                .functionals
                .iter()
                .map(|f| f.compile(basis, offset))
                .collect::<Result<_>>()?,
            observed: self.observed.clone(),
            threshold: self.threshold,
            fingerprint: self.fingerprint(),
        })
    }

    /// `A(x) - a` with the threshold map applied to `A(x)`.
    pub fn residual(&self, x: &SeriesState) -> Result<Vec<f64>> {
        Ok(self.compile(x.basis(), x.offset())?.residual(x.coeffs()))
    }

    pub fn residual_norm_and_grad(&self, x: &SeriesState) -> Result<(f64, Vec<f64>)> {
        self.compile(x.basis(), x.offset())?
            .residual_norm_and_grad(x.coeffs())
    }
}

/// Rescales `values` to norm `lambda_max` when their norm exceeds it.
pub fn threshold_map(values: &mut [f64], lambda_max: Option<f64>) -> bool {
    let Some(l) = lambda_max else {
        return false;
    };
    let norm = norm2(values);
    if norm > l {
        let s = l / norm;
        values.iter_mut().for_each(|v| *v *= s);
        true
    } else {
        false
    }
}

#[inline]
pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// [`InformationOperator`] bound to a basis.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledOperator {
    entries: Vec<CompiledFunctional>,
    observed: Vec<f64>,
    threshold: Option<f64>,
    fingerprint: u64,
}

impl CompiledOperator {
    /// Fingerprint of the operator this was compiled from.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn observed(&self) -> &[f64] {
        &self.observed
    }

    pub fn entries(&self) -> &[CompiledFunctional] {
        &self.entries
    }

    /// `A(x)` without thresholding.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.entries.iter().map(|e| e.value(u)).collect()
    }

    pub fn residual(&self, u: &[f64]) -> Vec<f64> {
        let mut v = self.apply(u);
        threshold_map(&mut v, self.threshold);
        v.iter_mut()
            .zip(&self.observed)
            .for_each(|(x, a)| *x -= a);
        v
    }

    pub fn residual_norm(&self, u: &[f64]) -> f64 {
        norm2(&self.residual(u))
    }

    /// Whether the threshold map rescales `A(x)` at `u`.
    pub fn threshold_active(&self, u: &[f64]) -> bool {
        match self.threshold {
            Some(l) => norm2(&self.apply(u)) > l,
            None => false,
        }
    }

    /// `(|A(x) - a|, grad_u |A(x) - a|)`; the gradient is zero at an exact fit.
    pub fn residual_norm_and_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let values = self.apply(u);
        if let Some(l) = self.threshold {
            let norm = norm2(&values);
            if norm > l {
                return Err(Error::ThresholdGradient {
                    norm,
                    lambda_max: l,
                });
            }
        }
        let res: Vec<f64> = values
            .iter()
            .zip(&self.observed)
            .map(|(v, a)| v - a)
            .collect();
        let r = norm2(&res);
        let mut grad = vec![0.0; u.len()];
        if r > 0.0 {
            for (e, ri) in self.entries.iter().zip(&res) {
                e.add_scaled_gradient(u, ri / r, &mut grad);
            }
        }
        Ok((r, grad))
    }

    /// `(|A(x) - a|^2, grad_u |A(x) - a|^2)`, smooth everywhere.
    pub fn residual_sq_and_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let values = self.apply(u);
        if let Some(l) = self.threshold {
            let norm = norm2(&values);
            if norm > l {
                return Err(Error::ThresholdGradient {
                    norm,
                    lambda_max: l,
                });
            }
        }
        let mut grad = vec![0.0; u.len()];
        let mut sq = 0.0;
        for ((e, v), a) in self.entries.iter().zip(&values).zip(&self.observed) {
            let ri = v - a;
            sq += ri * ri;
            e.add_scaled_gradient(u, 2.0 * ri, &mut grad);
        }
        Ok((sq, grad))
    }
}

// ---------------------------------------------------------------------------
// Inequality constraints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `value <= 0`.
    NonPositive,
    /// `value >= 0`.
    NonNegative,
}

/// A weak inequality on a functional, used as a hard indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityConstraint {
    pub functional: Functional,
    pub direction: Direction,
}

impl InequalityConstraint {
    pub fn satisfied_by(&self, value: f64) -> bool {
        match self.direction {
            Direction::NonPositive => value <= 0.0,
            Direction::NonNegative => value >= 0.0,
        }
    }

    pub fn compile(&self, basis: &BasisSet, offset: Offset) -> Result<CompiledConstraint> {
        Ok(CompiledConstraint {
            functional: self.functional.compile(basis, offset)?,
            direction: self.direction,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledConstraint {
    functional: CompiledFunctional,
    direction: Direction,
}

impl CompiledConstraint {
    pub fn holds(&self, u: &[f64]) -> bool {
        let v = self.functional.value(u);
        match self.direction {
            Direction::NonPositive => v <= 0.0,
            Direction::NonNegative => v >= 0.0,
        }
    }
}

/// True iff every constraint holds at `x`.
pub fn check_inequalities(cs: &[InequalityConstraint], x: &SeriesState) -> Result<bool> {
    for c in cs {
        if !c.satisfied_by(c.functional.eval(x)?) {
            return Ok(false);
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// Standard designs
// ---------------------------------------------------------------------------

/// Length of the Painleve interval `[0, 10]`.
pub const PAINLEVE_END: f64 = 10.0;

/// `x'' - x^2 = -t` at `m` equispaced points of `[0, 10]` together with
/// `x(0) = 0` and `x(10) = sqrt(10)`.
pub fn painleve_design(m: usize) -> Result<InformationOperator> {
    if m < 2 {
        return Err(invalid("m", "need at least two residual points"));
    }
    let mut functionals = Vec::with_capacity(m + 2);
    let mut observed = Vec::with_capacity(m + 2);
    for i in 0..m {
        let t = PAINLEVE_END * i as f64 / (m - 1) as f64;
        functionals.push(Functional::OdeResidualPainleve { t });
        observed.push(-t);
    }
    functionals.push(Functional::point_1d(0.0));
    observed.push(0.0);
    functionals.push(Functional::point_1d(PAINLEVE_END));
    observed.push(PAINLEVE_END.sqrt());
    InformationOperator::new(functionals, observed)
}

/// The inequality `x'(0) <= 0` selecting the negative Painleve branch.
pub fn painleve_negative_branch() -> InequalityConstraint {
    InequalityConstraint {
        functional: Functional::deriv_1d(0.0, 1),
        direction: Direction::NonPositive,
    }
}

/// Design for `-laplacian(x) = 0` on the unit square with `x = t_1` on
/// `t_2 = 0`, `x = 1 - t_1` on `t_2 = 1` and zero normal derivative on
/// `t_1 = 0, 1`.
///
/// For `n = (k + 2)^2` the layout is a centred `k x k` interior grid,
/// `k + 2` equispaced Dirichlet points on each Dirichlet edge and `k`
/// Neumann points on each side edge.
pub fn poisson_design(n: usize) -> Result<InformationOperator> {
    let root = (n as f64).sqrt().round() as usize;
    if root * root != n || root < 3 {
        return Err(invalid("n", format!("need a square n >= 9, got {n}")));
    }
    let k = root - 2;
    let mut functionals = Vec::with_capacity(n);
    let mut observed = Vec::with_capacity(n);
    let interior = |i: usize| i as f64 / (k + 1) as f64;
    for i in 1..=k {
        for j in 1..=k {
            functionals.push(Functional::PdeInterior {
                t: vec![interior(i), interior(j)],
                kappa: 1.0,
            });
            observed.push(0.0);
        }
    }
    for i in 1..=k + 2 {
        let t1 = i as f64 / (k + 3) as f64;
        functionals.push(Functional::PointEval { t: vec![t1, 0.0] });
        observed.push(t1);
        functionals.push(Functional::PointEval { t: vec![t1, 1.0] });
        observed.push(1.0 - t1);
    }
    for (edge, sign) in [(0.0, -1.0), (1.0, 1.0)] {
        for j in 1..=k {
            functionals.push(Functional::NeumannBoundary {
                t: vec![edge, interior(j)],
                axis: 0,
                sign,
            });
            observed.push(0.0);
        }
    }
    InformationOperator::new(functionals, observed)
}
