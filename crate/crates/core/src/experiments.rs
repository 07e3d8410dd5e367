//! Configuration schema and batch runners for the command-line tool.
//!
//! A run reads one JSON [`ExperimentConfig`], executes the named experiment
//! and writes up to three files into the output directory:
//!
//! * a samples CSV with header `sample_index,u_0,...,u_N` holding equally
//!   weighted coefficient vectors,
//! * a grid CSV with the evaluation point, posterior mean and pointwise
//!   standard deviation,
//! * a pretty-printed summary JSON with sorted keys.
//!
//! Numbers in CSV files use 17 significant digits so reruns can be compared
//! byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::chebbasis::{BasisSet, DerivOrder, DomainMap, Offset};
use crate::conjugate::{self, KernelSpec, LinearFunctional};
use crate::decision;
use crate::disintegration::{
    multinomial_resample, pt_nd, smc_nd, MalaConfig, RelaxationKernel, RelaxedTarget, Resampling,
    RungSummary, SamplerConfig, SamplerHistory, TemperatureSchedule,
};
use crate::error::{invalid, Error, Result};
use crate::evidence::{self, EvidenceEstimate};
use crate::infoops::{self, CompiledConstraint, InformationOperator, PAINLEVE_END};
use crate::pipeline::{self, CoherenceDeclaration, DistributedIntegration, ExecutionMode};
use crate::rng::{self, tag};
use crate::seriesprior::{PriorFamily, ScaleSequence, SeriesPrior};

pub const SCHEMA_VERSION: u32 = 1;

/// Grid resolution for one-dimensional experiments.
pub const PAINLEVE_GRID: usize = 201;
pub const QUADRATURE_GRID: usize = 101;
/// Points per axis of the Poisson evaluation grid.
pub const POISSON_GRID: usize = 21;

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Quadrature,
    Poisson,
    Painleve,
    PipelineDemo,
    Risk,
    Counterexample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub experiment: ExperimentKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub information: Option<InformationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrature: Option<QuadratureConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<PipelineDemoConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk: Option<RiskConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    /// Sampler settings applied by `--paper-scale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paper_scale: Option<SamplerOverrides>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub family: PriorFamily,
    pub scales: ScaleSequence,
    /// Constant offset `x_0`.
    #[serde(default)]
    pub offset: f64,
    pub basis: BasisConfig,
    /// When set, the model is also fitted under this family and the Bayes
    /// factor of `alternative` against `family` is reported.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternative: Option<PriorFamily>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisConfig {
    /// Normalized Chebyshev polynomials; `terms` coefficients.
    Chebyshev { terms: usize },
    /// Tensor products with total degree at most `max_total_degree`.
    Triangle { max_total_degree: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InformationConfig {
    /// Dimension of the information.
    pub n: usize,
    /// Enforce `x'(0) <= 0` (Painleve only).
    #[serde(default)]
    pub negative_branch: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Smc,
    Pt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    LogUniform { start: f64, end: f64, temperatures: usize },
    Explicit { deltas: Vec<f64> },
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<TemperatureSchedule> {
        match self {
            ScheduleConfig::LogUniform {
                start,
                end,
                temperatures,
            } => TemperatureSchedule::log_uniform(*start, *end, *temperatures),
            ScheduleConfig::Explicit { deltas } => TemperatureSchedule::explicit(deltas.clone()),
        }
    }
}

fn default_kernel() -> RelaxationKernel {
    RelaxationKernel::SquaredExponential
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerBlock {
    pub algorithm: Algorithm,
    #[serde(default = "default_kernel")]
    pub kernel: RelaxationKernel,
    pub schedule: ScheduleConfig,
    /// SMC ensemble size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    /// PT iterations, including burn-in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    /// PT burn-in; a tenth of the iterations when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    pub mala: MalaConfig,
    #[serde(default)]
    pub resampling: Resampling,
}

/// Replacement sampler settings; absent fields keep their values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    Wiener,
    IntegratedWiener,
}

impl KernelChoice {
    pub fn spec(self) -> KernelSpec {
        match self {
            KernelChoice::Wiener => KernelSpec::wiener(),
            KernelChoice::IntegratedWiener => KernelSpec::integrated_wiener(),
        }
    }
}

/// Test integrand on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Integrand {
    /// `sin(frequency * t)`.
    Sine { frequency: f64 },
    /// `sum_k coefficients[k] * t^k`.
    Polynomial { coefficients: Vec<f64> },
}

impl Integrand {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Integrand::Sine { frequency } => (frequency * t).sin(),
            Integrand::Polynomial { coefficients } => coefficients.iter().rev().fold(0.0, |acc, c| acc * t + c),
        }
    }

    /// Exact integral over `[0, 1]`.
    pub fn integral(&self) -> f64 {
        match self {
            Integrand::Sine { frequency } if *frequency == 0.0 => 0.0,
            Integrand::Sine { frequency } => (1.0 - frequency.cos()) / frequency,
            Integrand::Polynomial { coefficients } => {
                coefficients.iter().enumerate().map(|(k, c)| c / (k + 1) as f64).sum()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotPlacement {
    /// `t_i = i / n`.
    Equispaced,
    /// Knots minimizing the average-case error.
    Optimal,
}

impl KnotPlacement {
    fn knots(self, n: usize, seed: u64) -> Result<Vec<f64>> {
        match self {
            KnotPlacement::Equispaced => Ok((1..=n).map(|i| i as f64 / n as f64).collect()),
            KnotPlacement::Optimal => Ok(decision::optimal_trapezium(n, seed)?.knots),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    pub kernel: KernelChoice,
    pub knots: usize,
    pub placement: KnotPlacement,
    pub integrand: Integrand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineDemoConfig {
    pub kernel: KernelChoice,
    /// Knots per half interval.
    pub m: usize,
    pub integrand: Integrand,
    /// Ancestral sample paths; analytic propagation only when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ancestral_paths: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    pub kernel: KernelChoice,
    pub knots: usize,
    pub placement: KnotPlacement,
    pub draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_samples")]
    pub samples: String,
    #[serde(default = "default_grid")]
    pub grid: String,
    #[serde(default = "default_summary")]
    pub summary: String,
}

fn default_samples() -> String {
    "samples.csv".into()
}
fn default_grid() -> String {
    "grid.csv".into()
}
fn default_summary() -> String {
    "summary.json".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            grid: default_grid(),
            summary: default_summary(),
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing and validation
// ---------------------------------------------------------------------------

impl ExperimentConfig {
    /// Parses a JSON config; syntax and schema errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&sorted(serde_json::to_value(self).expect("config serializes")))
            .expect("value serializes")
    }

    /// Applies the `paper_scale` block, if any, and drops it.
    pub fn with_paper_scale(mut self) -> Self {
        if let (Some(o), Some(s)) = (self.paper_scale.take(), self.sampler.as_mut()) {
            if let Some(v) = o.schedule {
                s.schedule = v;
            }
            if o.particles.is_some() {
                s.particles = o.particles;
            }
            if o.iterations.is_some() {
                s.iterations = o.iterations;
            }
            if o.burn_in.is_some() {
                s.burn_in = o.burn_in;
            }
            if let Some(k) = o.steps {
                s.mala.steps = k;
            }
        }
        self
    }

    /// Schema and cross-field checks without running anything expensive.
    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(invalid("version", format!("unsupported schema version {}; expected {SCHEMA_VERSION}", self.version)));
        }
        for (field, name) in [
            ("output.samples", &self.output.samples),
            ("output.grid", &self.output.grid),
            ("output.summary", &self.output.summary),
        ] {
            if name.is_empty() || Path::new(name).components().count() != 1 {
                return Err(invalid(field, "must be a plain file name"));
            }
        }
        match self.experiment {
            ExperimentKind::Painleve | ExperimentKind::Poisson => {
                self.model()?;
                self.sampler_settings()?;
            }
            ExperimentKind::Quadrature => {
                let q = require(&self.quadrature, "quadrature")?;
                check_knots(q.knots, q.placement, "quadrature.knots")?;
            }
            ExperimentKind::PipelineDemo => {
                let p = require(&self.pipeline, "pipeline")?;
                if p.m < 2 {
                    return Err(invalid("pipeline.m", "need at least 2 knots per half"));
                }
                if p.ancestral_paths == Some(0) {
                    return Err(invalid("pipeline.ancestral_paths", "must be positive"));
                }
            }
            ExperimentKind::Risk => {
                let r = require(&self.risk, "risk")?;
                check_knots(r.knots, r.placement, "risk.knots")?;
                if r.draws < 2 {
                    return Err(invalid("risk.draws", "need at least two draws"));
                }
            }
            ExperimentKind::Counterexample => {}
        }
        Ok(())
    }

    fn model(&self) -> Result<Model> {
        let prior = require(&self.prior, "prior")?;
        let info = require(&self.information, "information")?;
        prior.scales.validate().map_err(|e| rename_field(e, "prior.scales"))?;
        if !prior.offset.is_finite() {
            return Err(invalid("prior.offset", "must be finite"));
        }
        let offset = if prior.offset == 0.0 {
            Offset::Zero
        } else {
            Offset::Constant(prior.offset)
        };
        let (basis, op, constraints) = match (self.experiment, prior.basis) {
            (ExperimentKind::Painleve, BasisConfig::Chebyshev { terms }) => {
                if terms < 2 {
                    return Err(invalid("prior.basis.terms", "need at least two terms"));
                }
                if info.n < 4 {
                    return Err(invalid("information.n", "need n >= 4 (two boundary values and two residual points)"));
                }
                let basis = BasisSet::chebyshev_1d(terms - 1, DomainMap::interval(0.0, PAINLEVE_END)?)?;
                let op = infoops::painleve_design(info.n - 2)?;
                let cons = if info.negative_branch {
                    vec![infoops::painleve_negative_branch()]
                } else {
                    vec![]
                };
                (basis, op, cons)
            }
            (ExperimentKind::Poisson, BasisConfig::Triangle { max_total_degree }) => {
                if info.negative_branch {
                    return Err(invalid("information.negative_branch", "only applies to the painleve experiment"));
                }
                let basis = BasisSet::chebyshev_triangle(max_total_degree, DomainMap::rectangle((0.0, 1.0), (0.0, 1.0))?)?;
                let op = infoops::poisson_design(info.n).map_err(|e| rename_field(e, "information.n"))?;
                (basis, op, vec![])
            }
            (kind, _) => {
                return Err(invalid(
                    "prior.basis",
                    format!("{kind:?} needs a {} basis", if kind == ExperimentKind::Poisson { "triangle" } else { "chebyshev" }),
                ))
            }
        };
        let basis = Arc::new(basis);
        op.validate(basis.domain())?;
        let make = |family| SeriesPrior::new(family, prior.scales, offset, basis.clone());
        let primary = make(prior.family)?;
        let alternative = prior.alternative.map(make).transpose()?;
        Ok(Model {
            primary,
            alternative,
            op,
            constraints,
        })
    }

    fn sampler_settings(&self) -> Result<(SamplerBlock, SamplerConfig)> {
        let s = require(&self.sampler, "sampler")?.clone();
        let schedule = s.schedule.build().map_err(|e| rename_field(e, "sampler.schedule"))?;
        match s.algorithm {
            Algorithm::Smc => match s.particles {
                None => return Err(invalid("sampler.particles", "required for smc")),
                Some(p) if p < 2 => return Err(invalid("sampler.particles", "need at least two particles")),
                _ => {}
            },
            Algorithm::Pt => {
                let it = s.iterations.ok_or_else(|| invalid("sampler.iterations", "required for pt"))?;
                if it == 0 {
                    return Err(invalid("sampler.iterations", "must be positive"));
                }
                if s.burn_in.is_some_and(|b| b >= it) {
                    return Err(invalid("sampler.burn_in", "must be smaller than sampler.iterations"));
                }
            }
        }
        if s.mala.steps == 0 {
            return Err(invalid("sampler.mala.steps", "must be positive"));
        }
        if !(s.mala.tau0 > 0.0) {
            return Err(invalid("sampler.mala.tau0", "must be positive"));
        }
        if let Resampling::EssBelow(f) = s.resampling {
            if !(0.0..=1.0).contains(&f) {
                return Err(invalid("sampler.resampling", "ESS fraction must lie in [0, 1]"));
            }
        }
        let cfg = SamplerConfig::new(s.kernel, schedule, s.mala.clone(), self.seed).with_resampling(s.resampling);
        Ok((s, cfg))
    }
}

fn require<'a, T>(block: &'a Option<T>, name: &str) -> Result<&'a T> {
    block
        .as_ref()
        .ok_or_else(|| invalid(name, "block is required for this experiment"))
}

fn rename_field(e: Error, field: &str) -> Error {
    match e {
        Error::InvalidParameter { reason, .. } => invalid(field, reason),
        other => other,
    }
}

fn check_knots(n: usize, placement: KnotPlacement, field: &str) -> Result<()> {
    if n == 0 {
        return Err(invalid(field, "must be positive"));
    }
    if placement == KnotPlacement::Optimal && n > 6 {
        return Err(invalid(field, "optimal placement supports at most 6 knots"));
    }
    Ok(())
}

struct Model {
    primary: SeriesPrior,
    alternative: Option<SeriesPrior>,
    op: InformationOperator,
    constraints: Vec<infoops::InequalityConstraint>,
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub paper_scale: bool,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
    /// Human-readable lines for the console.
    pub console: Vec<String>,
    pub summary: Value,
}

/// Validates and executes an experiment, writing its outputs.
pub fn run(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let mut cfg = config.clone();
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let cfg = if opts.paper_scale {
        cfg.with_paper_scale()
    } else {
        cfg
    };
    cfg.validate()?;
    fs::create_dir_all(&opts.output_dir)?;
    let start = Instant::now();
    let mut out = Outputs::default();
    let results = match cfg.experiment {
        ExperimentKind::Painleve => run_painleve(&cfg, &mut out)?,
        ExperimentKind::Poisson => run_poisson(&cfg, &mut out)?,
        ExperimentKind::Quadrature => run_quadrature(&cfg, &mut out)?,
        ExperimentKind::PipelineDemo => run_pipeline(&cfg, &mut out)?,
        ExperimentKind::Risk => run_risk(&cfg, &mut out)?,
        ExperimentKind::Counterexample => run_counterexample(&mut out)?,
    };
    let mut summary = json!({
        "config": serde_json::to_value(&cfg).expect("config serializes"),
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "results": results,
        "wall_time_seconds": start.elapsed().as_secs_f64(),
    });
    if let Some(s) = out.sampler.take() {
        summary["sampler"] = s;
    }
    if let Some(e) = out.evidence.take() {
        summary["evidence"] = e;
    }
    let summary = sorted(summary);
    let mut files = Vec::new();
    if let Some(csv) = &out.samples {
        files.push(write(&opts.output_dir, &cfg.output.samples, csv)?);
    }
    if let Some(csv) = &out.grid {
        files.push(write(&opts.output_dir, &cfg.output.grid, csv)?);
    }
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    files.push(write(&opts.output_dir, &cfg.output.summary, &text)?);
    Ok(RunReport {
        files,
        console: out.console,
        summary,
    })
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, text)?;
    Ok(path)
}

/// Recursively rebuilds a JSON value so object keys are sorted.
fn sorted(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let ordered: BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, sorted(v))).collect();
            Value::Object(ordered.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sorted).collect()),
        other => other,
    }
}

#[derive(Default)]
struct Outputs {
    samples: Option<String>,
    grid: Option<String>,
    sampler: Option<Value>,
    evidence: Option<Value>,
    console: Vec<String>,
}

/// `{:.16e}` keeps 17 significant digits, enough to round-trip an `f64`.
pub fn format_number(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_row(out: &mut String, cells: impl IntoIterator<Item = String>) {
    let row: Vec<String> = cells.into_iter().collect();
    out.push_str(&row.join(","));
    out.push('\n');
}

/// Samples CSV with header `sample_index,u_0,...`.
pub fn samples_csv(samples: &[Vec<f64>]) -> String {
    let dim = samples.first().map_or(0, Vec::len);
    let mut out = String::new();
    csv_row(
        &mut out,
        std::iter::once("sample_index".to_string()).chain((0..dim).map(|i| format!("u_{i}"))),
    );
    for (i, s) in samples.iter().enumerate() {
        csv_row(&mut out, std::iter::once(i.to_string()).chain(s.iter().map(|v| format_number(*v))));
    }
    out
}

/// Grid CSV; `points` holds coordinates, one row per point.
pub fn grid_csv(points: &[Vec<f64>], mean: &[f64], std: &[f64]) -> String {
    let dim = points.first().map_or(0, Vec::len);
    let mut out = String::new();
    csv_row(
        &mut out,
        (0..dim).map(|i| format!("t_{i}")).chain(["mean".to_string(), "std".to_string()]),
    );
    for ((p, m), s) in points.iter().zip(mean).zip(std) {
        csv_row(
            &mut out,
            p.iter().chain([m, s]).map(|v| format_number(*v)),
        );
    }
    out
}

/// Weighted draws approximating a posterior over coefficients.
pub struct Posterior {
    pub states: Vec<Vec<f64>>,
    /// Normalized weights.
    pub weights: Vec<f64>,
    /// Equally weighted draws for the samples file.
    pub draws: Vec<Vec<f64>>,
    pub history: SamplerHistory,
    pub diagnostics: Value,
}

impl Posterior {
    /// Weighted mean and standard deviation of a linear functional given by
    /// `row` and `constant`.
    pub fn moments(&self, row: &[f64], constant: f64) -> (f64, f64) {
        let vals: Vec<f64> = self
            .states
            .iter()
            .map(|u| constant + row.iter().zip(u).map(|(r, c)| r * c).sum::<f64>())
            .collect();
        let mean: f64 = vals.iter().zip(&self.weights).map(|(v, w)| v * w).sum();
        let var: f64 = vals.iter().zip(&self.weights).map(|(v, w)| w * (v - mean).powi(2)).sum();
        (mean, var.max(0.0).sqrt())
    }
}

/// Runs the configured sampler on `prior` conditioned on `op` and `constraints`.
pub fn sample_posterior(
    prior: &SeriesPrior,
    op: &InformationOperator,
    constraints: &[infoops::InequalityConstraint],
    block: &SamplerBlock,
    cfg: &SamplerConfig,
) -> Result<Posterior> {
    let compiled = op.compile(prior.basis(), prior.offset())?;
    let cons: Vec<CompiledConstraint> = constraints
        .iter()
        .map(|c| c.compile(prior.basis(), prior.offset()))
        .collect::<Result<_>>()?;
    let target = RelaxedTarget::new(prior, &compiled, &cons, block.kernel);
    let rung_table = |rungs: &[RungSummary]| serde_json::to_value(rungs).expect("rungs serialize");
    match block.algorithm {
        Algorithm::Smc => {
            let particles = block.particles.expect("validated");
            let out = smc_nd(&target, particles, cfg)?;
            if let Some(rung) = out.ensemble.failed_at {
                return Err(Error::SamplerFailed { rung });
            }
            let e = out.ensemble;
            let uniform = e.weights.iter().all(|w| (w * particles as f64 - 1.0).abs() < 1e-12);
            let draws = if uniform {
                e.states.clone()
            } else {
                let mut r = rng::stream(cfg.seed, &[tag::RESAMPLE, cfg.schedule.len() as u64]);
                multinomial_resample(&e.weights, particles, &mut r)
                    .into_iter()
                    .map(|i| e.states[i].clone())
                    .collect()
            };
            let diagnostics = json!({
                "algorithm": "smc",
                "particles": particles,
                "temperatures": cfg.schedule.len(),
                "acceptance_rates": out.history.rungs.iter().map(|r| r.acceptance_rate).collect::<Vec<_>>(),
                "ess_history": out.history.rungs.iter().map(|r| r.ess).collect::<Vec<_>>(),
                "rungs": rung_table(&out.history.rungs),
            });
            Ok(Posterior {
                states: e.states,
                weights: e.weights,
                draws,
                history: out.history,
                diagnostics,
            })
        }
        Algorithm::Pt => {
            let iterations = block.iterations.expect("validated");
            let burn_in = block.burn_in.unwrap_or(iterations / 10);
            let out = pt_nd(&target, iterations, burn_in, cfg)?;
            let n = out.trace.len();
            let swap: Vec<f64> = out
                .swap_accepts
                .iter()
                .zip(&out.swap_attempts)
                .map(|(a, t)| if *t == 0 { 0.0 } else { *a as f64 / *t as f64 })
                .collect();
            let diagnostics = json!({
                "algorithm": "pt",
                "iterations": iterations,
                "burn_in": burn_in,
                "temperatures": cfg.schedule.len(),
                "acceptance_rates": out.history.rungs.iter().map(|r| r.acceptance_rate).collect::<Vec<_>>(),
                "swap_acceptance": swap,
                "rungs": rung_table(&out.history.rungs),
            });
            Ok(Posterior {
                states: out.trace.clone(),
                weights: vec![1.0 / n as f64; n],
                draws: out.trace,
                history: out.history,
                diagnostics,
            })
        }
    }
}

fn evidence_of(history: &SamplerHistory, kernel: RelaxationKernel) -> Result<Option<EvidenceEstimate>> {
    if kernel != RelaxationKernel::SquaredExponential {
        return Ok(None);
    }
    evidence::estimate_log_evidence(history).map(Some)
}

fn grid_summary(post: &Posterior, prior: &SeriesPrior, points: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let offset = prior.offset().value();
    let mut mean = Vec::with_capacity(points.len());
    let mut std = Vec::with_capacity(points.len());
    for p in points {
        let (m, s) = post.moments(&prior.basis().row(p, DerivOrder::VALUE)?, offset);
        mean.push(m);
        std.push(s);
    }
    Ok((mean, std))
}

fn run_painleve(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Value> {
    let model = cfg.model()?;
    let (block, scfg) = cfg.sampler_settings()?;
    let post = sample_posterior(&model.primary, &model.op, &model.constraints, &block, &scfg)?;
    let points: Vec<Vec<f64>> = (0..PAINLEVE_GRID)
        .map(|i| vec![PAINLEVE_END * i as f64 / (PAINLEVE_GRID - 1) as f64])
        .collect();
    let (mean, std) = grid_summary(&post, &model.primary, &points)?;
    let slope_row = model.primary.basis().row(&[0.0], DerivOrder::along(0, 1))?;
    let positive: f64 = post
        .states
        .iter()
        .zip(&post.weights)
        .filter(|(u, _)| slope_row.iter().zip(u.iter()).map(|(r, c)| r * c).sum::<f64>() > 0.0)
        .map(|(_, w)| w)
        .sum();
    let (slope_mean, slope_std) = post.moments(&slope_row, 0.0);
    let ev = evidence_of(&post.history, block.kernel)?;
    let mut results = json!({
        "initial_slope_mean": slope_mean,
        "initial_slope_std": slope_std,
        "positive_slope_probability": positive,
        "information_dim": model.op.len(),
    });
    if let Some(alt) = &model.alternative {
        let alt_post = sample_posterior(alt, &model.op, &model.constraints, &block, &scfg)?;
        let alt_ev = evidence_of(&alt_post.history, block.kernel)?;
        if let (Some(e0), Some(e1)) = (&ev, &alt_ev) {
            let bf = evidence::bayes_factor(e1, e0)?;
            results["alternative"] = json!({
                "family": alt.family(),
                "evidence": e1,
                "log_bayes_factor": evidence::log_bayes_factor(e1, e0)?,
                "bayes_factor": bf,
            });
            out.console.push(format!("bayes factor {:?} against {:?}: {bf:.4}", alt.family(), model.primary.family()));
        }
    }
    out.console.push(format!(
        "painleve: x'(0) posterior mean {slope_mean:.4}, P(x'(0) > 0) = {positive:.3}"
    ));
    if let Some(e) = &ev {
        out.console.push(format!("log evidence {:.4} (se {:.4})", e.log_evidence, e.standard_error));
        out.evidence = Some(serde_json::to_value(e).expect("evidence serializes"));
    }
    out.samples = Some(samples_csv(&post.draws));
    out.grid = Some(grid_csv(&points, &mean, &std));
    out.sampler = Some(post.diagnostics);
    Ok(results)
}

fn run_poisson(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Value> {
    let model = cfg.model()?;
    let (block, scfg) = cfg.sampler_settings()?;
    let post = sample_posterior(&model.primary, &model.op, &[], &block, &scfg)?;
    let axis: Vec<f64> = (0..POISSON_GRID).map(|i| i as f64 / (POISSON_GRID - 1) as f64).collect();
    let points: Vec<Vec<f64>> = axis
        .iter()
        .flat_map(|&a| axis.iter().map(move |&b| vec![a, b]))
        .collect();
    let (mean, std) = grid_summary(&post, &model.primary, &points)?;
    let mut sorted_std = std.clone();
    sorted_std.sort_by(f64::total_cmp);
    let median = sorted_std[sorted_std.len() / 2];
    let ev = evidence_of(&post.history, block.kernel)?;
    out.console.push(format!("poisson: median pointwise std {median:.4}"));
    if let Some(e) = &ev {
        out.evidence = Some(serde_json::to_value(e).expect("evidence serializes"));
    }
    out.samples = Some(samples_csv(&post.draws));
    out.grid = Some(grid_csv(&points, &mean, &std));
    out.sampler = Some(post.diagnostics);
    Ok(json!({
        "median_std": median,
        "max_std": sorted_std.last().copied().unwrap_or(0.0),
        "information_dim": model.op.len(),
    }))
}

fn run_quadrature(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Value> {
    let q = require(&cfg.quadrature, "quadrature")?;
    let kernel = q.kernel.spec();
    let knots = q.placement.knots(q.knots, cfg.seed)?;
    let values: Vec<f64> = knots.iter().map(|&t| q.integrand.eval(t)).collect();
    let post = conjugate::bq_posterior(&kernel, &knots, &values)?;
    let weights = conjugate::bq_weights(&kernel, &knots)?;
    let points: Vec<Vec<f64>> = (0..QUADRATURE_GRID)
        .map(|i| vec![i as f64 / (QUADRATURE_GRID - 1) as f64])
        .collect();
    let queries: Vec<LinearFunctional> = points.iter().map(|p| LinearFunctional::point_1d(p[0])).collect();
    let obs: Vec<LinearFunctional> = knots.iter().map(|&t| LinearFunctional::point_1d(t)).collect();
    let field = conjugate::condition(&kernel, &obs, &values, &queries)?;
    let (mean, var) = (post.mean[0], post.covariance[(0, 0)]);
    let exact = q.integrand.integral();
    out.console.push(format!(
        "quadrature: estimate {mean:.10} +/- {:.3e}, exact {exact:.10}",
        var.max(0.0).sqrt()
    ));
    out.grid = Some(grid_csv(
        &points,
        field.mean.as_slice(),
        &field.std_devs(),
    ));
    let mut results = json!({
        "knots": knots,
        "weights": weights,
        "posterior_mean": mean,
        "posterior_variance": var,
        "exact_integral": exact,
        "error": mean - exact,
    });
    if q.kernel == KernelChoice::Wiener {
        results["average_case_error"] = json!(decision::wce1_risk(&knots, &weights));
    }
    Ok(results)
}

fn run_pipeline(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Value> {
    let p = require(&cfg.pipeline, "pipeline")?;
    let kernel = p.kernel.spec();
    let ex = DistributedIntegration::new(p.m, &kernel)?;
    let sources = ex.sources(|t| p.integrand.eval(t));
    let compat = pipeline::check_compatibility(&ex.graph, &ex.methods)?;
    let coherence = pipeline::check_coherence(
        &ex.graph,
        &CoherenceDeclaration {
            statements: vec![],
            witness: Some(ex.witness(&kernel)?),
        },
    )?;
    let dg = pipeline::dependence_graph(&ex.graph)?;
    let analytic = pipeline::execute(&ex.graph, &ex.methods, &sources, ExecutionMode::AnalyticGaussian)?;
    let values: Vec<f64> = ex.knots.iter().map(|&t| p.integrand.eval(t)).collect();
    let joint = conjugate::bq_posterior(&kernel, &ex.knots, &values)?;
    let (pm, pv) = (analytic.terminal.mean()[0], analytic.terminal.variance()[0]);
    let (jm, jv) = (joint.mean[0], joint.covariance[(0, 0)]);
    let mut results = json!({
        "compatibility": compat,
        "coherence": coherence,
        "dependence_edges": dg.edges.iter().map(|(a, b)| [a, b]).collect::<Vec<_>>(),
        "pipeline_mean": pm,
        "pipeline_variance": pv,
        "joint_mean": jm,
        "joint_variance": jv,
        "exact_integral": p.integrand.integral(),
    });
    if let Some(paths) = p.ancestral_paths {
        let sampled = pipeline::execute(
            &ex.graph,
            &ex.methods,
            &sources,
            ExecutionMode::Ancestral { paths, seed: cfg.seed },
        )?;
        if let pipeline::NodeBelief::Empirical(s) = &sampled.terminal {
            out.samples = Some(samples_csv(s));
        }
        results["ancestral_mean"] = json!(sampled.terminal.mean()[0]);
        results["ancestral_variance"] = json!(sampled.terminal.variance()[0]);
    }
    out.console.push(format!(
        "pipeline: mean {pm:.10} var {pv:.3e}; joint mean {jm:.10} var {jv:.3e}; coherent {}",
        coherence.coherent
    ));
    Ok(results)
}

fn run_risk(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Value> {
    let r = require(&cfg.risk, "risk")?;
    let knots = r.placement.knots(r.knots, cfg.seed)?;
    let obs: Vec<LinearFunctional> = knots.iter().map(|&t| LinearFunctional::point_1d(t)).collect();
    let c = decision::mc_risk_comparison(
        &r.kernel.spec(),
        &obs,
        &LinearFunctional::integral(0.0, 1.0)?,
        r.draws,
        cfg.seed,
    )?;
    out.console.push(format!(
        "risk: bpnm {:.6e}, bayes rule {:.6e}, ratio {:.4} +/- {:.4}",
        c.bpnm.bayes_risk, c.bayes_rule.bayes_risk, c.ratio, c.ratio_standard_error
    ));
    Ok(json!({ "knots": knots, "comparison": c }))
}

fn run_counterexample(out: &mut Outputs) -> Result<Value> {
    let rows = decision::discrete_counterexample();
    out.console.push(format!("{:<24} {:>14} {:>10}", "observed set", "classical risk", "bpnm risk"));
    for row in &rows {
        let set: Vec<String> = row.observed_set.iter().map(|s| format!("{s:?}").to_lowercase()).collect();
        out.console.push(format!(
            "{:<24} {:>14} {:>10}",
            format!("{{{}}}", set.join(", ")),
            row.classical_risk.to_string(),
            row.bpnm_risk.to_string()
        ));
    }
    Ok(json!({ "rows": rows }))
}
