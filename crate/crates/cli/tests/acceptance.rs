//! Acceptance suite. Each test checks one criterion, prints a single
//! `criterion N: PASS|FAIL` line and fails when the criterion does.
//!
//! Criteria run one at a time so the runtime bounds are measured without
//! competing for the CPU.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use pnm_core::chebbasis::{BasisSet, DerivOrder, DomainMap, Offset};
use pnm_core::conjugate::{self, KernelSpec, LinearFunctional};
use pnm_core::decision;
use pnm_core::disintegration::{
    batch_means_se, pt_nd, smc_nd, MalaConfig, Preconditioner, RelaxationKernel, RelaxedTarget, Resampling,
    SamplerConfig, TemperatureSchedule,
};
use pnm_core::evidence::estimate_log_evidence;
use pnm_core::infoops::{self, Functional, InformationOperator};
use pnm_core::pipeline::{execute, DistributedIntegration, ExecutionMode};
use pnm_core::seriesprior::{PriorFamily, ScaleSequence, SeriesPrior};
use serde_json::Value;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the criterion line outside the test harness capture, then asserts.
fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {criterion} ({name}): {verdict} | {detail}");
    let _ = out.flush();
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

// ---------------------------------------------------------------------------
// 1. Optimal information
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_optimal_information() {
    let _guard = serial();
    let start = Instant::now();
    let mut worst_knot = 0.0f64;
    let mut worst_weight = 0.0f64;
    let mut worst_risk = 0.0f64;
    for n in 1..=3usize {
        let rule = decision::optimal_trapezium(n, 7).unwrap();
        let denom = (2 * n + 1) as f64;
        for (i, (&t, &w)) in rule.knots.iter().zip(&rule.weights).enumerate() {
            worst_knot = worst_knot.max((t - 2.0 * (i + 1) as f64 / denom).abs());
            worst_weight = worst_weight.max((w - 2.0 / denom).abs());
        }
        let minimum = 1.0 / (3.0 * denom * denom);
        worst_risk = worst_risk.max((decision::wce1_risk(&rule.knots, &rule.weights) - minimum).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst_knot < 1e-5 && worst_weight < 1e-5 && worst_risk < 1e-8 && elapsed < Duration::from_secs(10);
    report(
        1,
        "optimal information",
        pass,
        &format!("knot err {worst_knot:.2e}, weight err {worst_weight:.2e}, risk err {worst_risk:.2e}, {elapsed:.1?}"),
    );
}

// ---------------------------------------------------------------------------
// 2. Risk doubling
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_risk_doubling() {
    let _guard = serial();
    let start = Instant::now();
    let knots = [0.4, 0.8];
    let obs: Vec<LinearFunctional> = knots.iter().map(|&t| LinearFunctional::point_1d(t)).collect();
    let qoi = LinearFunctional::integral(0.0, 1.0).unwrap();
    let c = decision::mc_risk_comparison(&KernelSpec::wiener(), &obs, &qoi, 100_000, 11).unwrap();
    let elapsed = start.elapsed();
    let z = (c.ratio - 2.0) / c.ratio_standard_error;
    let pass = z.abs() <= 3.0 && elapsed < Duration::from_secs(60);
    report(
        2,
        "risk doubling",
        pass,
        &format!("ratio {:.4} +/- {:.4} (z {z:.2}), {elapsed:.1?}", c.ratio, c.ratio_standard_error),
    );
}

// ---------------------------------------------------------------------------
// 3. Discrete counterexample
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_discrete_counterexample() {
    use num_rational::Rational64;
    let _guard = serial();
    let rows = decision::discrete_counterexample();
    let quarter = Rational64::new(1, 4);
    let third = Rational64::new(1, 3);
    let got: Vec<(Rational64, Rational64)> = rows.iter().map(|r| (r.classical_risk, r.bpnm_risk)).collect();
    let pass = got == vec![(quarter, quarter), (quarter, third)];
    let shown: Vec<String> = got.iter().map(|(c, b)| format!("({c}, {b})")).collect();
    report(3, "discrete counterexample", pass, &format!("classical/bpnm risks {}", shown.join(" ")));
}

// ---------------------------------------------------------------------------
// Linear-Gaussian toy shared by criteria 4, 5 and 7
// ---------------------------------------------------------------------------

/// `x'' = -pi^2 sin(pi t)` observed at three points plus both boundary
/// values, under a Gaussian series prior with eight Chebyshev terms.
struct Toy {
    prior: SeriesPrior,
    op: InformationOperator,
    query_rows: Vec<Vec<f64>>,
    oracle_mean: Vec<f64>,
    oracle_sd: Vec<f64>,
    log_evidence: f64,
}

impl Toy {
    fn new() -> Self {
        use std::f64::consts::PI;
        let basis = Arc::new(BasisSet::chebyshev_1d(7, DomainMap::interval(0.0, 1.0).unwrap()).unwrap());
        let prior = SeriesPrior::new(
            PriorFamily::Gaussian,
            ScaleSequence::PowerDecay { alpha: 1.0, p: 2.0 },
            Offset::Zero,
            basis.clone(),
        )
        .unwrap();
        let rhs = |t: f64| -PI * PI * (PI * t).sin();
        let op = InformationOperator::new(
            vec![
                Functional::point_1d(0.0),
                Functional::point_1d(1.0),
                Functional::deriv_1d(0.25, 2),
                Functional::deriv_1d(0.5, 2),
                Functional::deriv_1d(0.75, 2),
            ],
            vec![0.0, 0.0, rhs(0.25), rhs(0.5), rhs(0.75)],
        )
        .unwrap();
        let kernel = KernelSpec::series(basis.clone(), prior.gammas().to_vec(), Offset::Zero).unwrap();
        let qs = [0.1, 0.3, 0.5, 0.7, 0.9];
        let queries: Vec<LinearFunctional> = qs.iter().map(|&t| LinearFunctional::point_1d(t)).collect();
        let post = conjugate::collocation_posterior(&kernel, &op, &queries).unwrap();
        let log_evidence = conjugate::gaussian_evidence(&kernel, &op).unwrap();
        Toy {
            query_rows: qs.iter().map(|&t| basis.row(&[t], DerivOrder::VALUE).unwrap()).collect(),
            oracle_mean: post.mean.iter().copied().collect(),
            oracle_sd: post.std_devs(),
            prior,
            op,
            log_evidence,
        }
    }

    fn sampler(&self, schedule: TemperatureSchedule, steps: usize, seed: u64) -> SamplerConfig {
        let mala = MalaConfig::new(3e-2, steps)
            .with_preconditioner(Preconditioner::PriorVariances)
            .with_tau_cap(0.5);
        SamplerConfig::new(RelaxationKernel::SquaredExponential, schedule, mala, seed)
            .with_resampling(Resampling::EssBelow(0.5))
    }

    fn query(&self, q: usize, u: &[f64]) -> f64 {
        self.query_rows[q].iter().zip(u).map(|(r, c)| r * c).sum()
    }
}

// ---------------------------------------------------------------------------
// 4. Sampler-oracle equivalence
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_sampler_oracle_equivalence() {
    let _guard = serial();
    let start = Instant::now();
    let toy = Toy::new();
    let compiled = toy.op.compile(toy.prior.basis(), Offset::Zero).unwrap();
    let target = RelaxedTarget::new(&toy.prior, &compiled, &[], RelaxationKernel::SquaredExponential);

    let smc_cfg = toy.sampler(TemperatureSchedule::log_uniform(100.0, 1e-3, 1000).unwrap(), 10, 41);
    let smc = smc_nd(&target, 2000, &smc_cfg).unwrap();
    let pt_cfg = toy.sampler(TemperatureSchedule::log_uniform(30.0, 1e-3, 40).unwrap(), 1, 42);
    let pt = pt_nd(&target, 1_000_000, 100_000, &pt_cfg).unwrap();
    let elapsed = start.elapsed();

    let mut worst_z = 0.0f64;
    let mut worst_sd = 0.0f64;
    for q in 0..toy.query_rows.len() {
        let f = |u: &[f64]| toy.query(q, u);
        let (smc_mean, smc_se) = smc.ensemble.mean_with_se(f);
        let smc_sd = smc.ensemble.weighted_std(f);
        let series: Vec<f64> = pt.trace.iter().map(|u| f(u)).collect();
        let n = series.len() as f64;
        let pt_mean = series.iter().sum::<f64>() / n;
        let pt_sd = (series.iter().map(|x| (x - pt_mean).powi(2)).sum::<f64>() / n).sqrt();
        let pt_se = batch_means_se(&series, 20);
        let oracle = toy.oracle_mean[q];
        let zs = [
            (smc_mean - oracle) / smc_se,
            (pt_mean - oracle) / pt_se,
            (smc_mean - pt_mean) / (smc_se * smc_se + pt_se * pt_se).sqrt(),
        ];
        worst_z = zs.iter().fold(worst_z, |acc, z| acc.max(z.abs()));
        for sd in [smc_sd, pt_sd] {
            worst_sd = worst_sd.max((sd / toy.oracle_sd[q] - 1.0).abs());
        }
    }
    let pass = worst_z <= 3.0 && worst_sd <= 0.15 && elapsed < Duration::from_secs(300);
    report(
        4,
        "sampler-oracle equivalence",
        pass,
        &format!("max |z| {worst_z:.2}, max sd rel err {worst_sd:.3}, {elapsed:.1?}"),
    );
}

// ---------------------------------------------------------------------------
// 5. Evidence consistency
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_evidence_consistency() {
    let _guard = serial();
    let start = Instant::now();
    let toy = Toy::new();
    let compiled = toy.op.compile(toy.prior.basis(), Offset::Zero).unwrap();
    let target = RelaxedTarget::new(&toy.prior, &compiled, &[], RelaxationKernel::SquaredExponential);
    let cfg = toy.sampler(TemperatureSchedule::log_uniform(100.0, 1e-2, 10_000).unwrap(), 2, 51);
    let out = smc_nd(&target, 2000, &cfg).unwrap();
    let est = estimate_log_evidence(&out.history).unwrap();
    let elapsed = start.elapsed();
    let err = (est.log_evidence - toy.log_evidence).abs();
    let pass = err < 0.2 && elapsed < Duration::from_secs(300);
    report(
        5,
        "evidence consistency",
        pass,
        &format!(
            "estimate {:.4} vs exact {:.4} (error {err:.3}), {elapsed:.1?}",
            est.log_evidence, toy.log_evidence
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Pipeline Bayesianity
// ---------------------------------------------------------------------------

/// Joint quadrature posterior for `int_0^1 x` from point values, computed
/// from the kernel's closed-form integrals with a dense solve.
fn joint_quadrature(integrated: bool, knots: &[f64], values: &[f64]) -> (f64, f64) {
    let k = |s: f64, t: f64| {
        let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
        if integrated {
            lo * lo * lo / 3.0 + (hi - lo) * lo * lo / 2.0
        } else {
            lo
        }
    };
    // int_0^1 k(s, t) ds and int_0^1 int_0^1 k.
    let z = |t: f64| {
        if integrated {
            t.powi(4) / 8.0 + (t.powi(3) - t.powi(4)) / 3.0 + t * t * (1.0 - t).powi(2) / 4.0
        } else {
            t - t * t / 2.0
        }
    };
    let total = if integrated { 1.0 / 20.0 } else { 1.0 / 3.0 };
    let n = knots.len();
    let gram = DMatrix::from_fn(n, n, |i, j| k(knots[i], knots[j]));
    let zv = DVector::from_iterator(n, knots.iter().map(|&t| z(t)));
    let lu = gram.lu();
    let w = lu.solve(&zv).unwrap();
    let mean = w.dot(&DVector::from_column_slice(values));
    (mean, total - w.dot(&zv))
}

#[test]
fn criterion_6_pipeline_bayesianity() {
    let _guard = serial();
    let f = |t: f64| (3.0 * t).sin();
    let mut wiener_gap = 0.0f64;
    let mut integrated_gaps = Vec::new();
    for m in [2usize, 3, 5] {
        for integrated in [false, true] {
            let kernel = if integrated { KernelSpec::integrated_wiener() } else { KernelSpec::wiener() };
            let ex = DistributedIntegration::new(m, &kernel).unwrap();
            let out = execute(&ex.graph, &ex.methods, &ex.sources(f), ExecutionMode::AnalyticGaussian).unwrap();
            let values: Vec<f64> = ex.knots.iter().map(|&t| f(t)).collect();
            let (mean, var) = joint_quadrature(integrated, &ex.knots, &values);
            let mean_gap = (out.terminal.mean()[0] - mean).abs();
            let var_gap = (out.terminal.variance()[0] - var).abs();
            if integrated {
                integrated_gaps.push(var_gap);
            } else {
                wiener_gap = wiener_gap.max(mean_gap).max(var_gap);
            }
        }
    }
    // One variance gap above the threshold witnesses the failure; the gap
    // shrinks with m along with the variance itself.
    let witness = integrated_gaps.iter().copied().fold(0.0, f64::max);
    let pass = wiener_gap <= 1e-8 && witness > 1e-6;
    report(
        6,
        "pipeline bayesianity",
        pass,
        &format!(
            "wiener max gap {wiener_gap:.2e}; integrated-wiener variance gaps for m = 2, 3, 5: {}",
            integrated_gaps.iter().map(|g| format!("{g:.2e}")).collect::<Vec<_>>().join(", ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. SMC rate
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_smc_rate() {
    let _guard = serial();
    let start = Instant::now();
    let toy = Toy::new();
    let compiled = toy.op.compile(toy.prior.basis(), Offset::Zero).unwrap();
    let target = RelaxedTarget::new(&toy.prior, &compiled, &[], RelaxationKernel::SquaredExponential);
    let schedule = TemperatureSchedule::log_uniform(100.0, 1e-3, 300).unwrap();
    let sizes = [250usize, 1000, 4000];
    let seeds = 20u64;
    let mut points = Vec::new();
    let mut rmses = Vec::new();
    for &p in &sizes {
        let mut sq = 0.0;
        for s in 0..seeds {
            let out = smc_nd(&target, p, &toy.sampler(schedule.clone(), 5, 1000 + s)).unwrap();
            for q in 0..toy.query_rows.len() {
                let mean = out.ensemble.weighted_mean(|u| toy.query(q, u));
                sq += (mean - toy.oracle_mean[q]).powi(2);
            }
        }
        let rmse = (sq / (seeds as usize * toy.query_rows.len()) as f64).sqrt();
        rmses.push(rmse);
        points.push(((p as f64).ln(), rmse.ln()));
    }
    let elapsed = start.elapsed();
    let mx = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
    let my = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let pass = (slope + 0.5).abs() <= 0.15 && elapsed < Duration::from_secs(600);
    report(
        7,
        "smc rate",
        pass,
        &format!("slope {slope:.3} (rmse {rmses:.4?}), {elapsed:.1?}"),
    );
}

// ---------------------------------------------------------------------------
// CLI helpers
// ---------------------------------------------------------------------------

fn pnm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pnm")).args(args).output().expect("pnm runs")
}

fn run_config(config: &Path, out: &Path, extra: &[&str]) -> std::process::Output {
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--output-dir", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let output = pnm(&args);
    assert!(
        output.status.success(),
        "pnm run {} failed: {}",
        config.display(),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    reader
        .records()
        .map(|r| r.unwrap().iter().map(|v| v.parse::<f64>().unwrap()).collect())
        .collect()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

// ---------------------------------------------------------------------------
// 8. Painleve
// ---------------------------------------------------------------------------

const PAINLEVE_FINAL_DELTA: f64 = 1e-2;

/// Trapezoid L2 distance between two series on the 201-point grid over [0, 10].
fn trapezoid_l2(a: &[f64], b: &[f64]) -> f64 {
    let h = 10.0 / (a.len() - 1) as f64;
    let sq: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).collect();
    let interior: f64 = sq.iter().sum::<f64>() - 0.5 * (sq[0] + sq[sq.len() - 1]);
    (h * interior).sqrt()
}

struct PainleveRun {
    within: f64,
    dist_positive: f64,
    dist_negative: f64,
    summary: Value,
}

fn painleve_run(config: &str, reference: &(Vec<f64>, Vec<f64>)) -> PainleveRun {
    let dir = tempfile::tempdir().unwrap();
    run_config(&workspace_root().join("configs").join(config), dir.path(), &[]);
    let samples = read_csv(&dir.path().join("samples.csv"));
    let grid = read_csv(&dir.path().join("grid.csv"));

    let basis = BasisSet::chebyshev_1d(39, DomainMap::interval(0.0, 10.0).unwrap()).unwrap();
    let compiled = infoops::painleve_design(15).unwrap().compile(&basis, Offset::Zero).unwrap();
    let ok = samples
        .iter()
        .filter(|row| compiled.residual_norm(&row[1..]) <= 3.0 * PAINLEVE_FINAL_DELTA)
        .count();
    let mean: Vec<f64> = grid.iter().map(|r| r[1]).collect();
    PainleveRun {
        within: ok as f64 / samples.len() as f64,
        dist_positive: trapezoid_l2(&mean, &reference.0),
        dist_negative: trapezoid_l2(&mean, &reference.1),
        summary: read_json(&dir.path().join("summary.json")),
    }
}

#[test]
fn criterion_8_painleve() {
    let _guard = serial();
    let column = |name: &str| -> Vec<f64> { read_csv(&fixture(name)).iter().map(|r| r[1]).collect() };
    let reference = (column("painleve_positive.csv"), column("painleve_negative.csv"));

    let free = painleve_run("painleve.json", &reference);
    let negative = painleve_run("painleve-negative.json", &reference);
    let alt = &free.summary["results"]["alternative"];
    let bf = alt["bayes_factor"].as_f64().unwrap_or(f64::NAN);
    let gaussian_ev = free.summary["evidence"]["log_evidence"].as_f64().unwrap_or(f64::NAN);
    let cauchy_ev = alt["evidence"]["log_evidence"].as_f64().unwrap_or(f64::NAN);

    let clauses = [
        free.within >= 0.9,
        free.dist_positive < free.dist_negative,
        negative.dist_negative < negative.dist_positive,
        gaussian_ev.is_finite() && cauchy_ev.is_finite() && bf > 1.0,
    ];
    report(
        8,
        "painleve",
        clauses.iter().all(|&c| c),
        &format!(
            "within 3 delta {:.3} (need 0.9); free L2 pos {:.3} neg {:.3}; constrained L2 pos {:.3} neg {:.3}; \
             log evidence gaussian {gaussian_ev:.3} cauchy {cauchy_ev:.3}, BF {bf:.3}",
            free.within, free.dist_positive, free.dist_negative, negative.dist_positive, negative.dist_negative
        ),
    );
}

#[test]
fn painleve_fixtures_solve_the_boundary_value_problem() {
    // Re-integrate from each fixture's recorded slope with classical RK4.
    for name in ["painleve_positive.csv", "painleve_negative.csv"] {
        let text = std::fs::read_to_string(fixture(name)).unwrap();
        let slope: f64 = text.lines().next().unwrap().rsplit(' ').next().unwrap().parse().unwrap();
        let stored: Vec<f64> = read_csv(&fixture(name)).iter().map(|r| r[1]).collect();
        assert_eq!(stored.len(), 201);
        let h = 1e-4;
        let (mut x, mut v) = (0.0f64, slope);
        let f = |t: f64, x: f64| x * x - t;
        let mut worst = 0.0f64;
        for i in 0..100_000 {
            let t = i as f64 * h;
            let (k1x, k1v) = (v, f(t, x));
            let (k2x, k2v) = (v + 0.5 * h * k1v, f(t + 0.5 * h, x + 0.5 * h * k1x));
            let (k3x, k3v) = (v + 0.5 * h * k2v, f(t + 0.5 * h, x + 0.5 * h * k2x));
            let (k4x, k4v) = (v + h * k3v, f(t + h, x + h * k3x));
            x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
            v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
            if (i + 1) % 500 == 0 {
                worst = worst.max((x - stored[(i + 1) / 500]).abs());
            }
        }
        // The positive branch amplifies perturbations, so RK4 and the
        // fixture agree to about 1e-6 rather than to the fixture's tolerance.
        assert!(worst < 1e-5, "{name}: {worst}");
        assert!((x - 10f64.sqrt()).abs() < 1e-5, "{name}: x(10) = {x}");
    }
}

// ---------------------------------------------------------------------------
// 9. Poisson
// ---------------------------------------------------------------------------

const FD_SIZE: usize = 101;

/// Solves the Poisson benchmark on a 101 x 101 grid with successive
/// over-relaxation. Dirichlet rows at `t_2 = 0, 1`; the Neumann sides use
/// mirrored ghost nodes. Indexed `[i1][i2]`.
fn poisson_finite_difference() -> Vec<Vec<f64>> {
    let n = FD_SIZE;
    let h = 1.0 / (n - 1) as f64;
    let mut u = vec![vec![0.5; n]; n];
    for (i, row) in u.iter_mut().enumerate() {
        row[0] = i as f64 * h;
        row[n - 1] = 1.0 - i as f64 * h;
    }
    let omega = 2.0 / (1.0 + (std::f64::consts::PI * h).sin());
    for _ in 0..20_000 {
        let mut change = 0.0f64;
        for i in 0..n {
            let (left, right) = (if i == 0 { 1 } else { i - 1 }, if i == n - 1 { n - 2 } else { i + 1 });
            for j in 1..n - 1 {
                let gs = 0.25 * (u[left][j] + u[right][j] + u[i][j - 1] + u[i][j + 1]);
                let delta = omega * (gs - u[i][j]);
                u[i][j] += delta;
                change = change.max(delta.abs());
            }
        }
        if change < 1e-13 {
            break;
        }
    }
    u
}

/// Cosine-series solution of the same problem, summed over odd modes.
fn poisson_series(t1: f64, t2: f64) -> f64 {
    use std::f64::consts::PI;
    let mut x = 0.5;
    for k in (1..40_000).step_by(2) {
        let a = k as f64 * PI;
        // sinh(a s) / sinh(a) without overflow.
        let ratio = |s: f64| (a * (s - 1.0)).exp() * (1.0 - (-2.0 * a * s).exp()) / (1.0 - (-2.0 * a).exp());
        x += 4.0 / (a * a) * (a * t1).cos() * (ratio(t2) - ratio(1.0 - t2));
    }
    x
}

#[test]
fn poisson_oracles_agree() {
    let fd = poisson_finite_difference();
    let mut worst = 0.0f64;
    for i in (0..FD_SIZE).step_by(5) {
        for j in (0..FD_SIZE).step_by(5) {
            let t = |k: usize| k as f64 / (FD_SIZE - 1) as f64;
            worst = worst.max((fd[i][j] - poisson_series(t(i), t(j))).abs());
        }
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn criterion_9_poisson() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    run_config(&workspace_root().join("configs/poisson.json"), dir.path(), &[]);
    let grid = read_csv(&dir.path().join("grid.csv"));
    let fd = poisson_finite_difference();
    let stride = (FD_SIZE - 1) / 20;
    let index = |t: f64| (t * 20.0).round() as usize;

    let mut sup = 0.0f64;
    let mut stds = Vec::with_capacity(grid.len());
    let mut at_points = BTreeMap::new();
    for row in &grid {
        let (i, j) = (index(row[0]), index(row[1]));
        sup = sup.max((row[2] - fd[i * stride][j * stride]).abs());
        stds.push(row[3]);
        at_points.insert((i, j), row[3]);
    }
    stds.sort_by(f64::total_cmp);
    let median = stds[stds.len() / 2];
    let dirichlet: Vec<f64> = infoops::poisson_design(16)
        .unwrap()
        .functionals
        .iter()
        .filter_map(|f| match f {
            Functional::PointEval { t } => Some(at_points[&(index(t[0]), index(t[1]))]),
            _ => None,
        })
        .collect();
    let worst_dirichlet = dirichlet.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pass = sup <= 0.1 && !dirichlet.is_empty() && worst_dirichlet < median && stds[0] >= 0.0;
    report(
        9,
        "poisson",
        pass,
        &format!(
            "sup error {sup:.4}; max std at {} dirichlet points {worst_dirichlet:.2e} vs median {median:.2e}",
            dirichlet.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Determinism
// ---------------------------------------------------------------------------

/// Shrinks the sampler settings of a shipped config so repeated runs are cheap.
fn reduced_config(name: &str, dir: &Path) -> PathBuf {
    let mut cfg = read_json(&workspace_root().join("configs").join(name));
    if let Some(s) = cfg.get_mut("sampler") {
        if s.get("particles").is_some() {
            s["particles"] = 40.into();
            s["schedule"]["temperatures"] = 20.into();
            s["mala"]["steps"] = 20.into();
        }
        if s.get("iterations").is_some() {
            s["iterations"] = 500.into();
        }
    }
    if let Some(p) = cfg.get_mut("pipeline") {
        p["ancestral_paths"] = 2000.into();
    }
    if let Some(r) = cfg.get_mut("risk") {
        r["draws"] = 20_000.into();
    }
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

/// Output bytes that must not vary: the CSVs, and the summary without its
/// wall-clock field.
fn deterministic_outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let bytes = if name.ends_with(".json") {
            let mut v = read_json(&path);
            v.as_object_mut().unwrap().remove("wall_time_seconds");
            serde_json::to_vec(&v).unwrap()
        } else {
            std::fs::read(&path).unwrap()
        };
        files.insert(name, bytes);
    }
    files
}

#[test]
fn criterion_10_determinism() {
    let _guard = serial();
    let scratch = tempfile::tempdir().unwrap();
    let experiments = [
        "quadrature.json",
        "poisson.json",
        "painleve.json",
        "pipeline-demo.json",
        "risk.json",
        "counterexample.json",
    ];
    let mut mismatches = Vec::new();
    let mut sample_files = 0;
    for name in experiments {
        let config = reduced_config(name, scratch.path());
        let mut runs = Vec::new();
        for (k, workers) in ["1", "1", "4"].iter().enumerate() {
            let out = scratch.path().join(format!("{name}-{k}"));
            run_config(&config, &out, &["--workers", workers, "--seed", "17"]);
            runs.push(deterministic_outputs(&out));
        }
        sample_files += runs[0].keys().filter(|k| k.as_str() == "samples.csv").count();
        if runs[0].is_empty() || runs.iter().any(|r| r != &runs[0]) {
            mismatches.push(name);
        }
    }
    report(
        10,
        "determinism",
        mismatches.is_empty() && sample_files >= 3,
        &format!(
            "{} experiments x 3 runs (workers 1, 1, 4), {sample_files} with sample CSVs; mismatches {mismatches:?}",
            experiments.len()
        ),
    );
}
