//! Pipelines of probabilistic numerical methods.
//!
//! A pipeline is a bipartite directed acyclic graph. Information nodes carry
//! values (observed data at the sources, quantities of interest downstream).
//! Method nodes consume an ordered list of information nodes and produce
//! exactly one. Executing a pipeline propagates beliefs from the sources to
//! the unique terminal node, either in closed form for Gaussian updaters or by
//! ancestral sampling.
//!
//! Coherence asks whether every non-source node is conditionally independent
//! of the earlier nodes given its parents in the dependence graph. When it
//! holds under the prior, the pipeline output equals the Bayesian posterior
//! for the terminal quantity.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conjugate::{self, GaussianPosterior, KernelSpec, LinearFunctional};
use crate::disintegration::{smc_nd, RelaxedTarget, SamplerConfig};
use crate::error::{invalid, Error, Result};
use crate::infoops::{Functional, InformationOperator};
use crate::rng::{self, tag};
use crate::seriesprior::SeriesPrior;

/// Tolerance on partial covariances when verifying independence from a witness.
pub const CI_TOLERANCE: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

/// A method node: ordered inputs (the in-edge labels 1..m are positions in
/// `inputs`) and the information node it produces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodNode {
    pub label: String,
    pub inputs: Vec<String>,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineGraph {
    pub info_nodes: Vec<String>,
    pub methods: Vec<MethodNode>,
    pub terminal: String,
}

impl PipelineGraph {
    /// Checks labels, bipartite structure, single producers and acyclicity.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for l in self.info_nodes.iter().chain(self.methods.iter().map(|m| &m.label)) {
            if !seen.insert(l.as_str()) {
                return Err(Error::Structure(format!("duplicate label '{l}'")));
            }
        }
        let info: BTreeSet<&str> = self.info_nodes.iter().map(String::as_str).collect();
        let mut producer: BTreeMap<&str, &str> = BTreeMap::new();
        for m in &self.methods {
            if m.inputs.is_empty() {
                return Err(Error::Structure(format!("method '{}' has no inputs", m.label)));
            }
            for i in m.inputs.iter().chain(std::iter::once(&m.output)) {
                if !info.contains(i.as_str()) {
                    return Err(Error::Structure(format!(
                        "method '{}' refers to unknown information node '{i}'",
                        m.label
                    )));
                }
            }
            if m.inputs.contains(&m.output) {
                return Err(Error::Structure(format!("method '{}' consumes its own output", m.label)));
            }
            if let Some(other) = producer.insert(m.output.as_str(), m.label.as_str()) {
                return Err(Error::Structure(format!(
                    "information node '{}' is produced by both '{other}' and '{}'",
                    m.output, m.label
                )));
            }
        }
        if !info.contains(self.terminal.as_str()) {
            return Err(Error::Structure(format!("unknown terminal node '{}'", self.terminal)));
        }
        if !producer.contains_key(self.terminal.as_str()) {
            return Err(Error::Structure("the terminal node must be produced by a method".into()));
        }
        for n in &self.info_nodes {
            let consumed = self.methods.iter().any(|m| m.inputs.contains(n));
            if *n == self.terminal && consumed {
                return Err(Error::Structure("the terminal node must not feed a method".into()));
            }
            if *n != self.terminal && !consumed {
                return Err(Error::Structure(format!("information node '{n}' is never used")));
            }
        }
        self.method_order().map(|_| ())
    }

    pub fn sources(&self) -> Vec<&str> {
        self.info_nodes
            .iter()
            .filter(|n| !self.methods.iter().any(|m| &m.output == *n))
            .map(String::as_str)
            .collect()
    }

    fn producer_of(&self, node: &str) -> Option<usize> {
        self.methods.iter().position(|m| m.output == node)
    }

    /// Method indices in an order where every input is available.
    fn method_order(&self) -> Result<Vec<usize>> {
        let mut ready: BTreeSet<&str> = self.sources().into_iter().collect();
        let mut done = vec![false; self.methods.len()];
        let mut order = Vec::with_capacity(self.methods.len());
        while order.len() < self.methods.len() {
            let next = (0..self.methods.len())
                .find(|&i| !done[i] && self.methods[i].inputs.iter().all(|n| ready.contains(n.as_str())));
            let Some(i) = next else {
                return Err(Error::Structure("the pipeline contains a cycle".into()));
            };
            done[i] = true;
            ready.insert(self.methods[i].output.as_str());
            order.push(i);
        }
        Ok(order)
    }
}

/// Information-node graph obtained by contracting every method node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependenceGraph {
    /// Topological order: sources first (in declaration order), terminal last.
    pub nodes: Vec<String>,
    pub edges: BTreeSet<(String, String)>,
}

impl DependenceGraph {
    pub fn parents(&self, node: &str) -> Vec<&str> {
        // Parents listed in topological order.
        self.nodes
            .iter()
            .filter(|p| self.edges.contains(&((*p).clone(), node.to_string())))
            .map(String::as_str)
            .collect()
    }

    pub fn position(&self, node: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == node)
    }
}

pub fn dependence_graph(graph: &PipelineGraph) -> Result<DependenceGraph> {
    graph.validate()?;
    let mut edges = BTreeSet::new();
    for m in &graph.methods {
        for i in &m.inputs {
            edges.insert((i.clone(), m.output.clone()));
        }
    }
    // Kahn ordering with ties broken by declaration order, so relabeling or
    // reordering method nodes leaves the result unchanged.
    let mut nodes: Vec<String> = graph.sources().into_iter().map(String::from).collect();
    while nodes.len() + 1 < graph.info_nodes.len() {
        let next = graph
            .info_nodes
            .iter()
            .find(|n| {
                **n != graph.terminal
                    && !nodes.contains(n)
                    && graph
                        .producer_of(n)
                        .is_some_and(|p| graph.methods[p].inputs.iter().all(|i| nodes.contains(i)))
            })
            .expect("validated graphs are acyclic");
        nodes.push(next.clone());
    }
    nodes.push(graph.terminal.clone());
    Ok(DependenceGraph { nodes, edges })
}

// ---------------------------------------------------------------------------
// Methods and compatibility
// ---------------------------------------------------------------------------

/// Shape of one method input and, for conjugate and disintegration
/// updaters, the functionals its values observe.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSlot {
    pub dim: usize,
    pub functionals: Option<Vec<LinearFunctional>>,
}

impl InputSlot {
    pub fn observing(functionals: Vec<LinearFunctional>) -> Self {
        Self {
            dim: functionals.len(),
            functionals: Some(functionals),
        }
    }

    pub fn vector(dim: usize) -> Self {
        Self { dim, functionals: None }
    }
}

/// Deterministic map `b` of a classical method, wrapped as a Dirac belief.
#[derive(Clone)]
pub struct DeterministicMap {
    pub name: String,
    pub map: Arc<dyn Fn(&[Vec<f64>]) -> Vec<f64> + Send + Sync>,
}

impl fmt::Debug for DeterministicMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DeterministicMap({})", self.name)
    }
}

/// Conditioning a series prior on possibly nonlinear information by SMC,
/// then reporting linear quantities of one drawn particle.
#[derive(Debug, Clone)]
pub struct DisintegrationUpdater {
    pub prior: SeriesPrior,
    /// Functionals observed through each input slot, in slot order.
    pub slot_functionals: Vec<Vec<Functional>>,
    pub sampler: SamplerConfig,
    pub particles: usize,
    pub qoi: Vec<LinearFunctional>,
}

#[derive(Debug, Clone)]
pub enum BeliefUpdater {
    /// Gaussian conditioning of `kernel` on all input functionals; outputs `qoi`.
    ConjugateGaussian {
        kernel: KernelSpec,
        qoi: Vec<LinearFunctional>,
    },
    Disintegration(Box<DisintegrationUpdater>),
    DeterministicMap(DeterministicMap),
    /// Elementwise sum of inputs of equal dimension.
    SumCombiner,
}

#[derive(Debug, Clone)]
pub struct MethodSpec {
    pub label: String,
    pub inputs: Vec<InputSlot>,
    pub output_dim: usize,
    pub updater: BeliefUpdater,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Violation {
    /// Methods bound to a graph node are missing or unknown.
    MissingMethod { method: String },
    /// Component count differs from the number of in-edges.
    ComponentCount { method: String, expected: usize, found: usize },
    /// Rule (i): a shared information node bound to different components.
    SharedInformation { node: String, methods: Vec<String> },
    /// Rule (ii): the parent's output space differs from the child's slot.
    SlotSpace {
        method: String,
        edge: usize,
        node: String,
        expected: usize,
        found: usize,
    },
    /// An updater-specific requirement, such as functionals for conjugate slots.
    Updater { method: String, reason: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingMethod { method } => write!(f, "no specification for method '{method}'"),
            Violation::ComponentCount { method, expected, found } => {
                write!(f, "method '{method}' has {found} components for {expected} in-edges")
            }
            Violation::SharedInformation { node, methods } => write!(
                f,
                "rule (i): node '{node}' binds different information in methods {}",
                methods.join(", ")
            ),
            Violation::SlotSpace {
                method,
                edge,
                node,
                expected,
                found,
            } => write!(
                f,
                "rule (ii): method '{method}' edge {edge} from '{node}' expects dimension {found} but the parent provides {expected}"
            ),
            Violation::Updater { method, reason } => write!(f, "method '{method}': {reason}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityReport {
    pub violations: Vec<Violation>,
    /// Non-fatal findings, such as duplicated information.
    pub warnings: Vec<String>,
}

impl CompatibilityReport {
    pub fn is_compatible(&self) -> bool {
        self.violations.is_empty()
    }
}

fn spec_for<'a>(methods: &'a [MethodSpec], label: &str) -> Option<&'a MethodSpec> {
    methods.iter().find(|m| m.label == label)
}

/// Checks that methods agree on shared information and that parent outputs
/// fit the child slots.
pub fn check_compatibility(graph: &PipelineGraph, methods: &[MethodSpec]) -> Result<CompatibilityReport> {
    graph.validate()?;
    let mut report = CompatibilityReport::default();
    // node -> (method label, slot) for every consumer
    let mut consumers: BTreeMap<&str, Vec<(&str, &InputSlot)>> = BTreeMap::new();
    for node in &graph.methods {
        let Some(spec) = spec_for(methods, &node.label) else {
            report.violations.push(Violation::MissingMethod {
                method: node.label.clone(),
            });
            continue;
        };
        if spec.inputs.len() != node.inputs.len() {
            report.violations.push(Violation::ComponentCount {
                method: node.label.clone(),
                expected: node.inputs.len(),
                found: spec.inputs.len(),
            });
            continue;
        }
        for (e, (input, slot)) in node.inputs.iter().zip(&spec.inputs).enumerate() {
            consumers.entry(input.as_str()).or_default().push((&node.label, slot));
            if let Some(parent) = graph.producer_of(input) {
                if let Some(pspec) = spec_for(methods, &graph.methods[parent].label) {
                    if pspec.output_dim != slot.dim {
                        report.violations.push(Violation::SlotSpace {
                            method: node.label.clone(),
                            edge: e + 1,
                            node: input.clone(),
                            expected: pspec.output_dim,
                            found: slot.dim,
                        });
                    }
                }
            }
        }
        check_updater(spec, &mut report);
    }
    for (node, uses) in &consumers {
        let first = uses[0].1;
        if uses.iter().any(|(_, s)| *s != first) {
            report.violations.push(Violation::SharedInformation {
                node: node.to_string(),
                methods: uses.iter().map(|(m, _)| m.to_string()).collect(),
            });
        }
    }
    // Identical information under two labels is allowed but flagged.
    let sources = graph.sources();
    for (i, a) in sources.iter().enumerate() {
        for b in &sources[i + 1..] {
            let fa = consumers.get(a).and_then(|u| u[0].1.functionals.as_ref());
            let fb = consumers.get(b).and_then(|u| u[0].1.functionals.as_ref());
            if let (Some(fa), Some(fb)) = (fa, fb) {
                if fa == fb {
                    report
                        .warnings
                        .push(format!("information nodes '{a}' and '{b}' carry identical information"));
                }
            }
        }
    }
    Ok(report)
}

fn check_updater(spec: &MethodSpec, report: &mut CompatibilityReport) {
    let mut fail = |reason: String| {
        report.violations.push(Violation::Updater {
            method: spec.label.clone(),
            reason,
        })
    };
    match &spec.updater {
        BeliefUpdater::ConjugateGaussian { qoi, .. } => {
            for (e, s) in spec.inputs.iter().enumerate() {
                match &s.functionals {
                    Some(f) if f.len() == s.dim => {}
                    _ => fail(format!("slot {} needs one functional per component", e + 1)),
                }
            }
            if qoi.len() != spec.output_dim {
                fail(format!("{} quantities for output dimension {}", qoi.len(), spec.output_dim));
            }
        }
        BeliefUpdater::Disintegration(d) => {
            if d.slot_functionals.len() != spec.inputs.len()
                || d.slot_functionals.iter().zip(&spec.inputs).any(|(f, s)| f.len() != s.dim)
            {
                fail("slot functionals do not match the input dimensions".into());
            }
            if d.qoi.len() != spec.output_dim {
                fail(format!("{} quantities for output dimension {}", d.qoi.len(), spec.output_dim));
            }
        }
        BeliefUpdater::SumCombiner => {
            if spec.inputs.iter().any(|s| s.dim != spec.output_dim) {
                fail("sum inputs must match the output dimension".into());
            }
        }
        BeliefUpdater::DeterministicMap(_) => {}
    }
}

// ---------------------------------------------------------------------------
// Coherence
// ---------------------------------------------------------------------------

/// `node ⫫ independent_of | given`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CiStatement {
    pub node: String,
    pub independent_of: Vec<String>,
    pub given: Vec<String>,
}

impl fmt::Display for CiStatement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ⫫ {{{}}} | {{{}}}",
            self.node,
            self.independent_of.join(", "),
            self.given.join(", ")
        )
    }
}

/// Joint Gaussian law of the node variables, used to verify independences.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWitness {
    pub covariance: DMatrix<f64>,
    /// Rows of `covariance` belonging to each node.
    pub blocks: BTreeMap<String, Vec<usize>>,
}

impl GaussianWitness {
    /// Witness induced by a Gaussian prior and the functionals defining each node.
    pub fn from_kernel(kernel: &KernelSpec, nodes: &[(String, Vec<LinearFunctional>)]) -> Result<Self> {
        let mut all = Vec::new();
        let mut blocks = BTreeMap::new();
        for (label, fs) in nodes {
            let start = all.len();
            all.extend(fs.iter().cloned());
            blocks.insert(label.clone(), (start..all.len()).collect());
        }
        Ok(Self {
            covariance: conjugate::gram(kernel, &all)?,
            blocks,
        })
    }

    fn indices(&self, labels: &[String]) -> Option<Vec<usize>> {
        let mut out = Vec::new();
        for l in labels {
            out.extend(self.blocks.get(l)?.iter().copied());
        }
        Some(out)
    }

    /// Largest absolute partial covariance between `node` and `independent_of`
    /// given `given`, or `None` when a label is missing.
    pub fn partial_covariance(&self, s: &CiStatement) -> Option<f64> {
        let a = self.indices(std::slice::from_ref(&s.node))?;
        let b = self.indices(&s.independent_of)?;
        let c = self.indices(&s.given)?;
        let sub = |r: &[usize], q: &[usize]| DMatrix::from_fn(r.len(), q.len(), |i, j| self.covariance[(r[i], q[j])]);
        let mut cov = sub(&a, &b);
        if !c.is_empty() {
            let cc = sub(&c, &c);
            let scale = cc.diagonal().amax().max(f64::MIN_POSITIVE);
            // Deterministic relations among the conditioning nodes make cc singular.
            let inv = cc.pseudo_inverse(1e-12 * scale).ok()?;
            cov -= sub(&a, &c) * inv * sub(&c, &b);
        }
        Some(cov.amax())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoherenceDeclaration {
    pub statements: Vec<CiStatement>,
    #[serde(skip)]
    pub witness: Option<GaussianWitness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub coherent: bool,
    /// Requirements contradicted by the witness.
    pub incoherent: Vec<CiStatement>,
    /// Requirements neither declared nor checkable.
    pub undeclared: Vec<CiStatement>,
    pub verified: Vec<CiStatement>,
    pub declared: Vec<CiStatement>,
}

/// The independences required for coherence, one per non-source node with
/// a nonempty set of earlier non-parent nodes.
pub fn required_independences(g: &DependenceGraph, sources: usize) -> Vec<CiStatement> {
    (sources..g.nodes.len())
        .filter_map(|j| {
            let node = &g.nodes[j];
            let parents: Vec<String> = g.parents(node).into_iter().map(String::from).collect();
            let rest: Vec<String> = g.nodes[..j].iter().filter(|n| !parents.contains(n)).cloned().collect();
            (!rest.is_empty()).then(|| CiStatement {
                node: node.clone(),
                independent_of: rest,
                given: parents,
            })
        })
        .collect()
}

fn declared_covers(d: &CiStatement, r: &CiStatement) -> bool {
    let given_a: BTreeSet<_> = d.given.iter().collect();
    let given_b: BTreeSet<_> = r.given.iter().collect();
    let ind: BTreeSet<_> = d.independent_of.iter().collect();
    d.node == r.node && given_a == given_b && r.independent_of.iter().all(|x| ind.contains(x))
}

pub fn check_coherence(graph: &PipelineGraph, decl: &CoherenceDeclaration) -> Result<CoherenceReport> {
    let g = dependence_graph(graph)?;
    let labels: BTreeSet<&str> = g.nodes.iter().map(String::as_str).collect();
    for s in &decl.statements {
        let all = std::iter::once(&s.node).chain(&s.independent_of).chain(&s.given);
        for l in all {
            if !labels.contains(l.as_str()) {
                return Err(invalid("coherence", format!("unknown node '{l}' in a declaration")));
            }
        }
    }
    let mut report = CoherenceReport {
        coherent: true,
        incoherent: Vec::new(),
        undeclared: Vec::new(),
        verified: Vec::new(),
        declared: Vec::new(),
    };
    for r in required_independences(&g, graph.sources().len()) {
        if decl.statements.iter().any(|d| declared_covers(d, &r)) {
            report.declared.push(r);
            continue;
        }
        match decl.witness.as_ref().and_then(|w| w.partial_covariance(&r)) {
            Some(v) if v <= CI_TOLERANCE => report.verified.push(r),
            Some(_) => report.incoherent.push(r),
            None => report.undeclared.push(r),
        }
    }
    report.coherent = report.incoherent.is_empty() && report.undeclared.is_empty();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

/// Belief about one information node.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeBelief {
    Dirac(Vec<f64>),
    Gaussian(GaussianPosterior),
    /// Equally weighted sample paths.
    Empirical(Vec<Vec<f64>>),
}

impl NodeBelief {
    pub fn mean(&self) -> Vec<f64> {
        match self {
            NodeBelief::Dirac(v) => v.clone(),
            NodeBelief::Gaussian(g) => g.mean.iter().copied().collect(),
            NodeBelief::Empirical(s) => {
                let n = s.len() as f64;
                let d = s.first().map_or(0, Vec::len);
                (0..d).map(|i| s.iter().map(|x| x[i]).sum::<f64>() / n).collect()
            }
        }
    }

    pub fn variance(&self) -> Vec<f64> {
        match self {
            NodeBelief::Dirac(v) => vec![0.0; v.len()],
            NodeBelief::Gaussian(g) => g.variances(),
            NodeBelief::Empirical(s) => {
                let m = self.mean();
                let n = s.len() as f64;
                (0..m.len())
                    .map(|i| s.iter().map(|x| (x[i] - m[i]).powi(2)).sum::<f64>() / (n - 1.0).max(1.0))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Closed-form composition of Gaussian beliefs.
    AnalyticGaussian,
    /// Independent sample paths through the pipeline.
    Ancestral { paths: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub terminal: NodeBelief,
    pub nodes: BTreeMap<String, NodeBelief>,
}

fn draw_gaussian<R: Rng + ?Sized>(g: &GaussianPosterior, rng: &mut R) -> Vec<f64> {
    let d = g.dim();
    let xi = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)));
    let factor = gaussian_factor(&g.covariance);
    (&g.mean + factor * xi).iter().copied().collect()
}

/// A square root `F` with `F F^T = cov`, robust to semi-definiteness.
fn gaussian_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = cov.clone().cholesky() {
        return c.l();
    }
    let eig = cov.clone().symmetric_eigen();
    let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
}

fn conjugate_update(kernel: &KernelSpec, spec: &MethodSpec, qoi: &[LinearFunctional], inputs: &[Vec<f64>]) -> Result<GaussianPosterior> {
    let mut obs = Vec::new();
    let mut values = Vec::new();
    for (slot, v) in spec.inputs.iter().zip(inputs) {
        obs.extend(slot.functionals.iter().flatten().cloned());
        values.extend_from_slice(v);
    }
    conjugate::condition(kernel, &obs, &values, qoi)
}

fn disintegration_draw(d: &DisintegrationUpdater, inputs: &[Vec<f64>], seed: u64) -> Result<Vec<f64>> {
    let functionals: Vec<Functional> = d.slot_functionals.iter().flatten().cloned().collect();
    let observed: Vec<f64> = inputs.iter().flatten().copied().collect();
    let op = InformationOperator::new(functionals, observed)?;
    let compiled = op.compile(d.prior.basis(), d.prior.offset())?;
    let target = RelaxedTarget::new(&d.prior, &compiled, &[], d.sampler.kernel);
    let mut cfg = d.sampler.clone();
    cfg.seed = seed;
    let out = smc_nd(&target, d.particles, &cfg)?;
    if let Some(rung) = out.ensemble.failed_at {
        return Err(Error::EvidenceUnavailable { rung });
    }
    let mut r = rng::stream(seed, &[tag::DRAW]);
    let pick = crate::disintegration::multinomial_resample(&out.ensemble.weights, 1, &mut r)[0];
    let state = d.prior.state(out.ensemble.states[pick].clone())?;
    d.qoi.iter().map(|q| q.eval(&state)).collect()
}

/// Belief produced by one method from fixed input values.
fn apply_fixed(spec: &MethodSpec, inputs: &[Vec<f64>], seed: u64) -> Result<NodeBelief> {
    Ok(match &spec.updater {
        BeliefUpdater::ConjugateGaussian { kernel, qoi } => NodeBelief::Gaussian(conjugate_update(kernel, spec, qoi, inputs)?),
        BeliefUpdater::SumCombiner => NodeBelief::Dirac(sum_vectors(inputs, spec.output_dim)),
        BeliefUpdater::DeterministicMap(m) => NodeBelief::Dirac((m.map)(inputs)),
        BeliefUpdater::Disintegration(d) => NodeBelief::Dirac(disintegration_draw(d, inputs, seed)?),
    })
}

fn sum_vectors(inputs: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for v in inputs {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    out
}

fn require_clean(graph: &PipelineGraph, methods: &[MethodSpec]) -> Result<()> {
    let report = check_compatibility(graph, methods)?;
    if let Some(v) = report.violations.first() {
        return Err(Error::Structure(format!("incompatible pipeline: {v}")));
    }
    Ok(())
}

fn source_values<'a>(graph: &PipelineGraph, methods: &[MethodSpec], values: &'a BTreeMap<String, Vec<f64>>) -> Result<HashMap<String, &'a Vec<f64>>> {
    let mut out = HashMap::new();
    for s in graph.sources() {
        let v = values
            .get(s)
            .ok_or_else(|| invalid("sources", format!("no value for source '{s}'")))?;
        for m in &graph.methods {
            if let Some(e) = m.inputs.iter().position(|i| i == s) {
                let dim = spec_for(methods, &m.label).expect("checked").inputs[e].dim;
                if dim != v.len() {
                    return Err(Error::Dimension(format!("source '{s}' has {} values for a slot of dimension {dim}", v.len())));
                }
            }
        }
        out.insert(s.to_string(), v);
    }
    Ok(out)
}

/// Propagates beliefs from the source values to the terminal node.
pub fn execute(
    graph: &PipelineGraph,
    methods: &[MethodSpec],
    sources: &BTreeMap<String, Vec<f64>>,
    mode: ExecutionMode,
) -> Result<PipelineOutput> {
    require_clean(graph, methods)?;
    let fixed = source_values(graph, methods, sources)?;
    let order = graph.method_order()?;
    match mode {
        ExecutionMode::AnalyticGaussian => execute_analytic(graph, methods, &fixed, &order),
        ExecutionMode::Ancestral { paths, seed } => execute_ancestral(graph, methods, &fixed, &order, paths, seed),
    }
}

fn execute_analytic(
    graph: &PipelineGraph,
    methods: &[MethodSpec],
    fixed: &HashMap<String, &Vec<f64>>,
    order: &[usize],
) -> Result<PipelineOutput> {
    let mut beliefs: BTreeMap<String, NodeBelief> = fixed.iter().map(|(k, v)| (k.clone(), NodeBelief::Dirac((*v).clone()))).collect();
    for &i in order {
        let node = &graph.methods[i];
        let spec = spec_for(methods, &node.label).expect("checked");
        let inputs: Vec<&NodeBelief> = node.inputs.iter().map(|n| &beliefs[n]).collect();
        let all_dirac: Option<Vec<Vec<f64>>> = inputs
            .iter()
            .map(|b| match b {
                NodeBelief::Dirac(v) => Some(v.clone()),
                _ => None,
            })
            .collect();
        let belief = match (&spec.updater, all_dirac) {
            (BeliefUpdater::Disintegration(_), _) => {
                return Err(Error::Mode {
                    method: node.label.clone(),
                })
            }
            (_, Some(values)) => apply_fixed(spec, &values, 0)?,
            (BeliefUpdater::SumCombiner, None) => {
                // Independent Gaussian (or Dirac) inputs add in mean and covariance.
                let d = spec.output_dim;
                let mut mean = DVector::zeros(d);
                let mut cov = DMatrix::zeros(d, d);
                for b in inputs {
                    match b {
                        NodeBelief::Dirac(v) => mean += DVector::from_column_slice(v),
                        NodeBelief::Gaussian(g) => {
                            mean += &g.mean;
                            cov += &g.covariance;
                        }
                        NodeBelief::Empirical(_) => unreachable!("analytic mode never stores samples"),
                    }
                }
                NodeBelief::Gaussian(GaussianPosterior { mean, covariance: cov })
            }
            (_, None) => {
                return Err(Error::Mode {
                    method: node.label.clone(),
                })
            }
        };
        beliefs.insert(node.output.clone(), belief);
    }
    Ok(PipelineOutput {
        terminal: beliefs[&graph.terminal].clone(),
        nodes: beliefs,
    })
}

fn execute_ancestral(
    graph: &PipelineGraph,
    methods: &[MethodSpec],
    fixed: &HashMap<String, &Vec<f64>>,
    order: &[usize],
    paths: usize,
    seed: u64,
) -> Result<PipelineOutput> {
    if paths == 0 {
        return Err(invalid("paths", "need at least one sample path"));
    }
    // Beliefs that depend on sources only are shared by every path.
    let mut shared: HashMap<usize, NodeBelief> = HashMap::new();
    let mut deterministic: BTreeSet<&str> = fixed.keys().map(String::as_str).collect();
    for &i in order {
        let node = &graph.methods[i];
        let spec = spec_for(methods, &node.label).expect("checked");
        if matches!(spec.updater, BeliefUpdater::Disintegration(_)) {
            continue;
        }
        if node.inputs.iter().all(|n| deterministic.contains(n.as_str())) {
            let values: Vec<Vec<f64>> = node.inputs.iter().map(|n| fixed[n].clone()).collect();
            let b = apply_fixed(spec, &values, 0)?;
            if matches!(b, NodeBelief::Dirac(_)) {
                deterministic.insert(node.output.as_str());
            }
            shared.insert(i, b);
        }
    }
    let samples: Vec<BTreeMap<String, Vec<f64>>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut values: BTreeMap<String, Vec<f64>> = fixed.iter().map(|(k, v)| (k.clone(), (*v).clone())).collect();
            for &i in order {
                let node = &graph.methods[i];
                let spec = spec_for(methods, &node.label).expect("checked");
                let mut r = rng::stream(seed, &[tag::PATH, p as u64, i as u64]);
                let belief = match shared.get(&i) {
                    Some(b) => b.clone(),
                    None => {
                        let inputs: Vec<Vec<f64>> = node.inputs.iter().map(|n| values[n].clone()).collect();
                        apply_fixed(spec, &inputs, r.random())?
                    }
                };
                let draw = match belief {
                    NodeBelief::Dirac(v) => v,
                    NodeBelief::Gaussian(g) => draw_gaussian(&g, &mut r),
                    NodeBelief::Empirical(_) => unreachable!("updaters never return samples"),
                };
                values.insert(node.output.clone(), draw);
            }
            Ok(values)
        })
        .collect::<Result<_>>()?;
    let mut nodes = BTreeMap::new();
    for n in &graph.info_nodes {
        let belief = match fixed.get(n) {
            Some(v) => NodeBelief::Dirac((*v).clone()),
            None => NodeBelief::Empirical(samples.iter().map(|s| s[n].clone()).collect()),
        };
        nodes.insert(n.clone(), belief);
    }
    Ok(PipelineOutput {
        terminal: nodes[&graph.terminal].clone(),
        nodes,
    })
}

// ---------------------------------------------------------------------------
// Distributed integration example
// ---------------------------------------------------------------------------

/// Integration of `x` over `[0, 1]` split at `1/2`, with knots
/// `t_i = i / (2m)` for `i = 1..2m` (the knot at zero is implied by the
/// process starting at zero).
///
/// Sources: `y1 = x(t_1..t_{m-1})`, `y2 = x(t_m)`, `y3 = x(t_{m+1}..t_{2m})`.
/// Method `m1` integrates over `[0, 1/2]` from `y1, y2`, method `m2` over
/// `[1/2, 1]` from `y2, y3`, and `m3` adds the two halves into `y6`.
#[derive(Debug, Clone)]
pub struct DistributedIntegration {
    pub graph: PipelineGraph,
    pub methods: Vec<MethodSpec>,
    pub knots: Vec<f64>,
    pub node_functionals: Vec<(String, Vec<LinearFunctional>)>,
}

impl DistributedIntegration {
    pub fn new(m: usize, kernel: &KernelSpec) -> Result<Self> {
        if m < 2 {
            return Err(invalid("m", "need m >= 2 knots per half"));
        }
        let knots: Vec<f64> = (1..=2 * m).map(|i| i as f64 / (2 * m) as f64).collect();
        let points = |r: std::ops::Range<usize>| -> Vec<LinearFunctional> { knots[r].iter().map(|&t| LinearFunctional::point_1d(t)).collect() };
        let y1 = points(0..m - 1);
        let y2 = points(m - 1..m);
        let y3 = points(m..2 * m);
        let lbl = |s: &str| s.to_string();
        let graph = PipelineGraph {
            info_nodes: ["y1", "y2", "y3", "y4", "y5", "y6"].map(lbl).to_vec(),
            methods: vec![
                MethodNode {
                    label: lbl("m1"),
                    inputs: vec![lbl("y1"), lbl("y2")],
                    output: lbl("y4"),
                },
                MethodNode {
                    label: lbl("m2"),
                    inputs: vec![lbl("y2"), lbl("y3")],
                    output: lbl("y5"),
                },
                MethodNode {
                    label: lbl("m3"),
                    inputs: vec![lbl("y4"), lbl("y5")],
                    output: lbl("y6"),
                },
            ],
            terminal: lbl("y6"),
        };
        let left = LinearFunctional::integral(0.0, 0.5)?;
        let right = LinearFunctional::integral(0.5, 1.0)?;
        let methods = vec![
            MethodSpec {
                label: lbl("m1"),
                inputs: vec![InputSlot::observing(y1.clone()), InputSlot::observing(y2.clone())],
                output_dim: 1,
                updater: BeliefUpdater::ConjugateGaussian {
                    kernel: kernel.clone(),
                    qoi: vec![left.clone()],
                },
            },
            MethodSpec {
                label: lbl("m2"),
                inputs: vec![InputSlot::observing(y2.clone()), InputSlot::observing(y3.clone())],
                output_dim: 1,
                updater: BeliefUpdater::ConjugateGaussian {
                    kernel: kernel.clone(),
                    qoi: vec![right.clone()],
                },
            },
            MethodSpec {
                label: lbl("m3"),
                inputs: vec![InputSlot::vector(1), InputSlot::vector(1)],
                output_dim: 1,
                updater: BeliefUpdater::SumCombiner,
            },
        ];
        let node_functionals = vec![
            (lbl("y1"), y1),
            (lbl("y2"), y2),
            (lbl("y3"), y3),
            (lbl("y4"), vec![left]),
            (lbl("y5"), vec![right]),
            (lbl("y6"), vec![LinearFunctional::integral(0.0, 1.0)?]),
        ];
        Ok(Self {
            graph,
            methods,
            knots,
            node_functionals,
        })
    }

    /// Source values from evaluating `f` at the knots.
    pub fn sources(&self, f: impl Fn(f64) -> f64) -> BTreeMap<String, Vec<f64>> {
        let m = self.knots.len() / 2;
        let vals: Vec<f64> = self.knots.iter().map(|&t| f(t)).collect();
        BTreeMap::from([
            ("y1".to_string(), vals[..m - 1].to_vec()),
            ("y2".to_string(), vals[m - 1..m].to_vec()),
            ("y3".to_string(), vals[m..].to_vec()),
        ])
    }

    pub fn witness(&self, kernel: &KernelSpec) -> Result<GaussianWitness> {
        GaussianWitness::from_kernel(kernel, &self.node_functionals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chebbasis::{BasisSet, DomainMap, Offset};
    use crate::disintegration::{MalaConfig, RelaxationKernel, TemperatureSchedule};
    use crate::seriesprior::{PriorFamily, ScaleSequence};

    fn f(t: f64) -> f64 {
        (3.0 * t).sin() + 0.5 * t
    }

    fn labels(edges: &[(&str, &str)]) -> BTreeSet<(String, String)> {
        edges.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn example_pipeline_is_compatible() {
        let ex = DistributedIntegration::new(3, &KernelSpec::wiener()).unwrap();
        let r = check_compatibility(&ex.graph, &ex.methods).unwrap();
        assert!(r.is_compatible(), "{:?}", r.violations);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn slot_space_violation_names_method_and_edge() {
        let mut ex = DistributedIntegration::new(2, &KernelSpec::wiener()).unwrap();
        ex.methods[2].inputs[1] = InputSlot::vector(2);
        let r = check_compatibility(&ex.graph, &ex.methods).unwrap();
        assert!(r.violations.iter().any(|v| matches!(v,
            Violation::SlotSpace { method, edge: 2, .. } if method == "m3")));
    }

    #[test]
    fn shared_information_must_agree() {
        let mut ex = DistributedIntegration::new(2, &KernelSpec::wiener()).unwrap();
        ex.methods[1].inputs[0] = InputSlot::observing(vec![LinearFunctional::point_1d(0.3)]);
        let r = check_compatibility(&ex.graph, &ex.methods).unwrap();
        assert!(r.violations.iter().any(|v| matches!(v,
            Violation::SharedInformation { node, .. } if node == "y2")));
    }

    fn single_method() -> (PipelineGraph, Vec<MethodSpec>) {
        let graph = PipelineGraph {
            info_nodes: vec!["a".into(), "q".into()],
            methods: vec![MethodNode {
                label: "m".into(),
                inputs: vec!["a".into()],
                output: "q".into(),
            }],
            terminal: "q".into(),
        };
        let methods = vec![MethodSpec {
            label: "m".into(),
            inputs: vec![InputSlot::observing(vec![LinearFunctional::point_1d(0.5)])],
            output_dim: 1,
            updater: BeliefUpdater::ConjugateGaussian {
                kernel: KernelSpec::wiener(),
                qoi: vec![LinearFunctional::integral(0.0, 1.0).unwrap()],
            },
        }];
        (graph, methods)
    }

    #[test]
    fn single_method_pipeline() {
        let (graph, methods) = single_method();
        assert!(check_compatibility(&graph, &methods).unwrap().is_compatible());
        let g = dependence_graph(&graph).unwrap();
        assert_eq!(g.edges, labels(&[("a", "q")]));
        let c = check_coherence(&graph, &CoherenceDeclaration::default()).unwrap();
        assert!(c.coherent);
    }

    #[test]
    fn serial_methods_form_a_path() {
        let graph = PipelineGraph {
            info_nodes: vec!["a".into(), "b".into(), "c".into()],
            methods: vec![
                MethodNode {
                    label: "second".into(),
                    inputs: vec!["b".into()],
                    output: "c".into(),
                },
                MethodNode {
                    label: "first".into(),
                    inputs: vec!["a".into()],
                    output: "b".into(),
                },
            ],
            terminal: "c".into(),
        };
        let g = dependence_graph(&graph).unwrap();
        assert_eq!(g.nodes, vec!["a", "b", "c"]);
        assert_eq!(g.edges, labels(&[("a", "b"), ("b", "c")]));
    }

    #[test]
    fn dependence_graph_of_example() {
        let ex = DistributedIntegration::new(2, &KernelSpec::wiener()).unwrap();
        let g = dependence_graph(&ex.graph).unwrap();
        assert_eq!(
            g.edges,
            labels(&[("y1", "y4"), ("y2", "y4"), ("y2", "y5"), ("y3", "y5"), ("y4", "y6"), ("y5", "y6")])
        );
        assert_eq!(g.nodes.first().map(String::as_str), Some("y1"));
        assert_eq!(g.nodes.last().map(String::as_str), Some("y6"));
        // Relabeling and reordering the method nodes leaves the graph unchanged.
        let mut relabeled = ex.graph.clone();
        relabeled.methods.reverse();
        for (i, m) in relabeled.methods.iter_mut().enumerate() {
            m.label = format!("method-{i}");
        }
        assert_eq!(dependence_graph(&relabeled).unwrap(), g);
    }

    #[test]
    fn structural_errors() {
        let (mut graph, _) = single_method();
        graph.methods.push(MethodNode {
            label: "loop".into(),
            inputs: vec!["q".into()],
            output: "a".into(),
        });
        assert!(graph.validate().is_err());
        let (mut graph, _) = single_method();
        graph.terminal = "a".into();
        assert!(graph.validate().is_err());
    }

    #[test]
    fn wiener_witness_is_coherent() {
        let k = KernelSpec::wiener();
        let ex = DistributedIntegration::new(3, &k).unwrap();
        let decl = CoherenceDeclaration {
            statements: vec![],
            witness: Some(ex.witness(&k).unwrap()),
        };
        let r = check_coherence(&ex.graph, &decl).unwrap();
        assert!(r.coherent, "{:?}", r.incoherent);
        assert_eq!(r.verified.len(), 3);
    }

    #[test]
    fn integrated_wiener_witness_is_incoherent() {
        let k = KernelSpec::integrated_wiener();
        let ex = DistributedIntegration::new(3, &k).unwrap();
        let decl = CoherenceDeclaration {
            statements: vec![],
            witness: Some(ex.witness(&k).unwrap()),
        };
        let r = check_coherence(&ex.graph, &decl).unwrap();
        assert!(!r.coherent);
        let first = &r.incoherent[0];
        assert_eq!(first.node, "y4");
        assert_eq!(first.independent_of, vec!["y3"]);
        assert_eq!(first.given, vec!["y1", "y2"]);
    }

    #[test]
    fn declarations_satisfy_requirements() {
        let ex = DistributedIntegration::new(2, &KernelSpec::wiener()).unwrap();
        let g = dependence_graph(&ex.graph).unwrap();
        let required = required_independences(&g, 3);
        let decl = CoherenceDeclaration {
            statements: required.clone(),
            witness: None,
        };
        let r = check_coherence(&ex.graph, &decl).unwrap();
        assert!(r.coherent);
        assert_eq!(r.declared, required);
        let r = check_coherence(&ex.graph, &CoherenceDeclaration::default()).unwrap();
        assert!(!r.coherent);
        assert_eq!(r.undeclared.len(), 3);
    }

    #[test]
    fn sum_of_diracs_is_dirac() {
        let graph = PipelineGraph {
            info_nodes: vec!["a".into(), "b".into(), "s".into()],
            methods: vec![MethodNode {
                label: "add".into(),
                inputs: vec!["a".into(), "b".into()],
                output: "s".into(),
            }],
            terminal: "s".into(),
        };
        let methods = vec![MethodSpec {
            label: "add".into(),
            inputs: vec![InputSlot::vector(1), InputSlot::vector(1)],
            output_dim: 1,
            updater: BeliefUpdater::SumCombiner,
        }];
        let src = BTreeMap::from([("a".to_string(), vec![1.25]), ("b".to_string(), vec![-0.5])]);
        let out = execute(&graph, &methods, &src, ExecutionMode::AnalyticGaussian).unwrap();
        assert_eq!(out.terminal, NodeBelief::Dirac(vec![0.75]));
    }

    #[test]
    fn wiener_pipeline_equals_joint_quadrature() {
        let k = KernelSpec::wiener();
        for m in [2, 3, 5] {
            let ex = DistributedIntegration::new(m, &k).unwrap();
            let out = execute(&ex.graph, &ex.methods, &ex.sources(f), ExecutionMode::AnalyticGaussian).unwrap();
            let vals: Vec<f64> = ex.knots.iter().map(|&t| f(t)).collect();
            let joint = conjugate::bq_posterior(&k, &ex.knots, &vals).unwrap();
            assert!((out.terminal.mean()[0] - joint.mean[0]).abs() < 1e-8);
            assert!((out.terminal.variance()[0] - joint.covariance[(0, 0)]).abs() < 1e-8);
        }
    }

    #[test]
    fn integrated_wiener_pipeline_differs_from_joint() {
        let k = KernelSpec::integrated_wiener();
        let gap = [2, 3, 5]
            .iter()
            .map(|&m| {
                let ex = DistributedIntegration::new(m, &k).unwrap();
                let out = execute(&ex.graph, &ex.methods, &ex.sources(f), ExecutionMode::AnalyticGaussian).unwrap();
                let vals: Vec<f64> = ex.knots.iter().map(|&t| f(t)).collect();
                let joint = conjugate::bq_posterior(&k, &ex.knots, &vals).unwrap();
                (out.terminal.variance()[0] - joint.covariance[(0, 0)]).abs()
            })
            .fold(0.0, f64::max);
        assert!(gap > 1e-6, "{gap}");
    }

    #[test]
    fn ancestral_matches_analytic() {
        let k = KernelSpec::wiener();
        let ex = DistributedIntegration::new(2, &k).unwrap();
        let src = ex.sources(f);
        let exact = execute(&ex.graph, &ex.methods, &src, ExecutionMode::AnalyticGaussian).unwrap();
        let mode = ExecutionMode::Ancestral { paths: 100_000, seed: 5 };
        let sampled = execute(&ex.graph, &ex.methods, &src, mode).unwrap();
        let (m, v) = (exact.terminal.mean()[0], exact.terminal.variance()[0]);
        let n = 100_000f64;
        assert!((sampled.terminal.mean()[0] - m).abs() < 3.0 * (v / n).sqrt());
        assert!((sampled.terminal.variance()[0] - v).abs() < 3.0 * v * (2.0 / n).sqrt());
        let again = execute(&ex.graph, &ex.methods, &src, mode).unwrap();
        assert_eq!(sampled.terminal, again.terminal);
    }

    #[test]
    fn analytic_mode_rejects_disintegration() {
        let basis = Arc::new(BasisSet::chebyshev_1d(3, DomainMap::interval(0.0, 1.0).unwrap()).unwrap());
        let prior = SeriesPrior::new(
            PriorFamily::Gaussian,
            ScaleSequence::PowerDecay { alpha: 1.0, p: 2.0 },
            Offset::Zero,
            basis,
        )
        .unwrap();
        let (graph, mut methods) = single_method();
        methods[0].updater = BeliefUpdater::Disintegration(Box::new(DisintegrationUpdater {
            prior,
            slot_functionals: vec![vec![Functional::point_1d(0.5)]],
            sampler: SamplerConfig::new(
                RelaxationKernel::SquaredExponential,
                TemperatureSchedule::log_uniform(1.0, 0.05, 8).unwrap(),
                MalaConfig::new(0.1, 3),
                0,
            ),
            particles: 50,
            qoi: vec![LinearFunctional::point_1d(0.5)],
        }));
        let src = BTreeMap::from([("a".to_string(), vec![0.2])]);
        assert!(matches!(
            execute(&graph, &methods, &src, ExecutionMode::AnalyticGaussian),
            Err(Error::Mode { .. })
        ));
        let out = execute(&graph, &methods, &src, ExecutionMode::Ancestral { paths: 4, seed: 1 }).unwrap();
        for v in match &out.terminal {
            NodeBelief::Empirical(s) => s.clone(),
            other => panic!("{other:?}"),
        } {
            assert!((v[0] - 0.2).abs() < 0.2);
        }
    }
}
