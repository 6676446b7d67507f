//! Training objectives as `(value, gradient)` evaluators. Everything is
//! phrased as maximization.

use std::sync::Mutex;

use crate::chain::ChainLattice;
use crate::error::{Error, Result};
use crate::features::{ChainInstance, FeatureSpace};
use crate::graph::{chain_graph_from_instance, encode, FactorGraph, GraphPotentials};
use crate::inference::{loopy_bp_warm, tree_bp, BeliefState, BpConfig, MessageSet};
use crate::logspace::{lse, LOG_ZERO};

pub const DEFAULT_SIGMA2: f64 = 10.0;
pub const DEFAULT_L1_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceKind {
    ForwardBackward,
    ExactTree,
    LoopyBp,
    /// Local normalizers only (pseudolikelihood).
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveReport {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub inference: InferenceKind,
    /// False when some loopy BP run hit its iteration limit.
    pub converged: bool,
    pub nonconvex: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RegularizerSpec {
    #[default]
    None,
    L2 { sigma2: f64 },
    /// The penalty is applied by the optimizer's proximal step, never here.
    L1 { alpha: f64 },
}

impl RegularizerSpec {
    pub fn l2_default() -> Self {
        RegularizerSpec::L2 { sigma2: DEFAULT_SIGMA2 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            RegularizerSpec::L2 { sigma2 } if !(sigma2 > 0.0 && sigma2.is_finite()) => {
                Err(Error::param(format!("σ² must be positive, got {sigma2}")))
            }
            RegularizerSpec::L1 { alpha } if !(alpha >= 0.0 && alpha.is_finite()) => {
                Err(Error::param(format!("L1 α must be non-negative, got {alpha}")))
            }
            _ => Ok(()),
        }
    }

    /// Adds `share` of the smooth penalty to `value` and `grad`.
    pub fn apply_smooth(&self, weights: &[f64], share: f64, value: &mut f64, grad: &mut [f64]) {
        if let RegularizerSpec::L2 { sigma2 } = *self {
            let c = share / sigma2;
            let mut sq = 0.0;
            for (g, &w) in grad.iter_mut().zip(weights) {
                sq += w * w;
                *g -= c * w;
            }
            *value -= 0.5 * c * sq;
        }
    }

    /// `α ‖θ‖₁` for L1, zero otherwise.
    pub fn nonsmooth_penalty(&self, weights: &[f64]) -> f64 {
        match *self {
            RegularizerSpec::L1 { alpha } => alpha * weights.iter().map(|w| w.abs()).sum::<f64>(),
            _ => 0.0,
        }
    }
}

/// Per-instance contribution, with gradient accumulated by the caller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceTerm {
    pub value: f64,
    pub converged: bool,
    pub approximate: bool,
}

impl InstanceTerm {
    fn exact(value: f64) -> Self {
        Self {
            value,
            converged: true,
            approximate: false,
        }
    }
}

/// An objective that decomposes as a sum over instances plus a regularizer.
pub trait InstanceObjective: Sync {
    fn dimension(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn regularizer(&self) -> RegularizerSpec;
    fn exact_kind(&self) -> InferenceKind;
    fn nonconvex(&self) -> bool {
        false
    }
    /// Returns instance `i`'s value and adds its gradient into `grad`.
    fn instance(&self, weights: &[f64], i: usize, grad: &mut [f64]) -> Result<InstanceTerm>;
}

/// Any `(value, gradient)` evaluator an optimizer can drive.
pub trait Objective {
    fn dimension(&self) -> usize;
    fn evaluate(&self, weights: &[f64]) -> Result<ObjectiveReport>;
}

/// Number of instances summed together before the ordered reduction.
pub const REDUCTION_CHUNK: usize = 16;

struct Partial {
    value: f64,
    grad: Vec<f64>,
    converged: bool,
    approximate: bool,
}

fn chunk_sum<O: InstanceObjective + ?Sized>(obj: &O, weights: &[f64], chunk: usize) -> Result<Partial> {
    let mut p = Partial {
        value: 0.0,
        grad: vec![0.0; obj.dimension()],
        converged: true,
        approximate: false,
    };
    let start = chunk * REDUCTION_CHUNK;
    let end = (start + REDUCTION_CHUNK).min(obj.len());
    for i in start..end {
        let term = obj.instance(weights, i, &mut p.grad).map_err(|e| e.at_instance(i))?;
        p.value += term.value;
        p.converged &= term.converged;
        p.approximate |= term.approximate;
    }
    Ok(p)
}

/// Full objective over all instances. Instances are summed in fixed-size
/// chunks and chunks are reduced in index order, so the result is the same
/// bit for bit for every worker count.
pub fn evaluate_batch<O: InstanceObjective + ?Sized>(obj: &O, weights: &[f64], workers: usize) -> Result<ObjectiveReport> {
    if workers < 1 {
        return Err(Error::param("workers must be at least 1"));
    }
    if weights.len() != obj.dimension() {
        return Err(Error::param(format!(
            "weight vector has {} entries, objective expects {}",
            weights.len(),
            obj.dimension()
        )));
    }
    obj.regularizer().validate()?;
    let chunks = obj.len().div_ceil(REDUCTION_CHUNK);
    let partials: Vec<Result<Partial>> = if workers == 1 || chunks <= 1 {
        (0..chunks).map(|c| chunk_sum(obj, weights, c)).collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<Partial>>>> = (0..chunks).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..workers.min(chunks) {
                s.spawn(|| loop {
                    let c = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if c >= chunks {
                        break;
                    }
                    let r = chunk_sum(obj, weights, c);
                    *slots[c].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("slot lock").expect("every chunk evaluated"))
            .collect()
    };
    let mut value = 0.0;
    let mut gradient = vec![0.0; obj.dimension()];
    let mut converged = true;
    let mut approximate = false;
    for p in partials {
        let p = p?;
        value += p.value;
        for (g, x) in gradient.iter_mut().zip(&p.grad) {
            *g += x;
        }
        converged &= p.converged;
        approximate |= p.approximate;
    }
    obj.regularizer().apply_smooth(weights, 1.0, &mut value, &mut gradient);
    Ok(ObjectiveReport {
        value,
        gradient,
        inference: if approximate { InferenceKind::LoopyBp } else { obj.exact_kind() },
        converged,
        nonconvex: obj.nonconvex(),
    })
}

/// Drives an [`InstanceObjective`] with a fixed worker count.
pub struct Batch<'a, O: ?Sized> {
    pub objective: &'a O,
    pub workers: usize,
}

impl<'a, O: InstanceObjective + ?Sized> Batch<'a, O> {
    pub fn new(objective: &'a O) -> Self {
        Self { objective, workers: 1 }
    }

    pub fn with_workers(objective: &'a O, workers: usize) -> Self {
        Self { objective, workers }
    }
}

impl<O: InstanceObjective + ?Sized> Objective for Batch<'_, O> {
    fn dimension(&self) -> usize {
        self.objective.dimension()
    }

    fn evaluate(&self, weights: &[f64]) -> Result<ObjectiveReport> {
        evaluate_batch(self.objective, weights, self.workers)
    }
}

/// A closure-backed objective.
pub struct FnObjective<F> {
    pub dimension: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> Result<ObjectiveReport>> Objective for FnObjective<F> {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn evaluate(&self, weights: &[f64]) -> Result<ObjectiveReport> {
        (self.f)(weights)
    }
}

fn labels_of(inst: &ChainInstance) -> Result<&[usize]> {
    inst.labels
        .as_deref()
        .ok_or_else(|| Error::param("training instance has no gold labels"))
}

/// Conditional log-likelihood of a linear chain, by forward-backward.
pub struct ChainCll<'a> {
    pub space: &'a FeatureSpace,
    pub data: &'a [ChainInstance],
    pub reg: RegularizerSpec,
}

impl<'a> ChainCll<'a> {
    pub fn new(space: &'a FeatureSpace, data: &'a [ChainInstance], reg: RegularizerSpec) -> Self {
        Self { space, data, reg }
    }
}

impl InstanceObjective for ChainCll<'_> {
    fn dimension(&self) -> usize {
        self.space.num_weights()
    }

    fn len(&self) -> usize {
        self.data.len()
    }

    fn regularizer(&self) -> RegularizerSpec {
        self.reg
    }

    fn exact_kind(&self) -> InferenceKind {
        InferenceKind::ForwardBackward
    }

    fn instance(&self, weights: &[f64], i: usize, grad: &mut [f64]) -> Result<InstanceTerm> {
        let inst = &self.data[i];
        let labels = labels_of(inst)?;
        if inst.is_empty() {
            return Ok(InstanceTerm::exact(0.0));
        }
        let p = self.space.potentials(inst, weights);
        let lattice = ChainLattice::compute(&p)?;
        let score = p.score(labels);
        if score == LOG_ZERO {
            return Err(Error::Infeasible("gold labeling has zero probability".into()));
        }
        self.space.add_labeling_features(inst, labels, grad, 1.0);
        let node = lattice.node_marginals(&p);
        let edge = lattice.edge_marginals(&p);
        self.space.add_expected_features(inst, &node, &edge, grad, -1.0);
        Ok(InstanceTerm::exact(score - lattice.log_z))
    }
}

pub fn chain_cll(weights: &[f64], space: &FeatureSpace, data: &[ChainInstance], reg: RegularizerSpec) -> Result<ObjectiveReport> {
    evaluate_batch(&ChainCll::new(space, data, reg), weights, 1)
}

/// Smooth part of the L1-penalized likelihood; the optimizer applies
/// `α ‖θ‖₁` by soft-thresholding.
pub fn l1_objective(weights: &[f64], space: &FeatureSpace, data: &[ChainInstance], alpha: f64) -> Result<ObjectiveReport> {
    RegularizerSpec::L1 { alpha }.validate()?;
    evaluate_batch(&ChainCll::new(space, data, RegularizerSpec::L1 { alpha }), weights, 1)
}

/// A factor graph with a complete observed assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInstance {
    pub graph: FactorGraph,
    pub assignment: Vec<usize>,
}

impl GraphInstance {
    pub fn new(graph: FactorGraph, assignment: Vec<usize>) -> Result<Self> {
        check_assignment(&graph, &assignment)?;
        Ok(Self { graph, assignment })
    }

    pub fn from_chain(space: &FeatureSpace, inst: &ChainInstance) -> Result<Self> {
        let labels = labels_of(inst)?.to_vec();
        Self::new(chain_graph_from_instance(space, inst)?, labels)
    }
}

fn check_assignment(graph: &FactorGraph, assignment: &[usize]) -> Result<()> {
    if assignment.len() != graph.variables().len()
        || assignment.iter().enumerate().any(|(v, &x)| x >= graph.cardinality(v))
    {
        return Err(Error::Assignment("assignment does not fit the graph".into()));
    }
    Ok(())
}

pub fn graph_dataset_from_chains(space: &FeatureSpace, data: &[ChainInstance]) -> Result<Vec<GraphInstance>> {
    data.iter()
        .enumerate()
        .map(|(i, inst)| GraphInstance::from_chain(space, inst).map_err(|e| e.at_instance(i)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GraphInference {
    /// Exact two-pass BP; loopy graphs are a structure error.
    ExactTree,
    /// Flooding BP on every graph.
    LoopyBp(BpConfig),
    /// Exact on trees, loopy BP elsewhere.
    Auto(BpConfig),
}

/// `grad += scale * E_q[f]` under factor beliefs, including clamped constants.
pub fn add_expected_graph_features(graph: &FactorGraph, factor_beliefs: &[Vec<f64>], grad: &mut [f64], scale: f64) {
    graph.constant_features().add_scaled_to(grad, scale);
    for f in graph.factors() {
        for (q, fv) in factor_beliefs[f.id].iter().zip(&f.features) {
            if *q != 0.0 {
                fv.add_scaled_to(grad, scale * q);
            }
        }
    }
}

struct InferenceRunner {
    mode: GraphInference,
    warm: Vec<Mutex<Option<MessageSet>>>,
    warm_start: bool,
}

impl InferenceRunner {
    fn new(mode: GraphInference, n: usize, warm_start: bool) -> Self {
        Self {
            mode,
            warm: (0..n).map(|_| Mutex::new(None)).collect(),
            warm_start,
        }
    }

    fn check(&self, graph: &FactorGraph) -> Result<()> {
        if matches!(self.mode, GraphInference::ExactTree) && !graph.is_tree() {
            return Err(Error::Structure("graph has cycles and exact inference was requested; enable loopy BP".into()));
        }
        Ok(())
    }

    fn run(&self, graph: &FactorGraph, pot: &GraphPotentials, slot: usize) -> Result<(BeliefState, bool)> {
        let config = match self.mode {
            GraphInference::ExactTree => return Ok((tree_bp(graph, pot)?, false)),
            GraphInference::Auto(_) if graph.is_tree() => return Ok((tree_bp(graph, pot)?, false)),
            GraphInference::Auto(c) | GraphInference::LoopyBp(c) => c,
        };
        let mut cache = self.warm[slot].lock().expect("message cache lock");
        let start = match cache.take() {
            Some(m) if self.warm_start => m,
            _ => MessageSet::uniform(graph),
        };
        let (beliefs, msgs) = loopy_bp_warm(graph, pot, config, start)?;
        if self.warm_start {
            *cache = Some(msgs);
        }
        Ok((beliefs, true))
    }
}

/// Conditional log-likelihood on general factor graphs. With loopy BP the
/// value is the Bethe surrogate and the gradient uses pseudomarginals.
pub struct GeneralCll<'a> {
    pub data: &'a [GraphInstance],
    pub reg: RegularizerSpec,
    dimension: usize,
    runner: InferenceRunner,
}

impl<'a> GeneralCll<'a> {
    pub fn new(data: &'a [GraphInstance], reg: RegularizerSpec, inference: GraphInference, dimension: usize) -> Result<Self> {
        let runner = InferenceRunner::new(inference, data.len(), true);
        for (i, d) in data.iter().enumerate() {
            runner.check(&d.graph).map_err(|e| e.at_instance(i))?;
        }
        Ok(Self { data, reg, dimension, runner })
    }

    /// Loopy runs restart from uniform messages instead of the previous
    /// evaluation's messages.
    pub fn without_warm_start(mut self) -> Self {
        self.runner.warm_start = false;
        self
    }
}

impl InstanceObjective for GeneralCll<'_> {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn len(&self) -> usize {
        self.data.len()
    }

    fn regularizer(&self) -> RegularizerSpec {
        self.reg
    }

    fn exact_kind(&self) -> InferenceKind {
        InferenceKind::ExactTree
    }

    fn instance(&self, weights: &[f64], i: usize, grad: &mut [f64]) -> Result<InstanceTerm> {
        let d = &self.data[i];
        let pot = d.graph.log_potentials(weights)?;
        let score = d.graph.log_score(&pot, &d.assignment);
        if score == LOG_ZERO {
            return Err(Error::Infeasible("observed assignment has zero probability".into()));
        }
        let (beliefs, approximate) = self.runner.run(&d.graph, &pot, i)?;
        d.graph.assignment_features(&d.assignment, grad, 1.0);
        add_expected_graph_features(&d.graph, &beliefs.factor, grad, -1.0);
        Ok(InstanceTerm {
            value: score - beliefs.log_z,
            converged: beliefs.converged,
            approximate,
        })
    }
}

pub fn general_cll(weights: &[f64], data: &[GraphInstance], reg: RegularizerSpec, inference: GraphInference) -> Result<ObjectiveReport> {
    evaluate_batch(&GeneralCll::new(data, reg, inference, weights.len())?, weights, 1)
}

/// `log p(y_B | y_{-B})` for a block of variables, with its gradient added
/// into `grad`. Only factors touching the block enter.
pub fn block_log_conditional(
    graph: &FactorGraph,
    pot: &GraphPotentials,
    assignment: &[usize],
    block: &[usize],
    grad: &mut [f64],
) -> Result<f64> {
    let mut touching: Vec<usize> = block
        .iter()
        .flat_map(|&v| graph.neighbors(v).iter().map(|&(a, _)| a))
        .collect();
    touching.sort_unstable();
    touching.dedup();
    let cards: Vec<usize> = block.iter().map(|&v| graph.cardinality(v)).collect();
    let configs: usize = cards.iter().product();
    let observed = encode(&cards, &block.iter().map(|&v| assignment[v]).collect::<Vec<_>>());
    let mut y = assignment.to_vec();
    let mut local = vec![0; block.len()];
    let mut scores = Vec::with_capacity(configs);
    let mut indices: Vec<Vec<usize>> = Vec::with_capacity(configs);
    for c in 0..configs {
        crate::graph::decode(&cards, c, &mut local);
        for (&v, &x) in block.iter().zip(&local) {
            y[v] = x;
        }
        let idx: Vec<usize> = touching.iter().map(|&a| graph.factor_index(a, &y)).collect();
        scores.push(touching.iter().zip(&idx).map(|(&a, &k)| pot.tables[a][k]).sum::<f64>());
        indices.push(idx);
    }
    let log_norm = lse(&scores);
    let value = scores[observed] - log_norm;
    if value == LOG_ZERO || log_norm == LOG_ZERO {
        return Err(Error::Infeasible("observed block value has zero conditional probability".into()));
    }
    for (&a, &k) in touching.iter().zip(&indices[observed]) {
        graph.factors()[a].features[k].add_scaled_to(grad, 1.0);
    }
    for (s, idx) in scores.iter().zip(&indices) {
        let p = (s - log_norm).exp();
        if p == 0.0 {
            continue;
        }
        for (&a, &k) in touching.iter().zip(idx) {
            graph.factors()[a].features[k].add_scaled_to(grad, -p);
        }
    }
    Ok(value)
}

/// Blocks used by a pseudolikelihood variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Blocking {
    /// One block per variable.
    Node,
    /// Consecutive pairs `(t, t + 1)` of a chain; a single-variable chain is
    /// one block.
    ChainEdge,
}

fn blocks(n: usize, blocking: Blocking) -> Vec<Vec<usize>> {
    match blocking {
        Blocking::Node => (0..n).map(|s| vec![s]).collect(),
        Blocking::ChainEdge if n <= 1 => (0..n).map(|s| vec![s]).collect(),
        Blocking::ChainEdge => (0..n - 1).map(|t| vec![t, t + 1]).collect(),
    }
}

/// Sum of block log-conditionals. No partition function is computed.
pub struct PseudoLikelihood<'a> {
    pub data: &'a [GraphInstance],
    pub reg: RegularizerSpec,
    pub blocking: Blocking,
    pub dimension: usize,
}

impl InstanceObjective for PseudoLikelihood<'_> {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn len(&self) -> usize {
        self.data.len()
    }

    fn regularizer(&self) -> RegularizerSpec {
        self.reg
    }

    fn exact_kind(&self) -> InferenceKind {
        InferenceKind::Local
    }

    fn instance(&self, weights: &[f64], i: usize, grad: &mut [f64]) -> Result<InstanceTerm> {
        let d = &self.data[i];
        let pot = d.graph.log_potentials(weights)?;
        let mut value = 0.0;
        for block in blocks(d.graph.variables().len(), self.blocking) {
            value += block_log_conditional(&d.graph, &pot, &d.assignment, &block, grad)?;
        }
        // clamped constants cancel inside every conditional
        Ok(InstanceTerm::exact(value))
    }
}

pub fn pseudolikelihood(weights: &[f64], data: &[GraphInstance], reg: RegularizerSpec) -> Result<ObjectiveReport> {
    let obj = PseudoLikelihood { data, reg, blocking: Blocking::Node, dimension: weights.len() };
    evaluate_batch(&obj, weights, 1)
}

/// Chain data only: each term normalizes over the `M²` values of a pair.
pub fn edge_pseudolikelihood(weights: &[f64], data: &[GraphInstance], reg: RegularizerSpec) -> Result<ObjectiveReport> {
    let obj = PseudoLikelihood { data, reg, blocking: Blocking::ChainEdge, dimension: weights.len() };
    evaluate_batch(&obj, weights, 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetheSurrogate {
    /// `Σ_a log Ψ_a(y_a) + O_Bethe(q)`.
    pub primal: f64,
    /// `log [Π_a q_a(y_a) / Π_s q_s(y_s)^{d_s - 1}]`.
    pub dual: f64,
}

pub fn bethe_surrogate(graph: &FactorGraph, pot: &GraphPotentials, assignment: &[usize], beliefs: &BeliefState) -> Result<BetheSurrogate> {
    check_assignment(graph, assignment)?;
    let energy = crate::inference::bethe_free_energy(graph, beliefs, pot)?;
    let primal = graph.log_score(pot, assignment) + energy;
    let mut dual = 0.0;
    for f in graph.factors() {
        dual += beliefs.factor[f.id][graph.factor_index(f.id, assignment)].ln();
    }
    for (v, q) in beliefs.node.iter().enumerate() {
        let d = graph.degree(v) as f64;
        if d != 1.0 {
            dual -= (d - 1.0) * q[assignment[v]].ln();
        }
    }
    Ok(BetheSurrogate { primal, dual })
}

/// A graph whose `None` entries are latent and summed out.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentInstance {
    pub graph: FactorGraph,
    pub observed: Vec<Option<usize>>,
}

/// Latent variable ids and cardinalities of one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentSpec {
    pub latent: Vec<(usize, usize)>,
}

impl LatentInstance {
    pub fn new(graph: FactorGraph, observed: Vec<Option<usize>>) -> Result<Self> {
        if observed.len() != graph.variables().len() {
            return Err(Error::Assignment("one entry per variable required".into()));
        }
        Ok(Self { graph, observed })
    }

    pub fn spec(&self) -> LatentSpec {
        LatentSpec {
            latent: self
                .observed
                .iter()
                .enumerate()
                .filter(|(_, o)| o.is_none())
                .map(|(v, _)| (v, self.graph.cardinality(v)))
                .collect(),
        }
    }
}

/// `log Z(y, x) - log Z(x)` with the observed outputs clamped.
pub struct LatentLikelihood<'a> {
    pub data: &'a [LatentInstance],
    pub reg: RegularizerSpec,
    dimension: usize,
    clamped: Vec<FactorGraph>,
    full: InferenceRunner,
    reduced: InferenceRunner,
}

impl<'a> LatentLikelihood<'a> {
    pub fn new(data: &'a [LatentInstance], reg: RegularizerSpec, inference: GraphInference, dimension: usize) -> Result<Self> {
        let full = InferenceRunner::new(inference, data.len(), true);
        let reduced = InferenceRunner::new(inference, data.len(), true);
        let mut clamped = Vec::with_capacity(data.len());
        for (i, d) in data.iter().enumerate() {
            let (g, _) = d.graph.clamp(&d.observed).map_err(|e| e.at_instance(i))?;
            full.check(&d.graph).map_err(|e| e.at_instance(i))?;
            reduced.check(&g).map_err(|e| e.at_instance(i))?;
            clamped.push(g);
        }
        Ok(Self { data, reg, dimension, clamped, full, reduced })
    }

    /// `E_{w|y,x}[f]` summed over instances, as a dense vector.
    pub fn clamped_expectations(&self, weights: &[f64]) -> Result<Vec<Vec<(usize, f64)>>> {
        (0..self.data.len())
            .map(|i| {
                let mut g = vec![0.0; self.dimension];
                let pot = self.clamped[i].log_potentials(weights).map_err(|e| e.at_instance(i))?;
                let (b, _) = self.reduced.run(&self.clamped[i], &pot, i).map_err(|e| e.at_instance(i))?;
                add_expected_graph_features(&self.clamped[i], &b.factor, &mut g, 1.0);
                Ok(g.into_iter().enumerate().filter(|(_, x)| *x != 0.0).collect())
            })
            .collect()
    }
}

impl InstanceObjective for LatentLikelihood<'_> {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn len(&self) -> usize {
        self.data.len()
    }

    fn regularizer(&self) -> RegularizerSpec {
        self.reg
    }

    fn exact_kind(&self) -> InferenceKind {
        InferenceKind::ExactTree
    }

    fn nonconvex(&self) -> bool {
        true
    }

    fn instance(&self, weights: &[f64], i: usize, grad: &mut [f64]) -> Result<InstanceTerm> {
        let d = &self.data[i];
        let cg = &self.clamped[i];
        let cpot = cg.log_potentials(weights)?;
        let (cb, capprox) = self.reduced.run(cg, &cpot, i)?;
        if cb.log_z == LOG_ZERO {
            return Err(Error::Infeasible("observed outputs have zero probability".into()));
        }
        let pot = d.graph.log_potentials(weights)?;
        let (fb, fapprox) = self.full.run(&d.graph, &pot, i)?;
        add_expected_graph_features(cg, &cb.factor, grad, 1.0);
        add_expected_graph_features(&d.graph, &fb.factor, grad, -1.0);
        Ok(InstanceTerm {
            value: cb.log_z - fb.log_z,
            converged: cb.converged && fb.converged,
            approximate: capprox || fapprox,
        })
    }
}

pub fn latent_marginal_likelihood(
    weights: &[f64],
    data: &[LatentInstance],
    reg: RegularizerSpec,
    inference: GraphInference,
) -> Result<ObjectiveReport> {
    evaluate_batch(&LatentLikelihood::new(data, reg, inference, weights.len())?, weights, 1)
}

/// Expected complete-data log-likelihood with frozen posterior expectations:
/// `Σ_i θ·E_q[f_i] - log Z_i(θ)`, up to a constant in θ.
pub struct ExpectedCompleteLikelihood<'a, 'b> {
    pub base: &'b LatentLikelihood<'a>,
    pub expectations: Vec<Vec<(usize, f64)>>,
}

impl<'a, 'b> ExpectedCompleteLikelihood<'a, 'b> {
    /// The E-step at `weights`.
    pub fn at(base: &'b LatentLikelihood<'a>, weights: &[f64]) -> Result<Self> {
        Ok(Self {
            base,
            expectations: base.clamped_expectations(weights)?,
        })
    }
}

impl InstanceObjective for ExpectedCompleteLikelihood<'_, '_> {
    fn dimension(&self) -> usize {
        self.base.dimension
    }

    fn len(&self) -> usize {
        self.base.len()
    }

    fn regularizer(&self) -> RegularizerSpec {
        self.base.reg
    }

    fn exact_kind(&self) -> InferenceKind {
        InferenceKind::ExactTree
    }

    fn instance(&self, weights: &[f64], i: usize, grad: &mut [f64]) -> Result<InstanceTerm> {
        let d = &self.base.data[i];
        let pot = d.graph.log_potentials(weights)?;
        let (fb, approximate) = self.base.full.run(&d.graph, &pot, i)?;
        let mut value = -fb.log_z;
        for &(k, c) in &self.expectations[i] {
            value += weights[k] * c;
            grad[k] += c;
        }
        add_expected_graph_features(&d.graph, &fb.factor, grad, -1.0);
        Ok(InstanceTerm {
            value,
            converged: fb.converged,
            approximate,
        })
    }
}

/// One EM iteration: E-step at `weights`, then `m_step_iters` L-BFGS
/// iterations on the expected complete-data likelihood.
pub fn em_step(obj: &LatentLikelihood<'_>, weights: &[f64], m_step_iters: usize) -> Result<Vec<f64>> {
    let q = ExpectedCompleteLikelihood::at(obj, weights)?;
    let config = crate::optimize::LbfgsConfig {
        max_iters: m_step_iters,
        ..Default::default()
    };
    let out = crate::optimize::lbfgs_maximize(&Batch::new(&q), weights, &config)?;
    Ok(out.weights)
}

/// Instance `i`'s value and gradient with a `1/N` share of the smooth
/// regularizer, so the shares sum to the batch objective.
pub fn sgd_instance_gradient<O: InstanceObjective + ?Sized>(obj: &O, weights: &[f64], i: usize) -> Result<(f64, Vec<f64>)> {
    if i >= obj.len() {
        return Err(Error::param(format!("instance {i} out of range")));
    }
    let mut grad = vec![0.0; obj.dimension()];
    let mut value = obj.instance(weights, i, &mut grad).map_err(|e| e.at_instance(i))?.value;
    obj.regularizer()
        .apply_smooth(weights, 1.0 / obj.len() as f64, &mut value, &mut grad);
    Ok((value, grad))
}

/// Central differences `(f(θ + h e_k) - f(θ - h e_k)) / 2h`.
pub fn finite_difference_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, weights: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::param("finite-difference step must be positive"));
    }
    let mut x = weights.to_vec();
    Ok((0..weights.len())
        .map(|k| {
            x[k] = weights[k] + h;
            let up = f(&x);
            x[k] = weights[k] - h;
            let down = f(&x);
            x[k] = weights[k];
            (up - down) / (2.0 * h)
        })
        .collect())
}

/// Max relative error `|a - b| / max(1, |a|, |b|)` between two gradients.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Dense `Σ_i f(x_i, y_i)` over a chain dataset.
pub fn empirical_counts(space: &FeatureSpace, data: &[ChainInstance]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; space.num_weights()];
    for (i, inst) in data.iter().enumerate() {
        let labels = labels_of(inst).map_err(|e| e.at_instance(i))?;
        space.add_labeling_features(inst, labels, &mut out, 1.0);
    }
    Ok(out)
}

/// Dense `Σ_i E_{y|x_i}[f]` over a chain dataset.
pub fn expected_counts(space: &FeatureSpace, data: &[ChainInstance], weights: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; space.num_weights()];
    for (i, inst) in data.iter().enumerate() {
        if inst.is_empty() {
            continue;
        }
        let p = space.potentials(inst, weights);
        let lattice = ChainLattice::compute(&p).map_err(|e| e.at_instance(i))?;
        let node = lattice.node_marginals(&p);
        let edge = lattice.edge_marginals(&p);
        space.add_expected_features(inst, &node, &edge, &mut out, 1.0);
    }
    Ok(out)
}
