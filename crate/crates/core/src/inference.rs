//! Inference on general factor graphs: belief propagation (two-pass on
//! trees, flooding on loopy graphs), the Bethe free energy, and Gibbs
//! sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{decode, strides, FactorGraph, GraphPotentials};
use crate::logspace::{log_normalize_in_place, lse, xlogx, LOG_ZERO};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpConfig {
    pub max_iters: usize,
    pub tolerance: f64,
    pub damping: f64,
}

impl Default for BpConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tolerance: 1e-6,
            damping: 0.0,
        }
    }
}

/// Log-domain messages, indexed `[factor][slot]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageSet {
    pub factor_to_var: Vec<Vec<Vec<f64>>>,
    pub var_to_factor: Vec<Vec<Vec<f64>>>,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
}

impl MessageSet {
    pub fn uniform(graph: &FactorGraph) -> Self {
        let shape: Vec<Vec<Vec<f64>>> = graph
            .factors()
            .iter()
            .map(|f| {
                f.scope
                    .iter()
                    .map(|&v| {
                        let c = graph.cardinality(v);
                        vec![-(c as f64).ln(); c]
                    })
                    .collect()
            })
            .collect();
        Self {
            factor_to_var: shape.clone(),
            var_to_factor: shape,
            iterations: 0,
            converged: false,
            residual: f64::INFINITY,
        }
    }
}

/// Node and factor beliefs (probabilities) and the Bethe estimate of log Z.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    pub node: Vec<Vec<f64>>,
    pub factor: Vec<Vec<f64>>,
    pub bethe_energy: f64,
    pub log_z: f64,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
}

/// Message from factor `a` to the variable in `slot`.
fn factor_message(
    graph: &FactorGraph,
    table: &[f64],
    a: usize,
    slot: usize,
    incoming: &[Vec<f64>],
    out: &mut Vec<f64>,
) -> Result<()> {
    let cards = graph.scope_cards(a);
    let card = cards[slot];
    let stride = strides(&cards);
    out.clear();
    out.resize(card, LOG_ZERO);
    let mut parts: Vec<Vec<f64>> = vec![Vec::new(); card];
    let mut assign = vec![0; cards.len()];
    for (idx, &psi) in table.iter().enumerate() {
        if psi == LOG_ZERO {
            continue;
        }
        decode(&cards, idx, &mut assign);
        let mut s = psi;
        for (k, m) in incoming.iter().enumerate() {
            if k != slot {
                s += m[assign[k]];
            }
        }
        if s != LOG_ZERO {
            parts[(idx / stride[slot]) % card].push(s);
        }
    }
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = lse(p);
    }
    log_normalize_in_place(out).map_err(|_| infeasible_factor(a))?;
    Ok(())
}

fn infeasible_factor(a: usize) -> Error {
    Error::Infeasible(format!("factor {a} sends an all-zero message"))
}

/// Message from variable `v` to factor `a`: the sum of every other incoming
/// factor message.
fn variable_message(
    graph: &FactorGraph,
    v: usize,
    a: usize,
    factor_to_var: &[Vec<Vec<f64>>],
    out: &mut Vec<f64>,
) -> Result<()> {
    let card = graph.cardinality(v);
    out.clear();
    out.resize(card, 0.0);
    for &(b, slot) in graph.neighbors(v) {
        if b == a {
            continue;
        }
        for (o, m) in out.iter_mut().zip(&factor_to_var[b][slot]) {
            *o += m;
        }
    }
    log_normalize_in_place(out).map_err(|_| Error::Infeasible(format!("variable {v} has no feasible value")))?;
    Ok(())
}

fn beliefs(
    graph: &FactorGraph,
    pot: &GraphPotentials,
    msgs: &MessageSet,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut node = Vec::with_capacity(graph.variables().len());
    for v in 0..graph.variables().len() {
        let mut b = vec![0.0; graph.cardinality(v)];
        for &(a, slot) in graph.neighbors(v) {
            for (x, m) in b.iter_mut().zip(&msgs.factor_to_var[a][slot]) {
                *x += m;
            }
        }
        log_normalize_in_place(&mut b).map_err(|_| Error::Infeasible(format!("variable {v} has zero belief")))?;
        node.push(b.iter().map(|x| x.exp()).collect());
    }
    let mut factor = Vec::with_capacity(graph.factors().len());
    for f in graph.factors() {
        let cards = graph.scope_cards(f.id);
        let mut assign = vec![0; cards.len()];
        let mut b: Vec<f64> = pot.tables[f.id].clone();
        for (idx, x) in b.iter_mut().enumerate() {
            if *x == LOG_ZERO {
                continue;
            }
            decode(&cards, idx, &mut assign);
            for (k, m) in msgs.var_to_factor[f.id].iter().enumerate() {
                *x += m[assign[k]];
            }
        }
        log_normalize_in_place(&mut b).map_err(|_| infeasible_factor(f.id))?;
        factor.push(b.iter().map(|x| x.exp()).collect());
    }
    Ok((node, factor))
}

fn finish(graph: &FactorGraph, pot: &GraphPotentials, msgs: &MessageSet) -> Result<BeliefState> {
    let (node, factor) = beliefs(graph, pot, msgs)?;
    let mut state = BeliefState {
        node,
        factor,
        bethe_energy: 0.0,
        log_z: 0.0,
        converged: msgs.converged,
        iterations: msgs.iterations,
        residual: msgs.residual,
    };
    state.bethe_energy = bethe_free_energy(graph, &state, pot)?;
    state.log_z = -state.bethe_energy;
    Ok(state)
}

#[derive(Clone, Copy)]
enum Node {
    Var(usize),
    Fac(usize),
}

/// Exact BP on a forest: messages flow leaves → root, then root → leaves.
pub fn tree_bp(graph: &FactorGraph, pot: &GraphPotentials) -> Result<BeliefState> {
    let msgs = tree_messages(graph, pot)?;
    finish(graph, pot, &msgs)
}

fn tree_messages(graph: &FactorGraph, pot: &GraphPotentials) -> Result<MessageSet> {
    if !graph.is_tree() {
        return Err(Error::Structure("tree_bp needs a tree-structured graph; use loopy_bp".into()));
    }
    let nv = graph.variables().len();
    let mut msgs = MessageSet::uniform(graph);
    let mut seen_var = vec![false; nv];
    let mut seen_fac = vec![false; graph.factors().len()];
    // BFS order with (node, parent, slot-of-variable-in-factor edge)
    let mut order: Vec<(Node, Option<(Node, usize)>)> = Vec::new();
    for root in 0..nv {
        if seen_var[root] {
            continue;
        }
        seen_var[root] = true;
        let start = order.len();
        order.push((Node::Var(root), None));
        let mut head = start;
        while head < order.len() {
            let (node, _) = order[head];
            head += 1;
            match node {
                Node::Var(v) => {
                    for &(a, slot) in graph.neighbors(v) {
                        if !seen_fac[a] {
                            seen_fac[a] = true;
                            order.push((Node::Fac(a), Some((Node::Var(v), slot))));
                        }
                    }
                }
                Node::Fac(a) => {
                    for (slot, &v) in graph.factors()[a].scope.iter().enumerate() {
                        if !seen_var[v] {
                            seen_var[v] = true;
                            order.push((Node::Var(v), Some((Node::Fac(a), slot))));
                        }
                    }
                }
            }
        }
    }
    let mut buf = Vec::new();
    // upward
    for &(node, parent) in order.iter().rev() {
        let Some((p, slot)) = parent else { continue };
        match (node, p) {
            (Node::Var(v), Node::Fac(a)) => {
                variable_message(graph, v, a, &msgs.factor_to_var, &mut buf)?;
                msgs.var_to_factor[a][slot] = buf.clone();
            }
            (Node::Fac(a), Node::Var(_)) => {
                factor_message(graph, &pot.tables[a], a, slot, &msgs.var_to_factor[a], &mut buf)?;
                msgs.factor_to_var[a][slot] = buf.clone();
            }
            _ => unreachable!("bipartite"),
        }
    }
    // downward
    for &(node, parent) in order.iter() {
        let Some((p, slot)) = parent else { continue };
        match (node, p) {
            (Node::Var(_), Node::Fac(a)) => {
                factor_message(graph, &pot.tables[a], a, slot, &msgs.var_to_factor[a], &mut buf)?;
                msgs.factor_to_var[a][slot] = buf.clone();
            }
            (Node::Fac(a), Node::Var(v)) => {
                variable_message(graph, v, a, &msgs.factor_to_var, &mut buf)?;
                msgs.var_to_factor[a][slot] = buf.clone();
            }
            _ => unreachable!("bipartite"),
        }
    }
    msgs.iterations = 1;
    msgs.converged = true;
    msgs.residual = 0.0;
    Ok(msgs)
}

fn change(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs()
    }
}

fn damp(new: &mut [f64], old: &[f64], lambda: f64) -> Result<()> {
    if lambda == 0.0 {
        return Ok(());
    }
    for (n, &o) in new.iter_mut().zip(old) {
        if *n == LOG_ZERO || o == LOG_ZERO {
            continue;
        }
        *n = (1.0 - lambda) * *n + lambda * o;
    }
    log_normalize_in_place(new)?;
    Ok(())
}

/// Synchronous flooding BP. Starts from uniform messages.
pub fn loopy_bp(graph: &FactorGraph, pot: &GraphPotentials, config: BpConfig) -> Result<BeliefState> {
    let msgs = loopy_messages(graph, pot, config, MessageSet::uniform(graph))?;
    finish(graph, pot, &msgs)
}

/// Flooding BP from given messages; returns the final messages and beliefs.
pub fn loopy_bp_warm(
    graph: &FactorGraph,
    pot: &GraphPotentials,
    config: BpConfig,
    start: MessageSet,
) -> Result<(BeliefState, MessageSet)> {
    let msgs = loopy_messages(graph, pot, config, start)?;
    let b = finish(graph, pot, &msgs)?;
    Ok((b, msgs))
}

fn loopy_messages(
    graph: &FactorGraph,
    pot: &GraphPotentials,
    config: BpConfig,
    mut msgs: MessageSet,
) -> Result<MessageSet> {
    if !(0.0..1.0).contains(&config.damping) {
        return Err(Error::param("damping must lie in [0, 1)"));
    }
    msgs.converged = false;
    msgs.iterations = 0;
    let mut buf = Vec::new();
    for iter in 1..=config.max_iters {
        let mut residual: f64 = 0.0;
        let mut next_fv = msgs.factor_to_var.clone();
        for f in graph.factors() {
            for slot in 0..f.scope.len() {
                factor_message(graph, &pot.tables[f.id], f.id, slot, &msgs.var_to_factor[f.id], &mut buf)?;
                damp(&mut buf, &msgs.factor_to_var[f.id][slot], config.damping)?;
                for (n, o) in buf.iter().zip(&msgs.factor_to_var[f.id][slot]) {
                    residual = residual.max(change(*n, *o));
                }
                next_fv[f.id][slot].clone_from(&buf);
            }
        }
        let mut next_vf = msgs.var_to_factor.clone();
        for f in graph.factors() {
            for (slot, &v) in f.scope.iter().enumerate() {
                variable_message(graph, v, f.id, &next_fv, &mut buf)?;
                damp(&mut buf, &msgs.var_to_factor[f.id][slot], config.damping)?;
                for (n, o) in buf.iter().zip(&msgs.var_to_factor[f.id][slot]) {
                    residual = residual.max(change(*n, *o));
                }
                next_vf[f.id][slot].clone_from(&buf);
            }
        }
        msgs.factor_to_var = next_fv;
        msgs.var_to_factor = next_vf;
        msgs.iterations = iter;
        msgs.residual = residual;
        if residual < config.tolerance {
            msgs.converged = true;
            break;
        }
    }
    Ok(msgs)
}

const NORMALIZATION_TOL: f64 = 1e-8;

fn check_normalized(name: &str, i: usize, q: &[f64]) -> Result<()> {
    let s: f64 = q.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL || q.iter().any(|&x| x < 0.0 || x.is_nan()) {
        return Err(Error::Unnormalized(format!("{name} {i} sums to {s}")));
    }
    Ok(())
}

/// `Σ_a q_a log q_a + Σ_i (1 - d_i) q_i log q_i - Σ_a q_a log Ψ_a`, minus the
/// clamped constant. At a BP fixed point `-O` estimates `log Z`.
pub fn bethe_free_energy(graph: &FactorGraph, beliefs: &BeliefState, pot: &GraphPotentials) -> Result<f64> {
    let mut energy = -pot.constant;
    for (a, q) in beliefs.factor.iter().enumerate() {
        check_normalized("factor belief", a, q)?;
        for (&p, &psi) in q.iter().zip(&pot.tables[a]) {
            if p > 0.0 {
                energy += xlogx(p) - p * psi;
            }
        }
    }
    for (v, q) in beliefs.node.iter().enumerate() {
        check_normalized("node belief", v, q)?;
        let d = graph.degree(v) as f64;
        energy += (1.0 - d) * q.iter().map(|&p| xlogx(p)).sum::<f64>();
    }
    Ok(energy)
}

/// `log p(y) = Σ_s log p(y_s) + Σ_a [log p(y_a) - Σ_{t∈a} log p(y_t)]` from
/// exact tree marginals.
pub fn log_joint_from_marginals(graph: &FactorGraph, beliefs: &BeliefState, assignment: &[usize]) -> Result<f64> {
    if !graph.is_tree() {
        return Err(Error::Structure("marginal factorization of the joint holds on trees only".into()));
    }
    let mut lp = 0.0;
    for (v, q) in beliefs.node.iter().enumerate() {
        lp += q[assignment[v]].ln();
    }
    for f in graph.factors() {
        lp += beliefs.factor[f.id][graph.factor_index(f.id, assignment)].ln();
        for &v in &f.scope {
            lp -= beliefs.node[v][assignment[v]].ln();
        }
    }
    if lp.is_nan() {
        return Ok(LOG_ZERO);
    }
    Ok(lp)
}

/// Log of the unnormalized conditional of `s`; only factors touching `s`.
fn conditional_scores(graph: &FactorGraph, pot: &GraphPotentials, assignment: &[usize], s: usize) -> Vec<f64> {
    let card = graph.cardinality(s);
    let mut scores = vec![0.0; card];
    for &(a, slot) in graph.neighbors(s) {
        let f = &graph.factors()[a];
        let cards = graph.scope_cards(a);
        let st = strides(&cards);
        let base: usize = f
            .scope
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != slot)
            .map(|(k, &v)| assignment[v] * st[k])
            .sum();
        for (val, sc) in scores.iter_mut().enumerate() {
            *sc += pot.tables[a][base + val * st[slot]];
        }
    }
    scores
}

/// `p(y_s | y_{-s}, x)`.
pub fn gibbs_conditional(graph: &FactorGraph, pot: &GraphPotentials, assignment: &[usize], s: usize) -> Result<Vec<f64>> {
    let mut scores = conditional_scores(graph, pot, assignment, s);
    log_normalize_in_place(&mut scores)
        .map_err(|_| Error::Infeasible(format!("variable {s} has no feasible value given its neighbours")))?;
    Ok(scores.into_iter().map(f64::exp).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GibbsConfig {
    pub sweeps: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub seed: u64,
    /// Starting point; a feasible one is built greedily if absent.
    pub init: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GibbsSamples {
    pub samples: Vec<Vec<usize>>,
}

impl GibbsSamples {
    /// Monte Carlo estimate `(1/S) Σ_j f(y^j)`.
    pub fn mcmc_expectation<F: Fn(&[usize]) -> f64>(&self, f: F) -> f64 {
        if self.samples.is_empty() {
            return f64::NAN;
        }
        self.samples.iter().map(|y| f(y)).sum::<f64>() / self.samples.len() as f64
    }

    pub fn node_marginals(&self, graph: &FactorGraph) -> Vec<Vec<f64>> {
        let n = self.samples.len() as f64;
        let mut out: Vec<Vec<f64>> = graph.variables().iter().map(|v| vec![0.0; v.cardinality]).collect();
        for y in &self.samples {
            for (v, &x) in y.iter().enumerate() {
                out[v][x] += 1.0 / n;
            }
        }
        out
    }

    /// Empirical distribution over the assignments of one factor's scope.
    pub fn factor_marginal(&self, graph: &FactorGraph, factor: usize) -> Vec<f64> {
        let size: usize = graph.scope_cards(factor).iter().product();
        let n = self.samples.len() as f64;
        let mut out = vec![0.0; size];
        for y in &self.samples {
            out[graph.factor_index(factor, y)] += 1.0 / n;
        }
        out
    }
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Greedy feasible start: each variable takes its best value given the factors
/// whose scopes are already fully assigned.
fn greedy_start(graph: &FactorGraph, pot: &GraphPotentials) -> Result<Vec<usize>> {
    let n = graph.variables().len();
    let mut assign = vec![0; n];
    let mut done = vec![false; n];
    for s in 0..n {
        let card = graph.cardinality(s);
        let mut best = (LOG_ZERO, 0);
        for val in 0..card {
            assign[s] = val;
            let mut score = 0.0;
            for &(a, _) in graph.neighbors(s) {
                let f = &graph.factors()[a];
                if f.scope.iter().all(|&v| v == s || done[v]) {
                    score += pot.tables[a][graph.factor_index(a, &assign)];
                }
            }
            if score > best.0 {
                best = (score, val);
            }
        }
        if best.0 == LOG_ZERO {
            return Err(Error::Infeasible(format!("no feasible starting value for variable {s}")));
        }
        assign[s] = best.1;
        done[s] = true;
    }
    Ok(assign)
}

/// Systematic-scan Gibbs sampling in variable order.
///
/// Sweep `j` (0-based) is retained when `j ≥ burn_in` and
/// `(j - burn_in) % thinning == 0`.
pub fn gibbs_run(graph: &FactorGraph, pot: &GraphPotentials, config: &GibbsConfig) -> Result<GibbsSamples> {
    if config.sweeps <= config.burn_in {
        return Err(Error::param("sweeps must exceed burn_in"));
    }
    if config.thinning < 1 {
        return Err(Error::param("thinning must be at least 1"));
    }
    let mut y = match &config.init {
        Some(init) => {
            if init.len() != graph.variables().len()
                || init.iter().enumerate().any(|(v, &x)| x >= graph.cardinality(v))
            {
                return Err(Error::Assignment("initial assignment does not fit the graph".into()));
            }
            init.clone()
        }
        None => greedy_start(graph, pot)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples = Vec::with_capacity((config.sweeps - config.burn_in) / config.thinning + 1);
    for j in 0..config.sweeps {
        for s in 0..graph.variables().len() {
            let p = gibbs_conditional(graph, pot, &y, s)?;
            y[s] = sample_index(&mut rng, &p);
        }
        if j >= config.burn_in && (j - config.burn_in).is_multiple_of(config.thinning) {
            samples.push(y.clone());
        }
    }
    Ok(GibbsSamples { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::ChainLattice;
    use crate::features::SparseFeatureVector;
    use crate::graph::{build_chain_graph, build_grid_graph, ChainTemplates, FactorGraphBuilder, VariableRole};
    use crate::oracle::{enumerate_graph, random_potentials, random_tree};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn unary_graph(card: usize) -> FactorGraph {
        let mut b = FactorGraphBuilder::new(0);
        let t = b.template(0..0, vec![card]);
        b.variable(card, VariableRole::Output);
        b.factor(vec![0], t, vec![SparseFeatureVector::new(); card], None);
        b.build().unwrap()
    }

    #[test]
    fn single_variable_belief() {
        let g = unary_graph(3);
        let pot = GraphPotentials {
            tables: vec![vec![0.0, 1.0, 2.0]],
            constant: 0.0,
        };
        let b = tree_bp(&g, &pot).unwrap();
        let z: f64 = [0.0f64, 1.0, 2.0].iter().map(|x| x.exp()).sum();
        for (i, q) in b.node[0].iter().enumerate() {
            assert!(close(*q, (i as f64).exp() / z, 1e-14));
        }
        assert!(close(b.log_z, z.ln(), 1e-12));
        assert!(close(bethe_free_energy(&g, &b, &pot).unwrap(), -z.ln(), 1e-12));
    }

    #[test]
    fn tree_bp_rejects_loops() {
        let g = build_grid_graph(2, 2, 2, vec![SparseFeatureVector::new(); 4], None, 0).unwrap();
        let pot = g.log_potentials(&[]).unwrap();
        assert!(matches!(tree_bp(&g, &pot), Err(Error::Structure(_))));
    }

    #[test]
    fn chain_graph_matches_chain_inference() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 3;
        let len = 5;
        let empty = || vec![SparseFeatureVector::new(); m];
        let g = build_chain_graph(m, vec![empty(); len], vec![vec![SparseFeatureVector::new(); m * m]; len - 1], ChainTemplates { node: 0..0, edge: 0..0 }).unwrap();
        let pot = random_potentials(&mut rng, &g, 1.5);
        // fold factors into chain tables
        let initial = pot.tables[0].clone();
        let mut trans = Vec::new();
        for t in 1..len {
            let mut tab = pot.tables[len + t - 1].clone();
            for i in 0..m {
                for j in 0..m {
                    tab[i * m + j] += pot.tables[t][j];
                }
            }
            trans.push(tab);
        }
        let cp = crate::chain::ChainPotentials::new(m, initial, trans).unwrap();
        let lat = ChainLattice::compute(&cp).unwrap();
        let b = tree_bp(&g, &pot).unwrap();
        assert!(close(b.log_z, lat.log_z, 1e-10));
        for (x, y) in b.node.iter().zip(lat.node_marginals(&cp)) {
            for (p, q) in x.iter().zip(y) {
                assert!(close(*p, q, 1e-10));
            }
        }
        for (t, e) in lat.edge_marginals(&cp).iter().enumerate() {
            for (p, q) in b.factor[len + t].iter().zip(e) {
                assert!(close(*p, *q, 1e-10));
            }
        }
    }

    #[test]
    fn random_tree_matches_enumeration() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_tree(&mut rng, 7, 3, 3);
        let pot = random_potentials(&mut rng, &g, 1.0);
        let exact = enumerate_graph(&g, &pot);
        let b = tree_bp(&g, &pot).unwrap();
        assert!(close(b.log_z, exact.log_z, 1e-10));
        for (x, y) in b.node.iter().zip(&exact.node) {
            for (p, q) in x.iter().zip(y) {
                assert!(close(*p, *q, 1e-10));
            }
        }
        for (x, y) in b.factor.iter().zip(&exact.factor) {
            for (p, q) in x.iter().zip(y) {
                assert!(close(*p, *q, 1e-10));
            }
        }
        let l = loopy_bp(&g, &pot, BpConfig::default()).unwrap();
        assert!(l.converged);
        for (x, y) in l.node.iter().zip(&b.node) {
            for (p, q) in x.iter().zip(y) {
                assert!(close(*p, *q, 1e-8));
            }
        }
    }

    #[test]
    fn tree_joint_identity() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_tree(&mut rng, 5, 3, 2);
        let pot = random_potentials(&mut rng, &g, 1.0);
        let exact = enumerate_graph(&g, &pot);
        let b = tree_bp(&g, &pot).unwrap();
        for _ in 0..20 {
            let y: Vec<usize> = g.variables().iter().map(|v| rng.random_range(0..v.cardinality)).collect();
            let lp = log_joint_from_marginals(&g, &b, &y).unwrap();
            assert!(close(lp, g.log_score(&pot, &y) - exact.log_z, 1e-9));
        }
    }

    #[test]
    fn weak_grid_converges_consistently() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = build_grid_graph(2, 2, 2, vec![SparseFeatureVector::new(); 4], None, 0).unwrap();
        let pot = random_potentials(&mut rng, &g, 0.1);
        let b = loopy_bp(&g, &pot, BpConfig::default()).unwrap();
        assert!(b.converged);
        assert!(b.iterations <= 100);
        assert_locally_consistent(&g, &b, 1e-6);
    }

    fn assert_locally_consistent(g: &FactorGraph, b: &BeliefState, tol: f64) {
        for f in g.factors() {
            let cards = g.scope_cards(f.id);
            let st = strides(&cards);
            for (slot, &v) in f.scope.iter().enumerate() {
                let mut marg = vec![0.0; cards[slot]];
                for (idx, q) in b.factor[f.id].iter().enumerate() {
                    marg[(idx / st[slot]) % cards[slot]] += q;
                }
                for (x, y) in marg.iter().zip(&b.node[v]) {
                    assert!(close(*x, *y, tol), "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn loopy_grid_local_consistency() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = build_grid_graph(3, 3, 2, vec![SparseFeatureVector::new(); 4], None, 0).unwrap();
        let pot = random_potentials(&mut rng, &g, 0.5);
        let b = loopy_bp(&g, &pot, BpConfig { max_iters: 500, ..BpConfig::default() }).unwrap();
        assert!(b.converged);
        assert_locally_consistent(&g, &b, 1e-5);
    }

    #[test]
    fn damping_zero_is_undamped() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = build_grid_graph(2, 3, 3, vec![SparseFeatureVector::new(); 9], None, 0).unwrap();
        let pot = random_potentials(&mut rng, &g, 0.5);
        let a = loopy_bp(&g, &pot, BpConfig { max_iters: 7, tolerance: 0.0, damping: 0.0 }).unwrap();
        let b = loopy_bp(&g, &pot, BpConfig { max_iters: 7, tolerance: 0.0, damping: 0.0 }).unwrap();
        assert_eq!(a, b);
        let d = loopy_bp(&g, &pot, BpConfig { max_iters: 300, tolerance: 1e-9, damping: 0.5 }).unwrap();
        let u = loopy_bp(&g, &pot, BpConfig { max_iters: 300, tolerance: 1e-9, damping: 0.0 }).unwrap();
        for (x, y) in d.node.iter().zip(&u.node) {
            for (p, q) in x.iter().zip(y) {
                assert!(close(*p, *q, 1e-6));
            }
        }
    }

    #[test]
    fn messages_stay_normalized() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = build_grid_graph(3, 3, 3, vec![SparseFeatureVector::new(); 9], None, 0).unwrap();
        let pot = random_potentials(&mut rng, &g, 2.0);
        for iters in [1, 2, 5, 13] {
            let msgs = loopy_messages(&g, &pot, BpConfig { max_iters: iters, tolerance: 0.0, damping: 0.3 }, MessageSet::uniform(&g)).unwrap();
            for m in msgs.factor_to_var.iter().chain(&msgs.var_to_factor).flatten() {
                assert!(lse(m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unnormalized_beliefs_rejected() {
        let g = unary_graph(2);
        let pot = g.log_potentials(&[]).unwrap();
        let mut b = tree_bp(&g, &pot).unwrap();
        b.node[0][0] = 0.9;
        assert!(matches!(bethe_free_energy(&g, &b, &pot), Err(Error::Unnormalized(_))));
    }

    #[test]
    fn gibbs_conditional_uniform_and_unary() {
        let g = build_grid_graph(2, 2, 3, vec![SparseFeatureVector::new(); 9], None, 0).unwrap();
        let pot = g.log_potentials(&[]).unwrap();
        let c = gibbs_conditional(&g, &pot, &[0, 1, 2, 0], 2).unwrap();
        assert!(c.iter().all(|&p| close(p, 1.0 / 3.0, 1e-15)));

        let g = unary_graph(2);
        let pot = GraphPotentials { tables: vec![vec![0.0, 2f64.ln()]], constant: 0.0 };
        let c = gibbs_conditional(&g, &pot, &[1], 0).unwrap();
        assert!(close(c[1], 2.0 / 3.0, 1e-15));
    }

    #[test]
    fn gibbs_conditional_matches_enumeration() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = build_grid_graph(2, 2, 2, vec![SparseFeatureVector::new(); 4], None, 0).unwrap();
        let pot = random_potentials(&mut rng, &g, 1.5);
        let exact = enumerate_graph(&g, &pot);
        for s in 0..4 {
            let y = vec![1, 0, 1, 1];
            let c = gibbs_conditional(&g, &pot, &y, s).unwrap();
            let joint: Vec<f64> = (0..2)
                .map(|v| {
                    let mut z = y.clone();
                    z[s] = v;
                    exact.joint(&z)
                })
                .collect();
            let tot: f64 = joint.iter().sum();
            for v in 0..2 {
                assert!(close(c[v], joint[v] / tot, 1e-12));
            }
        }
    }

    #[test]
    fn gibbs_markov_blanket() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = build_grid_graph(1, 4, 3, vec![SparseFeatureVector::new(); 9], None, 0).unwrap();
        let pot = random_potentials(&mut rng, &g, 1.0);
        let a = gibbs_conditional(&g, &pot, &[0, 1, 2, 0], 0).unwrap();
        let b = gibbs_conditional(&g, &pot, &[0, 1, 1, 2], 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gibbs_single_variable() {
        let g = unary_graph(3);
        let pot = GraphPotentials { tables: vec![vec![0.0, 1.0, -0.5]], constant: 0.0 };
        let exact = enumerate_graph(&g, &pot);
        let s = gibbs_run(&g, &pot, &GibbsConfig { sweeps: 50_000, burn_in: 0, thinning: 1, seed: 1, init: None }).unwrap();
        let m = s.node_marginals(&g);
        for (x, y) in m[0].iter().zip(&exact.node[0]) {
            assert!(close(*x, *y, 0.01));
        }
    }

    #[test]
    fn gibbs_deterministic_potentials() {
        let mut b = FactorGraphBuilder::new(0);
        let t = b.template(0..0, vec![2]);
        for _ in 0..3 {
            b.variable(2, VariableRole::Output);
        }
        for v in 0..3 {
            let base = if v == 1 { vec![LOG_ZERO, 0.0] } else { vec![0.0, LOG_ZERO] };
            b.factor(vec![v], t, vec![SparseFeatureVector::new(); 2], Some(base));
        }
        let g = b.build().unwrap();
        let pot = g.log_potentials(&[]).unwrap();
        let s = gibbs_run(&g, &pot, &GibbsConfig { sweeps: 100, burn_in: 10, thinning: 3, seed: 2, init: None }).unwrap();
        assert_eq!(s.samples.len(), 30);
        assert!(s.samples.iter().all(|y| y == &vec![0, 1, 0]));
    }

    #[test]
    fn gibbs_strong_chain_pairwise() {
        let g = build_grid_graph(1, 3, 2, vec![SparseFeatureVector::new(); 4], None, 0).unwrap();
        let mut pot = g.log_potentials(&[]).unwrap();
        for t in pot.tables.iter_mut() {
            *t = vec![1.5, -1.5, -1.5, 1.5];
        }
        let exact = enumerate_graph(&g, &pot);
        let cfg = GibbsConfig { sweeps: 100_000, burn_in: 1000, thinning: 1, seed: 3, init: None };
        let s = gibbs_run(&g, &pot, &cfg).unwrap();
        for a in 0..2 {
            for (x, y) in s.factor_marginal(&g, a).iter().zip(&exact.factor[a]) {
                assert!(close(*x, *y, 0.02));
            }
        }
        assert_eq!(s, gibbs_run(&g, &pot, &cfg).unwrap());
        let e = s.mcmc_expectation(|y| (y[0] == y[2]) as u8 as f64);
        assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn gibbs_parameter_errors() {
        let g = unary_graph(2);
        let pot = g.log_potentials(&[]).unwrap();
        let bad = GibbsConfig { sweeps: 5, burn_in: 5, thinning: 1, seed: 0, init: None };
        assert!(gibbs_run(&g, &pot, &bad).is_err());
        let bad = GibbsConfig { sweeps: 5, burn_in: 0, thinning: 0, seed: 0, init: None };
        assert!(gibbs_run(&g, &pot, &bad).is_err());
    }
}
