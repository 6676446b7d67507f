//! Factor graphs with clique templates.
//!
//! Every factor stores one sparse feature vector per joint assignment of its
//! scope. Assignments are encoded row-major in mixed radix: the last variable
//! of the scope varies fastest, so for cardinalities `[c0, c1, c2]` the index
//! of `(a, b, c)` is `(a * c1 + b) * c2 + c`.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::features::{ChainInstance, FeatureBlock, FeatureSpace, SparseFeatureVector};
use crate::logspace::LOG_ZERO;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariableRole {
    Output,
    Latent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableNode {
    pub id: usize,
    pub cardinality: usize,
    pub role: VariableRole,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorNode {
    pub id: usize,
    pub scope: Vec<usize>,
    pub template: usize,
    /// One vector per scope assignment (mixed-radix order).
    pub features: Vec<SparseFeatureVector>,
    /// Fixed log-potential added to every assignment; `-inf` forbids it.
    pub base: Option<Vec<f64>>,
}

impl FactorNode {
    pub fn table_len(&self) -> usize {
        self.features.len()
    }
}

/// A set of factors whose parameters are tied to one weight slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliqueTemplate {
    pub id: usize,
    pub params: Range<usize>,
    pub arity: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph {
    variables: Vec<VariableNode>,
    factors: Vec<FactorNode>,
    templates: Vec<CliqueTemplate>,
    /// `(factor, slot)` pairs touching each variable.
    adjacency: Vec<Vec<(usize, usize)>>,
    /// Features and fixed log-potential of factors whose whole scope was clamped.
    constant_features: SparseFeatureVector,
    constant_base: f64,
    num_weights: usize,
    is_tree: bool,
}

/// Log-potential tables, one per factor, plus the clamped constant.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphPotentials {
    pub tables: Vec<Vec<f64>>,
    pub constant: f64,
}

pub fn encode(cards: &[usize], assignment: &[usize]) -> usize {
    assignment
        .iter()
        .zip(cards)
        .fold(0, |acc, (&a, &c)| acc * c + a)
}

pub fn decode(cards: &[usize], mut index: usize, out: &mut [usize]) {
    for k in (0..cards.len()).rev() {
        out[k] = index % cards[k];
        index /= cards[k];
    }
}

/// Strides of each scope position in the mixed-radix encoding.
pub fn strides(cards: &[usize]) -> Vec<usize> {
    let mut s = vec![1; cards.len()];
    for k in (0..cards.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * cards[k + 1];
    }
    s
}

#[derive(Debug, Clone, Default)]
pub struct FactorGraphBuilder {
    variables: Vec<VariableNode>,
    factors: Vec<FactorNode>,
    templates: Vec<CliqueTemplate>,
    num_weights: usize,
}

impl FactorGraphBuilder {
    pub fn new(num_weights: usize) -> Self {
        Self {
            num_weights,
            ..Self::default()
        }
    }

    pub fn variable(&mut self, cardinality: usize, role: VariableRole) -> usize {
        let id = self.variables.len();
        self.variables.push(VariableNode {
            id,
            cardinality,
            role,
        });
        id
    }

    pub fn template(&mut self, params: Range<usize>, arity: Vec<usize>) -> usize {
        let id = self.templates.len();
        self.templates.push(CliqueTemplate { id, params, arity });
        id
    }

    pub fn factor(
        &mut self,
        scope: Vec<usize>,
        template: usize,
        features: Vec<SparseFeatureVector>,
        base: Option<Vec<f64>>,
    ) -> usize {
        let id = self.factors.len();
        self.factors.push(FactorNode {
            id,
            scope,
            template,
            features,
            base,
        });
        id
    }

    pub fn build(self) -> Result<FactorGraph> {
        FactorGraph::assemble(
            self.variables,
            self.factors,
            self.templates,
            self.num_weights,
            SparseFeatureVector::new(),
            0.0,
        )
    }
}

impl FactorGraph {
    fn assemble(
        variables: Vec<VariableNode>,
        factors: Vec<FactorNode>,
        templates: Vec<CliqueTemplate>,
        num_weights: usize,
        constant_features: SparseFeatureVector,
        constant_base: f64,
    ) -> Result<Self> {
        for v in &variables {
            if v.cardinality == 0 {
                return Err(Error::Structure(format!("variable {} has cardinality 0", v.id)));
            }
        }
        let mut adjacency = vec![Vec::new(); variables.len()];
        for f in &factors {
            if f.scope.is_empty() {
                return Err(Error::Structure(format!("factor {} has an empty scope", f.id)));
            }
            for (slot, &v) in f.scope.iter().enumerate() {
                if v >= variables.len() {
                    return Err(Error::Structure(format!("factor {} names unknown variable {v}", f.id)));
                }
                if f.scope[..slot].contains(&v) {
                    return Err(Error::Structure(format!("factor {} repeats variable {v}", f.id)));
                }
                adjacency[v].push((f.id, slot));
            }
            let size: usize = f.scope.iter().map(|&v| variables[v].cardinality).product();
            if f.features.len() != size {
                return Err(Error::Structure(format!(
                    "factor {} has {} feature vectors for {size} assignments",
                    f.id,
                    f.features.len()
                )));
            }
            if f.base.as_ref().is_some_and(|b| b.len() != size) {
                return Err(Error::Structure(format!("factor {} base table has wrong size", f.id)));
            }
            if f.template >= templates.len() {
                return Err(Error::Structure(format!("factor {} names unknown template", f.id)));
            }
        }
        let is_tree = forest_check(variables.len(), &factors);
        Ok(Self {
            variables,
            factors,
            templates,
            adjacency,
            constant_features,
            constant_base,
            num_weights,
            is_tree,
        })
    }

    pub fn variables(&self) -> &[VariableNode] {
        &self.variables
    }

    pub fn factors(&self) -> &[FactorNode] {
        &self.factors
    }

    pub fn templates(&self) -> &[CliqueTemplate] {
        &self.templates
    }

    pub fn num_weights(&self) -> usize {
        self.num_weights
    }

    pub fn is_tree(&self) -> bool {
        self.is_tree
    }

    pub fn cardinality(&self, v: usize) -> usize {
        self.variables[v].cardinality
    }

    pub fn neighbors(&self, v: usize) -> &[(usize, usize)] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn scope_cards(&self, factor: usize) -> Vec<usize> {
        self.factors[factor]
            .scope
            .iter()
            .map(|&v| self.variables[v].cardinality)
            .collect()
    }

    pub fn constant_features(&self) -> &SparseFeatureVector {
        &self.constant_features
    }

    /// Features of a complete assignment, including clamped constants.
    pub fn assignment_features(&self, assignment: &[usize], grad: &mut [f64], scale: f64) {
        self.constant_features.add_scaled_to(grad, scale);
        for f in &self.factors {
            let idx = self.factor_index(f.id, assignment);
            f.features[idx].add_scaled_to(grad, scale);
        }
    }

    /// Table index of `factor` under a full assignment of the graph.
    pub fn factor_index(&self, factor: usize, assignment: &[usize]) -> usize {
        let f = &self.factors[factor];
        f.scope.iter().fold(0, |acc, &v| {
            acc * self.variables[v].cardinality + assignment[v]
        })
    }

    pub fn log_potentials(&self, weights: &[f64]) -> Result<GraphPotentials> {
        if weights.len() < self.num_weights {
            return Err(Error::Corrupt(format!(
                "weight vector has {} entries, graph needs {}",
                weights.len(),
                self.num_weights
            )));
        }
        let mut tables = Vec::with_capacity(self.factors.len());
        for f in &self.factors {
            let mut table = Vec::with_capacity(f.features.len());
            for (k, fv) in f.features.iter().enumerate() {
                table.push(vector_potential(fv, weights, f.base.as_ref().map(|b| b[k]))?);
            }
            tables.push(table);
        }
        let constant = vector_potential(&self.constant_features, weights, Some(self.constant_base))?;
        Ok(GraphPotentials { tables, constant })
    }

    /// Unnormalized log score of a complete assignment.
    pub fn log_score(&self, potentials: &GraphPotentials, assignment: &[usize]) -> f64 {
        let mut s = potentials.constant;
        for f in &self.factors {
            s += potentials.tables[f.id][self.factor_index(f.id, assignment)];
        }
        s
    }

    /// Fixes some variables and returns the graph over the rest. Factors
    /// lose their clamped dimensions; factors left with no free variable
    /// fold into the graph constant. `kept[i]` maps reduced ids back.
    pub fn clamp(&self, clamped: &[Option<usize>]) -> Result<(FactorGraph, Vec<usize>)> {
        if clamped.len() != self.variables.len() {
            return Err(Error::Assignment(format!(
                "{} values for {} variables",
                clamped.len(),
                self.variables.len()
            )));
        }
        for (v, c) in clamped.iter().enumerate() {
            if let Some(x) = *c {
                if x >= self.variables[v].cardinality {
                    return Err(Error::Assignment(format!(
                        "value {x} for variable {v} of cardinality {}",
                        self.variables[v].cardinality
                    )));
                }
            }
        }
        let mut new_id = vec![usize::MAX; self.variables.len()];
        let mut kept = Vec::new();
        let mut variables = Vec::new();
        for (v, c) in clamped.iter().enumerate() {
            if c.is_none() {
                new_id[v] = variables.len();
                kept.push(v);
                variables.push(VariableNode {
                    id: variables.len(),
                    cardinality: self.variables[v].cardinality,
                    role: self.variables[v].role,
                });
            }
        }
        let mut constant: Vec<(usize, f64)> = self.constant_features.iter().collect();
        let mut constant_base = self.constant_base;
        let mut factors = Vec::new();
        for f in &self.factors {
            let cards = self.scope_cards(f.id);
            let free: Vec<usize> = (0..f.scope.len()).filter(|&k| clamped[f.scope[k]].is_none()).collect();
            let mut full = vec![0; f.scope.len()];
            for (k, &v) in f.scope.iter().enumerate() {
                if let Some(x) = clamped[v] {
                    full[k] = x;
                }
            }
            if free.is_empty() {
                let idx = encode(&cards, &full);
                constant.extend(f.features[idx].iter());
                if let Some(b) = &f.base {
                    constant_base += b[idx];
                }
                continue;
            }
            let free_cards: Vec<usize> = free.iter().map(|&k| cards[k]).collect();
            let size: usize = free_cards.iter().product();
            let mut sub = vec![0; free.len()];
            let mut features = Vec::with_capacity(size);
            let mut base = f.base.as_ref().map(|_| Vec::with_capacity(size));
            for r in 0..size {
                decode(&free_cards, r, &mut sub);
                for (j, &k) in free.iter().enumerate() {
                    full[k] = sub[j];
                }
                let idx = encode(&cards, &full);
                features.push(f.features[idx].clone());
                if let (Some(out), Some(b)) = (base.as_mut(), f.base.as_ref()) {
                    out.push(b[idx]);
                }
            }
            factors.push(FactorNode {
                id: factors.len(),
                scope: free.iter().map(|&k| new_id[f.scope[k]]).collect(),
                template: f.template,
                features,
                base,
            });
        }
        let graph = FactorGraph::assemble(
            variables,
            factors,
            self.templates.clone(),
            self.num_weights,
            SparseFeatureVector::from_entries(constant),
            constant_base,
        )?;
        Ok((graph, kept))
    }
}

fn vector_potential(fv: &SparseFeatureVector, weights: &[f64], base: Option<f64>) -> Result<f64> {
    if let Some(i) = fv.max_index() {
        if i >= weights.len() {
            return Err(Error::Corrupt(format!("feature index {i} outside weight vector")));
        }
    }
    let b = base.unwrap_or(0.0);
    if b == LOG_ZERO {
        return Ok(LOG_ZERO);
    }
    Ok(b + fv.dot(weights))
}

/// Every connected component satisfies `|edges| = |vars| + |factors| - 1`.
fn forest_check(num_vars: usize, factors: &[FactorNode]) -> bool {
    let n = num_vars + factors.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for f in factors {
        let fnode = num_vars + f.id;
        for &v in &f.scope {
            let (a, b) = (find(&mut parent, fnode), find(&mut parent, v));
            if a == b {
                return false;
            }
            parent[a] = b;
        }
    }
    true
}

/// Log-potential `Σ_k θ_k f_k` of one factor at one scope assignment.
pub fn factor_log_potential(factor: &FactorNode, cards: &[usize], weights: &[f64], assignment: &[usize]) -> Result<f64> {
    if assignment.len() != cards.len() || assignment.iter().zip(cards).any(|(a, c)| a >= c) {
        return Err(Error::Assignment("assignment does not fit the factor scope".into()));
    }
    let idx = encode(cards, assignment);
    vector_potential(&factor.features[idx], weights, factor.base.as_ref().map(|b| b[idx]))
}

/// Template parameter slices for chain graphs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainTemplates {
    pub node: Range<usize>,
    pub edge: Range<usize>,
}

/// A chain of `T` variables: `T` unary factors (template 1) and `T - 1`
/// pairwise factors tied to one transition template (template 0).
///
/// `node_features[t]` has `M` vectors; `edge_features[t - 1]` has `M²`
/// vectors in `(prev, cur)` order.
pub fn build_chain_graph(
    num_labels: usize,
    node_features: Vec<Vec<SparseFeatureVector>>,
    edge_features: Vec<Vec<SparseFeatureVector>>,
    templates: ChainTemplates,
) -> Result<FactorGraph> {
    let len = node_features.len();
    if len == 0 || num_labels == 0 {
        return Err(Error::param("chain graph needs T ≥ 1 and M ≥ 1"));
    }
    if edge_features.len() != len - 1 {
        return Err(Error::param("need T - 1 edge feature tables"));
    }
    let num_weights = templates.edge.end.max(templates.node.end);
    let mut b = FactorGraphBuilder::new(num_weights);
    let edge_t = b.template(templates.edge, vec![num_labels, num_labels]);
    let node_t = b.template(templates.node, vec![num_labels]);
    for _ in 0..len {
        b.variable(num_labels, VariableRole::Output);
    }
    for (t, nf) in node_features.into_iter().enumerate() {
        b.factor(vec![t], node_t, nf, None);
    }
    for (t, ef) in edge_features.into_iter().enumerate() {
        b.factor(vec![t, t + 1], edge_t, ef, None);
    }
    b.build()
}

/// The chain graph of a featurized instance, with weight indices from `space`.
pub fn chain_graph_from_instance(space: &FeatureSpace, inst: &ChainInstance) -> Result<FactorGraph> {
    let nodes = (0..inst.len()).map(|t| space.node_factor_features(inst, t)).collect();
    let edges = (1..inst.len()).map(|t| space.edge_factor_features(inst, t)).collect();
    let templates = ChainTemplates {
        node: 0..space.block_range(FeatureBlock::Node).end,
        edge: space.block_range(FeatureBlock::Edge),
    };
    build_chain_graph(space.num_labels(), nodes, edges, templates)
}

/// `rows × cols` grid, 4-neighbour pairwise factors sharing one template.
/// Horizontal factors come first, then vertical. Unary factors, when given,
/// use a second template.
pub fn build_grid_graph(
    rows: usize,
    cols: usize,
    num_labels: usize,
    pairwise: Vec<SparseFeatureVector>,
    unary: Option<Vec<Vec<SparseFeatureVector>>>,
    num_weights: usize,
) -> Result<FactorGraph> {
    if rows == 0 || cols == 0 {
        return Err(Error::param("grid needs at least one row and column"));
    }
    let mut b = FactorGraphBuilder::new(num_weights);
    let pair_t = b.template(0..num_weights, vec![num_labels, num_labels]);
    for _ in 0..rows * cols {
        b.variable(num_labels, VariableRole::Output);
    }
    let id = |r: usize, c: usize| r * cols + c;
    for r in 0..rows {
        for c in 0..cols.saturating_sub(1) {
            b.factor(vec![id(r, c), id(r, c + 1)], pair_t, pairwise.clone(), None);
        }
    }
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols {
            b.factor(vec![id(r, c), id(r + 1, c)], pair_t, pairwise.clone(), None);
        }
    }
    if let Some(unary) = unary {
        let unary_t = b.template(0..num_weights, vec![num_labels]);
        for (v, u) in unary.into_iter().enumerate() {
            b.factor(vec![v], unary_t, u, None);
        }
    }
    b.build()
}

/// Potential tables keyed by a weight-version counter; rebuilt only when the
/// published version changes.
#[derive(Debug, Clone, Default)]
pub struct PotentialCache {
    version: Option<u64>,
    potentials: Option<GraphPotentials>,
}

impl PotentialCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, graph: &FactorGraph, weights: &[f64], version: u64) -> Result<&GraphPotentials> {
        if self.version != Some(version) || self.potentials.is_none() {
            self.potentials = Some(graph.log_potentials(weights)?);
            self.version = Some(version);
        }
        Ok(self.potentials.as_ref().expect("just filled"))
    }

    pub fn invalidate(&mut self) {
        self.version = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ind(i: usize) -> SparseFeatureVector {
        SparseFeatureVector::indicator(i)
    }

    fn empty(n: usize) -> Vec<SparseFeatureVector> {
        vec![SparseFeatureVector::new(); n]
    }

    #[test]
    fn mixed_radix_roundtrip() {
        let cards = [2, 3, 4];
        let mut out = [0; 3];
        for i in 0..24 {
            decode(&cards, i, &mut out);
            assert_eq!(encode(&cards, &out), i);
        }
        assert_eq!(encode(&cards, &[1, 2, 3]), (3 + 2) * 4 + 3);
        assert_eq!(strides(&cards), vec![12, 4, 1]);
    }

    #[test]
    fn potentials_from_weights() {
        let mut b = FactorGraphBuilder::new(3);
        let t = b.template(0..3, vec![2, 2]);
        b.variable(2, VariableRole::Output);
        b.variable(2, VariableRole::Output);
        // 2×2 factor with three features
        let feats = vec![
            SparseFeatureVector::from_entries([(0, 1.0)]),
            SparseFeatureVector::from_entries([(1, 1.0), (2, 0.5)]),
            SparseFeatureVector::from_entries([(2, 2.0)]),
            SparseFeatureVector::new(),
        ];
        b.factor(vec![0, 1], t, feats, None);
        let g = b.build().unwrap();
        let zero = g.log_potentials(&[0.0; 3]).unwrap();
        assert!(zero.tables[0].iter().all(|&x| x == 0.0));
        let w = [2.5, -1.0, 0.75];
        let p = g.log_potentials(&w).unwrap();
        let manual = [2.5, -1.0 + 0.5 * 0.75, 2.0 * 0.75, 0.0];
        for (a, b) in p.tables[0].iter().zip(manual) {
            assert!((a - b).abs() < 1e-15);
        }
        let f = &g.factors()[0];
        assert_eq!(factor_log_potential(f, &[2, 2], &w, &[0, 0]).unwrap(), 2.5);
        assert!(factor_log_potential(f, &[2, 2], &w, &[2, 0]).is_err());
        assert!(matches!(g.log_potentials(&[0.0; 2]), Err(Error::Corrupt(_))));
    }

    #[test]
    fn corrupt_feature_index() {
        let mut b = FactorGraphBuilder::new(1);
        let t = b.template(0..1, vec![1]);
        b.variable(1, VariableRole::Output);
        b.factor(vec![0], t, vec![ind(4)], None);
        let g = b.build().unwrap();
        assert!(matches!(g.log_potentials(&[0.0; 2]), Err(Error::Corrupt(_))));
    }

    #[test]
    fn invalid_scopes_rejected() {
        let mut b = FactorGraphBuilder::new(0);
        let t = b.template(0..0, vec![2, 2]);
        b.variable(2, VariableRole::Output);
        b.factor(vec![0, 0], t, empty(4), None);
        assert!(b.build().is_err());
        let mut b = FactorGraphBuilder::new(0);
        let t = b.template(0..0, vec![]);
        b.factor(vec![], t, empty(1), None);
        assert!(b.build().is_err());
    }

    #[test]
    fn chain_graph_shapes() {
        let templates = || ChainTemplates { node: 0..0, edge: 0..0 };
        let g = build_chain_graph(2, vec![empty(2)], vec![], templates()).unwrap();
        assert_eq!(g.variables().len(), 1);
        assert_eq!(g.factors().len(), 1);
        let g = build_chain_graph(3, vec![empty(3); 4], vec![empty(9); 3], templates()).unwrap();
        assert!(g.is_tree());
        assert_eq!(g.factors().len(), 4 + 3);
        let p = g.log_potentials(&[]).unwrap();
        assert!(p.tables.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn chain_parameters_independent_of_length() {
        let edge: Vec<_> = (0..4).map(ind).collect();
        let node: Vec<_> = (4..6).map(ind).collect();
        let templates = ChainTemplates { node: 4..6, edge: 0..4 };
        let g3 = build_chain_graph(2, vec![node.clone(); 3], vec![edge.clone(); 2], templates.clone()).unwrap();
        let g9 = build_chain_graph(2, vec![node; 9], vec![edge; 8], templates).unwrap();
        assert_eq!(g3.num_weights(), g9.num_weights());
        assert_eq!(g3.templates(), g9.templates());
    }

    #[test]
    fn grid_shapes() {
        let pair = empty(4);
        let g = build_grid_graph(1, 5, 2, pair.clone(), None, 0).unwrap();
        assert!(g.is_tree());
        let g = build_grid_graph(2, 2, 2, pair.clone(), None, 0).unwrap();
        assert_eq!(g.variables().len(), 4);
        assert_eq!(g.factors().len(), 4);
        assert!(!g.is_tree());
        let g = build_grid_graph(3, 3, 2, pair, None, 0).unwrap();
        assert_eq!(g.factors().len(), 12);
    }

    #[test]
    fn tying_is_position_independent() {
        // same template evaluated at any factor instance gives the same table
        let pair: Vec<_> = (0..4).map(ind).collect();
        let g = build_grid_graph(3, 3, 2, pair, None, 4).unwrap();
        let p = g.log_potentials(&[0.3, -0.2, 1.1, 0.7]).unwrap();
        for t in &p.tables {
            assert_eq!(t, &p.tables[0]);
        }
    }

    fn small_chain() -> FactorGraph {
        let edge: Vec<_> = (0..4).map(ind).collect();
        let node: Vec<_> = (4..6).map(ind).collect();
        build_chain_graph(2, vec![node; 3], vec![edge; 2], ChainTemplates { node: 4..6, edge: 0..4 }).unwrap()
    }

    #[test]
    fn clamp_none_is_identity() {
        let g = small_chain();
        let (c, kept) = g.clamp(&[None, None, None]).unwrap();
        assert_eq!(kept, vec![0, 1, 2]);
        assert_eq!(c.factors(), g.factors());
    }

    #[test]
    fn clamp_all_folds_to_constant() {
        let g = small_chain();
        let w = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        let y = [1, 0, 1];
        let (c, _) = g.clamp(&[Some(1), Some(0), Some(1)]).unwrap();
        assert!(c.variables().is_empty());
        let pc = c.log_potentials(&w).unwrap();
        let pg = g.log_potentials(&w).unwrap();
        assert!((pc.constant - g.log_score(&pg, &y)).abs() < 1e-15);
        assert!(g.clamp(&[Some(2), None, None]).is_err());
    }

    #[test]
    fn clamping_alternate_variables_splits_the_chain() {
        // y0 - w1 - y2 - w3 - y4 with y observed: w1 and w3 become independent
        let mut b = FactorGraphBuilder::new(4);
        let t = b.template(0..4, vec![2, 2]);
        for i in 0..5 {
            b.variable(2, if i % 2 == 0 { VariableRole::Output } else { VariableRole::Latent });
        }
        for i in 0..4 {
            b.factor(vec![i, i + 1], t, (0..4).map(ind).collect(), None);
        }
        let g = b.build().unwrap();
        let (c, kept) = g.clamp(&[Some(0), None, Some(1), None, Some(1)]).unwrap();
        assert_eq!(kept, vec![1, 3]);
        assert!(c.is_tree());
        assert!(c.factors().iter().all(|f| f.scope.len() == 1));
        assert_eq!(c.factors().len(), 4);
    }

    #[test]
    fn forbidden_entries_are_log_zero() {
        let mut b = FactorGraphBuilder::new(1);
        let t = b.template(0..1, vec![2]);
        b.variable(2, VariableRole::Output);
        b.factor(vec![0], t, vec![ind(0), ind(0)], Some(vec![0.0, LOG_ZERO]));
        let g = b.build().unwrap();
        let p = g.log_potentials(&[3.0]).unwrap();
        assert_eq!(p.tables[0], vec![3.0, LOG_ZERO]);
    }

    #[test]
    fn cache_reuses_until_version_bump() {
        let g = small_chain();
        let mut cache = PotentialCache::new();
        let a = cache.get(&g, &[0.0; 6], 1).unwrap().clone();
        let b = cache.get(&g, &[9.0; 6], 1).unwrap().clone();
        assert_eq!(a, b);
        let c = cache.get(&g, &[9.0; 6], 2).unwrap().clone();
        assert_ne!(a, c);
    }
}
