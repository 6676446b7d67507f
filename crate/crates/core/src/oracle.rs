//! Brute-force reference computations for tests. Everything here enumerates
//! the full assignment space, so keep models tiny.

use rand::Rng;

use crate::chain::ChainPotentials;
use crate::error::Result;
use crate::features::{ChainInstance, FeatureMode, FeatureSpace, FeatureSpaceBuilder, FeatureTemplate, SparseFeatureVector};
use crate::graph::{decode, FactorGraph, FactorGraphBuilder, GraphPotentials, VariableRole};
use crate::logspace::lse;
use crate::models::Sequence;
use crate::objectives::{GraphInstance, LatentInstance};
use crate::synth::{synthetic_label, synthetic_word};

/// Random log-potentials in `[-scale, scale]`.
pub fn random_chain<R: Rng>(rng: &mut R, num_labels: usize, len: usize, scale: f64) -> ChainPotentials {
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-scale..=scale)).collect() };
    let initial = draw(num_labels);
    let transitions = (1..len).map(|_| draw(num_labels * num_labels)).collect();
    ChainPotentials::new(num_labels, initial, transitions).expect("valid random chain")
}

/// All label sequences of a chain with their scores.
#[derive(Debug, Clone)]
pub struct ChainEnumeration {
    pub log_z: f64,
    pub node_marginals: Vec<Vec<f64>>,
    pub edge_marginals: Vec<Vec<f64>>,
    /// Sorted by score descending, ties lexicographic.
    pub ranked: Vec<(Vec<usize>, f64)>,
}

/// Every assignment of variables with the given cardinalities, last fastest.
pub fn all_assignments(cards: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = cards.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut buf = vec![0; cards.len()];
    for idx in 0..total {
        decode(cards, idx, &mut buf);
        out.push(buf.clone());
    }
    out
}

pub fn enumerate_chain(p: &ChainPotentials) -> ChainEnumeration {
    let m = p.num_labels();
    let t = p.len();
    let mut ranked: Vec<(Vec<usize>, f64)> =
        all_assignments(&vec![m; t]).into_iter().map(|y| { let s = p.score(&y); (y, s) }).collect();
    let scores: Vec<f64> = ranked.iter().map(|(_, s)| *s).collect();
    let log_z = lse(&scores);
    let mut node = vec![vec![0.0; m]; t];
    let mut edge = vec![vec![0.0; m * m]; t.saturating_sub(1)];
    for (y, s) in &ranked {
        let pr = (s - log_z).exp();
        for (i, &l) in y.iter().enumerate() {
            node[i][l] += pr;
            if i > 0 {
                edge[i - 1][y[i - 1] * m + l] += pr;
            }
        }
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ChainEnumeration {
        log_z,
        node_marginals: node,
        edge_marginals: edge,
        ranked,
    }
}

#[derive(Debug, Clone)]
pub struct GraphEnumeration {
    pub cards: Vec<usize>,
    pub log_z: f64,
    /// Unnormalized log score of every assignment, mixed-radix order.
    pub log_scores: Vec<f64>,
    pub node: Vec<Vec<f64>>,
    pub factor: Vec<Vec<f64>>,
}

impl GraphEnumeration {
    pub fn joint(&self, assignment: &[usize]) -> f64 {
        (self.log_scores[crate::graph::encode(&self.cards, assignment)] - self.log_z).exp()
    }

    /// Exact `E[f(y)]`.
    pub fn expectation<F: Fn(&[usize]) -> f64>(&self, f: F) -> f64 {
        all_assignments(&self.cards)
            .iter()
            .map(|y| {
                let p = self.joint(y);
                if p == 0.0 { 0.0 } else { p * f(y) }
            })
            .sum()
    }
}

/// Exact log Z and marginals of a factor graph; includes the clamped constant.
pub fn enumerate_graph(g: &FactorGraph, pot: &GraphPotentials) -> GraphEnumeration {
    let cards: Vec<usize> = g.variables().iter().map(|v| v.cardinality).collect();
    let ys = all_assignments(&cards);
    let log_scores: Vec<f64> = ys.iter().map(|y| g.log_score(pot, y)).collect();
    let log_z = lse(&log_scores);
    let mut node: Vec<Vec<f64>> = cards.iter().map(|&c| vec![0.0; c]).collect();
    let mut factor: Vec<Vec<f64>> = g.factors().iter().map(|f| vec![0.0; f.table_len()]).collect();
    for (y, s) in ys.iter().zip(&log_scores) {
        let pr = (s - log_z).exp();
        if pr == 0.0 {
            continue;
        }
        for (v, &x) in y.iter().enumerate() {
            node[v][x] += pr;
        }
        for f in g.factors() {
            factor[f.id][g.factor_index(f.id, y)] += pr;
        }
    }
    GraphEnumeration {
        cards,
        log_z,
        log_scores,
        node,
        factor,
    }
}

/// A random tree over `num_vars` variables: each new factor joins one existing
/// variable with up to `max_arity - 1` new ones. Every variable also gets a
/// unary factor. Features are empty; pair it with [`random_potentials`].
pub fn random_tree<R: Rng>(rng: &mut R, num_vars: usize, max_card: usize, max_arity: usize) -> FactorGraph {
    let mut b = FactorGraphBuilder::new(0);
    let cards: Vec<usize> = (0..num_vars).map(|_| rng.random_range(2..=max_card.max(2))).collect();
    for &c in &cards {
        b.variable(c, VariableRole::Output);
    }
    let mut next = 1;
    while next < num_vars {
        let anchor = rng.random_range(0..next);
        let extra = rng.random_range(1..=(max_arity.max(2) - 1)).min(num_vars - next);
        let mut scope = vec![anchor];
        scope.extend(next..next + extra);
        next += extra;
        let arity: Vec<usize> = scope.iter().map(|&v| cards[v]).collect();
        let size = arity.iter().product();
        let t = b.template(0..0, arity);
        b.factor(scope, t, vec![SparseFeatureVector::new(); size], None);
    }
    for (v, &c) in cards.iter().enumerate() {
        let t = b.template(0..0, vec![c]);
        b.factor(vec![v], t, vec![SparseFeatureVector::new(); c], None);
    }
    b.build().expect("valid random tree")
}

/// Same shape as [`random_tree`], but every table entry carries up to two
/// random real features over `num_weights` shared parameters.
pub fn random_featured_tree<R: Rng>(rng: &mut R, num_vars: usize, max_card: usize, max_arity: usize, num_weights: usize) -> FactorGraph {
    let shape = random_tree(rng, num_vars, max_card, max_arity);
    let cards: Vec<usize> = (0..num_vars).map(|v| shape.cardinality(v)).collect();
    let mut b = FactorGraphBuilder::new(num_weights);
    for &c in &cards {
        b.variable(c, VariableRole::Output);
    }
    for f in shape.factors() {
        let arity: Vec<usize> = f.scope.iter().map(|&v| cards[v]).collect();
        let t = b.template(0..num_weights, arity);
        let features = (0..f.table_len())
            .map(|_| {
                let n = rng.random_range(0..=2);
                SparseFeatureVector::from_entries((0..n).map(|_| (rng.random_range(0..num_weights), rng.random_range(-1.0..=1.0))))
            })
            .collect();
        b.factor(f.scope.clone(), t, features, None);
    }
    b.build().expect("valid featured tree")
}

/// A uniformly random assignment of `g`.
pub fn random_assignment<R: Rng>(rng: &mut R, g: &FactorGraph) -> Vec<usize> {
    (0..g.variables().len()).map(|v| rng.random_range(0..g.cardinality(v))).collect()
}

/// Fully observed featured trees.
pub fn random_tree_dataset<R: Rng>(rng: &mut R, n: usize, num_vars: usize, max_card: usize, num_weights: usize) -> Vec<GraphInstance> {
    (0..n)
        .map(|_| {
            let g = random_featured_tree(rng, num_vars, max_card, 3, num_weights);
            let y = random_assignment(rng, &g);
            GraphInstance::new(g, y).expect("assignment fits")
        })
        .collect()
}

/// Featured trees where each variable is hidden with probability one half.
pub fn random_latent_dataset<R: Rng>(rng: &mut R, n: usize, num_vars: usize, max_card: usize, num_weights: usize) -> Vec<LatentInstance> {
    (0..n)
        .map(|_| {
            let g = random_featured_tree(rng, num_vars, max_card, 3, num_weights);
            let observed = random_assignment(rng, &g)
                .into_iter()
                .map(|y| rng.random_bool(0.5).then_some(y))
                .collect();
            LatentInstance::new(g, observed).expect("one entry per variable")
        })
        .collect()
}

/// Sequences of uniformly random words and labels.
pub fn random_corpus<R: Rng>(rng: &mut R, n: usize, num_labels: usize, max_len: usize, vocabulary: usize) -> Vec<Sequence> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            let words: Vec<String> = (0..len).map(|_| synthetic_word(rng.random_range(0..vocabulary))).collect();
            let labels: Vec<String> = (0..len).map(|_| synthetic_label(rng.random_range(0..num_labels))).collect();
            Sequence::from_words(&words, &labels)
        })
        .collect()
}

/// Featurizes `corpus` into a fresh space.
pub fn chain_dataset(corpus: &[Sequence], templates: &[FeatureTemplate], mode: FeatureMode) -> Result<(FeatureSpace, Vec<ChainInstance>)> {
    let mut b = FeatureSpaceBuilder::new();
    let data = corpus
        .iter()
        .map(|s| b.add(&s.tokens, &s.labels, templates))
        .collect::<Result<Vec<_>>>()?;
    Ok((b.finish(mode), data))
}

/// Uniform random weights in `[-scale, scale]`.
pub fn random_weights<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
}

/// Random log-potential tables in `[-scale, scale]` shaped for `g`.
pub fn random_potentials<R: Rng>(rng: &mut R, g: &FactorGraph, scale: f64) -> GraphPotentials {
    GraphPotentials {
        tables: g
            .factors()
            .iter()
            .map(|f| (0..f.table_len()).map(|_| rng.random_range(-scale..=scale)).collect())
            .collect(),
        constant: 0.0,
    }
}

/// Central differences `(f(w + h e_i) - f(w - h e_i)) / 2h`.
pub fn central_differences<F: FnMut(&[f64]) -> f64>(mut f: F, w: &[f64], h: f64) -> Vec<f64> {
    let mut x = w.to_vec();
    (0..w.len())
        .map(|i| {
            x[i] = w[i] + h;
            let up = f(&x);
            x[i] = w[i] - h;
            let down = f(&x);
            x[i] = w[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}
