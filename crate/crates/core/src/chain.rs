//! Exact inference on linear chains.
//!
//! Position `t ≥ 1` has an `M × M` table of log-potentials indexed
//! `[prev * M + cur]` with the node score of `t` folded in. Position 0 has a
//! single row: the transition out of the begin state plus the node score.

use std::cell::Cell;
use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::logspace::{lse, LOG_ZERO};

thread_local! {
    static FORWARD_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of forward passes run on the current thread.
pub fn forward_calls() -> usize {
    FORWARD_CALLS.with(Cell::get)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainPotentials {
    num_labels: usize,
    initial: Vec<f64>,
    transitions: Vec<Vec<f64>>,
}

impl ChainPotentials {
    pub fn new(num_labels: usize, initial: Vec<f64>, transitions: Vec<Vec<f64>>) -> Result<Self> {
        if num_labels == 0 {
            return Err(Error::param("chain needs at least one label"));
        }
        if initial.len() != num_labels {
            return Err(Error::param("initial row must have M entries"));
        }
        if transitions.iter().any(|t| t.len() != num_labels * num_labels) {
            return Err(Error::param("transition tables must be M × M"));
        }
        let nan = initial.iter().chain(transitions.iter().flatten()).any(|x| x.is_nan());
        if nan {
            return Err(Error::param("NaN log-potential"));
        }
        Ok(Self {
            num_labels,
            initial,
            transitions,
        })
    }

    /// All-zero log-potentials (the uniform model).
    pub fn uniform(num_labels: usize, len: usize) -> Self {
        Self {
            num_labels,
            initial: vec![0.0; num_labels],
            transitions: vec![vec![0.0; num_labels * num_labels]; len.saturating_sub(1)],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn len(&self) -> usize {
        if self.initial.is_empty() {
            0
        } else {
            self.transitions.len() + 1
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn initial_mut(&mut self) -> &mut [f64] {
        &mut self.initial
    }

    /// Table for the transition into `t` (`t ≥ 1`).
    pub fn transition(&self, t: usize) -> &[f64] {
        &self.transitions[t - 1]
    }

    pub fn transition_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.transitions[t - 1]
    }

    #[inline]
    pub fn at(&self, t: usize, prev: usize, cur: usize) -> f64 {
        self.transitions[t - 1][prev * self.num_labels + cur]
    }

    /// Marks a transition as impossible.
    pub fn forbid(&mut self, t: usize, prev: usize, cur: usize) {
        let m = self.num_labels;
        self.transitions[t - 1][prev * m + cur] = LOG_ZERO;
    }

    pub fn forbid_initial(&mut self, cur: usize) {
        self.initial[cur] = LOG_ZERO;
    }

    /// Unnormalized log score of a labeling.
    pub fn score(&self, labels: &[usize]) -> f64 {
        let mut s = self.initial[labels[0]];
        for t in 1..labels.len() {
            s += self.at(t, labels[t - 1], labels[t]);
        }
        s
    }
}

fn infeasible(t: usize) -> Error {
    Error::Infeasible(format!("no label has nonzero mass at position {t}"))
}

/// Log forward table: `alpha[t][j] = ⊕_i alpha[t-1][i] + Ψ_t(i, j)`.
pub fn forward(p: &ChainPotentials) -> Result<Vec<Vec<f64>>> {
    FORWARD_CALLS.with(|c| c.set(c.get() + 1));
    let m = p.num_labels;
    let len = p.len();
    let mut alpha = Vec::with_capacity(len);
    if len == 0 {
        return Ok(alpha);
    }
    if p.initial.iter().all(|&x| x == LOG_ZERO) {
        return Err(infeasible(0));
    }
    alpha.push(p.initial.clone());
    let mut buf = Vec::with_capacity(m);
    for t in 1..len {
        let prev = &alpha[t - 1];
        let table = p.transition(t);
        let mut row = vec![LOG_ZERO; m];
        for (j, cell) in row.iter_mut().enumerate() {
            buf.clear();
            for (i, &a) in prev.iter().enumerate() {
                let psi = table[i * m + j];
                if a != LOG_ZERO && psi != LOG_ZERO {
                    buf.push(a + psi);
                }
            }
            *cell = lse(&buf);
        }
        if row.iter().all(|&x| x == LOG_ZERO) {
            return Err(infeasible(t));
        }
        alpha.push(row);
    }
    Ok(alpha)
}

/// Log backward table: `beta[T-1] = 0`, `beta[t-1][i] = ⊕_j Ψ_t(i, j) + beta[t][j]`.
pub fn backward(p: &ChainPotentials) -> Result<Vec<Vec<f64>>> {
    let m = p.num_labels;
    let len = p.len();
    if len == 0 {
        return Ok(Vec::new());
    }
    let mut beta = vec![vec![0.0; m]; len];
    let mut buf = Vec::with_capacity(m);
    for t in (1..len).rev() {
        let table = p.transition(t);
        let (head, tail) = beta.split_at_mut(t);
        let next = &tail[0];
        for (i, cell) in head[t - 1].iter_mut().enumerate() {
            buf.clear();
            for (j, &b) in next.iter().enumerate() {
                let psi = table[i * m + j];
                if b != LOG_ZERO && psi != LOG_ZERO {
                    buf.push(psi + b);
                }
            }
            *cell = lse(&buf);
        }
        if head[t - 1].iter().all(|&x| x == LOG_ZERO) {
            return Err(infeasible(t - 1));
        }
    }
    Ok(beta)
}

/// Forward and backward tables plus the log partition function.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainLattice {
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub log_z: f64,
}

impl ChainLattice {
    pub fn compute(p: &ChainPotentials) -> Result<Self> {
        let alpha = forward(p)?;
        let beta = backward(p)?;
        let log_z = alpha.last().map(|a| lse(a)).unwrap_or(0.0);
        if log_z == LOG_ZERO {
            return Err(Error::Infeasible("every labeling has zero mass".into()));
        }
        Ok(Self { alpha, beta, log_z })
    }

    /// The partition function recomputed from the backward table.
    pub fn log_z_backward(&self, p: &ChainPotentials) -> f64 {
        if self.beta.is_empty() {
            return 0.0;
        }
        crate::logspace::lse_iter(p.initial.iter().zip(&self.beta[0]).map(|(a, b)| a + b))
    }

    /// `p(y_t = j | x)` for every position.
    pub fn node_marginals(&self, p: &ChainPotentials) -> Vec<Vec<f64>> {
        let _ = p;
        self.alpha
            .iter()
            .zip(&self.beta)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x + y - self.log_z).exp())
                    .collect()
            })
            .collect()
    }

    /// `p(y_{t-1} = i, y_t = j | x)` for `t = 1..T`, one row-major table each.
    /// The begin-state "edge" into position 0 is the node marginal at 0.
    pub fn edge_marginals(&self, p: &ChainPotentials) -> Vec<Vec<f64>> {
        let m = p.num_labels;
        (1..p.len())
            .map(|t| {
                let table = p.transition(t);
                let mut out = vec![0.0; m * m];
                for i in 0..m {
                    let a = self.alpha[t - 1][i];
                    if a == LOG_ZERO {
                        continue;
                    }
                    for j in 0..m {
                        let psi = table[i * m + j];
                        if psi == LOG_ZERO {
                            continue;
                        }
                        out[i * m + j] = (a + psi + self.beta[t][j] - self.log_z).exp();
                    }
                }
                out
            })
            .collect()
    }
}

/// Highest-scoring labeling. Ties go to the lowest label index at every
/// backtrack step.
pub fn viterbi(p: &ChainPotentials) -> Result<(Vec<usize>, f64)> {
    let m = p.num_labels;
    let len = p.len();
    if len == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let mut delta = p.initial.clone();
    if delta.iter().all(|&x| x == LOG_ZERO) {
        return Err(infeasible(0));
    }
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(len - 1);
    for t in 1..len {
        let table = p.transition(t);
        let mut next = vec![LOG_ZERO; m];
        let mut ptr = vec![0usize; m];
        for j in 0..m {
            let mut best = LOG_ZERO;
            let mut arg = 0;
            for i in 0..m {
                let s = delta[i] + table[i * m + j];
                if s > best {
                    best = s;
                    arg = i;
                }
            }
            next[j] = best;
            ptr[j] = arg;
        }
        if next.iter().all(|&x| x == LOG_ZERO) {
            return Err(infeasible(t));
        }
        delta = next;
        back.push(ptr);
    }
    let mut last = 0;
    for j in 1..m {
        if delta[j] > delta[last] {
            last = j;
        }
    }
    let score = delta[last];
    let mut path = vec![last; len];
    for t in (1..len).rev() {
        path[t - 1] = back[t - 1][path[t]];
    }
    Ok((path, score))
}

#[derive(Debug, Clone)]
struct Partial {
    score: f64,
    path: Vec<usize>,
}

fn rank(a: &Partial, b: &Partial) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.path.cmp(&b.path))
}

/// The `k` best labelings by score, descending; equal scores are ordered
/// lexicographically by label indices.
pub fn k_best(p: &ChainPotentials, k: usize) -> Result<Vec<(Vec<usize>, f64)>> {
    if k < 1 {
        return Err(Error::param("k must be at least 1"));
    }
    let m = p.num_labels;
    let len = p.len();
    if len == 0 {
        return Ok(vec![(Vec::new(), 0.0)]);
    }
    // lists[j]: best partial paths ending in label j
    let mut lists: Vec<Vec<Partial>> = (0..m)
        .map(|j| {
            if p.initial[j] == LOG_ZERO {
                Vec::new()
            } else {
                vec![Partial {
                    score: p.initial[j],
                    path: vec![j],
                }]
            }
        })
        .collect();
    for t in 1..len {
        let table = p.transition(t);
        let mut next = Vec::with_capacity(m);
        for j in 0..m {
            let mut cands: Vec<Partial> = Vec::new();
            for (i, list) in lists.iter().enumerate() {
                let psi = table[i * m + j];
                if psi == LOG_ZERO {
                    continue;
                }
                for part in list {
                    let mut path = Vec::with_capacity(t + 1);
                    path.extend_from_slice(&part.path);
                    path.push(j);
                    cands.push(Partial {
                        score: part.score + psi,
                        path,
                    });
                }
            }
            cands.sort_by(rank);
            cands.truncate(k);
            next.push(cands);
        }
        lists = next;
    }
    let mut all: Vec<Partial> = lists.into_iter().flatten().collect();
    all.sort_by(rank);
    all.truncate(k);
    Ok(all.into_iter().map(|p| (p.path, p.score)).collect())
}

fn draw(rng: &mut ChaCha8Rng, log_weights: &[f64]) -> usize {
    let total = lse(log_weights);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in log_weights.iter().enumerate() {
        if w == LOG_ZERO {
            continue;
        }
        acc += (w - total).exp();
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Exact samples from `p(y | x)` by forward filtering, backward sampling.
pub fn sample_posterior(
    p: &ChainPotentials,
    lattice: &ChainLattice,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if n < 1 {
        return Err(Error::param("sample count must be at least 1"));
    }
    let m = p.num_labels;
    let len = p.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = vec![0.0; m];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut y = vec![0; len];
        if len > 0 {
            y[len - 1] = draw(&mut rng, &lattice.alpha[len - 1]);
            for t in (1..len).rev() {
                for (i, w) in weights.iter_mut().enumerate() {
                    *w = lattice.alpha[t - 1][i] + p.at(t, i, y[t]);
                }
                y[t - 1] = draw(&mut rng, &weights);
            }
        }
        out.push(y);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaledResult {
    pub node_marginals: Vec<Vec<f64>>,
    pub edge_marginals: Vec<Vec<f64>>,
    pub log_z: f64,
}

/// Probability-domain forward-backward with per-step normalization.
///
/// Each table is exponentiated after subtracting its maximum; the shifts and
/// the per-step normalizers together reconstruct `log Z`.
pub fn scaled_forward_backward(p: &ChainPotentials) -> Result<ScaledResult> {
    let m = p.num_labels;
    let len = p.len();
    if len == 0 {
        return Ok(ScaledResult {
            node_marginals: Vec::new(),
            edge_marginals: Vec::new(),
            log_z: 0.0,
        });
    }
    let exp_shifted = |row: &[f64]| -> (Vec<f64>, f64) {
        let shift = row.iter().copied().fold(LOG_ZERO, f64::max);
        (row.iter().map(|x| (x - shift).exp()).collect(), shift)
    };
    let mut tables = Vec::with_capacity(len - 1);
    let mut log_z = 0.0;

    let (mut a0, shift0) = exp_shifted(&p.initial);
    if shift0 == LOG_ZERO {
        return Err(infeasible(0));
    }
    let c0: f64 = a0.iter().sum();
    a0.iter_mut().for_each(|x| *x /= c0);
    log_z += shift0 + c0.ln();
    let mut scales = vec![c0];
    let mut alpha = vec![a0];
    for t in 1..len {
        let (e, shift) = exp_shifted(p.transition(t));
        if shift == LOG_ZERO {
            return Err(infeasible(t));
        }
        let prev = &alpha[t - 1];
        let mut row = vec![0.0; m];
        for i in 0..m {
            if prev[i] == 0.0 {
                continue;
            }
            for j in 0..m {
                row[j] += prev[i] * e[i * m + j];
            }
        }
        let c: f64 = row.iter().sum();
        if c == 0.0 || !c.is_finite() {
            return Err(infeasible(t));
        }
        row.iter_mut().for_each(|x| *x /= c);
        log_z += shift + c.ln();
        scales.push(c);
        alpha.push(row);
        tables.push(e);
    }
    let mut beta = vec![vec![1.0; m]; len];
    for t in (1..len).rev() {
        let e = &tables[t - 1];
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..m {
                s += e[i * m + j] * beta[t][j];
            }
            beta[t - 1][i] = s / scales[t];
        }
    }
    let node_marginals = alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).collect())
        .collect();
    let edge_marginals = (1..len)
        .map(|t| {
            let e = &tables[t - 1];
            let mut out = vec![0.0; m * m];
            for i in 0..m {
                for j in 0..m {
                    out[i * m + j] = alpha[t - 1][i] * e[i * m + j] * beta[t][j] / scales[t];
                }
            }
            out
        })
        .collect();
    Ok(ScaledResult {
        node_marginals,
        edge_marginals,
        log_z,
    })
}

/// `log p(y | x)` of a labeling from node and edge marginals alone.
pub fn log_prob_from_marginals(node: &[Vec<f64>], edge: &[Vec<f64>], labels: &[usize]) -> f64 {
    let m = node.first().map(Vec::len).unwrap_or(0);
    let mut lp = node.first().map(|n| n[labels[0]].ln()).unwrap_or(0.0);
    for t in 1..labels.len() {
        lp += edge[t - 1][labels[t - 1] * m + labels[t]].ln() - node[t - 1][labels[t - 1]].ln();
    }
    lp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{enumerate_chain, random_chain};
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn uniform_two_by_two() {
        let p = ChainPotentials::uniform(2, 2);
        let l = ChainLattice::compute(&p).unwrap();
        assert!(close(l.log_z, 4f64.ln(), 1e-15));
    }

    #[test]
    fn single_position() {
        let p = ChainPotentials::new(3, vec![0.5, -1.0, 2.0], vec![]).unwrap();
        let l = ChainLattice::compute(&p).unwrap();
        assert!(close(l.log_z, lse(&[0.5, -1.0, 2.0]), 1e-15));
        assert_eq!(l.beta, vec![vec![0.0; 3]]);
    }

    #[test]
    fn forward_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_chain(&mut rng, 3, 5, 2.0);
        let exact = enumerate_chain(&p);
        let l = ChainLattice::compute(&p).unwrap();
        assert!(close(l.log_z, exact.log_z, 1e-10));
        assert!(close(l.log_z_backward(&p), exact.log_z, 1e-10));
    }

    #[test]
    fn uniform_beta_is_constant() {
        let p = ChainPotentials::uniform(3, 4);
        let b = backward(&p).unwrap();
        assert_eq!(b[3], vec![0.0; 3]);
        for row in &b {
            assert!(row.iter().all(|&x| close(x, row[0], 1e-15)));
        }
    }

    #[test]
    fn uniform_edge_marginals() {
        let p = ChainPotentials::uniform(3, 4);
        let l = ChainLattice::compute(&p).unwrap();
        for table in l.edge_marginals(&p) {
            for x in table {
                assert!(close(x, 1.0 / 9.0, 1e-14));
            }
        }
    }

    #[test]
    fn edge_marginals_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_chain(&mut rng, 2, 4, 1.5);
        let exact = enumerate_chain(&p);
        let l = ChainLattice::compute(&p).unwrap();
        for (a, b) in l.edge_marginals(&p).iter().zip(&exact.edge_marginals) {
            let s: f64 = a.iter().sum();
            assert!(close(s, 1.0, 1e-10));
            for (x, y) in a.iter().zip(b) {
                assert!(close(*x, *y, 1e-10));
            }
        }
    }

    #[test]
    fn infeasible_is_an_error() {
        let mut p = ChainPotentials::uniform(2, 3);
        for i in 0..2 {
            for j in 0..2 {
                p.forbid(2, i, j);
            }
        }
        assert!(matches!(ChainLattice::compute(&p), Err(Error::Infeasible(_))));
        assert!(matches!(viterbi(&p), Err(Error::Infeasible(_))));
    }

    #[test]
    fn viterbi_tie_break_is_lowest_index() {
        let p = ChainPotentials::uniform(3, 4);
        assert_eq!(viterbi(&p).unwrap().0, vec![0, 0, 0, 0]);
    }

    #[test]
    fn viterbi_follows_dominant_transition() {
        let mut p = ChainPotentials::uniform(3, 4);
        p.transition_mut(2)[3 + 2] = 10.0;
        let (path, score) = viterbi(&p).unwrap();
        assert_eq!(&path[1..3], &[1, 2]);
        assert_eq!(score, 10.0);
    }

    #[test]
    fn viterbi_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_chain(&mut rng, 3, 6, 2.0);
        let exact = enumerate_chain(&p);
        let (path, score) = viterbi(&p).unwrap();
        assert_eq!(path, exact.ranked[0].0);
        assert!(close(score, exact.ranked[0].1, 1e-10));
    }

    #[test]
    fn k_best_edge_cases() {
        let p = ChainPotentials::uniform(2, 2);
        let kb = k_best(&p, 3).unwrap();
        let paths: Vec<_> = kb.iter().map(|e| e.0.clone()).collect();
        assert_eq!(paths, vec![vec![0, 0], vec![0, 1], vec![1, 0]]);
        assert!(k_best(&p, 0).is_err());
        assert_eq!(k_best(&p, 10).unwrap().len(), 4);
    }

    #[test]
    fn k_best_full_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_chain(&mut rng, 3, 4, 1.0);
        let exact = enumerate_chain(&p);
        let kb = k_best(&p, 81).unwrap();
        assert_eq!(kb.len(), 81);
        assert_eq!(kb[0], viterbi(&p).unwrap());
        for (a, b) in kb.iter().zip(&exact.ranked) {
            assert_eq!(a.0, b.0);
            assert!(close(a.1, b.1, 1e-10));
        }
    }

    #[test]
    fn k_best_skips_infeasible() {
        let mut p = ChainPotentials::uniform(2, 2);
        p.forbid(1, 0, 1);
        p.forbid_initial(1);
        assert_eq!(k_best(&p, 4).unwrap(), vec![(vec![0, 0], 0.0)]);
    }

    #[test]
    fn deterministic_model_samples() {
        let mut p = ChainPotentials::uniform(2, 3);
        p.forbid_initial(0);
        for t in 1..3 {
            p.forbid(t, 1, 1);
            p.forbid(t, 0, 0);
        }
        let l = ChainLattice::compute(&p).unwrap();
        let s = sample_posterior(&p, &l, 20, 9).unwrap();
        assert!(s.iter().all(|y| y == &vec![1, 0, 1]));
        assert!(sample_posterior(&p, &l, 0, 9).is_err());
    }

    #[test]
    fn uniform_sampling_frequency() {
        let p = ChainPotentials::uniform(2, 1);
        let l = ChainLattice::compute(&p).unwrap();
        let s = sample_posterior(&p, &l, 100_000, 5).unwrap();
        let zeros = s.iter().filter(|y| y[0] == 0).count() as f64 / 1e5;
        assert!((zeros - 0.5).abs() < 0.01);
    }

    #[test]
    fn sampling_matches_enumerated_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_chain(&mut rng, 2, 3, 1.5);
        let exact = enumerate_chain(&p);
        let l = ChainLattice::compute(&p).unwrap();
        let n = 200_000;
        let samples = sample_posterior(&p, &l, n, 11).unwrap();
        let mut counts = std::collections::HashMap::new();
        for s in &samples {
            *counts.entry(s.clone()).or_insert(0usize) += 1;
        }
        let tv: f64 = exact
            .ranked
            .iter()
            .map(|(y, score)| {
                let prob = (score - exact.log_z).exp();
                let emp = *counts.get(y).unwrap_or(&0) as f64 / n as f64;
                (prob - emp).abs()
            })
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.005, "tv = {tv}");
        assert_eq!(samples, sample_posterior(&p, &l, n, 11).unwrap());
    }

    #[test]
    fn scaled_path_uniform() {
        let p = ChainPotentials::uniform(3, 5);
        let s = scaled_forward_backward(&p).unwrap();
        assert!(close(s.log_z, 5.0 * 3f64.ln(), 1e-12));
    }

    #[test]
    fn scaled_path_long_peaked_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_chain(&mut rng, 4, 200, 30.0);
        let l = ChainLattice::compute(&p).unwrap();
        let s = scaled_forward_backward(&p).unwrap();
        assert!(close(s.log_z, l.log_z, 1e-8 * l.log_z.abs().max(1.0)));
        for (a, b) in s.node_marginals.iter().zip(l.node_marginals(&p)) {
            for (x, y) in a.iter().zip(b) {
                assert!(close(*x, y, 1e-8));
            }
        }
    }

    #[test]
    fn alternative_partition_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_chain(&mut rng, 3, 12, 2.0);
        let s = scaled_forward_backward(&p).unwrap();
        for seed in 0..5 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<usize> = (0..12).map(|_| r.random_range(0..3)).collect();
            let lp = log_prob_from_marginals(&s.node_marginals, &s.edge_marginals, &y);
            assert!(close(p.score(&y) - lp, s.log_z, 1e-8));
        }
    }

    #[test]
    fn forward_counter_increments() {
        let before = forward_calls();
        let _ = forward(&ChainPotentials::uniform(2, 2));
        assert_eq!(forward_calls(), before + 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn dual_routes_and_marginal_consistency(m in 1usize..=5, t in 1usize..=50, seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_chain(&mut rng, m, t, 2.0);
            let l = ChainLattice::compute(&p).unwrap();
            prop_assert!((l.log_z - l.log_z_backward(&p)).abs() < 1e-10 * l.log_z.abs().max(1.0));
            let nodes = l.node_marginals(&p);
            let edges = l.edge_marginals(&p);
            for s in 1..t {
                for j in 0..m {
                    let into: f64 = (0..m).map(|i| edges[s - 1][i * m + j]).sum();
                    let out: f64 = (0..m).map(|k| edges[s - 1][j * m + k]).sum();
                    prop_assert!((into - nodes[s][j]).abs() < 1e-10);
                    prop_assert!((out - nodes[s - 1][j]).abs() < 1e-10);
                }
            }
            prop_assert!(l.alpha.iter().chain(&l.beta).flatten().all(|x| !x.is_nan()));
        }

        #[test]
        fn viterbi_dominates_samples(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_chain(&mut rng, 3, 6, 1.0);
            let l = ChainLattice::compute(&p).unwrap();
            let (best, score) = viterbi(&p).unwrap();
            for y in sample_posterior(&p, &l, 50, seed).unwrap() {
                let s = p.score(&y);
                prop_assert!(score >= s - 1e-12);
                if y == best {
                    prop_assert_eq!(s, score);
                }
            }
        }
    }
}
