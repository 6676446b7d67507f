//! L-BFGS, stochastic gradient with the `1/(σ²(m₀ + m))` schedule,
//! proximal gradient for L1, and the parallel batch-gradient driver.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::objectives::{
    evaluate_batch, sgd_instance_gradient, InferenceKind, InstanceObjective, InstanceTerm, Objective, ObjectiveReport,
    RegularizerSpec,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub objective: f64,
    pub grad_inf_norm: f64,
    pub step_size: f64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    fn push(&mut self, start: Instant, iter: usize, objective: f64, grad: &[f64], step_size: f64) {
        self.records.push(TraceRecord {
            iter,
            objective,
            grad_inf_norm: inf_norm(grad),
            step_size,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    /// One `iter objective grad_inf_norm step_size elapsed_ms` line per record.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# iter objective grad_inf_norm step_size elapsed_ms\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{} {} {} {} {:.3}",
                r.iter, r.objective, r.grad_inf_norm, r.step_size, r.elapsed_ms
            );
        }
        out
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub grad_tol: f64,
    pub rel_obj_tol: f64,
    pub max_iters: usize,
    pub max_halvings: usize,
    pub c1: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            grad_tol: 1e-5,
            rel_obj_tol: 1e-9,
            max_iters: 500,
            max_halvings: 50,
            c1: 1e-4,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory < 1 {
            return Err(Error::param("L-BFGS memory must be at least 1"));
        }
        if !(self.grad_tol > 0.0 && self.rel_obj_tol > 0.0) {
            return Err(Error::param("L-BFGS tolerances must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    /// `‖∇‖∞ < grad_tol`.
    GradientTolerance,
    /// Relative objective change below `rel_obj_tol`.
    RelativeChange,
    MaxIters,
    /// The line search found no sufficient increase.
    Stalled,
}

impl LbfgsStatus {
    pub fn converged(self) -> bool {
        matches!(self, LbfgsStatus::GradientTolerance | LbfgsStatus::RelativeChange)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub weights: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub status: LbfgsStatus,
    pub iterations: usize,
    pub evaluations: usize,
    /// Curvature pairs rejected for `s·y ≤ 0`.
    pub skipped_pairs: usize,
    pub trace: Trace,
}

fn evaluate_checked<O: Objective + ?Sized>(obj: &O, w: &[f64]) -> Result<Option<ObjectiveReport>> {
    match obj.evaluate(w) {
        Ok(r) if r.value.is_finite() && r.gradient.iter().all(|g| g.is_finite()) => Ok(Some(r)),
        Ok(_) | Err(Error::Infeasible(_)) | Err(Error::Degenerate) => Ok(None),
        Err(Error::Instance { source, .. }) if matches!(*source, Error::Infeasible(_) | Error::Degenerate) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Maximizes `obj` from `start`.
pub fn lbfgs_maximize<O: Objective + ?Sized>(obj: &O, start: &[f64], config: &LbfgsConfig) -> Result<LbfgsResult> {
    config.validate()?;
    let clock = Instant::now();
    let mut w = start.to_vec();
    let mut trace = Trace::default();
    let first = evaluate_checked(obj, &w)?
        .ok_or_else(|| Error::Infeasible("objective is not finite at the starting point".into()))?;
    let mut value = first.value;
    let mut grad = first.gradient;
    let mut evaluations = 1;
    trace.push(clock, 0, value, &grad, 0.0);
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(config.memory);
    let mut skipped_pairs = 0;
    let mut status = LbfgsStatus::MaxIters;
    let mut iterations = 0;
    if inf_norm(&grad) < config.grad_tol {
        status = LbfgsStatus::GradientTolerance;
    } else {
        for iter in 1..=config.max_iters {
            iterations = iter;
            // ascent direction d = H ∇ℓ
            let mut d = grad.clone();
            let mut alphas = Vec::with_capacity(pairs.len());
            for (s, y, rho) in pairs.iter().rev() {
                let a = rho * dot(s, &d);
                for (di, yi) in d.iter_mut().zip(y) {
                    *di -= a * yi;
                }
                alphas.push(a);
            }
            let gamma = match pairs.back() {
                Some((s, y, _)) => dot(s, y) / dot(y, y),
                None => 1.0 / grad.iter().map(|g| g * g).sum::<f64>().sqrt().max(1.0),
            };
            d.iter_mut().for_each(|x| *x *= gamma);
            for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
                let b = rho * dot(y, &d);
                for (di, si) in d.iter_mut().zip(s) {
                    *di += (a - b) * si;
                }
            }
            let mut slope = dot(&grad, &d);
            if !(slope > 0.0) {
                pairs.clear();
                d = grad.clone();
                slope = dot(&grad, &d);
            }
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..=config.max_halvings {
                let trial: Vec<f64> = w.iter().zip(&d).map(|(x, di)| x + step * di).collect();
                evaluations += 1;
                if let Some(r) = evaluate_checked(obj, &trial)? {
                    if r.value >= value + config.c1 * step * slope {
                        accepted = Some((trial, r));
                        break;
                    }
                }
                step *= 0.5;
            }
            let Some((next, report)) = accepted else {
                status = LbfgsStatus::Stalled;
                break;
            };
            // minimization convention: s = Δw, y = -(Δ∇ℓ)
            let s: Vec<f64> = next.iter().zip(&w).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = grad.iter().zip(&report.gradient).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 0.0 {
                if pairs.len() == config.memory {
                    pairs.pop_front();
                }
                pairs.push_back((s, y, 1.0 / sy));
            } else {
                skipped_pairs += 1;
            }
            let old = value;
            w = next;
            value = report.value;
            grad = report.gradient;
            trace.push(clock, iter, value, &grad, step);
            if inf_norm(&grad) < config.grad_tol {
                status = LbfgsStatus::GradientTolerance;
                break;
            }
            if (value - old).abs() / old.abs().max(value.abs()).max(1.0) < config.rel_obj_tol {
                status = LbfgsStatus::RelativeChange;
                break;
            }
        }
    }
    Ok(LbfgsResult {
        weights: w,
        value,
        gradient: grad,
        status,
        iterations,
        evaluations,
        skipped_pairs,
        trace,
    })
}

/// Soft threshold `sign(θ) max(|θ| - τ, 0)`; shrunk entries are exactly `+0.0`.
pub fn prox_l1(weights: &[f64], tau: f64) -> Result<Vec<f64>> {
    let mut w = weights.to_vec();
    prox_l1_in_place(&mut w, tau)?;
    Ok(w)
}

pub fn prox_l1_in_place(weights: &mut [f64], tau: f64) -> Result<()> {
    if !(tau >= 0.0) {
        return Err(Error::param("soft threshold must be non-negative"));
    }
    for w in weights.iter_mut() {
        if w.abs() <= tau {
            *w = 0.0;
        } else {
            *w -= tau * w.signum();
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxConfig {
    /// Initial step; it is halved until the quadratic bound holds.
    pub step: f64,
    pub alpha: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub rel_obj_tol: f64,
    /// Fixed step, no backtracking.
    pub fixed_step: bool,
}

impl Default for ProxConfig {
    fn default() -> Self {
        Self {
            step: 1.0,
            alpha: crate::objectives::DEFAULT_L1_ALPHA,
            max_iters: 2000,
            grad_tol: 1e-5,
            rel_obj_tol: 1e-10,
            fixed_step: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxResult {
    pub weights: Vec<f64>,
    /// Smooth value minus `α ‖θ‖₁`.
    pub penalized: f64,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Trace,
}

/// Proximal gradient ascent on `ℓ(θ) - α ‖θ‖₁`.
pub fn prox_gd<O: Objective + ?Sized>(obj: &O, start: &[f64], config: &ProxConfig) -> Result<ProxResult> {
    if !(config.step > 0.0) {
        return Err(Error::param("proximal step must be positive"));
    }
    if !(config.alpha >= 0.0) {
        return Err(Error::param("L1 α must be non-negative"));
    }
    let clock = Instant::now();
    let penalty = |w: &[f64]| config.alpha * w.iter().map(|x| x.abs()).sum::<f64>();
    let mut w = prox_l1(start, 0.0)?;
    let mut r = obj.evaluate(&w)?;
    let mut penalized = r.value - penalty(&w);
    let mut trace = Trace::default();
    trace.push(clock, 0, penalized, &r.gradient, 0.0);
    let mut step = config.step;
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=config.max_iters {
        iterations = iter;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial: Vec<f64> = w.iter().zip(&r.gradient).map(|(x, g)| x + step * g).collect();
            prox_l1_in_place(&mut trial, step * config.alpha)?;
            let d: Vec<f64> = trial.iter().zip(&w).map(|(a, b)| a - b).collect();
            if let Some(next) = evaluate_checked(obj, &trial)? {
                let bound = r.value + dot(&r.gradient, &d) - dot(&d, &d) / (2.0 * step);
                if config.fixed_step || next.value >= bound - 1e-12 * r.value.abs().max(1.0) {
                    accepted = Some((trial, next, d));
                    break;
                }
            } else if config.fixed_step {
                return Err(Error::Infeasible("objective left its finite domain under a fixed step".into()));
            }
            step *= 0.5;
        }
        let Some((next_w, next, d)) = accepted else { break };
        let next_pen = next.value - penalty(&next_w);
        let mapping = inf_norm(&d) / step;
        let change = (next_pen - penalized).abs() / penalized.abs().max(1.0);
        w = next_w;
        r = next;
        penalized = next_pen;
        trace.push(clock, iter, penalized, &r.gradient, step);
        if mapping < config.grad_tol || change < config.rel_obj_tol {
            converged = true;
            break;
        }
        if !config.fixed_step {
            step *= 1.5;
        }
    }
    Ok(ProxResult {
        weights: w,
        penalized,
        converged,
        iterations,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub m0: usize,
    pub sigma2: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate the full objective after every epoch for the trace.
    pub trace_objective: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            m0: 0,
            sigma2: crate::objectives::DEFAULT_SIGMA2,
            epochs: 20,
            seed: 0,
            trace_objective: true,
        }
    }
}

/// `α_m = 1 / (σ² (m₀ + m))`; the first update uses `m = 1`.
pub fn step_size(sigma2: f64, m0: usize, m: usize) -> f64 {
    1.0 / (sigma2 * (m0 + m) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdResult {
    pub weights: Vec<f64>,
    pub updates: usize,
    pub trace: Trace,
}

fn sgd_pass<O: InstanceObjective + ?Sized>(
    obj: &O,
    w: &mut [f64],
    rng: &mut ChaCha8Rng,
    mut step: impl FnMut() -> f64,
) -> Result<()> {
    let mut order: Vec<usize> = (0..obj.len()).collect();
    order.shuffle(rng);
    let l1 = match obj.regularizer() {
        RegularizerSpec::L1 { alpha } => alpha / obj.len() as f64,
        _ => 0.0,
    };
    for i in order {
        let (_, g) = sgd_instance_gradient(obj, w, i)?;
        let a = step();
        for (x, gi) in w.iter_mut().zip(&g) {
            *x += a * gi;
        }
        if l1 > 0.0 {
            prox_l1_in_place(w, a * l1)?;
        }
    }
    Ok(())
}

/// Epochs visit every instance once in a seeded random order.
pub fn sgd_train<O: InstanceObjective + ?Sized>(obj: &O, start: &[f64], config: &SgdConfig) -> Result<SgdResult> {
    if !(config.sigma2 > 0.0) {
        return Err(Error::param("σ² must be positive"));
    }
    obj.regularizer().validate()?;
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w = start.to_vec();
    let mut m = 0;
    let mut trace = Trace::default();
    for epoch in 1..=config.epochs {
        sgd_pass(obj, &mut w, &mut rng, || {
            m += 1;
            step_size(config.sigma2, config.m0, m)
        })?;
        if config.trace_objective {
            let r = evaluate_batch(obj, &w, 1)?;
            trace.push(clock, epoch, r.value, &r.gradient, step_size(config.sigma2, config.m0, m));
        }
    }
    Ok(SgdResult { weights: w, updates: m, trace })
}

/// A view of some instances of another objective.
pub struct Subset<'a, O: ?Sized> {
    pub inner: &'a O,
    pub indices: Vec<usize>,
}

impl<O: InstanceObjective + ?Sized> InstanceObjective for Subset<'_, O> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn len(&self) -> usize {
        self.indices.len()
    }

    fn regularizer(&self) -> RegularizerSpec {
        self.inner.regularizer()
    }

    fn exact_kind(&self) -> InferenceKind {
        self.inner.exact_kind()
    }

    fn nonconvex(&self) -> bool {
        self.inner.nonconvex()
    }

    fn instance(&self, weights: &[f64], i: usize, grad: &mut [f64]) -> Result<InstanceTerm> {
        self.inner.instance(weights, self.indices[i], grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub alpha: f64,
    pub m0: usize,
    /// Subset objective after one pass, per candidate (`NaN` if diverged).
    pub scores: Vec<f64>,
}

/// `m₀` with `α_1 = α*`, i.e. `round(1/(σ²α*) - 1)`, floored at zero.
pub fn m0_for(alpha: f64, sigma2: f64) -> usize {
    (1.0 / (sigma2 * alpha) - 1.0).round().max(0.0) as usize
}

/// One fixed-step SGD pass per candidate on a seeded subset; the best
/// post-pass subset objective picks `α*`.
pub fn calibrate_step_size<O: InstanceObjective + ?Sized>(
    obj: &O,
    start: &[f64],
    fraction: f64,
    candidates: &[f64],
    sigma2: f64,
    seed: u64,
) -> Result<Calibration> {
    if candidates.is_empty() {
        return Err(Error::param("empty step-size grid"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param("sample fraction must lie in (0, 1]"));
    }
    if candidates.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::param("candidate step sizes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..obj.len()).collect();
    indices.shuffle(&mut rng);
    let keep = ((obj.len() as f64 * fraction).ceil() as usize).clamp(1.min(obj.len()), obj.len());
    indices.truncate(keep);
    indices.sort_unstable();
    let subset = Subset { inner: obj, indices };
    let mut scores = Vec::with_capacity(candidates.len());
    let mut best: Option<(f64, f64)> = None;
    for &alpha in candidates {
        let mut w = start.to_vec();
        let mut pass_rng = ChaCha8Rng::seed_from_u64(seed);
        let score = match sgd_pass(&subset, &mut w, &mut pass_rng, || alpha) {
            Ok(()) if w.iter().all(|x| x.is_finite()) => match evaluate_batch(&subset, &w, 1) {
                Ok(r) if r.value.is_finite() => r.value,
                _ => f64::NAN,
            },
            _ => f64::NAN,
        };
        scores.push(score);
        if score.is_finite() && best.is_none_or(|(s, _)| score > s) {
            best = Some((score, alpha));
        }
    }
    let Some((_, alpha)) = best else {
        return Err(Error::Calibration);
    };
    Ok(Calibration {
        alpha,
        m0: m0_for(alpha, sigma2),
        scores,
    })
}

/// Batch value and gradient with instances fanned out over `workers`
/// threads; bit-identical to `workers = 1`.
pub fn parallel_batch_gradient<O: InstanceObjective + ?Sized>(obj: &O, weights: &[f64], workers: usize) -> Result<ObjectiveReport> {
    evaluate_batch(obj, weights, workers)
}
