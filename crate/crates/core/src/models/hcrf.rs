use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chain::ChainLattice;
use crate::error::{Error, Result};
use crate::features::{Alphabet, ChainInstance, FeatureBlock, FeatureMode, FeatureSpace, FeatureSpaceBuilder, FeatureTemplate, SparseFeatureVector, Token};
use crate::graph::{FactorGraphBuilder, VariableRole};
use crate::logspace::LOG_ZERO;
use crate::objectives::{em_step, evaluate_batch, Batch, GraphInference, LatentInstance, LatentLikelihood, RegularizerSpec};
use crate::optimize::{lbfgs_maximize, LbfgsConfig, Trace, TraceRecord};

use super::Sequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HcrfMethod {
    /// L-BFGS on the marginal likelihood.
    Direct,
    Em { iterations: usize, m_step_iters: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HcrfConfig {
    pub hidden: usize,
    pub method: HcrfMethod,
    pub regularizer: RegularizerSpec,
    pub lbfgs: LbfgsConfig,
    pub seed: u64,
    /// Initial weights are uniform on `[-init_scale, init_scale]`.
    pub init_scale: f64,
    pub workers: usize,
}

impl Default for HcrfConfig {
    fn default() -> Self {
        Self {
            hidden: 2,
            method: HcrfMethod::Direct,
            regularizer: RegularizerSpec::l2_default(),
            lbfgs: LbfgsConfig::default(),
            seed: 0,
            init_scale: 0.1,
            workers: 1,
        }
    }
}

/// A chain over composite states `(y, h)` whose hidden part is summed out.
#[derive(Debug, Clone, PartialEq)]
pub struct HcrfModel {
    /// Feature space over composite labels, `y`-major.
    pub space: FeatureSpace,
    pub labels: Alphabet,
    pub hidden: usize,
    pub templates: Vec<FeatureTemplate>,
    pub weights: Vec<f64>,
    pub nonconvex: bool,
    pub seed: u64,
    /// Marginal likelihood per iteration.
    pub trace: Trace,
    pub objective: f64,
}

pub fn composite_label(label: &str, h: usize) -> String {
    format!("{label}#{h}")
}

/// Latent-variable graph of one sequence: composite states `s_t` (latent)
/// in a chain, and observed labels `y_t` tied to `s_t` by 0/-∞ factors.
pub fn hcrf_instance(space: &FeatureSpace, inst: &ChainInstance, labels: &[usize], num_labels: usize, hidden: usize) -> Result<LatentInstance> {
    let len = inst.len();
    let mh = num_labels * hidden;
    if space.num_labels() != mh || labels.len() != len {
        return Err(Error::param("HCRF instance does not match its composite space"));
    }
    let mut b = FactorGraphBuilder::new(space.num_weights());
    let edge_t = b.template(space.block_range(FeatureBlock::Edge), vec![mh, mh]);
    let node_t = b.template(0..space.block_range(FeatureBlock::Node).end, vec![mh]);
    let tie_t = b.template(0..0, vec![mh, num_labels]);
    for _ in 0..len {
        b.variable(mh, VariableRole::Latent);
    }
    for _ in 0..len {
        b.variable(num_labels, VariableRole::Output);
    }
    for t in 0..len {
        b.factor(vec![t], node_t, space.node_factor_features(inst, t), None);
    }
    for t in 1..len {
        b.factor(vec![t - 1, t], edge_t, space.edge_factor_features(inst, t), None);
    }
    let tie: Vec<f64> = (0..mh * num_labels)
        .map(|idx| if (idx / num_labels) / hidden == idx % num_labels { 0.0 } else { LOG_ZERO })
        .collect();
    for t in 0..len {
        b.factor(vec![t, len + t], tie_t, vec![SparseFeatureVector::new(); mh * num_labels], Some(tie.clone()));
    }
    let graph = b.build()?;
    let observed = std::iter::repeat_n(None, len).chain(labels.iter().map(|&y| Some(y))).collect();
    LatentInstance::new(graph, observed)
}

/// Composite feature space, visible label alphabet and latent instances of
/// a corpus with `hidden` states per label.
pub fn hcrf_dataset(corpus: &[Sequence], templates: &[FeatureTemplate], hidden: usize) -> Result<(FeatureSpace, Alphabet, Vec<LatentInstance>)> {
    if corpus.is_empty() {
        return Err(Error::param("empty training corpus"));
    }
    if hidden < 1 {
        return Err(Error::param("latent cardinality must be at least 1"));
    }
    let mut labels = Alphabet::new();
    for s in corpus {
        for l in &s.labels {
            labels.intern(l);
        }
    }
    labels.freeze();
    let m = labels.len();
    let composite: Vec<String> = labels
        .iter()
        .flat_map(|l| (0..hidden).map(move |h| composite_label(l, h)))
        .collect();
    let mut builder = FeatureSpaceBuilder::with_labels(&composite);
    let mut ys = Vec::with_capacity(corpus.len());
    let mut instances = Vec::with_capacity(corpus.len());
    for (i, s) in corpus.iter().enumerate() {
        let placeholder: Vec<String> = s.labels.iter().map(|l| composite_label(l, 0)).collect();
        instances.push(builder.add(&s.tokens, &placeholder, templates).map_err(|e| e.at_instance(i))?);
        ys.push(s.labels.iter().map(|l| labels.get(l).expect("interned above")).collect::<Vec<_>>());
    }
    let space = builder.finish(FeatureMode::Full);
    let data = instances
        .iter()
        .zip(&ys)
        .enumerate()
        .map(|(i, (inst, y))| hcrf_instance(&space, inst, y, m, hidden).map_err(|e| e.at_instance(i)))
        .collect::<Result<_>>()?;
    Ok((space, labels, data))
}

/// Trains on the marginal likelihood of the visible labels. Non-convex:
/// the result depends on `seed`.
pub fn train_hcrf(corpus: &[Sequence], templates: &[FeatureTemplate], config: &HcrfConfig) -> Result<HcrfModel> {
    let (space, labels, data) = hcrf_dataset(corpus, templates, config.hidden)?;
    let obj = LatentLikelihood::new(&data, config.regularizer, GraphInference::ExactTree, space.num_weights())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let s = config.init_scale;
    let start: Vec<f64> = (0..space.num_weights())
        .map(|_| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 })
        .collect();
    let (weights, trace, objective) = match config.method {
        HcrfMethod::Direct => {
            let r = lbfgs_maximize(&Batch::with_workers(&obj, config.workers), &start, &config.lbfgs)?;
            (r.weights, r.trace, r.value)
        }
        HcrfMethod::Em { iterations, m_step_iters } => {
            let clock = std::time::Instant::now();
            let mut w = start;
            let mut trace = Trace::default();
            let mut value = f64::NAN;
            for iter in 0..=iterations {
                if iter > 0 {
                    w = em_step(&obj, &w, m_step_iters)?;
                }
                let r = evaluate_batch(&obj, &w, config.workers)?;
                value = r.value;
                trace.records.push(TraceRecord {
                    iter,
                    objective: r.value,
                    grad_inf_norm: crate::optimize::inf_norm(&r.gradient),
                    step_size: 0.0,
                    elapsed_ms: clock.elapsed().as_secs_f64() * 1e3,
                });
            }
            (w, trace, value)
        }
    };
    Ok(HcrfModel {
        space,
        labels,
        hidden: config.hidden,
        templates: templates.to_vec(),
        weights,
        nonconvex: true,
        seed: config.seed,
        trace,
        objective,
    })
}

/// Per-position argmax of `p(y_t | x) = Σ_h p(s_t = (y, h) | x)`.
pub fn hcrf_tag(model: &HcrfModel, tokens: &[Token]) -> Result<Vec<String>> {
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let inst = model.space.featurize(tokens, None::<&[String]>, &model.templates);
    let p = model.space.potentials(&inst, &model.weights);
    let lattice = ChainLattice::compute(&p)?;
    let m = model.labels.len();
    Ok(lattice
        .node_marginals(&p)
        .iter()
        .map(|row| {
            let sums: Vec<f64> = (0..m).map(|y| row[y * model.hidden..(y + 1) * model.hidden].iter().sum()).collect();
            let mut best = 0;
            for (y, &q) in sums.iter().enumerate() {
                if q > sums[best] {
                    best = y;
                }
            }
            model.labels.key(best).unwrap_or("?").to_string()
        })
        .collect())
}
