use std::collections::BTreeMap;

use crate::chain::{viterbi, ChainLattice};
use crate::error::{Error, Result};
use crate::features::{
    prune_or_expand_unsupported, ChainInstance, FeatureMode, FeatureSpace, FeatureSpaceBuilder, FeatureTemplate, Token,
    UnsupportedPolicy,
};
use crate::objectives::{Batch, ChainCll, RegularizerSpec, DEFAULT_SIGMA2};
use crate::optimize::{calibrate_step_size, lbfgs_maximize, prox_gd, sgd_train, LbfgsConfig, LbfgsStatus, ProxConfig, SgdConfig, Trace};

use super::Sequence;

/// A trained linear-chain CRF with frozen alphabets.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearChainModel {
    pub space: FeatureSpace,
    pub templates: Vec<FeatureTemplate>,
    pub weights: Vec<f64>,
    pub regularizer: RegularizerSpec,
    /// Training provenance; written to the model file header.
    pub metadata: BTreeMap<String, String>,
}

impl LinearChainModel {
    pub fn new(space: FeatureSpace, templates: Vec<FeatureTemplate>, weights: Vec<f64>, regularizer: RegularizerSpec) -> Self {
        Self {
            space,
            templates,
            weights,
            regularizer,
            metadata: BTreeMap::new(),
        }
    }

    pub fn featurize(&self, tokens: &[Token]) -> ChainInstance {
        self.space.featurize(tokens, None::<&[String]>, &self.templates)
    }

    pub fn label(&self, index: usize) -> &str {
        self.space.labels().key(index).unwrap_or("?")
    }

    pub fn nonzero_weights(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdSchedule {
    pub epochs: usize,
    /// Fraction of the training set used for step-size calibration.
    pub calibration_fraction: f64,
    pub candidates: [f64; 6],
}

impl Default for SgdSchedule {
    fn default() -> Self {
        Self {
            epochs: 20,
            calibration_fraction: 0.1,
            candidates: [1.0, 0.3, 0.1, 0.03, 0.01, 0.003],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerChoice {
    Lbfgs(LbfgsConfig),
    Sgd(SgdSchedule),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerChoice,
    pub regularizer: RegularizerSpec,
    pub feature_mode: FeatureMode,
    pub unsupported: UnsupportedPolicy,
    /// Used for L1 training in place of L-BFGS.
    pub prox: ProxConfig,
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerChoice::Lbfgs(LbfgsConfig::default()),
            regularizer: RegularizerSpec::l2_default(),
            feature_mode: FeatureMode::Supported,
            unsupported: UnsupportedPolicy::SupportedOnly,
            prox: ProxConfig::default(),
            workers: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStatus {
    Converged,
    MaxIters,
    Stalled,
}

impl TrainStatus {
    fn as_str(self) -> &'static str {
        match self {
            TrainStatus::Converged => "converged",
            TrainStatus::MaxIters => "max-iters",
            TrainStatus::Stalled => "stalled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSummary {
    pub status: TrainStatus,
    pub iterations: usize,
    pub objective: f64,
    pub trace: Trace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedChain {
    pub model: LinearChainModel,
    pub summary: TrainingSummary,
}

fn optimizer_name(config: &TrainConfig) -> &'static str {
    match (config.regularizer, config.optimizer) {
        (RegularizerSpec::L1 { .. }, OptimizerChoice::Lbfgs(_)) => "prox-gradient",
        (_, OptimizerChoice::Lbfgs(_)) => "lbfgs",
        (_, OptimizerChoice::Sgd(_)) => "sgd",
    }
}

fn regularizer_sigma2(reg: RegularizerSpec) -> f64 {
    match reg {
        RegularizerSpec::L2 { sigma2 } => sigma2,
        _ => DEFAULT_SIGMA2,
    }
}

/// Maximizes the chain likelihood over already featurized instances.
pub fn train_on_instances(
    space: &FeatureSpace,
    instances: &[ChainInstance],
    start: &[f64],
    config: &TrainConfig,
) -> Result<(Vec<f64>, TrainingSummary)> {
    config.regularizer.validate()?;
    let obj = ChainCll::new(space, instances, config.regularizer);
    let batch = Batch::with_workers(&obj, config.workers);
    match (config.regularizer, config.optimizer) {
        (RegularizerSpec::L1 { alpha }, OptimizerChoice::Lbfgs(_)) => {
            let prox = ProxConfig { alpha, ..config.prox };
            let r = prox_gd(&batch, start, &prox)?;
            let status = if r.converged { TrainStatus::Converged } else { TrainStatus::MaxIters };
            Ok((
                r.weights,
                TrainingSummary {
                    status,
                    iterations: r.iterations,
                    objective: r.penalized,
                    trace: r.trace,
                },
            ))
        }
        (_, OptimizerChoice::Lbfgs(lbfgs)) => {
            let r = lbfgs_maximize(&batch, start, &lbfgs)?;
            let status = match r.status {
                LbfgsStatus::GradientTolerance | LbfgsStatus::RelativeChange => TrainStatus::Converged,
                LbfgsStatus::MaxIters => TrainStatus::MaxIters,
                LbfgsStatus::Stalled => TrainStatus::Stalled,
            };
            Ok((
                r.weights,
                TrainingSummary {
                    status,
                    iterations: r.iterations,
                    objective: r.value,
                    trace: r.trace,
                },
            ))
        }
        (reg, OptimizerChoice::Sgd(schedule)) => {
            let sigma2 = regularizer_sigma2(reg);
            let cal = calibrate_step_size(
                &obj,
                start,
                schedule.calibration_fraction,
                &schedule.candidates,
                sigma2,
                config.seed,
            )?;
            let sgd = SgdConfig {
                m0: cal.m0,
                sigma2,
                epochs: schedule.epochs,
                seed: config.seed,
                trace_objective: true,
            };
            let r = sgd_train(&obj, start, &sgd)?;
            let objective = r.trace.records.last().map_or(f64::NAN, |x| x.objective);
            Ok((
                r.weights,
                TrainingSummary {
                    status: TrainStatus::MaxIters,
                    iterations: schedule.epochs,
                    objective,
                    trace: r.trace,
                },
            ))
        }
    }
}

/// Builds alphabets from `corpus`, featurizes it, and maximizes the
/// regularized conditional likelihood.
pub fn train_chain_crf(corpus: &[Sequence], templates: &[FeatureTemplate], config: &TrainConfig) -> Result<TrainedChain> {
    if corpus.is_empty() {
        return Err(Error::param("empty training corpus"));
    }
    let mut builder = FeatureSpaceBuilder::new();
    let instances: Vec<ChainInstance> = corpus
        .iter()
        .enumerate()
        .map(|(i, s)| builder.add(&s.tokens, &s.labels, templates).map_err(|e| e.at_instance(i)))
        .collect::<Result<_>>()?;
    let mut space = builder.finish(config.feature_mode);
    let (mut weights, mut summary) = train_on_instances(&space, &instances, &vec![0.0; space.num_weights()], config)?;
    if let UnsupportedPolicy::Expand { .. } = config.unsupported {
        let (expanded, start) = prune_or_expand_unsupported(&space, &weights, &instances, config.unsupported)?;
        let (w, second) = train_on_instances(&expanded, &instances, &start, config)?;
        let offset = summary.trace.records.len();
        summary.trace.records.extend(second.trace.records.into_iter().map(|mut r| {
            r.iter += offset;
            r
        }));
        summary.status = second.status;
        summary.iterations += second.iterations;
        summary.objective = second.objective;
        space = expanded;
        weights = w;
    }
    let mut model = LinearChainModel::new(space, templates.to_vec(), weights, config.regularizer);
    let meta = &mut model.metadata;
    meta.insert("optimizer".into(), optimizer_name(config).into());
    meta.insert("seed".into(), config.seed.to_string());
    meta.insert("instances".into(), corpus.len().to_string());
    meta.insert("iterations".into(), summary.iterations.to_string());
    meta.insert("status".into(), summary.status.as_str().into());
    meta.insert(
        "feature-mode".into(),
        match config.feature_mode {
            FeatureMode::Supported => "supported",
            FeatureMode::Full => "full",
        }
        .into(),
    );
    if let UnsupportedPolicy::Expand { epsilon } = config.unsupported {
        meta.insert("unsupported-epsilon".into(), epsilon.to_string());
    }
    Ok(TrainedChain { model, summary })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagMode {
    Viterbi,
    Marginal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tagged {
    pub labels: Vec<String>,
    pub indices: Vec<usize>,
    /// Node marginal of the chosen label at each position.
    pub confidence: Vec<f64>,
}

pub fn tag(model: &LinearChainModel, tokens: &[Token], mode: TagMode) -> Result<Tagged> {
    if tokens.is_empty() {
        return Ok(Tagged {
            labels: Vec::new(),
            indices: Vec::new(),
            confidence: Vec::new(),
        });
    }
    let inst = model.featurize(tokens);
    let p = model.space.potentials(&inst, &model.weights);
    let lattice = ChainLattice::compute(&p)?;
    let marginals = lattice.node_marginals(&p);
    let indices: Vec<usize> = match mode {
        TagMode::Viterbi => viterbi(&p)?.0,
        TagMode::Marginal => marginals
            .iter()
            .map(|row| {
                let mut best = 0;
                for (i, &q) in row.iter().enumerate() {
                    if q > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect(),
    };
    Ok(Tagged {
        labels: indices.iter().map(|&i| model.label(i).to_string()).collect(),
        confidence: indices.iter().zip(&marginals).map(|(&i, row)| row[i]).collect(),
        indices,
    })
}
