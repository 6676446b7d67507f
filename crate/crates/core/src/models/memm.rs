use crate::chain::{viterbi, ChainPotentials};
use crate::error::{Error, Result};
use crate::features::{ChainInstance, FeatureMode, FeatureSpace, FeatureSpaceBuilder, FeatureTemplate, Token};
use crate::logspace::log_normalize_in_place;
use crate::objectives::{Batch, InferenceKind, InstanceObjective, InstanceTerm, RegularizerSpec};
use crate::optimize::{lbfgs_maximize, LbfgsConfig};

use super::Sequence;

/// Locally normalized `p(y_t | y_{t-1}, x)` over the same features as the
/// chain CRF.
#[derive(Debug, Clone, PartialEq)]
pub struct MemmModel {
    pub space: FeatureSpace,
    pub templates: Vec<FeatureTemplate>,
    pub weights: Vec<f64>,
    pub regularizer: RegularizerSpec,
}

impl MemmModel {
    pub fn featurize(&self, tokens: &[Token]) -> ChainInstance {
        self.space.featurize(tokens, None::<&[String]>, &self.templates)
    }
}

/// `log p(y_1 | x)` and, for each `t ≥ 1`, the row-normalized table
/// `log p(y_t = j | y_{t-1} = i, x)` at `[i * M + j]`.
pub fn memm_local_log_probs(space: &FeatureSpace, inst: &ChainInstance, weights: &[f64]) -> Result<ChainPotentials> {
    let mut p = space.potentials(inst, weights);
    let m = p.num_labels();
    log_normalize_in_place(p.initial_mut())?;
    for t in 1..p.len() {
        for row in p.transition_mut(t).chunks_exact_mut(m) {
            log_normalize_in_place(row)?;
        }
    }
    Ok(p)
}

/// Sum of local log-probabilities of the gold path. No forward pass.
pub struct MemmObjective<'a> {
    pub space: &'a FeatureSpace,
    pub data: &'a [ChainInstance],
    pub reg: RegularizerSpec,
}

impl InstanceObjective for MemmObjective<'_> {
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
        InferenceKind::Local
    }

    fn instance(&self, weights: &[f64], i: usize, grad: &mut [f64]) -> Result<InstanceTerm> {
        let inst = &self.data[i];
        let ys = inst
            .labels
            .as_deref()
            .ok_or_else(|| Error::param("training instance has no gold labels"))?;
        if inst.is_empty() {
            return Ok(InstanceTerm { value: 0.0, converged: true, approximate: false });
        }
        let p = memm_local_log_probs(self.space, inst, weights)?;
        let m = p.num_labels();
        let mut value = 0.0;
        // local distributions laid out as node/edge "marginals" so the
        // expected-feature routine yields Σ_t E_{y_t | y_{t-1}}[f]
        let mut node = Vec::with_capacity(inst.len());
        let mut edge = Vec::with_capacity(inst.len().saturating_sub(1));
        for t in 0..inst.len() {
            let row: Vec<f64> = if t == 0 {
                p.initial().to_vec()
            } else {
                let prev = ys[t - 1];
                p.transition(t)[prev * m..(prev + 1) * m].to_vec()
            };
            value += row[ys[t]];
            let probs: Vec<f64> = row.iter().map(|x| x.exp()).collect();
            if t > 0 {
                let mut table = vec![0.0; m * m];
                table[ys[t - 1] * m..(ys[t - 1] + 1) * m].copy_from_slice(&probs);
                edge.push(table);
            }
            node.push(probs);
        }
        self.space.add_labeling_features(inst, ys, grad, 1.0);
        self.space.add_expected_features(inst, &node, &edge, grad, -1.0);
        Ok(InstanceTerm { value, converged: true, approximate: false })
    }
}

pub fn memm_train(
    corpus: &[Sequence],
    templates: &[FeatureTemplate],
    reg: RegularizerSpec,
    mode: FeatureMode,
    config: &LbfgsConfig,
) -> Result<MemmModel> {
    if corpus.is_empty() {
        return Err(Error::param("empty training corpus"));
    }
    reg.validate()?;
    let mut builder = FeatureSpaceBuilder::new();
    let data: Vec<ChainInstance> = corpus
        .iter()
        .enumerate()
        .map(|(i, s)| builder.add(&s.tokens, &s.labels, templates).map_err(|e| e.at_instance(i)))
        .collect::<Result<_>>()?;
    let space = builder.finish(mode);
    let obj = MemmObjective { space: &space, data: &data, reg };
    let r = lbfgs_maximize(&Batch::new(&obj), &vec![0.0; space.num_weights()], config)?;
    Ok(MemmModel {
        space,
        templates: templates.to_vec(),
        weights: r.weights,
        regularizer: reg,
    })
}

/// Viterbi over local log-probabilities.
pub fn memm_tag(model: &MemmModel, tokens: &[Token]) -> Result<Vec<String>> {
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let inst = model.featurize(tokens);
    let p = memm_local_log_probs(&model.space, &inst, &model.weights)?;
    let (path, _) = viterbi(&p)?;
    Ok(path
        .into_iter()
        .map(|y| model.space.labels().key(y).unwrap_or("?").to_string())
        .collect())
}

/// `β_t(i) = Σ_j p(y_{t+1} = j | y_t = i, x) β_{t+1}(j)` with `β_T = 1`,
/// in probability space.
pub fn memm_backward(model: &MemmModel, tokens: &[Token]) -> Result<Vec<Vec<f64>>> {
    let m = model.space.num_labels();
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let inst = model.featurize(tokens);
    let p = memm_local_log_probs(&model.space, &inst, &model.weights)?;
    let len = p.len();
    let mut beta = vec![vec![1.0; m]; len];
    for t in (0..len - 1).rev() {
        let table = p.transition(t + 1);
        for i in 0..m {
            beta[t][i] = (0..m).map(|j| table[i * m + j].exp() * beta[t + 1][j]).sum();
        }
    }
    Ok(beta)
}
