use crate::chain::ChainLattice;
use crate::error::{Error, Result};
use crate::features::{ChainInstance, FeatureMode, FeatureSpace, FeatureSpaceBuilder};
use crate::objectives::{Batch, ChainCll, RegularizerSpec};
use crate::optimize::{lbfgs_maximize, LbfgsConfig};

/// Named real-valued inputs and a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVector {
    pub features: Vec<(String, f64)>,
    pub label: String,
}

/// Multinomial logistic regression, stored as a one-position chain CRF.
/// The begin-state transition features act as per-class biases.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub space: FeatureSpace,
    pub weights: Vec<f64>,
}

impl LogisticModel {
    pub fn featurize(&self, features: &[(String, f64)]) -> ChainInstance {
        self.space.featurize_vectors(std::slice::from_ref(&features.to_vec()), None::<&[String]>)
    }
}

/// Every input paired with every class.
pub fn logreg_train(data: &[LabeledVector], reg: RegularizerSpec, config: &LbfgsConfig) -> Result<LogisticModel> {
    if data.is_empty() {
        return Err(Error::param("empty training set"));
    }
    let mut builder = FeatureSpaceBuilder::new();
    let instances: Vec<ChainInstance> = data
        .iter()
        .enumerate()
        .map(|(i, d)| {
            builder
                .add_vectors(std::slice::from_ref(&d.features), std::slice::from_ref(&d.label))
                .map_err(|e| e.at_instance(i))
        })
        .collect::<Result<_>>()?;
    let space = builder.finish(FeatureMode::Full);
    let obj = ChainCll::new(&space, &instances, reg);
    let r = lbfgs_maximize(&Batch::new(&obj), &vec![0.0; space.num_weights()], config)?;
    Ok(LogisticModel { space, weights: r.weights })
}

/// Most probable class (lowest index on ties) and the class distribution.
pub fn logreg_predict(model: &LogisticModel, features: &[(String, f64)]) -> Result<(String, Vec<f64>)> {
    let inst = model.featurize(features);
    let p = model.space.potentials(&inst, &model.weights);
    let lattice = ChainLattice::compute(&p)?;
    let probs = lattice.node_marginals(&p).swap_remove(0);
    let mut best = 0;
    for (i, &q) in probs.iter().enumerate() {
        if q > probs[best] {
            best = i;
        }
    }
    Ok((model.space.labels().key(best).unwrap_or("?").to_string(), probs))
}
