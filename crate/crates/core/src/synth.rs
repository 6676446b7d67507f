//! Seeded synthetic corpora: sequences sampled from a known chain CRF, and
//! a label-bias corpus with branching prefix states.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chain::{sample_posterior, ChainLattice};
use crate::error::Result;
use crate::features::{tokens_from_words, Alphabet, FeatureSpace, FeatureTemplate, Token, BOS, FEATURE_SEP, TRANSITION_OBS, TRANSITION_SEP};
use crate::models::{LinearChainModel, Sequence};
use crate::objectives::RegularizerSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub num_labels: usize,
    pub length: usize,
    pub vocabulary: usize,
    pub train: usize,
    pub test: usize,
    /// Weight of the `y_{t-1} = y_t` transition features.
    pub coupling: f64,
    /// Node weights are uniform on `[-emission, emission]`.
    pub emission: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_labels: 3,
            length: 10,
            vocabulary: 20,
            train: 200,
            test: 200,
            coupling: 2.0,
            emission: 1.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub generator: LinearChainModel,
    pub train: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

pub fn synthetic_label(y: usize) -> String {
    format!("L{y}")
}

pub fn synthetic_word(k: usize) -> String {
    format!("w{k}")
}

/// The generating model: word-identity node features with random weights
/// and a `coupling` bonus for staying in the same label.
pub fn synthetic_generator<R: Rng>(rng: &mut R, config: &SyntheticConfig) -> Result<LinearChainModel> {
    let m = config.num_labels;
    let template = FeatureTemplate::node("identity", &[0]);
    let labels = Alphabet::from_keys((0..m).map(synthetic_label));
    let mut keys = Vec::new();
    let mut weights = Vec::new();
    for y in 0..m {
        keys.push(format!("{TRANSITION_OBS}{FEATURE_SEP}{BOS}{TRANSITION_SEP}{}", synthetic_label(y)));
        weights.push(0.0);
    }
    for k in 0..config.vocabulary {
        let obs = template
            .apply(&[Token::new([synthetic_word(k)])], 0)
            .expect("identity template always fires")
            .key;
        for y in 0..m {
            keys.push(format!("{obs}{FEATURE_SEP}{}", synthetic_label(y)));
            weights.push(rng.random_range(-config.emission..=config.emission));
        }
    }
    for i in 0..m {
        for j in 0..m {
            keys.push(format!(
                "{TRANSITION_OBS}{FEATURE_SEP}{}{TRANSITION_SEP}{}",
                synthetic_label(i),
                synthetic_label(j)
            ));
            weights.push(if i == j { config.coupling } else { 0.0 });
        }
    }
    let space = FeatureSpace::from_keys(labels, &keys)?;
    Ok(LinearChainModel::new(space, vec![template], weights, RegularizerSpec::None))
}

/// Words uniform over the vocabulary; labels drawn exactly from `p(y | x)`.
pub fn sample_from_model<R: Rng>(rng: &mut R, model: &LinearChainModel, words: Vec<String>) -> Result<Sequence> {
    let tokens = tokens_from_words(&words);
    let inst = model.featurize(&tokens);
    let p = model.space.potentials(&inst, &model.weights);
    let lattice = ChainLattice::compute(&p)?;
    let y = sample_posterior(&p, &lattice, 1, rng.random())?.swap_remove(0);
    Ok(Sequence {
        tokens,
        labels: y.into_iter().map(|i| model.label(i).to_string()).collect(),
    })
}

pub fn synthetic_chain_task(config: &SyntheticConfig) -> Result<SyntheticTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let generator = synthetic_generator(&mut rng, config)?;
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Sequence>> {
        (0..n)
            .map(|_| {
                let words = (0..config.length)
                    .map(|_| synthetic_word(rng.random_range(0..config.vocabulary)))
                    .collect();
                sample_from_model(rng, &generator, words)
            })
            .collect()
    };
    let train = draw(config.train, &mut rng)?;
    let test = draw(config.test, &mut rng)?;
    Ok(SyntheticTask { generator, train, test })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelBiasConfig {
    pub train: usize,
    pub test: usize,
    /// Probability of the first branch.
    pub majority: f64,
    pub seed: u64,
}

impl Default for LabelBiasConfig {
    fn default() -> Self {
        Self {
            train: 200,
            test: 200,
            majority: 0.7,
            seed: 0,
        }
    }
}

/// Two branches share their first and last symbols and differ only in the
/// middle: `r i b` is labelled `R0 I0 B0` and `r o b` is `R1 O1 B1`. A
/// locally normalized model that commits at `r` cannot be corrected by the
/// middle symbol.
pub fn label_bias_corpus(config: &LabelBiasConfig) -> (Vec<Sequence>, Vec<Sequence>) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut make = |n: usize| -> Vec<Sequence> {
        (0..n)
            .map(|_| {
                if rng.random::<f64>() < config.majority {
                    Sequence::from_words(&["r", "i", "b"], &["R0", "I0", "B0"])
                } else {
                    Sequence::from_words(&["r", "o", "b"], &["R1", "O1", "B1"])
                }
            })
            .collect()
    };
    let train = make(config.train);
    let test = make(config.test);
    (train, test)
}

/// Edge-only templates: every observation is conjoined with the transition.
pub fn label_bias_templates() -> Vec<FeatureTemplate> {
    vec![FeatureTemplate::edge("identity", &[0])]
}
