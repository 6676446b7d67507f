//! Model assemblies: linear-chain CRF, HMM (and its CRF form), MEMM,
//! logistic regression, hidden-state CRF, plus the model file format.

mod chain_crf;
mod hcrf;
mod hmm;
mod io;
mod logreg;
mod memm;

pub use chain_crf::{
    tag, train_chain_crf, train_on_instances, LinearChainModel, OptimizerChoice, SgdSchedule, TagMode, Tagged,
    TrainConfig, TrainStatus, TrainedChain, TrainingSummary,
};
pub use hcrf::{composite_label, hcrf_dataset, hcrf_instance, hcrf_tag, train_hcrf, HcrfConfig, HcrfMethod, HcrfModel};
pub use hmm::{hmm_fit, hmm_to_crf, HmmParams};
pub use io::{load_model, model_from_str, model_to_string, save_model, FORMAT_VERSION};
pub use logreg::{logreg_predict, logreg_train, LabeledVector, LogisticModel};
pub use memm::{memm_backward, memm_local_log_probs, memm_tag, memm_train, MemmModel, MemmObjective};

use crate::features::Token;

/// A token sequence with one gold label per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub tokens: Vec<Token>,
    pub labels: Vec<String>,
}

impl Sequence {
    pub fn new(tokens: Vec<Token>, labels: Vec<String>) -> Self {
        Self { tokens, labels }
    }

    /// Single-column tokens from words.
    pub fn from_words<W: AsRef<str>, L: AsRef<str>>(words: &[W], labels: &[L]) -> Self {
        Self {
            tokens: crate::features::tokens_from_words(words),
            labels: labels.iter().map(|l| l.as_ref().to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}
