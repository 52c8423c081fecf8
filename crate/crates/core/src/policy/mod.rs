//! The model contract used by search, losses and inference.
//!
//! A policy scores a target string given a rendered model input and proposes
//! its best continuations. Inputs follow the step protocol in [`crate::qdmr`]:
//! an encoder input alone asks for the next sub-question, an encoder input
//! followed by an open `[QDMR] …` prefix asks for the sub-answer.

mod checkpoint;
mod reference;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, CheckpointMeta};
pub use reference::{
    ReferenceConfig, ReferencePolicy, ANSWER_FEATURES, QUESTION_FEATURES, SENTENCE_ENCODING_DIM,
    TOKEN_ENCODING_DIM,
};

use thiserror::Error;

use crate::qdmr::QdmrError;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("target `{target}` is not in the candidate set")]
    UnrepresentableTarget { target: String },
    #[error("candidate budget must be at least 1")]
    ZeroBudget,
    #[error(transparent)]
    Protocol(#[from] QdmrError),
    #[error("checkpoint does not match this policy: {0}")]
    IncompatibleCheckpoint(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub target: String,
    pub logprob: f64,
}

pub trait PolicyModel: Send + Sync {
    /// Log-probability of `target` given `input`.
    fn score_target(&self, input: &str, target: &str) -> Result<f64, PolicyError>;

    /// Up to `budget` candidates sorted by descending log-probability, ties
    /// broken by candidate order.
    fn top_candidates(&self, input: &str, budget: usize) -> Result<Vec<ScoredCandidate>, PolicyError>;

    fn parameters(&self) -> Option<&[f64]> {
        None
    }
}

pub trait TrainablePolicy: PolicyModel {
    fn parameters_mut(&mut self) -> &mut [f64];

    /// Gradient of `log p(target | input)` with respect to the parameters.
    fn grad_logprob(&self, input: &str, target: &str) -> Result<Vec<f64>, PolicyError>;

    /// Adds `Σ w · ∇(−log p(t | input))` into `grad` and returns the
    /// unweighted `−log p(t | input)` of every target, in order.
    fn accumulate_nll(
        &self,
        input: &str,
        targets: &[(&str, f64)],
        grad: &mut [f64],
    ) -> Result<Vec<f64>, PolicyError> {
        let mut nlls = Vec::with_capacity(targets.len());
        for &(target, weight) in targets {
            nlls.push(-self.score_target(input, target)?);
            let g = self.grad_logprob(input, target)?;
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc -= weight * gi;
            }
        }
        Ok(nlls)
    }
}
