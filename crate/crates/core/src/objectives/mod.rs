//! Losses over chained sub-question trajectories, the dynamic mixture
//! weight, auxiliary heads and the training loop.
//!
//! Every policy loss is a weighted sum of negative log-likelihood terms
//! `w · −log p(target | input)`. Losses are built as [`LossTerms`] and
//! evaluated in one pass that groups terms by input, so each step
//! distribution is computed once per evaluation.

mod aux;
mod trainer;

pub use aux::{auxiliary_losses, AuxError, AuxHeads, AuxTargets, SF_HIDDEN, SP_CLASSES};
pub use trainer::{
    train, LambdaScope, LossBreakdown, SampleStat, StepLog, Trainer, TrainerConfig, TrainingExample,
    TrainingRun,
};

use std::collections::HashMap;

use thiserror::Error;

use crate::latent::{ChainExample, LatentError, ReplayBuffer, TrainingSample, Trajectory};
use crate::policy::{PolicyError, TrainablePolicy};
use crate::qdmr::QdmrError;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("expected {expected} sub-answers, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("mixture weight {0} is outside [0, 1]")]
    InvalidLambda(f64),
    #[error("training sample is empty")]
    Degenerate,
    #[error("invalid trainer configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Protocol(#[from] QdmrError),
    #[error(transparent)]
    Aux(#[from] AuxError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] crate::policy::CheckpointError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllTerm {
    pub input: String,
    pub target: String,
    pub weight: f64,
}

/// A loss written as `Σ weight · −log p(target | input)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTerms {
    pub terms: Vec<NllTerm>,
}

impl LossTerms {
    pub fn push(&mut self, input: String, target: String, weight: f64) {
        self.terms.push(NllTerm { input, target, weight });
    }

    pub fn extend_scaled(&mut self, other: &LossTerms, scale: f64) {
        self.terms.extend(other.terms.iter().map(|t| NllTerm {
            weight: t.weight * scale,
            ..t.clone()
        }));
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn value<P: TrainablePolicy + ?Sized>(&self, model: &P) -> Result<f64, ObjectiveError> {
        let mut scratch = vec![0.0; model.parameters().map_or(0, <[f64]>::len)];
        Ok(evaluate_components(model, &[(self, 1.0)], &mut scratch)?[0])
    }

    /// Loss value; `Σ w · ∇(−log p)` is added into `grad`.
    pub fn value_and_grad<P: TrainablePolicy + ?Sized>(
        &self,
        model: &P,
        grad: &mut [f64],
    ) -> Result<f64, ObjectiveError> {
        Ok(evaluate_components(model, &[(self, 1.0)], grad)?[0])
    }
}

/// Evaluates several losses in one pass. Returns each loss's unscaled
/// value and adds `Σ scale · ∇loss` into `grad`.
pub fn evaluate_components<P: TrainablePolicy + ?Sized>(
    model: &P,
    components: &[(&LossTerms, f64)],
    grad: &mut [f64],
) -> Result<Vec<f64>, ObjectiveError> {
    // group (component, term) pairs by input, in first-appearance order
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<(&str, Vec<(usize, &NllTerm)>)> = Vec::new();
    for (c, (terms, _)) in components.iter().enumerate() {
        for t in &terms.terms {
            let g = *slot.entry(t.input.as_str()).or_insert_with(|| {
                groups.push((t.input.as_str(), Vec::new()));
                groups.len() - 1
            });
            groups[g].1.push((c, t));
        }
    }
    let mut values = vec![0.0; components.len()];
    for (input, members) in &groups {
        let targets: Vec<(&str, f64)> = members
            .iter()
            .map(|(c, t)| (t.target.as_str(), t.weight * components[*c].1))
            .collect();
        let nlls = model.accumulate_nll(input, &targets, grad)?;
        for ((c, t), nll) in members.iter().zip(nlls) {
            values[*c] += t.weight * nll;
        }
    }
    Ok(values)
}

fn check_len(example: &ChainExample, found: usize) -> Result<(), ObjectiveError> {
    if found != example.len() {
        return Err(ObjectiveError::LengthMismatch {
            expected: example.len(),
            found,
        });
    }
    Ok(())
}

/// Gold sub-questions conditioned on the given sub-answers:
/// `Σ_j −log p(q_j | q, c, q_{<j}, a_{<j})`.
pub fn supervised_terms(example: &ChainExample, sub_answers: &[String]) -> Result<LossTerms, ObjectiveError> {
    check_len(example, sub_answers.len())?;
    let mut terms = LossTerms::default();
    push_supervised(&mut terms, example, sub_answers, 1.0)?;
    Ok(terms)
}

fn push_supervised(
    terms: &mut LossTerms,
    example: &ChainExample,
    sub_answers: &[String],
    weight: f64,
) -> Result<(), ObjectiveError> {
    for j in 0..example.len() {
        terms.push(example.question_input(&sub_answers[..j]), example.question_target(j)?, weight);
    }
    Ok(())
}

fn push_answers(
    terms: &mut LossTerms,
    example: &ChainExample,
    sub_answers: &[String],
    weight: f64,
) -> Result<(), ObjectiveError> {
    for (j, answer) in sub_answers.iter().enumerate() {
        terms.push(example.answer_input(j, sub_answers)?, answer.clone(), weight);
    }
    Ok(())
}

/// Negative log-likelihood of the selected sub-answers plus the supervised
/// sub-question loss conditioned on them; equals `−loglik(selected)`.
pub fn hard_em_terms(example: &ChainExample, selected: &Trajectory) -> Result<LossTerms, ObjectiveError> {
    check_len(example, selected.sub_answers.len())?;
    let mut terms = LossTerms::default();
    push_answers(&mut terms, example, &selected.sub_answers, 1.0)?;
    push_supervised(&mut terms, example, &selected.sub_answers, 1.0)?;
    Ok(terms)
}

/// Reward-weighted answer likelihoods with in-memory trajectories weighted
/// `r_B / m · R` and out-of-memory ones `(1 − r_B) / m · R`, plus the
/// supervised loss of every sampled trajectory at weight `1 / m`.
pub fn mapo_terms(example: &ChainExample, sample: &TrainingSample) -> Result<LossTerms, ObjectiveError> {
    if sample.m == 0 {
        return Err(ObjectiveError::Degenerate);
    }
    let m = sample.m as f64;
    let mut terms = LossTerms::default();
    let groups = [
        (&sample.in_memory, sample.r_b / m),
        (&sample.out_of_memory, (1.0 - sample.r_b) / m),
    ];
    for (trajectories, scale) in groups {
        for t in trajectories {
            check_len(example, t.sub_answers.len())?;
            push_answers(&mut terms, example, &t.sub_answers, scale * t.reward)?;
        }
    }
    for (trajectories, _) in groups {
        for t in trajectories {
            push_supervised(&mut terms, example, &t.sub_answers, 1.0 / m)?;
        }
    }
    Ok(terms)
}

pub fn supervised_loss<P: TrainablePolicy + ?Sized>(
    model: &P,
    example: &ChainExample,
    sub_answers: &[String],
    grad: &mut [f64],
) -> Result<f64, ObjectiveError> {
    supervised_terms(example, sub_answers)?.value_and_grad(model, grad)
}

pub fn hard_em_loss<P: TrainablePolicy + ?Sized>(
    model: &P,
    example: &ChainExample,
    selected: &Trajectory,
    grad: &mut [f64],
) -> Result<f64, ObjectiveError> {
    hard_em_terms(example, selected)?.value_and_grad(model, grad)
}

pub fn mapo_loss<P: TrainablePolicy + ?Sized>(
    model: &P,
    example: &ChainExample,
    sample: &TrainingSample,
    grad: &mut [f64],
) -> Result<f64, ObjectiveError> {
    mapo_terms(example, sample)?.value_and_grad(model, grad)
}

/// Fraction of `example_ids` owning at least one buffered trajectory; 0 for
/// an empty id list.
pub fn compute_lambda<'a, I>(buffer: &ReplayBuffer, example_ids: I) -> f64
where
    I: IntoIterator<Item = &'a str>,
{
    let (mut total, mut buffered) = (0usize, 0usize);
    for id in example_ids {
        total += 1;
        buffered += usize::from(buffer.has_entries(id));
    }
    if total == 0 {
        0.0
    } else {
        buffered as f64 / total as f64
    }
}

pub fn mixture_loss(hard: f64, mapo: f64, lambda: f64) -> Result<f64, ObjectiveError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ObjectiveError::InvalidLambda(lambda));
    }
    Ok(lambda * mapo + (1.0 - lambda) * hard)
}
