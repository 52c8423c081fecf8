//! Latent sub-answer inference: trajectory scoring, beam search over
//! sub-answer sequences, Hard-EM selection, the F1 reward and the replay
//! buffer.

pub(crate) mod buffer;

pub use buffer::{assemble_training_sample, assemble_with_limit, buffer_admit, BufferRecord, ReplayBuffer, TrainingSample,
    DEFAULT_CAPACITY, MAX_IN_MEMORY, REWARD_THRESHOLD};

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::numexec::try_regex_pipeline;
use crate::policy::{PolicyError, PolicyModel};
use crate::qdmr::{
    render_answer_input, render_encoder_input, render_question_target, substitute_placeholders,
    OpenStep, PromptState, QdmrError, TokenProtocol,
};
use crate::text::{answer_tokens, normalize_answer};

pub const DEFAULT_BEAM_SIZE: usize = 25;
pub const DEFAULT_EXPANSION: usize = 5;

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("no non-empty answer candidates at step {step}")]
    EmptyCandidateSet { step: usize },
    #[error("cannot select from an empty list of trajectories")]
    EmptyList,
    #[error("training sample is empty: no beam trajectories and no buffered ones")]
    Degenerate,
    #[error("expected {expected} sub-answers, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("beam size and expansion must both be at least 1")]
    InvalidBeam,
    #[error("example has no sub-questions")]
    NoSubQuestions,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Protocol(#[from] QdmrError),
    #[error("buffer snapshot: {0}")]
    Snapshot(String),
}

/// A question with its context, its sub-questions (as written, with `#k`
/// placeholders) and its gold final answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainExample {
    pub id: String,
    pub question: String,
    pub context: String,
    pub sub_questions: Vec<String>,
    pub answer: String,
}

impl ChainExample {
    pub fn len(&self) -> usize {
        self.sub_questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sub_questions.is_empty()
    }

    fn state(&self, prefix: &[String]) -> PromptState {
        let history = self.sub_questions[..prefix.len()]
            .iter()
            .cloned()
            .zip(prefix.iter().cloned())
            .collect();
        PromptState::new(self.question.clone(), self.context.clone()).with_history(history)
    }

    /// Input for generating sub-question `prefix.len() + 1`.
    pub fn question_input(&self, prefix: &[String]) -> String {
        render_encoder_input(&self.state(prefix), &TokenProtocol::default())
    }

    /// The gold sub-question target at zero-based step `j`.
    pub fn question_target(&self, j: usize) -> Result<String, QdmrError> {
        let last = j + 1 == self.len();
        render_question_target(&self.sub_questions[j], last, None, &TokenProtocol::default())
    }

    /// Executor output for the final sub-question once `prefix` fills its
    /// placeholders; `None` for earlier steps or when the executor declines.
    pub fn regex_result(&self, j: usize, prefix: &[String]) -> Option<String> {
        if j + 1 != self.len() {
            return None;
        }
        let resolved = substitute_placeholders(&self.sub_questions[j], prefix);
        try_regex_pipeline(&resolved).value().map(str::to_string)
    }

    /// Input for answering sub-question `j` given answers `prefix` (`j`
    /// entries).
    pub fn answer_input(&self, j: usize, prefix: &[String]) -> Result<String, QdmrError> {
        let open = OpenStep {
            sub_question: self.sub_questions[j].clone(),
            is_last: j + 1 == self.len(),
            regex_result: self.regex_result(j, prefix),
        };
        render_answer_input(&self.state(&prefix[..j]), &open, &TokenProtocol::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepScore {
    pub question: f64,
    pub answer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sub_answers: Vec<String>,
    pub step_logprobs: Vec<StepScore>,
    pub loglik: f64,
    pub reward: f64,
}

impl Trajectory {
    pub fn final_answer(&self) -> &str {
        self.sub_answers.last().map(String::as_str).unwrap_or("")
    }

    /// Identity used for deduplication: the normalized sub-answers.
    pub fn key(&self) -> Vec<String> {
        trajectory_key(&self.sub_answers)
    }

    pub fn with_reward(mut self, gold: &str) -> Self {
        self.reward = f1_reward(self.final_answer(), gold);
        self
    }
}

pub fn trajectory_key(sub_answers: &[String]) -> Vec<String> {
    sub_answers.iter().map(|a| normalize_answer(a)).collect()
}

/// Scores every factor of a fixed trajectory; the reward is left at 0.
pub fn score_trajectory<M: PolicyModel + ?Sized>(
    model: &M,
    example: &ChainExample,
    sub_answers: &[String],
) -> Result<Trajectory, LatentError> {
    if sub_answers.len() != example.len() {
        return Err(LatentError::LengthMismatch {
            expected: example.len(),
            found: sub_answers.len(),
        });
    }
    let mut steps = Vec::with_capacity(sub_answers.len());
    for j in 0..sub_answers.len() {
        let question = model.score_target(&example.question_input(&sub_answers[..j]), &example.question_target(j)?)?;
        let answer = model.score_target(&example.answer_input(j, sub_answers)?, &sub_answers[j])?;
        steps.push(StepScore { question, answer });
    }
    Ok(Trajectory {
        sub_answers: sub_answers.to_vec(),
        loglik: steps.iter().map(|s| s.question + s.answer).sum(),
        step_logprobs: steps,
        reward: 0.0,
    })
}

/// Log-likelihood of a full trajectory: every answer factor plus every
/// sub-question factor.
pub fn trajectory_loglik<M: PolicyModel + ?Sized>(
    model: &M,
    example: &ChainExample,
    sub_answers: &[String],
) -> Result<f64, LatentError> {
    Ok(score_trajectory(model, example, sub_answers)?.loglik)
}

/// The best `b` answer candidates whose normalized form is non-empty.
fn nonempty_candidates<M: PolicyModel + ?Sized>(
    model: &M,
    input: &str,
    b: usize,
) -> Result<Vec<(String, f64)>, LatentError> {
    let mut budget = b + 1;
    loop {
        let cands = model.top_candidates(input, budget)?;
        let exhausted = cands.len() < budget;
        let kept: Vec<(String, f64)> = cands
            .into_iter()
            .filter(|c| !normalize_answer(&c.target).is_empty())
            .map(|c| (c.target, c.logprob))
            .take(b)
            .collect();
        if kept.len() == b || exhausted {
            return Ok(kept);
        }
        budget *= 2;
    }
}

fn by_loglik_desc(a: &Trajectory, b: &Trajectory) -> Ordering {
    b.loglik.total_cmp(&a.loglik)
}

/// Beam search over sub-answer sequences using the gold sub-questions.
///
/// Each partial trajectory is expanded with its `b` best non-empty answers;
/// the union is sorted stably by log-likelihood, deduplicated on normalized
/// sub-answers (first occurrence kept) and cut to `k`. Rewards are filled
/// against the example's gold answer.
pub fn beam_search_latents<M: PolicyModel + ?Sized>(
    model: &M,
    example: &ChainExample,
    k: usize,
    b: usize,
) -> Result<Vec<Trajectory>, LatentError> {
    if k == 0 || b == 0 {
        return Err(LatentError::InvalidBeam);
    }
    if example.is_empty() {
        return Err(LatentError::NoSubQuestions);
    }
    let mut beams = vec![Trajectory {
        sub_answers: Vec::new(),
        step_logprobs: Vec::new(),
        loglik: 0.0,
        reward: 0.0,
    }];
    let target_cache: Vec<String> = (0..example.len())
        .map(|j| example.question_target(j))
        .collect::<Result<_, _>>()?;
    for (j, q_target) in target_cache.iter().enumerate() {
        let mut next = Vec::with_capacity(beams.len() * b);
        for beam in &beams {
            let q_lp = model.score_target(&example.question_input(&beam.sub_answers), q_target)?;
            let input = example.answer_input(j, &beam.sub_answers)?;
            for (answer, a_lp) in nonempty_candidates(model, &input, b)? {
                let mut t = beam.clone();
                t.sub_answers.push(answer);
                t.step_logprobs.push(StepScore {
                    question: q_lp,
                    answer: a_lp,
                });
                t.loglik += q_lp + a_lp;
                next.push(t);
            }
        }
        if next.is_empty() {
            return Err(LatentError::EmptyCandidateSet { step: j + 1 });
        }
        next.sort_by(by_loglik_desc);
        let mut seen = HashSet::new();
        next.retain(|t| seen.insert(t.key()));
        next.truncate(k);
        beams = next;
    }
    Ok(beams.into_iter().map(|t| t.with_reward(&example.answer)).collect())
}

/// Highest log-likelihood; ties go to the lexicographically smallest
/// sub-answer sequence.
pub fn hard_em_select(trajectories: &[Trajectory]) -> Result<&Trajectory, LatentError> {
    trajectories
        .iter()
        .min_by(|a, b| by_loglik_desc(a, b).then_with(|| a.sub_answers.cmp(&b.sub_answers)))
        .ok_or(LatentError::EmptyList)
}

/// For each distinct prefix `a_{1:n-1}` in the beam (first occurrence
/// order), the trajectory that ends in the gold answer instead. Prefixes
/// under which the gold answer is not representable are skipped.
pub fn gold_completions<M: PolicyModel + ?Sized>(
    model: &M,
    example: &ChainExample,
    beam: &[Trajectory],
) -> Result<Vec<Trajectory>, LatentError> {
    let n = example.len();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for t in beam {
        let prefix = &t.sub_answers[..n - 1];
        if !seen.insert(trajectory_key(prefix)) {
            continue;
        }
        let mut answers = prefix.to_vec();
        answers.push(example.answer.clone());
        match score_trajectory(model, example, &answers) {
            Ok(traj) => out.push(traj.with_reward(&example.answer)),
            Err(LatentError::Policy(PolicyError::UnrepresentableTarget { .. })) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Bag-of-tokens F1 between normalized answers.
pub fn f1_reward(predicted: &str, gold: &str) -> f64 {
    let p = answer_tokens(predicted);
    let g = answer_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    // 2PR/(P+R) with P = c/|p| and R = c/|g| simplifies to 2c/(|p|+|g|).
    (2 * common) as f64 / (p.len() + g.len()) as f64
}
