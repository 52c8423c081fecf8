//! Greedy chain decoding and evaluation.

use serde::Serialize;

use super::records::ExampleRecord;
use super::HarnessError;
use crate::latent::f1_reward;
use crate::numexec::try_regex_pipeline;
use crate::policy::PolicyModel;
use crate::qdmr::{
    detect_end, parse_step_input, render_answer_input, render_decoder_target, render_encoder_input,
    substitute_placeholders, OpenStep, PromptState, QdmrError, TokenProtocol,
};
use crate::text::normalize_answer;

pub const DEFAULT_MAX_STEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferOptions {
    pub max_steps: usize,
    /// Run the numeric executor on the final sub-question.
    pub use_regex: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            use_regex: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TranscriptStep {
    pub sub_question: String,
    pub sub_answer: String,
    pub is_last: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regex_result: Option<String>,
    /// The unit as the decoder would emit it.
    pub decoded: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChainTranscript {
    pub steps: Vec<TranscriptStep>,
    pub answer: String,
    /// An end marker was produced (rather than hitting the step cap).
    pub ended: bool,
    /// The chain broke the protocol and the answer came from a direct
    /// question-to-answer decode.
    pub fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violation: Option<String>,
}

fn top1<M: PolicyModel + ?Sized>(model: &M, input: &str) -> Result<Option<String>, HarnessError> {
    Ok(model.top_candidates(input, 1)?.into_iter().next().map(|c| c.target))
}

/// Decodes one unit; `Ok(None)` signals a protocol violation.
fn decode_unit<M: PolicyModel + ?Sized>(
    model: &M,
    state: &PromptState,
    opts: &InferOptions,
    protocol: &TokenProtocol,
) -> Result<Result<TranscriptStep, String>, HarnessError> {
    let enc = render_encoder_input(state, protocol);
    let Some(q_target) = top1(model, &enc)? else {
        return Ok(Err("no sub-question candidate".into()));
    };
    let open = match parse_step_input(&format!("{enc} {q_target}"), protocol) {
        Ok(parsed) => match parsed.open {
            Some(open) if parsed.state == *state && open.regex_result.is_none() => open,
            _ => return Ok(Err(format!("malformed sub-question `{q_target}`"))),
        },
        Err(e) => return Ok(Err(e.to_string())),
    };
    let regex_result = if open.is_last && opts.use_regex {
        let answers: Vec<&str> = state.history.iter().map(|(_, a)| a.as_str()).collect();
        try_regex_pipeline(&substitute_placeholders(&open.sub_question, &answers))
            .value()
            .map(str::to_string)
    } else {
        None
    };
    let open = OpenStep { regex_result, ..open };
    let answer_input = render_answer_input(state, &open, protocol)?;
    let Some(answer) = top1(model, &answer_input)? else {
        return Ok(Err("no answer candidate".into()));
    };
    let decoded = render_decoder_target(
        &open.sub_question,
        &answer,
        open.is_last,
        open.regex_result.as_deref(),
        protocol,
    )?;
    match detect_end(&decoded, protocol) {
        Ok((q, a, last)) if q == open.sub_question && a == answer && last == open.is_last => {}
        Ok(_) => return Ok(Err(format!("unit does not round-trip: `{decoded}`"))),
        Err(QdmrError::ProtocolViolation(m)) => return Ok(Err(m)),
        Err(e) => return Err(e.into()),
    }
    Ok(Ok(TranscriptStep {
        sub_question: open.sub_question,
        sub_answer: answer,
        is_last: open.is_last,
        regex_result: open.regex_result,
        decoded,
    }))
}

/// Generates sub-questions and sub-answers one unit at a time until an end
/// marker or `max_steps`; the final sub-answer is the answer.
pub fn infer_chain<M: PolicyModel + ?Sized>(
    model: &M,
    question: &str,
    context: &str,
    opts: &InferOptions,
) -> Result<ChainTranscript, HarnessError> {
    let protocol = TokenProtocol::default();
    let mut state = PromptState::new(question, context);
    let mut steps: Vec<TranscriptStep> = Vec::new();
    let mut violation = None;
    while steps.len() < opts.max_steps.max(1) {
        match decode_unit(model, &state, opts, &protocol)? {
            Ok(step) => {
                state.history.push((step.sub_question.clone(), step.sub_answer.clone()));
                let last = step.is_last;
                steps.push(step);
                if last {
                    break;
                }
            }
            Err(msg) => {
                violation = Some(msg);
                break;
            }
        }
    }
    if let Some(msg) = violation {
        let direct = OpenStep {
            sub_question: question.to_string(),
            is_last: true,
            regex_result: None,
        };
        let input = render_answer_input(&PromptState::new(question, context), &direct, &protocol)?;
        let answer = top1(model, &input)?.unwrap_or_default();
        return Ok(ChainTranscript {
            ended: false,
            steps,
            answer,
            fallback: true,
            violation: Some(msg),
        });
    }
    let ended = steps.last().is_some_and(|s| s.is_last);
    Ok(ChainTranscript {
        answer: steps.last().map(|s| s.sub_answer.clone()).unwrap_or_default(),
        steps,
        ended,
        fallback: false,
        violation: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub count: usize,
    pub exact_match: f64,
    pub f1: f64,
    pub mean_chain_length: f64,
    /// Fraction of chains that produced an end marker.
    pub end_token_rate: f64,
    /// Fraction of chains whose final step carried an executor result.
    pub regex_fire_rate: f64,
    pub fallback_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub id: String,
    pub gold: String,
    pub transcript: ChainTranscript,
    pub exact_match: bool,
    pub f1: f64,
}

pub fn predict<M: PolicyModel + ?Sized>(
    model: &M,
    records: &[ExampleRecord],
    opts: &InferOptions,
) -> Result<Vec<Prediction>, HarnessError> {
    records
        .iter()
        .map(|r| {
            let transcript = infer_chain(model, &r.question, &r.context, opts)?;
            Ok(Prediction {
                id: r.id.clone(),
                exact_match: normalize_answer(&transcript.answer) == normalize_answer(&r.answer),
                f1: f1_reward(&transcript.answer, &r.answer),
                gold: r.answer.clone(),
                transcript,
            })
        })
        .collect()
}

pub fn report(predictions: &[Prediction]) -> Result<EvalReport, HarnessError> {
    if predictions.is_empty() {
        return Err(HarnessError::EmptyDataset("no records to evaluate".into()));
    }
    let n = predictions.len() as f64;
    let mean = |f: &dyn Fn(&Prediction) -> f64| predictions.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        count: predictions.len(),
        exact_match: mean(&|p| f64::from(u8::from(p.exact_match))),
        f1: mean(&|p| p.f1),
        mean_chain_length: mean(&|p| p.transcript.steps.len() as f64),
        end_token_rate: mean(&|p| f64::from(u8::from(p.transcript.ended))),
        regex_fire_rate: mean(&|p| {
            f64::from(u8::from(p.transcript.steps.last().is_some_and(|s| s.regex_result.is_some())))
        }),
        fallback_rate: mean(&|p| f64::from(u8::from(p.transcript.fallback))),
    })
}

/// Exact match and mean token F1 of greedy chains over `records`.
pub fn evaluate<M: PolicyModel + ?Sized>(model: &M, records: &[ExampleRecord]) -> Result<EvalReport, HarnessError> {
    evaluate_with(model, records, &InferOptions::default())
}

pub fn evaluate_with<M: PolicyModel + ?Sized>(
    model: &M,
    records: &[ExampleRecord],
    opts: &InferOptions,
) -> Result<EvalReport, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyDataset("no records to evaluate".into()));
    }
    report(&predict(model, records, opts)?)
}
