//! Decompositions and the step-wise prompt/target protocol.
//!
//! A decomposition is an ordered list of sub-questions, each of which may
//! refer back to the answer of an earlier step with a `#k` placeholder.
//! The model is driven one step at a time: the encoder sees the question,
//! the context and every completed `(sub-question, sub-answer)` pair, and the
//! decoder emits the next `[QDMR] … [QDMR-ANS] …` unit.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Marker inserted into payload text so that protocol tokens and field
/// separators never appear verbatim inside a rendered body.
const ESCAPE_MARK: char = '\u{200B}';

const QUESTION_PREFIX: &str = "question: ";
const CONTEXT_SEPARATOR: &str = " context: ";
const CONTEXT_LABEL: &str = "context:";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QdmrError {
    #[error("decomposition has no steps")]
    EmptyDecomposition,
    #[error("step {index} is empty")]
    EmptyStep { index: usize },
    #[error("step {index} references #{target}, which is not an earlier step")]
    ForwardReference { index: usize, target: usize },
    #[error("step {index} has a malformed reference `{found}`")]
    MalformedRef { index: usize, found: String },
    #[error("reference #{target} has no answer ({available} available)")]
    MissingAnswer { target: usize, available: usize },
    #[error("a [REGEX] result is only allowed on the final step")]
    RegexOnNonFinalStep,
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
}

/// The four special strings of the step protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenProtocol {
    pub qdmr_token: &'static str,
    pub answer_token: &'static str,
    pub end_token: &'static str,
    pub regex_token: &'static str,
}

impl Default for TokenProtocol {
    fn default() -> Self {
        Self {
            qdmr_token: "[QDMR]",
            answer_token: "[QDMR-ANS]",
            end_token: "[END-QDMR]",
            regex_token: "[REGEX]",
        }
    }
}

impl TokenProtocol {
    fn tokens(&self) -> [&'static str; 4] {
        [
            self.qdmr_token,
            self.answer_token,
            self.end_token,
            self.regex_token,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionStep {
    /// 1-based ordinal.
    pub index: usize,
    pub text: String,
    /// Distinct back-references in order of first appearance.
    pub refs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QdmrDecomposition {
    steps: Vec<DecompositionStep>,
}

impl QdmrDecomposition {
    /// Builds a decomposition from sub-question texts, numbering them 1..n.
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Result<Self, QdmrError> {
        if texts.is_empty() {
            return Err(QdmrError::EmptyDecomposition);
        }
        let mut steps = Vec::with_capacity(texts.len());
        for (i, text) in texts.iter().enumerate() {
            steps.push(parse_step(i + 1, text.as_ref())?);
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[DecompositionStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, index: usize) -> Option<&DecompositionStep> {
        index.checked_sub(1).and_then(|i| self.steps.get(i))
    }

    pub fn texts(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.text.as_str()).collect()
    }
}

/// Canonical serialization: `return …; return …`.
impl fmt::Display for QdmrDecomposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, step) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            f.write_str(&step.text)?;
        }
        Ok(())
    }
}

impl std::str::FromStr for QdmrDecomposition {
    type Err = QdmrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_qdmr_text(s)
    }
}

/// Parses a `;`- or newline-delimited decomposition. A leading `return ` is
/// optional on input and always present on output.
pub fn parse_qdmr_text(raw: &str) -> Result<QdmrDecomposition, QdmrError> {
    let pieces: Vec<&str> = raw
        .split([';', '\n'])
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .collect();
    QdmrDecomposition::from_texts(&pieces)
}

fn parse_step(index: usize, raw: &str) -> Result<DecompositionStep, QdmrError> {
    let trimmed = raw.trim();
    let body = strip_return(trimmed).trim();
    if body.is_empty() {
        return Err(QdmrError::EmptyStep { index });
    }
    let text = format!("return {body}");
    let refs = collect_refs(index, &text)?;
    Ok(DecompositionStep { index, text, refs })
}

fn strip_return(s: &str) -> &str {
    match s.get(..6) {
        Some(head) if head.eq_ignore_ascii_case("return") => {
            let rest = &s[6..];
            if rest.is_empty() {
                rest
            } else if rest.starts_with(char::is_whitespace) {
                rest.trim_start()
            } else {
                s
            }
        }
        _ => s,
    }
}

fn collect_refs(index: usize, text: &str) -> Result<Vec<usize>, QdmrError> {
    let mut refs = Vec::new();
    for (target, found) in scan_refs(text) {
        let target = target.ok_or_else(|| QdmrError::MalformedRef {
            index,
            found: found.to_string(),
        })?;
        if target == 0 {
            return Err(QdmrError::MalformedRef {
                index,
                found: found.to_string(),
            });
        }
        if target >= index {
            return Err(QdmrError::ForwardReference { index, target });
        }
        if !refs.contains(&target) {
            refs.push(target);
        }
    }
    Ok(refs)
}

/// Yields every `#…` occurrence with its parsed ordinal (None when the
/// characters after `#` are not digits) and the raw matched text.
fn scan_refs(text: &str) -> Vec<(Option<usize>, &str)> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'#' {
            let start = i;
            let mut j = i + 1;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j == i + 1 {
                // "#x": take the following word for the diagnostic
                let mut k = j;
                while k < bytes.len() && bytes[k].is_ascii_alphanumeric() {
                    k += 1;
                }
                let k = k.max((j + 1).min(bytes.len()));
                let end = next_char_boundary(text, k);
                out.push((None, &text[start..end]));
                i = end.max(i + 1);
            } else {
                out.push((text[i + 1..j].parse().ok(), &text[start..j]));
                i = j;
            }
        } else {
            i += 1;
        }
    }
    out
}

fn next_char_boundary(s: &str, mut i: usize) -> usize {
    while i < s.len() && !s.is_char_boundary(i) {
        i += 1;
    }
    i.min(s.len())
}

/// Replaces each `#k` with `answers[k - 1]`.
pub fn substitute_references(
    step: &DecompositionStep,
    answers: &[impl AsRef<str>],
) -> Result<String, QdmrError> {
    if let Some(&missing) = step.refs.iter().find(|&&k| k > answers.len()) {
        return Err(QdmrError::MissingAnswer {
            target: missing,
            available: answers.len(),
        });
    }
    Ok(substitute_placeholders(&step.text, answers))
}

/// Replaces every resolvable `#k` in free text; unresolvable placeholders
/// are left as they are.
pub fn substitute_placeholders(text: &str, answers: &[impl AsRef<str>]) -> String {
    if !text.contains('#') {
        return text.to_string();
    }
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    let mut copied = 0;
    while i < bytes.len() {
        if bytes[i] == b'#' {
            let mut j = i + 1;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j > i + 1 {
                if let Ok(k) = text[i + 1..j].parse::<usize>() {
                    if (1..=answers.len()).contains(&k) {
                        out.push_str(&text[copied..i]);
                        out.push_str(answers[k - 1].as_ref());
                        copied = j;
                    }
                }
                i = j;
                continue;
            }
        }
        i += 1;
    }
    out.push_str(&text[copied..]);
    out
}

/// Conditioning state for one run of the model.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptState {
    pub question: String,
    pub context: String,
    pub history: Vec<(String, String)>,
}

impl PromptState {
    pub fn new(question: impl Into<String>, context: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            context: context.into(),
            history: Vec::new(),
        }
    }

    pub fn with_history(mut self, history: Vec<(String, String)>) -> Self {
        self.history = history;
        self
    }
}

/// A partially decoded unit: the sub-question has been emitted (possibly
/// with the end marker and a regex result) and the answer is pending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenStep {
    pub sub_question: String,
    pub is_last: bool,
    pub regex_result: Option<String>,
}

/// Parsed form of a model input: the encoder state plus, when the model is
/// asked for a sub-answer, the decoder prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepInput {
    pub state: PromptState,
    pub open: Option<OpenStep>,
}

fn escape_with(out: &mut String, text: &str, protocol: &TokenProtocol, question_field: bool) {
    let tokens = protocol.tokens();
    for (i, c) in text.char_indices() {
        if c == ESCAPE_MARK {
            out.push(ESCAPE_MARK);
            out.push(ESCAPE_MARK);
            continue;
        }
        out.push(c);
        let rest = &text[i..];
        if tokens.iter().any(|t| rest.starts_with(t))
            || (question_field && rest.starts_with(CONTEXT_LABEL))
        {
            out.push(ESCAPE_MARK);
        }
    }
}

/// Escapes protocol tokens inside payload text.
pub fn escape_payload(text: &str, protocol: &TokenProtocol) -> String {
    let mut out = String::with_capacity(text.len());
    escape_with(&mut out, text, protocol, false);
    out
}

/// Inverse of [`escape_payload`].
pub fn unescape_payload(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == ESCAPE_MARK {
            if chars.peek() == Some(&ESCAPE_MARK) {
                chars.next();
                out.push(ESCAPE_MARK);
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// `question: {q} context: {c}` followed by ` [QDMR] {sub_q} [QDMR-ANS] {sub_a}`
/// per completed pair.
pub fn render_encoder_input(state: &PromptState, protocol: &TokenProtocol) -> String {
    render_encoder_input_budgeted(state, protocol, None)
}

/// Like [`render_encoder_input`], but when the rendered input would exceed
/// `budget` whitespace tokens the context is tail-truncated. History is never
/// dropped.
pub fn render_encoder_input_budgeted(
    state: &PromptState,
    protocol: &TokenProtocol,
    budget: Option<usize>,
) -> String {
    let full = render_with_context(state, &state.context, protocol);
    let Some(budget) = budget else {
        return full;
    };
    let total = full.split_whitespace().count();
    if total <= budget {
        return full;
    }
    let context_tokens: Vec<&str> = state.context.split_whitespace().collect();
    let excess = total - budget;
    let keep = context_tokens.len().saturating_sub(excess);
    let truncated = context_tokens[..keep].join(" ");
    render_with_context(state, &truncated, protocol)
}

fn render_with_context(state: &PromptState, context: &str, protocol: &TokenProtocol) -> String {
    let mut out = String::with_capacity(
        QUESTION_PREFIX.len() + state.question.len() + context.len() + 32 * (state.history.len() + 1),
    );
    out.push_str(QUESTION_PREFIX);
    escape_with(&mut out, &state.question, protocol, true);
    out.push_str(CONTEXT_SEPARATOR);
    escape_with(&mut out, context, protocol, false);
    for (sub_q, sub_a) in &state.history {
        out.push(' ');
        out.push_str(protocol.qdmr_token);
        out.push(' ');
        escape_with(&mut out, sub_q, protocol, false);
        out.push(' ');
        out.push_str(protocol.answer_token);
        out.push(' ');
        escape_with(&mut out, sub_a, protocol, false);
    }
    out
}

/// The sub-question half of a decoded unit: `[QDMR] {sub_q}` with
/// ` [END-QDMR]` and ` [REGEX] {result}` appended as applicable.
pub fn render_question_target(
    sub_q: &str,
    is_last: bool,
    regex_result: Option<&str>,
    protocol: &TokenProtocol,
) -> Result<String, QdmrError> {
    if regex_result.is_some() && !is_last {
        return Err(QdmrError::RegexOnNonFinalStep);
    }
    let mut out = String::with_capacity(sub_q.len() + 32);
    out.push_str(protocol.qdmr_token);
    out.push(' ');
    escape_with(&mut out, sub_q, protocol, false);
    if is_last {
        out.push(' ');
        out.push_str(protocol.end_token);
    }
    if let Some(result) = regex_result {
        out.push(' ');
        out.push_str(protocol.regex_token);
        out.push(' ');
        escape_with(&mut out, result, protocol, false);
    }
    Ok(out)
}

pub fn render_decoder_target(
    sub_q: &str,
    sub_a: &str,
    is_last: bool,
    regex_result: Option<&str>,
    protocol: &TokenProtocol,
) -> Result<String, QdmrError> {
    let mut out = render_question_target(sub_q, is_last, regex_result, protocol)?;
    out.push(' ');
    out.push_str(protocol.answer_token);
    out.push(' ');
    escape_with(&mut out, sub_a, protocol, false);
    Ok(out)
}

/// Model input for the answer half of a step: the encoder input followed by
/// the decoder prefix.
pub fn render_answer_input(
    state: &PromptState,
    open: &OpenStep,
    protocol: &TokenProtocol,
) -> Result<String, QdmrError> {
    let mut out = render_encoder_input(state, protocol);
    out.push(' ');
    out.push_str(&render_question_target(
        &open.sub_question,
        open.is_last,
        open.regex_result.as_deref(),
        protocol,
    )?);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tok {
    Qdmr,
    Answer,
    End,
    Regex,
}

/// Finds every protocol token in `text` (escaped payload never matches).
fn locate_tokens(text: &str, protocol: &TokenProtocol) -> Vec<(usize, usize, Tok)> {
    let table = [
        (protocol.qdmr_token, Tok::Qdmr),
        (protocol.answer_token, Tok::Answer),
        (protocol.end_token, Tok::End),
        (protocol.regex_token, Tok::Regex),
    ];
    let mut found = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        if let Some((tok, kind)) = table.iter().find(|(t, _)| rest.starts_with(t)) {
            found.push((i, i + tok.len(), *kind));
            i += tok.len();
        } else {
            i += rest.chars().next().map_or(1, char::len_utf8);
        }
    }
    found
}

/// Payload between two tokens, dropping exactly one separating space on
/// either side.
fn between(text: &str, start: usize, end: usize) -> Result<&str, QdmrError> {
    let violation = |msg: &str| QdmrError::ProtocolViolation(msg.to_string());
    let s = text[start..end]
        .strip_prefix(' ')
        .ok_or_else(|| violation("missing space after token"))?;
    if end == text.len() {
        Ok(s)
    } else {
        s.strip_suffix(' ')
            .ok_or_else(|| violation("missing space before token"))
    }
}

/// Separator between two adjacent tokens.
fn gap(text: &str, start: usize, end: usize) -> Result<(), QdmrError> {
    let s = &text[start..end];
    if s == " " || (s.is_empty() && end == text.len()) {
        Ok(())
    } else {
        Err(QdmrError::ProtocolViolation(
            "unexpected text after end token".into(),
        ))
    }
}

/// Splits a decoded unit into `(sub_question, sub_answer, is_last)`. Any
/// `[REGEX]` segment is dropped from the sub-question.
pub fn detect_end(decoded: &str, protocol: &TokenProtocol) -> Result<(String, String, bool), QdmrError> {
    let text = decoded;
    let toks = locate_tokens(text, protocol);
    let count = |k: Tok| toks.iter().filter(|t| t.2 == k).count();
    if count(Tok::Qdmr) != 1 || count(Tok::Answer) != 1 {
        return Err(QdmrError::ProtocolViolation(format!(
            "expected exactly one {} and one {}",
            protocol.qdmr_token, protocol.answer_token
        )));
    }
    let first = toks[0];
    if first.2 != Tok::Qdmr || first.0 != 0 {
        return Err(QdmrError::ProtocolViolation(format!(
            "decoded unit must start with {}",
            protocol.qdmr_token
        )));
    }
    let (open, answer) = split_open(text, &toks, protocol)?;
    Ok((open.sub_question, answer.unwrap_or_default(), open.is_last))
}

/// Parses the `[QDMR] q [END-QDMR] [REGEX] r [QDMR-ANS] a` grammar from
/// `toks[0]` (which must be the `[QDMR]` token) to the end of `text`.
fn split_open(
    text: &str,
    toks: &[(usize, usize, Tok)],
    protocol: &TokenProtocol,
) -> Result<(OpenStep, Option<String>), QdmrError> {
    let mut it = toks[1..].iter().peekable();
    let q_start = toks[0].1;
    let next_start = |it: &mut std::iter::Peekable<std::slice::Iter<'_, (usize, usize, Tok)>>| {
        it.peek().map_or(text.len(), |t| t.0)
    };
    let q_end = next_start(&mut it);
    let sub_question = unescape_payload(between(text, q_start, q_end)?);
    let mut is_last = false;
    let mut regex_result = None;
    let mut answer = None;
    if let Some(&&(_, end, Tok::End)) = it.peek() {
        it.next();
        is_last = true;
        let gap_end = next_start(&mut it);
        gap(text, end, gap_end)?;
    }
    if let Some(&&(_, end, Tok::Regex)) = it.peek() {
        it.next();
        if !is_last {
            return Err(QdmrError::RegexOnNonFinalStep);
        }
        let r_end = next_start(&mut it);
        regex_result = Some(unescape_payload(between(text, end, r_end)?));
    }
    if let Some(&&(_, end, Tok::Answer)) = it.peek() {
        it.next();
        let a_end = next_start(&mut it);
        answer = Some(unescape_payload(between(text, end, a_end)?));
    }
    if let Some(&&(_, _, kind)) = it.peek() {
        return Err(QdmrError::ProtocolViolation(format!(
            "unexpected {kind:?} token after {}",
            protocol.answer_token
        )));
    }
    Ok((
        OpenStep {
            sub_question,
            is_last,
            regex_result,
        },
        answer,
    ))
}

/// Parses a rendered model input back into its encoder state and optional
/// decoder prefix. Inverse of [`render_encoder_input`] and
/// [`render_answer_input`].
pub fn parse_step_input(text: &str, protocol: &TokenProtocol) -> Result<StepInput, QdmrError> {
    let violation = |msg: &str| QdmrError::ProtocolViolation(msg.to_string());
    let body = text
        .strip_prefix(QUESTION_PREFIX)
        .ok_or_else(|| violation("input must start with `question: `"))?;
    let sep = body
        .find(CONTEXT_SEPARATOR)
        .ok_or_else(|| violation("missing context separator"))?;
    let question = unescape_payload(&body[..sep]);
    let rest = &body[sep + CONTEXT_SEPARATOR.len()..];
    let toks = locate_tokens(rest, protocol);
    let ctx_end = toks.first().map_or(rest.len(), |t| t.0);
    let context = if toks.is_empty() {
        rest
    } else {
        rest[..ctx_end]
            .strip_suffix(' ')
            .ok_or_else(|| violation("missing space before token"))?
    };
    let context = unescape_payload(context);

    // group tokens into units, each starting at a [QDMR]
    let mut starts: Vec<usize> = toks
        .iter()
        .enumerate()
        .filter(|(_, t)| t.2 == Tok::Qdmr)
        .map(|(i, _)| i)
        .collect();
    if !toks.is_empty() && starts.first() != Some(&0) {
        return Err(violation("history must start with [QDMR]"));
    }
    starts.push(toks.len());
    let mut history = Vec::new();
    let mut open = None;
    for w in starts.windows(2) {
        let unit = &toks[w[0]..w[1]];
        let unit_text = match toks.get(w[1]) {
            Some(next) => rest[..next.0]
                .strip_suffix(' ')
                .ok_or_else(|| violation("missing space before token"))?,
            None => rest,
        };
        let (step, answer) = split_open(unit_text, unit, protocol)?;
        match answer {
            Some(a) => {
                if open.is_some() {
                    return Err(violation("open step followed by further history"));
                }
                if step.is_last || step.regex_result.is_some() {
                    return Err(violation("completed history pair carries end marker"));
                }
                history.push((step.sub_question, a));
            }
            None => {
                if open.is_some() {
                    return Err(violation("more than one open step"));
                }
                open = Some(step);
            }
        }
    }
    Ok(StepInput {
        state: PromptState {
            question,
            context,
            history,
        },
        open,
    })
}

/// Produces a decomposition for a question. Stands in for a trained
/// question-decomposition parser.
pub trait DecompositionOracle: Send + Sync {
    fn decompose(&self, question: &str) -> Option<QdmrDecomposition>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> TokenProtocol {
        TokenProtocol::default()
    }

    #[test]
    fn parses_three_step_difference() {
        let d = parse_qdmr_text(
            "return year that Pegu fell; return year that the king did die; return difference of #2 and #1",
        )
        .unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.steps()[2].refs, vec![2, 1]);
        assert_eq!(d.steps()[0].refs, Vec::<usize>::new());
        assert_eq!(
            d.to_string(),
            "return year that Pegu fell; return year that the king did die; return difference of #2 and #1"
        );
    }

    #[test]
    fn single_step_and_newlines() {
        let d = parse_qdmr_text("return the answer").unwrap();
        assert_eq!(d.len(), 1);
        assert!(d.steps()[0].refs.is_empty());

        let d = parse_qdmr_text("year that Pegu fell\nreturn #1 plus one\n").unwrap();
        assert_eq!(d.texts(), vec!["return year that Pegu fell", "return #1 plus one"]);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(
            parse_qdmr_text("return #2"),
            Err(QdmrError::ForwardReference { index: 1, target: 2 })
        );
        assert_eq!(
            parse_qdmr_text("return a; return #2 again"),
            Err(QdmrError::ForwardReference { index: 2, target: 2 })
        );
        assert_eq!(parse_qdmr_text(" ; \n "), Err(QdmrError::EmptyDecomposition));
        assert!(matches!(
            parse_qdmr_text("return a; return #x"),
            Err(QdmrError::MalformedRef { index: 2, .. })
        ));
        assert!(matches!(
            parse_qdmr_text("return a; return #0"),
            Err(QdmrError::MalformedRef { index: 2, .. })
        ));
        assert_eq!(parse_qdmr_text("return"), Err(QdmrError::EmptyStep { index: 1 }));
    }

    #[test]
    fn substitution() {
        let d = parse_qdmr_text("return a; return b; return difference of #2 and #1").unwrap();
        let out = substitute_references(&d.steps()[2], &["1599", "1606"]).unwrap();
        assert_eq!(out, "return difference of 1606 and 1599");

        let out = substitute_references(&d.steps()[0], &Vec::<String>::new()).unwrap();
        assert_eq!(out, "return a");

        let d = parse_qdmr_text("return a; return b; return c; return #3").unwrap();
        assert_eq!(
            substitute_references(&d.steps()[3], &["x", "y"]),
            Err(QdmrError::MissingAnswer { target: 3, available: 2 })
        );
    }

    #[test]
    fn substitution_handles_multi_digit_refs() {
        let texts: Vec<String> = (1..=12).map(|i| format!("return s{i}")).collect();
        let mut texts = texts;
        texts.push("return #12 and #1".into());
        let d = QdmrDecomposition::from_texts(&texts).unwrap();
        let answers: Vec<String> = (1..=12).map(|i| format!("a{i}")).collect();
        assert_eq!(
            substitute_references(&d.steps()[12], &answers).unwrap(),
            "return a12 and a1"
        );
    }

    #[test]
    fn encoder_layout() {
        let s = PromptState::new("Q", "C");
        assert_eq!(render_encoder_input(&s, &p()), "question: Q context: C");
        let s = s.with_history(vec![("return X".into(), "Y".into())]);
        assert_eq!(
            render_encoder_input(&s, &p()),
            "question: Q context: C [QDMR] return X [QDMR-ANS] Y"
        );
    }

    #[test]
    fn encoder_two_pairs_token_order() {
        let s = PromptState::new("Q", "C").with_history(vec![
            ("return a".into(), "1".into()),
            ("return b".into(), "2".into()),
        ]);
        let text = render_encoder_input(&s, &p());
        let kinds: Vec<Tok> = locate_tokens(&text, &p()).into_iter().map(|t| t.2).collect();
        assert_eq!(kinds, vec![Tok::Qdmr, Tok::Answer, Tok::Qdmr, Tok::Answer]);
        let parsed = parse_step_input(&text, &p()).unwrap();
        assert_eq!(parsed.state, s);
        assert!(parsed.open.is_none());
    }

    #[test]
    fn decoder_targets() {
        assert_eq!(
            render_decoder_target("return the largest of 4 and 3", "4", true, Some("4"), &p()).unwrap(),
            "[QDMR] return the largest of 4 and 3 [END-QDMR] [REGEX] 4 [QDMR-ANS] 4"
        );
        assert_eq!(
            render_decoder_target("return year that Pegu fell", "1599", false, None, &p()).unwrap(),
            "[QDMR] return year that Pegu fell [QDMR-ANS] 1599"
        );
        assert_eq!(
            render_decoder_target("return x", "y", true, None, &p()).unwrap(),
            "[QDMR] return x [END-QDMR] [QDMR-ANS] y"
        );
        assert_eq!(
            render_decoder_target("q", "a", false, Some("4"), &p()),
            Err(QdmrError::RegexOnNonFinalStep)
        );
    }

    #[test]
    fn end_detection() {
        assert_eq!(
            detect_end("[QDMR] A [END-QDMR] [QDMR-ANS] B", &p()).unwrap(),
            ("A".into(), "B".into(), true)
        );
        assert_eq!(
            detect_end("[QDMR] A [QDMR-ANS] B", &p()).unwrap(),
            ("A".into(), "B".into(), false)
        );
        assert_eq!(
            detect_end("[QDMR] A [END-QDMR] [REGEX] 4 [QDMR-ANS] 4", &p()).unwrap(),
            ("A".into(), "4".into(), true)
        );
        assert!(matches!(detect_end("A B", &p()), Err(QdmrError::ProtocolViolation(_))));
        assert!(matches!(
            detect_end("[QDMR] A [QDMR] B [QDMR-ANS] C", &p()),
            Err(QdmrError::ProtocolViolation(_))
        ));
        assert!(matches!(
            detect_end("[QDMR] A [QDMR-ANS] B [QDMR-ANS] C", &p()),
            Err(QdmrError::ProtocolViolation(_))
        ));
    }

    #[test]
    fn answer_input_round_trip() {
        let state = PromptState::new("How many?", "A scored 3.")
            .with_history(vec![("return a".into(), "3".into())]);
        let open = OpenStep {
            sub_question: "return difference of #1 and 2".into(),
            is_last: true,
            regex_result: Some("1".into()),
        };
        let text = render_answer_input(&state, &open, &p()).unwrap();
        assert_eq!(
            text,
            "question: How many? context: A scored 3. [QDMR] return a [QDMR-ANS] 3 \
             [QDMR] return difference of #1 and 2 [END-QDMR] [REGEX] 1"
        );
        let parsed = parse_step_input(&text, &p()).unwrap();
        assert_eq!(parsed.state, state);
        assert_eq!(parsed.open, Some(open));
    }

    #[test]
    fn payload_tokens_are_escaped() {
        let s = PromptState::new("what is [QDMR]? context: none", "x [QDMR-ANS] y")
            .with_history(vec![("return [END-QDMR]".into(), "[REGEX]".into())]);
        let text = render_encoder_input(&s, &p());
        assert_eq!(locate_tokens(&text, &p()).len(), 2);
        assert_eq!(parse_step_input(&text, &p()).unwrap().state, s);
    }

    #[test]
    fn budget_truncates_context_tail_only() {
        let s = PromptState::new("Q", "one two three four five six")
            .with_history(vec![("return a".into(), "b".into())]);
        let full = render_encoder_input_budgeted(&s, &p(), None);
        assert_eq!(full.split_whitespace().count(), 14);
        let cut = render_encoder_input_budgeted(&s, &p(), Some(11));
        assert_eq!(cut, "question: Q context: one two three [QDMR] return a [QDMR-ANS] b");
        let roomy = render_encoder_input_budgeted(&s, &p(), Some(100));
        assert_eq!(roomy, full);
    }

    fn payload() -> impl Strategy<Value = String> {
        prop_oneof![
            "[a-z #0-9]{0,12}",
            proptest::collection::vec(
                prop_oneof![
                    Just("[QDMR]".to_string()),
                    Just("[QDMR-ANS]".to_string()),
                    Just("[END-QDMR]".to_string()),
                    Just("[REGEX]".to_string()),
                    Just("\u{200B}".to_string()),
                    Just("context:".to_string()),
                    Just(" context: ".to_string()),
                    Just(" ".to_string()),
                    "[a-z\\[\\]]{1,4}",
                ],
                0..6
            )
            .prop_map(|v| v.concat()),
        ]
    }

    proptest! {
        #[test]
        fn encoder_input_is_injective(
            q in payload(),
            c in payload(),
            hist in proptest::collection::vec((payload(), payload()), 0..4),
        ) {
            let state = PromptState { question: q, context: c, history: hist };
            let text = render_encoder_input(&state, &p());
            let back = parse_step_input(&text, &p()).unwrap();
            prop_assert_eq!(back.state, state);
            prop_assert!(back.open.is_none());
        }

        #[test]
        fn decoder_target_round_trip(q in payload(), a in payload(), last in any::<bool>()) {
            let text = render_decoder_target(&q, &a, last, None, &p()).unwrap();
            prop_assert_eq!(detect_end(&text, &p()).unwrap(), (q, a, last));
        }

        #[test]
        fn resolved_substitution_leaves_no_refs(
            n in 2usize..6,
            answers in proptest::collection::vec("[a-z0-9 ]{1,6}", 6),
        ) {
            let mut texts: Vec<String> = (1..n).map(|i| format!("return s{i}")).collect();
            let refs: Vec<String> = (1..n).rev().map(|k| format!("#{k}")).collect();
            texts.push(format!("return combine {}", refs.join(" and ")));
            let d = QdmrDecomposition::from_texts(&texts).unwrap();
            let out = substitute_references(&d.steps()[n - 1], &answers[..n - 1]).unwrap();
            let has_ref = out.as_bytes().windows(2).any(|w| w[0] == b'#' && w[1].is_ascii_digit());
            prop_assert!(!has_ref);
        }
    }
}
