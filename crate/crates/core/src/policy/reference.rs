//! Log-linear reference policy over a closed candidate space.
//!
//! Sub-question candidates are the templated steps of the decomposition the
//! proposer returns for the question; sub-answer candidates are the context
//! spans of up to `span_cap` tokens (within one sentence), the numbers found
//! in the context, and the regex result carried by the input. Each step is a
//! softmax over `θ·φ / temperature`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::{PolicyError, PolicyModel, ScoredCandidate, TrainablePolicy};
use crate::numexec::{render_number, scan_numbers};
use crate::qdmr::{
    parse_step_input, render_question_target, substitute_placeholders, DecompositionOracle, OpenStep,
    PromptState, QdmrDecomposition, TokenProtocol,
};
use crate::text::{clean_word, content_words, is_stopword, normalize_answer};

pub const QUESTION_FEATURES: [&str; 5] = ["q.next", "q.repeat", "q.skip", "q.end", "q.end_on_next"];

pub const ANSWER_FEATURES: [&str; 16] = [
    "a.len",
    "a.single",
    "a.number",
    "a.capitalized",
    "a.sent_overlap_subq",
    "a.in_subq",
    "a.in_question",
    "a.in_history",
    "a.regex_match",
    "a.sent_overlap_question",
    "a.sentence_final",
    "a.sentence_initial",
    "a.external",
    "a.type_match",
    "a.position",
    "a.empty",
];

const QF: usize = QUESTION_FEATURES.len();
const AF: usize = ANSWER_FEATURES.len();
const DIM: usize = QF + AF;

pub const SENTENCE_ENCODING_DIM: usize = 6;
pub const TOKEN_ENCODING_DIM: usize = 8;

const CACHE_LIMIT: usize = 8192;

/// Words in a sub-question that signal a numeric answer.
const QUANTITY_CUES: &[&str] = &[
    "points", "many", "much", "number", "difference", "sum", "total", "highest", "lowest",
    "higher", "lower", "largest", "smallest", "year", "years", "more", "fewer", "score",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    pub span_cap: usize,
    pub temperature: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            span_cap: 8,
            temperature: 1.0,
        }
    }
}

#[derive(Debug)]
struct AnswerCandidate {
    target: String,
    key: String,
    sentence: Option<usize>,
    word_ids: Vec<u32>,
    len_norm: f64,
    single: bool,
    number: bool,
    capitalized: bool,
    sentence_final: bool,
    sentence_initial: bool,
    external: bool,
    position: f64,
}

/// Tokenization, sentence split and candidate spans of one context.
#[derive(Debug)]
struct ContextIndex {
    tokens: Vec<String>,
    token_ids: Vec<Option<u32>>,
    sentence_of: Vec<usize>,
    sentences: Vec<(usize, usize)>,
    sentence_words: Vec<Vec<u32>>,
    interner: HashMap<String, u32>,
    candidates: Vec<AnswerCandidate>,
    key_index: HashMap<String, usize>,
}

fn strip_edges(s: &str) -> &str {
    s.trim_matches(|c: char| matches!(c, '.' | ',' | ';' | ':' | '!' | '?' | '"' | '\'' | '(' | ')' | '[' | ']' | '{' | '}'))
}

fn ends_sentence(token: &str) -> bool {
    let t = token.trim_end_matches(['"', '\'', ')', ']']);
    t.ends_with(['.', '!', '?'])
}

fn is_number_text(s: &str) -> bool {
    let lits = scan_numbers(s);
    lits.len() == 1 && lits[0].start == 0 && lits[0].end == s.len()
}

impl ContextIndex {
    fn build(context: &str, span_cap: usize) -> Self {
        let tokens: Vec<String> = context.split_whitespace().map(str::to_string).collect();
        let mut interner = HashMap::new();
        let token_ids: Vec<Option<u32>> = tokens
            .iter()
            .map(|t| {
                let w = clean_word(t);
                if w.is_empty() {
                    None
                } else {
                    let next = interner.len() as u32;
                    Some(*interner.entry(w).or_insert(next))
                }
            })
            .collect();

        let mut sentences = Vec::new();
        let mut sentence_of = Vec::with_capacity(tokens.len());
        let mut start = 0;
        for (i, t) in tokens.iter().enumerate() {
            sentence_of.push(sentences.len());
            if ends_sentence(t) || i + 1 == tokens.len() {
                sentences.push((start, i + 1));
                start = i + 1;
            }
        }
        let sentence_words: Vec<Vec<u32>> = sentences
            .iter()
            .map(|&(s, e)| {
                let mut ids: Vec<u32> = token_ids[s..e].iter().flatten().copied().collect();
                ids.sort_unstable();
                ids.dedup();
                ids
            })
            .collect();

        let mut index = ContextIndex {
            tokens,
            token_ids,
            sentence_of,
            sentences,
            sentence_words,
            interner,
            candidates: Vec::new(),
            key_index: HashMap::new(),
        };
        index.build_candidates(context, span_cap);
        index
    }

    fn build_candidates(&mut self, context: &str, span_cap: usize) {
        let n_tokens = self.tokens.len().max(1) as f64;
        for (si, &(s, e)) in self.sentences.iter().enumerate() {
            for start in s..e {
                for len in 1..=span_cap.min(e - start) {
                    let joined = self.tokens[start..start + len].join(" ");
                    let surface = strip_edges(&joined).to_string();
                    let key = normalize_answer(&surface);
                    if self.key_index.contains_key(&key) {
                        continue;
                    }
                    let mut word_ids: Vec<u32> = self.token_ids[start..start + len]
                        .iter()
                        .flatten()
                        .copied()
                        .collect();
                    word_ids.sort_unstable();
                    word_ids.dedup();
                    let cand = AnswerCandidate {
                        number: is_number_text(&surface),
                        capitalized: surface.chars().next().is_some_and(char::is_uppercase),
                        target: surface,
                        key: key.clone(),
                        sentence: Some(si),
                        word_ids,
                        len_norm: len as f64 / span_cap as f64,
                        single: len == 1,
                        sentence_final: start + len == e,
                        sentence_initial: start == s,
                        external: false,
                        position: start as f64 / n_tokens,
                    };
                    self.key_index.insert(key, self.candidates.len());
                    self.candidates.push(cand);
                }
            }
        }
        for lit in scan_numbers(context) {
            let surface = render_number(&lit.value);
            let key = normalize_answer(&surface);
            if self.key_index.contains_key(&key) {
                continue;
            }
            let token = context[..lit.start].split_whitespace().count();
            self.key_index.insert(key.clone(), self.candidates.len());
            self.candidates.push(AnswerCandidate {
                target: surface,
                key,
                sentence: self.sentence_of.get(token).copied(),
                word_ids: Vec::new(),
                len_norm: 1.0 / span_cap as f64,
                single: true,
                number: true,
                capitalized: false,
                sentence_final: false,
                sentence_initial: false,
                external: true,
                position: token as f64 / n_tokens,
            });
        }
    }

    fn lookup_ids(&self, words: &[String]) -> Vec<u32> {
        words.iter().filter_map(|w| self.interner.get(w).copied()).collect()
    }
}

#[derive(Debug)]
struct QuestionCandidate {
    target: String,
    index: usize,
    is_last: bool,
}

/// One step's normalized distribution.
struct StepDistribution {
    targets: Vec<String>,
    keys: Vec<String>,
    /// Row-major `targets.len() × DIM`.
    features: Vec<f64>,
    logprobs: Vec<f64>,
    answer_mode: bool,
}

impl StepDistribution {
    fn find(&self, target: &str) -> Option<usize> {
        if self.answer_mode {
            let key = normalize_answer(target);
            self.keys.iter().position(|k| *k == key)
        } else {
            self.targets.iter().position(|t| t == target)
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * DIM..(i + 1) * DIM]
    }

    /// `E[φ]` under the distribution.
    fn expected_features(&self) -> [f64; DIM] {
        let mut mean = [0.0; DIM];
        for (i, lp) in self.logprobs.iter().enumerate() {
            let p = lp.exp();
            for (m, f) in mean.iter_mut().zip(self.row(i)) {
                *m += p * f;
            }
        }
        mean
    }
}

pub struct ReferencePolicy {
    theta: Vec<f64>,
    config: ReferenceConfig,
    protocol: TokenProtocol,
    proposer: Arc<dyn DecompositionOracle>,
    contexts: Mutex<HashMap<String, Arc<ContextIndex>>>,
    questions: Mutex<HashMap<String, Arc<Vec<QuestionCandidate>>>>,
}

impl std::fmt::Debug for ReferencePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReferencePolicy")
            .field("theta", &self.theta)
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Clone for ReferencePolicy {
    fn clone(&self) -> Self {
        Self {
            theta: self.theta.clone(),
            config: self.config.clone(),
            protocol: self.protocol.clone(),
            proposer: Arc::clone(&self.proposer),
            contexts: Mutex::default(),
            questions: Mutex::default(),
        }
    }
}

impl ReferencePolicy {
    pub fn new(proposer: Arc<dyn DecompositionOracle>, config: ReferenceConfig) -> Self {
        assert!(config.span_cap >= 1, "span cap must be positive");
        assert!(config.temperature > 0.0, "temperature must be positive");
        Self {
            theta: vec![0.0; DIM],
            config,
            protocol: TokenProtocol::default(),
            proposer,
            contexts: Mutex::default(),
            questions: Mutex::default(),
        }
    }

    pub fn with_parameters(mut self, theta: Vec<f64>) -> Result<Self, PolicyError> {
        if theta.len() != DIM {
            return Err(PolicyError::IncompatibleCheckpoint(format!(
                "expected {DIM} parameters, got {}",
                theta.len()
            )));
        }
        self.theta = theta;
        Ok(self)
    }

    pub fn dim() -> usize {
        DIM
    }

    pub fn feature_names() -> Vec<&'static str> {
        QUESTION_FEATURES.iter().chain(ANSWER_FEATURES.iter()).copied().collect()
    }

    pub fn config(&self) -> &ReferenceConfig {
        &self.config
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn set_proposer(&mut self, proposer: Arc<dyn DecompositionOracle>) {
        self.proposer = proposer;
        self.questions.lock().expect("cache lock").clear();
    }

    /// Index of a named feature in the parameter vector.
    pub fn feature_index(name: &str) -> Option<usize> {
        Self::feature_names().iter().position(|n| *n == name)
    }

    fn context_index(&self, context: &str) -> Arc<ContextIndex> {
        let mut cache = self.contexts.lock().expect("cache lock");
        if let Some(idx) = cache.get(context) {
            return Arc::clone(idx);
        }
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        let idx = Arc::new(ContextIndex::build(context, self.config.span_cap));
        cache.insert(context.to_string(), Arc::clone(&idx));
        idx
    }

    fn question_candidates(&self, question: &str) -> Result<Arc<Vec<QuestionCandidate>>, PolicyError> {
        if let Some(c) = self.questions.lock().expect("cache lock").get(question) {
            return Ok(Arc::clone(c));
        }
        let cands = match self.proposer.decompose(question) {
            Some(d) => question_targets(&d, &self.protocol)?,
            None => Vec::new(),
        };
        let cands = Arc::new(cands);
        let mut cache = self.questions.lock().expect("cache lock");
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(question.to_string(), Arc::clone(&cands));
        Ok(cands)
    }

    fn distribution(&self, input: &str) -> Result<StepDistribution, PolicyError> {
        let parsed = parse_step_input(input, &self.protocol)?;
        let mut dist = match &parsed.open {
            None => self.question_distribution(&parsed.state)?,
            Some(open) => self.answer_distribution(&parsed.state, open),
        };
        self.normalize(&mut dist);
        Ok(dist)
    }

    fn question_distribution(&self, state: &PromptState) -> Result<StepDistribution, PolicyError> {
        let cands = self.question_candidates(&state.question)?;
        let next = state.history.len() + 1;
        let mut features = vec![0.0; cands.len() * DIM];
        for (i, c) in cands.iter().enumerate() {
            let row = &mut features[i * DIM..i * DIM + QF];
            row[0] = f64::from(c.index == next);
            row[1] = f64::from(c.index < next);
            row[2] = f64::from(c.index > next);
            row[3] = f64::from(c.is_last);
            row[4] = f64::from(c.is_last && c.index == next);
        }
        Ok(StepDistribution {
            targets: cands.iter().map(|c| c.target.clone()).collect(),
            keys: Vec::new(),
            features,
            logprobs: Vec::new(),
            answer_mode: false,
        })
    }

    fn answer_distribution(&self, state: &PromptState, open: &OpenStep) -> StepDistribution {
        let ctx = self.context_index(&state.context);
        let answers: Vec<&str> = state.history.iter().map(|(_, a)| a.as_str()).collect();
        let sub_q = substitute_placeholders(&open.sub_question, &answers);
        let subq_words = content_words(&sub_q);
        let q_words = content_words(&state.question);
        let history_keys: Vec<String> = answers.iter().map(|a| normalize_answer(a)).collect();
        let regex_key = open.regex_result.as_deref().map(normalize_answer);
        let numeric_cue = subq_words.iter().any(|w| QUANTITY_CUES.contains(&w.as_str()));

        let n_words = ctx.interner.len();
        let mut in_subq = vec![false; n_words];
        for id in ctx.lookup_ids(&subq_words) {
            in_subq[id as usize] = true;
        }
        let mut in_q = vec![false; n_words];
        for id in ctx.lookup_ids(&q_words) {
            in_q[id as usize] = true;
        }
        let overlap = |mask: &[bool], ids: &[u32]| ids.iter().filter(|&&i| mask[i as usize]).count();
        let sent_subq: Vec<usize> = ctx.sentence_words.iter().map(|w| overlap(&in_subq, w)).collect();
        let sent_q: Vec<usize> = ctx.sentence_words.iter().map(|w| overlap(&in_q, w)).collect();
        let subq_den = subq_words.len().max(1) as f64;
        let q_den = q_words.len().max(1) as f64;

        let mut targets = Vec::with_capacity(ctx.candidates.len() + 1);
        let mut keys = Vec::with_capacity(ctx.candidates.len() + 1);
        let mut features = vec![0.0; (ctx.candidates.len() + 1) * DIM];
        let mut regex_seen = false;
        for (i, c) in ctx.candidates.iter().enumerate() {
            let row = &mut features[i * DIM + QF..(i + 1) * DIM];
            let cs = overlap(&in_subq, &c.word_ids);
            let cq = overlap(&in_q, &c.word_ids);
            let cw = c.word_ids.len().max(1) as f64;
            let is_regex = regex_key.as_deref() == Some(c.key.as_str());
            regex_seen |= is_regex;
            row[0] = c.len_norm;
            row[1] = f64::from(c.single);
            row[2] = f64::from(c.number);
            row[3] = f64::from(c.capitalized);
            row[5] = cs as f64 / cw;
            row[6] = cq as f64 / cw;
            if let Some(s) = c.sentence {
                row[4] = (sent_subq[s] - cs.min(sent_subq[s])) as f64 / subq_den;
                row[9] = (sent_q[s] - cq.min(sent_q[s])) as f64 / q_den;
            }
            row[7] = f64::from(history_keys.contains(&c.key));
            row[8] = f64::from(is_regex);
            row[10] = f64::from(c.sentence_final);
            row[11] = f64::from(c.sentence_initial);
            row[12] = f64::from(c.external);
            row[13] = f64::from(c.number == numeric_cue);
            row[14] = c.position;
            row[15] = f64::from(c.key.is_empty());
            targets.push(c.target.clone());
            keys.push(c.key.clone());
        }
        match (&open.regex_result, regex_key) {
            (Some(result), Some(key)) if !regex_seen => {
                let i = targets.len();
                let row = &mut features[i * DIM + QF..(i + 1) * DIM];
                let number = is_number_text(result);
                row[0] = 1.0 / self.config.span_cap as f64;
                row[1] = f64::from(!result.trim().contains(char::is_whitespace));
                row[2] = f64::from(number);
                row[7] = f64::from(history_keys.contains(&key));
                row[8] = 1.0;
                row[12] = 1.0;
                row[13] = f64::from(number == numeric_cue);
                row[15] = f64::from(key.is_empty());
                targets.push(result.clone());
                keys.push(key);
            }
            _ => features.truncate(targets.len() * DIM),
        }
        StepDistribution {
            targets,
            keys,
            features,
            logprobs: Vec::new(),
            answer_mode: true,
        }
    }

    fn normalize(&self, dist: &mut StepDistribution) {
        let t = self.config.temperature;
        let logits: Vec<f64> = (0..dist.targets.len())
            .map(|i| dist.row(i).iter().zip(&self.theta).map(|(f, w)| f * w).sum::<f64>() / t)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        dist.logprobs = logits.iter().map(|l| l - lse).collect();
    }

    /// Per-sentence encodings of the context for the supporting-fact head.
    pub fn encode_sentences(&self, input: &str) -> Result<Vec<Vec<f64>>, PolicyError> {
        let parsed = parse_step_input(input, &self.protocol)?;
        let state = &parsed.state;
        let ctx = self.context_index(&state.context);
        let q_ids = ctx.lookup_ids(&content_words(&state.question));
        let answers: Vec<&str> = state.history.iter().map(|(_, a)| a.as_str()).collect();
        let last_subq = state
            .history
            .last()
            .map(|(q, _)| substitute_placeholders(q, &answers))
            .unwrap_or_default();
        let sq_words = content_words(&last_subq);
        let sq_ids = ctx.lookup_ids(&sq_words);
        let answer_ids: Vec<u32> = answers
            .iter()
            .flat_map(|a| a.split_whitespace().map(clean_word).collect::<Vec<_>>())
            .filter(|w| !is_stopword(w))
            .filter_map(|w| ctx.interner.get(&w).copied())
            .collect();
        let n = ctx.sentences.len().max(1) as f64;
        Ok(ctx
            .sentence_words
            .iter()
            .enumerate()
            .map(|(si, words)| {
                let hit = |ids: &[u32]| ids.iter().filter(|i| words.binary_search(i).is_ok()).count();
                let (s, e) = ctx.sentences[si];
                vec![
                    hit(&q_ids) as f64 / q_ids.len().max(1) as f64,
                    hit(&sq_ids) as f64 / sq_words.len().max(1) as f64,
                    f64::from(hit(&answer_ids) > 0),
                    f64::from(ctx.tokens[s..e].iter().any(|t| is_number_text(strip_edges(t)))),
                    si as f64 / n,
                    1.0,
                ]
            })
            .collect())
    }

    /// Per-token encodings of the context for the span head.
    pub fn encode_tokens(&self, input: &str) -> Result<Vec<Vec<f64>>, PolicyError> {
        let parsed = parse_step_input(input, &self.protocol)?;
        let state = &parsed.state;
        let ctx = self.context_index(&state.context);
        let q_ids = ctx.lookup_ids(&content_words(&state.question));
        let answer_ids: Vec<u32> = state
            .history
            .iter()
            .flat_map(|(_, a)| a.split_whitespace().map(clean_word).collect::<Vec<_>>())
            .filter_map(|w| ctx.interner.get(&w).copied())
            .collect();
        let sent_q: Vec<f64> = ctx
            .sentence_words
            .iter()
            .map(|w| {
                q_ids.iter().filter(|i| w.binary_search(i).is_ok()).count() as f64
                    / q_ids.len().max(1) as f64
            })
            .collect();
        Ok(ctx
            .tokens
            .iter()
            .enumerate()
            .map(|(i, tok)| {
                let id = ctx.token_ids[i];
                let s = ctx.sentence_of[i];
                let (start, end) = ctx.sentences[s];
                vec![
                    f64::from(id.is_some_and(|id| q_ids.contains(&id))),
                    f64::from(id.is_some_and(|id| answer_ids.contains(&id))),
                    f64::from(is_number_text(strip_edges(tok))),
                    f64::from(tok.chars().next().is_some_and(char::is_uppercase)),
                    f64::from(i == start),
                    f64::from(i + 1 == end),
                    sent_q[s],
                    1.0,
                ]
            })
            .collect())
    }

    /// Number of sentences and tokens the encoders produce for a context.
    pub fn segmentation(&self, context: &str) -> (usize, usize) {
        let ctx = self.context_index(context);
        (ctx.sentences.len(), ctx.tokens.len())
    }
}

fn question_targets(
    d: &QdmrDecomposition,
    protocol: &TokenProtocol,
) -> Result<Vec<QuestionCandidate>, PolicyError> {
    let n = d.len();
    d.steps()
        .iter()
        .map(|s| {
            Ok(QuestionCandidate {
                target: render_question_target(&s.text, s.index == n, None, protocol)?,
                index: s.index,
                is_last: s.index == n,
            })
        })
        .collect()
}

impl PolicyModel for ReferencePolicy {
    fn score_target(&self, input: &str, target: &str) -> Result<f64, PolicyError> {
        let dist = self.distribution(input)?;
        dist.find(target)
            .map(|i| dist.logprobs[i])
            .ok_or_else(|| PolicyError::UnrepresentableTarget {
                target: target.to_string(),
            })
    }

    fn top_candidates(&self, input: &str, budget: usize) -> Result<Vec<ScoredCandidate>, PolicyError> {
        if budget == 0 {
            return Err(PolicyError::ZeroBudget);
        }
        let dist = self.distribution(input)?;
        let mut order: Vec<usize> = (0..dist.targets.len()).collect();
        order.sort_by(|&a, &b| dist.logprobs[b].total_cmp(&dist.logprobs[a]).then(a.cmp(&b)));
        Ok(order
            .into_iter()
            .take(budget)
            .map(|i| ScoredCandidate {
                target: dist.targets[i].clone(),
                logprob: dist.logprobs[i],
            })
            .collect())
    }

    fn parameters(&self) -> Option<&[f64]> {
        Some(&self.theta)
    }
}

impl TrainablePolicy for ReferencePolicy {
    fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn grad_logprob(&self, input: &str, target: &str) -> Result<Vec<f64>, PolicyError> {
        let mut grad = vec![0.0; DIM];
        self.accumulate_nll(input, &[(target, -1.0)], &mut grad)?;
        Ok(grad)
    }

    fn accumulate_nll(
        &self,
        input: &str,
        targets: &[(&str, f64)],
        grad: &mut [f64],
    ) -> Result<Vec<f64>, PolicyError> {
        let dist = self.distribution(input)?;
        let t = self.config.temperature;
        let mean = dist.expected_features();
        let mut nlls = Vec::with_capacity(targets.len());
        let mut total_weight = 0.0;
        for &(target, weight) in targets {
            let i = dist.find(target).ok_or_else(|| PolicyError::UnrepresentableTarget {
                target: target.to_string(),
            })?;
            nlls.push(-dist.logprobs[i]);
            total_weight += weight;
            for (g, f) in grad.iter_mut().zip(dist.row(i)) {
                *g -= weight * f / t;
            }
        }
        for (g, m) in grad.iter_mut().zip(mean) {
            *g += total_weight * m / t;
        }
        Ok(nlls)
    }
}
