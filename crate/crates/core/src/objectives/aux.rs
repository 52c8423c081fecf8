//! Supporting-fact and span heads over the policy's sentence and token
//! encodings.
//!
//! SF: two-layer feed-forward net (tanh hidden layer) with a sigmoid output
//! per sentence. SP: one linear layer with a softmax over B/I/O tags per
//! token. Both are trained with cross-entropy, summed over every model run
//! of an example.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{PolicyError, ReferencePolicy, SENTENCE_ENCODING_DIM, TOKEN_ENCODING_DIM};

pub const SF_HIDDEN: usize = 8;
/// Tags: 0 = outside, 1 = begin, 2 = inside.
pub const SP_CLASSES: usize = 3;

const S: usize = SENTENCE_ENCODING_DIM;
const T: usize = TOKEN_ENCODING_DIM;
const H: usize = SF_HIDDEN;

// offsets into the flat parameter vector
const W1: usize = 0;
const B1: usize = W1 + H * S;
const W2: usize = B1 + H;
const B2: usize = W2 + H;
const SPW: usize = B2 + 1;
const SPB: usize = SPW + SP_CLASSES * T;
const LEN: usize = SPB + SP_CLASSES;

#[derive(Debug, Error)]
pub enum AuxError {
    #[error("{kind} labels have length {found}, expected {expected}")]
    Misaligned {
        kind: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("span label {0} is not a valid tag")]
    BadTag(u8),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxTargets {
    pub supporting_fact_labels: Option<Vec<bool>>,
    pub span_labels: Option<Vec<u8>>,
}

impl AuxTargets {
    pub fn is_empty(&self) -> bool {
        self.supporting_fact_labels.is_none() && self.span_labels.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxHeads {
    params: Vec<f64>,
}

impl AuxHeads {
    pub fn zeros() -> Self {
        Self { params: vec![0.0; LEN] }
    }

    /// Small uniform weights in (−0.1, 0.1) drawn from `seed`.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            params: (0..LEN).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        }
    }

    pub fn dim() -> usize {
        LEN
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Named parameter blocks, as stored in checkpoints.
    pub fn named(&self) -> Vec<(&'static str, &[f64])> {
        Self::layout()
            .into_iter()
            .map(|(name, start, end)| (name, &self.params[start..end]))
            .collect()
    }

    pub fn from_named(get: impl Fn(&str) -> Option<Vec<f64>>) -> Option<Self> {
        let mut params = vec![0.0; LEN];
        for (name, start, end) in Self::layout() {
            let block = get(name)?;
            if block.len() != end - start {
                return None;
            }
            params[start..end].copy_from_slice(&block);
        }
        Some(Self { params })
    }

    fn layout() -> [(&'static str, usize, usize); 6] {
        [
            ("aux.sf.w1", W1, B1),
            ("aux.sf.b1", B1, W2),
            ("aux.sf.w2", W2, B2),
            ("aux.sf.b2", B2, SPW),
            ("aux.sp.w", SPW, SPB),
            ("aux.sp.b", SPB, LEN),
        ]
    }

    /// Binary cross-entropy of one sentence; gradient added into `grad`.
    fn sf_loss(&self, x: &[f64], label: bool, grad: &mut [f64]) -> f64 {
        let p = &self.params;
        let mut hidden = [0.0; H];
        for (h, out) in hidden.iter_mut().enumerate() {
            let row = &p[W1 + h * S..W1 + (h + 1) * S];
            *out = (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + p[B1 + h]).tanh();
        }
        let z: f64 = hidden.iter().zip(&p[W2..B2]).map(|(h, w)| h * w).sum::<f64>() + p[B2];
        let y = f64::from(u8::from(label));
        let loss = z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
        let dz = sigmoid(z) - y;
        for h in 0..H {
            grad[W2 + h] += dz * hidden[h];
            let dpre = dz * p[W2 + h] * (1.0 - hidden[h] * hidden[h]);
            grad[B1 + h] += dpre;
            for (s, v) in x.iter().enumerate() {
                grad[W1 + h * S + s] += dpre * v;
            }
        }
        grad[B2] += dz;
        loss
    }

    /// Categorical cross-entropy of one token's tag.
    fn sp_loss(&self, x: &[f64], tag: usize, grad: &mut [f64]) -> f64 {
        let p = &self.params;
        let mut logits = [0.0; SP_CLASSES];
        for (c, l) in logits.iter_mut().enumerate() {
            let row = &p[SPW + c * T..SPW + (c + 1) * T];
            *l = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + p[SPB + c];
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        for c in 0..SP_CLASSES {
            let d = (logits[c] - lse).exp() - f64::from(u8::from(c == tag));
            grad[SPB + c] += d;
            for (t, v) in x.iter().enumerate() {
                grad[SPW + c * T + t] += d * v;
            }
        }
        lse - logits[tag]
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sum of SF and SP cross-entropies over every run input; gradient with
/// respect to the head parameters is added into `grad`. Absent labels
/// contribute nothing.
pub fn auxiliary_losses(
    heads: &AuxHeads,
    encoder: &ReferencePolicy,
    run_inputs: &[String],
    targets: &AuxTargets,
    grad: &mut [f64],
) -> Result<f64, AuxError> {
    let mut total = 0.0;
    if let Some(tags) = &targets.span_labels {
        if let Some(&bad) = tags.iter().find(|&&t| usize::from(t) >= SP_CLASSES) {
            return Err(AuxError::BadTag(bad));
        }
    }
    for input in run_inputs {
        if let Some(labels) = &targets.supporting_fact_labels {
            let sentences = encoder.encode_sentences(input)?;
            if sentences.len() != labels.len() {
                return Err(AuxError::Misaligned {
                    kind: "supporting-fact",
                    expected: sentences.len(),
                    found: labels.len(),
                });
            }
            for (x, &y) in sentences.iter().zip(labels) {
                total += heads.sf_loss(x, y, grad);
            }
        }
        if let Some(tags) = &targets.span_labels {
            let tokens = encoder.encode_tokens(input)?;
            if tokens.len() != tags.len() {
                return Err(AuxError::Misaligned {
                    kind: "span",
                    expected: tokens.len(),
                    found: tags.len(),
                });
            }
            for (x, &t) in tokens.iter().zip(tags) {
                total += heads.sp_loss(x, usize::from(t), grad);
            }
        }
    }
    Ok(total)
}
