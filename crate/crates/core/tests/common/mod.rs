#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use subq::harness::{generate_synthetic, DecompositionTable, ExampleRecord, Recipe, RuleOracle};
use subq::policy::{PolicyError, PolicyModel, ReferenceConfig, ReferencePolicy, ScoredCandidate};

pub const VOCAB: [&str; 5] = ["alpha", "beta", "gamma", "delta", "omega"];

pub fn unit_hash(parts: &[&dyn HashPart]) -> f64 {
    let mut h = DefaultHasher::new();
    for p in parts {
        p.feed(&mut h);
    }
    (h.finish() >> 11) as f64 / (1u64 << 53) as f64
}

pub trait HashPart {
    fn feed(&self, h: &mut DefaultHasher);
}

impl<T: Hash> HashPart for T {
    fn feed(&self, h: &mut DefaultHasher) {
        self.hash(h);
    }
}

/// Closed-vocabulary policy with pseudo-random logits: every input sees the
/// first 1..=5 vocabulary words; targets outside that set get a fixed
/// negative score so gold sub-questions stay scorable.
#[derive(Debug, Clone, Copy)]
pub struct HashPolicy {
    pub seed: u64,
}

impl HashPolicy {
    fn candidates(&self, input: &str) -> Vec<(&'static str, f64)> {
        let n = 1 + (unit_hash(&[&self.seed, &input, &"n"]) * 5.0) as usize;
        let logits: Vec<f64> = VOCAB[..n]
            .iter()
            .map(|w| 6.0 * unit_hash(&[&self.seed, &input, w]) - 3.0)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        VOCAB[..n].iter().copied().zip(logits.into_iter().map(|l| l - lse)).collect()
    }
}

impl PolicyModel for HashPolicy {
    fn score_target(&self, input: &str, target: &str) -> Result<f64, PolicyError> {
        Ok(match self.candidates(input).iter().find(|(w, _)| *w == target) {
            Some((_, lp)) => *lp,
            None => -1.0 - 2.0 * unit_hash(&[&self.seed, &input, &target]),
        })
    }

    fn top_candidates(&self, input: &str, budget: usize) -> Result<Vec<ScoredCandidate>, PolicyError> {
        if budget == 0 {
            return Err(PolicyError::ZeroBudget);
        }
        let mut c = self.candidates(input);
        c.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(c.into_iter()
            .take(budget)
            .map(|(w, lp)| ScoredCandidate {
                target: w.to_string(),
                logprob: lp,
            })
            .collect())
    }
}

pub fn records(seed: u64, count: usize, recipe: Recipe) -> Vec<ExampleRecord> {
    generate_synthetic(seed, count, recipe).expect("generator")
}

pub fn policy_for(records: &[ExampleRecord]) -> ReferencePolicy {
    let table = DecompositionTable::from_records(records, Some(Arc::new(RuleOracle::default())));
    ReferencePolicy::new(Arc::new(table), ReferenceConfig::default())
}

/// Token-F1 written independently of the crate: lowercase, strip ASCII
/// punctuation, drop articles, multiset overlap.
pub fn reference_f1(predicted: &str, gold: &str) -> f64 {
    fn toks(s: &str) -> Vec<String> {
        let cleaned: String = s
            .chars()
            .flat_map(char::to_lowercase)
            .filter(|c| !c.is_ascii_punctuation())
            .collect();
        cleaned
            .split_whitespace()
            .filter(|w| !["a", "an", "the"].contains(w))
            .map(String::from)
            .collect()
    }
    let (p, g) = (toks(predicted), toks(gold));
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut pool = g.clone();
    let mut common = 0usize;
    for t in &p {
        if let Some(i) = pool.iter().position(|x| x == t) {
            pool.swap_remove(i);
            common += 1;
        }
    }
    // 2PR/(P+R) with P = c/|p|, R = c/|g| reduces to 2c/(|p|+|g|)
    2.0 * common as f64 / (p.len() + g.len()) as f64
}

/// Exact rationals over i128 for checking the executor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Q {
    pub num: i128,
    pub den: i128,
}

fn gcd(a: i128, b: i128) -> i128 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Q {
    pub fn new(num: i128, den: i128) -> Self {
        assert!(den != 0);
        let s = if den < 0 { -1 } else { 1 };
        let g = gcd(num, den).max(1);
        Q {
            num: s * num / g,
            den: s * den / g,
        }
    }
    pub fn add(self, o: Q) -> Q {
        Q::new(self.num * o.den + o.num * self.den, self.den * o.den)
    }
    pub fn sub(self, o: Q) -> Q {
        Q::new(self.num * o.den - o.num * self.den, self.den * o.den)
    }
    pub fn mul(self, o: Q) -> Q {
        Q::new(self.num * o.num, self.den * o.den)
    }
    pub fn div(self, o: Q) -> Option<Q> {
        (o.num != 0).then(|| Q::new(self.num * o.den, self.den * o.num))
    }
    pub fn lt(self, o: Q) -> bool {
        self.num * o.den < o.num * self.den
    }

    /// Integer, exact terminating decimal, or rounded half away from zero
    /// to six fraction digits.
    pub fn render(self) -> String {
        if self.den == 1 {
            return self.num.to_string();
        }
        let mut d = self.den;
        let mut digits = 0u32;
        let (mut twos, mut fives) = (0u32, 0u32);
        while d % 2 == 0 {
            d /= 2;
            twos += 1;
        }
        while d % 5 == 0 {
            d /= 5;
            fives += 1;
        }
        digits += if d == 1 { twos.max(fives) } else { 6 };
        let scale = 10i128.pow(digits);
        let a = self.num.abs();
        let units = (2 * a * scale + self.den) / (2 * self.den);
        let (int, frac) = (units / scale, units % scale);
        let mut f = format!("{:0>w$}", frac, w = digits as usize);
        while f.ends_with('0') {
            f.pop();
        }
        let body = if f.is_empty() { int.to_string() } else { format!("{int}.{f}") };
        if self.num < 0 && units != 0 {
            format!("-{body}")
        } else {
            body
        }
    }
}
