//! Decomposition sources: a rule-based parser for the synthetic question
//! templates, a lookup table, and silver annotation of records.

use std::collections::HashMap;
use std::sync::Arc;

use regex::Regex;

use super::records::{ExampleRecord, QdmrSource};
use crate::qdmr::{parse_qdmr_text, DecompositionOracle, QdmrDecomposition};

/// Pattern-based decomposer for the question shapes the synthetic
/// generator emits.
#[derive(Debug)]
pub struct RuleOracle {
    rules: Vec<(Regex, &'static str)>,
}

impl Default for RuleOracle {
    fn default() -> Self {
        let rules = [
            (
                r"^How many more points did the (?P<b>.+?) score than the (?P<a>.+?)\?$",
                "return points scored by the $a; return points scored by the $b; return difference of #2 and #1",
            ),
            (
                r"^How many points did the (?P<a>.+?) and the (?P<b>.+?) score in total\?$",
                "return points scored by the $a; return points scored by the $b; return sum of #1 and #2",
            ),
            (
                r"^What was the highest score between the (?P<a>.+?) and the (?P<b>.+?)\?$",
                "return points scored by the $a; return points scored by the $b; return the highest of #1 and #2",
            ),
            (
                r"^In which country was (?P<p>.+?) born\?$",
                "return the city where $p was born; return the country where #1 is located",
            ),
            (
                r"^How many points did the (?P<a>.+?) score\?$",
                "return points scored by the $a",
            ),
        ];
        Self {
            rules: rules
                .into_iter()
                .map(|(p, t)| (Regex::new(p).expect("static pattern"), t))
                .collect(),
        }
    }
}

impl DecompositionOracle for RuleOracle {
    fn decompose(&self, question: &str) -> Option<QdmrDecomposition> {
        let question = question.trim();
        self.rules.iter().find_map(|(re, template)| {
            let caps = re.captures(question)?;
            let mut text = String::new();
            caps.expand(template, &mut text);
            parse_qdmr_text(&text).ok()
        })
    }
}

/// Exact-question lookup with an optional fallback oracle.
pub struct DecompositionTable {
    table: HashMap<String, QdmrDecomposition>,
    fallback: Option<Arc<dyn DecompositionOracle>>,
}

impl DecompositionTable {
    pub fn new(fallback: Option<Arc<dyn DecompositionOracle>>) -> Self {
        Self {
            table: HashMap::new(),
            fallback,
        }
    }

    /// Table of every record's decomposition; the first record wins on
    /// repeated questions.
    pub fn from_records(records: &[ExampleRecord], fallback: Option<Arc<dyn DecompositionOracle>>) -> Self {
        let mut t = Self::new(fallback);
        for r in records {
            if let Some(d) = r.decomposition() {
                t.table.entry(r.question.clone()).or_insert(d);
            }
        }
        t
    }

    pub fn insert(&mut self, question: impl Into<String>, d: QdmrDecomposition) {
        self.table.insert(question.into(), d);
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl DecompositionOracle for DecompositionTable {
    fn decompose(&self, question: &str) -> Option<QdmrDecomposition> {
        self.table
            .get(question)
            .cloned()
            .or_else(|| self.fallback.as_ref()?.decompose(question))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SilverAudit {
    pub gold: usize,
    pub silver: usize,
    pub none: usize,
}

/// Fills missing decompositions from `oracle`. Records that already carry
/// one are left untouched; oracle failures stay unannotated.
pub fn silver_decompose(oracle: &dyn DecompositionOracle, records: &mut [ExampleRecord]) -> SilverAudit {
    let mut audit = SilverAudit::default();
    for r in records.iter_mut() {
        if r.qdmr.is_none() {
            match oracle.decompose(&r.question) {
                Some(d) => {
                    r.qdmr = Some(d.to_string());
                    r.qdmr_source = QdmrSource::Silver;
                }
                None => r.qdmr_source = QdmrSource::None,
            }
        }
        match r.qdmr_source {
            QdmrSource::Gold => audit.gold += 1,
            QdmrSource::Silver => audit.silver += 1,
            QdmrSource::None => audit.none += 1,
        }
    }
    audit
}
