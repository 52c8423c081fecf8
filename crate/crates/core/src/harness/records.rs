//! Example records and line-delimited JSON ingestion/export.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::HarnessError;
use crate::latent::ChainExample;
use crate::objectives::{AuxTargets, TrainingExample};
use crate::qdmr::{parse_qdmr_text, QdmrDecomposition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QdmrSource {
    Gold,
    Silver,
    #[default]
    None,
}

impl fmt::Display for QdmrSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gold => "gold",
            Self::Silver => "silver",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub question: String,
    pub context: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qdmr: Option<String>,
    #[serde(default)]
    pub qdmr_source: QdmrSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sf_labels: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_labels: Option<Vec<u8>>,
}

impl ExampleRecord {
    pub fn decomposition(&self) -> Option<QdmrDecomposition> {
        self.qdmr.as_deref().and_then(|q| parse_qdmr_text(q).ok())
    }

    pub fn aux_targets(&self) -> Option<AuxTargets> {
        let t = AuxTargets {
            supporting_fact_labels: self.sf_labels.clone(),
            span_labels: self.span_labels.clone(),
        };
        (!t.is_empty()).then_some(t)
    }

    /// The record as a training chain; `None` without a decomposition.
    pub fn to_chain(&self) -> Option<ChainExample> {
        let d = self.decomposition()?;
        Some(ChainExample {
            id: self.id.clone(),
            question: self.question.clone(),
            context: self.context.clone(),
            sub_questions: d.texts().iter().map(|s| s.to_string()).collect(),
            answer: self.answer.clone(),
        })
    }

    pub fn to_training(&self) -> Option<TrainingExample> {
        Some(TrainingExample {
            chain: self.to_chain()?,
            aux: self.aux_targets(),
        })
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        if self.context.trim().is_empty() {
            return Err("empty context".into());
        }
        if self.answer.trim().is_empty() {
            return Err("empty answer".into());
        }
        if let Some(q) = &self.qdmr {
            parse_qdmr_text(q).map_err(|e| format!("bad decomposition: {e}"))?;
        }
        Ok(())
    }
}

/// Source key for each canonical field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldMap {
    pub id: String,
    pub question: String,
    pub context: String,
    pub answer: String,
    pub qdmr: String,
}

impl Default for FieldMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            question: "question".into(),
            context: "context".into(),
            answer: "answer".into(),
            qdmr: "qdmr".into(),
        }
    }
}

/// A record that failed validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub records: Vec<ExampleRecord>,
    pub skipped: Vec<Diagnostic>,
}

fn text_field(obj: &serde_json::Map<String, Value>, key: &str) -> Result<String, String> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(_) => Err(format!("field `{key}` is not text")),
        None => Err(format!("missing field `{key}`")),
    }
}

/// Decompositions may be a single string or a list of step strings.
fn qdmr_field(obj: &serde_json::Map<String, Value>, key: &str) -> Result<Option<String>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(Value::Array(steps)) => {
            let texts: Option<Vec<&str>> = steps.iter().map(Value::as_str).collect();
            let texts = texts.ok_or_else(|| format!("field `{key}` must hold strings"))?;
            let d = QdmrDecomposition::from_texts(&texts).map_err(|e| e.to_string())?;
            Ok(Some(d.to_string()))
        }
        Some(_) => Err(format!("field `{key}` is not a decomposition")),
    }
}

fn parse_line(line: &str, map: &FieldMap) -> Result<ExampleRecord, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid json: {e}"))?;
    let obj = value.as_object().ok_or("record is not an object")?;
    let qdmr = qdmr_field(obj, &map.qdmr)?;
    let qdmr_source = match obj.get("qdmr_source") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| format!("bad qdmr_source: {e}"))?,
        None if qdmr.is_some() => QdmrSource::Gold,
        None => QdmrSource::None,
    };
    let labels = |key: &str| -> Result<Option<Value>, String> {
        Ok(obj.get(key).filter(|v| !v.is_null()).cloned())
    };
    let record = ExampleRecord {
        id: text_field(obj, &map.id)?,
        question: text_field(obj, &map.question)?,
        context: text_field(obj, &map.context)?,
        answer: text_field(obj, &map.answer)?,
        qdmr,
        qdmr_source,
        sf_labels: labels("sf_labels")?
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| format!("bad sf_labels: {e}"))?,
        span_labels: labels("span_labels")?
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| format!("bad span_labels: {e}"))?,
    };
    record.validate()?;
    Ok(record)
}

/// Reads line-delimited JSON. Invalid records are reported in `skipped`
/// and do not abort the load; a file without any valid record is an error.
pub fn ingest_jsonl(path: &Path, map: &FieldMap) -> Result<Ingested, HarnessError> {
    let unreadable = |e: std::io::Error| HarnessError::Unreadable {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let file = std::fs::File::open(path).map_err(unreadable)?;
    let mut out = Ingested::default();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(unreadable)?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, map) {
            Ok(r) if !ids.insert(r.id.clone()) => out.skipped.push(Diagnostic {
                line: i + 1,
                reason: format!("duplicate id `{}`", r.id),
            }),
            Ok(r) => out.records.push(r),
            Err(reason) => out.skipped.push(Diagnostic { line: i + 1, reason }),
        }
    }
    if out.records.is_empty() {
        return Err(HarnessError::EmptyDataset(path.display().to_string()));
    }
    Ok(out)
}

pub fn export_jsonl(path: &Path, records: &[ExampleRecord]) -> Result<(), HarnessError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| HarnessError::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
