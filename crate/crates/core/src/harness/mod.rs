//! Data generation and ingestion, decomposition oracles, chain inference,
//! evaluation and the command-line front end.

pub mod cli;
mod infer;
mod oracle;
mod records;
mod synthetic;

pub use infer::{
    evaluate, evaluate_with, infer_chain, predict, report, ChainTranscript, EvalReport, InferOptions,
    Prediction, TranscriptStep, DEFAULT_MAX_STEPS,
};
pub use oracle::{silver_decompose, DecompositionTable, RuleOracle, SilverAudit};
pub use records::{export_jsonl, ingest_jsonl, Diagnostic, ExampleRecord, FieldMap, Ingested, QdmrSource};
pub use synthetic::{generate_synthetic, Recipe};

use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::objectives::{AuxHeads, ObjectiveError};
use crate::policy::{read_checkpoint, CheckpointError, PolicyError, ReferenceConfig, ReferencePolicy};
use crate::qdmr::{DecompositionOracle, QdmrError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown recipe `{0}` (expected one of numeric-diff, numeric-sum, numeric-max, 2hop, lookup, mixed, heldout)")]
    UnknownRecipe(String),
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("checkpoint does not fit this model: {0}")]
    IncompatibleCheckpoint(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Protocol(#[from] QdmrError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Restores a reference policy (and its auxiliary heads) from a checkpoint.
pub fn load_policy(
    path: &Path,
    proposer: Arc<dyn DecompositionOracle>,
) -> Result<(ReferencePolicy, Option<AuxHeads>), HarnessError> {
    let ckpt = read_checkpoint(path)?;
    let names: Vec<String> = ReferencePolicy::feature_names().iter().map(|s| s.to_string()).collect();
    if ckpt.meta.feature_names != names {
        return Err(HarnessError::IncompatibleCheckpoint("feature names differ".into()));
    }
    if ckpt.meta.span_cap == 0 || !(ckpt.meta.temperature > 0.0) {
        return Err(HarnessError::IncompatibleCheckpoint("invalid span cap or temperature".into()));
    }
    let theta = ckpt
        .get_f64("policy.theta")
        .ok_or_else(|| HarnessError::IncompatibleCheckpoint("missing policy.theta".into()))?;
    let config = ReferenceConfig {
        span_cap: ckpt.meta.span_cap,
        temperature: ckpt.meta.temperature,
    };
    let policy = ReferencePolicy::new(proposer, config).with_parameters(theta)?;
    Ok((policy, AuxHeads::from_named(|k| ckpt.get_f64(k))))
}
