//! `subq` command line. Exit status: 0 on success, 1 on runtime errors, 2
//! on usage errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use super::{
    evaluate_with, export_jsonl, generate_synthetic, ingest_jsonl, load_policy, predict, silver_decompose,
    DecompositionTable, FieldMap, InferOptions, Recipe, RuleOracle, DEFAULT_MAX_STEPS,
};
use crate::numexec::{try_regex_pipeline, ExecOutcome};
use crate::objectives::{train, LambdaScope, Trainer, TrainerConfig, TrainingRun};
use crate::policy::{ReferenceConfig, ReferencePolicy};

#[derive(Debug, Parser)]
#[command(name = "subq", version, about = "Chained sub-question QA with latent sub-answers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic examples as JSONL.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value = "mixed")]
        recipe: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach rule-based decompositions to records that lack one.
    Decompose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the reference policy.
    Train(TrainArgs),
    /// Report exact match and F1 of greedy chains.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
        max_steps: usize,
    },
    /// Print one chain transcript per record.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
        max_steps: usize,
    },
    /// Run the numeric executor on a sub-question.
    ExecRegex { sub_question: String },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Where the final checkpoint is written.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-step JSONL log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Replay buffer snapshot written at the end.
    #[arg(long)]
    buffer: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    steps: u64,
    #[arg(long, default_value_t = 25)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    b: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value = "global")]
    lambda_scope: LambdaScope,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Train with Hard-EM only.
    #[arg(long)]
    no_mapo: bool,
    #[arg(long)]
    no_aux: bool,
    /// Record wall-clock time in the log (makes logs non-reproducible).
    #[arg(long)]
    wall_time: bool,
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn execute(command: Command) -> anyhow::Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match command {
        Command::GenData {
            seed,
            count,
            recipe,
            out: path,
        } => {
            let recipe: Recipe = recipe.parse()?;
            let records = generate_synthetic(seed, count, recipe)?;
            export_jsonl(&path, &records)?;
            writeln!(out, "wrote {} records to {}", records.len(), path.display())?;
        }
        Command::Decompose { data, out: path } => {
            let ingested = ingest_jsonl(&data, &FieldMap::default())?;
            report_skipped(&ingested.skipped);
            let mut records = ingested.records;
            let audit = silver_decompose(&RuleOracle::default(), &mut records);
            export_jsonl(&path, &records)?;
            writeln!(
                out,
                "{{\"gold\":{},\"silver\":{},\"none\":{}}}",
                audit.gold, audit.silver, audit.none
            )?;
        }
        Command::Train(args) => train_command(args, &mut out)?,
        Command::Eval {
            data,
            checkpoint,
            max_steps,
        } => {
            let ingested = ingest_jsonl(&data, &FieldMap::default())?;
            report_skipped(&ingested.skipped);
            let (policy, _) = load_policy(&checkpoint, Arc::new(RuleOracle::default()))?;
            let opts = InferOptions {
                max_steps,
                ..InferOptions::default()
            };
            let report = evaluate_with(&policy, &ingested.records, &opts)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
        }
        Command::Infer {
            data,
            checkpoint,
            max_steps,
        } => {
            let ingested = ingest_jsonl(&data, &FieldMap::default())?;
            report_skipped(&ingested.skipped);
            let (policy, _) = load_policy(&checkpoint, Arc::new(RuleOracle::default()))?;
            let opts = InferOptions {
                max_steps,
                ..InferOptions::default()
            };
            for p in predict(&policy, &ingested.records, &opts)? {
                writeln!(out, "{}", serde_json::to_string(&p)?)?;
            }
        }
        Command::ExecRegex { sub_question } => match try_regex_pipeline(&sub_question) {
            ExecOutcome::Success(v) => writeln!(out, "{v}")?,
            ExecOutcome::ParseFailed => bail!("no numeric operation recognized in `{sub_question}`"),
            ExecOutcome::ExecFailed(msg) => bail!("execution failed: {msg}"),
        },
    }
    Ok(())
}

fn train_command(args: TrainArgs, out: &mut impl Write) -> anyhow::Result<()> {
    let ingested = ingest_jsonl(&args.data, &FieldMap::default())?;
    report_skipped(&ingested.skipped);
    let records = ingested.records;
    let data: Vec<_> = records.iter().filter_map(|r| r.to_training()).collect();
    if data.len() < records.len() {
        eprintln!(
            "skipping {} record(s) without a decomposition (run `subq decompose` first)",
            records.len() - data.len()
        );
    }
    if data.is_empty() {
        bail!("no trainable records in {}", args.data.display());
    }
    let proposer = DecompositionTable::from_records(&records, Some(Arc::new(RuleOracle::default())));
    let policy = ReferencePolicy::new(Arc::new(proposer), ReferenceConfig::default());
    let config = TrainerConfig {
        k: args.k,
        b: args.b,
        learning_rate: args.lr,
        batch_size: args.batch_size,
        max_steps: args.steps,
        seed: args.seed,
        lambda_scope: args.lambda_scope,
        use_mapo: !args.no_mapo,
        use_aux: !args.no_aux,
        log_wall_time: args.wall_time,
        ..TrainerConfig::default()
    };
    let mut trainer = Trainer::new(config, policy)?;
    let run = TrainingRun {
        steps: args.steps,
        log_path: args.log,
        checkpoint_path: Some(args.checkpoint.clone()),
        checkpoint_every: args.checkpoint_every,
        buffer_path: args.buffer,
    };
    let history = train(&mut trainer, &data, &run).context("training failed")?;
    if let Some(last) = history.last() {
        writeln!(
            out,
            "trained {} steps; final total loss {:.6}, lambda {:.4}; checkpoint {}",
            last.step,
            last.total,
            last.lambda,
            args.checkpoint.display()
        )?;
    }
    Ok(())
}

fn report_skipped(skipped: &[super::Diagnostic]) {
    for d in skipped {
        eprintln!("skipped {d}");
    }
}
