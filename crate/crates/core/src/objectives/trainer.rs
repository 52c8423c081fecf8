//! The training loop: latent search, buffer admission, the λ-mixture of
//! Hard-EM and MAPO losses, auxiliary heads and a clipped SGD update.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::aux::{auxiliary_losses, AuxHeads, AuxTargets};
use super::{
    compute_lambda, evaluate_components, hard_em_terms, mapo_terms, mixture_loss, supervised_terms,
    LossTerms, ObjectiveError,
};
use crate::latent::{
    assemble_with_limit, beam_search_latents, buffer_admit, gold_completions, hard_em_select, ChainExample, LatentError,
    ReplayBuffer, Trajectory,
};
use crate::policy::{write_checkpoint, Checkpoint, CheckpointMeta, ReferencePolicy, TrainablePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaScope {
    /// Every latent example seen so far.
    #[default]
    Global,
    /// The latent examples of the current batch.
    Batch,
}

impl FromStr for LambdaScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(Self::Global),
            "batch" => Ok(Self::Batch),
            other => Err(format!("unknown lambda scope `{other}` (expected global or batch)")),
        }
    }
}

impl fmt::Display for LambdaScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Global => "global",
            Self::Batch => "batch",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub k: usize,
    pub b: usize,
    pub max_in_memory: usize,
    pub reward_threshold: f64,
    pub buffer_capacity: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub lambda_scope: LambdaScope,
    /// When false, λ is pinned to 0 and no buffer is kept (pure Hard-EM).
    pub use_mapo: bool,
    pub use_aux: bool,
    /// Adds wall-clock milliseconds to each log record; off by default so
    /// logs of identical runs are byte-identical.
    pub log_wall_time: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            k: 25,
            b: 5,
            max_in_memory: 5,
            reward_threshold: 0.8,
            buffer_capacity: 16,
            learning_rate: 0.1,
            clip_norm: 10.0,
            batch_size: 8,
            max_steps: 3000,
            seed: 0,
            lambda_scope: LambdaScope::Global,
            use_mapo: true,
            use_aux: true,
            log_wall_time: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: &str| Err(ObjectiveError::Config(m.to_string()));
        if self.b == 0 || self.k < self.b {
            return bad("need k >= b >= 1");
        }
        if !(self.reward_threshold > 0.0 && self.reward_threshold < 1.0) {
            return bad("reward threshold must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.max_in_memory == 0 {
            return bad("batch size, buffer capacity and in-memory count must be positive");
        }
        if !(self.learning_rate >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("learning rate must be >= 0 and clip norm > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub chain: ChainExample,
    pub aux: Option<AuxTargets>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleStat {
    pub example_id: String,
    pub in_memory: usize,
    pub out_of_memory: usize,
    pub m: usize,
    pub r_b: f64,
    /// Distinct trajectories the beam produced.
    pub beam_size: usize,
}

/// Batch means of each loss component for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub step: u64,
    pub lambda: f64,
    pub sup: f64,
    pub hard: f64,
    pub mapo: f64,
    pub aux: f64,
    pub total: f64,
    pub r_b_mean: f64,
    pub samples: Vec<SampleStat>,
    pub buffer_examples: usize,
    pub buffer_trajectories: usize,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub lambda: f64,
    pub r_b_mean: f64,
    pub sup: f64,
    pub hard: f64,
    pub mapo: f64,
    pub aux: f64,
    pub total: f64,
    pub buffer_examples: usize,
    pub buffer_trajectories: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

impl StepLog {
    pub fn from_breakdown(b: &LossBreakdown, wall_ms: Option<u64>) -> Self {
        Self {
            step: b.step,
            lambda: b.lambda,
            r_b_mean: b.r_b_mean,
            sup: b.sup,
            hard: b.hard,
            mapo: b.mapo,
            aux: b.aux,
            total: b.total,
            buffer_examples: b.buffer_examples,
            buffer_trajectories: b.buffer_trajectories,
            wall_ms,
        }
    }
}

/// Per-example loss pieces before they are mixed.
struct ExampleLosses {
    sup: LossTerms,
    hard: LossTerms,
    /// `None` when MAPO is off, or shares `hard` when the example has no
    /// latent structure to exploit.
    mapo: Option<LossTerms>,
    mapo_is_hard: bool,
    run_inputs: Vec<String>,
}

pub struct Trainer {
    config: TrainerConfig,
    policy: ReferencePolicy,
    heads: AuxHeads,
    buffer: ReplayBuffer,
    seen: BTreeSet<String>,
    rng: ChaCha8Rng,
    step: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(config: TrainerConfig, policy: ReferencePolicy) -> Result<Self, ObjectiveError> {
        config.validate()?;
        Ok(Self {
            heads: AuxHeads::init(config.seed.wrapping_add(0x5eed)),
            buffer: ReplayBuffer::with_threshold(config.buffer_capacity, config.reward_threshold),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            seen: BTreeSet::new(),
            step: 0,
            order: Vec::new(),
            cursor: 0,
            config,
            policy,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn policy(&self) -> &ReferencePolicy {
        &self.policy
    }

    pub fn heads(&self) -> &AuxHeads {
        &self.heads
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn seen_ids(&self) -> impl Iterator<Item = &str> {
        self.seen.iter().map(String::as_str)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn into_policy(self) -> ReferencePolicy {
        self.policy
    }

    /// Next batch of indices into a dataset of `len` examples; the order is
    /// reshuffled at every epoch boundary.
    pub fn next_batch(&mut self, len: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size.min(len) {
            if self.cursor >= self.order.len() {
                self.order = (0..len).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let cfg = self.policy.config();
        let mut ckpt = Checkpoint::new(CheckpointMeta {
            feature_names: ReferencePolicy::feature_names().iter().map(|s| s.to_string()).collect(),
            span_cap: cfg.span_cap,
            temperature: cfg.temperature,
            step: self.step,
        });
        ckpt.insert_f64("policy.theta", self.policy.theta());
        for (name, block) in self.heads.named() {
            ckpt.insert_f64(name, block);
        }
        ckpt
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &[&TrainingExample]) -> Result<LossBreakdown, ObjectiveError> {
        let cfg = self.config.clone();
        let k = cfg.k;

        // latent search and buffer admission
        let mut beams: Vec<Option<Vec<Trajectory>>> = Vec::with_capacity(batch.len());
        for ex in batch {
            if ex.chain.len() < 2 {
                beams.push(None);
                continue;
            }
            let beam = beam_search_latents(&self.policy, &ex.chain, k, cfg.b)?;
            if cfg.use_mapo {
                for t in &beam {
                    buffer_admit(&mut self.buffer, &ex.chain.id, t);
                }
                self.seen.insert(ex.chain.id.clone());
            }
            beams.push(Some(beam));
        }
        let lambda = if !cfg.use_mapo {
            0.0
        } else {
            match cfg.lambda_scope {
                LambdaScope::Global => compute_lambda(&self.buffer, self.seen.iter().map(String::as_str)),
                LambdaScope::Batch => compute_lambda(
                    &self.buffer,
                    batch.iter().filter(|e| e.chain.len() >= 2).map(|e| e.chain.id.as_str()),
                ),
            }
        };

        let mut per_example = Vec::with_capacity(batch.len());
        let mut samples = Vec::new();
        for (ex, beam) in batch.iter().zip(&beams) {
            let chain = &ex.chain;
            let losses = match beam {
                None => {
                    let gold = vec![chain.answer.clone()];
                    let hard = hard_em_terms(chain, &bare(gold.clone()))?;
                    ExampleLosses {
                        sup: supervised_terms(chain, &gold)?,
                        hard,
                        mapo: None,
                        mapo_is_hard: true,
                        run_inputs: vec![chain.question_input(&[])],
                    }
                }
                Some(beam) => {
                    let completions = gold_completions(&self.policy, chain, beam)?;
                    let (chosen, hard) = match hard_em_select(&completions) {
                        Ok(sel) => (sel.sub_answers.clone(), hard_em_terms(chain, sel)?),
                        // no beam prefix admits the gold answer: supervise
                        // the sub-questions only
                        Err(_) => {
                            let top = beam[0].sub_answers.clone();
                            let sup = supervised_terms(chain, &top)?;
                            (top, sup)
                        }
                    };
                    let mut mapo = None;
                    let mut mapo_is_hard = false;
                    if cfg.use_mapo {
                        let top = &beam[..beam.len().min(cfg.max_in_memory)];
                        match assemble_with_limit(&self.buffer, &chain.id, top, cfg.max_in_memory, &mut self.rng) {
                            Ok(sample) => {
                                samples.push(SampleStat {
                                    example_id: chain.id.clone(),
                                    in_memory: sample.in_memory.len(),
                                    out_of_memory: sample.out_of_memory.len(),
                                    m: sample.m,
                                    r_b: sample.r_b,
                                    beam_size: beam.len(),
                                });
                                mapo = Some(mapo_terms(chain, &sample)?);
                            }
                            Err(LatentError::Degenerate) => mapo_is_hard = true,
                            Err(e) => return Err(e.into()),
                        }
                    }
                    ExampleLosses {
                        sup: supervised_terms(chain, &chosen)?,
                        hard,
                        mapo,
                        mapo_is_hard,
                        run_inputs: (0..chain.len()).map(|j| chain.question_input(&chosen[..j])).collect(),
                    }
                }
            };
            per_example.push(losses);
        }

        let n = batch.len() as f64;
        let mut components: Vec<(&LossTerms, f64)> = Vec::new();
        for l in &per_example {
            components.push((&l.sup, 0.0));
            components.push((&l.hard, (1.0 - lambda) / n));
            if let Some(m) = &l.mapo {
                components.push((m, lambda / n));
            } else if l.mapo_is_hard && cfg.use_mapo {
                components.push((&l.hard, lambda / n));
            }
        }
        let mut grad = vec![0.0; ReferencePolicy::dim()];
        let values = evaluate_components(&self.policy, &components, &mut grad)?;

        let (mut sup, mut hard, mut mapo) = (0.0, 0.0, 0.0);
        let mut idx = 0;
        for l in &per_example {
            sup += values[idx];
            let h = values[idx + 1];
            hard += h;
            idx += 2;
            if l.mapo.is_some() || (l.mapo_is_hard && cfg.use_mapo) {
                mapo += values[idx];
                idx += 1;
            }
        }

        let mut aux = 0.0;
        let mut aux_grad = vec![0.0; AuxHeads::dim()];
        if cfg.use_aux {
            for (ex, l) in batch.iter().zip(&per_example) {
                if let Some(targets) = &ex.aux {
                    aux += auxiliary_losses(&self.heads, &self.policy, &l.run_inputs, targets, &mut aux_grad)?;
                }
            }
            aux_grad.iter_mut().for_each(|g| *g /= n);
        }
        let (sup, hard, mapo, aux) = (sup / n, hard / n, mapo / n, aux / n);
        let total = mixture_loss(hard, mapo, lambda)? + aux;

        sgd(self.policy.parameters_mut(), &mut grad, cfg.learning_rate, cfg.clip_norm);
        sgd(self.heads.params_mut(), &mut aux_grad, cfg.learning_rate, cfg.clip_norm);
        self.step += 1;

        let r_b_mean = if samples.is_empty() {
            0.0
        } else {
            samples.iter().map(|s| s.r_b).sum::<f64>() / samples.len() as f64
        };
        Ok(LossBreakdown {
            step: self.step,
            lambda,
            sup,
            hard,
            mapo,
            aux,
            total,
            r_b_mean,
            samples,
            buffer_examples: self.buffer.example_count(),
            buffer_trajectories: self.buffer.trajectory_count(),
        })
    }
}

fn bare(sub_answers: Vec<String>) -> Trajectory {
    Trajectory {
        sub_answers,
        step_logprobs: Vec::new(),
        loglik: 0.0,
        reward: 0.0,
    }
}

/// Rescales `grad` to norm at most `clip`, then takes a gradient step.
fn sgd(params: &mut [f64], grad: &mut [f64], lr: f64, clip: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip {
        let s = clip / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    for (p, g) in params.iter_mut().zip(grad.iter()) {
        *p -= lr * g;
    }
}

/// Where a training run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainingRun {
    pub steps: u64,
    pub log_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    /// Also checkpoint every this many steps; the final state is always
    /// written when a checkpoint path is set.
    pub checkpoint_every: Option<u64>,
    pub buffer_path: Option<PathBuf>,
}

/// Runs `run.steps` steps (capped by the configured maximum) over `data`,
/// writing one log line per step.
pub fn train(
    trainer: &mut Trainer,
    data: &[TrainingExample],
    run: &TrainingRun,
) -> Result<Vec<LossBreakdown>, ObjectiveError> {
    if data.is_empty() {
        return Err(ObjectiveError::Config("no training examples".into()));
    }
    let mut log = match &run.log_path {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let steps = run.steps.min(trainer.config.max_steps);
    let mut history = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let started = trainer.config.log_wall_time.then(Instant::now);
        let idx = trainer.next_batch(data.len());
        let batch: Vec<&TrainingExample> = idx.iter().map(|&i| &data[i]).collect();
        let breakdown = trainer.train_step(&batch)?;
        if let Some(w) = log.as_mut() {
            let wall = started.map(|t| t.elapsed().as_millis() as u64);
            let line = serde_json::to_string(&StepLog::from_breakdown(&breakdown, wall))
                .map_err(|e| ObjectiveError::Io(e.into()))?;
            writeln!(w, "{line}")?;
        }
        if let (Some(path), Some(every)) = (&run.checkpoint_path, run.checkpoint_every) {
            if every > 0 && trainer.step.is_multiple_of(every) {
                write_checkpoint(path, &trainer.checkpoint())?;
            }
        }
        history.push(breakdown);
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    if let Some(path) = &run.checkpoint_path {
        write_checkpoint(path, &trainer.checkpoint())?;
    }
    if let Some(path) = &run.buffer_path {
        trainer.buffer.save_jsonl(path)?;
    }
    Ok(history)
}
