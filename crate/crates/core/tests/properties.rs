mod common;

use std::collections::HashSet;

use proptest::prelude::*;

use common::{policy_for, records, reference_f1, HashPolicy};
use subq::harness::Recipe;
use subq::latent::{
    beam_search_latents, buffer_admit, f1_reward, gold_completions, hard_em_select, score_trajectory,
    trajectory_loglik, ChainExample, ReplayBuffer, Trajectory, TrainingSample,
};
use subq::objectives::{
    compute_lambda, hard_em_terms, mapo_terms, mixture_loss, supervised_terms, Trainer, TrainerConfig,
    TrainingExample,
};
use subq::policy::{PolicyModel, ReferencePolicy};

fn chain(n: usize) -> ChainExample {
    ChainExample {
        id: "p".into(),
        question: "which word comes last".into(),
        context: "alpha beta gamma delta omega".into(),
        sub_questions: (1..=n).map(|j| format!("find word {j}")).collect(),
        answer: "omega".into(),
    }
}

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec!["The", "a", "Paris", "paris.", "U.S.", "1,200", "big", "Big", "x", "an"]),
        0..5,
    )
    .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn beam_shape_and_order(seed in any::<u64>(), n in 1usize..=3, k in 1usize..=30, b in 1usize..=6) {
        let policy = HashPolicy { seed };
        let ex = chain(n);
        let beam = beam_search_latents(&policy, &ex, k, b).unwrap();
        let bound = match n {
            1 => b.min(k),
            _ => k.min(b.pow(n as u32)),
        };
        prop_assert!(!beam.is_empty() && beam.len() <= bound);
        prop_assert!(beam.windows(2).all(|w| w[0].loglik >= w[1].loglik));
        let keys: HashSet<Vec<String>> = beam.iter().map(Trajectory::key).collect();
        prop_assert_eq!(keys.len(), beam.len());
        for t in &beam {
            let sum: f64 = t.step_logprobs.iter().map(|s| s.question + s.answer).sum();
            prop_assert!((t.loglik - sum).abs() <= 1e-9);
            let again = trajectory_loglik(&policy, &ex, &t.sub_answers).unwrap();
            prop_assert!((t.loglik - again).abs() <= 1e-9);
            prop_assert_eq!(t.reward, f1_reward(t.final_answer(), &ex.answer));
        }
    }

    #[test]
    fn greedy_beam_follows_top_candidates(seed in any::<u64>(), n in 1usize..=3) {
        let policy = HashPolicy { seed };
        let ex = chain(n);
        let beam = beam_search_latents(&policy, &ex, 1, 1).unwrap();
        let mut prefix: Vec<String> = Vec::new();
        for j in 0..n {
            let input = ex.answer_input(j, &prefix).unwrap();
            prefix.push(policy.top_candidates(&input, 1).unwrap()[0].target.clone());
        }
        prop_assert_eq!(&beam[0].sub_answers, &prefix);
    }

    #[test]
    fn reward_is_symmetric_bounded_and_matches_reference(p in words(), g in words()) {
        let r = f1_reward(&p, &g);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(r, f1_reward(&g, &p));
        prop_assert_eq!(r, reference_f1(&p, &g));
    }

    #[test]
    fn lambda_is_the_buffered_fraction(flags in prop::collection::vec(any::<bool>(), 1..40)) {
        let mut buffer = ReplayBuffer::default();
        let ids: Vec<String> = (0..flags.len()).map(|i| format!("e{i}")).collect();
        for (id, &on) in ids.iter().zip(&flags) {
            if on {
                let t = Trajectory { sub_answers: vec!["x".into()], step_logprobs: vec![], loglik: 0.0, reward: 1.0 };
                buffer_admit(&mut buffer, id, &t);
            }
        }
        let lambda = compute_lambda(&buffer, ids.iter().map(String::as_str));
        let expected = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
        prop_assert_eq!(lambda, expected);
    }

    #[test]
    fn mixture_is_affine_in_lambda(h in 0.0..1e3f64, m in 0.0..1e3f64, l in 0.0..=1.0f64) {
        let v = mixture_loss(h, m, l).unwrap();
        prop_assert!((v - (l * m + (1.0 - l) * h)).abs() <= 1e-9);
        prop_assert!(v >= h.min(m) - 1e-9 && v <= h.max(m) + 1e-9);
        prop_assert!(mixture_loss(h, m, 1.0 + 1e-9).is_err());
        prop_assert!(mixture_loss(h, m, -1e-9).is_err());
    }
}

fn random_policy(recs: &[subq::harness::ExampleRecord], seed: u64) -> ReferencePolicy {
    let theta: Vec<f64> = (0..ReferencePolicy::dim())
        .map(|i| 2.0 * common::unit_hash(&[&seed, &i]) - 1.0)
        .collect();
    policy_for(recs).with_parameters(theta).unwrap()
}

#[test]
fn hard_em_loss_is_negative_chain_loglik() {
    let recs = records(31, 40, Recipe::Mixed);
    let policy = random_policy(&recs, 1);
    for r in &recs {
        let ex = r.to_chain().unwrap();
        let beam = beam_search_latents(&policy, &ex, 25, 5).unwrap();
        let completions = gold_completions(&policy, &ex, &beam).unwrap();
        for t in completions.iter().chain(&beam) {
            let loss = hard_em_terms(&ex, t).unwrap().value(&policy).unwrap();
            let ll = score_trajectory(&policy, &ex, &t.sub_answers).unwrap().loglik;
            assert!((loss + ll).abs() < 1e-9, "{} vs {}", loss, -ll);
        }
        if let Ok(sel) = hard_em_select(&completions) {
            assert!(completions.iter().all(|t| t.loglik <= sel.loglik));
            assert_eq!(sel.final_answer(), ex.answer);
        }
    }
}

#[test]
fn mapo_special_cases() {
    let recs = records(32, 20, Recipe::Mixed);
    let policy = random_policy(&recs, 2);
    for r in &recs {
        let ex = r.to_chain().unwrap();
        let beam = beam_search_latents(&policy, &ex, 25, 5).unwrap();
        let top: Vec<Trajectory> = beam.iter().take(5).cloned().collect();
        let m = top.len() as f64;

        // no buffer: out-of-memory weights are R_i / m
        let sample = TrainingSample {
            in_memory: vec![],
            out_of_memory: top.clone(),
            m: top.len(),
            r_b: 0.0,
        };
        let got = mapo_terms(&ex, &sample).unwrap().value(&policy).unwrap();
        let mut expected = 0.0;
        for t in &top {
            let s = score_trajectory(&policy, &ex, &t.sub_answers).unwrap();
            let answer_ll: f64 = s.step_logprobs.iter().map(|x| x.answer).sum();
            let question_ll: f64 = s.step_logprobs.iter().map(|x| x.question).sum();
            expected += -t.reward / m * answer_ll - question_ll / m;
        }
        assert!((got - expected).abs() < 1e-9);

        // zero rewards: only the averaged supervised terms remain
        let zeroed: Vec<Trajectory> = top.iter().cloned().map(|t| Trajectory { reward: 0.0, ..t }).collect();
        let sample = TrainingSample {
            in_memory: zeroed[..2.min(zeroed.len())].to_vec(),
            out_of_memory: zeroed[2.min(zeroed.len())..].to_vec(),
            m: zeroed.len(),
            r_b: 2.0_f64.min(m) / m,
        };
        let got = mapo_terms(&ex, &sample).unwrap().value(&policy).unwrap();
        let sup: f64 = zeroed
            .iter()
            .map(|t| supervised_terms(&ex, &t.sub_answers).unwrap().value(&policy).unwrap())
            .sum::<f64>()
            / m;
        assert!((got - sup).abs() < 1e-9);
    }
}

fn data(recs: &[subq::harness::ExampleRecord]) -> Vec<TrainingExample> {
    recs.iter().filter_map(|r| r.to_training()).collect()
}

fn run_steps(trainer: &mut Trainer, data: &[TrainingExample], steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|_| {
            let idx = trainer.next_batch(data.len());
            let batch: Vec<&TrainingExample> = idx.iter().map(|&i| &data[i]).collect();
            trainer.train_step(&batch).unwrap().lambda
        })
        .collect()
}

#[test]
fn lambda_never_drops_once_every_example_is_seen() {
    let recs = records(33, 40, Recipe::Mixed);
    let data = data(&recs);
    let mut trainer = Trainer::new(TrainerConfig::default(), policy_for(&recs)).unwrap();
    let epoch = data.len().div_ceil(trainer.config().batch_size);
    let lambdas = run_steps(&mut trainer, &data, epoch + 25);
    assert_eq!(trainer.seen_ids().count(), data.len());
    assert!(lambdas[epoch - 1..].windows(2).all(|w| w[0] <= w[1]), "{lambdas:?}");
}

#[test]
fn first_step_on_empty_buffer_without_successes_is_pure_hard_em() {
    // every gold answer is unreachable, so nothing is ever buffered
    let mut recs = records(34, 16, Recipe::Mixed);
    for r in &mut recs {
        r.answer = "unreachable zebra".into();
    }
    let data = data(&recs);
    let mut trainer = Trainer::new(TrainerConfig::default(), policy_for(&recs)).unwrap();
    let idx = trainer.next_batch(data.len());
    let batch: Vec<&TrainingExample> = idx.iter().map(|&i| &data[i]).collect();
    let b = trainer.train_step(&batch).unwrap();
    assert_eq!(b.lambda, 0.0);
    assert_eq!(b.total.to_bits(), (b.hard + b.aux).to_bits());
}

#[test]
fn zero_learning_rate_keeps_parameters_bitwise() {
    let recs = records(35, 24, Recipe::Mixed);
    let data = data(&recs);
    let config = TrainerConfig {
        learning_rate: 0.0,
        ..TrainerConfig::default()
    };
    let mut trainer = Trainer::new(config, policy_for(&recs)).unwrap();
    let theta0: Vec<u64> = trainer.policy().theta().iter().map(|v| v.to_bits()).collect();
    let heads0 = trainer.heads().clone();
    run_steps(&mut trainer, &data, 2);
    let theta1: Vec<u64> = trainer.policy().theta().iter().map(|v| v.to_bits()).collect();
    assert_eq!(theta0, theta1);
    assert_eq!(&heads0, trainer.heads());
}

#[test]
fn loss_breakdown_identity_holds_every_step() {
    let recs = records(36, 64, Recipe::Mixed);
    let data = data(&recs);
    let mut trainer = Trainer::new(TrainerConfig::default(), policy_for(&recs)).unwrap();
    for _ in 0..30 {
        let idx = trainer.next_batch(data.len());
        let batch: Vec<&TrainingExample> = idx.iter().map(|&i| &data[i]).collect();
        let b = trainer.train_step(&batch).unwrap();
        assert!((b.total - (b.lambda * b.mapo + (1.0 - b.lambda) * b.hard + b.aux)).abs() <= 1e-9);
        for (_, stored) in trainer.buffer().iter() {
            assert!(stored.iter().all(|t| t.reward > 0.8));
        }
    }
}
