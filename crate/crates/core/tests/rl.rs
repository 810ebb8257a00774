mod common;

use common::{random_adapters, random_matrix, tiny_config, tiny_vocab};
use steerlab::checkpoint::params_digest;
use steerlab::corpus::{synth_corpus, Dimension, MarkerSpec, PaperRecord};
use steerlab::model::{ModelConfig, Proposer};
use steerlab::reward::{RewardConfig, RewardModel, RewardSet};
use steerlab::rl::{model_digest, rl_checkpoint, train_rl, Policy, PpoConfig, RlOptimizers, ValueHeads};
use steerlab::steer::AdapterSet;
use steerlab::Error;

fn model() -> Proposer {
    let cfg = ModelConfig {
        context_len: 96,
        ..tiny_config(3)
    };
    Proposer::new(cfg, tiny_vocab()).unwrap()
}

/// Reward models with random weights, so scores vary with the text.
fn random_rewards() -> RewardSet {
    let models = Dimension::ALL
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            let mut m = RewardModel::new(d, RewardConfig::default(), tiny_vocab()).unwrap();
            for i in 0..m.params.len() {
                let (r, c) = m.params.get(i).dim();
                let noise = random_matrix(r, c, 0.5, 100 * k as u64 + i as u64);
                *m.params.get_mut(i) += &noise;
            }
            m
        })
        .collect();
    RewardSet { models }
}

fn policy() -> Policy {
    let model = model();
    let width = model.config.width;
    let last = model.config.layers - 1;
    Policy {
        model,
        adapters: AdapterSet::zeros(width, &[last]),
        values: ValueHeads::zeros(width),
    }
}

fn prompts() -> Vec<PaperRecord> {
    synth_corpus(5, 8, &MarkerSpec::default()).papers
}

fn quick(steps: usize, inner_iters: usize) -> PpoConfig {
    PpoConfig {
        steps,
        inner_iters,
        batch_size: 2,
        max_len: 24,
        max_context: 8,
        lr: 1e-2,
        ..PpoConfig::default()
    }
}

fn adapter_digest(p: &Policy) -> Vec<f64> {
    p.adapters.adapters.iter().flat_map(|a| a.w.iter().copied()).collect()
}

#[test]
fn no_steps_and_no_inner_iterations_change_nothing() {
    let rewards = random_rewards();
    for (steps, iters) in [(0, 0), (0, 4), (2, 0)] {
        let mut p = policy();
        let before = (model_digest(&p.model), adapter_digest(&p), p.values.heads.clone());
        let cfg = quick(steps, iters);
        let mut opts = RlOptimizers::new(&p, &cfg).unwrap();
        let r = train_rl(&mut p, &mut opts, &prompts(), &rewards, &cfg, |_, _| {}).unwrap();
        assert_eq!(r.trace.len(), steps);
        assert_eq!(model_digest(&p.model), before.0);
        assert_eq!(adapter_digest(&p), before.1);
        assert_eq!(p.values.heads, before.2);
        assert!(r.trace.iter().all(|s| s.inner_iters_run == 0));
    }
}

#[test]
fn rewards_and_reference_are_untouched_by_training() {
    let rewards = random_rewards();
    let reward_digest = rewards.digest();
    let mut p = policy();
    let reference = model_digest(&p.model);
    let cfg = quick(3, 2);
    let mut opts = RlOptimizers::new(&p, &cfg).unwrap();
    let mut seen = 0;
    let r = train_rl(&mut p, &mut opts, &prompts(), &rewards, &cfg, |rec, batch| {
        assert_eq!(batch.len(), cfg.batch_size * 3);
        for t in batch {
            assert_eq!(t.rewards.len(), t.len());
            assert!(t.rewards[..t.len() - 1].iter().all(|&x| x == 0.0));
            assert_eq!(*t.rewards.last().unwrap(), cfg.reward_weight * t.reward);
            assert!(t.reward > 0.0 && t.reward < 1.0);
            assert_eq!(t.scores[t.dimension.index()], t.reward);
            assert!(t.advantages.iter().all(|a| a.is_finite()));
        }
        assert_eq!(rec.step, seen);
        seen += 1;
    })
    .unwrap();
    assert_eq!(seen, 3);
    assert_eq!(rewards.digest(), reward_digest);
    assert_eq!(r.reward_digest, reward_digest);
    assert_eq!(model_digest(&p.model), reference);
    assert_ne!(adapter_digest(&p), adapter_digest(&policy()));
}

#[test]
fn training_is_deterministic() {
    let rewards = random_rewards();
    let run = || {
        let mut p = policy();
        let cfg = quick(2, 2);
        let mut opts = RlOptimizers::new(&p, &cfg).unwrap();
        let r = train_rl(&mut p, &mut opts, &prompts(), &rewards, &cfg, |_, _| {}).unwrap();
        (r, rl_checkpoint(&p, &opts, &cfg).to_bytes())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn kl_stays_below_the_ceiling() {
    let rewards = random_rewards();
    for ceiling in [0.002, 0.01] {
        let mut p = policy();
        let cfg = PpoConfig {
            lr: 0.003,
            kl_coef: 0.02,
            kl_ceiling: ceiling,
            divergence_bound: 100.0,
            ..quick(6, 6)
        };
        let mut opts = RlOptimizers::new(&p, &cfg).unwrap();
        let r = train_rl(&mut p, &mut opts, &prompts(), &rewards, &cfg, |_, _| {}).unwrap();
        assert!(r.trace.iter().any(|s| s.aborted));
        assert!(r.trace.iter().map(|s| s.inner_iters_run).sum::<usize>() > 0);
        assert!(r.trace.iter().all(|s| s.kl_after <= ceiling));
        assert!(r.max_kl <= ceiling, "max kl {} over {ceiling}", r.max_kl);
    }
}

#[test]
fn oversteered_adapters_are_pulled_back_under_the_ceiling() {
    let rewards = random_rewards();
    let mut p = policy();
    let last = p.model.config.layers - 1;
    p.adapters = random_adapters(p.model.config.width, &[last], 1.0, 8);
    let cfg = PpoConfig {
        kl_ceiling: 0.01,
        ..quick(2, 2)
    };
    let mut opts = RlOptimizers::new(&p, &cfg).unwrap();
    let r = train_rl(&mut p, &mut opts, &prompts(), &rewards, &cfg, |_, _| {}).unwrap();
    assert!(r.trace[0].kl > cfg.kl_ceiling, "fresh kl {}", r.trace[0].kl);
    assert!(r.trace[0].aborted);
    assert!(r.max_kl <= cfg.kl_ceiling);
}

#[test]
fn only_listed_dimensions_are_trained() {
    let rewards = random_rewards();
    let mut p = policy();
    let cfg = PpoConfig {
        dimensions: vec![Dimension::Novelty],
        ..quick(2, 2)
    };
    let mut opts = RlOptimizers::new(&p, &cfg).unwrap();
    let r = train_rl(&mut p, &mut opts, &prompts(), &rewards, &cfg, |_, batch| {
        assert!(batch.iter().all(|t| t.dimension == Dimension::Novelty));
    })
    .unwrap();
    assert!(r.trace.iter().all(|s| s.reward_f.is_nan() && s.reward_n.is_finite()));
    let zero = AdapterSet::zeros(p.model.config.width, &[p.model.config.layers - 1]);
    assert_ne!(p.adapters.get(Dimension::Novelty).unwrap().w, zero.get(Dimension::Novelty).unwrap().w);
    assert_eq!(p.adapters.get(Dimension::Feasibility).unwrap().w, zero.get(Dimension::Feasibility).unwrap().w);
    assert_eq!(params_digest(&p.values.heads[1]), params_digest(&zero_head(&p)));
}

fn zero_head(p: &Policy) -> steerlab::autograd::ParamSet {
    ValueHeads::zeros(p.model.config.width).heads[1].clone()
}

#[test]
fn invalid_configs_are_rejected() {
    let rewards = random_rewards();
    let mut p = policy();
    let good = quick(1, 1);
    let mut opts = RlOptimizers::new(&p, &good).unwrap();
    for bad in [
        PpoConfig { gamma: 1.5, ..good.clone() },
        PpoConfig { clip: 0.0, ..good.clone() },
        PpoConfig { kl_coef: -1.0, ..good.clone() },
        PpoConfig { batch_size: 0, ..good.clone() },
    ] {
        assert!(matches!(
            train_rl(&mut p, &mut opts, &prompts(), &rewards, &bad, |_, _| {}),
            Err(Error::InvalidArgument(_))
        ));
    }
    assert!(matches!(train_rl(&mut p, &mut opts, &[], &rewards, &good, |_, _| {}), Err(Error::Empty(_))));
}
