mod common;

use std::collections::HashMap;

use common::{tiny_config, tiny_vocab};
use proptest::prelude::*;
use steerlab::checkpoint::params_digest;
use steerlab::corpus::{synth_corpus, IdeaRecord, MarkerSpec, PaperRecord};
use steerlab::Error;
use steerlab::model::Proposer;
use steerlab::sft::{encode_pair, mean_ce, train_sft, unigram_perplexity, SftConfig, SftExample};

fn tiny_model(seed: u64) -> Proposer {
    let cfg = steerlab::model::ModelConfig {
        context_len: 160,
        ..tiny_config(seed)
    };
    Proposer::new(cfg, tiny_vocab()).unwrap()
}

fn pairs(seed: u64, n: usize) -> Vec<(PaperRecord, IdeaRecord)> {
    let c = synth_corpus(seed, n, &MarkerSpec::default());
    c.papers.into_iter().zip(c.ideas).collect()
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let mut m = tiny_model(1);
    let before = params_digest(&m.params);
    let cfg = SftConfig { epochs: 0, ..SftConfig::default() };
    let r = train_sft(&mut m, &pairs(3, 10), &cfg).unwrap();
    assert_eq!(params_digest(&m.params), before);
    assert_eq!(r.final_loss, r.initial_loss);
    assert!(r.epoch_losses.is_empty());
}

#[test]
fn single_pair_is_memorized() {
    let mut m = tiny_model(2);
    let one = pairs(3, 1);
    let cfg = SftConfig {
        epochs: 300,
        batch_size: 1,
        lr: 0.05,
        ..SftConfig::default()
    };
    let r = train_sft(&mut m, &one, &cfg).unwrap();
    assert_eq!((r.train_count, r.heldout_count), (1, 0));
    assert!(r.heldout_perplexity.is_none());
    assert!(r.final_loss < 0.05, "final CE {}", r.final_loss);
}

#[test]
fn training_is_deterministic_and_lowers_the_loss() {
    let cfg = SftConfig { epochs: 3, ..SftConfig::default() };
    let data = pairs(4, 30);
    let mut a = tiny_model(5);
    let mut b = tiny_model(5);
    let ra = train_sft(&mut a, &data, &cfg).unwrap();
    let rb = train_sft(&mut b, &data, &cfg).unwrap();
    assert_eq!(params_digest(&a.params), params_digest(&b.params));
    assert_eq!(ra.epoch_losses, rb.epoch_losses);
    assert!(ra.final_loss < ra.initial_loss);
    assert_eq!(ra.train_count + ra.heldout_count, 30);
    assert_eq!(ra.heldout_count, 3);
}

#[test]
fn empty_and_overlong_inputs_are_errors() {
    let mut m = tiny_model(1);
    assert!(matches!(train_sft(&mut m, &[], &SftConfig::default()), Err(Error::Empty(_))));
    let mut short = Proposer::new(
        steerlab::model::ModelConfig {
            context_len: 8,
            ..tiny_config(1)
        },
        tiny_vocab(),
    )
    .unwrap();
    assert!(matches!(
        train_sft(&mut short, &pairs(3, 4), &SftConfig::default()),
        Err(Error::TooLong { .. })
    ));
    let bad = SftConfig {
        eval_fraction: 1.0,
        ..SftConfig::default()
    };
    assert!(train_sft(&mut m, &pairs(3, 4), &bad).is_err());
}

fn unigram_oracle(vocab_size: usize, train: &[SftExample], heldout: &[SftExample]) -> f64 {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let mut n_train = 0usize;
    for e in train {
        for t in e.targets.iter().flatten() {
            *counts.entry(*t).or_default() += 1;
            n_train += 1;
        }
    }
    let held: Vec<usize> = heldout.iter().flat_map(|e| e.targets.iter().flatten().copied()).collect();
    let log_sum: f64 = held
        .iter()
        .map(|t| ((counts.get(t).copied().unwrap_or(0) + 1) as f64 / (n_train + vocab_size) as f64).ln())
        .sum();
    (-log_sum / held.len() as f64).exp()
}

#[test]
fn unigram_perplexity_matches_count_oracle() {
    let m = tiny_model(0);
    let ex: Vec<SftExample> = pairs(6, 12)
        .iter()
        .filter_map(|(p, i)| encode_pair(&m.vocab, p, i, 16, m.config.context_len))
        .collect();
    assert!(ex.len() >= 10);
    let (train, held) = ex.split_at(9);
    let got = unigram_perplexity(m.config.vocab_size, train, held).unwrap();
    let want = unigram_oracle(m.config.vocab_size, train, held);
    assert!((got - want).abs() <= 1e-9 * want, "{got} vs {want}");
    assert!(unigram_perplexity(m.config.vocab_size, train, &[]).is_err());
}

#[test]
fn untrained_model_has_near_uniform_loss() {
    let m = tiny_model(0);
    let ex: Vec<SftExample> = pairs(6, 4)
        .iter()
        .filter_map(|(p, i)| encode_pair(&m.vocab, p, i, 16, m.config.context_len))
        .collect();
    let ce = mean_ce(&m, &ex).unwrap();
    let uniform = (m.config.vocab_size as f64).ln();
    assert!((ce - uniform).abs() < 0.5, "{ce} vs ln V = {uniform}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn paper_tokens_never_change_the_target_count(words in proptest::collection::vec(0usize..40, 1..30)) {
        let vocab = tiny_vocab();
        let (mut paper, idea) = pairs(9, 1).remove(0);
        let base = encode_pair(&vocab, &paper, &idea, 16, 256).unwrap();
        let pool = ["graph", "study", "we", "the", "model", "layers", "zzz", "unknownword", "."];
        paper.abstract_text = words.iter().map(|w| pool[w % pool.len()]).collect::<Vec<_>>().join(" ");
        paper.title = "other title".into();
        let ex = encode_pair(&vocab, &paper, &idea, 16, 256).unwrap();
        prop_assert_eq!(ex.target_count(), base.target_count());
        let tail = |e: &SftExample| e.targets.iter().rev().take(e.target_count()).cloned().collect::<Vec<_>>();
        prop_assert_eq!(tail(&ex), tail(&base));
    }
}
