mod common;

use common::{random_adapters, random_tokens, some_paper, tiny_config, tiny_vocab};
use proptest::prelude::*;
use steerlab::decode::{
    build_predictor_dataset, dynamic_decode, schedule_pairs, static_decode, train_predictor, ControlSchedule,
    DecodeOptions, Normalization, PredictorConfig, PredictorPair, PredictorTrainConfig, Provenance, ScheduleScale,
    ScoredIdea, WeightPredictor, DEFAULT_BINS,
};
use steerlab::model::{ModelConfig, Proposer, SampleOptions};
use steerlab::sft::prompt_tokens;
use steerlab::steer::{AdapterSet, ControlVector};
use steerlab::Error;

fn model() -> Proposer {
    let cfg = ModelConfig {
        context_len: 96,
        ..tiny_config(4)
    };
    Proposer::new(cfg, tiny_vocab()).unwrap()
}

fn opts() -> DecodeOptions {
    DecodeOptions {
        sample: SampleOptions {
            temperature: 1.0,
            max_len: 60,
        },
        max_context: 8,
        max_sentences: 1000,
        eps_max: 5.0,
    }
}

fn scores_strategy() -> impl Strategy<Value = Vec<Vec<[f64; 3]>>> {
    proptest::collection::vec(
        proptest::collection::vec(proptest::array::uniform3(0.0f64..1.0), 1..6),
        1..5,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gains_are_order_isomorphic_to_rewards(scores in scores_strategy(), per_dim in any::<bool>()) {
        let norm = if per_dim { Normalization::PerDimension } else { Normalization::Global };
        let scale = ScheduleScale::fit(&scores, 5.0, norm).unwrap();
        let flat: Vec<[f64; 3]> = scores.concat();
        let sched = scale.schedule(&flat).unwrap();
        for d in 0..3 {
            let r: Vec<f64> = flat.iter().map(|s| s[d]).collect();
            let g: Vec<f64> = sched.steps.iter().map(|c| c.as_array()[d]).collect();
            prop_assert!(g.iter().all(|x| (0.0..=5.0).contains(x)));
            for i in 0..r.len() {
                for j in 0..r.len() {
                    if r[i] < r[j] {
                        prop_assert!(g[i] <= g[j]);
                    }
                    if r[i] == r[j] {
                        prop_assert_eq!(g[i], g[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn gains_are_shift_invariant(scores in scores_strategy(), c in -10.0f64..10.0, per_dim in any::<bool>()) {
        let norm = if per_dim { Normalization::PerDimension } else { Normalization::Global };
        let shifted: Vec<Vec<[f64; 3]>> = scores
            .iter()
            .map(|idea| idea.iter().map(|s| [s[0] + c, s[1] + c, s[2] + c]).collect())
            .collect();
        let a = ScheduleScale::fit(&scores, 5.0, norm).unwrap().schedule(&scores.concat()).unwrap();
        let b = ScheduleScale::fit(&shifted, 5.0, norm).unwrap().schedule(&shifted.concat()).unwrap();
        for (x, y) in a.steps.iter().zip(&b.steps) {
            for (u, v) in x.as_array().iter().zip(y.as_array()) {
                prop_assert!((u - v).abs() < 1e-9, "{} vs {}", u, v);
            }
        }
    }
}

#[test]
fn extraction_endpoints_and_degenerate_range() {
    let scores = vec![vec![[0.2, 0.2, 0.2], [0.5, 0.5, 0.5], [0.8, 0.8, 0.8]]];
    let scale = ScheduleScale::fit(&scores, 5.0, Normalization::Global).unwrap();
    let s = scale.schedule(&scores[0]).unwrap();
    let n: Vec<f64> = s.steps.iter().map(|c| c.n).collect();
    assert_eq!(n[0], 0.0);
    assert_eq!(n[2], 5.0);
    assert!((n[1] - 2.5).abs() < 1e-12);
    assert_eq!(s.provenance, Provenance::Extracted);

    let flat = vec![vec![[0.4, 0.4, 0.4]; 3]];
    let scale = ScheduleScale::fit(&flat, 4.0, Normalization::Global).unwrap();
    assert!(scale.schedule(&flat[0]).unwrap().steps.iter().all(|c| c.as_array() == [2.0; 3]));
    assert!(ScheduleScale::fit(&[], 5.0, Normalization::Global).is_err());
    assert!(ScheduleScale::fit(&scores, 0.0, Normalization::Global).is_err());
}

fn scored(id: &str, sentences: usize, overall: f64, seed: u64) -> ScoredIdea {
    ScoredIdea {
        idea_id: id.into(),
        sentences: (0..sentences).map(|k| random_tokens(100, 4, seed + k as u64)).collect(),
        sentence_scores: (0..sentences).map(|k| [0.1 * k as f64, 0.5, 1.0 - 0.1 * k as f64]).collect(),
        overall,
    }
}

#[test]
fn dataset_has_one_pair_per_sentence_with_extracted_targets() {
    let ideas = vec![scored("a", 4, 0.9, 1), scored("b", 3, 0.5, 2), scored("c", 2, 0.85, 3)];
    let all: Vec<Vec<[f64; 3]>> = ideas.iter().map(|i| i.sentence_scores.clone()).collect();
    let scale = ScheduleScale::fit(&all, 5.0, Normalization::Global).unwrap();
    let pairs = build_predictor_dataset(&ideas, &scale, 0.8).unwrap();
    assert_eq!(pairs.len(), 4 + 2);
    for (idea, range) in [(&ideas[0], 0..4), (&ideas[2], 4..6)] {
        let sched = scale.schedule(&idea.sentence_scores).unwrap();
        for (t, p) in pairs[range].iter().enumerate() {
            assert_eq!(p.idea_id, idea.idea_id);
            assert_eq!(p.position, t + 1);
            assert_eq!(p.prefix, idea.sentences[..t].to_vec());
            assert_eq!(p.prefix_gains, sched.steps[..t].to_vec());
            assert_eq!(p.target, sched.steps[t]);
        }
    }
    assert!(matches!(build_predictor_dataset(&ideas, &scale, 1.0), Err(Error::Empty(_))));
    assert!(build_predictor_dataset(&ideas, &scale, 1.5).is_err());
    let short = ControlSchedule::new(vec![ControlVector::ones()], 5.0, Provenance::Extracted).unwrap();
    assert!(schedule_pairs("x", &ideas[0].sentences, &short).is_err());
}

fn predictor_config(seed: u64) -> PredictorConfig {
    PredictorConfig {
        seed,
        ..PredictorConfig::new(100)
    }
}

#[test]
fn zeroed_output_layer_gives_uniform_bins() {
    let mut p = WeightPredictor::new(predictor_config(0)).unwrap();
    p.zero_output();
    let ideas = vec![scored("a", 4, 0.9, 1)];
    let scale = ScheduleScale::fit(&[ideas[0].sentence_scores.clone()], 5.0, Normalization::Global).unwrap();
    let pairs = build_predictor_dataset(&ideas, &scale, 0.5).unwrap();
    let loss = p.mean_loss(&pairs).unwrap();
    let want = 3.0 * (DEFAULT_BINS as f64).ln();
    assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
}

#[test]
fn single_pair_is_fit_exactly() {
    let pair = PredictorPair {
        idea_id: "a".into(),
        position: 3,
        prefix: vec![random_tokens(100, 5, 1), random_tokens(100, 7, 2)],
        prefix_gains: vec![ControlVector::new(1.0, 2.0, 3.0), ControlVector::new(0.5, 0.0, 5.0)],
        target: ControlVector::new(4.1, 0.3, 2.6),
    };
    let cfg = PredictorTrainConfig {
        epochs: 150,
        ..Default::default()
    };
    let (p, trace) = train_predictor(std::slice::from_ref(&pair), predictor_config(3), &cfg).unwrap();
    assert!(trace.epoch_losses.last().unwrap() < &trace.initial_loss);
    let got = p.predict_pair(&pair).unwrap();
    for (g, t) in got.as_array().iter().zip(pair.target.as_array()) {
        assert_eq!(p.bin_of(*g), p.bin_of(t));
    }
}

#[test]
fn constant_targets_are_predicted_everywhere() {
    let target = ControlVector::new(1.5, 3.5, 0.5);
    let mut pairs = Vec::new();
    for k in 0..12u64 {
        let n = (k % 4) as usize;
        pairs.push(PredictorPair {
            idea_id: format!("i{k}"),
            position: n + 1,
            prefix: (0..n).map(|j| random_tokens(100, 3 + j, 10 * k + j as u64)).collect(),
            prefix_gains: vec![target; n],
            target,
        });
    }
    let cfg = PredictorTrainConfig {
        epochs: 60,
        batch_size: 4,
        ..Default::default()
    };
    let (p, _) = train_predictor(&pairs, predictor_config(5), &cfg).unwrap();
    let mut state = p.start();
    let mut prev: Option<Vec<usize>> = None;
    for k in 0..6u64 {
        let cv = p.next(&mut state, prev.as_deref()).unwrap();
        for (g, t) in cv.as_array().iter().zip(target.as_array()) {
            assert!((g - t).abs() < 1e-9, "step {k}: {g} vs {t}");
        }
        prev = Some(random_tokens(100, 4, 1000 + k));
    }
    assert!(matches!(train_predictor(&[], predictor_config(0), &cfg), Err(Error::Empty(_))));
}

#[test]
fn predictor_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = WeightPredictor::new(predictor_config(7)).unwrap();
    p.save(&dir.path().join("p.ckpt")).unwrap();
    assert_eq!(WeightPredictor::load(&dir.path().join("p.ckpt")).unwrap(), p);
    let c = WeightPredictor::constant(ControlVector::new(1.0, 2.0, 0.0), predictor_config(7)).unwrap();
    c.save(&dir.path().join("c.ckpt")).unwrap();
    assert_eq!(WeightPredictor::load(&dir.path().join("c.ckpt")).unwrap(), c);
    assert!(WeightPredictor::constant(ControlVector::new(6.0, 0.0, 0.0), predictor_config(7)).is_err());
}

#[test]
fn zero_gains_match_unsteered_sampling() {
    let m = model();
    let paper = some_paper();
    let adapters = random_adapters(m.config.width, &[1], 0.5, 3);
    let o = opts();
    for seed in 0..5 {
        let d = static_decode(&m, &adapters, &paper, ControlVector::zero(), seed, &o).unwrap();
        let prompt = prompt_tokens(&m.vocab, &paper, o.max_context);
        let plain = m.sample(&prompt, &o.sample, seed, None).unwrap();
        assert_eq!(d.tokens, plain.tokens);
        assert_eq!(d.ended_with_eos, plain.ended_with_eos);
        let again = static_decode(&m, &adapters, &paper, ControlVector::zero(), seed, &o).unwrap();
        assert_eq!(d, again);
    }
}

#[test]
fn constant_predictor_matches_static_decoding() {
    let m = model();
    let paper = some_paper();
    let adapters = random_adapters(m.config.width, &[0, 1], 0.3, 9);
    let o = opts();
    let cv = ControlVector::new(2.0, 0.5, 1.0);
    let pc = PredictorConfig::new(m.vocab.len());
    let constant = WeightPredictor::constant(cv, pc.clone()).unwrap();
    for seed in 0..8 {
        let s = static_decode(&m, &adapters, &paper, cv, seed, &o).unwrap();
        let d = dynamic_decode(&m, &adapters, &constant, &paper, seed, &o).unwrap();
        assert_eq!(s.tokens, d.tokens);
        assert_eq!(s.schedule.steps, d.schedule.steps);
    }
    let learned = WeightPredictor::new(pc).unwrap();
    for seed in 0..8 {
        let d = dynamic_decode(&m, &adapters, &learned, &paper, seed, &o).unwrap();
        assert_eq!(d.schedule.len(), d.sentences.len());
        assert_eq!(d.schedule.provenance, Provenance::Predicted);
        d.schedule.validate().unwrap();
        assert_eq!(d.sentences.concat(), d.tokens.iter().copied().filter(|&t| t != steerlab::model::vocab::EOS).collect::<Vec<_>>());
    }
}

#[test]
fn sentence_cap_truncates_and_mismatched_eps_max_is_rejected() {
    let m = model();
    let paper = some_paper();
    let adapters = AdapterSet::zeros(m.config.width, &[1]);
    let mut o = opts();
    o.max_sentences = 1;
    o.sample.max_len = 200;
    let mut hit = false;
    for seed in 0..40 {
        let d = static_decode(&m, &adapters, &paper, ControlVector::ones(), seed, &o).unwrap();
        assert_eq!(d.sentences.len(), 1);
        hit |= d.truncated;
    }
    assert!(hit);
    let other = WeightPredictor::new(PredictorConfig {
        eps_max: 3.0,
        ..PredictorConfig::new(m.vocab.len())
    })
    .unwrap();
    assert!(dynamic_decode(&m, &adapters, &other, &paper, 0, &opts()).is_err());
    o.max_sentences = 0;
    assert!(static_decode(&m, &adapters, &paper, ControlVector::ones(), 0, &o).is_err());
}
