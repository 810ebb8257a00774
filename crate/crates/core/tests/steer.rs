mod common;

use common::*;
use ndarray::Array2;
use proptest::prelude::*;
use steerlab::autograd::Tape;
use steerlab::corpus::Dimension;
use steerlab::steer::{apply_combined, apply_single, make_hook, steer_tape, AdapterSet, ControlVector, SteerAdapter};
use steerlab::Error;

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn zero_gains_are_bit_identical_to_unsteered() {
    let m = tiny_model(1);
    let adapters = random_adapters(m.config.width, &[0, 1], 0.5, 7);
    let tokens = random_tokens(m.vocab.len(), 15, 2);
    let (plain, _) = m.forward(&tokens, None).unwrap();
    let hook = make_hook(&adapters, ControlVector::zero());
    let (steered, _) = m.forward(&tokens, Some(&hook)).unwrap();
    assert_eq!(plain, steered);
}

#[test]
fn zero_matrix_is_identity_at_any_gain() {
    let x = random_matrix(5, 8, 1.0, 1);
    let a = SteerAdapter::zeros(Dimension::Novelty, 8, [0]);
    assert_eq!(apply_single(&x, &a, 3.7).unwrap(), x);
}

#[test]
fn combined_matches_sum_of_single_terms() {
    let x = random_matrix(6, 8, 1.0, 3);
    let set = random_adapters(8, &[0], 0.3, 4);
    let cv = ControlVector::new(0.5, 1.5, 2.5);
    let mut oracle = x.clone();
    for d in Dimension::ALL {
        let w = &set.get(d).unwrap().w;
        oracle = oracle + x.dot(&w.t()) * cv.get(d);
    }
    assert!(max_abs_diff(&apply_combined(&x, &set, &cv).unwrap(), &oracle) <= 1e-12);
}

#[test]
fn low_rank_adapter_uses_factor_product() {
    let u = random_matrix(8, 2, 1.0, 5);
    let v = random_matrix(8, 2, 1.0, 6);
    let a = SteerAdapter::low_rank(Dimension::Feasibility, u.clone(), v.clone(), [1]).unwrap();
    assert!(max_abs_diff(&a.w, &u.dot(&v.t())) == 0.0);
    assert!(SteerAdapter::low_rank(Dimension::Feasibility, u, random_matrix(8, 3, 1.0, 0), [1]).is_err());
}

#[test]
fn width_mismatch_and_bad_layers_are_errors() {
    let x = random_matrix(2, 5, 1.0, 1);
    let a = SteerAdapter::zeros(Dimension::Novelty, 8, [0]);
    assert!(matches!(apply_single(&x, &a, 1.0), Err(Error::Shape(_))));
    assert!(a.validate(1).is_ok());
    let far = SteerAdapter::zeros(Dimension::Novelty, 8, [4]);
    assert!(far.validate(2).is_err());
    let mut nan = SteerAdapter::zeros(Dimension::Novelty, 8, [0]);
    nan.w[[0, 0]] = f64::NAN;
    assert!(nan.validate(2).unwrap_err().is_divergence());
}

#[test]
fn control_vector_parsing_and_range() {
    let cv: ControlVector = "1,2.5,0".parse().unwrap();
    assert_eq!(cv.as_array(), [1.0, 2.5, 0.0]);
    assert!("1,2".parse::<ControlVector>().is_err());
    assert!("1,-2,0".parse::<ControlVector>().is_err());
    assert!("1,x,0".parse::<ControlVector>().is_err());
    assert!(ControlVector::new(0.0, 5.0, 5.0).validate(5.0).is_ok());
    assert!(ControlVector::new(0.0, 5.1, 0.0).validate(5.0).is_err());
    assert_eq!(ControlVector::only(Dimension::Effectiveness).as_array(), [0.0, 0.0, 1.0]);
}

#[test]
fn adapter_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut set = random_adapters(16, &[1], 0.2, 9);
    set.get_mut(Dimension::Feasibility).unwrap().trained = true;
    let path = dir.path().join("a.ckpt");
    set.save(&path).unwrap();
    assert_eq!(AdapterSet::load(&path).unwrap(), set);
}

#[test]
fn steering_gradient_is_nonzero() {
    let m = tiny_model(2);
    let width = m.config.width;
    let trials = 200;
    let mut nonzero = 0;
    for t in 0..trials {
        let tokens = random_tokens(m.vocab.len(), 10, 100 + t);
        let mut tape = Tape::new();
        let vars = m.params.bind(&mut tape, false);
        let w = tape.param(random_matrix(width, width, 0.05, t));
        let hook = steerlab::steer::TapeHook {
            attach_layers: [m.config.layers - 1].into_iter().collect(),
            terms: vec![(w, 1.0)],
        };
        let f = m.forward_tape(&mut tape, &vars, &tokens, Some(&hook)).unwrap();
        let targets: Vec<Option<usize>> = tokens[1..].iter().map(|&x| Some(x)).chain([Some(2)]).collect();
        let loss = tape.cross_entropy(f.logits, &targets).unwrap();
        let g = tape.backward(loss);
        if g.wrt(w).map(|g| g.iter().any(|v| *v != 0.0)).unwrap_or(false) {
            nonzero += 1;
        }
    }
    assert!(nonzero * 100 >= trials * 99, "{nonzero} of {trials}");
}

proptest! {
    #[test]
    fn linear_in_gain(eps in 0.0f64..5.0, k in 0.0f64..3.0, seed in 0u64..1000) {
        let x = random_matrix(4, 8, 1.0, seed);
        let set = random_adapters(8, &[0], 0.3, seed + 1);
        let a = set.get(Dimension::Novelty).unwrap();
        let base = apply_single(&x, a, 0.0).unwrap();
        let one = apply_single(&x, a, eps).unwrap();
        let scaled = apply_single(&x, a, k * eps).unwrap();
        let oracle = &base + &((&one - &base) * k);
        prop_assert!(max_abs_diff(&scaled, &oracle) <= 1e-12 * (1.0 + k * eps) * 10.0);
    }

    #[test]
    fn combined_is_additive(n in 0.0f64..5.0, f in 0.0f64..5.0, e in 0.0f64..5.0, seed in 0u64..1000) {
        let x = random_matrix(3, 8, 1.0, seed);
        let set = random_adapters(8, &[0], 0.3, seed + 7);
        let all = apply_combined(&x, &set, &ControlVector::new(n, f, e)).unwrap();
        let mut parts = x.clone();
        for (d, g) in Dimension::ALL.into_iter().zip([n, f, e]) {
            parts = parts + (apply_single(&x, set.get(d).unwrap(), g).unwrap() - &x);
        }
        prop_assert!(max_abs_diff(&all, &parts) <= 1e-12);
    }

    #[test]
    fn tape_steering_matches_plain(n in 0.0f64..5.0, f in 0.0f64..5.0, seed in 0u64..500) {
        let x = random_matrix(3, 8, 1.0, seed);
        let set = random_adapters(8, &[0], 0.3, seed + 3);
        let cv = ControlVector::new(n, f, 0.0);
        let plain = apply_combined(&x, &set, &cv).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let terms: Vec<_> = Dimension::ALL
            .into_iter()
            .map(|d| (tape.constant(set.get(d).unwrap().w.clone()), cv.get(d)))
            .collect();
        let out = steer_tape(&mut tape, xv, &terms).unwrap();
        prop_assert!(max_abs_diff(tape.value(out), &plain) <= 1e-12);
    }
}
