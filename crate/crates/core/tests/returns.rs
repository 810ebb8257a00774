use ndarray::Array2;
use proptest::prelude::*;
use steerlab::autograd::Tape;
use steerlab::rl::{assign_terminal_reward, gae, ppo_surrogate, value_targets};

/// `A_t = Σ_l (γλ)^l δ_{t+l}`.
fn gae_oracle(r: &[f64], v: &[f64], boot: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let k = r.len();
    let next = |t: usize| if t + 1 < k { v[t + 1] } else { boot };
    (0..k)
        .map(|t| {
            (t..k)
                .map(|j| (gamma * lambda).powi((j - t) as i32) * (r[j] + gamma * next(j) - v[j]))
                .sum()
        })
        .collect()
}

/// `Σ_{j≥t} γ^{j−t} r_j + γ^{K−t} V(s_K)`.
fn targets_oracle(r: &[f64], boot: f64, gamma: f64) -> Vec<f64> {
    let k = r.len();
    (0..k)
        .map(|t| (t..k).map(|j| gamma.powi((j - t) as i32) * r[j]).sum::<f64>() + gamma.powi((k - t) as i32) * boot)
        .collect()
}

fn episode() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64, f64, f64)> {
    (3usize..=8).prop_flat_map(|k| {
        (
            prop::collection::vec(-2.0f64..2.0, k),
            prop::collection::vec(-2.0f64..2.0, k),
            -2.0f64..2.0,
            0.5f64..=1.0,
            0.0f64..=1.0,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn gae_matches_double_sum((r, v, boot, gamma, lambda) in episode()) {
        let a = gae(&r, &v, boot, gamma, lambda).unwrap();
        for (x, y) in a.iter().zip(gae_oracle(&r, &v, boot, gamma, lambda)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn value_targets_match_double_sum((r, _v, boot, gamma, _l) in episode()) {
        for (x, y) in value_targets(&r, boot, gamma).iter().zip(targets_oracle(&r, boot, gamma)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn lambda_one_advantage_is_return_minus_value((r, v, boot, gamma, _l) in episode()) {
        let a = gae(&r, &v, boot, gamma, 1.0).unwrap();
        let g = value_targets(&r, boot, gamma);
        for t in 0..r.len() {
            prop_assert!((a[t] - (g[t] - v[t])).abs() <= 1e-12);
        }
    }

    #[test]
    fn surrogate_matches_elementwise_oracle(
        rows in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -3.0f64..3.0), 1..40),
        clip in 0.05f64..0.5,
    ) {
        let new: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let old: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let adv: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let oracle: f64 = rows
            .iter()
            .map(|&(n, o, a)| {
                let rho = (n - o).exp();
                let c = if rho < 1.0 - clip { 1.0 - clip } else if rho > 1.0 + clip { 1.0 + clip } else { rho };
                if rho * a < c * a { rho * a } else { c * a }
            })
            .sum::<f64>() / rows.len() as f64;
        let s = ppo_surrogate(&new, &old, &adv, clip).unwrap();
        prop_assert!((s - oracle).abs() <= 1e-12);
        let mut tape = Tape::new();
        let lp = tape.constant(Array2::from_shape_vec((new.len(), 1), new.clone()).unwrap());
        let t = tape.clipped_surrogate(lp, &old, &adv, clip).unwrap();
        prop_assert!((tape.scalar(t) - oracle).abs() <= 1e-12);
    }

    #[test]
    fn unit_ratio_gives_mean_advantage(
        rows in prop::collection::vec((-5.0f64..5.0, -3.0f64..3.0), 1..40),
        clip in 0.05f64..0.5,
    ) {
        let lp: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let adv: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        prop_assert_eq!(ppo_surrogate(&lp, &lp, &adv, clip).unwrap(), mean);
    }
}

#[test]
fn terminal_reward_sits_on_last_token() {
    assert_eq!(assign_terminal_reward(4, 0.5, 2.0).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
    assert!(assign_terminal_reward(0, 0.5, 1.0).is_err());
}

#[test]
fn mismatched_lengths_are_errors() {
    assert!(gae(&[1.0], &[1.0, 2.0], 0.0, 1.0, 1.0).is_err());
    assert!(ppo_surrogate(&[0.0], &[0.0, 0.0], &[1.0], 0.2).is_err());
    assert!(ppo_surrogate(&[], &[], &[], 0.2).is_err());
    assert!(ppo_surrogate(&[800.0], &[-800.0], &[1.0], 0.2).unwrap_err().is_divergence());
}
