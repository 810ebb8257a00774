use std::path::PathBuf;

use proptest::prelude::*;
use steerlab::corpus::Dimension;
use steerlab::run::{load_config_file, run_stage, RunConfig, RunManifest, Stage, RUN_MANIFEST};
use steerlab::steer::ControlVector;
use steerlab::Error;

#[test]
fn defaults_round_trip_through_text() {
    let d = RunConfig::default();
    assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
    assert_eq!(RunConfig::KEYS.len(), d.to_text().lines().count());
    assert_eq!(RunConfig::documentation().len(), RunConfig::KEYS.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn any_values_round_trip(
        seed in any::<u64>(),
        n in 1usize..100_000,
        lr in 1e-9f64..10.0,
        kl in 0.0f64..1.0,
        trunk in any::<bool>(),
        eps in proptest::array::uniform3(0.0f64..5.0),
        gains in proptest::collection::vec(0.0f64..8.0, 1..6),
        seeds in proptest::collection::vec(any::<u64>(), 1..5),
        dims in proptest::sample::subsequence(vec![Dimension::Novelty, Dimension::Feasibility, Dimension::Effectiveness], 1..=3),
        out in "[a-z][a-z0-9_/]{0,12}",
        attach in proptest::option::of(0usize..8),
    ) {
        let c = RunConfig {
            seed,
            n,
            rl_lr: lr,
            kl_coef: kl,
            train_trunk: trunk,
            eps: ControlVector::from_array(eps),
            gains,
            sweep_seeds: seeds,
            dimensions: dims,
            out: Some(PathBuf::from(out)),
            attach_layer: attach,
            ..RunConfig::default()
        };
        prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}

#[test]
fn files_skip_comments_and_report_bad_lines() {
    let c = RunConfig::parse("# comment\n\nseed = 9\n  rl_steps=3  \n").unwrap();
    assert_eq!((c.seed, c.rl_steps), (9, 3));
    for (text, line) in [("seed = 1\nnope\n", 2), ("seed = x\n", 1), ("\n\nmystery = 1\n", 3), ("kl_coef = inf\n", 1)] {
        match RunConfig::parse(text) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

#[test]
fn overrides_accept_both_spellings() {
    let mut c = RunConfig::default();
    let args: Vec<String> = ["--rl-lr", "0.5", "--kl_coef=0.25", "--out=a-b/c-d", "--dimensions", "N,E"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    c.apply_overrides(&args).unwrap();
    assert_eq!(c.rl_lr, 0.5);
    assert_eq!(c.kl_coef, 0.25);
    assert_eq!(c.out, Some(PathBuf::from("a-b/c-d")));
    assert_eq!(c.dimensions, vec![Dimension::Novelty, Dimension::Effectiveness]);
    for bad in [vec!["--no-such-key", "1"], vec!["seed", "1"], vec!["--seed"], vec!["--seed", "minus"]] {
        let bad: Vec<String> = bad.iter().map(|s| s.to_string()).collect();
        assert!(matches!(RunConfig::default().apply_overrides(&bad), Err(Error::Config { .. })), "{bad:?}");
    }
}

#[test]
fn missing_required_path_is_a_config_error() {
    let c = RunConfig::default();
    assert!(matches!(c.require_path("corpus"), Err(Error::Config { .. })));
    assert!(matches!(run_stage(Stage::Sft, &c), Err(Error::Config { .. })));
    assert!(matches!(c.require_path("not_a_key"), Err(Error::Config { .. })));
}

#[test]
fn stage_names_round_trip() {
    for s in Stage::ALL {
        assert_eq!(Stage::from_name(s.name()), Some(s));
    }
    assert_eq!(Stage::from_name("train_rewards"), None);
}

#[test]
fn manifests_replay_their_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    let mut c = RunConfig::default();
    c.apply_overrides(&["--n".into(), "30".into(), "--seed".into(), "4".into()]).unwrap();
    c.out = Some(out.clone());
    let first = run_stage(Stage::Synth, &c).unwrap();
    let manifest_path = out.join(RUN_MANIFEST);
    assert_eq!(RunManifest::load(&manifest_path).unwrap(), first.manifest);
    assert!(first.manifest.outputs.contains_key("ideas.jsonl"));

    let mut replay = RunConfig::default();
    assert!(load_config_file(&manifest_path, &mut replay).unwrap().is_some());
    assert_eq!(replay, c);
    let plain = dir.path().join("plain.conf");
    std::fs::write(&plain, "n = 12\n").unwrap();
    let mut p = RunConfig::default();
    assert!(load_config_file(&plain, &mut p).unwrap().is_none());
    assert_eq!(p.n, 12);

    let again = run_stage(Stage::Synth, &replay).unwrap();
    assert_eq!(again.manifest, first.manifest);
}
