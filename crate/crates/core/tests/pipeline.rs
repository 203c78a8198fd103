use std::collections::BTreeMap;

use damagelab::experiment::{build_report, collect_summaries, verify_manifest, write_run_artifacts};
use damagelab::stats::SeedSummary;
use damagelab::train::{train_run, Condition, TrainSpec};
use damagelab::PresetId;

#[test]
fn short_run_round_trips_through_artifacts_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut summaries = Vec::new();
    for seed in 0..2 {
        let spec = TrainSpec {
            eval_episodes: 10,
            ..TrainSpec::new(PresetId::Bricklayer, Condition::ppo_real(), seed, 2048)
        };
        let outcome = train_run(&spec).unwrap();
        let run_dir = dir.path().join(format!("seed{seed}"));
        let manifest = write_run_artifacts(&run_dir, &spec, &outcome).unwrap();
        assert_eq!(manifest.config_hash, spec.env.hash());
        assert!(verify_manifest(&run_dir).unwrap().is_empty());

        let read = SeedSummary::read(&run_dir.join("summary.json")).unwrap();
        assert_eq!(read, outcome.summary);
        let first = &outcome.episodes[0];
        let trajectory = std::fs::read_to_string(run_dir.join("trajectory.csv")).unwrap();
        assert_eq!(trajectory.lines().count(), first.length + 1);
        summaries.push(read);
    }
    let found = collect_summaries(dir.path()).unwrap();
    assert_eq!(found.len(), 2);
    let rows = build_report(&summaries, &BTreeMap::from([(PresetId::Bricklayer, 0.5)])).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].seeds, 2);
}

#[test]
fn identical_specs_give_identical_summaries() {
    let spec = TrainSpec {
        eval_episodes: 5,
        ..TrainSpec::new(PresetId::Nba, Condition::dyna_unrestricted(), 4, 1024)
    };
    let a = train_run(&spec).unwrap();
    let b = train_run(&spec).unwrap();
    assert_eq!(a.summary, b.summary);
    assert_eq!(a.params, b.params);
}
