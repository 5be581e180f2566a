use remind_core::datasets::ViewSelector;
use remind_core::runner::{run_experiment, Experiment, ExperimentConfig};
use remind_core::synthetic::{generate_workspace, SyntheticSpec};

fn small_workspace(dir: &std::path::Path) -> ExperimentConfig {
    let spec = SyntheticSpec {
        per_class: 15,
        paraphrases: true,
        ..SyntheticSpec::default()
    };
    let mut cfg = generate_workspace(dir, &spec).unwrap().config;
    cfg.k = 5;
    cfg.forest_n_trees = 15;
    cfg
}

#[test]
fn run_writes_every_artifact_for_both_arms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_workspace(dir.path());
    let report = run_experiment(&cfg).unwrap();
    let out = &cfg.output_dir;
    for f in [
        "report.csv",
        "report.txt",
        "scores.csv",
        "run-manifest.json",
        "features.csv",
        "features-reph.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    for d in ["histograms", "histograms-reph"] {
        let svgs = std::fs::read_dir(out.join(d))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
            .count();
        assert_eq!(svgs, 14, "{d}");
    }
    for arm in [ViewSelector::Original, ViewSelector::Paraphrased] {
        assert!(report.row("loss", arm).is_some());
        assert!(report.row("remind-random-forest", arm).is_some());
    }

    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("method,arm,evaluated_on,samples,retain_vs_all_auc"));
    assert!(header.ends_with("config_hash"));
    assert_eq!(csv.lines().count(), 1 + 2 * (7 + 2));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run-manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], cfg.seed);
    assert_eq!(manifest["config_hash"], cfg.config_hash());
}

#[test]
fn same_seed_same_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_workspace(dir.path());
    cfg.views = vec![ViewSelector::Original];
    run_experiment(&cfg).unwrap();
    let first = std::fs::read(cfg.output_dir.join("report.csv")).unwrap();
    cfg.output_dir = dir.path().join("again");
    run_experiment(&cfg).unwrap();
    assert_eq!(first, std::fs::read(cfg.output_dir.join("report.csv")).unwrap());
}

#[test]
fn replay_only_with_cold_cache_fails_as_oracle_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_workspace(dir.path());
    cfg.cache_path = Some(dir.path().join("empty.jsonl"));
    cfg.replay_only = true;
    let err = Experiment::prepare(&cfg).and_then(|e| e.warm_cache()).unwrap_err();
    assert!(err.is_oracle(), "{err}");
}

#[test]
fn warm_cache_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_workspace(dir.path());
    cfg.views = vec![ViewSelector::Original];
    cfg.cache_path = Some(dir.path().join("cache.jsonl"));
    let n = Experiment::prepare(&cfg).unwrap().warm_cache().unwrap();
    assert_eq!(n, 45);
    cfg.replay_only = true;
    let exp = Experiment::prepare(&cfg).unwrap();
    exp.score_baselines().unwrap();
    assert_eq!(exp.cache_stats().unwrap().misses, 0);
}

#[test]
fn config_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_workspace(dir.path());
    let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
    assert_eq!(again.config_hash(), cfg.config_hash());
}
