use bcr_core::harness::{
    compare_report, expand_matrix, load_artifacts, preset, run_matrix, run_one, AlgorithmRuns, ExperimentConfig,
    RunOptions,
};
use bcr_core::ppo::Algorithm;

fn tiny(name: &str) -> ExperimentConfig {
    preset(name)
        .unwrap()
        .with_overrides(&[
            "training.epochs=4".into(),
            "training.max_steps=30".into(),
            "exploration.horizon=30".into(),
            "kitchen.horizon=30".into(),
            "eval_episodes=3".into(),
            "training.checkpoint_interval=2".into(),
        ])
        .unwrap()
}

#[test]
fn matrix_results_are_ordered_and_failures_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = tiny("exploration_bcr");
    base.seeds = vec![7, 8];
    let mut configs = expand_matrix(&base, &[Algorithm::Bcr, Algorithm::Causal]);
    let mut broken = configs[1].clone();
    broken.exploration.layout_file = dir.path().join("missing.txt");
    broken.training.seed = 99;
    configs.insert(1, broken);
    let mut opts = RunOptions::new(dir.path());
    opts.workers = 3;
    let results = run_matrix(&configs, &opts);
    assert_eq!(results.len(), 5);
    let err = results[1].as_ref().unwrap_err();
    assert_eq!(err.seed, 99);
    assert_eq!(err.error.exit_code(), 2);
    for (cfg, r) in configs.iter().zip(&results).filter(|(_, r)| r.is_ok()) {
        let a = r.as_ref().unwrap();
        assert_eq!(a.summary.seed, cfg.training.seed);
        assert_eq!(a.summary.algorithm, cfg.algorithm);
        assert_eq!(a.summary.config_hash, cfg.hash());
        assert_eq!(a.metrics.len(), 4);
        assert!(a.dir.join("checkpoints/epoch-00002.ckpt").exists());
        assert!(a.dir.join("checkpoints/epoch-00004.ckpt").exists());
        let saved = ExperimentConfig::from_toml(&std::fs::read_to_string(a.dir.join("config.toml")).unwrap()).unwrap();
        assert_eq!(&saved, cfg);
    }

    let loaded = load_artifacts(dir.path()).unwrap();
    assert_eq!(loaded.len(), 4);
    let groups = AlgorithmRuns::group(&loaded);
    assert_eq!(groups.len(), 2);
    assert_eq!(groups[0].seeds, vec![7, 8]);
    let report = compare_report(&groups, &base.report).unwrap();
    let again = compare_report(&AlgorithmRuns::group(&load_artifacts(dir.path()).unwrap()), &base.report).unwrap();
    assert_eq!(report.to_text(), again.to_text());
    assert_eq!(report.to_csv(), again.to_csv());
    assert_eq!(report.plot_csv().lines().count(), 5);
}

#[test]
fn reruns_reproduce_metrics_and_weights() {
    let cfg = tiny("kitchen_bcr").for_run(Algorithm::Bcr, 3);
    let a = run_one(&cfg, &RunOptions::new(tempfile::tempdir().unwrap().path())).unwrap();
    let b = run_one(&cfg, &RunOptions::new(tempfile::tempdir().unwrap().path())).unwrap();
    let strip = |m: &[bcr_core::ppo::EpochMetrics]| m.iter().map(|r| r.without_timing()).collect::<Vec<_>>();
    assert_eq!(strip(&a.metrics), strip(&b.metrics));
    assert_eq!(a.params, b.params);
    assert_eq!(a.eval, b.eval);
}

#[test]
fn resolved_config_roundtrips_through_toml_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    let cfg = tiny("kitchen_causal");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let back = ExperimentConfig::load(path.to_str().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    std::fs::write(&path, cfg.to_toml().replace("version = 1", "version = 2")).unwrap();
    assert_eq!(ExperimentConfig::load(path.to_str().unwrap()).unwrap_err().exit_code(), 2);
    std::fs::write(&path, format!("{}\nsurprise = 1\n", cfg.to_toml())).unwrap();
    assert!(ExperimentConfig::load(path.to_str().unwrap()).is_err());
}
