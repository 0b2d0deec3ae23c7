use std::path::Path;

use robustsim::bench::runner::*;
use robustsim::Error;
use serde_json::{json, Value};

fn config(kind: ExperimentKind, threads: usize, params: Value) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(kind);
    c.seed = 3;
    c.threads = threads;
    c.params = params;
    c
}

/// Pretrain (short) and one FARE epoch into `root`.
fn prepare(root: &Path, threads: usize) {
    run_experiment(&config(ExperimentKind::Pretrain, threads, json!({"config": {"epochs": 2}, "train_per_class": 16})), root).unwrap();
    run_experiment(&config(ExperimentKind::Advtune, threads, json!({"per_class": 8, "config": {"epochs": 1}})), root).unwrap();
}

fn eval_config(threads: usize, attacks: &[&str]) -> ExperimentConfig {
    config(
        ExperimentKind::Eval2afc,
        threads,
        json!({"encoder": "robust.prpt", "count": 12, "attacks": attacks, "attack": {"iterations": 10}}),
    )
}

#[test]
fn zero_radius_attack_leaves_accuracy_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), 1);
    let r = run_experiment(&eval_config(1, &["linf:0", "l2:0"]), dir.path()).unwrap();
    let clean = r.metrics["clean_accuracy"].as_f64().unwrap();
    for a in r.metrics["attacks"].as_array().unwrap() {
        assert_eq!(a["robust_accuracy"].as_f64().unwrap(), clean);
        assert_eq!(a["clean_accuracy"].as_f64().unwrap(), clean);
    }
}

#[test]
fn single_threaded_pipeline_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for root in [a.path(), b.path()] {
        prepare(root, 1);
        run_experiment(&eval_config(1, &["linf:4/255"]), root).unwrap();
    }
    for name in ["pretrain.report.json", "advtune.report.json", "eval-2afc.report.json", "encoder.prpt", "robust.prpt"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn metrics_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), 1);
    let one = run_experiment(&eval_config(1, &["linf:4/255"]), dir.path()).unwrap();
    let many = run_experiment(&eval_config(2, &["linf:4/255"]), dir.path()).unwrap();
    assert_eq!(one.metrics, many.metrics);
}

#[test]
fn echoed_config_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), 1);
    let first = run_experiment(&eval_config(1, &["linf:4/255"]), dir.path()).unwrap();
    let echoed: ExperimentConfig = serde_json::from_value(first.config.clone()).unwrap();
    let again = run_experiment(&echoed, dir.path()).unwrap();
    assert_eq!(first, again);
}

#[test]
fn every_report_validates_against_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    prepare(root, 0);
    let small_inv = json!({"iterations": 5});
    let runs = [
        eval_config(0, &["linf:4/255", "l2:0.5"]),
        config(ExperimentKind::EvalRetrieval, 0, json!({"pool_per_class": 3, "query_per_class": 1, "config": {"iterations": 3}, "pool_out": "pool.pemb"})),
        config(ExperimentKind::Invert, 0, json!({"count": 2, "config": small_inv})),
        ExperimentConfig {
            report: Some("invert-text.report.json".into()),
            ..config(ExperimentKind::Invert, 0, json!({"mode": "text", "pool_per_class": 2, "config": small_inv}))
        },
        config(ExperimentKind::CrossJudge, 0, json!({"count": 2, "config": small_inv})),
    ];
    for c in &runs {
        run_experiment(c, root).unwrap();
    }
    // nsfw uses its own three-class data, so it needs an encoder trained on it
    let mut nsfw_pre = config(ExperimentKind::Pretrain, 0, json!({"config": {"epochs": 1}, "train_per_class": 8, "encoder_out": "e3.prpt", "prompts_out": "p3.prpt"}));
    nsfw_pre.data = Some(robustsim::bench::synth::SyntheticSpec::three_class());
    nsfw_pre.report = Some("pretrain3.report.json".into());
    run_experiment(&nsfw_pre, root).unwrap();
    run_experiment(&config(ExperimentKind::Nsfw, 0, json!({"encoder": "e3.prpt", "pool_per_class": 3, "query_per_class": 2, "targets": 2, "config": {"iterations": 3}})), root).unwrap();

    let mut seen = 0;
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        if path.to_string_lossy().ends_with(".report.json") {
            let v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
            validate_report(&v).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            for a in v["artifacts"].as_array().unwrap() {
                assert!(root.join(a.as_str().unwrap()).exists(), "missing artifact {a}");
            }
            seen += 1;
        }
    }
    assert_eq!(seen, 9);
}

#[test]
fn schema_rejects_malformed_reports() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_experiment(&config(ExperimentKind::Pretrain, 0, json!({"config": {"epochs": 1}, "train_per_class": 4})), dir.path()).unwrap();
    let good = serde_json::to_value(&r).unwrap();
    validate_report(&good).unwrap();
    for (field, bad) in [("kind", json!("train")), ("seed", json!(-1)), ("metrics", json!([])), ("artifacts", json!([3]))] {
        let mut v = good.clone();
        v[field] = bad;
        assert!(validate_report(&v).is_err(), "{field}");
    }
    let mut v = good;
    v.as_object_mut().unwrap().remove("toolkit_version");
    assert!(validate_report(&v).is_err());
}

#[test]
fn unknown_kind_is_a_config_error() {
    let text = r#"{"kind":"distill","seed":0,"threads":1,"record_wall_time":false,"params":null}"#;
    assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))));
    assert!(matches!(ExperimentKind::parse("eval2afc"), Err(Error::Config(_))));
    for k in ExperimentKind::ALL {
        assert_eq!(ExperimentKind::parse(k.tag()).unwrap(), k);
        assert_eq!(serde_json::to_value(k).unwrap(), json!(k.tag()));
    }
}

#[test]
fn bad_params_and_missing_inputs_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = config(ExperimentKind::Eval2afc, 0, json!({"count": "many"}));
    assert!(matches!(run_experiment(&bad, dir.path()), Err(Error::Config(_))));
    let missing = config(ExperimentKind::Eval2afc, 0, json!({"encoder": "nope.prpt"}));
    assert!(matches!(run_experiment(&missing, dir.path()), Err(Error::Io(_))));
}

#[test]
fn wall_time_is_recorded_only_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(ExperimentKind::Pretrain, 0, json!({"config": {"epochs": 1}, "train_per_class": 4}));
    let r = run_experiment(&c, dir.path()).unwrap();
    assert!(r.wall_time_seconds.is_none());
    assert!(!std::fs::read_to_string(dir.path().join(c.report_name())).unwrap().contains("wall_time_seconds"));
    c.record_wall_time = true;
    let r = run_experiment(&c, dir.path()).unwrap();
    assert!(r.wall_time_seconds.unwrap() > 0.0);
}
