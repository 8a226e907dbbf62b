use std::io::Write;

use gdkl::harness::{run_experiment, ExperimentConfig, Method, MetricsReport, REPORT_SCHEMA_VERSION};
use gdkl::Error;

fn config(text: &str, overrides: &[(&str, &str)]) -> ExperimentConfig {
    let o: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    ExperimentConfig::from_toml_str(text, &o).unwrap()
}

#[test]
fn gp_rbf_on_toy_data_widens_in_the_gap() {
    let c = config("method = \"GP-RBF\"\ndataset = \"builtin:toy\"\n[train]\ntotal_steps = 600\n", &[]);
    let report = run_experiment(&c).unwrap();
    assert_eq!(report.failed_folds, 0);
    let m = &report.folds[0].metrics;
    assert!(m["test_ll"].is_finite() && m["rmse"].is_finite());
    assert!(m["std_at_6"] > m["std_at_2"], "{m:?}");
}

#[test]
fn identical_configs_give_identical_reports() {
    let text = "method = \"GDKL\"\ndataset = \"builtin:blobs\"\ntask = \"classification\"\nnum_classes = 3\n\
                split_mode = \"resplit\"\nfolds = 2\ntest_fraction = 0.2\nseeds = [4]\n\
                [train]\nhidden = [8, 2]\ntotal_steps = 30\npretrain_steps = 20\n";
    let a = run_experiment(&config(text, &[])).unwrap().to_json().unwrap();
    let b = run_experiment(&config(text, &[])).unwrap().to_json().unwrap();
    assert_eq!(a, b);
    let report: MetricsReport = serde_json::from_str(&a).unwrap();
    assert_eq!(report.schema_version, REPORT_SCHEMA_VERSION);
    assert_eq!(report.folds.len(), 2);
    for f in &report.folds {
        assert!(f.error.is_none());
        let bins = f.calibration.as_ref().expect("classification emits reliability bins");
        assert_eq!(bins.len(), 15);
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), f.test_size);
        for k in ["accuracy", "test_ll", "ece", "mce", "brier"] {
            assert!(f.metrics[k].is_finite(), "{k}");
        }
    }
}

#[test]
fn unknown_method_fails_before_any_compute() {
    let e = ExperimentConfig::from_toml_str("method = \"RandomForest\"\ndataset = \"/does/not/exist.csv\"", &[])
        .unwrap_err();
    assert!(matches!(e, Error::Config(_)));
}

#[test]
fn every_method_name_parses() {
    for m in Method::ALL {
        let c = config(&format!("method = \"{}\"", m.name()), &[]);
        assert_eq!(c.method, m);
    }
}

#[test]
fn csv_experiment_writes_report_in_original_units() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("line.csv");
    let mut f = std::fs::File::create(&csv).unwrap();
    writeln!(f, "x,y").unwrap();
    for i in 0..40 {
        let x = i as f64 / 4.0;
        writeln!(f, "{x},{}", 1000.0 + 50.0 * x + (i % 3) as f64).unwrap();
    }
    drop(f);
    let out = dir.path().join("report.json");
    let c = config(
        "method = \"GP-RBF\"\nfolds = 4\n[train]\ntotal_steps = 300\n",
        &[("dataset", csv.to_str().unwrap()), ("output", out.to_str().unwrap())],
    );
    let report = run_experiment(&c).unwrap();
    let written: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(written, report);
    assert_eq!(report.folds.len(), 4);
    let rmse = report.aggregate["rmse"].mean;
    // targets span ~500 units with unit-scale wiggle; normalized-unit RMSE would be ~0.01
    assert!(rmse > 0.1 && rmse < 5.0, "rmse {rmse}");
}

#[test]
fn diverging_fold_is_recorded_not_dropped() {
    let c = config(
        "method = \"GP-RBF\"\nfolds = 2\nseeds = [0]\n[train]\ntotal_steps = 200\nlearning_rate = 1e6\n",
        &[("dataset", "builtin:blobs"), ("task", "classification"), ("num_classes", "3")],
    );
    let report = run_experiment(&c).unwrap();
    assert_eq!(report.folds.len(), 2);
    assert_eq!(report.failed_folds, report.folds.iter().filter(|f| f.error.is_some()).count());
    assert!(report.failed_folds > 0, "{:?}", report.folds);
    for f in report.folds.iter().filter(|f| f.error.is_some()) {
        assert!(f.metrics.is_empty());
    }
}
