use std::fs;
use std::path::Path;

use fedapa::config::ExperimentConfig;
use fedapa::runner::{run_experiment, METRICS_COLUMNS};
use fedapa::summary::{format_table, print_summary, read_summary, SummaryError};
use fedapa_core::federation::Mode;

fn small(out: &Path, mode: Mode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.out = out.to_path_buf();
    cfg.mode = mode;
    cfg.rounds = 4;
    cfg.synth.num_clients = 3;
    cfg.synth.num_classes = 5;
    cfg.synth.input_dim = 8;
    cfg.synth.samples_per_client = 80;
    cfg.d_feat = 16;
    cfg.warmup.t_warm = 2;
    cfg
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&small(dir.path(), Mode::FedApa)).unwrap();
    for f in ["metrics.csv", "trace.jsonl", "rounds.jsonl", "cost.json", "summary.json", "manifest.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), METRICS_COLUMNS.join(","));
    assert_eq!(lines.count(), 4 * 3);
    let trace = fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 4 * 3);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let text = manifest["config_text"].as_str().unwrap();
    assert_eq!(ExperimentConfig::parse(text).unwrap(), small(dir.path(), Mode::FedApa));
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));

    assert_eq!(read_summary(dir.path()).unwrap(), outcome.summary);
}

#[test]
fn local_only_exchanges_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&small(dir.path(), Mode::LocalOnly)).unwrap();
    for m in &outcome.history {
        assert!(m.clients.iter().all(|c| c.bytes_up == 0 && c.bytes_down == 0));
    }
    assert!(!dir.path().join("rounds.jsonl").exists());
    assert_eq!(outcome.summary.kb_per_round, 0.0);
}

#[test]
fn same_seed_same_bytes_in_either_executor() {
    let dir = tempfile::tempdir().unwrap();
    let read = |sub: &str, parallel: bool| {
        let mut cfg = small(&dir.path().join(sub), Mode::FedApa);
        cfg.parallel = parallel;
        cfg.seed = 9;
        run_experiment(&cfg).unwrap();
        fs::read(dir.path().join(sub).join("metrics.csv")).unwrap()
    };
    let a = read("a", true);
    assert_eq!(a, read("b", true));
    assert_eq!(a, read("c", false));
}

#[test]
fn default_cost_column_reads_150_53() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.out = dir.path().to_path_buf();
    cfg.rounds = 1;
    cfg.synth.samples_per_client = 120;
    let outcome = run_experiment(&cfg).unwrap();
    assert_eq!(outcome.summary.bytes_per_round, 150_528.0);
    let table = print_summary(&[dir.path().to_path_buf()]).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().trim_end().ends_with("150.53"), "{table}");
}

#[test]
fn missing_summary_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    match print_summary(&[missing.clone()]) {
        Err(e @ SummaryError::Io { .. }) => {
            assert!(e.to_string().contains(&missing.join("summary.json").display().to_string()));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn table_has_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&small(dir.path(), Mode::UniformProto)).unwrap();
    let table = format_table(&[outcome.summary]);
    assert_eq!(table.lines().count(), 2);
    assert!(table.contains("uniform_proto"));
}
