//! End-to-end experiment runs and their output files.
//!
//! A run directory holds:
//!
//! - `metrics.csv`: one row per `(round, client)`, columns in [`METRICS_COLUMNS`] order
//! - `trace.jsonl`: one convergence-trace record per `(round, client)`
//! - `rounds.jsonl`: one server log per round (absent for `local_only`)
//! - `cost.json`: communication accounting
//! - `summary.json`: last-5-round means plus diagnostic reports
//! - `manifest.json`: resolved config and crate version

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fedapa_core::client::ClientState;
use fedapa_core::data::{generate_synthetic, ClientDataset};
use fedapa_core::diagnostics::{
    agg_lipschitz_reference, descent_check, movement_check, schedule_change_vanishes,
    stationarity_summary, ConvergenceTrace, DescentReport, MovementReport, StationarityReport,
};
use fedapa_core::federation::{Executor, Federation, Sequential};
use fedapa_core::metrics::{tail_summary, CostModel, RoundMetrics};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, DataSource, ExperimentConfig};
use crate::csv_io::{load_dataset_csv, CsvError};

/// Parameter count of the model-sharing reference network.
pub const REFERENCE_MODEL_PARAMS: u64 = 463_750;

/// Rounds averaged for reported metrics.
pub const TAIL_ROUNDS: usize = 5;

/// Slack factor on the prototype-movement bound.
pub const MOVEMENT_FACTOR: f64 = 1.05;

/// Moving-average width for the descent check.
pub const DESCENT_WINDOW: usize = 10;

pub const METRICS_COLUMNS: [&str; 13] = [
    "round",
    "client",
    "accuracy",
    "macro_f1",
    "mae",
    "loss_total",
    "loss_ce",
    "loss_lg",
    "loss_lc",
    "lambda",
    "grad_norm_sq_sum",
    "bytes_up",
    "bytes_down",
];

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Csv(#[from] CsvError),
    #[error("{0}")]
    Core(#[from] fedapa_core::Error),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl RunError {
    /// 2 for configuration problems, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 3,
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        RunError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

/// Client updates on the rayon pool. Results come back in client order, so
/// runs match [`Sequential`] bit for bit.
#[derive(Debug, Clone, Copy, Default)]
pub struct Parallel;

impl Executor for Parallel {
    fn map_clients<R, F>(&self, clients: &mut [ClientState], f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(&mut ClientState) -> R + Sync,
    {
        clients.par_iter_mut().map(|c| f(c)).collect()
    }
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Vec<ClientDataset>, RunError> {
    match &cfg.source {
        DataSource::Synthetic => Ok(generate_synthetic(&cfg.synth_spec())?),
        DataSource::Csv(path) => Ok(load_dataset_csv(path, cfg.synth.train_fraction, cfg.seed)?),
    }
}

pub fn build_federation(cfg: &ExperimentConfig) -> Result<Federation, RunError> {
    cfg.validate()?;
    let data = load_datasets(cfg)?;
    let settings = cfg.run_settings(data.len())?;
    Ok(Federation::new(settings, data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub d_feat: usize,
    pub num_classes: usize,
    pub num_clients: usize,
    pub bytes_per_param: u64,
    pub kilobyte: u64,
    /// Per-client bytes of a round with complete prototype sets.
    pub fedapa_round_bytes: u64,
    pub fedapa_round_kb: f64,
    pub reference_model_params: u64,
    pub model_sharing_round_bytes: u64,
    pub model_sharing_round_kb: f64,
    pub reduction: f64,
    /// Parameters of each client's model in this run.
    pub run_model_params: Vec<usize>,
    /// Mean per-client bytes actually exchanged per round.
    pub measured_bytes_per_round: f64,
}

pub fn cost_report(cost: &CostModel, run_params: Vec<usize>, history: &[RoundMetrics]) -> CostReport {
    let fedapa = cost.fedapa_complete_round_bytes();
    let sharing = cost.model_sharing_round_bytes(REFERENCE_MODEL_PARAMS);
    let measured = if history.is_empty() {
        0.0
    } else {
        history.iter().map(RoundMetrics::mean_bytes).sum::<f64>() / history.len() as f64
    };
    CostReport {
        d_feat: cost.d_feat,
        num_classes: cost.num_classes,
        num_clients: cost.num_clients,
        bytes_per_param: cost.bytes_per_param,
        kilobyte: cost.kilobyte,
        fedapa_round_bytes: fedapa,
        fedapa_round_kb: cost.kb(fedapa),
        reference_model_params: REFERENCE_MODEL_PARAMS,
        model_sharing_round_bytes: sharing,
        model_sharing_round_kb: cost.kb(sharing),
        reduction: cost.reduction(REFERENCE_MODEL_PARAMS),
        run_model_params: run_params,
        measured_bytes_per_round: measured,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub movement: Option<MovementReport>,
    pub descent: Option<DescentReport>,
    pub stationarity: Option<StationarityReport>,
    /// Why a report above is missing.
    pub notes: Vec<String>,
    pub schedule_flat_after_warmup: bool,
    pub agg_lipschitz_max: Option<f64>,
    pub agg_lipschitz_reference: f64,
}

fn keep<T>(notes: &mut Vec<String>, name: &str, r: fedapa_core::Result<T>) -> Option<T> {
    r.map_err(|e| notes.push(format!("{name}: {e}"))).ok()
}

pub fn diagnose(trace: &ConvergenceTrace, num_clients: usize, tau_agg: f64) -> DiagnosticsSummary {
    let mut notes = Vec::new();
    let movement = keep(&mut notes, "movement", movement_check(trace, MOVEMENT_FACTOR));
    let descent = keep(&mut notes, "descent", descent_check(trace, DESCENT_WINDOW, None));
    let post_warm_steps = trace
        .records
        .iter()
        .filter(|r| r.t >= trace.warm_start())
        .map(|r| r.steps)
        .min()
        .unwrap_or(0);
    let rounds_after = (trace.last_round() + 1).saturating_sub(trace.warm_start());
    let stationarity = keep(
        &mut notes,
        "stationarity",
        stationarity_summary(trace, (post_warm_steps * rounds_after).max(1)),
    );
    DiagnosticsSummary {
        movement,
        descent,
        stationarity,
        notes,
        schedule_flat_after_warmup: schedule_change_vanishes(trace),
        agg_lipschitz_max: trace
            .records
            .iter()
            .filter_map(|r| r.agg_lipschitz)
            .reduce(f64::max),
        agg_lipschitz_reference: agg_lipschitz_reference(num_clients, tau_agg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub seed: u64,
    pub rounds: usize,
    pub num_clients: usize,
    pub tail_rounds: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mae: f64,
    pub bytes_per_round: f64,
    pub kb_per_round: f64,
    pub diagnostics: DiagnosticsSummary,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    crate_name: &'static str,
    version: &'static str,
    core_version: &'static str,
    config_text: String,
    config: &'a ExperimentConfig,
}

/// Where a finished run put its files, plus what it computed.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub summary: RunSummary,
    pub cost: CostReport,
    pub trace: ConvergenceTrace,
    pub history: Vec<RoundMetrics>,
}

fn create(path: &Path) -> Result<BufWriter<File>, RunError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| RunError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| RunError::io(path, e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| RunError::io(path, e))
}

fn metrics_rows(m: &RoundMetrics) -> impl Iterator<Item = [String; 13]> + '_ {
    m.clients.iter().map(move |c| {
        [
            m.t.to_string(),
            c.client.to_string(),
            c.accuracy.to_string(),
            c.macro_f1.to_string(),
            c.mae.to_string(),
            c.loss.total.to_string(),
            c.loss.ce.to_string(),
            c.loss.lg.to_string(),
            c.loss.lc.to_string(),
            m.lambda_t.to_string(),
            c.grad_norm_sq_sum.to_string(),
            c.bytes_up.to_string(),
            c.bytes_down.to_string(),
        ]
    })
}

/// Runs `cfg` to completion and writes the run directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let mut fed = build_federation(cfg)?;
    let out = cfg.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| RunError::io(&out, e))?;

    let metrics_path = out.join("metrics.csv");
    let mut metrics = csv::Writer::from_writer(create(&metrics_path)?);
    metrics
        .write_record(METRICS_COLUMNS)
        .map_err(|e| RunError::io(&metrics_path, e))?;
    let trace_path = out.join("trace.jsonl");
    let mut trace_w = create(&trace_path)?;
    let rounds_path = out.join("rounds.jsonl");
    let mut rounds_w = if cfg.mode.exchanges() {
        Some(create(&rounds_path)?)
    } else {
        let _ = std::fs::remove_file(&rounds_path);
        None
    };

    let mut written = 0usize;
    while fed.round() < fed.settings.rounds {
        let report = if cfg.parallel {
            fed.step(&Parallel)?
        } else {
            fed.step(&Sequential)?
        };
        for row in metrics_rows(&report.metrics) {
            metrics
                .write_record(&row)
                .map_err(|e| RunError::io(&metrics_path, e))?;
        }
        for rec in &fed.trace.records[written..] {
            serde_json::to_writer(&mut trace_w, rec).map_err(|e| RunError::io(&trace_path, e))?;
            writeln!(trace_w).map_err(|e| RunError::io(&trace_path, e))?;
        }
        written = fed.trace.records.len();
        if let (Some(w), Some(log)) = (rounds_w.as_mut(), report.log.as_ref()) {
            serde_json::to_writer(&mut *w, log).map_err(|e| RunError::io(&rounds_path, e))?;
            writeln!(w).map_err(|e| RunError::io(&rounds_path, e))?;
        }
    }
    metrics.flush().map_err(|e| RunError::io(&metrics_path, e))?;
    trace_w.flush().map_err(|e| RunError::io(&trace_path, e))?;
    if let Some(w) = rounds_w.as_mut() {
        w.flush().map_err(|e| RunError::io(&rounds_path, e))?;
    }

    let run_params = fed.clients.iter().map(|c| c.model.num_params()).collect();
    let cost = cost_report(&fed.cost, run_params, &fed.history);
    write_json(&out.join("cost.json"), &cost)?;

    let tail = tail_summary(&fed.history, TAIL_ROUNDS);
    let summary = RunSummary {
        mode: cfg.mode.name(),
        seed: cfg.seed,
        rounds: cfg.rounds,
        num_clients: fed.num_clients(),
        tail_rounds: tail.rounds,
        accuracy: tail.accuracy,
        macro_f1: tail.macro_f1,
        mae: tail.mae,
        bytes_per_round: tail.bytes_per_round,
        kb_per_round: tail.bytes_per_round / fed.cost.kilobyte as f64,
        diagnostics: diagnose(&fed.trace, fed.num_clients(), cfg.tau_agg),
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            crate_name: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            core_version: fedapa_core::VERSION,
            config_text: cfg.to_text(),
            config: cfg,
        },
    )?;
    Ok(RunOutcome {
        out_dir: out,
        summary,
        cost,
        trace: fed.trace,
        history: fed.history,
    })
}
