//! Result tables over finished run directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::runner::RunSummary;

#[derive(Debug, thiserror::Error)]
pub enum SummaryError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub fn read_summary(dir: &Path) -> Result<RunSummary, SummaryError> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(|e| SummaryError::Io {
        path: path.clone(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| SummaryError::Format {
        path,
        message: e.to_string(),
    })
}

/// One row per run: accuracy and F1 in percent, MAE, and KB per round.
pub fn format_table(rows: &[RunSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>6} {:>10} {:>8} {:>8} {:>10}",
        "mode", "seed", "accuracy", "f1", "mae", "KB/round"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<28} {:>6} {:>10.2} {:>8.2} {:>8.3} {:>10.2}",
            r.mode,
            r.seed,
            100.0 * r.accuracy,
            100.0 * r.macro_f1,
            r.mae,
            r.kb_per_round
        );
    }
    out
}

pub fn print_summary(dirs: &[PathBuf]) -> Result<String, SummaryError> {
    let rows = dirs
        .iter()
        .map(|d| read_summary(d))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(format_table(&rows))
}
