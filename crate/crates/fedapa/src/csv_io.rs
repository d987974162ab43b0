//! CSV ingestion and export of client datasets.
//!
//! Schema: header `client_id,label,f0,f1,...,f{d-1}`, one sample per row.
//! Distinct client ids are mapped to dense indices in ascending order, and
//! the number of classes is `max(label) + 1`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fedapa_core::data::{stratified_split, ClientDataset, Sample};
use fedapa_core::numerics::{stream, Rng};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CsvError {
    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: row {row} has {got} features, expected {expected}")]
    InconsistentDim {
        path: PathBuf,
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Data(#[from] fedapa_core::Error),
}

/// Loads every client in the file and splits each one per class.
///
/// Rows are numbered from 1 for the header, so the first sample is row 2;
/// columns are numbered from 1.
pub fn load_dataset_csv(
    path: &Path,
    train_fraction: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>, CsvError> {
    let parse_err = |row: usize, column: usize, message: String| CsvError::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CsvError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, 1, e.to_string()))?
        .clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(parse_err(1, 1, "empty file".into()));
    }
    let expect = |col: usize, name: &str| -> Result<(), CsvError> {
        match header.get(col) {
            Some(h) if h.trim() == name => Ok(()),
            got => Err(parse_err(
                1,
                col + 1,
                format!("expected header `{name}`, got `{}`", got.unwrap_or("")),
            )),
        }
    };
    expect(0, "client_id")?;
    expect(1, "label")?;
    let dim = header.len() - 2;
    if dim == 0 {
        return Err(parse_err(1, 3, "no feature columns".into()));
    }
    for k in 0..dim {
        expect(k + 2, &format!("f{k}"))?;
    }

    let mut by_client: BTreeMap<u64, Vec<Sample>> = BTreeMap::new();
    let mut max_label = 0usize;
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 2;
        let record = record.map_err(|e| parse_err(row, 1, e.to_string()))?;
        if record.len() != header.len() {
            return Err(CsvError::InconsistentDim {
                path: path.to_path_buf(),
                row,
                expected: dim,
                got: record.len().saturating_sub(2),
            });
        }
        let client: u64 = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(row, 1, format!("bad client id `{}`", &record[0])))?;
        let label: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(row, 2, format!("bad label `{}`", &record[1])))?;
        let features = (0..dim)
            .map(|k| {
                let s = record[k + 2].trim();
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(row, k + 3, format!("bad feature `{s}`")))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        max_label = max_label.max(label);
        by_client.entry(client).or_default().push(Sample { features, label });
    }
    if by_client.is_empty() {
        return Err(parse_err(2, 1, "no data rows".into()));
    }
    let num_classes = max_label + 1;
    by_client
        .into_values()
        .enumerate()
        .map(|(i, samples)| {
            let mut rng = Rng::derive(seed, stream::SPLIT, i as u64, 0);
            let (train, test) = stratified_split(samples, num_classes, train_fraction, &mut rng);
            Ok(ClientDataset::new(i, num_classes, train, test)?)
        })
        .collect()
}

/// Writes train and test samples of every client (train first).
pub fn write_dataset_csv(path: &Path, datasets: &[ClientDataset]) -> Result<(), CsvError> {
    let io = |e: csv::Error| CsvError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let dim = datasets.first().map_or(0, ClientDataset::input_dim);
    let mut header = vec!["client_id".to_string(), "label".to_string()];
    header.extend((0..dim).map(|k| format!("f{k}")));
    w.write_record(&header).map_err(io)?;
    for ds in datasets {
        for s in ds.train.iter().chain(&ds.test) {
            let mut row = vec![ds.client_id.to_string(), s.label.to_string()];
            row.extend(s.features.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush().map_err(|e| CsvError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
