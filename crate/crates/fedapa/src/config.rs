//! Flat `key = value` experiment configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Unknown
//! keys, duplicate keys and malformed values are errors that name the key.
//! [`ExperimentConfig::to_text`] writes every key, and parsing that text
//! gives back an equal config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fedapa_core::data::SynthSpec;
use fedapa_core::federation::{DiagSettings, Mode, RunSettings};
use fedapa_core::losses::WarmupSchedule;
use fedapa_core::model::ArchSpec;
use fedapa_core::server::PaddingMode;
use serde::Serialize;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DataSource {
    Synthetic,
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub mode: Mode,
    pub out: PathBuf,
    pub parallel: bool,
    pub source: DataSource,
    /// Generator settings; only `train_fraction` applies to CSV input. The
    /// generator seed is always `seed`.
    pub synth: SynthSpec,
    pub d_feat: usize,
    /// One name per client, or a single name for every client.
    pub archs: Vec<String>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub tau_loss: f64,
    pub lc_include_self: bool,
    pub tau_agg: f64,
    pub include_self: bool,
    pub padding: PaddingMode,
    pub warmup: WarmupSchedule,
    pub diag: DiagSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 200,
            mode: Mode::FedApa,
            out: PathBuf::from("runs/fedapa"),
            parallel: true,
            source: DataSource::Synthetic,
            synth: SynthSpec::default(),
            d_feat: 256,
            archs: vec!["tiny".to_string()],
            lr: 0.01,
            momentum: 0.5,
            weight_decay: 1e-5,
            batch_size: 16,
            local_epochs: 1,
            tau_loss: 0.5,
            lc_include_self: true,
            tau_agg: 0.5,
            include_self: true,
            padding: PaddingMode::Unweighted,
            warmup: WarmupSchedule::default(),
            diag: DiagSettings::default(),
        }
    }
}

/// Every key in file order.
pub const KEYS: &[&str] = &[
    "seed",
    "rounds",
    "mode",
    "out",
    "parallel",
    "data.source",
    "data.csv_path",
    "data.num_clients",
    "data.num_classes",
    "data.input_dim",
    "data.dirichlet_beta",
    "data.feature_skew",
    "data.samples_per_client",
    "data.class_separation",
    "data.noise_sigma",
    "data.train_fraction",
    "model.d_feat",
    "model.archs",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.batch_size",
    "train.local_epochs",
    "loss.tau",
    "loss.lc_include_self",
    "agg.tau",
    "agg.include_self",
    "agg.padding",
    "warmup.lambda_min",
    "warmup.lambda_max",
    "warmup.t_warm",
    "diag.lipschitz_probes",
    "diag.curvature_iters",
    "diag.sensitivity_probes",
    "diag.probe_batch",
    "diag.agg_trials",
];

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse()
        .map_err(|_| invalid(key, format!("cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(key, format!("expected true or false, got `{v}`"))),
    }
}

fn padding_name(p: PaddingMode) -> &'static str {
    match p {
        PaddingMode::Unweighted => "unweighted",
        PaddingMode::SampleWeighted => "sample_weighted",
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        let mut csv_path: Option<PathBuf> = None;
        let mut source = "synthetic".to_string();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            let known = KEYS.iter().find(|k| **k == key).ok_or_else(|| ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            })?;
            if seen.contains(known) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            seen.push(known);
            cfg.set(key, value, &mut source, &mut csv_path)?;
        }
        cfg.source = match source.as_str() {
            "synthetic" => DataSource::Synthetic,
            "csv" => DataSource::Csv(
                csv_path.ok_or_else(|| invalid("data.csv_path", "required when data.source = csv"))?,
            ),
            other => {
                return Err(invalid(
                    "data.source",
                    format!("expected synthetic or csv, got `{other}`"),
                ))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(
        &mut self,
        key: &str,
        v: &str,
        source: &mut String,
        csv_path: &mut Option<PathBuf>,
    ) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "rounds" => self.rounds = parse_num(key, v)?,
            "mode" => self.mode = Mode::parse(v).map_err(|e| invalid(key, e.to_string()))?,
            "out" => self.out = PathBuf::from(v),
            "parallel" => self.parallel = parse_bool(key, v)?,
            "data.source" => *source = v.to_string(),
            "data.csv_path" => *csv_path = Some(PathBuf::from(v)),
            "data.num_clients" => self.synth.num_clients = parse_num(key, v)?,
            "data.num_classes" => self.synth.num_classes = parse_num(key, v)?,
            "data.input_dim" => self.synth.input_dim = parse_num(key, v)?,
            "data.dirichlet_beta" => self.synth.dirichlet_beta = parse_num(key, v)?,
            "data.feature_skew" => self.synth.feature_skew_strength = parse_num(key, v)?,
            "data.samples_per_client" => self.synth.samples_per_client = parse_num(key, v)?,
            "data.class_separation" => self.synth.class_separation = parse_num(key, v)?,
            "data.noise_sigma" => self.synth.noise_sigma = parse_num(key, v)?,
            "data.train_fraction" => self.synth.train_fraction = parse_num(key, v)?,
            "model.d_feat" => self.d_feat = parse_num(key, v)?,
            "model.archs" => {
                self.archs = v.split(',').map(|s| s.trim().to_string()).collect();
            }
            "train.lr" => self.lr = parse_num(key, v)?,
            "train.momentum" => self.momentum = parse_num(key, v)?,
            "train.weight_decay" => self.weight_decay = parse_num(key, v)?,
            "train.batch_size" => self.batch_size = parse_num(key, v)?,
            "train.local_epochs" => self.local_epochs = parse_num(key, v)?,
            "loss.tau" => self.tau_loss = parse_num(key, v)?,
            "loss.lc_include_self" => self.lc_include_self = parse_bool(key, v)?,
            "agg.tau" => self.tau_agg = parse_num(key, v)?,
            "agg.include_self" => self.include_self = parse_bool(key, v)?,
            "agg.padding" => {
                self.padding = match v {
                    "unweighted" => PaddingMode::Unweighted,
                    "sample_weighted" => PaddingMode::SampleWeighted,
                    _ => {
                        return Err(invalid(
                            key,
                            format!("expected unweighted or sample_weighted, got `{v}`"),
                        ))
                    }
                }
            }
            "warmup.lambda_min" => self.warmup.lambda_min = parse_num(key, v)?,
            "warmup.lambda_max" => self.warmup.lambda_max = parse_num(key, v)?,
            "warmup.t_warm" => self.warmup.t_warm = parse_num(key, v)?,
            "diag.lipschitz_probes" => self.diag.lipschitz_probes = parse_num(key, v)?,
            "diag.curvature_iters" => self.diag.curvature_iters = parse_num(key, v)?,
            "diag.sensitivity_probes" => self.diag.sensitivity_probes = parse_num(key, v)?,
            "diag.probe_batch" => self.diag.probe_batch = parse_num(key, v)?,
            "diag.agg_trials" => self.diag.agg_trials = parse_num(key, v)?,
            _ => unreachable!("key list and setter out of sync: {key}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && !v.is_nan() {
                Ok(())
            } else {
                Err(invalid(key, "must be positive"))
            }
        };
        if self.rounds == 0 {
            return Err(invalid("rounds", "must be at least 1"));
        }
        positive("train.lr", self.lr)?;
        positive("loss.tau", self.tau_loss)?;
        positive("agg.tau", self.tau_agg)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("train.momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("train.weight_decay", "must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(invalid("train.local_epochs", "must be at least 1"));
        }
        if self.d_feat == 0 {
            return Err(invalid("model.d_feat", "must be at least 1"));
        }
        if self.warmup.t_warm == 0 {
            return Err(invalid("warmup.t_warm", "must be at least 1"));
        }
        if !(self.warmup.lambda_min >= 0.0 && self.warmup.lambda_max >= self.warmup.lambda_min) {
            return Err(invalid(
                "warmup.lambda_max",
                "need 0 <= lambda_min <= lambda_max",
            ));
        }
        for a in &self.archs {
            ArchSpec::parse(a).map_err(|e| invalid("model.archs", e.to_string()))?;
        }
        if self.source == DataSource::Synthetic {
            self.synth_spec().validate().map_err(|e| invalid("data", e.to_string()))?;
            self.resolve_archs(self.synth.num_clients)?;
        } else if !(self.synth.train_fraction > 0.0 && self.synth.train_fraction < 1.0) {
            return Err(invalid("data.train_fraction", "must be in (0, 1)"));
        }
        Ok(())
    }

    /// Generator spec with the run seed.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    /// One architecture per client.
    pub fn resolve_archs(&self, num_clients: usize) -> Result<Vec<ArchSpec>, ConfigError> {
        let names: Vec<&String> = match self.archs.len() {
            1 => std::iter::repeat_n(&self.archs[0], num_clients).collect(),
            n if n == num_clients => self.archs.iter().collect(),
            n => {
                return Err(invalid(
                    "model.archs",
                    format!("{n} entries for {num_clients} clients"),
                ))
            }
        };
        names
            .into_iter()
            .map(|a| ArchSpec::parse(a).map_err(|e| invalid("model.archs", e.to_string())))
            .collect()
    }

    pub fn run_settings(&self, num_clients: usize) -> Result<RunSettings, ConfigError> {
        Ok(RunSettings {
            mode: self.mode,
            rounds: self.rounds,
            seed: self.seed,
            d_feat: self.d_feat,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
            tau_agg: self.tau_agg,
            tau_loss: self.tau_loss,
            sched: self.warmup,
            padding: self.padding,
            include_self: self.include_self,
            lc_include_self: self.lc_include_self,
            archs: self.resolve_archs(num_clients)?,
            diag: self.diag,
        })
    }

    /// Full config text, one line per key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("rounds", self.rounds.to_string());
        put("mode", self.mode.name());
        put("out", self.out.display().to_string());
        put("parallel", self.parallel.to_string());
        match &self.source {
            DataSource::Synthetic => put("data.source", "synthetic".into()),
            DataSource::Csv(p) => {
                put("data.source", "csv".into());
                put("data.csv_path", p.display().to_string());
            }
        }
        let d = &self.synth;
        put("data.num_clients", d.num_clients.to_string());
        put("data.num_classes", d.num_classes.to_string());
        put("data.input_dim", d.input_dim.to_string());
        put("data.dirichlet_beta", d.dirichlet_beta.to_string());
        put("data.feature_skew", d.feature_skew_strength.to_string());
        put("data.samples_per_client", d.samples_per_client.to_string());
        put("data.class_separation", d.class_separation.to_string());
        put("data.noise_sigma", d.noise_sigma.to_string());
        put("data.train_fraction", d.train_fraction.to_string());
        put("model.d_feat", self.d_feat.to_string());
        put("model.archs", self.archs.join(","));
        put("train.lr", self.lr.to_string());
        put("train.momentum", self.momentum.to_string());
        put("train.weight_decay", self.weight_decay.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.local_epochs", self.local_epochs.to_string());
        put("loss.tau", self.tau_loss.to_string());
        put("loss.lc_include_self", self.lc_include_self.to_string());
        put("agg.tau", self.tau_agg.to_string());
        put("agg.include_self", self.include_self.to_string());
        put("agg.padding", padding_name(self.padding).into());
        put("warmup.lambda_min", self.warmup.lambda_min.to_string());
        put("warmup.lambda_max", self.warmup.lambda_max.to_string());
        put("warmup.t_warm", self.warmup.t_warm.to_string());
        put("diag.lipschitz_probes", self.diag.lipschitz_probes.to_string());
        put("diag.curvature_iters", self.diag.curvature_iters.to_string());
        put("diag.sensitivity_probes", self.diag.sensitivity_probes.to_string());
        put("diag.probe_batch", self.diag.probe_batch.to_string());
        put("diag.agg_trials", self.diag.agg_trials.to_string());
        s
    }
}
