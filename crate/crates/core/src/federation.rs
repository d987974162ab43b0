//! Round driver: clients train (possibly in parallel), the server aggregates,
//! and metrics plus the convergence trace are recorded.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::client::{client_update, ClientConfig, ClientState, Evaluation, RoundClientStats};
use crate::data::ClientDataset;
use crate::diagnostics::ConvergenceTrace;
use crate::losses::{ObjectiveOptions, WarmupSchedule};
use crate::metrics::{ClientRoundMetrics, CostModel, RoundMetrics};
use crate::model::{init_model, ArchSpec, ModelShape, OptimizerState};
use crate::numerics::{stream, Rng};
use crate::prototypes::{
    prototype_delta_frobenius, PersonalizedPrototypes, PrototypeSet, StackedPrototypes,
};
use crate::server::{
    empirical_agg_lipschitz_with, init_prototypes, server_round, AggregationConfig,
    AggregationMode, PaddingMode, RoundLog, ServerState,
};
use crate::{Error, Result};

/// Algorithm variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FedApa,
    /// Uniform-average prototypes, `L_g` only.
    UniformProto,
    /// Personalized prototypes without the `L_c` term.
    FedApaNoLc,
    /// Cross-entropy on local data, no exchange.
    LocalOnly,
    /// Constant prototype coefficient instead of the warm-up.
    FedApaStaticLambda(f64),
}

impl Mode {
    pub const NAMES: [&'static str; 5] = [
        "fedapa",
        "uniform_proto",
        "fedapa_no_lc",
        "local_only",
        "fedapa_static_lambda",
    ];

    /// Parses `fedapa`, `uniform_proto`, `fedapa_no_lc`, `local_only`, or
    /// `fedapa_static_lambda:<λ>`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "fedapa" => Mode::FedApa,
            "uniform_proto" => Mode::UniformProto,
            "fedapa_no_lc" => Mode::FedApaNoLc,
            "local_only" => Mode::LocalOnly,
            _ => {
                let lambda = s
                    .strip_prefix("fedapa_static_lambda:")
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite() && *v >= 0.0)
                    .ok_or_else(|| Error::InvalidSpec(format!("unknown mode `{s}`")))?;
                Mode::FedApaStaticLambda(lambda)
            }
        })
    }

    pub fn name(&self) -> String {
        match self {
            Mode::FedApa => "fedapa".into(),
            Mode::UniformProto => "uniform_proto".into(),
            Mode::FedApaNoLc => "fedapa_no_lc".into(),
            Mode::LocalOnly => "local_only".into(),
            Mode::FedApaStaticLambda(l) => format!("fedapa_static_lambda:{l}"),
        }
    }

    pub fn exchanges(&self) -> bool {
        !matches!(self, Mode::LocalOnly)
    }
}

/// Diagnostic probing effort.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagSettings {
    pub lipschitz_probes: usize,
    pub curvature_iters: usize,
    pub sensitivity_probes: usize,
    pub probe_batch: usize,
    /// Perturbation trials for the aggregation Lipschitz estimate; 0 skips it.
    pub agg_trials: usize,
}

impl Default for DiagSettings {
    fn default() -> Self {
        Self {
            lipschitz_probes: 2,
            curvature_iters: 0,
            sensitivity_probes: 0,
            probe_batch: 32,
            agg_trials: 0,
        }
    }
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub mode: Mode,
    pub rounds: usize,
    pub seed: u64,
    pub d_feat: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub tau_agg: f64,
    pub tau_loss: f64,
    pub sched: WarmupSchedule,
    pub padding: PaddingMode,
    pub include_self: bool,
    pub lc_include_self: bool,
    /// One architecture per client.
    pub archs: Vec<ArchSpec>,
    pub diag: DiagSettings,
}

impl RunSettings {
    pub fn client_config(&self) -> ClientConfig {
        let objective = match self.mode {
            Mode::UniformProto => ObjectiveOptions {
                use_lg: true,
                use_lc: false,
                lc_include_self: self.lc_include_self,
            },
            Mode::FedApaNoLc => ObjectiveOptions {
                use_lg: true,
                use_lc: false,
                lc_include_self: self.lc_include_self,
            },
            _ => ObjectiveOptions {
                lc_include_self: self.lc_include_self,
                ..ObjectiveOptions::default()
            },
        };
        ClientConfig {
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
            sched: self.sched,
            static_lambda: match self.mode {
                Mode::FedApaStaticLambda(l) => Some(l),
                _ => None,
            },
            use_prototypes: self.mode.exchanges(),
            objective,
            tau: self.tau_loss,
            lipschitz_probes: self.diag.lipschitz_probes,
            curvature_iters: self.diag.curvature_iters,
            sensitivity_probes: self.diag.sensitivity_probes,
            probe_batch: self.diag.probe_batch,
        }
    }

    pub fn aggregation(&self) -> AggregationConfig {
        AggregationConfig {
            tau: self.tau_agg,
            mode: match self.mode {
                Mode::UniformProto => AggregationMode::UniformAverage,
                _ => AggregationMode::Apa,
            },
            include_self: self.include_self,
            padding: self.padding,
        }
    }
}

/// Runs a closure over every client and returns results in slice order.
pub trait Executor {
    fn map_clients<R, F>(&self, clients: &mut [ClientState], f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(&mut ClientState) -> R + Sync;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map_clients<R, F>(&self, clients: &mut [ClientState], f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(&mut ClientState) -> R + Sync,
    {
        clients.iter_mut().map(f).collect()
    }
}

/// Everything produced by one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub metrics: RoundMetrics,
    pub log: Option<RoundLog>,
    pub stats: Vec<RoundClientStats>,
    pub delta_p: f64,
    pub agg_lipschitz: Option<f64>,
}

pub struct Federation {
    pub settings: RunSettings,
    pub clients: Vec<ClientState>,
    pub server: Option<ServerState>,
    pub cost: CostModel,
    pub trace: ConvergenceTrace,
    pub history: Vec<RoundMetrics>,
    q: Vec<PersonalizedPrototypes>,
    p: StackedPrototypes,
    last_uploads: StackedPrototypes,
}

impl Federation {
    pub fn new(settings: RunSettings, datasets: Vec<ClientDataset>) -> Result<Self> {
        let n = datasets.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if settings.archs.len() != n {
            return Err(Error::InvalidSpec(format!(
                "{} architectures for {n} clients",
                settings.archs.len()
            )));
        }
        if settings.rounds == 0 {
            return Err(Error::InvalidSpec("rounds must be at least 1".into()));
        }
        let num_classes = datasets[0].num_classes;
        let input_dim = datasets[0].input_dim();
        let cfg = settings.client_config();
        let mut clients = Vec::with_capacity(n);
        for (i, ds) in datasets.into_iter().enumerate() {
            if ds.client_id != i || ds.num_classes != num_classes || ds.input_dim() != input_dim {
                return Err(Error::InvalidSpec(format!(
                    "dataset {i} does not match client {i}'s shape"
                )));
            }
            let shape = ModelShape {
                input_dim,
                d_feat: settings.d_feat,
                num_classes,
            };
            let mut rng = Rng::derive(settings.seed, stream::MODEL_INIT, i as u64, 0);
            let model = init_model(&settings.archs[i], shape, &mut rng);
            let opt = OptimizerState::new(&model, settings.lr, settings.momentum, settings.weight_decay);
            clients.push(ClientState::new(model, opt, ds, cfg, settings.seed)?);
        }
        let mut prng = Rng::derive(settings.seed, stream::PROTO_INIT, 0, 0);
        let (p, q) = init_prototypes(n, num_classes, settings.d_feat, &mut prng);
        let server = settings.mode.exchanges().then(|| ServerState {
            round: 0,
            prev_p: p.clone(),
            prev_q: q.clone(),
            config: settings.aggregation(),
        });
        let trace = ConvergenceTrace::new(settings.lr, settings.sched, cfg.static_lambda);
        Ok(Self {
            cost: CostModel::new(settings.d_feat, num_classes, n),
            clients,
            server,
            trace,
            history: Vec::new(),
            last_uploads: p.clone(),
            q,
            p,
            settings,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn round(&self) -> usize {
        self.history.len()
    }

    pub fn personalized(&self) -> &[PersonalizedPrototypes] {
        &self.q
    }

    pub fn stacked(&self) -> &StackedPrototypes {
        &self.p
    }

    /// Runs the next round.
    pub fn step<E: Executor>(&mut self, exec: &E) -> Result<RoundReport> {
        let t = self.round() + 1;
        let q = &self.q;
        let p = &self.p;
        let results: Vec<Result<(PrototypeSet, RoundClientStats, Evaluation)>> =
            exec.map_clients(&mut self.clients, |c| {
                let (upload, stats) = client_update(c, &q[c.client_id], p, t)?;
                let eval = c.evaluate()?;
                Ok((upload, stats, eval))
            });
        let mut uploads = Vec::with_capacity(results.len());
        let mut stats = Vec::with_capacity(results.len());
        let mut evals = Vec::with_capacity(results.len());
        for r in results {
            let (u, s, e) = r?;
            uploads.push(u);
            stats.push(s);
            evals.push(e);
        }

        let current = StackedPrototypes {
            sets: uploads.clone(),
            round: t,
        };
        let delta_p = prototype_delta_frobenius(&current, &self.last_uploads)?;
        self.last_uploads = current;

        let n = self.num_clients();
        let mut agg_lipschitz = None;
        let (log, up, down) = match self.server.as_mut() {
            Some(server) => {
                let out = server_round(server, uploads, &self.cost)?;
                if self.settings.diag.agg_trials > 0 {
                    let mut rng = Rng::derive(self.settings.seed, stream::PROBE, n as u64, t as u64);
                    agg_lipschitz = Some(empirical_agg_lipschitz_with(
                        &out.stacked,
                        1e-3,
                        self.settings.diag.agg_trials,
                        &server.config,
                        &mut rng,
                    )?);
                }
                self.q = out.personalized;
                self.p = out.stacked;
                let (up, down) = (out.log.bytes_up.clone(), out.log.bytes_down.clone());
                (Some(out.log), up, down)
            }
            None => (None, alloc::vec![0; n], alloc::vec![0; n]),
        };

        let clients = (0..n)
            .map(|i| ClientRoundMetrics {
                client: i,
                accuracy: evals[i].accuracy,
                macro_f1: evals[i].macro_f1,
                mae: evals[i].mae,
                loss: stats[i].train_loss,
                grad_norm_sq_sum: stats[i].grad_norm_sq_sum,
                bytes_up: up[i],
                bytes_down: down[i],
            })
            .collect();
        let metrics = RoundMetrics {
            t,
            lambda_t: stats.first().map_or(0.0, |s| s.lambda_t),
            clients,
        };
        self.trace.push_round(&stats, Some(delta_p), agg_lipschitz);
        self.history.push(metrics.clone());
        Ok(RoundReport {
            metrics,
            log,
            stats,
            delta_p,
            agg_lipschitz,
        })
    }

    /// Runs every remaining round, handing each report to `on_round`.
    pub fn run<E: Executor>(
        &mut self,
        exec: &E,
        mut on_round: impl FnMut(&RoundReport) -> Result<()>,
    ) -> Result<()> {
        while self.round() < self.settings.rounds {
            let report = self.step(exec)?;
            on_round(&report)?;
        }
        Ok(())
    }
}
