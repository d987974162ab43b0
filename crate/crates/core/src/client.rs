//! One client's round: frozen prototype targets, `S` momentum-SGD steps on
//! the hybrid loss, fresh prototypes from the final encoder, and the
//! per-round statistics the diagnostics consume.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Sample};
use crate::losses::{
    objective_on_embeddings, total_loss, warmup_lambda, LossBreakdown, ObjectiveOptions,
    PrototypeTargets, WarmupSchedule,
};
use crate::math;
use crate::model::{classifier_forward, embed, sgd_step, GradShadow, ModelParams, OptimizerState};
use crate::numerics::{self, stream, Rng};
use crate::prototypes::{
    prototypes_from_embeddings, PersonalizedPrototypes, PrototypeSet, StackedPrototypes,
};
use crate::{metrics, Error, Result};

/// How a client trains, fixed for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub batch_size: usize,
    pub local_epochs: usize,
    pub sched: WarmupSchedule,
    /// Overrides the warm-up schedule with a constant coefficient.
    pub static_lambda: Option<f64>,
    /// `false` trains on cross-entropy alone and ignores prototypes.
    pub use_prototypes: bool,
    pub objective: ObjectiveOptions,
    pub tau: f64,
    /// Random encoder perturbations used to estimate the embedding
    /// Lipschitz constant (on top of the end-of-round secant).
    pub lipschitz_probes: usize,
    /// Power iterations for the curvature estimate; 0 disables it.
    pub curvature_iters: usize,
    /// Prototype perturbations for the regularizer-sensitivity estimate; 0
    /// disables it.
    pub sensitivity_probes: usize,
    /// Samples in the fixed probe batch.
    pub probe_batch: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            local_epochs: 1,
            sched: WarmupSchedule::default(),
            static_lambda: None,
            use_prototypes: true,
            objective: ObjectiveOptions::default(),
            tau: 0.5,
            lipschitz_probes: 2,
            curvature_iters: 0,
            sensitivity_probes: 0,
            probe_batch: 32,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch_size must be at least 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(Error::InvalidSpec("local_epochs must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::NonPositiveTemperature(self.tau));
        }
        Ok(())
    }

    pub fn lambda(&self, t: usize) -> f64 {
        if !self.use_prototypes {
            return 0.0;
        }
        match self.static_lambda {
            Some(l) => l,
            None => warmup_lambda(t, &self.sched),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub model: ModelParams,
    pub optimizer: OptimizerState,
    pub dataset: ClientDataset,
    pub config: ClientConfig,
    pub seed: u64,
    /// Train-split embeddings under the current model, if known.
    cached_embeddings: Option<Vec<Vec<f64>>>,
}

/// What one round of local training measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundClientStats {
    pub client: usize,
    pub t: usize,
    pub lambda_t: f64,
    /// Optimizer steps `S` actually taken.
    pub steps: usize,
    /// `‖g_s‖²` per step (loss gradient, weight decay excluded).
    pub grad_norm_sq: Vec<f64>,
    /// `Ĝ²_{i,t} = Σ_s ‖g_s‖²`.
    pub grad_norm_sq_sum: f64,
    pub max_grad_norm: f64,
    /// Largest encoder update direction `‖v_s^θ‖` (parameter move / η).
    pub max_update_norm: f64,
    /// Within-round variance of the step gradients.
    pub grad_variance: f64,
    /// Objective on the whole train split before the first step.
    pub start_loss: LossBreakdown,
    /// Mean of the per-batch losses.
    pub train_loss: LossBreakdown,
    /// Estimated Lipschitz constant of the embedding in `w^θ`.
    pub embed_lipschitz: f64,
    /// Estimated gradient Lipschitz constant (top curvature).
    pub curvature: Option<f64>,
    /// Estimated sensitivity of `∇Φ` to the prototypes.
    pub proto_sensitivity: Option<f64>,
    /// `|C_i|`.
    pub local_classes: usize,
    pub encoder_move: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mae: f64,
}

impl ClientState {
    pub fn new(
        model: ModelParams,
        optimizer: OptimizerState,
        dataset: ClientDataset,
        config: ClientConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if model.input_dim() != dataset.input_dim() || model.num_classes() != dataset.num_classes
        {
            return Err(Error::ShapeMismatch);
        }
        Ok(Self {
            client_id: dataset.client_id,
            model,
            optimizer,
            dataset,
            config,
            seed,
            cached_embeddings: None,
        })
    }

    fn train_embeddings(&self) -> Result<Vec<Vec<f64>>> {
        self.dataset
            .train
            .iter()
            .map(|s| embed(&self.model, &s.features))
            .collect()
    }

    fn train_labels(&self) -> Vec<usize> {
        self.dataset.train.iter().map(|s| s.label).collect()
    }

    /// Local prototypes under the current model.
    pub fn local_prototypes(&mut self) -> Result<PrototypeSet> {
        let emb = match self.cached_embeddings.take() {
            Some(e) => e,
            None => self.train_embeddings()?,
        };
        let set = prototypes_from_embeddings(
            self.client_id,
            self.dataset.num_classes,
            &emb,
            &self.train_labels(),
        );
        self.cached_embeddings = Some(emb);
        set
    }

    /// Predictions on the local test split (ties go to the lowest class).
    pub fn predict_test(&self) -> Result<Vec<usize>> {
        self.dataset
            .test
            .iter()
            .map(|s| {
                let logits = classifier_forward(&self.model, &embed(&self.model, &s.features)?)?;
                Ok(argmax(&logits))
            })
            .collect()
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        if self.dataset.test.is_empty() {
            return Err(Error::EmptyTestSet);
        }
        let preds = self.predict_test()?;
        let labels: Vec<usize> = self.dataset.test.iter().map(|s| s.label).collect();
        Ok(Evaluation {
            accuracy: metrics::accuracy(&preds, &labels)?,
            macro_f1: metrics::macro_f1(&preds, &labels, self.dataset.num_classes)?,
            mae: metrics::mae(&preds, &labels)?,
        })
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Runs round `t` for one client against the previous round's `Q_i` and `P`
/// and returns its new upload.
pub fn client_update(
    state: &mut ClientState,
    q_prev: &PersonalizedPrototypes,
    p_prev: &StackedPrototypes,
    t: usize,
) -> Result<(PrototypeSet, RoundClientStats)> {
    let cfg = state.config;
    let lambda_t = cfg.lambda(t);
    let targets = if cfg.use_prototypes {
        Some(PrototypeTargets::new(
            state.client_id,
            q_prev,
            p_prev,
            cfg.tau,
            cfg.objective,
        )?)
    } else {
        None
    };
    let labels = state.train_labels();

    let start_emb = match state.cached_embeddings.take() {
        Some(e) => e,
        None => state.train_embeddings()?,
    };
    let start_loss =
        objective_on_embeddings(&state.model, &start_emb, &labels, targets.as_ref(), lambda_t)?;
    let start_encoder = state.model.encoder_flatten();

    let mut rng = Rng::derive(state.seed, stream::SHUFFLE, state.client_id as u64, t as u64);
    let n = state.dataset.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad_norm_sq = Vec::new();
    let mut grad_sum = GradShadow::zeros_like(&state.model);
    let mut max_update_sq: f64 = 0.0;
    let mut loss_acc = [0.0f64; 4];
    for _ in 0..cfg.local_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&k| &state.dataset.train[k]).collect();
            let (loss, grads) = total_loss(&batch, &state.model, targets.as_ref(), lambda_t)?;
            let g2 = grads.norm_sq();
            if !g2.is_finite() {
                return Err(Error::NonFiniteEvaluation(grad_norm_sq.len()));
            }
            grad_norm_sq.push(g2);
            grad_sum.add_assign(&grads);
            for (acc, v) in loss_acc.iter_mut().zip([loss.ce, loss.lg, loss.lc, loss.total]) {
                *acc += v;
            }
            sgd_step(&mut state.model, &grads, &mut state.optimizer)?;
            max_update_sq = max_update_sq.max(state.optimizer.velocity.encoder_norm_sq());
        }
    }
    let steps = grad_norm_sq.len();
    let inv = 1.0 / steps as f64;
    let grad_norm_sq_sum: f64 = grad_norm_sq.iter().sum();
    let grad_variance = (grad_norm_sq_sum * inv - grad_sum.norm_sq() * inv * inv).max(0.0);
    let train_loss = LossBreakdown {
        ce: loss_acc[0] * inv,
        lg: loss_acc[1] * inv,
        lc: loss_acc[2] * inv,
        lambda_t,
        total: loss_acc[3] * inv,
    };

    let end_emb = state.train_embeddings()?;
    let upload = prototypes_from_embeddings(
        state.client_id,
        state.dataset.num_classes,
        &end_emb,
        &labels,
    )?;

    let encoder_move =
        math::sqrt(numerics::dist_sq(&state.model.encoder_flatten(), &start_encoder));
    let mut embed_lipschitz: f64 = 0.0;
    if encoder_move > 0.0 {
        let max_shift = start_emb
            .iter()
            .zip(&end_emb)
            .map(|(a, b)| numerics::dist_sq(a, b))
            .fold(0.0, f64::max);
        embed_lipschitz = math::sqrt(max_shift) / encoder_move;
    }
    let mut probe_rng = Rng::derive(state.seed, stream::PROBE, state.client_id as u64, t as u64);
    let probe_idx = probe_indices(n, cfg.probe_batch, &mut probe_rng);
    if cfg.lipschitz_probes > 0 {
        let est = probe_embed_lipschitz(state, &probe_idx, cfg.lipschitz_probes, &mut probe_rng)?;
        embed_lipschitz = embed_lipschitz.max(est);
    }
    let probe: Vec<&Sample> = probe_idx.iter().map(|&k| &state.dataset.train[k]).collect();
    let curvature = if cfg.curvature_iters > 0 {
        Some(estimate_curvature(
            &state.model,
            &probe,
            targets.as_ref(),
            lambda_t,
            cfg.curvature_iters,
            &mut probe_rng,
        )?)
    } else {
        None
    };
    let proto_sensitivity = match (&targets, cfg.sensitivity_probes) {
        (Some(_), k) if k > 0 => Some(estimate_proto_sensitivity(
            state,
            &probe,
            q_prev,
            p_prev,
            k,
            &mut probe_rng,
        )?),
        _ => None,
    };

    let stats = RoundClientStats {
        client: state.client_id,
        t,
        lambda_t,
        steps,
        max_grad_norm: math::sqrt(grad_norm_sq.iter().copied().fold(0.0, f64::max)),
        grad_norm_sq,
        grad_norm_sq_sum,
        max_update_norm: math::sqrt(max_update_sq),
        grad_variance,
        start_loss,
        train_loss,
        embed_lipschitz,
        curvature,
        proto_sensitivity,
        local_classes: upload.local_classes().count(),
        encoder_move,
    };
    state.cached_embeddings = Some(end_emb);
    Ok((upload, stats))
}

fn probe_indices(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.truncate(k.clamp(1, n));
    idx.sort_unstable();
    idx
}

/// Relative size of the random parameter perturbations used by the probes.
const PROBE_EPS: f64 = 1e-4;

fn encoder_len(m: &ModelParams) -> usize {
    m.encoder_num_params()
}

/// `max_h ‖r(h; w+δ) − r(h; w)‖ / ‖δ‖` over random encoder directions `δ`.
fn probe_embed_lipschitz(
    state: &ClientState,
    idx: &[usize],
    probes: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let m = &state.model;
    let base: Vec<Vec<f64>> = idx
        .iter()
        .map(|&k| embed(m, &state.dataset.train[k].features))
        .collect::<Result<_>>()?;
    let flat = m.flatten();
    let eps = PROBE_EPS * numerics::norm(&flat).max(1.0);
    let enc = encoder_len(m);
    let mut best: f64 = 0.0;
    let mut moved = m.clone();
    for _ in 0..probes {
        let dir = rng.unit_vector(enc);
        let mut w = flat.clone();
        numerics::axpy(eps, &dir, &mut w[..enc]);
        moved.set_flat(&w)?;
        for (&k, b) in idx.iter().zip(&base) {
            let r = embed(&moved, &state.dataset.train[k].features)?;
            best = best.max(math::sqrt(numerics::dist_sq(&r, b)) / eps);
        }
    }
    Ok(best)
}

fn flat_grad(
    m: &ModelParams,
    batch: &[&Sample],
    targets: Option<&PrototypeTargets>,
    lambda_t: f64,
) -> Result<Vec<f64>> {
    Ok(total_loss(batch, m, targets, lambda_t)?.1.flatten())
}

/// Top curvature of the objective on `batch` by power iteration on
/// finite-difference Hessian-vector products.
pub fn estimate_curvature(
    m: &ModelParams,
    batch: &[&Sample],
    targets: Option<&PrototypeTargets>,
    lambda_t: f64,
    iters: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let flat = m.flatten();
    let eps = PROBE_EPS * numerics::norm(&flat).max(1.0);
    let g0 = flat_grad(m, batch, targets, lambda_t)?;
    let mut dir = rng.unit_vector(flat.len());
    let mut moved = m.clone();
    let mut est = 0.0;
    for _ in 0..iters.max(1) {
        let mut w = flat.clone();
        numerics::axpy(eps, &dir, &mut w);
        moved.set_flat(&w)?;
        let mut hv = flat_grad(&moved, batch, targets, lambda_t)?;
        numerics::axpy(-1.0, &g0, &mut hv);
        let nh = numerics::norm(&hv);
        est = nh / eps;
        if nh == 0.0 {
            break;
        }
        dir = hv.into_iter().map(|v| v / nh).collect();
    }
    Ok(est)
}

/// `‖∇Φ(w; Q′, P′) − ∇Φ(w; Q, P)‖ / ‖(Q′, P′) − (Q, P)‖` over random
/// prototype perturbations, with `Φ = L_g + L_c`.
fn estimate_proto_sensitivity(
    state: &ClientState,
    batch: &[&Sample],
    q: &PersonalizedPrototypes,
    p: &StackedPrototypes,
    probes: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let cfg = &state.config;
    let m = &state.model;
    let phi_grad = |q: &PersonalizedPrototypes, p: &StackedPrototypes| -> Result<Vec<f64>> {
        let targets = PrototypeTargets::new(state.client_id, q, p, cfg.tau, cfg.objective)?;
        let mut with = flat_grad(m, batch, Some(&targets), 1.0)?;
        let without = flat_grad(m, batch, None, 0.0)?;
        numerics::axpy(-1.0, &without, &mut with);
        Ok(with)
    };
    let base = phi_grad(q, p)?;
    let scale = 1e-4;
    let mut best: f64 = 0.0;
    for _ in 0..probes {
        let mut moved_sq = 0.0;
        let mut nudge = |v: &mut Vec<f64>| {
            let before = v.clone();
            let dir = rng.unit_vector(v.len());
            numerics::axpy(scale, &dir, v);
            let nv = numerics::norm(v);
            if nv > 1.0 {
                v.iter_mut().for_each(|x| *x /= nv);
            }
            moved_sq += numerics::dist_sq(v, &before);
        };
        let mut q2 = q.clone();
        q2.entries.iter_mut().flatten().for_each(&mut nudge);
        let mut p2 = p.clone();
        p2.sets
            .iter_mut()
            .flat_map(|s| s.entries.iter_mut().flatten())
            .for_each(&mut nudge);
        if moved_sq == 0.0 {
            continue;
        }
        let g = phi_grad(&q2, &p2)?;
        best = best.max(math::sqrt(numerics::dist_sq(&g, &base) / moved_sq));
    }
    Ok(best)
}
