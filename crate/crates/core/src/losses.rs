//! The hybrid local objective: cross-entropy plus two prototype-contrastive
//! terms weighted by a cosine warm-up coefficient.
//!
//! `L = L_ce + λ_t (L_g + L_c)`, where `L_g` contrasts an embedding against
//! the client's personalized prototypes `Q_i` and `L_c` averages the same
//! contrastive form over every uploaded set `P_j`. Prototypes are constants
//! within a round: no gradient flows into them.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::math;
use crate::model::{
    classifier_backward, classifier_forward, encoder_backward, encoder_forward, GradShadow,
    ModelParams,
};
use crate::numerics::{self, log_sum_exp, softmax_into};
use crate::prototypes::{PersonalizedPrototypes, PrototypeSet, StackedPrototypes};
use crate::{Error, Result};

/// Lower clamp on `‖r‖` inside the cosine gradient.
const NORM_FLOOR: f64 = 1e-12;

/// `−log softmax(logits)[label]` and its gradient `softmax − onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: logits.len(),
        });
    }
    let lse = log_sum_exp(logits, 1.0);
    let mut grad = Vec::with_capacity(logits.len());
    softmax_into(logits, 1.0, &mut grad);
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

/// Unit-normalized prototypes of all classes, `C × d` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoBank {
    num_classes: usize,
    dim: usize,
    rows: Vec<f64>,
}

impl ProtoBank {
    pub fn from_entries(entries: &[Option<Vec<f64>>]) -> Result<Self> {
        let dim = entries
            .iter()
            .flatten()
            .map(Vec::len)
            .next()
            .ok_or(Error::MissingClassPrototype(0))?;
        let mut rows = Vec::with_capacity(entries.len() * dim);
        for (c, e) in entries.iter().enumerate() {
            let p = e.as_ref().ok_or(Error::MissingClassPrototype(c))?;
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
            let inv = 1.0 / numerics::norm(p).max(NORM_FLOOR);
            rows.extend(p.iter().map(|v| v * inv));
        }
        Ok(Self {
            num_classes: entries.len(),
            dim,
            rows,
        })
    }

    pub fn from_personalized(q: &PersonalizedPrototypes) -> Result<Self> {
        Self::from_entries(&q.entries)
    }

    pub fn from_set(p: &PrototypeSet) -> Result<Self> {
        Self::from_entries(&p.entries)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn row(&self, c: usize) -> &[f64] {
        &self.rows[c * self.dim..(c + 1) * self.dim]
    }

    /// Cosine similarities of `r` to every class prototype, and `‖r‖`.
    fn cosines(&self, r: &[f64], out: &mut Vec<f64>) -> f64 {
        let rn = numerics::norm(r).max(NORM_FLOOR);
        out.clear();
        out.extend((0..self.num_classes).map(|c| numerics::dot(self.row(c), r) / rn));
        rn
    }

    /// Contrastive loss of `r` with positive class `y`; when `grad` is given,
    /// `scale · ∂loss/∂r` is added to it.
    fn contrastive(
        &self,
        r: &[f64],
        y: usize,
        tau: f64,
        grad: Option<(&mut [f64], f64)>,
        scratch: &mut Scratch,
    ) -> f64 {
        let rn = self.cosines(r, &mut scratch.cos);
        let loss = log_sum_exp(&scratch.cos, tau) - scratch.cos[y] / tau;
        if let Some((g, scale)) = grad {
            softmax_into(&scratch.cos, tau, &mut scratch.prob);
            scratch.prob[y] -= 1.0;
            // d loss / d cos_k = (softmax_k − [k = y]) / τ
            let mut radial = 0.0;
            for c in 0..self.num_classes {
                let a = scratch.prob[c] / tau;
                if a != 0.0 {
                    numerics::axpy(scale * a / rn, self.row(c), g);
                    radial += a * scratch.cos[c];
                }
            }
            numerics::axpy(-scale * radial / (rn * rn), r, g);
        }
        loss
    }
}

#[derive(Default)]
struct Scratch {
    cos: Vec<f64>,
    prob: Vec<f64>,
}

fn check_contrastive_inputs(r: &[f64], y: usize, bank: &ProtoBank, tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    if y >= bank.num_classes {
        return Err(Error::MissingClassPrototype(y));
    }
    if r.len() != bank.dim {
        return Err(Error::DimensionMismatch {
            expected: bank.dim,
            got: r.len(),
        });
    }
    Ok(())
}

/// `−log [exp(cos(r, p_y)/τ) / Σ_ŷ exp(cos(r, p_ŷ)/τ)]` and `∂/∂r`.
///
/// `protos` must hold an entry for every class.
pub fn proto_contrastive(
    r: &[f64],
    y: usize,
    protos: &[Option<Vec<f64>>],
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    let bank = ProtoBank::from_entries(protos)?;
    bank_contrastive(r, y, &bank, tau)
}

fn bank_contrastive(r: &[f64], y: usize, bank: &ProtoBank, tau: f64) -> Result<(f64, Vec<f64>)> {
    check_contrastive_inputs(r, y, bank, tau)?;
    let mut grad = vec![0.0; r.len()];
    let loss = bank.contrastive(r, y, tau, Some((&mut grad, 1.0)), &mut Scratch::default());
    Ok((loss, grad))
}

/// Global personalized prototype term `L_g` against `Q_i`.
pub fn loss_lg(
    r: &[f64],
    y: usize,
    q: &PersonalizedPrototypes,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    proto_contrastive(r, y, &q.entries, tau)
}

/// Inter-client term `L_c`: the contrastive loss averaged over every set in `P`.
pub fn loss_lc(r: &[f64], y: usize, p: &StackedPrototypes, tau: f64) -> Result<(f64, Vec<f64>)> {
    if p.sets.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = p.sets.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; r.len()];
    for set in &p.sets {
        let (l, g) = proto_contrastive(r, y, &set.entries, tau)?;
        loss += l / n;
        numerics::axpy(1.0 / n, &g, &mut grad);
    }
    Ok((loss, grad))
}

/// Cosine warm-up of the contrastive weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub t_warm: usize,
}

impl Default for WarmupSchedule {
    fn default() -> Self {
        Self {
            lambda_min: 0.0,
            lambda_max: 1.0,
            t_warm: 50,
        }
    }
}

/// `λ_t = λ_min + (λ_max − λ_min)/2 · (1 − cos(π u_t))`, `u_t = min(t, T)/T`.
pub fn warmup_lambda(t: usize, sched: &WarmupSchedule) -> f64 {
    let t_warm = sched.t_warm.max(1);
    if t >= t_warm {
        return sched.lambda_max;
    }
    let u = t as f64 / t_warm as f64;
    // cos(πu) evaluated as sin(π(1/2 − u)): exact zero at the midpoint
    let cos_pi_u = math::sin(core::f64::consts::PI * (0.5 - u));
    sched.lambda_min + (sched.lambda_max - sched.lambda_min) / 2.0 * (1.0 - cos_pi_u)
}

/// Batch-mean loss terms. `total == ce + lambda_t · (lg + lc)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub lg: f64,
    pub lc: f64,
    pub lambda_t: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn from_sums(ce: f64, lg: f64, lc: f64, n: usize, lambda_t: f64) -> Self {
        let inv = 1.0 / n as f64;
        let (ce, lg, lc) = (ce * inv, lg * inv, lc * inv);
        Self {
            ce,
            lg,
            lc,
            lambda_t,
            total: ce + lambda_t * (lg + lc),
        }
    }

    /// The prototype regularizer `Φ = L_g + L_c`.
    pub fn regularizer(&self) -> f64 {
        self.lg + self.lc
    }
}

/// Which contrastive terms a client optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveOptions {
    pub use_lg: bool,
    pub use_lc: bool,
    /// Whether `L_c` includes the client's own uploaded set.
    pub lc_include_self: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            use_lg: true,
            use_lc: true,
            lc_include_self: true,
        }
    }
}

/// Round-frozen prototype targets for one client, pre-normalized.
#[derive(Debug, Clone)]
pub struct PrototypeTargets {
    personalized: Option<ProtoBank>,
    peers: Vec<ProtoBank>,
    pub tau: f64,
}

impl PrototypeTargets {
    pub fn new(
        client_id: usize,
        q: &PersonalizedPrototypes,
        p: &StackedPrototypes,
        tau: f64,
        opts: ObjectiveOptions,
    ) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::NonPositiveTemperature(tau));
        }
        let personalized = if opts.use_lg {
            Some(ProtoBank::from_personalized(q)?)
        } else {
            None
        };
        let peers = if opts.use_lc {
            p.sets
                .iter()
                .filter(|s| opts.lc_include_self || s.client_id != client_id)
                .map(ProtoBank::from_set)
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            personalized,
            peers,
            tau,
        })
    }

    fn num_classes(&self) -> Option<usize> {
        self.personalized
            .as_ref()
            .or(self.peers.first())
            .map(ProtoBank::num_classes)
    }

    /// `(lg, lc)` for one embedding, optionally adding `scale · ∂/∂r` of
    /// `lg + lc` into `grad`.
    fn evaluate(
        &self,
        r: &[f64],
        y: usize,
        mut grad: Option<(&mut [f64], f64)>,
        scratch: &mut Scratch,
    ) -> (f64, f64) {
        let mut lg = 0.0;
        if let Some(bank) = &self.personalized {
            let g = grad.as_mut().map(|(g, s)| (&mut **g, *s));
            lg = bank.contrastive(r, y, self.tau, g, scratch);
        }
        let mut lc = 0.0;
        if !self.peers.is_empty() {
            let inv = 1.0 / self.peers.len() as f64;
            for bank in &self.peers {
                let g = grad.as_mut().map(|(g, s)| (&mut **g, *s * inv));
                lc += inv * bank.contrastive(r, y, self.tau, g, scratch);
            }
        }
        (lg, lc)
    }
}

/// Mean hybrid loss over `batch` and its gradient.
///
/// The classifier receives gradient from `L_ce` only; the encoder from all
/// three terms. With `targets = None` (or `lambda_t = 0`) this is plain
/// cross-entropy training.
pub fn total_loss(
    batch: &[&Sample],
    model: &ModelParams,
    targets: Option<&PrototypeTargets>,
    lambda_t: f64,
) -> Result<(LossBreakdown, GradShadow)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let c = model.num_classes();
    if let Some(n) = targets.and_then(PrototypeTargets::num_classes) {
        if n != c {
            return Err(Error::MissingClassPrototype(n.min(c)));
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = GradShadow::zeros_like(model);
    let mut scratch = Scratch::default();
    let (mut ce_sum, mut lg_sum, mut lc_sum) = (0.0, 0.0, 0.0);
    for sample in batch {
        let (r, cache) = encoder_forward(model, &sample.features)?;
        let logits = classifier_forward(model, &r)?;
        let (ce, d_logits) = cross_entropy(&logits, sample.label)?;
        ce_sum += ce;
        let mut d_r = classifier_backward(model, &r, &d_logits, scale, &mut grads);
        if let Some(t) = targets {
            let grad = (lambda_t != 0.0).then_some((d_r.as_mut_slice(), lambda_t));
            let (lg, lc) = t.evaluate(&r, sample.label, grad, &mut scratch);
            lg_sum += lg;
            lc_sum += lc;
        }
        encoder_backward(model, &cache, &d_r, scale, &mut grads);
    }
    Ok((
        LossBreakdown::from_sums(ce_sum, lg_sum, lc_sum, batch.len(), lambda_t),
        grads,
    ))
}

/// Loss terms from precomputed embeddings (no gradient).
pub fn objective_on_embeddings(
    model: &ModelParams,
    embeddings: &[Vec<f64>],
    labels: &[usize],
    targets: Option<&PrototypeTargets>,
    lambda_t: f64,
) -> Result<LossBreakdown> {
    if embeddings.is_empty() {
        return Err(Error::EmptyInput);
    }
    if embeddings.len() != labels.len() {
        return Err(Error::LengthMismatch(embeddings.len(), labels.len()));
    }
    let mut scratch = Scratch::default();
    let (mut ce_sum, mut lg_sum, mut lc_sum) = (0.0, 0.0, 0.0);
    for (r, &y) in embeddings.iter().zip(labels) {
        let logits = classifier_forward(model, r)?;
        ce_sum += cross_entropy(&logits, y)?.0;
        if let Some(t) = targets {
            let (lg, lc) = t.evaluate(r, y, None, &mut scratch);
            lg_sum += lg;
            lc_sum += lc;
        }
    }
    Ok(LossBreakdown::from_sums(
        ce_sum,
        lg_sum,
        lc_sum,
        embeddings.len(),
        lambda_t,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn protos(v: &[&[f64]]) -> Vec<Option<Vec<f64>>> {
        v.iter().map(|p| Some(p.to_vec())).collect()
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy(&[0.2; 4], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let (l, _) = cross_entropy(&[30.0, -30.0], 0).unwrap();
        assert!(l < 1e-9);
        assert!(cross_entropy(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn contrastive_scalar_value() {
        let p = protos(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (l, _) = proto_contrastive(&[1.0, 0.0], 0, &p, 0.5).unwrap();
        let expected = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn identical_prototypes_give_log_c() {
        let p = protos(&[&[0.3, 0.4, 0.1][..]; 5]);
        for r in [[1.0, 0.0, 0.0], [-0.2, 0.9, 0.3]] {
            let (l, _) = proto_contrastive(&r, 3, &p, 0.5).unwrap();
            assert!((l - 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_errors() {
        let p = vec![Some(vec![1.0, 0.0]), None];
        assert_eq!(
            proto_contrastive(&[1.0, 0.0], 0, &p, 0.5),
            Err(Error::MissingClassPrototype(1))
        );
        let p = protos(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(
            proto_contrastive(&[1.0, 0.0], 0, &p, 0.0),
            Err(Error::NonPositiveTemperature(0.0))
        );
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = crate::numerics::Rng::new(12);
        for _ in 0..20 {
            let p: Vec<Option<Vec<f64>>> = (0..4).map(|_| Some(rng.normal_vec(6))).collect();
            let r: Vec<f64> = rng.normal_vec(6).iter().map(|v| v * 0.3).collect();
            let (_, g) = proto_contrastive(&r, 2, &p, 0.5).unwrap();
            let fd = finite_diff_grad(|x| proto_contrastive(x, 2, &p, 0.5).unwrap().0, &r, 1e-6)
                .unwrap();
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-3));
            }
        }
    }

    #[test]
    fn larger_tau_moves_toward_log_c() {
        let q = PersonalizedPrototypes {
            client_id: 0,
            entries: protos(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]),
        };
        let (sharp, _) = loss_lg(&[1.0, 0.0, 0.0], 0, &q, 0.5).unwrap();
        let (soft, _) = loss_lg(&[1.0, 0.0, 0.0], 0, &q, 1.5).unwrap();
        let ln3 = 3f64.ln();
        // -ln(e^{1/τ} / (e^{1/τ} + 2))
        assert!((sharp - (-(2f64.exp() / (2f64.exp() + 2.0)).ln())).abs() < 1e-12);
        assert!((soft - ln3).abs() < (sharp - ln3).abs());
    }

    #[test]
    fn lc_averages_over_sets() {
        let set = |i: usize, v: &[&[f64]]| PrototypeSet {
            client_id: i,
            entries: protos(v),
            padded: vec![false; v.len()],
            counts: vec![1; v.len()],
        };
        let a = set(0, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = set(1, &[&[1.0, 1.0], &[-1.0, 1.0]]);
        let r = [0.6, 0.2];
        let one = StackedPrototypes {
            sets: vec![a.clone()],
            round: 0,
        };
        let (l1, _) = loss_lc(&r, 1, &one, 0.5).unwrap();
        assert_eq!(l1, proto_contrastive(&r, 1, &a.entries, 0.5).unwrap().0);
        let same = StackedPrototypes {
            sets: vec![a.clone(), set(1, &[&[1.0, 0.0], &[0.0, 1.0]])],
            round: 0,
        };
        assert!((loss_lc(&r, 1, &same, 0.5).unwrap().0 - l1).abs() < 1e-15);
        let mixed = StackedPrototypes {
            sets: vec![a.clone(), b.clone()],
            round: 0,
        };
        let expected = 0.5
            * (proto_contrastive(&r, 1, &a.entries, 0.5).unwrap().0
                + proto_contrastive(&r, 1, &b.entries, 0.5).unwrap().0);
        assert!((loss_lc(&r, 1, &mixed, 0.5).unwrap().0 - expected).abs() < 1e-15);
    }

    #[test]
    fn warmup_examples() {
        let s = WarmupSchedule::default();
        assert_eq!(warmup_lambda(25, &s), 0.5);
        assert_eq!(warmup_lambda(50, &s), 1.0);
        assert_eq!(warmup_lambda(500, &s), 1.0);
        let l1 = 0.5 * (1.0 - (core::f64::consts::PI / 50.0).cos());
        assert!((warmup_lambda(1, &s) - l1).abs() < 1e-15);
        assert!((warmup_lambda(1, &s) - 0.000987).abs() < 1e-6);
        let mut prev = 0.0;
        for t in 1..=200 {
            let l = warmup_lambda(t, &s);
            assert!(l >= prev);
            prev = l;
        }
    }
}
