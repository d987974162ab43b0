//! Empirical instrumentation of the convergence analysis.
//!
//! Everything here is post-hoc over a [`ConvergenceTrace`]. The analysis
//! constants (gradient bound, Lipschitz constants, prototype sensitivity) are
//! replaced with plug-in estimates taken from the trace, so the reports say
//! whether the observed run is consistent with the bounds, nothing more.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::client::RoundClientStats;
use crate::losses::WarmupSchedule;
use crate::math;
use crate::{Error, Result};

/// One `(t, i)` entry of the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub client: usize,
    pub lambda_t: f64,
    pub steps: usize,
    pub grad_norm_sq: Vec<f64>,
    /// `Ĝ²_{i,t}`.
    pub grad_norm_sq_sum: f64,
    pub max_grad_norm: f64,
    pub max_update_norm: f64,
    pub grad_variance: f64,
    /// Objective at the start of the round.
    pub start_loss: f64,
    pub embed_lipschitz: f64,
    pub curvature: Option<f64>,
    pub proto_sensitivity: Option<f64>,
    pub local_classes: usize,
    /// `‖ΔP_t‖_F` for the round (same value on every client's record).
    pub delta_p: Option<f64>,
    /// Aggregation Lipschitz estimate for the round.
    pub agg_lipschitz: Option<f64>,
}

impl TraceRecord {
    pub fn from_stats(s: &RoundClientStats, delta_p: Option<f64>, agg_lipschitz: Option<f64>) -> Self {
        Self {
            t: s.t,
            client: s.client,
            lambda_t: s.lambda_t,
            steps: s.steps,
            grad_norm_sq: s.grad_norm_sq.clone(),
            grad_norm_sq_sum: s.grad_norm_sq_sum,
            max_grad_norm: s.max_grad_norm,
            max_update_norm: s.max_update_norm,
            grad_variance: s.grad_variance,
            start_loss: s.start_loss.total,
            embed_lipschitz: s.embed_lipschitz,
            curvature: s.curvature,
            proto_sensitivity: s.proto_sensitivity,
            local_classes: s.local_classes,
            delta_p,
            agg_lipschitz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub lr: f64,
    pub sched: WarmupSchedule,
    /// Set when a constant coefficient replaced the schedule.
    pub static_lambda: Option<f64>,
    pub records: Vec<TraceRecord>,
}

impl ConvergenceTrace {
    pub fn new(lr: f64, sched: WarmupSchedule, static_lambda: Option<f64>) -> Self {
        Self {
            lr,
            sched,
            static_lambda,
            records: Vec::new(),
        }
    }

    pub fn push_round(
        &mut self,
        stats: &[RoundClientStats],
        delta_p: Option<f64>,
        agg_lipschitz: Option<f64>,
    ) {
        self.records.extend(
            stats
                .iter()
                .map(|s| TraceRecord::from_stats(s, delta_p, agg_lipschitz)),
        );
    }

    pub fn last_round(&self) -> usize {
        self.records.iter().map(|r| r.t).max().unwrap_or(0)
    }

    pub fn clients(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.records.iter().map(|r| r.client).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// First round with the final coefficient.
    pub fn warm_start(&self) -> usize {
        if self.static_lambda.is_some() {
            1
        } else {
            self.sched.t_warm.max(1)
        }
    }

    fn client_records(&self, client: usize) -> Vec<&TraceRecord> {
        let mut v: Vec<&TraceRecord> = self.records.iter().filter(|r| r.client == client).collect();
        v.sort_by_key(|r| r.t);
        v
    }

    /// Coefficient used after warm-up.
    /// Coefficient in force at the end of the trace; runs without prototype
    /// terms record 0 throughout.
    pub fn final_lambda(&self) -> f64 {
        match self.records.last() {
            Some(r) => r.lambda_t,
            None => self.static_lambda.unwrap_or(self.sched.lambda_max),
        }
    }
}

fn max_of(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(0.0, f64::max)
}

fn max_opt(it: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    it.flatten().reduce(f64::max)
}

/// Plug-in constants taken from a trace (maxima over rounds `≥ from`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlugIn {
    pub lr: f64,
    /// `Ĝ`: largest encoder update direction.
    pub g_hat: f64,
    pub l_wtheta: f64,
    pub s_max: usize,
    pub sum_classes: usize,
    /// `k̂ = L̂_wθ √(Σ_i C_i)`.
    pub k_glob: f64,
    pub sigma_sq: f64,
    pub l_max: Option<f64>,
    pub c_phi: Option<f64>,
    pub l_agg: Option<f64>,
    /// `Γ̂ = ĉ_Φ (1 + L̂_agg)`.
    pub gamma: Option<f64>,
}

pub fn plug_in(trace: &ConvergenceTrace, from: usize) -> Result<PlugIn> {
    let recs: Vec<&TraceRecord> = trace.records.iter().filter(|r| r.t >= from).collect();
    if recs.is_empty() {
        return Err(Error::InsufficientTrace(alloc::format!(
            "no records at or after round {from}"
        )));
    }
    let last = recs.iter().map(|r| r.t).max().unwrap_or(0);
    let sum_classes = recs
        .iter()
        .filter(|r| r.t == last)
        .map(|r| r.local_classes)
        .sum();
    let l_wtheta = max_of(recs.iter().map(|r| r.embed_lipschitz));
    let c_phi = max_opt(recs.iter().map(|r| r.proto_sensitivity));
    let l_agg = max_opt(recs.iter().map(|r| r.agg_lipschitz));
    Ok(PlugIn {
        lr: trace.lr,
        g_hat: max_of(recs.iter().map(|r| r.max_update_norm)),
        l_wtheta,
        s_max: recs.iter().map(|r| r.steps).max().unwrap_or(0),
        sum_classes,
        k_glob: l_wtheta * math::sqrt(sum_classes as f64),
        sigma_sq: max_of(recs.iter().map(|r| r.grad_variance)),
        l_max: max_opt(recs.iter().map(|r| r.curvature)),
        c_phi,
        l_agg,
        gamma: c_phi.map(|c| c * (1.0 + l_agg.unwrap_or(0.0))),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovementViolation {
    pub t: usize,
    pub delta_p: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovementReport {
    pub rounds_checked: usize,
    pub bound: f64,
    pub max_ratio: f64,
    pub constants: PlugIn,
    pub violations: Vec<MovementViolation>,
}

impl MovementReport {
    pub fn passed(&self) -> bool {
        self.rounds_checked > 0 && self.violations.is_empty()
    }
}

/// Checks `‖ΔP_t‖_F ≤ factor · L̂_wθ √(Σ_i C_i) η S Ĝ` for every round
/// `t ≥ 2` (round 1 compares against the random initial prototypes).
pub fn movement_check(trace: &ConvergenceTrace, factor: f64) -> Result<MovementReport> {
    let c = plug_in(trace, 1)?;
    let bound = factor * c.k_glob * c.lr * c.s_max as f64 * c.g_hat;
    let mut rounds: Vec<(usize, f64)> = trace
        .records
        .iter()
        .filter(|r| r.t >= 2)
        .filter_map(|r| r.delta_p.map(|d| (r.t, d)))
        .collect();
    rounds.sort_by(|a, b| a.0.cmp(&b.0));
    rounds.dedup_by_key(|r| r.0);
    if rounds.is_empty() {
        return Err(Error::InsufficientTrace(String::from(
            "no prototype movement recorded after round 1",
        )));
    }
    let mut max_ratio: f64 = 0.0;
    let mut violations = Vec::new();
    for &(t, d) in &rounds {
        if bound > 0.0 {
            max_ratio = max_ratio.max(d / bound);
        } else if d > 0.0 {
            max_ratio = f64::INFINITY;
        }
        if !(d <= bound) {
            violations.push(MovementViolation {
                t,
                delta_p: d,
                bound,
            });
        }
    }
    Ok(MovementReport {
        rounds_checked: rounds.len(),
        bound,
        max_ratio,
        constants: c,
        violations,
    })
}

/// `true` when the recorded coefficient never changes after warm-up.
pub fn schedule_change_vanishes(trace: &ConvergenceTrace) -> bool {
    let from = trace.warm_start();
    trace.clients().into_iter().all(|i| {
        trace
            .client_records(i)
            .windows(2)
            .filter(|w| w[0].t >= from)
            .all(|w| w[1].lambda_t - w[0].lambda_t == 0.0)
    })
}

/// Per-round tolerance `(L̂ η²/2) S σ̂² + λ Γ̂ k̂ η S Ĝ`.
pub fn descent_tolerance(c: &PlugIn, lambda: f64) -> Result<f64> {
    let l_max = c.l_max.ok_or_else(|| {
        Error::InsufficientTrace(String::from("curvature estimates missing"))
    })?;
    let s = c.s_max as f64;
    let noise = l_max * c.lr * c.lr / 2.0 * s * c.sigma_sq;
    let drift = if lambda == 0.0 {
        0.0
    } else {
        let gamma = c.gamma.ok_or_else(|| {
            Error::InsufficientTrace(String::from("prototype sensitivity estimates missing"))
        })?;
        lambda * gamma * c.k_glob * c.lr * s * c.g_hat
    };
    Ok(noise + drift)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDescent {
    pub client: usize,
    pub windows: usize,
    pub passed: usize,
    /// Largest `MA_{t+1} − MA_t − tolerance` seen (≤ 0 means every window held).
    pub max_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    pub window: usize,
    pub tolerance: f64,
    pub clients: Vec<ClientDescent>,
    pub fraction_passed: f64,
    /// `η · L̂_max`, when curvature was estimated.
    pub step_size_ratio: Option<f64>,
}

impl DescentReport {
    pub fn step_size_ok(&self) -> bool {
        self.step_size_ratio.is_none_or(|r| r <= 1.0)
    }

    pub fn passed(&self, required_fraction: f64) -> bool {
        self.step_size_ok() && self.fraction_passed >= required_fraction
    }
}

/// Moving averages (width `window`) of each client's round-start loss after
/// warm-up must not increase by more than `tolerance` between consecutive
/// windows. With `tolerance = None` the plug-in tolerance is used.
pub fn descent_check(
    trace: &ConvergenceTrace,
    window: usize,
    tolerance: Option<f64>,
) -> Result<DescentReport> {
    if window == 0 {
        return Err(Error::InvalidSpec(String::from("window must be at least 1")));
    }
    let from = trace.warm_start();
    if trace.last_round() < from + window {
        return Err(Error::InsufficientTrace(alloc::format!(
            "need rounds through {}, trace ends at {}",
            from + window,
            trace.last_round()
        )));
    }
    let c = plug_in(trace, from)?;
    let tolerance = match tolerance {
        Some(t) => t,
        None => descent_tolerance(&c, trace.final_lambda())?,
    };
    let mut clients = Vec::new();
    let (mut total, mut ok) = (0usize, 0usize);
    for i in trace.clients() {
        let losses: Vec<f64> = trace
            .client_records(i)
            .into_iter()
            .filter(|r| r.t >= from)
            .map(|r| r.start_loss)
            .collect();
        let ma: Vec<f64> = losses
            .windows(window)
            .map(|w| w.iter().sum::<f64>() / window as f64)
            .collect();
        let mut cd = ClientDescent {
            client: i,
            windows: 0,
            passed: 0,
            max_excess: f64::NEG_INFINITY,
        };
        for w in ma.windows(2) {
            let excess = w[1] - w[0] - tolerance;
            cd.windows += 1;
            if excess <= 0.0 {
                cd.passed += 1;
            }
            cd.max_excess = cd.max_excess.max(excess);
        }
        total += cd.windows;
        ok += cd.passed;
        clients.push(cd);
    }
    Ok(DescentReport {
        window,
        tolerance,
        clients,
        fraction_passed: if total == 0 { 1.0 } else { ok as f64 / total as f64 },
        step_size_ratio: c.l_max.map(|l| l * trace.lr),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientStationarity {
    pub client: usize,
    pub steps: usize,
    /// `(1/K) Σ ‖ĝ‖²` over the last `K` post-warm-up steps.
    pub mean_grad_sq: f64,
    /// `2Δ̂_i/(Kη)` with `Δ̂_i` the loss at the start of the window.
    pub gap_term: f64,
    /// `L̂_max η σ̂²`.
    pub noise_term: Option<f64>,
    /// `2λ Γ̂ k̂ Ĝ`.
    pub floor_term: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub k: usize,
    pub clients: Vec<ClientStationarity>,
}

impl StationarityReport {
    pub fn mean_grad_sq(&self) -> f64 {
        let n = self.clients.len().max(1) as f64;
        self.clients.iter().map(|c| c.mean_grad_sq).sum::<f64>() / n
    }
}

/// Average squared gradient over each client's last `k` post-warm-up steps,
/// next to the bound's three components.
pub fn stationarity_summary(trace: &ConvergenceTrace, k: usize) -> Result<StationarityReport> {
    if k == 0 {
        return Err(Error::InsufficientTrace(String::from("k must be positive")));
    }
    let from = trace.warm_start();
    let c = plug_in(trace, from)?;
    let lambda = trace.final_lambda();
    let mut clients = Vec::new();
    for i in trace.clients() {
        let recs: Vec<&TraceRecord> = trace
            .client_records(i)
            .into_iter()
            .filter(|r| r.t >= from)
            .collect();
        let steps: Vec<f64> = recs.iter().flat_map(|r| r.grad_norm_sq.iter().copied()).collect();
        if steps.len() < k {
            return Err(Error::InsufficientTrace(alloc::format!(
                "client {i} has {} post-warm-up steps, need {k}",
                steps.len()
            )));
        }
        let tail = &steps[steps.len() - k..];
        let delta = recs.first().map_or(0.0, |r| r.start_loss.max(0.0));
        clients.push(ClientStationarity {
            client: i,
            steps: k,
            mean_grad_sq: tail.iter().sum::<f64>() / k as f64,
            gap_term: 2.0 * delta / (k as f64 * trace.lr),
            noise_term: c.l_max.map(|l| l * trace.lr * c.sigma_sq),
            floor_term: c
                .gamma
                .map(|g| 2.0 * lambda * g * c.k_glob * c.g_hat)
                .or((lambda == 0.0).then_some(0.0)),
        });
    }
    Ok(StationarityReport { k, clients })
}

/// Reference line `√N / (2τ)` for the aggregation Lipschitz estimate.
pub fn agg_lipschitz_reference(num_clients: usize, tau: f64) -> f64 {
    math::sqrt(num_clients as f64) / (2.0 * tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn rec(t: usize, client: usize, loss: f64) -> TraceRecord {
        TraceRecord {
            t,
            client,
            lambda_t: 1.0,
            steps: 2,
            grad_norm_sq: vec![0.0, 0.0],
            grad_norm_sq_sum: 0.0,
            max_grad_norm: 0.0,
            max_update_norm: 1.0,
            grad_variance: 0.0,
            start_loss: loss,
            embed_lipschitz: 1.0,
            curvature: Some(1.0),
            proto_sensitivity: Some(0.0),
            local_classes: 3,
            delta_p: Some(0.1),
            agg_lipschitz: Some(0.5),
        }
    }

    fn trace(losses: &[f64]) -> ConvergenceTrace {
        let mut tr = ConvergenceTrace::new(0.01, WarmupSchedule::default(), Some(1.0));
        tr.records = losses
            .iter()
            .enumerate()
            .map(|(k, &l)| rec(k + 1, 0, l))
            .collect();
        tr
    }

    #[test]
    fn constant_loss_passes() {
        let tr = trace(&[2.0; 30]);
        for tol in [0.0, 1e-9, 5.0] {
            let r = descent_check(&tr, 10, Some(tol)).unwrap();
            assert_eq!(r.fraction_passed, 1.0);
        }
    }

    #[test]
    fn rising_loss_fails() {
        let losses: Vec<f64> = (0..30).map(|k| k as f64).collect();
        let r = descent_check(&trace(&losses), 5, Some(0.0)).unwrap();
        assert_eq!(r.fraction_passed, 0.0);
    }

    #[test]
    fn short_trace_is_insufficient() {
        assert!(matches!(
            descent_check(&trace(&[1.0; 5]), 10, Some(0.0)),
            Err(Error::InsufficientTrace(_))
        ));
    }

    #[test]
    fn zero_gradient_stationarity() {
        let r = stationarity_summary(&trace(&[1.0; 10]), 8).unwrap();
        assert_eq!(r.mean_grad_sq(), 0.0);
    }

    #[test]
    fn stationarity_mean_is_scale_free_in_k() {
        let mut tr = trace(&[1.0; 20]);
        tr.records.iter_mut().for_each(|r| r.grad_norm_sq = vec![0.3, 0.3]);
        let a = stationarity_summary(&tr, 10).unwrap().mean_grad_sq();
        let b = stationarity_summary(&tr, 20).unwrap().mean_grad_sq();
        assert!((a - b).abs() < 1e-15 && (a - 0.3).abs() < 1e-15);
    }

    #[test]
    fn movement_bound_arithmetic() {
        let tr = trace(&[1.0; 4]);
        let r = movement_check(&tr, 1.05).unwrap();
        // 1.05 · 1 · √3 · 0.01 · 2 · 1
        assert!((r.bound - 1.05 * 3f64.sqrt() * 0.02).abs() < 1e-15);
        assert!(r.passed() == (0.1 <= r.bound));
    }

    #[test]
    fn schedule_stays_flat_after_warmup() {
        assert!(schedule_change_vanishes(&trace(&[1.0; 10])));
        let mut tr = trace(&[1.0; 10]);
        tr.records[5].lambda_t = 0.5;
        assert!(!schedule_change_vanishes(&tr));
    }

    #[test]
    fn large_step_flags_step_size() {
        let mut tr = trace(&[1.0; 30]);
        tr.lr = 10.0;
        let r = descent_check(&tr, 10, None).unwrap();
        assert!(!r.step_size_ok());
        assert!(!r.passed(0.95));
    }
}
