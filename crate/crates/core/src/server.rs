//! Parameter-server side of a round: per-class cosine similarity between
//! clients, temperature-softmax weights, personalized aggregation, padding of
//! missing classes, and the round state machine.
//!
//! Every sum over clients runs in a content-defined order (prototype bit
//! patterns), so relabeling clients permutes the output bit-for-bit.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::metrics::{fedapa_round_bytes, CostModel, ExchangeCounts};
use crate::numerics::{self, Rng};
use crate::prototypes::{PersonalizedPrototypes, PrototypeSet, StackedPrototypes};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Similarity-weighted personalized aggregation.
    Apa,
    /// Plain mean over holders of each class (global average prototype).
    UniformAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    /// Unweighted donor mean.
    Unweighted,
    /// Donor mean weighted by each donor's sample count for the class.
    SampleWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub tau: f64,
    pub mode: AggregationMode,
    /// Whether client `i` belongs to its own eligible set `J_c(i)`.
    pub include_self: bool,
    pub padding: PaddingMode,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            mode: AggregationMode::Apa,
            include_self: true,
            padding: PaddingMode::Unweighted,
        }
    }
}

/// One row `α_{i·}^c` of the weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub client: usize,
    pub class: usize,
    /// `(j, α_ij^c)` in ascending `j`.
    pub weights: Vec<(usize, f64)>,
}

/// Server record of one round (written as one JSON line by the runner).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub t: usize,
    pub weight_rows: Vec<WeightRow>,
    /// Classes padded for each client.
    pub padded: Vec<Vec<usize>>,
    pub bytes_up: Vec<u64>,
    pub bytes_down: Vec<u64>,
}

/// What the server sends back after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutput {
    pub personalized: Vec<PersonalizedPrototypes>,
    pub stacked: StackedPrototypes,
    pub log: RoundLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub round: usize,
    pub prev_p: StackedPrototypes,
    pub prev_q: Vec<PersonalizedPrototypes>,
    pub config: AggregationConfig,
}

/// Random unit-norm prototypes for every `(client, class)`; `Q_0 = P_0`.
pub fn init_prototypes(
    num_clients: usize,
    num_classes: usize,
    d_feat: usize,
    rng: &mut Rng,
) -> (StackedPrototypes, Vec<PersonalizedPrototypes>) {
    let sets: Vec<PrototypeSet> = (0..num_clients)
        .map(|i| {
            let mut s = PrototypeSet::empty(i, num_classes);
            for e in s.entries.iter_mut() {
                *e = Some(rng.unit_vector(d_feat));
            }
            s
        })
        .collect();
    let q = sets
        .iter()
        .map(|s| PersonalizedPrototypes {
            client_id: s.client_id,
            entries: s.entries.clone(),
        })
        .collect();
    (StackedPrototypes { sets, round: 0 }, q)
}

impl ServerState {
    pub fn new(
        num_clients: usize,
        num_classes: usize,
        d_feat: usize,
        config: AggregationConfig,
        rng: &mut Rng,
    ) -> Self {
        let (prev_p, prev_q) = init_prototypes(num_clients, num_classes, d_feat, rng);
        Self {
            round: 0,
            prev_p,
            prev_q,
            config,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.prev_p.num_clients()
    }
}

/// Lexicographic order on the bit patterns of two vectors.
fn content_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .map(|v| v.to_bits())
        .cmp(b.iter().map(|v| v.to_bits()))
}

fn eligible(p: &StackedPrototypes, class: usize) -> Vec<usize> {
    p.sets
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            s.local(class)
                .is_some_and(|v| numerics::norm_sq(v) > 0.0)
        })
        .map(|(j, _)| j)
        .collect()
}

/// `s_ij^c` for every `j ∈ J_c(i)`, ascending in `j`.
pub fn pairwise_class_similarity(
    p: &StackedPrototypes,
    i: usize,
    class: usize,
) -> Result<Vec<(usize, f64)>> {
    let own = p
        .sets
        .get(i)
        .and_then(|s| s.local(class))
        .filter(|v| numerics::norm_sq(v) > 0.0)
        .ok_or(Error::ClassAbsentAtClient { client: i, class })?;
    eligible(p, class)
        .into_iter()
        .map(|j| {
            let s = if j == i {
                1.0
            } else {
                let other = p.sets[j].local(class).expect("eligible");
                numerics::cosine_similarity(own, other)?
            };
            Ok((j, s))
        })
        .collect()
}

/// Softmax of the similarities at temperature `tau`.
pub fn adaptive_weights(similarities: &[(usize, f64)], tau: f64) -> Result<Vec<(usize, f64)>> {
    let scores: Vec<f64> = similarities.iter().map(|&(_, s)| s).collect();
    let w = softmax_canonical(&scores, tau)?;
    Ok(similarities.iter().map(|&(j, _)| j).zip(w).collect())
}

/// Softmax whose normalizer is summed in ascending-score order.
fn softmax_canonical(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .iter()
        .map(|s| crate::math::exp((s - max) / tau))
        .collect();
    let mut sorted = exps.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let z: f64 = sorted.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// `Σ_j w_j v_j`, accumulated in content order of `v_j`.
fn weighted_sum(p: &StackedPrototypes, class: usize, terms: &[(usize, f64)]) -> Vec<f64> {
    let mut ordered: Vec<(&[f64], f64)> = terms
        .iter()
        .map(|&(j, w)| (p.sets[j].local(class).expect("eligible"), w))
        .collect();
    ordered.sort_by(|a, b| content_cmp(a.0, b.0).then(a.1.total_cmp(&b.1)));
    let mut out = vec![0.0; ordered[0].0.len()];
    for (v, w) in ordered {
        numerics::axpy(w, v, &mut out);
    }
    out
}

/// `q_i^c` for one class, with its weight row.
fn aggregate_class(
    p: &StackedPrototypes,
    i: usize,
    class: usize,
    cfg: &AggregationConfig,
) -> Result<(Vec<f64>, Vec<(usize, f64)>)> {
    let mut sims = pairwise_class_similarity(p, i, class)?;
    if !cfg.include_self && sims.len() > 1 {
        sims.retain(|&(j, _)| j != i);
    }
    let weights = match cfg.mode {
        AggregationMode::Apa => adaptive_weights(&sims, cfg.tau)?,
        AggregationMode::UniformAverage => {
            let w = 1.0 / sims.len() as f64;
            sims.iter().map(|&(j, _)| (j, w)).collect()
        }
    };
    Ok((weighted_sum(p, class, &weights), weights))
}

/// `Q_i` over the classes client `i` holds, `q_i^c = Σ_{j∈J_c(i)} α_ij^c p_j^c`.
/// Absent classes stay empty until [`pad_missing`].
pub fn aggregate_personalized(
    p: &StackedPrototypes,
    i: usize,
    tau: f64,
) -> Result<PersonalizedPrototypes> {
    let cfg = AggregationConfig {
        tau,
        ..AggregationConfig::default()
    };
    aggregate_with(p, i, &cfg).map(|(q, _)| q)
}

fn aggregate_with(
    p: &StackedPrototypes,
    i: usize,
    cfg: &AggregationConfig,
) -> Result<(PersonalizedPrototypes, Vec<WeightRow>)> {
    let set = p.sets.get(i).ok_or(Error::MissingUpload(i))?;
    let mut q = PersonalizedPrototypes {
        client_id: set.client_id,
        entries: vec![None; set.num_classes()],
    };
    let mut rows = Vec::new();
    for class in set.local_classes().collect::<Vec<_>>() {
        let (v, weights) = aggregate_class(p, i, class, cfg)?;
        q.entries[class] = Some(v);
        rows.push(WeightRow {
            client: i,
            class,
            weights,
        });
    }
    Ok((q, rows))
}

/// Fills classes a client lacks with the donor mean
/// `(1/|J_ĉ|) Σ_{j∈J_ĉ} p_j^ĉ`, in both its `P_i` and `Q_i`.
///
/// Returns the padded classes per client.
pub fn pad_missing(
    p: &mut StackedPrototypes,
    q: &mut [PersonalizedPrototypes],
    mode: PaddingMode,
) -> Result<Vec<Vec<usize>>> {
    let num_classes = p.num_classes();
    let mut pads: Vec<Option<Vec<f64>>> = vec![None; num_classes];
    let mut padded = vec![Vec::new(); p.num_clients()];
    for class in 0..num_classes {
        let donors = eligible(p, class);
        let needs = (0..p.num_clients()).any(|i| !donors.contains(&i));
        if !needs {
            continue;
        }
        if donors.is_empty() {
            return Err(Error::ClassUncoveredGlobally(class));
        }
        let terms: Vec<(usize, f64)> = match mode {
            PaddingMode::Unweighted => {
                let w = 1.0 / donors.len() as f64;
                donors.iter().map(|&j| (j, w)).collect()
            }
            PaddingMode::SampleWeighted => {
                let counts: Vec<f64> = donors
                    .iter()
                    .map(|&j| p.sets[j].counts[class].max(1) as f64)
                    .collect();
                let mut sorted = counts.clone();
                sorted.sort_by(|a, b| a.total_cmp(b));
                let total: f64 = sorted.iter().sum();
                donors.iter().zip(counts).map(|(&j, n)| (j, n / total)).collect()
            }
        };
        pads[class] = Some(weighted_sum(p, class, &terms));
        for i in 0..p.num_clients() {
            if !donors.contains(&i) {
                padded[i].push(class);
            }
        }
    }
    for (i, classes) in padded.iter().enumerate() {
        for &class in classes {
            let pad = pads[class].clone().expect("computed above");
            let set = &mut p.sets[i];
            set.entries[class] = Some(pad.clone());
            set.padded[class] = true;
            set.counts[class] = 0;
            if let Some(qi) = q.get_mut(i) {
                qi.entries[class] = Some(pad);
            }
        }
    }
    Ok(padded)
}

/// Aggregation followed by padding: the map `P ↦ (Q_τ(P), padded P)`.
pub fn personalize(
    uploads: &StackedPrototypes,
    cfg: &AggregationConfig,
) -> Result<(Vec<PersonalizedPrototypes>, StackedPrototypes, Vec<WeightRow>, Vec<Vec<usize>>)> {
    let mut q = Vec::with_capacity(uploads.num_clients());
    let mut rows = Vec::new();
    for i in 0..uploads.num_clients() {
        let (qi, r) = aggregate_with(uploads, i, cfg)?;
        q.push(qi);
        rows.extend(r);
    }
    let mut p = uploads.clone();
    let padded = pad_missing(&mut p, &mut q, cfg.padding)?;
    Ok((q, p, rows, padded))
}

/// Strips anything the server itself produced (padded or zero entries).
fn sanitize(mut set: PrototypeSet) -> PrototypeSet {
    for c in 0..set.num_classes() {
        let keep = set.local(c).is_some_and(|v| numerics::norm_sq(v) > 0.0);
        if !keep {
            set.entries[c] = None;
            set.counts[c] = 0;
        }
        set.padded[c] = false;
    }
    set
}

/// One server round over a full set of uploads.
pub fn server_round(
    state: &mut ServerState,
    uploads: Vec<PrototypeSet>,
    cost: &CostModel,
) -> Result<RoundOutput> {
    let n = state.num_clients();
    let mut slots: Vec<Option<PrototypeSet>> = vec![None; n];
    for set in uploads {
        let id = set.client_id;
        if id < n {
            slots[id] = Some(sanitize(set));
        }
    }
    let sets = slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or(Error::MissingUpload(i)))
        .collect::<Result<Vec<_>>>()?;
    let t = state.round + 1;
    let stacked_uploads = StackedPrototypes { sets, round: t };
    let uploaded: Vec<usize> = stacked_uploads
        .sets
        .iter()
        .map(|s| s.local_classes().count())
        .collect();

    let (q, p, weight_rows, padded) = personalize(&stacked_uploads, &state.config)?;

    let exchange: Vec<ExchangeCounts> = (0..n)
        .map(|i| ExchangeCounts {
            uploaded: uploaded[i],
            padded: padded[i].len(),
            personalized: q[i].covered_count(),
        })
        .collect();
    let bytes = fedapa_round_bytes(cost, &exchange);

    state.round = t;
    state.prev_p = p.clone();
    state.prev_q = q.clone();
    Ok(RoundOutput {
        personalized: q,
        stacked: p,
        log: RoundLog {
            t,
            weight_rows,
            padded,
            bytes_up: bytes.up,
            bytes_down: bytes.down,
        },
    })
}

/// Empirical Lipschitz ratio `‖Q_τ(P′) − Q_τ(P)‖_F / ‖P′ − P‖_F` of the
/// aggregation map, maximized over random perturbations of the locally
/// computed entries (each perturbed vector is projected back into the unit
/// ball).
pub fn empirical_agg_lipschitz(
    p: &StackedPrototypes,
    perturbation_scale: f64,
    trials: usize,
    tau: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let cfg = AggregationConfig {
        tau,
        ..AggregationConfig::default()
    };
    empirical_agg_lipschitz_with(p, perturbation_scale, trials, &cfg, rng)
}

pub fn empirical_agg_lipschitz_with(
    p: &StackedPrototypes,
    perturbation_scale: f64,
    trials: usize,
    cfg: &AggregationConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let base = sanitize_stack(p);
    let (q0, _, _, _) = personalize(&base, cfg)?;
    let mut best: f64 = 0.0;
    for _ in 0..trials.max(1) {
        let mut moved = base.clone();
        let mut dp = 0.0;
        for set in moved.sets.iter_mut() {
            for v in set.entries.iter_mut().flatten() {
                let dir = rng.unit_vector(v.len());
                let before = v.clone();
                numerics::axpy(perturbation_scale, &dir, v);
                let nv = numerics::norm(v);
                if nv > 1.0 {
                    v.iter_mut().for_each(|x| *x /= nv);
                }
                dp += numerics::dist_sq(v, &before);
            }
        }
        if dp == 0.0 {
            continue;
        }
        let (q1, _, _, _) = personalize(&moved, cfg)?;
        let dq: f64 = q0
            .iter()
            .zip(&q1)
            .flat_map(|(a, b)| a.entries.iter().zip(&b.entries))
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => numerics::dist_sq(a, b),
                _ => 0.0,
            })
            .sum();
        best = best.max(crate::math::sqrt(dq / dp));
    }
    Ok(best)
}

fn sanitize_stack(p: &StackedPrototypes) -> StackedPrototypes {
    StackedPrototypes {
        sets: p.sets.iter().cloned().map(sanitize).collect(),
        round: p.round,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(i: usize, entries: Vec<Option<Vec<f64>>>) -> PrototypeSet {
        let c = entries.len();
        let counts = entries.iter().map(|e| usize::from(e.is_some())).collect();
        PrototypeSet {
            client_id: i,
            entries,
            padded: vec![false; c],
            counts,
        }
    }

    fn stack(sets: Vec<PrototypeSet>) -> StackedPrototypes {
        StackedPrototypes { sets, round: 0 }
    }

    #[test]
    fn init_shapes_and_norms() {
        let (p, q) = init_prototypes(6, 21, 256, &mut Rng::new(1));
        assert_eq!(p.sets.len(), 6);
        assert!(p.sets.iter().all(|s| s.entries.len() == 21));
        for v in p.sets.iter().flat_map(|s| s.entries.iter().flatten()) {
            assert!((numerics::norm(v) - 1.0).abs() < 1e-12);
        }
        assert_eq!(q[3].entries, p.sets[3].entries);
        let (p2, _) = init_prototypes(6, 21, 256, &mut Rng::new(1));
        assert_eq!(p, p2);
    }

    #[test]
    fn similarity_and_weights() {
        let p = stack(vec![
            set(0, vec![Some(vec![1.0, 0.0])]),
            set(1, vec![Some(vec![0.0, 1.0])]),
            set(2, vec![None]),
        ]);
        let s = pairwise_class_similarity(&p, 0, 0).unwrap();
        assert_eq!(s, vec![(0, 1.0), (1, 0.0)]);
        assert_eq!(
            pairwise_class_similarity(&p, 2, 0),
            Err(Error::ClassAbsentAtClient { client: 2, class: 0 })
        );
        let w = adaptive_weights(&s, 0.5).unwrap();
        assert!((w[0].1 - 0.8808).abs() < 1e-4 && (w[1].1 - 0.1192).abs() < 1e-4);
        assert_eq!(adaptive_weights(&[(4, 0.3)], 0.5).unwrap(), vec![(4, 1.0)]);
        let eq = adaptive_weights(&[(0, 0.2), (1, 0.2)], 0.5).unwrap();
        assert_eq!(eq, vec![(0, 0.5), (1, 0.5)]);
    }

    #[test]
    fn two_orthogonal_clients() {
        let p = stack(vec![
            set(0, vec![Some(vec![1.0, 0.0])]),
            set(1, vec![Some(vec![0.0, 1.0])]),
        ]);
        let q = aggregate_personalized(&p, 0, 0.5).unwrap();
        let e2 = 2f64.exp();
        let q0 = q.get(0).unwrap();
        assert!((q0[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((q0[1] - 1.0 / (e2 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn padding_examples() {
        let mut p = stack(vec![
            set(0, vec![Some(vec![1.0, 0.0]), Some(vec![0.5, 0.5])]),
            set(1, vec![Some(vec![0.0, 1.0]), None]),
            set(2, vec![None, None]),
        ]);
        let mut q: Vec<PersonalizedPrototypes> = (0..3)
            .map(|i| PersonalizedPrototypes {
                client_id: i,
                entries: vec![None, None],
            })
            .collect();
        let padded = pad_missing(&mut p, &mut q, PaddingMode::Unweighted).unwrap();
        assert_eq!(padded, vec![vec![], vec![1], vec![0, 1]]);
        assert_eq!(p.sets[2].get(0).unwrap(), &[0.5, 0.5]);
        assert_eq!(q[2].get(0).unwrap(), &[0.5, 0.5]);
        // single donor
        assert_eq!(p.sets[1].get(1).unwrap(), &[0.5, 0.5]);
        assert!(p.sets[1].padded[1] && !p.sets[1].padded[0]);

        let mut p = stack(vec![set(0, vec![None]), set(1, vec![None])]);
        assert_eq!(
            pad_missing(&mut p, &mut [], PaddingMode::Unweighted),
            Err(Error::ClassUncoveredGlobally(0))
        );
    }

    #[test]
    fn sample_weighted_padding() {
        let mut a = set(0, vec![Some(vec![1.0, 0.0])]);
        a.counts[0] = 3;
        let b = set(1, vec![Some(vec![0.0, 1.0])]);
        let mut p = stack(vec![a, b, set(2, vec![None])]);
        pad_missing(&mut p, &mut [], PaddingMode::SampleWeighted).unwrap();
        assert_eq!(p.sets[2].get(0).unwrap(), &[0.75, 0.25]);
    }

    #[test]
    fn single_client_round_returns_own_set() {
        let mut rng = Rng::new(3);
        let mut state = ServerState::new(1, 2, 3, AggregationConfig::default(), &mut rng);
        let upload = set(0, vec![Some(vec![0.1, 0.2, 0.3]), Some(vec![0.0, -0.5, 0.1])]);
        let cost = CostModel::new(3, 2, 1);
        let out = server_round(&mut state, vec![upload.clone()], &cost).unwrap();
        assert_eq!(out.personalized[0].entries, upload.entries);
        assert_eq!(state.round, 1);
    }

    #[test]
    fn uniform_mode_is_arithmetic_mean() {
        let cfg = AggregationConfig {
            mode: AggregationMode::UniformAverage,
            ..AggregationConfig::default()
        };
        let mut state = ServerState::new(2, 1, 2, cfg, &mut Rng::new(0));
        let uploads = vec![
            set(0, vec![Some(vec![0.2, 0.4])]),
            set(1, vec![Some(vec![0.6, -0.2])]),
        ];
        let out = server_round(&mut state, uploads, &CostModel::new(2, 1, 2)).unwrap();
        for q in &out.personalized {
            let v = q.get(0).unwrap();
            assert!((v[0] - 0.4).abs() < 1e-15 && (v[1] - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_upload() {
        let mut state = ServerState::new(2, 1, 2, AggregationConfig::default(), &mut Rng::new(0));
        let r = server_round(
            &mut state,
            vec![set(1, vec![Some(vec![1.0, 0.0])])],
            &CostModel::new(2, 1, 2),
        );
        assert_eq!(r, Err(Error::MissingUpload(0)));
    }

    #[test]
    fn exclude_self_uses_peers_only() {
        let cfg = AggregationConfig {
            include_self: false,
            ..AggregationConfig::default()
        };
        let p = stack(vec![
            set(0, vec![Some(vec![1.0, 0.0])]),
            set(1, vec![Some(vec![0.0, 1.0])]),
            set(2, vec![None]),
        ]);
        let (q, _, rows, _) = personalize(&p, &cfg).unwrap();
        assert_eq!(q[0].get(0).unwrap(), &[0.0, 1.0]);
        assert_eq!(rows[0].weights, vec![(1, 1.0)]);
    }

    #[test]
    fn lipschitz_estimate_is_finite() {
        let p = stack(vec![
            set(0, vec![Some(vec![0.6, 0.0]), Some(vec![0.0, 0.6])]),
            set(1, vec![Some(vec![0.6, 0.0]), Some(vec![0.0, 0.6])]),
        ]);
        let l = empirical_agg_lipschitz(&p, 1e-4, 5, 0.5, &mut Rng::new(1)).unwrap();
        assert!(l.is_finite() && l >= 0.0);
    }
}
