//! Classification metrics and per-round communication accounting.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::losses::LossBreakdown;
use crate::{Error, Result};

fn check_pair(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Macro-averaged F1. Classes that appear in neither `labels` nor `preds`
/// are left out of the mean.
pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    check_pair(preds, labels)?;
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        for &c in &[p, l] {
            if c >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: c,
                    num_classes,
                });
            }
        }
        if p == l {
            tp[l] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    let mut sum = 0.0;
    let mut seen = 0usize;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        if denom == 0 {
            continue;
        }
        seen += 1;
        sum += 2.0 * tp[c] as f64 / denom as f64;
    }
    Ok(sum / seen as f64)
}

/// Mean absolute difference between class indices.
pub fn mae(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(preds, labels)?;
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(&p, &l)| p.abs_diff(l) as f64)
        .sum();
    Ok(total / preds.len() as f64)
}

/// Wire-cost constants for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub bytes_per_param: u64,
    pub kilobyte: u64,
    pub d_feat: usize,
    pub num_classes: usize,
    pub num_clients: usize,
}

impl CostModel {
    pub fn new(d_feat: usize, num_classes: usize, num_clients: usize) -> Self {
        Self {
            bytes_per_param: 4,
            kilobyte: 1000,
            d_feat,
            num_classes,
            num_clients,
        }
    }

    /// Bytes for one prototype on the wire.
    pub fn prototype_bytes(&self) -> u64 {
        self.d_feat as u64 * self.bytes_per_param
    }

    pub fn kb(&self, bytes: u64) -> f64 {
        bytes as f64 / self.kilobyte as f64
    }

    /// Per-round total when every set is complete: `d·4·(N+1)·C`.
    pub fn fedapa_complete_round_bytes(&self) -> u64 {
        self.prototype_bytes() * ((self.num_clients + 1) * self.num_classes) as u64
    }

    /// Model-sharing reference: the parameters go up and come back down.
    pub fn model_sharing_round_bytes(&self, num_params: u64) -> u64 {
        2 * num_params * self.bytes_per_param
    }

    /// `1 − fedapa / model_sharing`.
    pub fn reduction(&self, num_params: u64) -> f64 {
        1.0 - self.fedapa_complete_round_bytes() as f64
            / self.model_sharing_round_bytes(num_params) as f64
    }
}

/// Prototype counts moved for one client in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExchangeCounts {
    /// Locally computed entries the client sent.
    pub uploaded: usize,
    /// Server-padded entries of the client's own `P_i`.
    pub padded: usize,
    /// Entries of `Q_i`.
    pub personalized: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundBytes {
    pub up: Vec<u64>,
    pub down: Vec<u64>,
    pub total: u64,
}

/// Per-client byte counts.
///
/// A client uploads its local entries; it downloads `Q_i`, every peer set
/// `P_j` (including the peers' padded entries), and the padded entries of its
/// own `P_i`. With complete sets the per-client total is `(N+1)·C`
/// prototypes. `total` is the per-client figure averaged over clients.
pub fn fedapa_round_bytes(cost: &CostModel, exchange: &[ExchangeCounts]) -> RoundBytes {
    let unit = cost.prototype_bytes();
    let full: Vec<usize> = exchange.iter().map(|e| e.uploaded + e.padded).collect();
    let all: usize = full.iter().sum();
    let up: Vec<u64> = exchange.iter().map(|e| e.uploaded as u64 * unit).collect();
    let down: Vec<u64> = exchange
        .iter()
        .zip(&full)
        .map(|(e, &own)| (e.personalized + all - own + e.padded) as u64 * unit)
        .collect();
    let sum: u64 = up.iter().chain(&down).sum();
    let total = if exchange.is_empty() {
        0
    } else {
        sum / exchange.len() as u64
    };
    RoundBytes { up, down, total }
}

/// One client's row of a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundMetrics {
    pub client: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mae: f64,
    pub loss: LossBreakdown,
    pub grad_norm_sq_sum: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub t: usize,
    pub lambda_t: f64,
    pub clients: Vec<ClientRoundMetrics>,
}

impl RoundMetrics {
    pub fn mean_accuracy(&self) -> f64 {
        mean(self.clients.iter().map(|c| c.accuracy))
    }

    pub fn mean_macro_f1(&self) -> f64 {
        mean(self.clients.iter().map(|c| c.macro_f1))
    }

    pub fn mean_mae(&self) -> f64 {
        mean(self.clients.iter().map(|c| c.mae))
    }

    /// Per-client average of `up + down`.
    pub fn mean_bytes(&self) -> f64 {
        mean(self.clients.iter().map(|c| (c.bytes_up + c.bytes_down) as f64))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Client-mean metrics averaged over the last `k` rounds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TailSummary {
    pub rounds: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mae: f64,
    pub bytes_per_round: f64,
}

pub fn tail_summary(history: &[RoundMetrics], k: usize) -> TailSummary {
    let tail = &history[history.len().saturating_sub(k)..];
    TailSummary {
        rounds: tail.len(),
        accuracy: mean(tail.iter().map(RoundMetrics::mean_accuracy)),
        macro_f1: mean(tail.iter().map(RoundMetrics::mean_macro_f1)),
        mae: mean(tail.iter().map(RoundMetrics::mean_mae)),
        bytes_per_round: mean(tail.iter().map(RoundMetrics::mean_bytes)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2], &[2, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 1, 2, 3], &[1, 2, 2, 3]).unwrap(), 0.75);
        assert_eq!(accuracy(&[1], &[1, 2]), Err(Error::LengthMismatch(1, 2)));
        assert_eq!(accuracy(&[], &[]), Err(Error::EmptyInput));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        assert_eq!(macro_f1(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap(), 0.5);
        assert_eq!(macro_f1(&[4, 4], &[4, 4], 21).unwrap(), 1.0);
        assert!(macro_f1(&[5], &[0], 3).is_err());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[3, 4], &[3, 4]).unwrap(), 0.0);
        assert_eq!(mae(&[0], &[20]).unwrap(), 20.0);
        assert_eq!(mae(&[1, 3], &[2, 5]).unwrap(), 1.5);
    }

    #[test]
    fn single_client_single_class_upload() {
        let cost = CostModel::new(2, 1, 1);
        let b = fedapa_round_bytes(
            &cost,
            &[ExchangeCounts {
                uploaded: 1,
                padded: 0,
                personalized: 1,
            }],
        );
        assert_eq!(b.up, vec![8]);
        assert_eq!(b.down, vec![8]);
    }

    #[test]
    fn padded_counts_toward_download() {
        let cost = CostModel::new(1, 3, 2);
        let ex = [
            ExchangeCounts {
                uploaded: 3,
                padded: 0,
                personalized: 3,
            },
            ExchangeCounts {
                uploaded: 1,
                padded: 2,
                personalized: 3,
            },
        ];
        let b = fedapa_round_bytes(&cost, &ex);
        assert_eq!(b.up, vec![12, 4]);
        assert_eq!(b.down, vec![24, 32]);
        assert_eq!(b.total, cost.fedapa_complete_round_bytes());
    }
}
