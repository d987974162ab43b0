//! Per-class prototypes and the containers exchanged with the server.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::model::{embed, ModelParams};
use crate::numerics;
use crate::{Error, Result};

/// A client's prototype set `P_i`: one optional entry per class. Entries
/// filled in by the server are flagged in `padded`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub client_id: usize,
    pub entries: Vec<Option<Vec<f64>>>,
    pub padded: Vec<bool>,
    /// Training samples behind each local entry (`m_i^c`); zero for padded
    /// or absent classes.
    pub counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn empty(client_id: usize, num_classes: usize) -> Self {
        Self {
            client_id,
            entries: vec![None; num_classes],
            padded: vec![false; num_classes],
            counts: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.entries.get(class)?.as_deref()
    }

    /// Locally computed (non-padded) entry.
    pub fn local(&self, class: usize) -> Option<&[f64]> {
        if self.padded.get(class).copied().unwrap_or(false) {
            None
        } else {
            self.get(class)
        }
    }

    /// Classes with a locally computed, usable (nonzero) prototype: `C_i`.
    pub fn local_classes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_classes())
            .filter(move |&c| self.local(c).is_some_and(|p| numerics::norm_sq(p) > 0.0))
    }

    pub fn covered_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.entries.iter().all(Option::is_some)
    }

    pub fn d_feat(&self) -> Option<usize> {
        self.entries.iter().flatten().map(Vec::len).next()
    }
}

/// `P = {P_i}` for one round, index-aligned with client ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedPrototypes {
    pub sets: Vec<PrototypeSet>,
    pub round: usize,
}

impl StackedPrototypes {
    pub fn num_clients(&self) -> usize {
        self.sets.len()
    }

    pub fn num_classes(&self) -> usize {
        self.sets.first().map_or(0, PrototypeSet::num_classes)
    }

    pub fn is_complete(&self) -> bool {
        self.sets.iter().all(PrototypeSet::is_complete)
    }

    /// Squared Frobenius norm over all present entries.
    pub fn frobenius_sq(&self) -> f64 {
        self.sets
            .iter()
            .flat_map(|s| s.entries.iter().flatten())
            .map(|v| numerics::norm_sq(v))
            .sum()
    }
}

/// `Q_i`: the personalized aggregate returned to client `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizedPrototypes {
    pub client_id: usize,
    pub entries: Vec<Option<Vec<f64>>>,
}

impl PersonalizedPrototypes {
    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.entries.get(class)?.as_deref()
    }

    pub fn is_complete(&self) -> bool {
        self.entries.iter().all(Option::is_some)
    }

    pub fn covered_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }
}

/// Class means of the given embeddings.
pub fn prototypes_from_embeddings(
    client_id: usize,
    num_classes: usize,
    embeddings: &[Vec<f64>],
    labels: &[usize],
) -> Result<PrototypeSet> {
    if embeddings.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if embeddings.len() != labels.len() {
        return Err(Error::LengthMismatch(embeddings.len(), labels.len()));
    }
    let d = embeddings[0].len();
    let mut set = PrototypeSet::empty(client_id, num_classes);
    let mut sums = vec![vec![0.0; d]; num_classes];
    for (r, &y) in embeddings.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes,
            });
        }
        numerics::axpy(1.0, r, &mut sums[y]);
        set.counts[y] += 1;
    }
    for (c, sum) in sums.into_iter().enumerate() {
        let m = set.counts[c];
        if m > 0 {
            let inv = 1.0 / m as f64;
            set.entries[c] = Some(sum.into_iter().map(|v| v * inv).collect());
        }
    }
    Ok(set)
}

/// `p_i^c = (1/m_i^c) Σ_{h ∈ D_i^c} r(h)` over the training split.
pub fn compute_local_prototypes(
    model: &ModelParams,
    dataset: &ClientDataset,
) -> Result<PrototypeSet> {
    if dataset.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let embeddings = dataset
        .train
        .iter()
        .map(|s| embed(model, &s.features))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = dataset.train.iter().map(|s| s.label).collect();
    prototypes_from_embeddings(dataset.client_id, dataset.num_classes, &embeddings, &labels)
}

/// `‖P_t − P_{t−1}‖_F` over locally computed classes present in both rounds.
pub fn prototype_delta_frobenius(
    current: &StackedPrototypes,
    previous: &StackedPrototypes,
) -> Result<f64> {
    if current.num_clients() != previous.num_clients()
        || current.num_classes() != previous.num_classes()
    {
        return Err(Error::ShapeMismatch);
    }
    let mut total = 0.0;
    for (now, prev) in current.sets.iter().zip(&previous.sets) {
        for c in 0..now.num_classes() {
            if let (Some(a), Some(b)) = (now.local(c), prev.local(c)) {
                if a.len() != b.len() {
                    return Err(Error::ShapeMismatch);
                }
                total += numerics::dist_sq(a, b);
            }
        }
    }
    Ok(crate::math::sqrt(total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(vectors: Vec<Vec<Option<Vec<f64>>>>) -> StackedPrototypes {
        StackedPrototypes {
            sets: vectors
                .into_iter()
                .enumerate()
                .map(|(i, entries)| {
                    let c = entries.len();
                    PrototypeSet {
                        client_id: i,
                        entries,
                        padded: vec![false; c],
                        counts: vec![1; c],
                    }
                })
                .collect(),
            round: 0,
        }
    }

    #[test]
    fn mean_of_one_and_two() {
        let e = vec![vec![0.1, 0.2], vec![0.3, -0.4], vec![0.5, 0.0]];
        let set = prototypes_from_embeddings(0, 4, &e, &[3, 1, 1]).unwrap();
        assert_eq!(set.get(3).unwrap(), &[0.1, 0.2]);
        assert_eq!(set.get(1).unwrap(), &[0.4, -0.2]);
        assert!(set.get(0).is_none() && set.get(2).is_none());
        assert_eq!(set.counts, vec![0, 2, 0, 1]);
    }

    #[test]
    fn empty_dataset() {
        assert_eq!(
            prototypes_from_embeddings(0, 2, &[], &[]),
            Err(Error::EmptyDataset)
        );
    }

    #[test]
    fn delta_examples() {
        let a = stack(vec![vec![Some(vec![0.0, 0.0, 0.0]), None]]);
        assert_eq!(prototype_delta_frobenius(&a, &a).unwrap(), 0.0);
        let b = stack(vec![vec![Some(vec![3.0, 4.0, 0.0]), None]]);
        assert_eq!(prototype_delta_frobenius(&b, &a).unwrap(), 5.0);
        let c = stack(vec![vec![None, None], vec![None, None]]);
        assert_eq!(prototype_delta_frobenius(&c, &a), Err(Error::ShapeMismatch));
    }
}
