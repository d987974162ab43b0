//! Client datasets: synthetic non-IID generation (label skew via Dirichlet
//! partitioning, feature skew via per-client affine maps) and the container
//! used for user-supplied data.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::numerics::{stream, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// One client's local data with its train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub num_classes: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Number of training samples per class (`m_i^c`).
    pub class_counts: Vec<usize>,
}

impl ClientDataset {
    pub fn new(
        client_id: usize,
        num_classes: usize,
        train: Vec<Sample>,
        test: Vec<Sample>,
    ) -> Result<Self> {
        let dim = train
            .first()
            .or(test.first())
            .map(|s| s.features.len())
            .unwrap_or(0);
        let mut class_counts = vec![0usize; num_classes];
        for s in train.iter().chain(&test) {
            if s.label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    num_classes,
                });
            }
            if s.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: s.features.len(),
                });
            }
        }
        for s in &train {
            class_counts[s.label] += 1;
        }
        Ok(Self {
            client_id,
            num_classes,
            train,
            test,
            class_counts,
        })
    }

    /// Classes with at least one training sample (`C_i`).
    pub fn present_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.class_counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, _)| c)
    }

    pub fn has_class(&self, class: usize) -> bool {
        self.class_counts.get(class).is_some_and(|&n| n > 0)
    }

    pub fn input_dim(&self) -> usize {
        self.train
            .first()
            .or(self.test.first())
            .map_or(0, |s| s.features.len())
    }
}

/// Parameters of the synthetic non-IID generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_clients: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    /// Dirichlet concentration for label skew; `f64::INFINITY` gives a
    /// balanced, skew-free allocation.
    pub dirichlet_beta: f64,
    pub feature_skew_strength: f64,
    pub samples_per_client: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_clients: 6,
            num_classes: 21,
            input_dim: 32,
            dirichlet_beta: 0.3,
            feature_skew_strength: 0.3,
            samples_per_client: 420,
            class_separation: 3.0,
            noise_sigma: 1.0,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidSpec(msg.into()));
        if self.num_clients < 2 {
            return bad("num_clients must be >= 2");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.input_dim == 0 {
            return bad("input_dim must be >= 1");
        }
        if !(self.dirichlet_beta > 0.0) {
            return bad("dirichlet_beta must be > 0");
        }
        if !(self.feature_skew_strength >= 0.0) || !self.feature_skew_strength.is_finite() {
            return bad("feature_skew_strength must be finite and >= 0");
        }
        if self.samples_per_client == 0 {
            return bad("samples_per_client must be >= 1");
        }
        if !(self.class_separation > 0.0) || !self.class_separation.is_finite() {
            return bad("class_separation must be finite and > 0");
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be finite and > 0");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Splits each class total across `num_clients` clients with proportions
/// drawn from `Dirichlet(beta · 1_N)`.
///
/// Returns `quotas[client][class]`. Per-class quotas always sum to the class
/// total; clients may receive nothing of some classes.
pub fn dirichlet_partition(
    class_totals: &[usize],
    beta: f64,
    num_clients: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    if !(beta > 0.0) {
        return Err(Error::NonPositiveBeta(beta));
    }
    if num_clients == 0 {
        return Err(Error::InvalidSpec("num_clients must be >= 1".into()));
    }
    let mut quotas = vec![vec![0usize; class_totals.len()]; num_clients];
    for (class, &total) in class_totals.iter().enumerate() {
        let props: Vec<f64> = if beta.is_infinite() {
            vec![1.0 / num_clients as f64; num_clients]
        } else {
            let draws: Vec<f64> = (0..num_clients).map(|_| rng.gamma(beta)).collect();
            let sum: f64 = draws.iter().sum();
            if sum > 0.0 && sum.is_finite() {
                draws.iter().map(|g| g / sum).collect()
            } else {
                // every gamma draw underflowed: the limit puts all mass on one client
                let mut p = vec![0.0; num_clients];
                p[rng.below(num_clients)] = 1.0;
                p
            }
        };
        for (client, n) in largest_remainder(total, &props).into_iter().enumerate() {
            quotas[client][class] = n;
        }
    }
    Ok(quotas)
}

/// Integer allocation of `total` proportional to `props` (Hamilton method;
/// ties go to the lower index).
fn largest_remainder(total: usize, props: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&x| math::floor(x) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Stratified train/test split.
///
/// The test share of each class is `floor(n_c · (1 − f))`, topped up by
/// largest remainder until the client-level test size is
/// `round(n · (1 − f))`. Classes with at least 5 samples always get a test
/// sample; classes with at least 2 keep a training sample; singletons train.
pub fn stratified_split(
    samples: Vec<Sample>,
    num_classes: usize,
    train_fraction: f64,
    rng: &mut Rng,
) -> (Vec<Sample>, Vec<Sample>) {
    let mut by_class: Vec<Vec<Sample>> = vec![Vec::new(); num_classes];
    let n = samples.len();
    for s in samples {
        let c = s.label.min(num_classes - 1);
        by_class[c].push(s);
    }
    let test_frac = 1.0 - train_fraction;
    let target = math::round(n as f64 * test_frac) as usize;

    let mut test_counts = vec![0usize; num_classes];
    let mut remainders = vec![0.0f64; num_classes];
    for (c, group) in by_class.iter().enumerate() {
        let nc = group.len();
        let exact = nc as f64 * test_frac;
        let mut k = math::floor(exact) as usize;
        if nc >= 5 {
            k = k.max(1);
        }
        if nc >= 2 {
            k = k.min(nc - 1);
        } else {
            k = 0;
        }
        test_counts[c] = k;
        remainders[c] = exact - math::floor(exact);
    }
    let mut assigned: usize = test_counts.iter().sum();
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| {
        remainders[b]
            .partial_cmp(&remainders[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &c in &order {
        if assigned >= target {
            break;
        }
        let nc = by_class[c].len();
        if nc >= 2 && test_counts[c] < nc - 1 && remainders[c] > 0.0 {
            test_counts[c] += 1;
            assigned += 1;
        }
    }

    let mut train = Vec::with_capacity(n);
    let mut test = Vec::with_capacity(target);
    for (c, mut group) in by_class.into_iter().enumerate() {
        rng.shuffle(&mut group);
        let train_part = group.split_off(test_counts[c]);
        test.extend(group);
        train.extend(train_part);
    }
    (train, test)
}

/// Generates one dataset per client from class-conditional Gaussians.
///
/// Global class means sit on a sphere of radius `class_separation`. Client
/// `i` observes `A_i (μ_c + σ ε) + b_i` with `A_i = I + s E_i`, where `E_i`
/// has i.i.d. `N(0, 1/d)` entries (spectral norm ≈ 2) and `b_i` is a random
/// offset of length `s · class_separation`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let n = spec.num_clients;
    let c = spec.num_classes;
    let d = spec.input_dim;
    let mut rng = Rng::derive(spec.seed, stream::DATA, 0, 0);

    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let u = rng.unit_vector(d);
            u.iter().map(|x| x * spec.class_separation).collect()
        })
        .collect();

    let quotas = if spec.dirichlet_beta.is_infinite() {
        (0..n)
            .map(|_| {
                let base = spec.samples_per_client / c;
                let extra = spec.samples_per_client % c;
                (0..c).map(|k| base + usize::from(k < extra)).collect()
            })
            .collect()
    } else {
        let total = spec.samples_per_client * n;
        let totals: Vec<usize> = (0..c)
            .map(|k| total / c + usize::from(k < total % c))
            .collect();
        dirichlet_partition(&totals, spec.dirichlet_beta, n, &mut rng)?
    };

    let scale = 1.0 / math::sqrt(d as f64);
    let mut out = Vec::with_capacity(n);
    for (client, client_quota) in quotas.iter().enumerate() {
        let mut crng = Rng::derive(spec.seed, stream::DATA, 1, client as u64);
        let s = spec.feature_skew_strength;
        // A_i stored row-major
        let mut a = vec![0.0; d * d];
        for r in 0..d {
            for k in 0..d {
                let e = crng.normal() * scale;
                a[r * d + k] = f64::from(u8::from(r == k)) + s * e;
            }
        }
        let offset: Vec<f64> = crng
            .unit_vector(d)
            .into_iter()
            .map(|x| x * s * spec.class_separation)
            .collect();

        let mut samples = Vec::new();
        let mut latent = vec![0.0; d];
        for (label, &count) in client_quota.iter().enumerate() {
            for _ in 0..count {
                for (z, m) in latent.iter_mut().zip(&means[label]) {
                    *z = m + spec.noise_sigma * crng.normal();
                }
                let features: Vec<f64> = (0..d)
                    .map(|r| {
                        let row = &a[r * d..(r + 1) * d];
                        crate::numerics::dot(row, &latent) + offset[r]
                    })
                    .collect();
                samples.push(Sample { features, label });
            }
        }
        let mut srng = Rng::derive(spec.seed, stream::SPLIT, client as u64, 0);
        let (train, test) = stratified_split(samples, c, spec.train_fraction, &mut srng);
        if train.is_empty() {
            return Err(Error::InvalidSpec(format!(
                "client {client} received no training samples"
            )));
        }
        out.push(ClientDataset::new(client, c, train, test)?);
    }
    Ok(out)
}
