use fedapa_core::data::{dirichlet_partition, generate_synthetic, Sample, SynthSpec};
use fedapa_core::model::{
    classifier_forward, embed, init_model, sgd_step, ArchSpec, ModelShape, OptimizerState,
};
use fedapa_core::losses::total_loss;
use fedapa_core::numerics::Rng;
use fedapa_core::prototypes::{
    compute_local_prototypes, prototype_delta_frobenius, PrototypeSet, StackedPrototypes,
};

#[test]
fn sparse_dirichlet_leaves_empty_cells() {
    let mut with_zero = 0;
    for seed in 0..1000 {
        let mut rng = Rng::new(seed);
        let q = dirichlet_partition(&[600; 5], 0.1, 6, &mut rng).unwrap();
        for c in 0..5 {
            assert_eq!(q.iter().map(|row| row[c]).sum::<usize>(), 600);
        }
        if q.iter().flatten().any(|&v| v == 0) {
            with_zero += 1;
        }
    }
    assert!(with_zero > 990, "{with_zero} of 1000");
}

#[test]
fn synthetic_is_deterministic() {
    let spec = SynthSpec {
        seed: 17,
        ..SynthSpec::default()
    };
    assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
}

#[test]
fn stratified_test_split_covers_frequent_classes() {
    let data = generate_synthetic(&SynthSpec::default()).unwrap();
    let total: usize = data.iter().map(|d| d.train.len() + d.test.len()).sum();
    assert_eq!(total, 6 * 420);
    for ds in &data {
        let mut all = vec![0usize; ds.num_classes];
        let mut test = vec![0usize; ds.num_classes];
        for s in &ds.train {
            all[s.label] += 1;
        }
        for s in &ds.test {
            all[s.label] += 1;
            test[s.label] += 1;
        }
        for c in 0..ds.num_classes {
            if all[c] >= 5 {
                assert!(test[c] >= 1, "client {} class {c}", ds.client_id);
            }
        }
        let n = ds.train.len() + ds.test.len();
        assert_eq!(ds.test.len(), (n as f64 * 0.2).round() as usize);
    }
}

/// A single model trained on pooled, skew-free data.
#[test]
fn central_classifier_separates_classes() {
    let spec = SynthSpec {
        num_clients: 4,
        num_classes: 5,
        input_dim: 32,
        dirichlet_beta: f64::INFINITY,
        feature_skew_strength: 0.0,
        samples_per_client: 250,
        class_separation: 4.0,
        noise_sigma: 1.0,
        seed: 3,
        ..SynthSpec::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let train: Vec<&Sample> = data.iter().flat_map(|d| &d.train).collect();
    let test: Vec<&Sample> = data.iter().flat_map(|d| &d.test).collect();
    let shape = ModelShape {
        input_dim: 32,
        d_feat: 16,
        num_classes: 5,
    };
    let mut rng = Rng::new(3);
    let mut model = init_model(&ArchSpec::parse("tiny").unwrap(), shape, &mut rng);
    let mut opt = OptimizerState::new(&model, 0.05, 0.9, 0.0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..20 {
        rng.shuffle(&mut order);
        for chunk in order.chunks(16) {
            let batch: Vec<&Sample> = chunk.iter().map(|&k| train[k]).collect();
            let (_, g) = total_loss(&batch, &model, None, 0.0).unwrap();
            sgd_step(&mut model, &g, &mut opt).unwrap();
        }
    }
    let hits = test
        .iter()
        .filter(|s| {
            let logits = classifier_forward(&model, &embed(&model, &s.features).unwrap()).unwrap();
            let best = (0..5).fold(0, |b, k| if logits[k] > logits[b] { k } else { b });
            best == s.label
        })
        .count();
    let acc = hits as f64 / test.len() as f64;
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn prototypes_match_naive_recompute_and_ignore_order() {
    let spec = SynthSpec {
        num_clients: 2,
        num_classes: 4,
        input_dim: 6,
        dirichlet_beta: f64::INFINITY,
        samples_per_client: 250,
        ..SynthSpec::default()
    };
    let mut ds = generate_synthetic(&spec).unwrap().remove(0);
    let shape = ModelShape {
        input_dim: 6,
        d_feat: 5,
        num_classes: 4,
    };
    let model = init_model(&ArchSpec::parse("middle").unwrap(), shape, &mut Rng::new(1));
    let set = compute_local_prototypes(&model, &ds).unwrap();
    for c in 0..4 {
        let members: Vec<&Sample> = ds.train.iter().filter(|s| s.label == c).collect();
        assert!(members.len() >= 50);
        let mut naive = vec![0.0; 5];
        for s in members.iter().rev() {
            let r = embed(&model, &s.features).unwrap();
            for k in 0..5 {
                naive[k] += r[k] / members.len() as f64;
            }
        }
        let got = set.get(c).unwrap();
        assert!(got.iter().zip(&naive).all(|(a, b)| (a - b).abs() <= 1e-12));
        assert!(got.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1.0);
    }
    Rng::new(8).shuffle(&mut ds.train);
    let shuffled = compute_local_prototypes(&model, &ds).unwrap();
    for c in 0..4 {
        let (a, b) = (set.get(c).unwrap(), shuffled.get(c).unwrap());
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-10));
    }
}

#[test]
fn delta_matches_flattened_norm() {
    let mut rng = Rng::new(12);
    for _ in 0..100 {
        let (n, c, d) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(6));
        let make = |rng: &mut Rng| StackedPrototypes {
            sets: (0..n)
                .map(|i| {
                    let mut s = PrototypeSet::empty(i, c);
                    for e in s.entries.iter_mut() {
                        *e = Some(rng.normal_vec(d));
                    }
                    s
                })
                .collect(),
            round: 0,
        };
        let (a, b) = (make(&mut rng), make(&mut rng));
        let flat = |p: &StackedPrototypes| -> Vec<f64> {
            p.sets
                .iter()
                .flat_map(|s| s.entries.iter().flatten().flatten().copied())
                .collect()
        };
        let want = flat(&a)
            .iter()
            .zip(flat(&b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let got = prototype_delta_frobenius(&a, &b).unwrap();
        assert!((got - want).abs() <= 1e-12 * want.max(1.0));
    }
}
