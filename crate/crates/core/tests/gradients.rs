//! Analytic gradients against central finite differences on random tiny
//! models.

use fedapa_core::data::Sample;
use fedapa_core::losses::{total_loss, LossBreakdown, ObjectiveOptions, PrototypeTargets};
use fedapa_core::model::{init_model, ArchSpec, ModelParams, ModelShape};
use fedapa_core::numerics::{finite_diff_grad, Rng};
use fedapa_core::prototypes::{PersonalizedPrototypes, PrototypeSet, StackedPrototypes};

const D_IN: usize = 8;
const D_FEAT: usize = 16;
const C: usize = 3;
const N: usize = 3;
const MODELS: u64 = 50;
const EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const MIN_MAG: f64 = 1e-6;

struct Case {
    model: ModelParams,
    batch: Vec<Sample>,
    q: PersonalizedPrototypes,
    p: StackedPrototypes,
    tau: f64,
}

fn ball_vector(rng: &mut Rng, d: usize) -> Vec<f64> {
    let r = 0.2 + 0.8 * rng.uniform();
    rng.unit_vector(d).into_iter().map(|v| v * r).collect()
}

fn case(seed: u64) -> Case {
    let mut rng = Rng::new(1000 + seed);
    let arch = ArchSpec::parse(["mlp:8", "mlp:6x5", "mlp:"][seed as usize % 3]).unwrap();
    let shape = ModelShape {
        input_dim: D_IN,
        d_feat: D_FEAT,
        num_classes: C,
    };
    let mut model = init_model(&arch, shape, &mut rng);
    // spread embedding norms on both sides of the clamp
    let gain = 0.05 + 0.5 * rng.uniform();
    let last = model.encoder.last_mut().unwrap();
    last.dense.weight.iter_mut().for_each(|w| *w *= gain);
    for b in model
        .encoder
        .iter_mut()
        .flat_map(|l| l.dense.bias.iter_mut())
        .chain(model.classifier.bias.iter_mut())
    {
        *b = 0.1 * rng.normal();
    }
    let batch = (0..5)
        .map(|_| Sample {
            features: rng.normal_vec(D_IN),
            label: rng.below(C),
        })
        .collect();
    let q = PersonalizedPrototypes {
        client_id: 0,
        entries: (0..C).map(|_| Some(ball_vector(&mut rng, D_FEAT))).collect(),
    };
    let sets = (0..N)
        .map(|i| PrototypeSet {
            client_id: i,
            entries: (0..C).map(|_| Some(ball_vector(&mut rng, D_FEAT))).collect(),
            padded: (0..C).map(|_| rng.uniform() < 0.3).collect(),
            counts: vec![1; C],
        })
        .collect();
    Case {
        model,
        batch,
        q,
        p: StackedPrototypes { sets, round: 1 },
        tau: [0.5, 0.2, 1.0][seed as usize % 3],
    }
}

fn targets(c: &Case, use_lg: bool, use_lc: bool) -> PrototypeTargets {
    PrototypeTargets::new(
        0,
        &c.q,
        &c.p,
        c.tau,
        ObjectiveOptions {
            use_lg,
            use_lc,
            lc_include_self: true,
        },
    )
    .unwrap()
}

fn eval(c: &Case, model: &ModelParams, t: Option<&PrototypeTargets>, lambda: f64) -> (LossBreakdown, Vec<f64>) {
    let batch: Vec<&Sample> = c.batch.iter().collect();
    let (b, g) = total_loss(&batch, model, t, lambda).unwrap();
    (b, g.flatten())
}

fn fd(c: &Case, pick: impl Fn(&LossBreakdown) -> f64, t: Option<&PrototypeTargets>, lambda: f64) -> Vec<f64> {
    let mut m = c.model.clone();
    finite_diff_grad(
        |w| {
            m.set_flat(w).unwrap();
            pick(&eval(c, &m, t, lambda).0)
        },
        &c.model.flatten(),
        EPS,
    )
    .unwrap()
}

/// Returns the number of compared entries; panics on the first mismatch.
fn compare(label: &str, seed: u64, analytic: &[f64], numeric: &[f64]) -> usize {
    assert_eq!(analytic.len(), numeric.len());
    let mut checked = 0;
    for (k, (a, f)) in analytic.iter().zip(numeric).enumerate() {
        let mag = a.abs().max(f.abs());
        if mag <= MIN_MAG {
            continue;
        }
        checked += 1;
        let rel = (a - f).abs() / mag;
        assert!(
            rel <= REL_TOL,
            "{label}, model {seed}, entry {k}: analytic {a:e} vs numeric {f:e} (rel {rel:e})"
        );
    }
    checked
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[test]
fn cross_entropy_gradients() {
    let mut checked = 0;
    for seed in 0..MODELS {
        let c = case(seed);
        let (_, g) = eval(&c, &c.model, None, 0.0);
        checked += compare("ce", seed, &g, &fd(&c, |b| b.ce, None, 0.0));
    }
    assert!(checked > 1000);
}

#[test]
fn personalized_term_gradients() {
    for seed in 0..MODELS {
        let c = case(seed);
        let t = targets(&c, true, false);
        let (_, with) = eval(&c, &c.model, Some(&t), 1.0);
        let (_, ce) = eval(&c, &c.model, None, 0.0);
        compare("lg", seed, &sub(&with, &ce), &fd(&c, |b| b.lg, Some(&t), 1.0));
    }
}

#[test]
fn inter_client_term_gradients() {
    for seed in 0..MODELS {
        let c = case(seed);
        let t = targets(&c, false, true);
        let (_, with) = eval(&c, &c.model, Some(&t), 1.0);
        let (_, ce) = eval(&c, &c.model, None, 0.0);
        compare("lc", seed, &sub(&with, &ce), &fd(&c, |b| b.lc, Some(&t), 1.0));
    }
}

#[test]
fn full_objective_gradients() {
    for seed in 0..MODELS {
        let c = case(seed);
        let t = targets(&c, true, true);
        let lambda = [0.3, 1.0, 0.000987][seed as usize % 3];
        let (_, g) = eval(&c, &c.model, Some(&t), lambda);
        compare("total", seed, &g, &fd(&c, |b| b.total, Some(&t), lambda));
    }
}
