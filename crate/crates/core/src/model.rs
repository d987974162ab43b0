//! MLP encoder + linear classifier with explicit forward/backward passes and
//! an SGD-with-momentum optimizer.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::numerics::{self, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => math::tanh(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => f64::from(u8::from(y > 0.0)),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Dense affine map `y = W x + b`, `W` stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim, self.out_dim)
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.in_dim == other.in_dim && self.out_dim == other.out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *yo += numerics::dot(row, x);
        }
        y
    }

    /// Accumulates `scale · δ xᵀ` and `scale · δ` into `grad`; returns `Wᵀ δ`
    /// when `want_input_grad` is set.
    fn backward(
        &self,
        x: &[f64],
        delta: &[f64],
        scale: f64,
        grad: &mut Dense,
        want_input_grad: bool,
    ) -> Vec<f64> {
        let mut dx = if want_input_grad {
            vec![0.0; self.in_dim]
        } else {
            Vec::new()
        };
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let sd = scale * d;
            grad.bias[o] += sd;
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            numerics::axpy(sd, x, grow);
            if want_input_grad {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                numerics::axpy(d, row, &mut dx);
            }
        }
        dx
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub dense: Dense,
    pub activation: Activation,
}

/// Encoder architecture: widths of the hidden layers. The encoder always
/// ends in a linear layer of width `d_feat` followed by the norm clamp.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub hidden: Vec<usize>,
}

impl ArchSpec {
    pub const PRESETS: [&'static str; 3] = ["tiny", "middle", "large"];

    /// `tiny` (1×32), `middle` (2×64), `large` (3×128), or a custom
    /// `mlp:W1xW2x...` (`mlp:` alone is a linear encoder).
    pub fn parse(name: &str) -> Result<Self> {
        let hidden = match name {
            "tiny" => vec![32],
            "middle" => vec![64, 64],
            "large" => vec![128, 128, 128],
            other => {
                let widths = other
                    .strip_prefix("mlp:")
                    .ok_or_else(|| Error::UnknownArch(other.to_string()))?;
                if widths.is_empty() {
                    Vec::new()
                } else {
                    widths
                        .split('x')
                        .map(|w| match w.parse::<usize>() {
                            Ok(v) if v > 0 => Ok(v),
                            _ => Err(Error::UnknownArch(other.to_string())),
                        })
                        .collect::<Result<Vec<_>>>()?
                }
            }
        };
        Ok(Self {
            name: name.to_string(),
            hidden,
        })
    }
}

/// Input/output sizes shared by all clients of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub d_feat: usize,
    pub num_classes: usize,
}

/// Encoder `w^θ` and classifier `w^h` of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<Layer>,
    pub classifier: Dense,
}

/// Gradient buffers with the exact shape of a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradShadow {
    pub encoder: Vec<Dense>,
    pub classifier: Dense,
}

/// Draws a fresh model; weights are `N(0, 1/fan_in)`, biases zero.
pub fn init_model(arch: &ArchSpec, shape: ModelShape, rng: &mut Rng) -> ModelParams {
    let mut widths = vec![shape.input_dim];
    widths.extend(&arch.hidden);
    widths.push(shape.d_feat);
    let n_layers = widths.len() - 1;
    let encoder = (0..n_layers)
        .map(|l| {
            let activation = if l + 1 == n_layers {
                Activation::Identity
            } else {
                Activation::Tanh
            };
            Layer {
                dense: random_dense(widths[l], widths[l + 1], rng),
                activation,
            }
        })
        .collect();
    ModelParams {
        encoder,
        classifier: random_dense(shape.d_feat, shape.num_classes, rng),
    }
}

fn random_dense(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Dense {
    let std = 1.0 / math::sqrt(in_dim as f64);
    Dense {
        in_dim,
        out_dim,
        weight: (0..in_dim * out_dim).map(|_| rng.normal() * std).collect(),
        bias: vec![0.0; out_dim],
    }
}

/// Activations recorded by [`encoder_forward`] for backprop.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    /// `activations[0]` is the input, `activations[l + 1]` the output of
    /// layer `l` (for the last layer, before the norm clamp).
    pub activations: Vec<Vec<f64>>,
    /// `max(1, ‖z‖)` applied to the last layer output.
    pub out_scale: f64,
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.encoder.first().map_or(0, |l| l.dense.in_dim)
    }

    pub fn d_feat(&self) -> usize {
        self.classifier.in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim
    }

    pub fn num_params(&self) -> usize {
        self.encoder_num_params() + self.classifier.num_params()
    }

    pub fn encoder_num_params(&self) -> usize {
        self.encoder.iter().map(|l| l.dense.num_params()).sum()
    }

    /// Parameter tensors in canonical order (encoder layers, then classifier;
    /// weight before bias).
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.encoder
            .iter()
            .map(|l| &l.dense)
            .chain(core::iter::once(&self.classifier))
            .flat_map(|d| [d.weight.as_slice(), d.bias.as_slice()])
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().flatten().copied().collect()
    }

    pub fn encoder_flatten(&self) -> Vec<f64> {
        self.encoder
            .iter()
            .flat_map(|l| l.dense.weight.iter().chain(&l.dense.bias))
            .copied()
            .collect()
    }

    /// Overwrites all parameters from a flat vector in canonical order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch);
        }
        let mut pos = 0;
        for d in self
            .encoder
            .iter_mut()
            .map(|l| &mut l.dense)
            .chain(core::iter::once(&mut self.classifier))
        {
            for t in [&mut d.weight, &mut d.bias] {
                let n = t.len();
                t.copy_from_slice(&flat[pos..pos + n]);
                pos += n;
            }
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.tensors().flatten().all(|v| v.is_finite())
    }
}

/// Embedding `r(h)` plus the cache needed to backpropagate through it.
///
/// The last layer output `z` is divided by `max(1, ‖z‖)`, so `‖r‖ ≤ 1`.
pub fn encoder_forward(m: &ModelParams, x: &[f64]) -> Result<(Vec<f64>, EncoderCache)> {
    if x.len() != m.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: m.input_dim(),
            got: x.len(),
        });
    }
    let mut activations = Vec::with_capacity(m.encoder.len() + 1);
    activations.push(x.to_vec());
    for layer in &m.encoder {
        let prev = activations.last().expect("input pushed above");
        let mut y = layer.dense.forward(prev);
        if layer.activation != Activation::Identity {
            for v in y.iter_mut() {
                *v = layer.activation.apply(*v);
            }
        }
        activations.push(y);
    }
    let z = activations.last().expect("at least the input");
    let out_scale = numerics::norm(z).max(1.0);
    let r: Vec<f64> = z.iter().map(|v| v / out_scale).collect();
    Ok((
        r,
        EncoderCache {
            activations,
            out_scale,
        },
    ))
}

/// Forward pass without keeping the cache.
pub fn embed(m: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    encoder_forward(m, x).map(|(r, _)| r)
}

/// Accumulates `scale · ∂L/∂w^θ` into `grads.encoder`, given `d_r = ∂L/∂r`.
pub fn encoder_backward(
    m: &ModelParams,
    cache: &EncoderCache,
    d_r: &[f64],
    scale: f64,
    grads: &mut GradShadow,
) {
    let n_layers = m.encoder.len();
    let z = &cache.activations[n_layers];
    // through r = z / max(1, ‖z‖)
    let mut delta: Vec<f64> = if cache.out_scale > 1.0 {
        let s = cache.out_scale;
        let r_dot: f64 = z.iter().zip(d_r).map(|(zi, gi)| zi * gi).sum::<f64>() / s;
        z.iter()
            .zip(d_r)
            .map(|(zi, gi)| (gi - (zi / s) * r_dot) / s)
            .collect()
    } else {
        d_r.to_vec()
    };
    for l in (0..n_layers).rev() {
        let layer = &m.encoder[l];
        let out = &cache.activations[l + 1];
        if layer.activation != Activation::Identity {
            for (d, &y) in delta.iter_mut().zip(out) {
                *d *= layer.activation.derivative_from_output(y);
            }
        }
        delta = layer.dense.backward(
            &cache.activations[l],
            &delta,
            scale,
            &mut grads.encoder[l],
            l > 0,
        );
    }
}

/// Logits `W^h r + b^h`.
pub fn classifier_forward(m: &ModelParams, r: &[f64]) -> Result<Vec<f64>> {
    if r.len() != m.d_feat() {
        return Err(Error::DimensionMismatch {
            expected: m.d_feat(),
            got: r.len(),
        });
    }
    Ok(m.classifier.forward(r))
}

/// Accumulates classifier gradients and returns `∂L/∂r`.
pub fn classifier_backward(
    m: &ModelParams,
    r: &[f64],
    d_logits: &[f64],
    scale: f64,
    grads: &mut GradShadow,
) -> Vec<f64> {
    m.classifier
        .backward(r, d_logits, scale, &mut grads.classifier, true)
}

impl GradShadow {
    pub fn zeros_like(m: &ModelParams) -> Self {
        Self {
            encoder: m.encoder.iter().map(|l| l.dense.zeros_like()).collect(),
            classifier: m.classifier.zeros_like(),
        }
    }

    pub fn matches(&self, m: &ModelParams) -> bool {
        self.encoder.len() == m.encoder.len()
            && self
                .encoder
                .iter()
                .zip(&m.encoder)
                .all(|(g, l)| g.same_shape(&l.dense))
            && self.classifier.same_shape(&m.classifier)
    }

    fn denses(&self) -> impl Iterator<Item = &Dense> {
        self.encoder.iter().chain(core::iter::once(&self.classifier))
    }

    fn denses_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder
            .iter_mut()
            .chain(core::iter::once(&mut self.classifier))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.denses()
            .flat_map(|d| d.weight.iter().chain(&d.bias))
            .copied()
            .collect()
    }

    pub fn norm_sq(&self) -> f64 {
        self.denses()
            .map(|d| numerics::norm_sq(&d.weight) + numerics::norm_sq(&d.bias))
            .sum()
    }

    pub fn encoder_norm_sq(&self) -> f64 {
        self.encoder
            .iter()
            .map(|d| numerics::norm_sq(&d.weight) + numerics::norm_sq(&d.bias))
            .sum()
    }

    pub fn scale(&mut self, s: f64) {
        for d in self.denses_mut() {
            d.weight.iter_mut().chain(d.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &GradShadow) {
        for (a, b) in self.denses_mut().zip(other.denses()) {
            numerics::axpy(1.0, &b.weight, &mut a.weight);
            numerics::axpy(1.0, &b.bias, &mut a.bias);
        }
    }

    pub fn dist_sq(&self, other: &GradShadow) -> f64 {
        self.denses()
            .zip(other.denses())
            .map(|(a, b)| {
                numerics::dist_sq(&a.weight, &b.weight) + numerics::dist_sq(&a.bias, &b.bias)
            })
            .sum()
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: GradShadow,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(m: &ModelParams, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: GradShadow::zeros_like(m),
            lr,
            momentum,
            weight_decay,
        }
    }
}

/// `v ← μ v + (g + λ_wd w)`, `w ← w − η v` on every tensor.
pub fn sgd_step(m: &mut ModelParams, grads: &GradShadow, opt: &mut OptimizerState) -> Result<()> {
    if !grads.matches(m) || !opt.velocity.matches(m) {
        return Err(Error::ShapeMismatch);
    }
    let (lr, mu, wd) = (opt.lr, opt.momentum, opt.weight_decay);
    let params = m
        .encoder
        .iter_mut()
        .map(|l| &mut l.dense)
        .chain(core::iter::once(&mut m.classifier));
    let vels = opt.velocity.denses_mut();
    for ((p, v), g) in params.zip(vels).zip(grads.denses()) {
        for (pw, (vw, gw)) in [
            (&mut p.weight, (&mut v.weight, &g.weight)),
            (&mut p.bias, (&mut v.bias, &g.bias)),
        ] {
            for ((w, vel), grad) in pw.iter_mut().zip(vw.iter_mut()).zip(gw.iter()) {
                *vel = mu * *vel + (grad + wd * *w);
                *w -= lr * *vel;
            }
        }
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FAPC";
const CHECKPOINT_VERSION: u32 = 1;

/// Little-endian checkpoint: magic, version, layer count, per-layer
/// `(in, out, activation)` headers, classifier `(in, out)`, then every tensor
/// in canonical order as `f64`.
pub fn encode_checkpoint(m: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * m.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.encoder.len() as u32).to_le_bytes());
    for l in &m.encoder {
        out.extend_from_slice(&(l.dense.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(l.dense.out_dim as u32).to_le_bytes());
        out.push(l.activation.tag());
    }
    out.extend_from_slice(&(m.classifier.in_dim as u32).to_le_bytes());
    out.extend_from_slice(&(m.classifier.out_dim as u32).to_le_bytes());
    for v in m.tensors().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let read_u32 = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
    let version = read_u32(take(4)?);
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint("unsupported version".into()));
    }
    let n_layers = read_u32(take(4)?);
    let mut encoder = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let in_dim = read_u32(take(4)?);
        let out_dim = read_u32(take(4)?);
        let activation = Activation::from_tag(take(1)?[0])
            .ok_or_else(|| Error::Checkpoint("bad activation tag".into()))?;
        encoder.push(Layer {
            dense: Dense::zeros(in_dim, out_dim),
            activation,
        });
    }
    let c_in = read_u32(take(4)?);
    let c_out = read_u32(take(4)?);
    let mut m = ModelParams {
        encoder,
        classifier: Dense::zeros(c_in, c_out),
    };
    for w in m.encoder.windows(2) {
        if w[0].dense.out_dim != w[1].dense.in_dim {
            return Err(Error::Checkpoint("layer shapes do not chain".into()));
        }
    }
    if m.encoder.last().map(|l| l.dense.out_dim) != Some(c_in) {
        return Err(Error::Checkpoint("encoder output does not match classifier".into()));
    }
    let n = m.num_params();
    let payload = take(8 * n)?;
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect();
    if !cur.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    m.set_flat(&flat)?;
    if !m.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> ModelShape {
        ModelShape {
            input_dim: 32,
            d_feat: 256,
            num_classes: 21,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let arch = ArchSpec::parse("middle").unwrap();
        let a = init_model(&arch, shape(), &mut Rng::new(5));
        let b = init_model(&arch, shape(), &mut Rng::new(5));
        assert_eq!(a, b);
    }

    #[test]
    fn presets_differ_in_capacity() {
        let tiny = init_model(&ArchSpec::parse("tiny").unwrap(), shape(), &mut Rng::new(0));
        let large = init_model(&ArchSpec::parse("large").unwrap(), shape(), &mut Rng::new(0));
        assert!(large.num_params() > 5 * tiny.num_params());
        assert_eq!(tiny.d_feat(), large.d_feat());
    }

    #[test]
    fn unknown_arch() {
        assert_eq!(
            ArchSpec::parse("bogus"),
            Err(Error::UnknownArch("bogus".into()))
        );
        assert!(ArchSpec::parse("mlp:8x0").is_err());
        assert_eq!(ArchSpec::parse("mlp:").unwrap().hidden, Vec::<usize>::new());
    }

    #[test]
    fn zero_model_gives_zero_embedding() {
        let mut m = init_model(&ArchSpec::parse("tiny").unwrap(), shape(), &mut Rng::new(1));
        let zeros = vec![0.0; m.num_params()];
        m.set_flat(&zeros).unwrap();
        let r = embed(&m, &[0.7; 32]).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_is_bounded_and_pure() {
        let mut rng = Rng::new(9);
        for k in 0..1000 {
            let arch = ArchSpec::parse(ArchSpec::PRESETS[k % 3]).unwrap();
            let m = init_model(&arch, shape(), &mut rng);
            let x: Vec<f64> = (0..32).map(|_| 5.0 * rng.normal()).collect();
            let r = embed(&m, &x).unwrap();
            assert!(numerics::norm(&r) <= 1.0 + 1e-12);
            if k < 10 {
                assert_eq!(r, embed(&m, &x).unwrap());
            }
        }
    }

    #[test]
    fn forward_dimension_errors() {
        let m = init_model(&ArchSpec::parse("tiny").unwrap(), shape(), &mut Rng::new(1));
        assert!(matches!(
            encoder_forward(&m, &[1.0; 3]),
            Err(Error::DimensionMismatch { expected: 32, got: 3 })
        ));
        assert!(matches!(
            classifier_forward(&m, &[1.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn classifier_examples() {
        let mut m = init_model(
            &ArchSpec::parse("mlp:").unwrap(),
            ModelShape {
                input_dim: 3,
                d_feat: 3,
                num_classes: 3,
            },
            &mut Rng::new(2),
        );
        m.classifier.weight = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        m.classifier.bias = vec![0.0; 3];
        assert_eq!(classifier_forward(&m, &[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        m.classifier.weight = vec![0.0; 9];
        m.classifier.bias = vec![0.5, -1.0, 2.0];
        assert_eq!(classifier_forward(&m, &[0.3, 0.1, 0.9]).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn classifier_matches_naive_matmul() {
        let mut rng = Rng::new(4);
        let m = init_model(&ArchSpec::parse("tiny").unwrap(), shape(), &mut rng);
        let r = rng.unit_vector(256);
        let logits = classifier_forward(&m, &r).unwrap();
        for c in 0..21 {
            let mut acc = m.classifier.bias[c];
            for k in 0..256 {
                acc += m.classifier.weight[c * 256 + k] * r[k];
            }
            assert!((acc - logits[c]).abs() < 1e-12);
        }
    }

    fn scalar_model(w: f64) -> ModelParams {
        ModelParams {
            encoder: vec![],
            classifier: Dense {
                in_dim: 1,
                out_dim: 1,
                weight: vec![w],
                bias: vec![0.0],
            },
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut m = scalar_model(1.0);
        let mut opt = OptimizerState::new(&m, 0.1, 0.0, 0.0);
        let mut g = GradShadow::zeros_like(&m);
        g.classifier.weight[0] = 2.0;
        sgd_step(&mut m, &g, &mut opt).unwrap();
        assert_eq!(m.classifier.weight[0], 1.0 - 0.1 * 2.0);

        let before = m.clone();
        let mut opt = OptimizerState::new(&m, 0.1, 0.9, 0.0);
        sgd_step(&mut m, &GradShadow::zeros_like(&before), &mut opt).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn momentum_recursion_by_hand() {
        let (lr, mu, wd) = (0.05, 0.5, 0.01);
        let mut m = scalar_model(2.0);
        let mut opt = OptimizerState::new(&m, lr, mu, wd);
        let grads = [0.3, -0.7];
        let (mut w, mut v) = (2.0f64, 0.0f64);
        for g in grads {
            let mut gs = GradShadow::zeros_like(&m);
            gs.classifier.weight[0] = g;
            sgd_step(&mut m, &gs, &mut opt).unwrap();
            v = mu * v + (g + wd * w);
            w -= lr * v;
        }
        assert!((m.classifier.weight[0] - w).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_mismatched_shapes() {
        let mut m = scalar_model(1.0);
        let other = init_model(&ArchSpec::parse("tiny").unwrap(), shape(), &mut Rng::new(0));
        let mut opt = OptimizerState::new(&m, 0.1, 0.0, 0.0);
        assert_eq!(
            sgd_step(&mut m, &GradShadow::zeros_like(&other), &mut opt),
            Err(Error::ShapeMismatch)
        );
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let m = init_model(&ArchSpec::parse("middle").unwrap(), shape(), &mut Rng::new(8));
        let bytes = encode_checkpoint(&m);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), m);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
    }
}
