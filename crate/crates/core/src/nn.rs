//! Minimal fully-connected networks with manual backpropagation.
//!
//! Everything is generic over the float type: the pipeline runs in `f32`,
//! while gradient-oracle tests instantiate the same code in `f64` so central
//! finite differences can resolve relative errors below 1e-4.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng as _;

use crate::rng::Rng;

/// Float type usable by the network code.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Sum + Send + Sync + Debug + 'static
{
}

impl<T> Real for T where
    T: Float + AddAssign + SubAssign + MulAssign + Sum + Send + Sync + Debug + 'static
{
}

/// Converts an `f64` constant into the working float type.
#[inline]
pub fn real<F: Real>(x: f64) -> F {
    F::from(x).expect("constant representable in float type")
}

/// Dot product with eight independent accumulators; the layout vectorizes
/// well and its summation order is fixed, so results are reproducible.
#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (ka, kb) in ca.zip(cb) {
        for lane in 0..8 {
            acc[lane] = acc[lane] + ka[lane] * kb[lane];
        }
    }
    let mut sum = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        sum = sum + *x * *y;
    }
    sum
}

/// One dense layer, weights stored row-major as `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub weights: Vec<F>,
    pub bias: Vec<F>,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl<F: Real> Dense<F> {
    fn xavier(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| real::<F>((rng.gen::<f64>() * 2.0 - 1.0) * limit))
            .collect();
        Self { weights, bias: vec![F::zero(); out_dim], out_dim, in_dim }
    }

    fn forward(&self, input: &[F], out: &mut Vec<F>) {
        debug_assert_eq!(input.len(), self.in_dim);
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.in_dim).zip(&self.bias) {
            out.push(dot(row, input) + *b);
        }
    }
}

/// A feed-forward network: tanh on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    layers: Vec<Dense<F>>,
}

impl<F: Real> Mlp<F> {
    /// Builds a network with the given layer dimensions, e.g. `[in, h, out]`.
    /// Weights are Xavier-uniform, biases zero; draw order is fixed so a
    /// seeded generator yields a reproducible network.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "network needs at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| Dense::xavier(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    pub fn layers(&self) -> &[Dense<F>] {
        &self.layers
    }

    /// Plain forward pass.
    pub fn forward(&self, input: &[F]) -> Vec<F> {
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(&cur, &mut next);
            if i < last {
                for v in next.iter_mut() {
                    *v = v.tanh();
                }
            }
            core::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Forward pass that records the per-layer activations needed by
    /// [`Mlp::backward`].
    pub fn forward_tape(&self, input: &[F]) -> Tape<F> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.forward(acts.last().expect("nonempty"), &mut out);
            if i < last {
                for v in out.iter_mut() {
                    *v = v.tanh();
                }
            }
            acts.push(out);
        }
        Tape { acts }
    }

    /// Backpropagates `d_out` (gradient w.r.t. the network output) through
    /// the recorded tape, accumulating parameter gradients into `grads` and
    /// returning the gradient w.r.t. the input.
    pub fn backward(&self, tape: &Tape<F>, d_out: &[F], grads: &mut MlpGrads<F>) -> Vec<F> {
        debug_assert_eq!(tape.acts.len(), self.layers.len() + 1);
        debug_assert_eq!(d_out.len(), self.output_dim());
        let last = self.layers.len() - 1;
        let mut delta = d_out.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a_in = &tape.acts[l];
            if l < last {
                // tanh'(z) expressed through the post-activation value.
                let a_out = &tape.acts[l + 1];
                for (d, a) in delta.iter_mut().zip(a_out) {
                    *d *= F::one() - *a * *a;
                }
            }
            let g = &mut grads.layers[l];
            for (j, d) in delta.iter().enumerate() {
                g.bias[j] += *d;
                let row = &mut g.weights[j * layer.in_dim..(j + 1) * layer.in_dim];
                for (gw, a) in row.iter_mut().zip(a_in) {
                    *gw += *d * *a;
                }
            }
            let mut d_in = vec![F::zero(); layer.in_dim];
            for (j, d) in delta.iter().enumerate() {
                let row = &layer.weights[j * layer.in_dim..(j + 1) * layer.in_dim];
                for (di, w) in d_in.iter_mut().zip(row) {
                    *di += *d * *w;
                }
            }
            delta = d_in;
        }
        delta
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flattens all parameters (per layer: weights row-major, then biases).
    pub fn params_flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Loads parameters from the flat layout produced by [`Mlp::params_flat`].
    pub fn load_flat(&mut self, flat: &[F]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length mismatch");
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Activations recorded by [`Mlp::forward_tape`].
pub struct Tape<F> {
    acts: Vec<Vec<F>>,
}

impl<F: Real> Tape<F> {
    pub fn output(&self) -> &[F] {
        self.acts.last().expect("nonempty tape")
    }
}

/// Parameter gradients, in the same shapes as the network.
#[derive(Debug, Clone)]
pub struct MlpGrads<F> {
    layers: Vec<DenseGrads<F>>,
}

#[derive(Debug, Clone)]
struct DenseGrads<F> {
    weights: Vec<F>,
    bias: Vec<F>,
}

impl<F: Real> MlpGrads<F> {
    pub fn zeros_like(mlp: &Mlp<F>) -> Self {
        let layers = mlp
            .layers
            .iter()
            .map(|l| DenseGrads {
                weights: vec![F::zero(); l.weights.len()],
                bias: vec![F::zero(); l.bias.len()],
            })
            .collect();
        Self { layers }
    }

    pub fn add_assign(&mut self, other: &MlpGrads<F>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += *y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for l in &mut self.layers {
            for x in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *x *= factor;
            }
        }
    }

    pub fn flat(&self) -> Vec<F> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

/// SGD with optional momentum; `momentum = 0` is plain SGD.
#[derive(Debug, Clone)]
pub struct SgdMomentum<F> {
    pub lr: F,
    pub momentum: F,
    velocity: Option<MlpGrads<F>>,
}

impl<F: Real> SgdMomentum<F> {
    pub fn new(lr: F, momentum: F) -> Self {
        Self { lr, momentum, velocity: None }
    }

    pub fn step(&mut self, mlp: &mut Mlp<F>, grads: &MlpGrads<F>) {
        if self.momentum == F::zero() {
            for (l, g) in mlp.layers.iter_mut().zip(&grads.layers) {
                for (p, gp) in l.weights.iter_mut().zip(&g.weights) {
                    *p -= self.lr * *gp;
                }
                for (p, gp) in l.bias.iter_mut().zip(&g.bias) {
                    *p -= self.lr * *gp;
                }
            }
            return;
        }
        let velocity = self
            .velocity
            .get_or_insert_with(|| MlpGrads::zeros_like(mlp));
        for ((l, g), v) in mlp
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut velocity.layers)
        {
            for ((p, gp), vp) in l.weights.iter_mut().zip(&g.weights).zip(&mut v.weights) {
                *vp = self.momentum * *vp + *gp;
                *p -= self.lr * *vp;
            }
            for ((p, gp), vp) in l.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
                *vp = self.momentum * *vp + *gp;
                *p -= self.lr * *vp;
            }
        }
    }
}

/// Sinusoidal position features for a timestep; `dim` must be even.
pub fn time_embedding<F: Real>(t: usize, dim: usize) -> Vec<F> {
    assert!(dim >= 2 && dim % 2 == 0, "time embedding dim must be even and >= 2");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        out.push(real::<F>(angle.sin()));
        out.push(real::<F>(angle.cos()));
    }
    out
}

/// Softmax cross-entropy; returns the loss and the gradient w.r.t. logits.
pub fn softmax_cross_entropy<F: Real>(logits: &[F], label: usize) -> (F, Vec<F>) {
    debug_assert!(label < logits.len());
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let denom: F = exps.iter().cloned().sum();
    let log_denom = denom.ln();
    let loss = log_denom - (logits[label] - max);
    let mut grad: Vec<F> = exps.iter().map(|&e| e / denom).collect();
    grad[label] -= F::one();
    (loss, grad)
}

/// Numerically stable `ln(1 + e^z)`.
pub fn softplus<F: Real>(z: F) -> F {
    z.max(F::zero()) + (F::one() + (-z.abs()).exp()).ln()
}

pub fn sigmoid<F: Real>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

/// Normalizes `v` to unit L2 norm in place and returns the original norm.
/// Vectors with norm below `1e-30` are left untouched.
pub fn l2_normalize<F: Real>(v: &mut [F]) -> F {
    let norm = dot(v, v).sqrt();
    if norm > real(1e-30) {
        for x in v.iter_mut() {
            *x = *x / norm;
        }
    }
    norm
}

/// Gradient of `e = v / ||v||`: maps `d_e` back to `d_v`.
pub fn l2_normalize_backward<F: Real>(e: &[F], d_e: &[F], norm: F) -> Vec<F> {
    if norm <= real(1e-30) {
        return d_e.to_vec();
    }
    let proj = dot(e, d_e);
    e.iter()
        .zip(d_e)
        .map(|(&ei, &di)| (di - ei * proj) / norm)
        .collect()
}

/// Applies `f` to fixed-size chunks of `items` and returns the results in
/// chunk order. With the `parallel` feature the chunks run on a thread pool;
/// the output order (and therefore any subsequent reduction) is identical
/// either way.
#[cfg(feature = "parallel")]
pub fn map_chunks<T: Sync, R: Send, F: Fn(usize, &[T]) -> R + Sync>(
    items: &[T],
    chunk: usize,
    f: F,
) -> Vec<R> {
    use rayon::prelude::*;
    items
        .par_chunks(chunk.max(1))
        .enumerate()
        .map(|(i, c)| f(i, c))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_chunks<T, R, F: Fn(usize, &[T]) -> R>(items: &[T], chunk: usize, f: F) -> Vec<R> {
    items.chunks(chunk.max(1)).enumerate().map(|(i, c)| f(i, c)).collect()
}
