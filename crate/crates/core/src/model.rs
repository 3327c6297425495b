//! Siamese embedding network and its training loop.
//!
//! The network maps a representation `z ∈ R^D` to a latent `u ∈ R^d` through
//! two Dropout-Linear-ReLU blocks and a final Dropout-Linear block. Pairs are
//! scored with `σ(u, u') = exp(-‖u - u'‖²)` and trained with binary
//! cross-entropy against must-link (1) / cannot-link (0) labels. Both members
//! of a pair run through the same weights, so their gradients accumulate into
//! one parameter set.
//!
//! The network is generic over the float type: training runs in `f32`,
//! gradient checking in `f64`.

use std::fmt::{Debug, Display};
use std::time::Instant;

use log::warn;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::features::Representations;
use crate::util::seeded_rng;

pub trait Real:
    Float + LinalgScalar + ScalarOperand + FromPrimitive + Debug + Display + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable")
}

/// Probability clamp applied before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Default hidden widths.
pub const HIDDEN_DIMS: [usize; 2] = [50, 2000];

/// Three dense layers; weights are stored `in × out` so a batch of row
/// vectors is multiplied on the left.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    dims: [usize; 4],
    weights: [Array2<T>; 3],
    biases: [Array1<T>; 3],
}

pub type EmbeddingModel = Mlp<f32>;

/// Full-size embedding network `D-50-2000-d` with N(0, std²) weights and zero biases.
pub fn init_model(input_dim: usize, latent_dim: usize, init_std: f64, seed: u64) -> EmbeddingModel {
    Mlp::init(
        [input_dim, HIDDEN_DIMS[0], HIDDEN_DIMS[1], latent_dim],
        init_std,
        seed,
    )
}

impl<T: Real> Mlp<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        assert!(dims.iter().all(|&d| d >= 1), "layer widths must be positive");
        Mlp {
            dims,
            weights: [0, 1, 2].map(|l| Array2::zeros((dims[l], dims[l + 1]))),
            biases: [0, 1, 2].map(|l| Array1::zeros(dims[l + 1])),
        }
    }

    pub fn init(dims: [usize; 4], std: f64, seed: u64) -> Self {
        let mut model = Self::zeros(dims);
        let mut rng = seeded_rng(seed);
        let normal = Normal::new(0.0, std).expect("valid std");
        for w in &mut model.weights {
            w.iter_mut().for_each(|v| *v = real(normal.sample(&mut rng)));
        }
        model
    }

    /// Builds a model from explicit parameters.
    pub fn from_parts(weights: [Array2<T>; 3], biases: [Array1<T>; 3]) -> Result<Self> {
        let dims = [
            weights[0].nrows(),
            weights[0].ncols(),
            weights[1].ncols(),
            weights[2].ncols(),
        ];
        for l in 0..3 {
            if weights[l].dim() != (dims[l], dims[l + 1]) {
                return Err(Error::DimensionMismatch {
                    expected: dims[l],
                    actual: weights[l].nrows(),
                });
            }
            if biases[l].len() != dims[l + 1] {
                return Err(Error::DimensionMismatch {
                    expected: dims[l + 1],
                    actual: biases[l].len(),
                });
            }
        }
        Ok(Mlp {
            dims,
            weights: weights.map(|w| w.as_standard_layout().into_owned()),
            biases,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.dims[3]
    }

    pub fn weights(&self) -> &[Array2<T>; 3] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<T>; 3] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        (0..3).map(|l| self.dims[l] * self.dims[l + 1] + self.dims[l + 1]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Parameter tensors in the order W1, b1, W2, b2, W3, b3.
    pub fn params(&self) -> [&[T]; 6] {
        [
            self.weights[0].as_slice().expect("standard layout"),
            self.biases[0].as_slice().expect("contiguous"),
            self.weights[1].as_slice().expect("standard layout"),
            self.biases[1].as_slice().expect("contiguous"),
            self.weights[2].as_slice().expect("standard layout"),
            self.biases[2].as_slice().expect("contiguous"),
        ]
    }

    pub fn params_mut(&mut self) -> [&mut [T]; 6] {
        let [w0, w1, w2] = &mut self.weights;
        let [b0, b1, b2] = &mut self.biases;
        [
            w0.as_slice_mut().expect("standard layout"),
            b0.as_slice_mut().expect("contiguous"),
            w1.as_slice_mut().expect("standard layout"),
            b1.as_slice_mut().expect("contiguous"),
            w2.as_slice_mut().expect("standard layout"),
            b2.as_slice_mut().expect("contiguous"),
        ]
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        let conv = |v: &T| U::from_f64(v.to_f64().unwrap()).unwrap();
        Mlp {
            dims: self.dims,
            weights: [0, 1, 2].map(|l| self.weights[l].map(conv)),
            biases: [0, 1, 2].map(|l| self.biases[l].map(conv)),
        }
    }

    /// Forward pass over a batch of rows. With `dropout`, each element of every
    /// layer input is zeroed with probability `p` and survivors are scaled by
    /// `1/(1-p)`.
    pub fn forward_batch(&self, x: ArrayView2<T>, dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<ForwardPass<T>> {
        if x.ncols() != self.dims[0] {
            return Err(Error::DimensionMismatch {
                expected: self.dims[0],
                actual: x.ncols(),
            });
        }
        let mut dropout = dropout.filter(|(p, _)| *p > 0.0);
        let mut inputs: Vec<Array2<T>> = Vec::with_capacity(3);
        let mut masks: Vec<Option<Array2<T>>> = Vec::with_capacity(3);
        let mut pre: Vec<Array2<T>> = Vec::with_capacity(2);
        let mut act = x.to_owned();
        let mut unbiased = Array2::zeros((0, 0));
        for l in 0..3 {
            let mask = dropout.as_mut().map(|(p, rng)| dropout_mask(act.dim(), *p, rng));
            if let Some(m) = &mask {
                act.zip_mut_with(m, |a, &b| *a = *a * b);
            }
            let mut z = act.dot(&self.weights[l]);
            if l == 2 {
                unbiased = z.clone();
            }
            let b = &self.biases[l];
            for mut row in z.rows_mut() {
                row.zip_mut_with(b, |a, &c| *a = *a + c);
            }
            inputs.push(act);
            masks.push(mask);
            if l < 2 {
                let h = z.mapv(|v| v.max(T::zero()));
                pre.push(z);
                act = h;
            } else {
                act = z;
            }
        }
        Ok(ForwardPass {
            inputs,
            masks,
            pre,
            unbiased,
            output: act,
        })
    }

    /// Single-row forward.
    pub fn forward(&self, z: &[T], dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<Vec<T>> {
        let x = ArrayView2::from_shape((1, z.len()), z).expect("row view");
        Ok(self.forward_batch(x, dropout)?.output.row(0).to_vec())
    }

    /// Backpropagates `grad_out` (d loss / d output) through a recorded pass.
    pub fn backward(&self, pass: &ForwardPass<T>, grad_out: &Array2<T>) -> Gradients<T> {
        let mut grads = Gradients::zeros(self.dims);
        let mut g = grad_out.clone();
        for l in (0..3).rev() {
            // a transposed product can come back column-major for thin shapes
            let w = pass.inputs[l].t().dot(&g);
            grads.weights[l] = if w.is_standard_layout() { w } else { w.as_standard_layout().into_owned() };
            grads.biases[l] = g.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            let mut d_in = g.dot(&self.weights[l].t());
            if let Some(m) = &pass.masks[l] {
                d_in.zip_mut_with(m, |a, &b| *a = *a * b);
            }
            Zip::from(&mut d_in)
                .and(&pass.pre[l - 1])
                .for_each(|d, &p| {
                    if p <= T::zero() {
                        *d = T::zero();
                    }
                });
            g = d_in;
        }
        grads
    }
}

fn dropout_mask<T: Real>(dim: (usize, usize), p: f64, rng: &mut ChaCha8Rng) -> Array2<T> {
    let threshold = (p * 4_294_967_296.0).min(u32::MAX as f64) as u32;
    let keep: T = real(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn(dim, || {
        if rng.next_u32() >= threshold {
            keep
        } else {
            T::zero()
        }
    })
}

/// Intermediate values of a forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    /// Layer inputs after dropout.
    pub inputs: Vec<Array2<T>>,
    pub masks: Vec<Option<Array2<T>>>,
    /// Hidden pre-activations.
    pub pre: Vec<Array2<T>>,
    /// Last layer before its bias. The bias cancels in twin differences, so
    /// the pair loss reads this instead of `output`.
    pub unbiased: Array2<T>,
    pub output: Array2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub weights: [Array2<T>; 3],
    pub biases: [Array1<T>; 3],
}

impl<T: Real> Gradients<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Gradients {
            weights: [0, 1, 2].map(|l| Array2::zeros((dims[l], dims[l + 1]))),
            biases: [0, 1, 2].map(|l| Array1::zeros(dims[l + 1])),
        }
    }

    pub fn tensors(&self) -> [&[T]; 6] {
        [
            self.weights[0].as_slice().expect("standard layout"),
            self.biases[0].as_slice().expect("contiguous"),
            self.weights[1].as_slice().expect("standard layout"),
            self.biases[1].as_slice().expect("contiguous"),
            self.weights[2].as_slice().expect("standard layout"),
            self.biases[2].as_slice().expect("contiguous"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 6] {
        let [w0, w1, w2] = &mut self.weights;
        let [b0, b1, b2] = &mut self.biases;
        [
            w0.as_slice_mut().expect("standard layout"),
            b0.as_slice_mut().expect("contiguous"),
            w1.as_slice_mut().expect("standard layout"),
            b1.as_slice_mut().expect("contiguous"),
            w2.as_slice_mut().expect("standard layout"),
            b2.as_slice_mut().expect("contiguous"),
        ]
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| {
                let v = v.to_f64().unwrap();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales the gradient so its global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            // Shave a few ulps so rounding cannot push the result past the bound.
            let scale: T = real(max_norm / norm * (1.0 - 4.0 * T::epsilon().to_f64().unwrap()));
            for t in self.tensors_mut() {
                t.iter_mut().for_each(|v| *v = *v * scale);
            }
        }
        norm
    }
}

/// `exp(-‖u - v‖²)`.
pub fn affinity(u: &[f64], v: &[f64]) -> f64 {
    (-squared_distance(u, v)).exp()
}

pub fn squared_distance(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Cross-entropy term of one pair and its derivative with respect to the
/// squared latent distance `s`, with `p = exp(-s)` clamped to `[ε, 1-ε]`.
pub fn pair_term(s: f64, must_link: bool) -> (f64, f64) {
    let p = (-s).exp();
    let lo = PROB_EPS;
    let hi = 1.0 - PROB_EPS;
    if must_link {
        if p > hi {
            (-(hi.ln()), 0.0)
        } else if p < lo {
            (-(lo.ln()), 0.0)
        } else {
            // -ln(exp(-s)) = s
            (s, 1.0)
        }
    } else if p > hi {
        (-(lo.ln()), 0.0)
    } else if p < lo {
        (-(hi.ln()), 0.0)
    } else {
        // -ln(1 - exp(-s)), derivative -p / (1 - p) = -1 / expm1(s)
        let one_minus_p = -(-s).exp_m1();
        (-one_minus_p.ln(), -1.0 / s.exp_m1())
    }
}

/// A batch of constrained pairs; row `i` of `left` and `right` form pair `i`.
#[derive(Clone, Debug)]
pub struct PairBatch<T> {
    pub left: Array2<T>,
    pub right: Array2<T>,
    /// 1 for must-link, 0 for cannot-link.
    pub labels: Vec<f64>,
}

impl<T: Real> PairBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Both twins stacked: left rows first, then right rows.
    pub fn stacked(&self) -> Array2<T> {
        ndarray::concatenate(Axis(0), &[self.left.view(), self.right.view()]).expect("equal widths")
    }
}

/// Summed loss over a stacked twin output, and its gradient with respect to
/// that output.
pub fn loss_and_output_grad<T: Real>(output: &Array2<T>, labels: &[f64]) -> (f64, Array2<T>) {
    let b = labels.len();
    let mut grad = Array2::zeros(output.dim());
    let mut loss = 0.0;
    for i in 0..b {
        let ua = output.row(i);
        let ub = output.row(b + i);
        let s: f64 = ua
            .iter()
            .zip(ub.iter())
            .map(|(x, y)| {
                let d = (*x - *y).to_f64().unwrap();
                d * d
            })
            .sum();
        let (term, dlds) = pair_term(s, labels[i] > 0.5);
        loss += term;
        if dlds != 0.0 {
            for k in 0..ua.len() {
                let g: T = real(2.0 * dlds * (ua[k] - ub[k]).to_f64().unwrap());
                grad[[i, k]] = g;
                grad[[b + i, k]] = -g;
            }
        }
    }
    (loss, grad)
}

/// Summed pair loss of a batch. `dropout` enables train-mode masks.
pub fn batch_loss<T: Real>(model: &Mlp<T>, batch: &PairBatch<T>, dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<f64> {
    let pass = model.forward_batch(batch.stacked().view(), dropout)?;
    Ok(loss_and_output_grad(&pass.unbiased, &batch.labels).0)
}

/// Loss and parameter gradient of a batch.
pub fn loss_and_gradients<T: Real>(
    model: &Mlp<T>,
    batch: &PairBatch<T>,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(f64, Gradients<T>)> {
    let pass = model.forward_batch(batch.stacked().view(), dropout)?;
    let (loss, grad_out) = loss_and_output_grad(&pass.unbiased, &batch.labels);
    Ok((loss, model.backward(&pass, &grad_out)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub grad_clip_norm: f64,
    pub init_std: f64,
    /// Latent dimensionality `d`. For `k` expected clusters about `k(k-1)/2`
    /// coordinates give every pair of clusters its own direction.
    pub latent_dim: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-4,
            dropout: 0.2,
            grad_clip_norm: 5.0,
            init_std: 0.01,
            latent_dim: 20,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.batch_size", self.batch_size as f64),
            ("train.learning_rate", self.learning_rate),
            ("train.grad_clip_norm", self.grad_clip_norm),
            ("train.init_std", self.init_std),
            ("train.latent_dim", self.latent_dim as f64),
            ("train.adam_eps", self.adam_eps),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(field, "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("train.dropout", "must lie in [0, 1)"));
        }
        for (field, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::validation(field, "must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub pairs: usize,
    /// Mean loss per pair for each epoch.
    pub epoch_loss: Vec<f64>,
    pub seconds: f64,
    /// Fraction of must-links with affinity ≥ 0.5 after training.
    pub must_satisfaction: f64,
    /// Fraction of cannot-links with affinity < 0.5 after training.
    pub cannot_satisfaction: f64,
    pub mean_must_affinity: f64,
    pub mean_cannot_affinity: f64,
}

struct Adam<T> {
    m: Gradients<T>,
    v: Gradients<T>,
    step: i32,
}

impl<T: Real> Adam<T> {
    fn new(dims: [usize; 4]) -> Self {
        Adam {
            m: Gradients::zeros(dims),
            v: Gradients::zeros(dims),
            step: 0,
        }
    }

    fn update(&mut self, model: &mut Mlp<T>, grads: &Gradients<T>, cfg: &TrainConfig) {
        self.step += 1;
        let b1: T = real(cfg.beta1);
        let b2: T = real(cfg.beta2);
        let one = T::one();
        let c1: T = real(1.0 - cfg.beta1.powi(self.step));
        let c2: T = real(1.0 - cfg.beta2.powi(self.step));
        let lr: T = real(cfg.learning_rate);
        let eps: T = real(cfg.adam_eps);
        let params = model.params_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        let gs = grads.tensors();
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(gs) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Row indices and labels of every constraint.
fn resolve_pairs(reps: &Representations, constraints: &ConstraintSet) -> Result<Vec<(usize, usize, f64)>> {
    let index: std::collections::HashMap<u64, usize> =
        reps.items.iter().enumerate().map(|(i, r)| (r.word_id, i)).collect();
    constraints
        .constraints
        .iter()
        .map(|c| {
            let a = index.get(&c.a);
            let b = index.get(&c.b);
            match (a, b) {
                (Some(&a), Some(&b)) => Ok((a, b, c.label())),
                _ => Err(Error::validation(
                    "constraints",
                    format!("constraint ({}, {}) references an unknown word", c.a, c.b),
                )),
            }
        })
        .collect()
}

fn representation_matrix(reps: &Representations) -> Array2<f32> {
    reps.matrix().mapv(|v| v as f32)
}

fn gather(x: &Array2<f32>, rows: impl Iterator<Item = usize>, n: usize) -> Array2<f32> {
    let mut out = Array2::zeros((n, x.ncols()));
    for (r, src) in rows.enumerate() {
        out.row_mut(r).assign(&x.row(src));
    }
    out
}

/// Trains `model` in place on the constraint pairs.
pub fn train(
    model: &mut EmbeddingModel,
    reps: &Representations,
    constraints: &ConstraintSet,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if reps.dim != model.input_dim() && !reps.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: reps.dim,
        });
    }
    let started = Instant::now();
    let pairs = resolve_pairs(reps, constraints)?;
    let x = representation_matrix(reps);
    let mut report = TrainReport {
        pairs: pairs.len(),
        ..TrainReport::default()
    };
    if pairs.is_empty() {
        warn!("no constraints to train on; model left unchanged");
    } else {
        let mut rng = seeded_rng(cfg.rng_seed);
        let mut adam = Adam::new(model.dims());
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let b = chunk.len();
                let stacked = gather(
                    &x,
                    chunk.iter().map(|&p| pairs[p].0).chain(chunk.iter().map(|&p| pairs[p].1)),
                    2 * b,
                );
                let labels: Vec<f64> = chunk.iter().map(|&p| pairs[p].2).collect();
                let pass = model.forward_batch(stacked.view(), Some((cfg.dropout, &mut rng)))?;
                let (loss, grad_out) = loss_and_output_grad(&pass.unbiased, &labels);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: bi, loss });
                }
                total += loss;
                let mut grads = model.backward(&pass, &grad_out);
                grads.clip_global_norm(cfg.grad_clip_norm);
                adam.update(model, &grads, cfg);
            }
            report.epoch_loss.push(total / pairs.len() as f64);
        }
        report.epochs = cfg.epochs;
        if !model.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: cfg.epochs,
                batch: 0,
                loss: f64::NAN,
            });
        }
    }
    let latents = embed_all(model, reps)?;
    fill_satisfaction(&mut report, &latents, &pairs);
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

fn fill_satisfaction(report: &mut TrainReport, latents: &Array2<f64>, pairs: &[(usize, usize, f64)]) {
    let (mut must_n, mut must_ok, mut must_sum) = (0usize, 0usize, 0.0);
    let (mut cannot_n, mut cannot_ok, mut cannot_sum) = (0usize, 0usize, 0.0);
    for &(a, b, label) in pairs {
        let p = affinity(
            latents.row(a).as_slice().unwrap(),
            latents.row(b).as_slice().unwrap(),
        );
        if label > 0.5 {
            must_n += 1;
            must_sum += p;
            must_ok += (p >= 0.5) as usize;
        } else {
            cannot_n += 1;
            cannot_sum += p;
            cannot_ok += (p < 0.5) as usize;
        }
    }
    let ratio = |a: f64, n: usize| if n == 0 { 0.0 } else { a / n as f64 };
    report.must_satisfaction = ratio(must_ok as f64, must_n);
    report.cannot_satisfaction = ratio(cannot_ok as f64, cannot_n);
    report.mean_must_affinity = ratio(must_sum, must_n);
    report.mean_cannot_affinity = ratio(cannot_sum, cannot_n);
}

/// Eval-mode latents for every representation, one row per word.
pub fn embed_all(model: &EmbeddingModel, reps: &Representations) -> Result<Array2<f64>> {
    let n = reps.len();
    let d = model.latent_dim();
    let mut out = Array2::zeros((n, d));
    if n == 0 {
        return Ok(out);
    }
    let x = representation_matrix(reps);
    const CHUNK: usize = 256;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let pass = model.forward_batch(x.slice(s![start..end, ..]), None)?;
        out.slice_mut(s![start..end, ..]).assign(&pass.output.mapv(|v| v as f64));
        start = end;
    }
    Ok(out)
}

/// Result of comparing analytic and finite-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a ReLU kink or the
    /// probability clamp, where the loss is not differentiable.
    pub skipped: usize,
    /// Checked coordinates where both gradients were within the finite
    /// difference resolution of zero.
    pub below_resolution: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Activation pattern of a dropout-free pass: hidden ReLU signs and clamp
/// regions of each pair.
fn activation_pattern(model: &Mlp<f64>, batch: &PairBatch<f64>) -> Vec<u8> {
    let pass = model
        .forward_batch(batch.stacked().view(), None)
        .expect("dimensions checked by caller");
    let mut pattern: Vec<u8> = pass
        .pre
        .iter()
        .flat_map(|p| p.iter().map(|v| (*v > 0.0) as u8))
        .collect();
    let b = batch.len();
    for i in 0..b {
        let s: f64 = pass
            .unbiased
            .row(i)
            .iter()
            .zip(pass.unbiased.row(b + i).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let p = (-s).exp();
        pattern.push(if p > 1.0 - PROB_EPS { 2 } else if p < PROB_EPS { 0 } else { 1 });
    }
    pattern
}

/// Checks `analytic` against central differences `(L(θ+h) - L(θ-h)) / 2h` on
/// up to `max_coords` parameter coordinates (all of them if fewer).
pub fn compare_gradients(
    model: &Mlp<f64>,
    batch: &PairBatch<f64>,
    analytic: &Gradients<f64>,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheck> {
    let sizes: Vec<usize> = model.params().iter().map(|t| t.len()).collect();
    let mut coords: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(t, &n)| (0..n).map(move |i| (t, i)))
        .collect();
    if coords.len() > max_coords {
        let mut rng = seeded_rng(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
        coords.sort_unstable();
    }
    let base_pattern = activation_pattern(model, batch);
    let analytic_tensors = analytic.tensors();
    let mut probe = model.clone();
    let mut result = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        below_resolution: 0,
    };
    for (t, i) in coords {
        let original = probe.params_mut()[t][i];
        probe.params_mut()[t][i] = original + h;
        let plus_pattern = activation_pattern(&probe, batch);
        let plus = batch_loss(&probe, batch, None)?;
        probe.params_mut()[t][i] = original - h;
        let minus_pattern = activation_pattern(&probe, batch);
        let minus = batch_loss(&probe, batch, None)?;
        probe.params_mut()[t][i] = original;
        if plus_pattern != base_pattern || minus_pattern != base_pattern {
            result.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic_tensors[t][i];
        // below what the difference quotient can resolve, both read as zero
        let resolution = 8.0 * f64::EPSILON * (plus.abs() + minus.abs() + 1.0) / h;
        let err = if a.abs() <= resolution && numeric.abs() <= resolution {
            result.below_resolution += 1;
            0.0
        } else {
            relative_error(a, numeric)
        };
        result.max_rel_error = result.max_rel_error.max(err);
        result.checked += 1;
    }
    Ok(result)
}

/// Analytic (dropout off) versus finite-difference gradient of `batch_loss`.
pub fn gradient_check(model: &Mlp<f64>, batch: &PairBatch<f64>, h: f64, max_coords: usize, seed: u64) -> Result<GradCheck> {
    let (_, analytic) = loss_and_gradients(model, batch, None)?;
    compare_gradients(model, batch, &analytic, h, max_coords, seed)
}

/// Random model and batch for gradient checking: N(0, 0.5²) weights and
/// biases, N(0, 1) inputs, alternating labels.
pub fn random_check_case(dims: [usize; 4], pairs: usize, seed: u64) -> (Mlp<f64>, PairBatch<f64>) {
    let mut rng = seeded_rng(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut model = Mlp::<f64>::zeros(dims);
    for t in model.params_mut() {
        t.iter_mut().for_each(|v| *v = 0.5 * normal.sample(&mut rng));
    }
    let left = Array2::from_shape_simple_fn((pairs, dims[0]), || normal.sample(&mut rng));
    let right = Array2::from_shape_simple_fn((pairs, dims[0]), || normal.sample(&mut rng));
    let labels = (0..pairs).map(|i| (i % 2 == 0) as u8 as f64).collect();
    (model, PairBatch { left, right, labels })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DGAF";
const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u32 = 4;

/// Binary checkpoint: magic, version, dtype, the four layer widths, then every
/// parameter tensor (W1, b1, W2, b2, W3, b3) as little-endian `f32`.
pub fn checkpoint_bytes(model: &EmbeddingModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 4 * model.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for d in model.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for t in model.params() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn model_from_checkpoint(bytes: &[u8]) -> Result<EmbeddingModel> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))
    };
    if bytes.get(..4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    if word(4)? != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", word(4)?)));
    }
    if word(8)? != DTYPE_F32 {
        return Err(Error::Checkpoint("unsupported dtype".into()));
    }
    let mut dims = [0usize; 4];
    for (k, d) in dims.iter_mut().enumerate() {
        *d = word(12 + 4 * k)? as usize;
        if *d == 0 {
            return Err(Error::Checkpoint("zero layer width".into()));
        }
    }
    let mut model = Mlp::<f32>::zeros(dims);
    let expected = 28 + 4 * model.param_count();
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut offset = 28;
    for t in model.params_mut() {
        for v in t.iter_mut() {
            *v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
            offset += 4;
        }
    }
    if !model.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn parameter_count_of_default_network() {
        let m = init_model(100, 20, 0.01, 1);
        assert_eq!(m.param_count(), 100 * 50 + 50 + 50 * 2000 + 2000 + 2000 * 20 + 20);
        assert_eq!(m.dims(), [100, 50, 2000, 20]);
    }

    #[test]
    fn init_is_seeded() {
        let a = Mlp::<f32>::init([5, 4, 6, 2], 0.01, 7);
        let b = Mlp::<f32>::init([5, 4, 6, 2], 0.01, 7);
        let c = Mlp::<f32>::init([5, 4, 6, 2], 0.01, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.biases().iter().all(|b| b.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn init_std_matches() {
        let m = init_model(100, 20, 0.01, 3);
        let w = &m.weights()[1];
        let n = w.len() as f64;
        let mean = w.iter().map(|v| *v as f64).sum::<f64>() / n;
        let var = w.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 2e-4);
        assert!((var.sqrt() - 0.01).abs() < 2e-4);
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = Mlp::<f64>::zeros([3, 4, 5, 2]);
        assert_eq!(m.forward(&[1.0, -2.0, 3.0], None).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn unit_network_by_hand() {
        let m = Mlp::<f64>::from_parts(
            [array![[1.0], [1.0]], array![[1.0]], array![[1.0]]],
            [array![0.0], array![0.0], array![0.0]],
        )
        .unwrap();
        assert_eq!(m.forward(&[1.0, 1.0], None).unwrap(), vec![2.0]);
        assert_eq!(m.forward(&[-1.0, -1.0], None).unwrap(), vec![0.0]);
    }

    #[test]
    fn eval_forward_is_repeatable_and_checks_dims() {
        let m = Mlp::<f32>::init([4, 3, 5, 2], 0.5, 2);
        let z = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(m.forward(&z, None).unwrap(), m.forward(&z, None).unwrap());
        assert!(matches!(
            m.forward(&z[..3], None),
            Err(Error::DimensionMismatch { expected: 4, actual: 3 })
        ));
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut rng = seeded_rng(1);
        let mask: Array2<f64> = dropout_mask((200, 50), 0.2, &mut rng);
        let kept = mask.iter().filter(|v| **v > 0.0).count() as f64 / mask.len() as f64;
        assert!((kept - 0.8).abs() < 0.02);
        assert!(mask.iter().all(|v| *v == 0.0 || (*v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn affinity_values() {
        assert_eq!(affinity(&[0.3, 0.4], &[0.3, 0.4]), 1.0);
        let e = affinity(&[1.0, 0.0], &[0.0, 0.0]);
        assert!((e - 0.367_879_441_171_442_3).abs() <= 1e-9 * e);
        assert_eq!(affinity(&[1.0, 2.0], &[0.5, 0.0]), affinity(&[0.5, 0.0], &[1.0, 2.0]));
    }

    #[test]
    fn loss_terms() {
        let (t, _) = pair_term(2f64.ln(), true);
        assert!((t - std::f64::consts::LN_2).abs() <= 1e-9 * t);
        let (t, g) = pair_term(0.0, false);
        assert!((t - (-(1e-7f64).ln())).abs() <= 1e-9 * t);
        assert_eq!(g, 0.0);
        let (t, _) = pair_term(0.0, true);
        assert!((t - (-(1.0 - 1e-7f64).ln())).abs() <= 1e-9 * t);
        assert!(t < 1e-6);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = Gradients::<f64>::zeros([3, 2, 2, 1]);
        g.weights[0].fill(10.0);
        let before = g.clip_global_norm(5.0);
        assert!(before > 5.0);
        assert!(g.global_norm() <= 5.0 + 1e-9);
        let mut small = Gradients::<f64>::zeros([3, 2, 2, 1]);
        small.biases[2][0] = 1.0;
        small.clip_global_norm(5.0);
        assert_eq!(small.biases[2][0], 1.0);
    }

    #[test]
    fn gradient_check_small_net() {
        let (model, batch) = random_check_case([6, 4, 5, 3], 6, 11);
        let check = gradient_check(&model, &batch, 1e-5, usize::MAX, 0).unwrap();
        assert!(check.passes(1e-4), "{check:?}");
    }

    #[test]
    fn thin_layers_give_row_major_gradients() {
        for dims in [[3, 1, 4, 2], [1, 2, 1, 1], [5, 3, 2, 1]] {
            let (model, batch) = random_check_case(dims, 1, 3);
            let check = gradient_check(&model, &batch, 1e-5, usize::MAX, 0).unwrap();
            assert!(check.passes(1e-4), "{dims:?} {check:?}");
        }
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (model, batch) = random_check_case([6, 4, 5, 3], 6, 11);
        let (_, mut grads) = loss_and_gradients(&model, &batch, None).unwrap();
        // pick the largest weight gradient so the corruption is well above noise
        let (idx, _) = grads.weights[2]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        grads.weights[2].as_slice_mut().unwrap()[idx] *= 1.1;
        let check = compare_gradients(&model, &batch, &grads, 1e-5, usize::MAX, 0).unwrap();
        assert!(!check.passes(1e-4), "{check:?}");
    }

    #[test]
    fn unused_parameter_has_zero_gradient_both_ways() {
        let (mut model, batch) = random_check_case([4, 3, 3, 2], 4, 5);
        // kill hidden unit 0 of the first layer
        for r in 0..4 {
            model.params_mut()[0][r * 3] = 0.0;
        }
        model.params_mut()[1][0] = -100.0;
        let (_, grads) = loss_and_gradients(&model, &batch, None).unwrap();
        assert_eq!(grads.weights[0][[0, 0]], 0.0);
        let check = gradient_check(&model, &batch, 1e-5, usize::MAX, 0).unwrap();
        assert!(check.passes(1e-4), "{check:?}");
    }

    #[test]
    fn siamese_swap_symmetry() {
        let (model, batch) = random_check_case([5, 4, 6, 3], 5, 21);
        let swapped = PairBatch {
            left: batch.right.clone(),
            right: batch.left.clone(),
            labels: batch.labels.clone(),
        };
        let (la, ga) = loss_and_gradients(&model, &batch, None).unwrap();
        let (lb, gb) = loss_and_gradients(&model, &swapped, None).unwrap();
        assert!((la - lb).abs() <= 1e-12 * la.abs().max(1.0));
        for (x, y) in ga.tensors().iter().zip(gb.tensors()) {
            for (a, b) in x.iter().zip(y.iter()) {
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = Mlp::<f32>::init([7, 5, 9, 3], 0.3, 99);
        let bytes = checkpoint_bytes(&m);
        let back = model_from_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(checkpoint_bytes(&back), bytes);
        assert!(model_from_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(model_from_checkpoint(&bad).is_err());
    }
}
