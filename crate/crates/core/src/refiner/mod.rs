//! The similarity refiner: `x → W2·ReLU(LayerNorm(W1·x + b1)) + b2`,
//! scored against the frozen vocabulary by cosine similarity.
//!
//! Everything is batched: a forward pass takes a `B × in` matrix and keeps
//! the per-row intermediates needed for an exact analytic backward pass.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    LossTag, CKPT_MAGIC, CKPT_VERSION,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::layer_norm::{layer_norm_row, layer_norm_row_backward};
use crate::numerics::{
    matmul, CosineKernel, CosineOutput, Matrix, Real, Vector, LAYER_NORM_EPS,
};

/// Initial value of the learned sigmoid scale.
pub const DEFAULT_SIGMOID_SCALE: f64 = 10.0;

/// Layer widths `input → hidden → latent`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefinerShape {
    pub input: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl RefinerShape {
    pub const DEFAULT: RefinerShape = RefinerShape {
        input: 512,
        hidden: 1024,
        latent: 512,
    };

    /// Trainable scalars for this shape, the sigmoid scale included.
    pub fn param_count(&self) -> usize {
        let RefinerShape {
            input,
            hidden,
            latent,
        } = *self;
        hidden * input + hidden + hidden + hidden + latent * hidden + latent + 1
    }
}

impl Default for RefinerShape {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// All trainable tensors. The same layout doubles as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerParams<T: Real = f32> {
    /// `hidden × input`
    pub w1: Matrix<T>,
    pub b1: Vector<T>,
    pub ln_gamma: Vector<T>,
    pub ln_beta: Vector<T>,
    /// `latent × hidden`
    pub w2: Matrix<T>,
    pub b2: Vector<T>,
    /// Consumed by the sigmoid-based losses only.
    pub sigmoid_scale: T,
}

pub type RefinerGrads<T = f32> = RefinerParams<T>;

/// Names of the parameter blocks in storage order.
pub const BLOCK_NAMES: [&str; 7] = ["w1", "b1", "ln_gamma", "ln_beta", "w2", "b2", "sigmoid_scale"];

impl<T: Real> RefinerParams<T> {
    pub fn zeros(shape: RefinerShape) -> Self {
        Self {
            w1: Matrix::zeros(shape.hidden, shape.input),
            b1: Vector::zeros(shape.hidden),
            ln_gamma: Vector::zeros(shape.hidden),
            ln_beta: Vector::zeros(shape.hidden),
            w2: Matrix::zeros(shape.latent, shape.hidden),
            b2: Vector::zeros(shape.latent),
            sigmoid_scale: T::default(),
        }
    }

    /// He-uniform weights `U(−a, a)`, `a = sqrt(6 / fan_in)`; zero biases;
    /// unit gain, zero shift; sigmoid scale 10.
    pub fn init(shape: RefinerShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(shape);
        let a1 = (6.0 / shape.input as f64).sqrt();
        for w in p.w1.as_mut_slice() {
            *w = T::from_f64(rng.random_range(-a1..a1));
        }
        let a2 = (6.0 / shape.hidden as f64).sqrt();
        for w in p.w2.as_mut_slice() {
            *w = T::from_f64(rng.random_range(-a2..a2));
        }
        p.ln_gamma.fill(T::from_f64(1.0));
        p.sigmoid_scale = T::from_f64(DEFAULT_SIGMOID_SCALE);
        p
    }

    pub fn shape(&self) -> RefinerShape {
        RefinerShape {
            input: self.w1.cols(),
            hidden: self.w1.rows(),
            latent: self.w2.rows(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Parameter blocks in storage order (see [`BLOCK_NAMES`]).
    pub fn blocks(&self) -> [&[T]; 7] {
        [
            self.w1.as_slice(),
            &self.b1,
            &self.ln_gamma,
            &self.ln_beta,
            self.w2.as_slice(),
            &self.b2,
            std::slice::from_ref(&self.sigmoid_scale),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [T]; 7] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            &mut self.ln_gamma,
            &mut self.ln_beta,
            self.w2.as_mut_slice(),
            &mut self.b2,
            std::slice::from_mut(&mut self.sigmoid_scale),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.to_f64().is_finite()))
    }

    /// Flattened copy in storage order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|b| b.iter().map(|v| v.to_f64())).collect()
    }

    /// Inverse of [`Self::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut it = flat.iter();
        for block in self.blocks_mut() {
            for v in block.iter_mut() {
                *v = T::from_f64(*it.next().unwrap());
            }
        }
    }

    /// Converts storage precision (used to run gradient checks in `f64`).
    pub fn cast<U: Real>(&self) -> RefinerParams<U> {
        let mut out = RefinerParams::<U>::zeros(self.shape());
        out.set_flat(&self.to_flat());
        out
    }
}

/// Intermediates of one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T: Real = f32> {
    input: Matrix<T>,
    /// Normalized pre-activations, `B × hidden`.
    x_hat: Matrix<T>,
    inv_std: Vec<f64>,
    relu_mask: Vec<bool>,
    hidden: Matrix<T>,
    cosine: CosineOutput<T>,
}

impl<T: Real> ForwardCache<T> {
    /// ReLU gate pattern, row-major `B × hidden`.
    pub fn relu_mask(&self) -> &[bool] {
        &self.relu_mask
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

/// Output of [`forward_batch`].
#[derive(Clone, Debug)]
pub struct Forward<T: Real = f32> {
    /// Refined latents, `B × latent`.
    pub latent: Matrix<T>,
    /// Cosine logits, `B × V`.
    pub logits: Matrix<T>,
    pub cache: ForwardCache<T>,
}

pub fn forward_batch<T: Real>(
    params: &RefinerParams<T>,
    input: &Matrix<T>,
    kernel: &CosineKernel<T>,
) -> Result<Forward<T>> {
    let shape = params.shape();
    if input.cols() != shape.input {
        return Err(Error::dim("refiner forward (input width)", shape.input, input.cols()));
    }
    if kernel.dim() != shape.latent {
        return Err(Error::dim("refiner forward (vocabulary width)", shape.latent, kernel.dim()));
    }
    let b = input.rows();

    let mut pre = matmul(input, &params.w1.transpose())?;
    pre.add_row_vector(&params.b1);

    let mut x_hat = Matrix::zeros(b, shape.hidden);
    let mut hidden = Matrix::zeros(b, shape.hidden);
    let mut inv_std = Vec::with_capacity(b);
    let mut relu_mask = vec![false; b * shape.hidden];
    let mut ln_out = vec![T::default(); shape.hidden];
    for r in 0..b {
        let s = layer_norm_row(
            pre.row(r),
            &params.ln_gamma,
            &params.ln_beta,
            LAYER_NORM_EPS,
            &mut ln_out,
            x_hat.row_mut(r),
        );
        inv_std.push(s);
        let mask = &mut relu_mask[r * shape.hidden..(r + 1) * shape.hidden];
        for ((h, m), &v) in hidden.row_mut(r).iter_mut().zip(mask).zip(&ln_out) {
            // NaN passes through, see `relu`
            if !(v.to_f64() <= 0.0) {
                *h = v;
                *m = true;
            }
        }
    }

    let mut latent = matmul(&hidden, &params.w2.transpose())?;
    latent.add_row_vector(&params.b2);

    let cosine = kernel.logits(&latent).map_err(|e| match e {
        Error::Degenerate { row, norm, .. } => Error::Degenerate {
            what: "refined latent z",
            row,
            norm,
        },
        other => other,
    })?;
    let logits = cosine.logits.clone();
    Ok(Forward {
        latent,
        logits,
        cache: ForwardCache {
            input: input.clone(),
            x_hat,
            inv_std,
            relu_mask,
            hidden,
            cosine,
        },
    })
}

/// Single-sample convenience wrapper: returns `(z, logits, cache)`.
pub fn forward<T: Real>(
    params: &RefinerParams<T>,
    x: &[T],
    kernel: &CosineKernel<T>,
) -> Result<(Vector<T>, Vector<T>, ForwardCache<T>)> {
    let input = Matrix::new(1, x.len(), x.to_vec())?;
    let f = forward_batch(params, &input, kernel)?;
    Ok((
        f.latent.into_vec().into(),
        f.logits.into_vec().into(),
        f.cache,
    ))
}

/// Gradients of every parameter block for a `B × V` logit cotangent, and
/// optionally of the input. The sigmoid-scale slot is left at zero; its
/// gradient comes from the loss.
///
/// The vocabulary matrix is frozen and has no gradient slot.
pub fn backward_batch<T: Real>(
    params: &RefinerParams<T>,
    cache: &ForwardCache<T>,
    d_logits: &Matrix<T>,
    kernel: &CosineKernel<T>,
    want_input_grad: bool,
) -> Result<(RefinerGrads<T>, Option<Matrix<T>>)> {
    let shape = params.shape();
    let b = cache.batch_size();
    if d_logits.shape() != (b, kernel.vocab_size()) {
        return Err(Error::dim(
            "refiner backward",
            format!("{b}x{}", kernel.vocab_size()),
            format!("{}x{}", d_logits.rows(), d_logits.cols()),
        ));
    }
    let mut grads = RefinerGrads::<T>::zeros(shape);

    let d_latent = kernel.backward(&cache.cosine, d_logits)?;
    grads.b2 = Vector::new(d_latent.column_sums());
    grads.w2 = matmul(&d_latent.transpose(), &cache.hidden)?;

    let mut d_pre = matmul(&d_latent, &params.w2)?;
    let mut d_gamma = vec![0.0f64; shape.hidden];
    let mut d_beta = vec![0.0f64; shape.hidden];
    let mut d_ln = vec![T::default(); shape.hidden];
    for r in 0..b {
        let mask = &cache.relu_mask[r * shape.hidden..(r + 1) * shape.hidden];
        for ((g, &on), &dh) in d_ln.iter_mut().zip(mask).zip(d_pre.row(r)) {
            *g = if on { dh } else { T::default() };
        }
        layer_norm_row_backward(
            cache.x_hat.row(r),
            cache.inv_std[r],
            &params.ln_gamma,
            &d_ln,
            d_pre.row_mut(r),
            &mut d_gamma,
            &mut d_beta,
        );
    }
    grads.ln_gamma = d_gamma.into_iter().map(T::from_f64).collect::<Vec<_>>().into();
    grads.ln_beta = d_beta.into_iter().map(T::from_f64).collect::<Vec<_>>().into();
    grads.b1 = Vector::new(d_pre.column_sums());
    grads.w1 = matmul(&d_pre.transpose(), &cache.input)?;

    let d_input = if want_input_grad {
        Some(matmul(&d_pre, &params.w1)?)
    } else {
        None
    };
    Ok((grads, d_input))
}

/// Single-sample backward: gradients for every block plus `d_x`.
pub fn backward<T: Real>(
    params: &RefinerParams<T>,
    cache: &ForwardCache<T>,
    d_logits: &[T],
    kernel: &CosineKernel<T>,
) -> Result<(RefinerGrads<T>, Vector<T>)> {
    let d = Matrix::new(1, d_logits.len(), d_logits.to_vec())?;
    let (g, dx) = backward_batch(params, cache, &d, kernel, true)?;
    Ok((g, dx.expect("requested").into_vec().into()))
}
