//! AdamW with a per-epoch cosine schedule, the epoch loop, and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::numerics::{CosineKernel, Matrix, Real};
use crate::refiner::{
    backward_batch, forward_batch, Checkpoint, RefinerGrads, RefinerParams, RefinerShape,
};
use crate::retrieval::{self, RetrievalReport, DEFAULT_TOP_K};
use crate::vocabulary::{Split, TargetVector, VocabEmbeddings};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Lower bound the sigmoid scale is clamped to after each update.
pub const MIN_SIGMOID_SCALE: f64 = 1e-3;

/// Recorded in reports so a run can be reproduced.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng";

/// Which blocks weight decay touches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayPolicy {
    /// Every block, including biases, LayerNorm affine and the scale.
    #[default]
    All,
    /// `w1` and `w2` only.
    WeightsOnly,
}

impl DecayPolicy {
    fn mask(self) -> [bool; 7] {
        match self {
            DecayPolicy::All => [true; 7],
            DecayPolicy::WeightsOnly => [true, false, false, false, true, false, false],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: Objective,
    pub eta_min: f64,
    pub hidden: usize,
    pub decay: DecayPolicy,
    /// `k` for the per-epoch validation metrics.
    pub top_k: usize,
}

impl TrainConfig {
    /// Defaults for `loss`: 50 epochs, or 100 for contrastive.
    pub fn new(loss: Objective, seed: u64) -> Self {
        let epochs = match loss {
            Objective::Contrastive { .. } => 100,
            _ => 50,
        };
        Self {
            lr_max: 1e-4,
            weight_decay: 1e-2,
            epochs,
            batch_size: 64,
            seed,
            loss,
            eta_min: 0.0,
            hidden: RefinerShape::DEFAULT.hidden,
            decay: DecayPolicy::All,
            top_k: DEFAULT_TOP_K,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Usage(m.to_string()));
        if !(self.lr_max >= 0.0 && self.lr_max.is_finite()) {
            return bad("lr_max must be a finite value >= 0");
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.lr_max) {
            return bad("eta_min must lie in [0, lr_max]");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be a finite value >= 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.hidden == 0 || self.top_k == 0 {
            return bad("hidden width and top_k must be at least 1");
        }
        Ok(())
    }
}

/// `eta_min + ½(lr_max − eta_min)(1 + cos(π·epoch/total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_max: f64, eta_min: f64) -> f64 {
    assert!(total_epochs >= 1 && epoch <= total_epochs);
    let t = epoch as f64 / total_epochs as f64;
    eta_min + 0.5 * (lr_max - eta_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// First and second moments mirroring the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub m: RefinerParams<T>,
    pub v: RefinerParams<T>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(shape: RefinerShape) -> Self {
        Self {
            m: RefinerParams::zeros(shape),
            v: RefinerParams::zeros(shape),
            step: 0,
        }
    }
}

/// One AdamW update of a flat block. `step` is the 1-based step count.
pub fn adamw_update<T: Real>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    weight_decay: f64,
) {
    assert!(step >= 1);
    let bc1 = 1.0 - ADAM_BETA1.powf(step as f64);
    let bc2 = 1.0 - ADAM_BETA2.powf(step as f64);
    for i in 0..theta.len() {
        let g = grad[i].to_f64();
        let mi = ADAM_BETA1 * m[i].to_f64() + (1.0 - ADAM_BETA1) * g;
        let vi = ADAM_BETA2 * v[i].to_f64() + (1.0 - ADAM_BETA2) * g * g;
        m[i] = T::from_f64(mi);
        v[i] = T::from_f64(vi);
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        let th = theta[i].to_f64();
        theta[i] = T::from_f64(th - lr * m_hat / (v_hat.sqrt() + ADAM_EPS) - lr * weight_decay * th);
    }
}

/// AdamW over every block with decoupled decay applied uniformly.
pub fn adamw_step<T: Real>(
    params: &mut RefinerParams<T>,
    grads: &RefinerGrads<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    adamw_step_with(params, grads, state, lr, weight_decay, DecayPolicy::All)
}

pub fn adamw_step_with<T: Real>(
    params: &mut RefinerParams<T>,
    grads: &RefinerGrads<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
    decay: DecayPolicy,
) -> Result<()> {
    let shape = params.shape();
    for (what, other) in [("gradient", grads.shape()), ("first moment", state.m.shape()), ("second moment", state.v.shape())] {
        if other != shape {
            return Err(Error::dim("adamw_step", format!("{shape:?}"), format!("{what} {other:?}")));
        }
    }
    if !(lr >= 0.0) {
        return Err(Error::Usage(format!("learning rate {lr} must be >= 0")));
    }
    state.step += 1;
    let step = state.step;
    let mask = decay.mask();
    let g = grads.blocks();
    let OptimizerState { m, v, .. } = state;
    for (i, ((theta, m), v)) in params
        .blocks_mut()
        .into_iter()
        .zip(m.blocks_mut())
        .zip(v.blocks_mut())
        .enumerate()
    {
        let wd = if mask[i] { weight_decay } else { 0.0 };
        adamw_update(theta, g[i], m, v, step, lr, wd);
    }
    if params.sigmoid_scale.to_f64() < MIN_SIGMOID_SCALE {
        params.sigmoid_scale = T::from_f64(MIN_SIGMOID_SCALE);
    }
    Ok(())
}

/// Mean loss and gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradient<T: Real = f32> {
    /// Mean over the samples that contributed.
    pub loss: f64,
    pub used: usize,
    /// Samples the objective asked to skip (no positives).
    pub skipped: usize,
    pub grads: RefinerGrads<T>,
    /// Per-sample loss, `None` for skipped rows.
    pub sample_losses: Vec<Option<f64>>,
}

/// Forward, loss and backward for a batch; the gradient is the mean over
/// contributing samples. When every sample is skipped the gradient is zero.
pub fn batch_gradient<T: Real>(
    params: &RefinerParams<T>,
    input: &Matrix<T>,
    targets: &[&TargetVector],
    kernel: &CosineKernel<T>,
    objective: &Objective,
) -> Result<BatchGradient<T>> {
    assert_eq!(input.rows(), targets.len());
    let fwd = forward_batch(params, input, kernel)?;
    let v = kernel.vocab_size();
    let scale = params.sigmoid_scale.to_f64();
    let mut outputs = Vec::with_capacity(targets.len());
    for (r, t) in targets.iter().enumerate() {
        outputs.push(objective.compute(fwd.logits.row(r), scale, t));
    }
    let used = outputs.iter().filter(|o| o.is_some()).count();
    let sample_losses: Vec<Option<f64>> = outputs.iter().map(|o| o.as_ref().map(|o| o.value)).collect();
    if used == 0 {
        return Ok(BatchGradient {
            loss: 0.0,
            used,
            skipped: targets.len(),
            grads: RefinerGrads::zeros(params.shape()),
            sample_losses,
        });
    }
    let inv = 1.0 / used as f64;
    let mut d_logits = Matrix::<T>::zeros(targets.len(), v);
    let mut loss = 0.0;
    let mut d_scale = 0.0;
    for (r, out) in outputs.iter().enumerate() {
        if let Some(out) = out {
            loss += out.value;
            d_scale += out.d_scale;
            for (d, g) in d_logits.row_mut(r).iter_mut().zip(out.d_logits.iter()) {
                *d = T::from_f64(g.to_f64() * inv);
            }
        }
    }
    let (mut grads, _) = backward_batch(params, &fwd.cache, &d_logits, kernel, false)?;
    grads.sigmoid_scale = T::from_f64(d_scale * inv);
    Ok(BatchGradient {
        loss: loss * inv,
        used,
        skipped: targets.len() - used,
        grads,
        sample_losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub skipped_samples: usize,
    pub val_precision_at_k: Option<f64>,
    pub val_recall_at_k: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub rng_algorithm: String,
    pub param_count: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_sigmoid_scale: f64,
    pub wall_clock_seconds: f64,
    pub checkpoint: Option<String>,
}

fn stack(samples: &[&Sample], dim: usize) -> Matrix<f32> {
    let mut data = Vec::with_capacity(samples.len() * dim);
    for s in samples {
        data.extend_from_slice(&s.x);
    }
    Matrix::from_vec_unchecked(samples.len(), dim, data)
}

fn non_finite_abort(epoch: usize, batch: usize, detail: String) -> Error {
    Error::NonFiniteLoss {
        epoch,
        batch,
        detail,
    }
}

/// Trains a fresh refiner on the train split, scoring the val split after
/// every epoch.
pub fn fit(samples: &[Sample], emb: &VocabEmbeddings, cfg: &TrainConfig) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let train: Vec<&Sample> = samples.iter().filter(|s| s.split == Split::Train).collect();
    let val: Vec<&Sample> = samples.iter().filter(|s| s.split == Split::Val).collect();
    if train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let dim = train[0].x.dim();
    for s in samples {
        if s.x.dim() != dim {
            return Err(Error::dim(
                "training input",
                dim,
                format!("{} (sample {:?})", s.x.dim(), s.id),
            ));
        }
        if s.target.dim() != emb.vocab_size() {
            return Err(Error::dim(
                "training target",
                emb.vocab_size(),
                format!("{} (sample {:?})", s.target.dim(), s.id),
            ));
        }
    }
    let shape = RefinerShape {
        input: dim,
        hidden: cfg.hidden,
        latent: emb.dim(),
    };
    let kernel = emb.kernel();
    let mut params = RefinerParams::<f32>::init(shape, cfg.seed);
    let mut state = OptimizerState::new(shape);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.eta_min);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut used_sum = 0usize;
        let mut skipped = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            let input = stack(&batch, dim);
            let targets: Vec<&TargetVector> = batch.iter().map(|s| &s.target).collect();
            let g = match batch_gradient(&params, &input, &targets, &kernel, &cfg.loss) {
                Ok(g) => g,
                Err(Error::Degenerate { row, norm, what }) if !norm.is_finite() => {
                    return Err(non_finite_abort(
                        epoch,
                        b,
                        format!("{what} of sample {:?} has norm {norm}", batch[row].id),
                    ));
                }
                Err(e) => return Err(e),
            };
            if !g.loss.is_finite() || !g.grads.is_finite() {
                let bad: Vec<&str> = g
                    .sample_losses
                    .iter()
                    .zip(&batch)
                    .filter(|(l, _)| l.is_some_and(|l| !l.is_finite()))
                    .map(|(_, s)| s.id.as_str())
                    .collect();
                return Err(non_finite_abort(
                    epoch,
                    b,
                    format!("loss {} (non-finite samples: {bad:?})", g.loss),
                ));
            }
            skipped += g.skipped;
            if g.used == 0 {
                continue;
            }
            loss_sum += g.loss * g.used as f64;
            used_sum += g.used;
            adamw_step_with(&mut params, &g.grads, &mut state, lr, cfg.weight_decay, cfg.decay)?;
        }
        let (vp, vr) = if val.is_empty() {
            (None, None)
        } else {
            let rep = evaluate(&params, &val, &kernel, cfg.top_k)?;
            (Some(rep.overall.precision_at_k), Some(rep.overall.recall_at_k))
        };
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: if used_sum == 0 { 0.0 } else { loss_sum / used_sum as f64 },
            skipped_samples: skipped,
            val_precision_at_k: vp,
            val_recall_at_k: vr,
        });
    }

    let report = TrainReport {
        config: cfg.clone(),
        rng_algorithm: RNG_ALGORITHM.to_string(),
        param_count: params.param_count(),
        train_samples: train.len(),
        val_samples: val.len(),
        epochs,
        final_sigmoid_scale: params.sigmoid_scale as f64,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        checkpoint: None,
    };
    let ckpt = Checkpoint {
        params,
        seed: cfg.seed,
        loss: cfg.loss.tag(),
    };
    Ok((ckpt, report))
}

/// Refiner logits for `samples`, `N × V`, computed in chunks.
pub fn refined_logits(
    params: &RefinerParams<f32>,
    samples: &[&Sample],
    kernel: &CosineKernel<f32>,
) -> Result<Matrix<f32>> {
    let v = kernel.vocab_size();
    let mut data = Vec::with_capacity(samples.len() * v);
    let dim = params.shape().input;
    for chunk in samples.chunks(256) {
        for s in chunk.iter() {
            if s.x.dim() != dim {
                return Err(Error::dim("refiner input", dim, format!("{} (sample {:?})", s.x.dim(), s.id)));
            }
        }
        let f = forward_batch(params, &stack(chunk, dim), kernel)?;
        data.extend_from_slice(f.logits.as_slice());
    }
    Ok(Matrix::from_vec_unchecked(samples.len(), v, data))
}

/// Raw-embedding cosine logits for `samples`, `N × V`.
pub fn naive_logits_for(samples: &[&Sample], kernel: &CosineKernel<f32>) -> Result<Matrix<f32>> {
    let dim = kernel.dim();
    for s in samples {
        if s.x.dim() != dim {
            return Err(Error::dim("naive input", dim, format!("{} (sample {:?})", s.x.dim(), s.id)));
        }
    }
    retrieval::naive_logits_batch(&stack(samples, dim), kernel)
}

fn summarize_rows(logits: &Matrix<f32>, samples: &[&Sample], k: usize) -> RetrievalReport {
    retrieval::summarize(
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| (logits.row(i), &s.target, s.subject)),
        k,
    )
}

/// Precision@k, recall@k and mean positive rank, overall and per subject.
pub fn evaluate(
    params: &RefinerParams<f32>,
    samples: &[&Sample],
    kernel: &CosineKernel<f32>,
    k: usize,
) -> Result<RetrievalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    Ok(summarize_rows(&refined_logits(params, samples, kernel)?, samples, k))
}

/// Same metrics for the naive baseline.
pub fn evaluate_naive(samples: &[&Sample], kernel: &CosineKernel<f32>, k: usize) -> Result<RetrievalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    Ok(summarize_rows(&naive_logits_for(samples, kernel)?, samples, k))
}
