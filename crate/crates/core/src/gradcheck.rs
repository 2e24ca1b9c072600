//! Analytic against central-difference gradients of loss∘refiner on a
//! tiny instance (4 → 8 → 4, six vocabulary rows).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::Objective;
use crate::numerics::{finite_diff_grad, relative_error, CosineKernel, Matrix};
use crate::refiner::{forward_batch, RefinerParams, RefinerShape, BLOCK_NAMES};
use crate::trainer::batch_gradient;
use crate::vocabulary::TargetVector;

pub const TINY_SHAPE: RefinerShape = RefinerShape {
    input: 4,
    hidden: 8,
    latent: 4,
};
pub const TINY_VOCAB: usize = 6;
pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
const BATCH: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub loss: String,
    pub seeds: Vec<u64>,
    pub max_rel_error: f64,
    /// Worst error per parameter block, in storage order.
    pub per_block: Vec<(String, f64)>,
    /// Coordinates whose probes crossed a ReLU kink and were skipped.
    pub kink_skips: usize,
    pub passed: bool,
}

struct Instance {
    params: RefinerParams<f64>,
    kernel: CosineKernel<f64>,
    x: Matrix<f64>,
    targets: Vec<TargetVector>,
}

fn instance(seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = RefinerParams::<f64>::init(TINY_SHAPE, seed);
    for v in params.b1.iter_mut().chain(params.ln_beta.iter_mut()).chain(params.b2.iter_mut()) {
        *v = rng.random_range(-0.3..0.3);
    }
    for v in params.ln_gamma.iter_mut() {
        *v = rng.random_range(0.6..1.4);
    }
    params.sigmoid_scale = rng.random_range(2.0..12.0);
    let mut rows = |n: usize, d: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    };
    let e = Matrix::from_rows(&rows(TINY_VOCAB, TINY_SHAPE.latent))?;
    let x = Matrix::from_rows(&rows(BATCH, TINY_SHAPE.input))?;
    let kernel = CosineKernel::new(&e)?;
    let targets = (0..BATCH)
        .map(|_| {
            let bits: Vec<bool> = (0..TINY_VOCAB).map(|_| rng.random_bool(0.35)).collect();
            let mut t = TargetVector::from_bits(&bits);
            if t.active_count() == 0 {
                t = TargetVector::new(TINY_VOCAB, vec![rng.random_range(0..TINY_VOCAB)])?;
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Instance {
        params,
        kernel,
        x,
        targets,
    })
}

pub fn gradcheck(objective: &Objective, seeds: impl IntoIterator<Item = u64>) -> Result<GradcheckReport> {
    let seeds: Vec<u64> = seeds.into_iter().collect();
    let mut per_block = vec![0.0f64; BLOCK_NAMES.len()];
    let mut kink_skips = 0;
    for &seed in &seeds {
        let inst = instance(seed)?;
        let targets: Vec<&TargetVector> = inst.targets.iter().collect();
        let analytic = batch_gradient(&inst.params, &inst.x, &targets, &inst.kernel, objective)?;
        let mask = forward_batch(&inst.params, &inst.x, &inst.kernel)?
            .cache
            .relu_mask()
            .to_vec();
        let numeric = finite_diff_grad(
            |flat| {
                let mut q = inst.params.clone();
                q.set_flat(flat);
                let f = match forward_batch(&q, &inst.x, &inst.kernel) {
                    Ok(f) => f,
                    Err(_) => return f64::NAN,
                };
                if f.cache.relu_mask() != mask.as_slice() {
                    return f64::NAN;
                }
                batch_gradient(&q, &inst.x, &targets, &inst.kernel, objective)
                    .map(|g| g.loss)
                    .unwrap_or(f64::NAN)
            },
            &inst.params.to_flat(),
            FD_STEP,
        );
        let a = analytic.grads.to_flat();
        let mut offset = 0;
        for (b, block) in inst.params.blocks().iter().enumerate() {
            for i in offset..offset + block.len() {
                if numeric[i].is_nan() {
                    kink_skips += 1;
                } else {
                    per_block[b] = per_block[b].max(relative_error(a[i], numeric[i]));
                }
            }
            offset += block.len();
        }
    }
    let max_rel_error = per_block.iter().copied().fold(0.0, f64::max);
    Ok(GradcheckReport {
        loss: objective.name().to_string(),
        seeds,
        max_rel_error,
        per_block: BLOCK_NAMES
            .iter()
            .zip(per_block)
            .map(|(n, e)| (n.to_string(), e))
            .collect(),
        kink_skips,
        passed: max_rel_error <= TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_objectives_pass_on_twenty_seeds() {
        for obj in [Objective::bce(), Objective::contrastive(), Objective::focal()] {
            let r = gradcheck(&obj, 0..20).unwrap();
            assert!(r.passed, "{}: {:?}", r.loss, r.per_block);
            assert!(r.per_block.iter().any(|(_, e)| *e > 0.0));
        }
    }
}
