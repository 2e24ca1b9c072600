//! Training objectives over cosine logits.
//!
//! Each loss returns its per-sample value together with the gradient with
//! respect to the logits and, for the sigmoid-based losses, with respect to
//! the learned sigmoid scale. All log-sigmoid terms go through `softplus`
//! and the softmax through log-sum-exp.

use serde::{Deserialize, Serialize};

use crate::numerics::{Real, Vector};
use crate::refiner::LossTag;
use crate::vocabulary::TargetVector;

pub const CONTRASTIVE_TAU: f64 = 0.07;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T: Real = f32> {
    pub value: f64,
    pub d_logits: Vector<T>,
    /// Zero for the contrastive loss.
    pub d_scale: f64,
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on `sigmoid(scale · logit)`, averaged over the
/// vocabulary.
pub fn bce_scaled<T: Real>(logits: &[T], scale: f64, target: &TargetVector) -> LossOutput<T> {
    assert_eq!(logits.len(), target.dim());
    let v = logits.len() as f64;
    let mut value = 0.0;
    let mut d_scale = 0.0;
    let mut d_logits = Vec::with_capacity(logits.len());
    let bits = target.bits();
    for (&l, &y) in logits.iter().zip(&bits) {
        let l = l.to_f64();
        let t = scale * l;
        // -log p = softplus(-t), -log(1-p) = softplus(t)
        value += if y { softplus(-t) } else { softplus(t) };
        let dt = sigmoid(t) - if y { 1.0 } else { 0.0 };
        d_logits.push(T::from_f64(dt * scale / v));
        d_scale += dt * l;
    }
    LossOutput {
        value: value / v,
        d_logits: Vector::new(d_logits),
        d_scale: d_scale / v,
    }
}

/// Multi-label InfoNCE: mean over positives of the softmax negative
/// log-likelihood at temperature `tau`.
///
/// Returns `None` when the target has no positives; such samples carry no
/// signal and are skipped rather than treated as failures.
pub fn contrastive_multilabel<T: Real>(
    logits: &[T],
    target: &TargetVector,
    tau: f64,
) -> Option<LossOutput<T>> {
    assert_eq!(logits.len(), target.dim());
    assert!(tau > 0.0);
    let positives = target.active();
    if positives.is_empty() {
        return None;
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l.to_f64() / tau).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = scaled.iter().map(|s| (s - max).exp()).sum();
    let log_z = max + sum_exp.ln();
    let n_pos = positives.len() as f64;
    let value = positives.iter().map(|&j| log_z - scaled[j]).sum::<f64>() / n_pos;

    let mut d = Vec::with_capacity(logits.len());
    for (k, s) in scaled.iter().enumerate() {
        let softmax = (s - log_z).exp();
        let pos = if target.is_set(k) { 1.0 / n_pos } else { 0.0 };
        d.push(T::from_f64((softmax - pos) / tau));
    }
    Some(LossOutput {
        value,
        d_logits: Vector::new(d),
        d_scale: 0.0,
    })
}

/// Focal loss on `sigmoid(scale · logit)`, averaged over the vocabulary.
/// `alpha` weights positives and `1 − alpha` weights negatives.
pub fn focal<T: Real>(
    logits: &[T],
    scale: f64,
    target: &TargetVector,
    gamma: f64,
    alpha: f64,
) -> LossOutput<T> {
    assert_eq!(logits.len(), target.dim());
    let v = logits.len() as f64;
    let mut value = 0.0;
    let mut d_scale = 0.0;
    let mut d_logits = Vec::with_capacity(logits.len());
    let bits = target.bits();
    for (&l, &y) in logits.iter().zip(&bits) {
        let l = l.to_f64();
        let t = scale * l;
        // q is the logit of p_t
        let (q, sign, a_t) = if y { (t, 1.0, alpha) } else { (-t, -1.0, 1.0 - alpha) };
        let nll = softplus(-q); // -log p_t
        let modulator = if gamma == 0.0 {
            1.0
        } else {
            (-gamma * softplus(q)).exp() // (1 - p_t)^gamma
        };
        value += a_t * modulator * nll;
        let dq = -a_t * modulator * (gamma * sigmoid(q) * nll + sigmoid(-q));
        let dt = dq * sign;
        d_logits.push(T::from_f64(dt * scale / v));
        d_scale += dt * l;
    }
    LossOutput {
        value: value / v,
        d_logits: Vector::new(d_logits),
        d_scale: d_scale / v,
    }
}

/// A configured training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Objective {
    Bce,
    Contrastive { tau: f64 },
    Focal { gamma: f64, alpha: f64 },
}

impl Objective {
    pub fn bce() -> Self {
        Objective::Bce
    }

    pub fn contrastive() -> Self {
        Objective::Contrastive {
            tau: CONTRASTIVE_TAU,
        }
    }

    pub fn focal() -> Self {
        Objective::Focal {
            gamma: FOCAL_GAMMA,
            alpha: FOCAL_ALPHA,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Bce => "bce",
            Objective::Contrastive { .. } => "contrastive",
            Objective::Focal { .. } => "focal",
        }
    }

    pub fn tag(&self) -> LossTag {
        match self {
            Objective::Bce => LossTag::Bce,
            Objective::Contrastive { .. } => LossTag::Contrastive,
            Objective::Focal { .. } => LossTag::Focal,
        }
    }

    /// `None` means the sample should be skipped.
    pub fn compute<T: Real>(
        &self,
        logits: &[T],
        scale: f64,
        target: &TargetVector,
    ) -> Option<LossOutput<T>> {
        match *self {
            Objective::Bce => Some(bce_scaled(logits, scale, target)),
            Objective::Contrastive { tau } => contrastive_multilabel(logits, target, tau),
            Objective::Focal { gamma, alpha } => Some(focal(logits, scale, target, gamma, alpha)),
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "bce" => Ok(Self::bce()),
            "contrastive" => Ok(Self::contrastive()),
            "focal" => Ok(Self::focal()),
            other => Err(crate::Error::Usage(format!(
                "unknown loss {other:?} (expected bce, contrastive or focal)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn target(dim: usize, active: &[usize]) -> TargetVector {
        TargetVector::new(dim, active.to_vec()).unwrap()
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        for scale in [0.5, 10.0, 37.0] {
            let out = bce_scaled(&[0.0f64; 9], scale, &target(9, &[1, 4]));
            assert!((out.value - std::f64::consts::LN_2).abs() <= 1e-12);
        }
    }

    #[test]
    fn bce_saturates() {
        let out = bce_scaled(&[1.0f64, -1.0], 1000.0, &target(2, &[0]));
        assert!(out.value < 1e-12);
        assert!(out.value.is_finite());
    }

    #[test]
    fn contrastive_uniform_is_log_v() {
        let out = contrastive_multilabel(&vec![0.3f64; 1210], &target(1210, &[17]), 0.07).unwrap();
        assert!((out.value - 1210f64.ln()).abs() <= 1e-9);
        assert!((out.value - 7.0984).abs() <= 1e-4);
    }

    #[test]
    fn contrastive_saturates_and_skips_empty() {
        let mut l = vec![-1.0f64; 50];
        l[3] = 1.0;
        let out = contrastive_multilabel(&l, &target(50, &[3]), 0.01).unwrap();
        assert!(out.value < 1e-12);
        assert!(contrastive_multilabel(&l, &target(50, &[]), 0.07).is_none());
    }

    #[test]
    fn contrastive_two_positives_scalar_oracle() {
        let l = [0.2f64, -0.1, 0.5, 0.0, 0.9];
        let tau = 0.07;
        let denom: f64 = l.iter().map(|v| (v / tau).exp()).sum();
        let expect = -0.5 * (((l[2] / tau).exp() / denom).ln() + ((l[4] / tau).exp() / denom).ln());
        let out = contrastive_multilabel(&l, &target(5, &[2, 4]), tau).unwrap();
        assert!((out.value - expect).abs() <= 1e-9 * expect.abs().max(1.0));
    }

    #[test]
    fn focal_saturates() {
        let out = focal(&[1.0f64, -1.0, -1.0], 200.0, &target(3, &[0]), 2.0, 0.25);
        assert!(out.value < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let v = rng.random_range(3..12);
            let logits: Vec<f64> = (0..v).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n_pos = rng.random_range(1..v);
            let mut idx: Vec<usize> = (0..v).collect();
            for i in 0..n_pos {
                let j = rng.random_range(i..v);
                idx.swap(i, j);
            }
            let t = target(v, &idx[..n_pos]);
            let scale = rng.random_range(1.0..12.0);
            for obj in [Objective::bce(), Objective::contrastive(), Objective::focal()] {
                let out = obj.compute(&logits, scale, &t).unwrap();
                let num = finite_diff_grad(|l| obj.compute(l, scale, &t).unwrap().value, &logits, 1e-6);
                // Entries that cancel to a tiny fraction of the gradient's
                // scale sit at the finite-difference noise level, so they
                // are compared against that scale instead.
                let g_scale = num.iter().fold(0.0f64, |m, g| m.max(g.abs()));
                for (a, n) in out.d_logits.iter().zip(&num) {
                    let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * g_scale).max(1e-6);
                    assert!(err <= 1e-4, "{obj:?}: {a} vs {n}");
                }
                let num_scale = finite_diff_grad(
                    |s| obj.compute(&logits, s[0], &t).unwrap().value,
                    &[scale],
                    1e-6,
                );
                assert!(relative_error(out.d_scale, num_scale[0]) <= 1e-4, "{obj:?} scale");
            }
        }
    }

    fn fuzz_case() -> impl Strategy<Value = (Vec<f64>, Vec<bool>, f64)> {
        (2usize..40).prop_flat_map(|v| {
            (
                proptest::collection::vec(-1.0f64..=1.0, v),
                proptest::collection::vec(proptest::bool::weighted(0.2), v),
                0.1f64..30.0,
            )
        })
    }

    proptest! {
        #[test]
        fn focal_gamma0_alpha_half_is_half_bce((logits, bits, scale) in fuzz_case()) {
            let t = TargetVector::from_bits(&bits);
            let f = focal(&logits, scale, &t, 0.0, 0.5);
            let b = bce_scaled(&logits, scale, &t);
            prop_assert!((f.value - 0.5 * b.value).abs() <= 1e-6);
        }

        #[test]
        fn losses_are_nonnegative_and_finite((logits, bits, scale) in fuzz_case()) {
            let t = TargetVector::from_bits(&bits);
            for obj in [Objective::bce(), Objective::contrastive(), Objective::focal()] {
                if let Some(out) = obj.compute(&logits, scale, &t) {
                    prop_assert!(out.value >= 0.0 && out.value.is_finite());
                    prop_assert!(out.d_logits.iter().all(|g| g.is_finite()));
                }
            }
        }

        #[test]
        fn raising_a_positive_logit_never_raises_the_loss(
            (logits, bits, scale) in fuzz_case(),
            bump in 0.0f64..0.5,
        ) {
            let t = TargetVector::from_bits(&bits);
            if let Some(&j) = t.active().first() {
                let mut raised = logits.clone();
                raised[j] = (raised[j] + bump).min(1.0);
                // with several positives, raising one shifts softmax mass
                // away from the others, so contrastive is only monotone
                // for a single positive
                let mut objectives = vec![Objective::bce(), Objective::focal()];
                if t.active_count() == 1 {
                    objectives.push(Objective::contrastive());
                }
                for obj in objectives {
                    let before = obj.compute(&logits, scale, &t).unwrap().value;
                    let after = obj.compute(&raised, scale, &t).unwrap().value;
                    prop_assert!(after <= before + 1e-12, "{:?}: {} -> {}", obj, before, after);
                }
            }
        }

        #[test]
        fn single_positive_contrastive_is_softmax_cross_entropy(
            logits in proptest::collection::vec(-1.0f64..=1.0, 2..30),
            pick in any::<prop::sample::Index>(),
        ) {
            let j = pick.index(logits.len());
            let t = TargetVector::new(logits.len(), vec![j]).unwrap();
            let tau = 0.07;
            // naive softmax cross-entropy as the oracle
            let exps: Vec<f64> = logits.iter().map(|l| (l / tau).exp()).collect();
            let ce = -(exps[j] / exps.iter().sum::<f64>()).ln();
            let out = contrastive_multilabel(&logits, &t, tau).unwrap();
            prop_assert!((out.value - ce).abs() <= 1e-9 * ce.max(1.0));
        }
    }
}
