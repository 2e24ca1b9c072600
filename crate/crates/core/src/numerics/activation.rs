use super::{Real, Vector};

/// Positions where the ReLU input was strictly positive (or NaN, which is
/// passed through so that upstream corruption is not silently zeroed).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReluMask(pub Vec<bool>);

pub fn relu<T: Real>(x: &[T]) -> (Vector<T>, ReluMask) {
    let mut mask = Vec::with_capacity(x.len());
    let out = x
        .iter()
        .map(|&v| {
            let on = !(v.to_f64() <= 0.0);
            mask.push(on);
            if on {
                v
            } else {
                T::default()
            }
        })
        .collect();
    (Vector::new(out), ReluMask(mask))
}

/// Gates the cotangent by the forward mask; the subgradient at 0 is 0.
pub fn relu_backward<T: Real>(mask: &ReluMask, d_out: &[T]) -> Vector<T> {
    assert_eq!(mask.0.len(), d_out.len());
    mask.0
        .iter()
        .zip(d_out)
        .map(|(&on, &g)| if on { g } else { T::default() })
        .collect::<Vec<_>>()
        .into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clamps_negatives_and_zero() {
        let (y, mask) = relu(&[-1.0f32, 0.0, 2.0]);
        assert_eq!(&y[..], &[0.0, 0.0, 2.0]);
        assert_eq!(mask.0, vec![false, false, true]);
        assert_eq!(&relu_backward(&mask, &[5.0f32, 5.0, 5.0])[..], &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn all_negative_input() {
        let (y, mask) = relu(&[-0.5f64, -3.0, -1e-9]);
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(relu_backward(&mask, &[1.0, 2.0, 3.0]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..32)
            .map(|_| rng.random_range(-1.0..1.0))
            .filter(|v: &f64| v.abs() >= 1e-3)
            .collect();
        let w: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |v: &[f64]| relu(v).0.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let (_, mask) = relu(&x);
        let analytic = relu_backward(&mask, &w);
        let numeric = finite_diff_grad(f, &x, 1e-5);
        assert!(max_relative_error(&analytic, &numeric) <= 1e-4);
    }
}
