use super::{dot, l2_norm, matmul, Matrix, Real, Vector, NORM_FLOOR};
use crate::error::{Error, Result};

/// Saved state of an L2 normalization.
#[derive(Clone, Debug)]
pub struct L2Cache<T: Real = f32> {
    pub unit: Vec<T>,
    pub norm: f64,
}

pub fn l2_normalize<T: Real>(v: &[T]) -> Result<(Vector<T>, L2Cache<T>)> {
    let norm = l2_norm(v);
    if !(norm >= NORM_FLOOR) {
        return Err(Error::Degenerate {
            what: "vector",
            row: 0,
            norm,
        });
    }
    let unit: Vec<T> = v.iter().map(|x| T::from_f64(x.to_f64() / norm)).collect();
    Ok((Vector::new(unit.clone()), L2Cache { unit, norm }))
}

/// Jacobian-vector product of `v / ||v||`: `(g − u (u·g)) / ||v||`.
pub fn l2_normalize_backward<T: Real>(cache: &L2Cache<T>, d_out: &[T]) -> Vector<T> {
    let mut out = vec![T::default(); d_out.len()];
    unit_backward_row(&cache.unit, cache.norm, d_out, &mut out);
    Vector::new(out)
}

pub(crate) fn unit_backward_row<T: Real>(unit: &[T], norm: f64, d_out: &[T], out: &mut [T]) {
    let proj = dot(unit, d_out);
    for i in 0..d_out.len() {
        out[i] = T::from_f64((d_out[i].to_f64() - unit[i].to_f64() * proj) / norm);
    }
}

/// Cosine similarity of every row of `z` against every row of `e`.
pub fn cosine_logits<T: Real>(z: &Matrix<T>, e: &Matrix<T>) -> Result<Matrix<T>> {
    let kernel = CosineKernel::new(e)?;
    Ok(kernel.logits(z)?.logits)
}

/// Pre-normalized vocabulary rows, shared by the naive baseline and the
/// refiner so both score through one code path.
#[derive(Clone, Debug)]
pub struct CosineKernel<T: Real = f32> {
    /// `V × D`, unit rows.
    unit_rows: Matrix<T>,
    /// `D × V`, transpose of `unit_rows`.
    unit_cols: Matrix<T>,
}

/// Output of [`CosineKernel::logits`] together with what backward needs.
#[derive(Clone, Debug)]
pub struct CosineOutput<T: Real = f32> {
    pub logits: Matrix<T>,
    pub units: Matrix<T>,
    pub norms: Vec<f64>,
}

impl<T: Real> CosineKernel<T> {
    pub fn new(e: &Matrix<T>) -> Result<Self> {
        let unit_rows = normalize_rows(e, "vocabulary row")?.0;
        let unit_cols = unit_rows.transpose();
        Ok(Self {
            unit_rows,
            unit_cols,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.unit_rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.unit_rows.cols()
    }

    pub fn unit_rows(&self) -> &Matrix<T> {
        &self.unit_rows
    }

    /// Scores a `B × D` batch; entry `(i, j)` is `cos(z_i, e_j)`.
    pub fn logits(&self, z: &Matrix<T>) -> Result<CosineOutput<T>> {
        if z.cols() != self.dim() {
            return Err(Error::dim("cosine_logits", self.dim(), z.cols()));
        }
        let (units, norms) = normalize_rows(z, "query row")?;
        let logits = matmul(&units, &self.unit_cols)?;
        Ok(CosineOutput {
            logits,
            units,
            norms,
        })
    }

    pub fn logits_one(&self, z: &[T]) -> Result<Vector<T>> {
        let m = Matrix::new(1, z.len(), z.to_vec())?;
        Ok(self.logits(&m)?.logits.into_vec().into())
    }

    /// Gradient of the logits with respect to the un-normalized queries.
    /// The vocabulary side is frozen and receives nothing.
    pub fn backward(&self, out: &CosineOutput<T>, d_logits: &Matrix<T>) -> Result<Matrix<T>> {
        let d_units = matmul(d_logits, &self.unit_rows)?;
        let mut dz = Matrix::zeros(d_units.rows(), d_units.cols());
        for r in 0..d_units.rows() {
            unit_backward_row(out.units.row(r), out.norms[r], d_units.row(r), dz.row_mut(r));
        }
        Ok(dz)
    }
}

fn normalize_rows<T: Real>(m: &Matrix<T>, what: &'static str) -> Result<(Matrix<T>, Vec<f64>)> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let row = m.row(r);
        let norm = l2_norm(row);
        if !(norm >= NORM_FLOOR) {
            return Err(Error::Degenerate { what, row: r, norm });
        }
        for (o, x) in out.row_mut(r).iter_mut().zip(row) {
            *o = T::from_f64(x.to_f64() / norm);
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_four_five() {
        let (u, _) = l2_normalize(&[3.0f64, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn unit_vector_is_unchanged() {
        let v = [0.6f32, 0.8];
        let (u, _) = l2_normalize(&v).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-7 && (u[1] - 0.8).abs() < 1e-7);
        assert!((l2_norm(&u) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn below_floor_is_rejected() {
        assert!(matches!(l2_normalize(&[0.0f32, 0.0]), Err(Error::Degenerate { .. })));
        assert!(matches!(l2_normalize(&[1e-9f64]), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let d = rng.random_range(2..=16);
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = |x: &[f64]| {
                let (u, _) = l2_normalize(x).unwrap();
                dot(&u, &w)
            };
            let (_, cache) = l2_normalize(&v).unwrap();
            let analytic = l2_normalize_backward(&cache, &w);
            let numeric = finite_diff_grad(f, &v, 1e-5);
            assert!(max_relative_error(&analytic, &numeric) <= 1e-4);
        }
    }

    #[test]
    fn self_similarity_orthogonality_and_hand_case() {
        let e = Matrix::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()]])
            .unwrap();
        let l = cosine_logits(&z, &e).unwrap();
        assert!((l.get(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(l.get(0, 1), 0.0);
        assert!((l.get(1, 0) - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn f32_self_similarity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f32>> = (0..5)
            .map(|_| (0..512).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let e = Matrix::from_rows(&rows).unwrap();
        let z = Matrix::from_rows(&rows[2..3]).unwrap();
        let l = cosine_logits(&z, &e).unwrap();
        assert!((l.get(0, 2) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_row_is_named() {
        let e = Matrix::<f32>::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        match cosine_logits(&z, &e) {
            Err(Error::Degenerate { row, what, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(what, "query row");
            }
            other => panic!("{other:?}"),
        }
    }

    proptest::proptest! {
        #[test]
        fn logits_are_bounded(
            z in proptest::collection::vec(-3.0f32..3.0, 3 * 8),
            e in proptest::collection::vec(-3.0f32..3.0, 5 * 8),
        ) {
            let z = Matrix::new(3, 8, z).unwrap();
            let e = Matrix::new(5, 8, e).unwrap();
            if let Ok(l) = cosine_logits(&z, &e) {
                for &v in l.as_slice() {
                    proptest::prop_assert!((-1.0 - 1e-5..=1.0 + 1e-5).contains(&v));
                }
            }
        }
    }
}
