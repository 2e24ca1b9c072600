use std::ops::{Deref, DerefMut};

use super::Real;
use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T: Real = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        if let Some(index) = super::first_non_finite(&data) {
            return Err(Error::NonFinite {
                what: "matrix".into(),
                index,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::from_f64(1.0);
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim("Matrix::from_rows", cols, format!("{} in row {i}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact(0) panics; an empty-column matrix has no meaningful rows.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Self {
        const TILE: usize = 32;
        let (rows, cols) = (self.rows, self.cols);
        let mut out = vec![T::default(); self.data.len()];
        for r0 in (0..rows).step_by(TILE) {
            for c0 in (0..cols).step_by(TILE) {
                for r in r0..(r0 + TILE).min(rows) {
                    for c in c0..(c0 + TILE).min(cols) {
                        out[c * rows + r] = self.data[r * cols + c];
                    }
                }
            }
        }
        Self::from_vec_unchecked(cols, rows, out)
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        matmul(self, other)
    }

    pub fn is_finite(&self) -> bool {
        super::first_non_finite(&self.data).is_none()
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[T]) {
        assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x = T::from_f64(x.to_f64() + b.to_f64());
            }
        }
    }

    /// Column sums, accumulated sequentially over rows.
    pub fn column_sums(&self) -> Vec<T> {
        let mut acc = vec![0.0f64; self.cols];
        for row in self.iter_rows() {
            for (a, x) in acc.iter_mut().zip(row) {
                *a += x.to_f64();
            }
        }
        acc.into_iter().map(T::from_f64).collect()
    }
}

/// `A[m×k] · B[k×n]`.
///
/// Each output element is accumulated in `f64` sequentially over the
/// contraction index, so the result does not depend on tiling or on which
/// instruction set the kernel was compiled for.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::dim(
            "matmul",
            format!("inner dim {}", a.cols),
            format!("{}", b.rows),
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![T::default(); m * n];
    #[cfg(target_arch = "x86_64")]
    {
        // SAFETY (both arms): the required CPU feature was detected at runtime.
        if std::is_x86_feature_detected!("avx512f") {
            unsafe { matmul_avx512(&a.data, &b.data, &mut out, m, k, n) };
            return Ok(Matrix::from_vec_unchecked(m, n, out));
        }
        if std::is_x86_feature_detected!("avx2") {
            unsafe { matmul_avx2(&a.data, &b.data, &mut out, m, k, n) };
            return Ok(Matrix::from_vec_unchecked(m, n, out));
        }
    }
    matmul_kernel::<T, 4, 8>(&a.data, &b.data, &mut out, m, k, n);
    Ok(Matrix::from_vec_unchecked(m, n, out))
}

// Rust never contracts a*b+c into FMA, so these produce the same bits as
// the portable path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn matmul_avx512<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    matmul_kernel::<T, 6, 16>(a, b, out, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    matmul_kernel::<T, 4, 8>(a, b, out, m, k, n)
}

/// `MR × NR` register tiles over `k × NR` column panels of `B` packed as
/// `f64`; leftover rows reuse the panel, leftover columns are plain dot
/// products.
#[inline(always)]
fn matmul_kernel<T: Real, const MR: usize, const NR: usize>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    let mut panel = vec![0.0f64; k * NR];
    for j0 in (0..n_main).step_by(NR) {
        for p in 0..k {
            let src = &b[p * n + j0..p * n + j0 + NR];
            for (d, s) in panel[p * NR..(p + 1) * NR].iter_mut().zip(src) {
                *d = s.to_f64();
            }
        }
        for i0 in (0..m_main).step_by(MR) {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let bv = &panel[p * NR..(p + 1) * NR];
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + p].to_f64();
                    for j in 0..NR {
                        acc_r[j] += av * bv[j];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                let o = &mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
                for j in 0..NR {
                    o[j] = T::from_f64(acc_r[j]);
                }
            }
        }
        for i in m_main..m {
            let mut acc = [0.0f64; NR];
            for p in 0..k {
                let av = a[i * k + p].to_f64();
                let bv = &panel[p * NR..(p + 1) * NR];
                for j in 0..NR {
                    acc[j] += av * bv[j];
                }
            }
            for j in 0..NR {
                out[i * n + j0 + j] = T::from_f64(acc[j]);
            }
        }
    }
    for i in 0..m {
        for j in n_main..n {
            let mut s = 0.0f64;
            for p in 0..k {
                s += a[i * k + p].to_f64() * b[p * n + j].to_f64();
            }
            out[i * n + j] = T::from_f64(s);
        }
    }
}

/// Dense vector.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vector<T: Real = f32> {
    data: Vec<T>,
}

impl<T: Real> Vector<T> {
    pub fn new(data: Vec<T>) -> Self {
        Self { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![T::default(); dim],
        }
    }

    pub fn from_f64(values: &[f64]) -> Self {
        Self {
            data: values.iter().map(|&v| T::from_f64(v)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        super::first_non_finite(&self.data).is_none()
    }
}

impl<T: Real> From<Vec<T>> for Vector<T> {
    fn from(data: Vec<T>) -> Self {
        Self { data }
    }
}

impl<T: Real> Deref for Vector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T: Real> DerefMut for Vector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_times_b_is_b() {
        let b = m(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn zero_times_b_is_zero() {
        let b = m(&[&[3.0, 4.0], &[5.0, 6.0]]);
        let z = matmul(&Matrix::zeros(2, 2), &b).unwrap();
        assert!(z.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tiled_product_is_bit_identical_to_naive_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for (mm, kk, nn) in [(9, 13, 19), (4, 8, 8), (1, 1, 1), (17, 3, 33), (0, 4, 5), (13, 40, 50)] {
            let a: Vec<f32> = (0..mm * kk).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f32> = (0..kk * nn).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = matmul(&Matrix::new(mm, kk, a.clone()).unwrap(), &Matrix::new(kk, nn, b.clone()).unwrap()).unwrap();
            let mut portable = vec![0.0f32; mm * nn];
            matmul_kernel::<f32, 4, 8>(&a, &b, &mut portable, mm, kk, nn);
            let mut wide = vec![0.0f32; mm * nn];
            matmul_kernel::<f32, 6, 16>(&a, &b, &mut wide, mm, kk, nn);
            for i in 0..mm {
                for j in 0..nn {
                    let mut s = 0.0f64;
                    for p in 0..kk {
                        s += a[i * kk + p] as f64 * b[p * nn + j] as f64;
                    }
                    assert_eq!(got.get(i, j).to_bits(), (s as f32).to_bits());
                    assert_eq!(portable[i * nn + j].to_bits(), (s as f32).to_bits());
                    assert_eq!(wide[i * nn + j].to_bits(), (s as f32).to_bits());
                }
            }
        }
    }

    #[test]
    fn hand_computed_product() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0], &[6.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), (2, 1));
        assert_eq!(c.as_slice(), &[17.0, 39.0]);
    }

    #[test]
    fn inner_dimension_mismatch_is_an_error() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn new_rejects_bad_length_and_nan() {
        assert!(Matrix::<f32>::new(2, 2, vec![0.0; 3]).is_err());
        assert!(matches!(
            Matrix::<f32>::new(1, 2, vec![0.0, f32::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn transpose_round_trips() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let t = a.transpose();
        assert_eq!(t.shape(), (3, 2));
        assert_eq!(t.get(2, 1), 6.0);
        assert_eq!(t.transpose(), a);
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(
            a in small_matrix(3, 4),
            b in small_matrix(4, 5),
            c in small_matrix(5, 2),
        ) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (l, r) in left.as_slice().iter().zip(right.as_slice()) {
                let denom = l.abs().max(r.abs()).max(1.0);
                prop_assert!((l - r).abs() / denom <= 1e-4);
            }
        }

        #[test]
        fn matmul_is_associative_in_f32(
            a in small_matrix(3, 4),
            b in small_matrix(4, 5),
            c in small_matrix(5, 2),
        ) {
            let cast = |x: &Matrix<f64>| {
                Matrix::<f32>::new(x.rows(), x.cols(), x.as_slice().iter().map(|&v| v as f32).collect()).unwrap()
            };
            let (a, b, c) = (cast(&a), cast(&b), cast(&c));
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (l, r) in left.as_slice().iter().zip(right.as_slice()) {
                let denom = l.abs().max(r.abs()).max(1.0);
                prop_assert!((l - r).abs() / denom <= 1e-4);
            }
        }
    }
}
