use super::{Real, Vector};

/// Epsilon added to the variance before taking the square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Values saved by [`layer_norm`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T: Real = f32> {
    pub x_hat: Vec<T>,
    pub inv_std: f64,
    pub gamma: Vec<T>,
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` with population variance.
pub fn layer_norm<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vector<T>, LayerNormCache<T>) {
    assert_eq!(x.len(), gamma.len());
    assert_eq!(x.len(), beta.len());
    let mut out = vec![T::default(); x.len()];
    let mut x_hat = vec![T::default(); x.len()];
    let inv_std = layer_norm_row(x, gamma, beta, eps, &mut out, &mut x_hat);
    (
        Vector::new(out),
        LayerNormCache {
            x_hat,
            inv_std,
            gamma: gamma.to_vec(),
        },
    )
}

/// Returns `(d_x, d_gamma, d_beta)`.
pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    d_out: &[T],
) -> (Vector<T>, Vector<T>, Vector<T>) {
    let d = d_out.len();
    assert_eq!(d, cache.x_hat.len());
    let mut dx = vec![T::default(); d];
    let mut dgamma = vec![0.0f64; d];
    let mut dbeta = vec![0.0f64; d];
    layer_norm_row_backward(
        &cache.x_hat,
        cache.inv_std,
        &cache.gamma,
        d_out,
        &mut dx,
        &mut dgamma,
        &mut dbeta,
    );
    (
        Vector::new(dx),
        Vector::new(dgamma.into_iter().map(T::from_f64).collect()),
        Vector::new(dbeta.into_iter().map(T::from_f64).collect()),
    )
}

/// Forward kernel over one row; writes the output and normalized input and
/// returns `1 / sqrt(var + eps)`.
pub(crate) fn layer_norm_row<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: f64,
    out: &mut [T],
    x_hat: &mut [T],
) -> f64 {
    let d = x.len() as f64;
    // Shifted by the first element so a constant row has an exact zero spread.
    let shift = x[0].to_f64();
    let mut sum = 0.0f64;
    for v in x {
        sum += v.to_f64() - shift;
    }
    let mean = shift + sum / d;
    let mut sq = 0.0f64;
    for v in x {
        let c = v.to_f64() - mean;
        sq += c * c;
    }
    let var = sq / d;
    let inv_std = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        let xh = (x[i].to_f64() - mean) * inv_std;
        x_hat[i] = T::from_f64(xh);
        out[i] = T::from_f64(gamma[i].to_f64() * xh + beta[i].to_f64());
    }
    inv_std
}

/// Backward kernel over one row. `dgamma` and `dbeta` are accumulated into
/// so callers can sum over a batch in a fixed order.
pub(crate) fn layer_norm_row_backward<T: Real>(
    x_hat: &[T],
    inv_std: f64,
    gamma: &[T],
    d_out: &[T],
    dx: &mut [T],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let d = d_out.len() as f64;
    let mut mean_g = 0.0f64;
    let mut mean_gx = 0.0f64;
    for i in 0..d_out.len() {
        let go = d_out[i].to_f64();
        let xh = x_hat[i].to_f64();
        let g = go * gamma[i].to_f64();
        mean_g += g;
        mean_gx += g * xh;
        dgamma[i] += go * xh;
        dbeta[i] += go;
    }
    mean_g /= d;
    mean_gx /= d;
    for i in 0..d_out.len() {
        let g = d_out[i].to_f64() * gamma[i].to_f64();
        let xh = x_hat[i].to_f64();
        dx[i] = T::from_f64(inv_std * (g - mean_g - xh * mean_gx));
    }
}
