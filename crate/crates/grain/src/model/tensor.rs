//! Minimal dense f64 kernels for the patch-attention regressor. Everything
//! is row-major slices; the ikj matmul ordering keeps the inner loop
//! contiguous so it vectorizes.

/// `out[n x m] = a[n x k] @ b[k x m]`.
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    out.fill(0.0);
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * m..(i + 1) * m];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * bv;
            }
        }
    }
}

/// `out[n x m] = a[n x k] @ b[m x k]^T`.
pub fn matmul_bt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * m..(i + 1) * m];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            // Four accumulators so the reduction vectorizes.
            let mut acc = [0.0f64; 4];
            let chunks = k / 4;
            for c in 0..chunks {
                let a4 = &a_row[c * 4..c * 4 + 4];
                let b4 = &b_row[c * 4..c * 4 + 4];
                acc[0] += a4[0] * b4[0];
                acc[1] += a4[1] * b4[1];
                acc[2] += a4[2] * b4[2];
                acc[3] += a4[3] * b4[3];
            }
            let mut tail = 0.0;
            for kk in chunks * 4..k {
                tail += a_row[kk] * b_row[kk];
            }
            *o = (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
        }
    }
}

/// `out[k x m] += a[n x k]^T @ b[n x m]` (accumulating, for weight grads).
pub fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    debug_assert_eq!(out.len(), k * m);
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * m..(i + 1) * m];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let out_row = &mut out[kk * m..(kk + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * bv;
            }
        }
    }
}

/// `y[n x m] = x[n x m] + row_broadcast(b[m])`.
pub fn add_bias(x: &mut [f64], b: &[f64], m: usize) {
    debug_assert_eq!(x.len() % m, 0);
    for row in x.chunks_exact_mut(m) {
        for (v, &bj) in row.iter_mut().zip(b) {
            *v += bj;
        }
    }
}

/// Accumulate column sums of `dy[n x m]` into `db[m]` (bias grads).
pub fn col_sum_acc(dy: &[f64], db: &mut [f64], m: usize) {
    debug_assert_eq!(dy.len() % m, 0);
    for row in dy.chunks_exact(m) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut [f64], m: usize) {
    for row in x.chunks_exact_mut(m) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Backward through a row-wise softmax: `dz = y .* (dy - rowsum(dy .* y))`.
pub fn softmax_backward(y: &[f64], dy: &[f64], dz: &mut [f64], m: usize) {
    for ((y_row, dy_row), dz_row) in y
        .chunks_exact(m)
        .zip(dy.chunks_exact(m))
        .zip(dz.chunks_exact_mut(m))
    {
        let dot: f64 = y_row.iter().zip(dy_row).map(|(a, b)| a * b).sum();
        for j in 0..m {
            dz_row[j] = y_row[j] * (dy_row[j] - dot);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-approximation GELU, elementwise.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise layer normalization with learned gain and bias.
/// Returns the per-row `1/sqrt(var + eps)` values needed by the backward.
pub fn layer_norm(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    y: &mut [f64],
    x_hat: &mut [f64],
    inv_std: &mut [f64],
    m: usize,
) {
    const EPS: f64 = 1e-5;
    for (i, (row, (y_row, xh_row))) in x
        .chunks_exact(m)
        .zip(y.chunks_exact_mut(m).zip(x_hat.chunks_exact_mut(m)))
        .enumerate()
    {
        let mean = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let inv = 1.0 / (var + EPS).sqrt();
        inv_std[i] = inv;
        for j in 0..m {
            let xh = (row[j] - mean) * inv;
            xh_row[j] = xh;
            y_row[j] = gain[j] * xh + bias[j];
        }
    }
}

/// Backward through `layer_norm`; accumulates gain/bias grads.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    dy: &[f64],
    x_hat: &[f64],
    inv_std: &[f64],
    gain: &[f64],
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    m: usize,
) {
    for (i, (dy_row, (xh_row, dx_row))) in dy
        .chunks_exact(m)
        .zip(x_hat.chunks_exact(m).zip(dx.chunks_exact_mut(m)))
        .enumerate()
    {
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for j in 0..m {
            let dxh = dy_row[j] * gain[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh_row[j];
            dgain[j] += dy_row[j] * xh_row[j];
            dbias[j] += dy_row[j];
        }
        let inv = inv_std[i];
        let inv_m = 1.0 / m as f64;
        for j in 0..m {
            let dxh = dy_row[j] * gain[j];
            dx_row[j] = inv * (dxh - inv_m * sum_dxh - xh_row[j] * inv_m * sum_dxh_xh);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known_product() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_bt_matches_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, -1.0, 1.0, 3.0]; // 2x3, used as b^T: 3x2
        let mut out = [0.0; 4];
        matmul_bt(&a, &b, &mut out, 2, 3, 2);
        // a @ b^T
        assert_eq!(out, [7.0, 10.0, 16.0, 19.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = vec![0.5, 1.5, -0.5, 3.0, 3.0, 3.0];
        softmax_rows(&mut x, 3);
        for row in x.chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((x[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let gain = vec![1.0; 4];
        let bias = vec![0.0; 4];
        let mut y = vec![0.0; 4];
        let mut xh = vec![0.0; 4];
        let mut inv = vec![0.0; 1];
        layer_norm(&x, &gain, &bias, &mut y, &mut xh, &mut inv, 4);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn gelu_matches_derivative_numerically() {
        for &x in &[-2.0, -0.3, 0.0, 0.7, 2.5] {
            let eps = 1e-6;
            let numeric = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((numeric - gelu_derivative(x)).abs() < 1e-8);
        }
    }
}
