//! Dense kernels on row-major `f32` buffers.

/// `C = alpha * op(A) * op(B) + beta * C` with explicit strides.
///
/// `a` is `m x k` with strides `(rsa, csa)`, `b` is `k x n`, `c` is `m x n`.
/// Transposes are expressed by swapping strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    // SAFETY: every index touched by sgemm is bounded by the asserts above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `y[rows, n] = x[rows, k] · w[k, n] + bias`.
pub(crate) fn linear(x: &[f32], w: &[f32], bias: &[f32], rows: usize, k: usize, n: usize, y: &mut [f32]) {
    for row in y.chunks_exact_mut(n).take(rows) {
        row.copy_from_slice(bias);
    }
    gemm(rows, k, n, 1.0, x, (k, 1), w, (n, 1), 1.0, y, (n, 1));
}

/// Accumulates weight and bias gradients and writes `dx = dy · wᵀ`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    rows: usize,
    k: usize,
    n: usize,
    dw: &mut [f32],
    db: &mut [f32],
    dx: Option<&mut [f32]>,
) {
    gemm(k, rows, n, 1.0, x, (1, k), dy, (n, 1), 1.0, dw, (n, 1));
    for row in dy.chunks_exact(n).take(rows) {
        for (g, d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
    if let Some(dx) = dx {
        gemm(rows, n, k, 1.0, dy, (n, 1), w, (1, n), 0.0, dx, (k, 1));
    }
}

pub(crate) const LN_EPS: f32 = 1e-5;

/// Row-wise layer norm. Stores the normalized input and reciprocal std.
pub(crate) fn layer_norm(
    x: &[f32],
    gain: &[f32],
    bias: &[f32],
    d: usize,
    y: &mut [f32],
    xhat: &mut [f32],
    rstd: &mut [f32],
) {
    for (r, ((xr, yr), hr)) in x
        .chunks_exact(d)
        .zip(y.chunks_exact_mut(d))
        .zip(xhat.chunks_exact_mut(d))
        .enumerate()
    {
        let mean = xr.iter().sum::<f32>() / d as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            hr[i] = h;
            yr[i] = h * gain[i] + bias[i];
        }
    }
}

/// Adds the input gradient of a layer norm to `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    dy: &[f32],
    xhat: &[f32],
    rstd: &[f32],
    gain: &[f32],
    d: usize,
    dgain: &mut [f32],
    dbias: &mut [f32],
    dx: &mut [f32],
) {
    for (r, ((dyr, hr), dxr)) in dy
        .chunks_exact(d)
        .zip(xhat.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let mut mean_dh = 0.0f32;
        let mut mean_dh_h = 0.0f32;
        for i in 0..d {
            dgain[i] += dyr[i] * hr[i];
            dbias[i] += dyr[i];
            let dh = dyr[i] * gain[i];
            mean_dh += dh;
            mean_dh_h += dh * hr[i];
        }
        mean_dh /= d as f32;
        mean_dh_h /= d as f32;
        let rs = rstd[r];
        for i in 0..d {
            let dh = dyr[i] * gain[i];
            dxr[i] += rs * (dh - mean_dh - hr[i] * mean_dh_h);
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Numerically stable log-softmax cross-entropy and its gradient w.r.t. logits.
/// The loss is accumulated in `f64`.
pub(crate) fn cross_entropy(logits: &[f32], label: usize, dlogits: &mut [f32], scale: f32) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = logits.iter().map(|&z| (z as f64 - max).exp()).sum();
    let log_z = max + sum.ln();
    for (g, &z) in dlogits.iter_mut().zip(logits) {
        *g = (((z as f64 - log_z).exp()) as f32) * scale;
    }
    dlogits[label] -= scale;
    log_z - logits[label] as f64
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.1 - 0.3).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32).sin()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &a, (k, 1), &b, (n, 1), 0.0, &mut c, (n, 1));
        for i in 0..m {
            for j in 0..n {
                let expect: f32 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - expect).abs() < 1e-5);
            }
        }
        // Aᵀ via strides: (k x m)ᵀ
        let mut ct = vec![0.0; k * n];
        gemm(k, m, n, 1.0, &a, (1, k), &c, (n, 1), 0.0, &mut ct, (n, 1));
        let expect: f32 = (0..m).map(|p| a[p * k] * c[p * n]).sum();
        assert!((ct[0] - expect).abs() < 1e-4);
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f32, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-3;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-3, "{x}: {fd} vs {}", gelu_grad(x));
        }
    }

    #[test]
    fn cross_entropy_uniform() {
        let logits = vec![0.0f32; 108];
        let mut g = vec![0.0; 108];
        let loss = cross_entropy(&logits, 3, &mut g, 1.0);
        assert!((loss - (108f64).ln()).abs() < 1e-12);
        assert!((g.iter().sum::<f32>()).abs() < 1e-5);
    }
}
