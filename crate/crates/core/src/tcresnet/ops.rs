//! Layer primitives: forward and backward passes over f64 batches.
//!
//! Batches are `(N, C, L)` arrays. Backward functions take the
//! activations cached during the forward pass and the upstream gradient
//! and return input and parameter gradients. Everything accumulates in
//! f64 so the finite-difference checks hold tightly.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};

/// 1D convolution, no bias: weight is `(out_ch, in_ch, k)`, input
/// `(N, in_ch, L)`, output `(N, out_ch, L_out)` with
/// `L_out = (L + 2*padding - k) / stride + 1`.
pub fn conv1d_forward(
    x: ArrayView3<'_, f64>,
    weight: ArrayView3<'_, f64>,
    bias: Option<ArrayView1<'_, f64>>,
    stride: usize,
    padding: usize,
) -> Array3<f64> {
    let (n, in_ch, len) = x.dim();
    let (out_ch, w_in, k) = weight.dim();
    assert_eq!(in_ch, w_in, "channel mismatch: input {in_ch}, weight {w_in}");
    let out_len = (len + 2 * padding - k) / stride + 1;
    let mut y = Array3::<f64>::zeros((n, out_ch, out_len));

    let xs = x.as_slice().expect("contiguous input");
    let ws = weight.as_slice().expect("contiguous weight");
    let ys = y.as_slice_mut().unwrap();
    for b in 0..n {
        for co in 0..out_ch {
            let b_off = bias.map(|bv| bv[co]).unwrap_or(0.0);
            for t in 0..out_len {
                let start = (t * stride) as isize - padding as isize;
                let mut acc = 0.0;
                for ci in 0..in_ch {
                    let xrow = &xs[(b * in_ch + ci) * len..(b * in_ch + ci + 1) * len];
                    let wrow = &ws[(co * in_ch + ci) * k..(co * in_ch + ci + 1) * k];
                    for (j, &w) in wrow.iter().enumerate() {
                        let idx = start + j as isize;
                        if idx >= 0 && (idx as usize) < len {
                            acc += w * xrow[idx as usize];
                        }
                    }
                }
                ys[(b * out_ch + co) * out_len + t] = acc + b_off;
            }
        }
    }
    y
}

/// Gradients of [`conv1d_forward`] w.r.t. input, weight and bias.
pub fn conv1d_backward(
    x: ArrayView3<'_, f64>,
    weight: ArrayView3<'_, f64>,
    dy: ArrayView3<'_, f64>,
    stride: usize,
    padding: usize,
) -> (Array3<f64>, Array3<f64>, Array1<f64>) {
    let (n, in_ch, len) = x.dim();
    let (out_ch, _, k) = weight.dim();
    let (_, _, out_len) = dy.dim();
    let mut dx = Array3::<f64>::zeros((n, in_ch, len));
    let mut dw = Array3::<f64>::zeros((out_ch, in_ch, k));
    let mut db = Array1::<f64>::zeros(out_ch);

    let xs = x.as_slice().unwrap();
    let ws = weight.as_slice().unwrap();
    let dys = dy.as_slice().unwrap();
    let dxs = dx.as_slice_mut().unwrap();
    let dws = dw.as_slice_mut().unwrap();
    for b in 0..n {
        for co in 0..out_ch {
            let dyrow = &dys[(b * out_ch + co) * out_len..(b * out_ch + co + 1) * out_len];
            db[co] += dyrow.iter().sum::<f64>();
            for t in 0..out_len {
                let g = dyrow[t];
                if g == 0.0 {
                    continue;
                }
                let start = (t * stride) as isize - padding as isize;
                for ci in 0..in_ch {
                    let x_off = (b * in_ch + ci) * len;
                    let w_off = (co * in_ch + ci) * k;
                    for j in 0..k {
                        let idx = start + j as isize;
                        if idx >= 0 && (idx as usize) < len {
                            dxs[x_off + idx as usize] += g * ws[w_off + j];
                            dws[w_off + j] += g * xs[x_off + idx as usize];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Values cached by the batch-norm forward pass for its backward pass.
pub struct BnCache {
    pub x_hat: Array3<f64>,
    pub inv_std: Array1<f64>,
    /// Per-channel element count (N * L).
    pub count: usize,
}

/// Training-mode batch norm over `(N, C, L)`: normalize per channel with
/// batch statistics. Returns output, cache, and the biased batch
/// (mean, var) for the running-statistics update.
pub fn batchnorm_forward_train(
    x: ArrayView3<'_, f64>,
    gamma: ArrayView1<'_, f64>,
    beta: ArrayView1<'_, f64>,
    eps: f64,
) -> (Array3<f64>, BnCache, Array1<f64>, Array1<f64>) {
    let (n, c, l) = x.dim();
    let count = n * l;
    let mut mean = Array1::<f64>::zeros(c);
    let mut var = Array1::<f64>::zeros(c);
    for ch in 0..c {
        let mut sum = 0.0;
        for b in 0..n {
            for t in 0..l {
                sum += x[(b, ch, t)];
            }
        }
        mean[ch] = sum / count as f64;
        let mut sq = 0.0;
        for b in 0..n {
            for t in 0..l {
                let d = x[(b, ch, t)] - mean[ch];
                sq += d * d;
            }
        }
        var[ch] = sq / count as f64;
    }
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let mut x_hat = x.to_owned();
    let mut y = Array3::<f64>::zeros((n, c, l));
    for ch in 0..c {
        for b in 0..n {
            for t in 0..l {
                let h = (x[(b, ch, t)] - mean[ch]) * inv_std[ch];
                x_hat[(b, ch, t)] = h;
                y[(b, ch, t)] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, BnCache { x_hat, inv_std, count }, mean, var)
}

/// Eval-mode batch norm: a per-channel affine map from running stats.
pub fn batchnorm_forward_eval(
    x: ArrayView3<'_, f64>,
    gamma: ArrayView1<'_, f64>,
    beta: ArrayView1<'_, f64>,
    running_mean: ArrayView1<'_, f64>,
    running_var: ArrayView1<'_, f64>,
    eps: f64,
) -> Array3<f64> {
    let (n, c, l) = x.dim();
    let mut y = Array3::<f64>::zeros((n, c, l));
    for ch in 0..c {
        let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
        let shift = beta[ch] - running_mean[ch] * scale;
        for b in 0..n {
            for t in 0..l {
                y[(b, ch, t)] = x[(b, ch, t)] * scale + shift;
            }
        }
    }
    y
}

/// Backward through training-mode batch norm.
pub fn batchnorm_backward(
    cache: &BnCache,
    gamma: ArrayView1<'_, f64>,
    dy: ArrayView3<'_, f64>,
) -> (Array3<f64>, Array1<f64>, Array1<f64>) {
    let (n, c, l) = dy.dim();
    let m = cache.count as f64;
    let mut dgamma = Array1::<f64>::zeros(c);
    let mut dbeta = Array1::<f64>::zeros(c);
    let mut dx = Array3::<f64>::zeros((n, c, l));
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            for t in 0..l {
                sum_dy += dy[(b, ch, t)];
                sum_dy_xhat += dy[(b, ch, t)] * cache.x_hat[(b, ch, t)];
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let k = gamma[ch] * cache.inv_std[ch] / m;
        for b in 0..n {
            for t in 0..l {
                dx[(b, ch, t)] = k
                    * (m * dy[(b, ch, t)] - sum_dy - cache.x_hat[(b, ch, t)] * sum_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode batch-norm backward (pure affine: no batch-stat terms).
pub fn batchnorm_backward_eval(
    x: ArrayView3<'_, f64>,
    gamma: ArrayView1<'_, f64>,
    running_mean: ArrayView1<'_, f64>,
    running_var: ArrayView1<'_, f64>,
    eps: f64,
    dy: ArrayView3<'_, f64>,
) -> (Array3<f64>, Array1<f64>, Array1<f64>) {
    let (n, c, l) = dy.dim();
    let mut dgamma = Array1::<f64>::zeros(c);
    let mut dbeta = Array1::<f64>::zeros(c);
    let mut dx = Array3::<f64>::zeros((n, c, l));
    for ch in 0..c {
        let inv_std = 1.0 / (running_var[ch] + eps).sqrt();
        for b in 0..n {
            for t in 0..l {
                let g = dy[(b, ch, t)];
                dgamma[ch] += g * (x[(b, ch, t)] - running_mean[ch]) * inv_std;
                dbeta[ch] += g;
                dx[(b, ch, t)] = g * gamma[ch] * inv_std;
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn hardtanh_forward(x: ArrayView3<'_, f64>) -> Array3<f64> {
    x.mapv(|v| v.clamp(-1.0, 1.0))
}

/// Pass-through inside (-1, 1), zero outside. The boundary itself keeps
/// the gradient, matching the subgradient convention used by autograd
/// frameworks.
pub fn hardtanh_backward(x: ArrayView3<'_, f64>, dy: ArrayView3<'_, f64>) -> Array3<f64> {
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(&x).for_each(|g, &v| {
        if !(-1.0..=1.0).contains(&v) {
            *g = 0.0;
        }
    });
    dx
}

pub fn relu_forward(x: ArrayView3<'_, f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: ArrayView3<'_, f64>, dy: ArrayView3<'_, f64>) -> Array3<f64> {
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(&x).for_each(|g, &v| {
        if v < 0.0 {
            *g = 0.0;
        }
    });
    dx
}

/// Global average pool over the time axis: `(N, C, L) -> (N, C)`.
pub fn global_avg_pool_forward(x: ArrayView3<'_, f64>) -> Array2<f64> {
    x.mean_axis(Axis(2)).unwrap()
}

pub fn global_avg_pool_backward(dy: ArrayView2<'_, f64>, len: usize) -> Array3<f64> {
    let (n, c) = dy.dim();
    let mut dx = Array3::<f64>::zeros((n, c, len));
    for b in 0..n {
        for ch in 0..c {
            let g = dy[(b, ch)] / len as f64;
            for t in 0..len {
                dx[(b, ch, t)] = g;
            }
        }
    }
    dx
}

/// `(N, in) -> (N, out)`; weight is `(out, in)`.
pub fn linear_forward(
    x: ArrayView2<'_, f64>,
    weight: ArrayView2<'_, f64>,
    bias: Option<ArrayView1<'_, f64>>,
) -> Array2<f64> {
    let mut y = x.dot(&weight.t());
    if let Some(b) = bias {
        y += &b;
    }
    y
}

pub fn linear_backward(
    x: ArrayView2<'_, f64>,
    weight: ArrayView2<'_, f64>,
    dy: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(&weight);
    let dw = dy.t().dot(&x);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}
