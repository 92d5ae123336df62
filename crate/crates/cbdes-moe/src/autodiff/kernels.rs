//! Numeric kernels behind the graph ops.
//!
//! Pure functions over flat row-major buffers. The hot kernels (conv, linear,
//! batched matmul) keep their innermost loops over contiguous memory and
//! split independent output rows across threads via [`par_rows`].

use super::par::par_rows;

/// Geometry of a (possibly grouped) 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    /// Channels per group on the input side.
    pub fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    /// Channels per group on the output side.
    pub fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }
}

/// Valid output-column range `[lo, hi)` for a kernel column offset `dx` so
/// that `ox * stride + dx` stays inside `[0, w)`.
#[inline]
fn ox_range(dx: isize, stride: usize, w: usize, w_out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if dx >= 0 { 0 } else { ((-dx) + s - 1) / s };
    let hi = if dx >= w as isize {
        0
    } else {
        ((w as isize - 1 - dx) / s + 1).min(w_out as isize)
    };
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

pub fn conv2d_forward(
    threads: usize,
    d: &ConvDims,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let plane = d.h_out * d.w_out;
    let cpg = d.cin_per_group();
    let copg = d.cout_per_group();
    par_rows(threads, out, plane, |bc, row| {
        let b = bc / d.cout;
        let co = bc % d.cout;
        row.fill(bias[co]);
        let ci0 = (co / copg) * cpg;
        for cig in 0..cpg {
            let in_plane = &input[((b * d.cin + ci0 + cig) * d.h) * d.w..][..d.h * d.w];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wv = weight[((co * cpg + cig) * d.kh + ky) * d.kw + kx];
                    let dx = kx as isize - d.padding as isize;
                    let (lo, hi) = ox_range(dx, d.stride, d.w, d.w_out);
                    for oy in 0..d.h_out {
                        let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * d.w..][..d.w];
                        let out_row = &mut row[oy * d.w_out..][..d.w_out];
                        if d.stride == 1 {
                            // contiguous: ix = ox + dx
                            let base = dx;
                            for ox in lo..hi {
                                out_row[ox] += wv * in_row[(ox as isize + base) as usize];
                            }
                        } else {
                            for ox in lo..hi {
                                out_row[ox] += wv * in_row[(ox as isize * d.stride as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the convolution input; writes into a zeroed buffer.
pub fn conv2d_backward_input(
    threads: usize,
    d: &ConvDims,
    weight: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
) {
    let plane = d.h * d.w;
    let cpg = d.cin_per_group();
    let copg = d.cout_per_group();
    par_rows(threads, grad_in, plane, |bc, row| {
        let b = bc / d.cin;
        let ci = bc % d.cin;
        let group = ci / cpg;
        let cig = ci - group * cpg;
        for co in group * copg..(group + 1) * copg {
            let g_plane = &grad_out[(b * d.cout + co) * d.h_out * d.w_out..][..d.h_out * d.w_out];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wv = weight[((co * cpg + cig) * d.kh + ky) * d.kw + kx];
                    let dx = kx as isize - d.padding as isize;
                    let (lo, hi) = ox_range(dx, d.stride, d.w, d.w_out);
                    for oy in 0..d.h_out {
                        let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let dst = &mut row[iy as usize * d.w..][..d.w];
                        let g_row = &g_plane[oy * d.w_out..][..d.w_out];
                        for ox in lo..hi {
                            dst[(ox as isize * d.stride as isize + dx) as usize] += wv * g_row[ox];
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the convolution weight; writes into a zeroed buffer.
pub fn conv2d_backward_weight(
    threads: usize,
    d: &ConvDims,
    input: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
) {
    let cpg = d.cin_per_group();
    let copg = d.cout_per_group();
    let w_block = cpg * d.kh * d.kw;
    par_rows(threads, grad_w, w_block, |co, row| {
        let ci0 = (co / copg) * cpg;
        for b in 0..d.batch {
            let g_plane = &grad_out[(b * d.cout + co) * d.h_out * d.w_out..][..d.h_out * d.w_out];
            for cig in 0..cpg {
                let in_plane = &input[(b * d.cin + ci0 + cig) * d.h * d.w..][..d.h * d.w];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let dx = kx as isize - d.padding as isize;
                        let (lo, hi) = ox_range(dx, d.stride, d.w, d.w_out);
                        let mut acc = 0.0;
                        for oy in 0..d.h_out {
                            let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let in_row = &in_plane[iy as usize * d.w..][..d.w];
                            let g_row = &g_plane[oy * d.w_out..][..d.w_out];
                            if d.stride == 1 {
                                for ox in lo..hi {
                                    acc += g_row[ox] * in_row[(ox as isize + dx) as usize];
                                }
                            } else {
                                for ox in lo..hi {
                                    acc += g_row[ox] * in_row[(ox as isize * d.stride as isize + dx) as usize];
                                }
                            }
                        }
                        row[(cig * d.kh + ky) * d.kw + kx] += acc;
                    }
                }
            }
        }
    });
}

pub fn conv2d_backward_bias(d: &ConvDims, grad_out: &[f64], grad_b: &mut [f64]) {
    let plane = d.h_out * d.w_out;
    for b in 0..d.batch {
        for co in 0..d.cout {
            let g_plane = &grad_out[(b * d.cout + co) * plane..][..plane];
            grad_b[co] += g_plane.iter().sum::<f64>();
        }
    }
}

// ── Linear ──────────────────────────────────────────────────────────────────

/// Big weight matrices applied to few rows take a weight-streaming path: the
/// weight is read once while the activations stay cached.
fn tall_case(rows: usize, d_in: usize, d_out: usize) -> bool {
    rows <= 64 && d_in * d_out >= 262_144
}

/// `out[r, o] = dot(input[r, :], weight[o, :]) + bias[o]` for `rows` rows.
pub fn linear_forward(
    threads: usize,
    rows: usize,
    d_in: usize,
    d_out: usize,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), rows * d_out);
    if tall_case(rows, d_in, d_out) {
        // compute transposed [d_out, rows], then scatter back
        let mut t = vec![0.0; d_out * rows];
        par_rows(threads, &mut t, rows, |o, trow| {
            let w = &weight[o * d_in..][..d_in];
            for (r, dst) in trow.iter_mut().enumerate() {
                let x = &input[r * d_in..][..d_in];
                let mut acc = bias[o];
                for i in 0..d_in {
                    acc += x[i] * w[i];
                }
                *dst = acc;
            }
        });
        for o in 0..d_out {
            for r in 0..rows {
                out[r * d_out + o] = t[o * rows + r];
            }
        }
        return;
    }
    par_rows(threads, out, d_out, |r, row| {
        let x = &input[r * d_in..][..d_in];
        for (o, dst) in row.iter_mut().enumerate() {
            let w = &weight[o * d_in..][..d_in];
            let mut acc = bias[o];
            for i in 0..d_in {
                acc += x[i] * w[i];
            }
            *dst = acc;
        }
    });
}

pub fn linear_backward_input(
    threads: usize,
    rows: usize,
    d_in: usize,
    d_out: usize,
    weight: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
) {
    debug_assert_eq!(grad_in.len(), rows * d_in);
    if tall_case(rows, d_in, d_out) {
        // stream the weight once; the small grad_in rows stay cached
        for o in 0..d_out {
            let w = &weight[o * d_in..][..d_in];
            for r in 0..rows {
                let gv = grad_out[r * d_out + o];
                let dst = &mut grad_in[r * d_in..][..d_in];
                for i in 0..d_in {
                    dst[i] += gv * w[i];
                }
            }
        }
        return;
    }
    par_rows(threads, grad_in, d_in, |r, row| {
        let g = &grad_out[r * d_out..][..d_out];
        for o in 0..d_out {
            let gv = g[o];
            let w = &weight[o * d_in..][..d_in];
            for i in 0..d_in {
                row[i] += gv * w[i];
            }
        }
    });
}

pub fn linear_backward_weight(
    threads: usize,
    rows: usize,
    d_in: usize,
    d_out: usize,
    input: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
) {
    debug_assert_eq!(grad_w.len(), d_out * d_in);
    par_rows(threads, grad_w, d_in, |o, wrow| {
        for r in 0..rows {
            let gv = grad_out[r * d_out + o];
            let x = &input[r * d_in..][..d_in];
            for i in 0..d_in {
                wrow[i] += gv * x[i];
            }
        }
    });
}

pub fn linear_backward_bias(rows: usize, d_out: usize, grad_out: &[f64], grad_b: &mut [f64]) {
    for r in 0..rows {
        let g = &grad_out[r * d_out..][..d_out];
        for o in 0..d_out {
            grad_b[o] += g[o];
        }
    }
}

// ── Batched matmul ──────────────────────────────────────────────────────────

/// `out[g] = a[g] @ b[g]` with `a: [G,M,K]` and `b: [G,K,N]`, or
/// `b: [G,N,K]` when `transpose_b` is set.
pub fn bmm_forward(
    threads: usize,
    groups: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), groups * m * n);
    par_rows(threads, out, n, |gm, row| {
        let g = gm / m;
        let mi = gm % m;
        let a_row = &a[(g * m + mi) * k..][..k];
        if transpose_b {
            let b_g = &b[g * n * k..][..n * k];
            for (ni, dst) in row.iter_mut().enumerate() {
                let b_row = &b_g[ni * k..][..k];
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a_row[kk] * b_row[kk];
                }
                *dst = acc;
            }
        } else {
            let b_g = &b[g * k * n..][..k * n];
            row.fill(0.0);
            for kk in 0..k {
                let av = a_row[kk];
                let b_row = &b_g[kk * n..][..n];
                for ni in 0..n {
                    row[ni] += av * b_row[ni];
                }
            }
        }
    });
}

pub fn bmm_backward_a(
    threads: usize,
    groups: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
    b: &[f64],
    grad_out: &[f64],
    grad_a: &mut [f64],
) {
    debug_assert_eq!(grad_a.len(), groups * m * k);
    par_rows(threads, grad_a, k, |gm, row| {
        let g = gm / m;
        let mi = gm % m;
        let g_row = &grad_out[(g * m + mi) * n..][..n];
        if transpose_b {
            // dA[m,:] += sum_n g[m,n] * B[n,:]
            let b_g = &b[g * n * k..][..n * k];
            for ni in 0..n {
                let gv = g_row[ni];
                let b_row = &b_g[ni * k..][..k];
                for kk in 0..k {
                    row[kk] += gv * b_row[kk];
                }
            }
        } else {
            // dA[m,kk] += dot(g[m,:], B[kk,:])
            let b_g = &b[g * k * n..][..k * n];
            for kk in 0..k {
                let b_row = &b_g[kk * n..][..n];
                let mut acc = 0.0;
                for ni in 0..n {
                    acc += g_row[ni] * b_row[ni];
                }
                row[kk] += acc;
            }
        }
    });
}

pub fn bmm_backward_b(
    threads: usize,
    groups: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
    a: &[f64],
    grad_out: &[f64],
    grad_b: &mut [f64],
) {
    debug_assert_eq!(grad_b.len(), groups * k * n);
    if transpose_b {
        // dB[n,:] += sum_m g[m,n] * A[m,:]
        par_rows(threads, grad_b, k, |gn, row| {
            let g = gn / n;
            let ni = gn % n;
            let a_g = &a[g * m * k..][..m * k];
            for mi in 0..m {
                let gv = grad_out[(g * m + mi) * n + ni];
                let a_row = &a_g[mi * k..][..k];
                for kk in 0..k {
                    row[kk] += gv * a_row[kk];
                }
            }
        });
    } else {
        // dB[kk,:] += sum_m A[m,kk] * g[m,:]
        par_rows(threads, grad_b, n, |gk, row| {
            let g = gk / k;
            let kk = gk % k;
            let a_g = &a[g * m * k..][..m * k];
            for mi in 0..m {
                let av = a_g[mi * k + kk];
                let g_row = &grad_out[(g * m + mi) * n..][..n];
                for ni in 0..n {
                    row[ni] += av * g_row[ni];
                }
            }
        });
    }
}

// ── Row-wise softmax / layer norm ───────────────────────────────────────────

/// Numerically stabilized softmax over each contiguous row of length `k`.
pub fn softmax_rows(k: usize, input: &[f64], out: &mut [f64]) {
    for (src, dst) in input.chunks(k).zip(out.chunks_mut(k)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src.iter()) {
            let e = (s - max).exp();
            *d = e;
            sum += e;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
}

/// Softmax Jacobian-vector product per row: `dx = s * (g - <g, s>)`.
pub fn softmax_backward_rows(k: usize, softmax_out: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
    for ((s, g), dx) in softmax_out
        .chunks(k)
        .zip(grad_out.chunks(k))
        .zip(grad_in.chunks_mut(k))
    {
        let dot: f64 = s.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for i in 0..k {
            dx[i] += s[i] * (g[i] - dot);
        }
    }
}

/// Layer norm over rows of length `d`; returns per-row (mean, inv_std).
pub fn layer_norm_forward(
    d: usize,
    eps: f64,
    input: &[f64],
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let rows = input.len() / d;
    let mut means = Vec::with_capacity(rows);
    let mut inv_stds = Vec::with_capacity(rows);
    for (src, dst) in input.chunks(d).zip(out.chunks_mut(d)) {
        let mean = src.iter().sum::<f64>() / d as f64;
        let var = src.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            dst[i] = (src[i] - mean) * inv_std * gamma[i] + beta[i];
        }
        means.push(mean);
        inv_stds.push(inv_std);
    }
    (means, inv_stds)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    d: usize,
    input: &[f64],
    gamma: &[f64],
    means: &[f64],
    inv_stds: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) {
    let df = d as f64;
    for (r, (src, g)) in input.chunks(d).zip(grad_out.chunks(d)).enumerate() {
        let mean = means[r];
        let inv_std = inv_stds[r];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for i in 0..d {
            let xhat = (src[i] - mean) * inv_std;
            let dxhat = g[i] * gamma[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            grad_gamma[i] += g[i] * xhat;
            grad_beta[i] += g[i];
        }
        let dst = &mut grad_in[r * d..][..d];
        for i in 0..d {
            let xhat = (src[i] - mean) * inv_std;
            let dxhat = g[i] * gamma[i];
            dst[i] += inv_std * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / df);
        }
    }
}

// ── Per-channel batch norm ──────────────────────────────────────────────────

/// Per-channel mean and biased variance over the (batch, spatial) axes of a
/// `[B, C, H, W]` buffer.
pub fn batch_moments(batch: usize, channels: usize, plane: usize, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * plane) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            let p = &input[(b * channels + c) * plane..][..plane];
            mean[c] += p.iter().sum::<f64>();
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    for b in 0..batch {
        for c in 0..channels {
            let p = &input[(b * channels + c) * plane..][..plane];
            let m = mean[c];
            var[c] += p.iter().map(|&x| (x - m) * (x - m)).sum::<f64>();
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    (mean, var)
}

/// Normalize with given per-channel statistics and apply the affine pair.
#[allow(clippy::too_many_arguments)]
pub fn channel_norm_apply(
    batch: usize,
    channels: usize,
    plane: usize,
    eps: f64,
    input: &[f64],
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
) {
    for b in 0..batch {
        for c in 0..channels {
            let inv_std = 1.0 / (var[c] + eps).sqrt();
            let (m, g, be) = (mean[c], gamma[c], beta[c]);
            let src = &input[(b * channels + c) * plane..][..plane];
            let dst = &mut out[(b * channels + c) * plane..][..plane];
            for i in 0..plane {
                dst[i] = (src[i] - m) * inv_std * g + be;
            }
        }
    }
}

/// Backward through training-mode batch norm (statistics depend on input).
#[allow(clippy::too_many_arguments)]
pub fn channel_norm_backward_train(
    batch: usize,
    channels: usize,
    plane: usize,
    eps: f64,
    input: &[f64],
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) {
    let n = (batch * plane) as f64;
    for c in 0..channels {
        let m = mean[c];
        let inv_std = 1.0 / (var[c] + eps).sqrt();
        let mut sum_g = 0.0;
        let mut sum_g_xhat = 0.0;
        for b in 0..batch {
            let base = (b * channels + c) * plane;
            let src = &input[base..][..plane];
            let g = &grad_out[base..][..plane];
            for i in 0..plane {
                let xhat = (src[i] - m) * inv_std;
                sum_g += g[i];
                sum_g_xhat += g[i] * xhat;
            }
        }
        grad_beta[c] += sum_g;
        grad_gamma[c] += sum_g_xhat;
        let k = gamma[c] * inv_std;
        for b in 0..batch {
            let base = (b * channels + c) * plane;
            let src = &input[base..][..plane];
            let g = &grad_out[base..][..plane];
            let dst = &mut grad_in[base..][..plane];
            for i in 0..plane {
                let xhat = (src[i] - m) * inv_std;
                dst[i] += k * (g[i] - (sum_g + xhat * sum_g_xhat) / n);
            }
        }
    }
}

/// Backward through eval-mode batch norm (statistics are constants).
#[allow(clippy::too_many_arguments)]
pub fn channel_norm_backward_eval(
    batch: usize,
    channels: usize,
    plane: usize,
    eps: f64,
    input: &[f64],
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) {
    for c in 0..channels {
        let inv_std = 1.0 / (var[c] + eps).sqrt();
        let m = mean[c];
        let k = gamma[c] * inv_std;
        for b in 0..batch {
            let base = (b * channels + c) * plane;
            let src = &input[base..][..plane];
            let g = &grad_out[base..][..plane];
            let dst = &mut grad_in[base..][..plane];
            for i in 0..plane {
                dst[i] += k * g[i];
                grad_gamma[c] += g[i] * (src[i] - m) * inv_std;
                grad_beta[c] += g[i];
            }
        }
    }
}
