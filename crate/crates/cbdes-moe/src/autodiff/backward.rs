//! Reverse pass: walks the tape once, routing each node's output gradient to
//! the inputs that track gradients.

use super::kernels;
use super::{Graph, Op};

fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'a mut [f64] {
    grads[idx]
        .get_or_insert_with(|| vec![0.0; len])
        .as_mut_slice()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contribution: &[f64]) {
    let buf = grad_buf(grads, idx, contribution.len());
    for (dst, src) in buf.iter_mut().zip(contribution.iter()) {
        *dst += src;
    }
}

impl Graph {
    pub(crate) fn propagate(&mut self, start: usize) {
        let threads = self.threads;
        let (nodes, grads) = (&self.nodes, &mut self.grads);
        for i in (0..=start).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            match &nodes[i].op {
                Op::Leaf => {
                    // keep leaf gradients readable / collectable
                    grads[i] = Some(gout);
                }

                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    dims,
                } => {
                    if nodes[input.0].needs_grad {
                        let buf = grad_buf(grads, input.0, nodes[input.0].data.numel());
                        kernels::conv2d_backward_input(
                            threads,
                            dims,
                            nodes[weight.0].data.data(),
                            &gout,
                            buf,
                        );
                    }
                    if nodes[weight.0].needs_grad {
                        let buf = grad_buf(grads, weight.0, nodes[weight.0].data.numel());
                        kernels::conv2d_backward_weight(
                            threads,
                            dims,
                            nodes[input.0].data.data(),
                            &gout,
                            buf,
                        );
                    }
                    if nodes[bias.0].needs_grad {
                        let buf = grad_buf(grads, bias.0, nodes[bias.0].data.numel());
                        kernels::conv2d_backward_bias(dims, &gout, buf);
                    }
                }

                Op::MaxPool2x2 { input, argmax } => {
                    if nodes[input.0].needs_grad {
                        let buf = grad_buf(grads, input.0, nodes[input.0].data.numel());
                        for (g, &src) in gout.iter().zip(argmax.iter()) {
                            buf[src as usize] += g;
                        }
                    }
                }

                Op::ChannelNorm {
                    input,
                    gamma,
                    beta,
                    mean,
                    var,
                    training,
                } => {
                    let shape = nodes[input.0].shape();
                    let (b, c) = (shape[0], shape[1]);
                    let plane = shape[2] * shape[3];
                    let mut d_in = vec![0.0; nodes[input.0].data.numel()];
                    let mut d_gamma = vec![0.0; c];
                    let mut d_beta = vec![0.0; c];
                    let backward = if *training {
                        kernels::channel_norm_backward_train
                    } else {
                        kernels::channel_norm_backward_eval
                    };
                    backward(
                        b,
                        c,
                        plane,
                        1e-5,
                        nodes[input.0].data.data(),
                        mean,
                        var,
                        nodes[gamma.0].data.data(),
                        &gout,
                        &mut d_in,
                        &mut d_gamma,
                        &mut d_beta,
                    );
                    if nodes[input.0].needs_grad {
                        accumulate(grads, input.0, &d_in);
                    }
                    if nodes[gamma.0].needs_grad {
                        accumulate(grads, gamma.0, &d_gamma);
                    }
                    if nodes[beta.0].needs_grad {
                        accumulate(grads, beta.0, &d_beta);
                    }
                }

                Op::Prelu {
                    input,
                    alpha,
                    channels,
                    plane,
                } => {
                    let x = nodes[input.0].data.data();
                    let a = nodes[alpha.0].data.data();
                    let scalar_alpha = a.len() == 1;
                    let batch = x.len() / (channels * plane);
                    if nodes[input.0].needs_grad {
                        let buf = grad_buf(grads, input.0, x.len());
                        for bi in 0..batch {
                            for c in 0..*channels {
                                let av = if scalar_alpha { a[0] } else { a[c] };
                                let base = (bi * channels + c) * plane;
                                for k in 0..*plane {
                                    let idx = base + k;
                                    buf[idx] += gout[idx] * if x[idx] >= 0.0 { 1.0 } else { av };
                                }
                            }
                        }
                    }
                    if nodes[alpha.0].needs_grad {
                        let buf = grad_buf(grads, alpha.0, a.len());
                        for bi in 0..batch {
                            for c in 0..*channels {
                                let base = (bi * channels + c) * plane;
                                let mut acc = 0.0;
                                for k in 0..*plane {
                                    let idx = base + k;
                                    if x[idx] < 0.0 {
                                        acc += gout[idx] * x[idx];
                                    }
                                }
                                buf[if scalar_alpha { 0 } else { c }] += acc;
                            }
                        }
                    }
                }

                Op::Linear {
                    input,
                    weight,
                    bias,
                    rows,
                    d_in,
                    d_out,
                } => {
                    if nodes[input.0].needs_grad {
                        let buf = grad_buf(grads, input.0, nodes[input.0].data.numel());
                        kernels::linear_backward_input(
                            threads,
                            *rows,
                            *d_in,
                            *d_out,
                            nodes[weight.0].data.data(),
                            &gout,
                            buf,
                        );
                    }
                    if nodes[weight.0].needs_grad {
                        let buf = grad_buf(grads, weight.0, nodes[weight.0].data.numel());
                        kernels::linear_backward_weight(
                            threads,
                            *rows,
                            *d_in,
                            *d_out,
                            nodes[input.0].data.data(),
                            &gout,
                            buf,
                        );
                    }
                    if nodes[bias.0].needs_grad {
                        let buf = grad_buf(grads, bias.0, *d_out);
                        kernels::linear_backward_bias(*rows, *d_out, &gout, buf);
                    }
                }

                Op::LayerNorm {
                    input,
                    gamma,
                    beta,
                    means,
                    inv_stds,
                } => {
                    let d = *nodes[input.0].shape().last().unwrap();
                    let mut d_in = vec![0.0; nodes[input.0].data.numel()];
                    let mut d_gamma = vec![0.0; d];
                    let mut d_beta = vec![0.0; d];
                    kernels::layer_norm_backward(
                        d,
                        nodes[input.0].data.data(),
                        nodes[gamma.0].data.data(),
                        means,
                        inv_stds,
                        &gout,
                        &mut d_in,
                        &mut d_gamma,
                        &mut d_beta,
                    );
                    if nodes[input.0].needs_grad {
                        accumulate(grads, input.0, &d_in);
                    }
                    if nodes[gamma.0].needs_grad {
                        accumulate(grads, gamma.0, &d_gamma);
                    }
                    if nodes[beta.0].needs_grad {
                        accumulate(grads, beta.0, &d_beta);
                    }
                }

                Op::Softmax { input, k } => {
                    if nodes[input.0].needs_grad {
                        let out = nodes[i].data.data();
                        let buf = grad_buf(grads, input.0, out.len());
                        kernels::softmax_backward_rows(*k, out, &gout, buf);
                    }
                }

                Op::MeanTokens { input } => {
                    if nodes[input.0].needs_grad {
                        let shape = nodes[input.0].shape();
                        let (b, n, d) = (shape[0], shape[1], shape[2]);
                        let buf = grad_buf(grads, input.0, b * n * d);
                        for bi in 0..b {
                            let g = &gout[bi * d..][..d];
                            for ni in 0..n {
                                let dst = &mut buf[(bi * n + ni) * d..][..d];
                                for di in 0..d {
                                    dst[di] += g[di] / n as f64;
                                }
                            }
                        }
                    }
                }

                Op::Reshape { input } => {
                    if nodes[input.0].needs_grad {
                        accumulate(grads, input.0, &gout);
                    }
                }

                Op::Permute { input, axes } => {
                    if nodes[input.0].needs_grad {
                        let out_shape = nodes[i].shape();
                        let mut inverse = vec![0usize; axes.len()];
                        for (d, &a) in axes.iter().enumerate() {
                            inverse[a] = d;
                        }
                        let in_shape = nodes[input.0].shape();
                        let permuted = super::ops::permute_copy(&gout, out_shape, &inverse, in_shape);
                        accumulate(grads, input.0, &permuted);
                    }
                }

                Op::Bmm {
                    a,
                    b,
                    m,
                    k,
                    n,
                    transpose_b,
                } => {
                    if nodes[a.0].needs_grad {
                        let groups = nodes[a.0].shape()[0];
                        let buf = grad_buf(grads, a.0, nodes[a.0].data.numel());
                        kernels::bmm_backward_a(
                            threads,
                            groups,
                            *m,
                            *k,
                            *n,
                            *transpose_b,
                            nodes[b.0].data.data(),
                            &gout,
                            buf,
                        );
                    }
                    if nodes[b.0].needs_grad {
                        let groups = nodes[b.0].shape()[0];
                        let buf = grad_buf(grads, b.0, nodes[b.0].data.numel());
                        kernels::bmm_backward_b(
                            threads,
                            groups,
                            *m,
                            *k,
                            *n,
                            *transpose_b,
                            nodes[a.0].data.data(),
                            &gout,
                            buf,
                        );
                    }
                }

                Op::Scale { input, factor } => {
                    if nodes[input.0].needs_grad {
                        let buf = grad_buf(grads, input.0, gout.len());
                        for (dst, g) in buf.iter_mut().zip(gout.iter()) {
                            *dst += factor * g;
                        }
                    }
                }

                Op::Add { a, b } => {
                    for &v in &[*a, *b] {
                        if nodes[v.0].needs_grad {
                            accumulate(grads, v.0, &gout);
                        }
                    }
                }

                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if nodes[a.0].needs_grad {
                        let other = nodes[b.0].data.data();
                        let buf = grad_buf(grads, a.0, gout.len());
                        for i in 0..gout.len() {
                            buf[i] += gout[i] * other[i];
                        }
                    }
                    if nodes[b.0].needs_grad {
                        let other = nodes[a.0].data.data();
                        let buf = grad_buf(grads, b.0, gout.len());
                        for i in 0..gout.len() {
                            buf[i] += gout[i] * other[i];
                        }
                    }
                }

                Op::Upsample2x { input } => {
                    if nodes[input.0].needs_grad {
                        let shape = nodes[input.0].shape();
                        let (bc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
                        let (ho, wo) = (2 * h, 2 * w);
                        let buf = grad_buf(grads, input.0, bc * h * w);
                        for p in 0..bc {
                            let g = &gout[p * ho * wo..][..ho * wo];
                            let dst = &mut buf[p * h * w..][..h * w];
                            for y in 0..h {
                                for x in 0..w {
                                    dst[y * w + x] += g[(2 * y) * wo + 2 * x]
                                        + g[(2 * y) * wo + 2 * x + 1]
                                        + g[(2 * y + 1) * wo + 2 * x]
                                        + g[(2 * y + 1) * wo + 2 * x + 1];
                                }
                            }
                        }
                    }
                }

                Op::GlobalAvgPool { input } => {
                    if nodes[input.0].needs_grad {
                        let shape = nodes[input.0].shape();
                        let plane = shape[2] * shape[3];
                        let buf = grad_buf(grads, input.0, nodes[input.0].data.numel());
                        for (bc, &g) in gout.iter().enumerate() {
                            let dst = &mut buf[bc * plane..][..plane];
                            for v in dst.iter_mut() {
                                *v += g / plane as f64;
                            }
                        }
                    }
                }

                Op::CrossEntropy { logits, targets } => {
                    if nodes[logits.0].needs_grad {
                        let data = nodes[logits.0].data.data();
                        let c = nodes[logits.0].shape()[1];
                        let bsz = targets.len();
                        let buf = grad_buf(grads, logits.0, data.len());
                        let g0 = gout[0];
                        for (bi, &t) in targets.iter().enumerate() {
                            let row = &data[bi * c..][..c];
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                            let dst = &mut buf[bi * c..][..c];
                            for ci in 0..c {
                                let p = (row[ci] - max).exp() / sum;
                                let indicator = if ci == t { 1.0 } else { 0.0 };
                                dst[ci] += g0 * (p - indicator) / bsz as f64;
                            }
                        }
                    }
                }

                Op::FuseWeighted { features, weights } => {
                    let b = nodes[features[0].0].shape()[0];
                    let per = nodes[features[0].0].data.numel() / b;
                    let k = features.len();
                    let wdata = nodes[weights.0].data.data().to_vec();
                    for (ki, &f) in features.iter().enumerate() {
                        if nodes[f.0].needs_grad {
                            let buf = grad_buf(grads, f.0, b * per);
                            for bi in 0..b {
                                let wv = wdata[bi * k + ki];
                                let g = &gout[bi * per..][..per];
                                let dst = &mut buf[bi * per..][..per];
                                for idx in 0..per {
                                    dst[idx] += wv * g[idx];
                                }
                            }
                        }
                    }
                    if nodes[weights.0].needs_grad {
                        let mut d_w = vec![0.0; b * k];
                        for (ki, &f) in features.iter().enumerate() {
                            let fdata = nodes[f.0].data.data();
                            for bi in 0..b {
                                let g = &gout[bi * per..][..per];
                                let src = &fdata[bi * per..][..per];
                                let mut acc = 0.0;
                                for idx in 0..per {
                                    acc += g[idx] * src[idx];
                                }
                                d_w[bi * k + ki] = acc;
                            }
                        }
                        accumulate(grads, weights.0, &d_w);
                    }
                }

                Op::LoadBalance { probs, col_means } => {
                    if nodes[probs.0].needs_grad {
                        let shape = nodes[probs.0].shape();
                        let (n, k) = (shape[0], shape[1]);
                        let buf = grad_buf(grads, probs.0, n * k);
                        let g0 = gout[0];
                        for row in buf.chunks_mut(k) {
                            for (j, v) in row.iter_mut().enumerate() {
                                *v += g0 * 2.0 * col_means[j];
                            }
                        }
                    }
                }

                Op::Project { input, coeffs } => {
                    if nodes[input.0].needs_grad {
                        let buf = grad_buf(grads, input.0, coeffs.len());
                        let g0 = gout[0];
                        for (dst, &c) in buf.iter_mut().zip(coeffs.iter()) {
                            *dst += g0 * c;
                        }
                    }
                }

                Op::SumAll { input } => {
                    if nodes[input.0].needs_grad {
                        let buf = grad_buf(grads, input.0, nodes[input.0].data.numel());
                        let g0 = gout[0];
                        for dst in buf.iter_mut() {
                            *dst += g0;
                        }
                    }
                }
            }
        }
    }
}
