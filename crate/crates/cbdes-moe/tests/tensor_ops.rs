//! Op-level checks against independent brute-force oracles plus
//! finite-difference gradient verification.

use cbdes_moe::autodiff::{Graph, Mode, Value};
use cbdes_moe::gradcheck::{check_gradients, GradCheckConfig};
use cbdes_moe::nn::MultiHeadAttention;
use cbdes_moe::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, r)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ── Direct-convolution oracle (sextuple loop) ───────────────────────────────

#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    input: &Tensor,
    weight: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Tensor {
    let (b, cin, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (cout, _, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; b * cout * ho * wo];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let iv = input.data()
                                    [((bi * cin + ci) * h + iy as usize) * w + ix as usize];
                                let wv =
                                    weight.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += iv * wv;
                            }
                        }
                    }
                    out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, cout, ho, wo], out).unwrap()
}

fn run_conv(input: Tensor, weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Tensor {
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(input);
    let w = g.constant(weight);
    let b = g.constant(bias);
    let y = g.conv2d(x, w, b, stride, padding).unwrap();
    g.detach(y)
}

#[test]
fn conv2d_zero_input_gives_zero_output() {
    let mut r = rng(1);
    let out = run_conv(
        Tensor::zeros(&[1, 1, 3, 3]),
        rand_t(&[2, 1, 3, 3], &mut r),
        Tensor::zeros(&[2]),
        1,
        1,
    );
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_identity_kernel_preserves_input() {
    let mut r = rng(2);
    let input = rand_t(&[2, 1, 5, 4], &mut r);
    let mut kernel = Tensor::zeros(&[1, 1, 3, 3]);
    kernel.data_mut()[4] = 1.0; // center tap
    let out = run_conv(input.clone(), kernel, Tensor::zeros(&[1]), 1, 1);
    assert_eq!(out.data(), input.data());
}

#[test]
fn conv2d_matches_direct_oracle() {
    let mut r = rng(3);
    let input = rand_t(&[2, 3, 8, 8], &mut r);
    let weight = rand_t(&[4, 3, 3, 3], &mut r);
    let bias = rand_t(&[4], &mut r);
    for (stride, padding) in [(1, 1), (1, 0), (2, 1)] {
        let got = run_conv(input.clone(), weight.clone(), bias.clone(), stride, padding);
        let want = conv_oracle(&input, &weight, bias.data(), stride, padding);
        assert_eq!(got.shape(), want.shape());
        assert!(
            max_abs_diff(got.data(), want.data()) < 1e-12,
            "stride {stride} pad {padding}"
        );
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
    let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
    let b = g.constant(Tensor::zeros(&[4]));
    let err = g.conv2d(x, w, b, 1, 1).unwrap_err();
    assert!(err.to_string().contains("shape mismatch"));
}

#[test]
fn conv2d_rejects_even_kernel() {
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::zeros(&[1, 1, 8, 8]));
    let w = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(g.conv2d(x, w, b, 1, 0).is_err());
}

// ── Max pooling ─────────────────────────────────────────────────────────────

fn pool_oracle(input: &Tensor) -> Tensor {
    let (b, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let mut out = vec![0.0; b * c * (h / 2) * (w / 2)];
    for bc in 0..b * c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        best = best.max(input.data()[bc * h * w + (2 * oy + dy) * w + 2 * ox + dx]);
                    }
                }
                out[bc * (h / 2) * (w / 2) + oy * (w / 2) + ox] = best;
            }
        }
    }
    Tensor::new(vec![b, c, h / 2, w / 2], out).unwrap()
}

#[test]
fn maxpool_constant_input_stays_constant() {
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::full(&[1, 2, 4, 4], 3.25));
    let y = g.maxpool2x2(x).unwrap();
    assert!(g.data_of(y).iter().all(|&v| v == 3.25));
}

#[test]
fn maxpool_single_window() {
    let mut g = Graph::new(Mode::Eval);
    let x = g
        .constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.maxpool2x2(x).unwrap();
    assert_eq!(g.data_of(y), &[4.0]);
}

#[test]
fn maxpool_matches_window_scan_oracle() {
    let mut r = rng(4);
    let input = rand_t(&[2, 3, 8, 8], &mut r);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(input.clone());
    let y = g.maxpool2x2(x).unwrap();
    let want = pool_oracle(&input);
    assert_eq!(g.data_of(y), want.data());
}

#[test]
fn maxpool_rejects_odd_dims() {
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::zeros(&[1, 1, 3, 4]));
    assert!(g.maxpool2x2(x).is_err());
}

// ── Channel norm ────────────────────────────────────────────────────────────

#[test]
fn channel_norm_fixed_point_on_standardized_input() {
    // per-channel zero-mean unit-variance input passes through (train mode)
    let mut r = rng(5);
    let (b, c, h, w) = (4, 3, 4, 4);
    let mut input = rand_t(&[b, c, h, w], &mut r);
    let n = (b * h * w) as f64;
    for ci in 0..c {
        let mut vals: Vec<usize> = Vec::new();
        for bi in 0..b {
            for i in 0..h * w {
                vals.push((bi * c + ci) * h * w + i);
            }
        }
        let mean: f64 = vals.iter().map(|&i| input.data()[i]).sum::<f64>() / n;
        let var: f64 = vals
            .iter()
            .map(|&i| (input.data()[i] - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        for &i in &vals {
            input.data_mut()[i] = (input.data()[i] - mean) / std;
        }
    }
    let mut g = Graph::new(Mode::Train);
    let x = g.constant(input.clone());
    let gamma = g.constant(Tensor::full(&[c], 1.0));
    let beta = g.constant(Tensor::zeros(&[c]));
    let (y, _, _) = g.channel_norm_train(x, gamma, beta).unwrap();
    assert!(max_abs_diff(g.data_of(y), input.data()) < 1e-4);
}

#[test]
fn channel_norm_zero_gamma_yields_beta() {
    let mut r = rng(6);
    let input = rand_t(&[2, 3, 4, 4], &mut r);
    let mut g = Graph::new(Mode::Train);
    let x = g.constant(input);
    let gamma = g.constant(Tensor::zeros(&[3]));
    let beta = g.constant(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
    let (y, _, _) = g.channel_norm_train(x, gamma, beta).unwrap();
    let out = g.data_of(y);
    for bi in 0..2 {
        for (ci, want) in [0.5, -1.0, 2.0].iter().enumerate() {
            for i in 0..16 {
                assert_eq!(out[(bi * 3 + ci) * 16 + i], *want);
            }
        }
    }
}

#[test]
fn channel_norm_output_moments_are_standardized() {
    let mut r = rng(7);
    let (b, c, h, w) = (4, 3, 6, 6);
    let input = rand_t(&[b, c, h, w], &mut r);
    let mut g = Graph::new(Mode::Train);
    let x = g.constant(input);
    let gamma = g.constant(Tensor::full(&[c], 1.0));
    let beta = g.constant(Tensor::zeros(&[c]));
    let (y, _, _) = g.channel_norm_train(x, gamma, beta).unwrap();
    let out = g.data_of(y);
    let n = (b * h * w) as f64;
    for ci in 0..c {
        let mut mean = 0.0;
        let mut var = 0.0;
        for bi in 0..b {
            for i in 0..h * w {
                mean += out[(bi * c + ci) * h * w + i];
            }
        }
        mean /= n;
        for bi in 0..b {
            for i in 0..h * w {
                var += (out[(bi * c + ci) * h * w + i] - mean).powi(2);
            }
        }
        var /= n;
        assert!(mean.abs() < 1e-6, "channel {ci} mean {mean}");
        // normalization uses eps, so variance is just below 1
        assert!((var - 1.0).abs() < 1e-3, "channel {ci} var {var}");
    }
}

#[test]
fn channel_norm_rejects_empty_batch() {
    let mut g = Graph::new(Mode::Train);
    let x = g.constant(Tensor::zeros(&[0, 3, 4, 4]));
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    assert!(g.channel_norm_train(x, gamma, beta).is_err());
}

// ── PReLU ───────────────────────────────────────────────────────────────────

#[test]
fn prelu_is_identity_on_nonnegatives() {
    let mut r = rng(8);
    let input = Tensor::rand_uniform(&[2, 3, 4, 4], 0.0, 1.0, &mut r);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(input.clone());
    let a = g.constant(Tensor::full(&[3], 0.25));
    let y = g.prelu(x, a).unwrap();
    assert_eq!(g.data_of(y), input.data());
}

#[test]
fn prelu_scales_negatives_by_alpha() {
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::new(vec![1, 1], vec![-2.0]).unwrap());
    let a = g.constant(Tensor::full(&[1], 0.25));
    let y = g.prelu(x, a).unwrap();
    assert_eq!(g.data_of(y), &[-0.5]);
}

#[test]
fn prelu_matches_scalar_loop_oracle() {
    let mut r = rng(9);
    let input = rand_t(&[2, 4, 3, 3], &mut r);
    let alpha = rand_t(&[4], &mut r);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(input.clone());
    let a = g.constant(alpha.clone());
    let y = g.prelu(x, a).unwrap();
    let out = g.data_of(y);
    for bi in 0..2 {
        for ci in 0..4 {
            for i in 0..9 {
                let idx = (bi * 4 + ci) * 9 + i;
                let xv = input.data()[idx];
                let want = if xv >= 0.0 { xv } else { alpha.data()[ci] * xv };
                assert_eq!(out[idx], want);
            }
        }
    }
}

// ── Linear ──────────────────────────────────────────────────────────────────

fn matmul_oracle(x: &Tensor, w: &Tensor, b: &[f64]) -> Tensor {
    let (rows, d_in) = (x.shape()[0], x.shape()[1]);
    let d_out = w.shape()[0];
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for o in 0..d_out {
            let mut acc = b[o];
            for i in 0..d_in {
                acc += x.data()[r * d_in + i] * w.data()[o * d_in + i];
            }
            out[r * d_out + o] = acc;
        }
    }
    Tensor::new(vec![rows, d_out], out).unwrap()
}

#[test]
fn linear_identity_weight_is_identity() {
    let mut r = rng(10);
    let input = rand_t(&[3, 4], &mut r);
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0;
    }
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(input.clone());
    let w = g.constant(eye);
    let b = g.constant(Tensor::zeros(&[4]));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.data_of(y), input.data());
}

#[test]
fn linear_zero_weight_broadcasts_bias() {
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::full(&[3, 5], 2.0));
    let w = g.constant(Tensor::zeros(&[2, 5]));
    let b = g.constant(Tensor::new(vec![2], vec![0.25, -1.5]).unwrap());
    let y = g.linear(x, w, b).unwrap();
    for row in g.data_of(y).chunks(2) {
        assert_eq!(row, &[0.25, -1.5]);
    }
}

#[test]
fn linear_matches_triple_loop_oracle() {
    let mut r = rng(11);
    let input = rand_t(&[3, 5], &mut r);
    let weight = rand_t(&[4, 5], &mut r);
    let bias = rand_t(&[4], &mut r);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(input.clone());
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let y = g.linear(x, w, b).unwrap();
    let want = matmul_oracle(&input, &weight, bias.data());
    assert!(max_abs_diff(g.data_of(y), want.data()) < 1e-12);
}

#[test]
fn linear_rejects_dim_mismatch() {
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::zeros(&[3, 5]));
    let w = g.constant(Tensor::zeros(&[4, 6]));
    let b = g.constant(Tensor::zeros(&[4]));
    assert!(g.linear(x, w, b).is_err());
}

// ── Layer norm ──────────────────────────────────────────────────────────────

#[test]
fn layer_norm_constant_rows_map_to_zero() {
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::full(&[2, 3, 4], 7.5));
    let gamma = g.constant(Tensor::full(&[4], 1.0));
    let beta = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    assert!(g.data_of(y).iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_zero_gamma_gives_beta() {
    let mut r = rng(12);
    let input = rand_t(&[2, 3, 4], &mut r);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(input);
    let gamma = g.constant(Tensor::zeros(&[4]));
    let beta = g.constant(Tensor::full(&[4], 0.75));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    assert!(g.data_of(y).iter().all(|&v| v == 0.75));
}

#[test]
fn layer_norm_standardizes_each_token() {
    let mut r = rng(13);
    let d = 16;
    let input = rand_t(&[2, 5, d], &mut r);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(input);
    let gamma = g.constant(Tensor::full(&[d], 1.0));
    let beta = g.constant(Tensor::zeros(&[d]));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    for row in g.data_of(y).chunks(d) {
        let mean: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

// ── Multi-head attention ────────────────────────────────────────────────────

struct MhaWeights {
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
}

fn extract_weights(mha: &MultiHeadAttention) -> MhaWeights {
    MhaWeights {
        wq: mha.wq.weight.value().clone(),
        bq: mha.wq.bias.value().clone(),
        wk: mha.wk.weight.value().clone(),
        bk: mha.wk.bias.value().clone(),
        wv: mha.wv.weight.value().clone(),
        bv: mha.wv.bias.value().clone(),
        wo: mha.wo.weight.value().clone(),
        bo: mha.wo.bias.value().clone(),
    }
}

fn apply_linear_rows(x: &[f64], n: usize, d_in: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let d_out = w.shape()[0];
    let mut out = vec![0.0; n * d_out];
    for r in 0..n {
        for o in 0..d_out {
            let mut acc = b.data()[o];
            for i in 0..d_in {
                acc += x[r * d_in + i] * w.data()[o * d_in + i];
            }
            out[r * d_out + o] = acc;
        }
    }
    out
}

/// Direct O(N^2) per-head attention reference.
fn mha_oracle(tokens: &Tensor, w: &MhaWeights, heads: usize) -> Tensor {
    let (b, n, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; b * n * d];
    for bi in 0..b {
        let x = &tokens.data()[bi * n * d..][..n * d];
        let q = apply_linear_rows(x, n, d, &w.wq, &w.bq);
        let k = apply_linear_rows(x, n, d, &w.wk, &w.bk);
        let v = apply_linear_rows(x, n, d, &w.wv, &w.bv);
        let mut ctx = vec![0.0; n * d];
        for h in 0..heads {
            for i in 0..n {
                // scores against every key
                let mut scores = vec![0.0; n];
                for j in 0..n {
                    let mut acc = 0.0;
                    for e in 0..dh {
                        acc += q[i * d + h * dh + e] * k[j * d + h * dh + e];
                    }
                    scores[j] = acc * scale;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                for s in scores.iter_mut() {
                    *s /= denom;
                }
                for j in 0..n {
                    for e in 0..dh {
                        ctx[i * d + h * dh + e] += scores[j] * v[j * d + h * dh + e];
                    }
                }
            }
        }
        let o = apply_linear_rows(&ctx, n, d, &w.wo, &w.bo);
        out[bi * n * d..][..n * d].copy_from_slice(&o);
    }
    Tensor::new(vec![b, n, d], out).unwrap()
}

#[test]
fn mha_single_token_softmax_is_one() {
    let mut r = rng(14);
    let mha = MultiHeadAttention::new("mha", 8, 2, &mut r).unwrap();
    let w = extract_weights(&mha);
    let tokens = rand_t(&[1, 1, 8], &mut r);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(tokens.clone());
    let y = mha.forward(&mut g, x).unwrap();
    // single token: attention weight 1.0 -> out = Wo (Wv x + bv) + bo
    let v = apply_linear_rows(tokens.data(), 1, 8, &w.wv, &w.bv);
    let want = apply_linear_rows(&v, 1, 8, &w.wo, &w.bo);
    assert!(max_abs_diff(g.data_of(y), &want) < 1e-12);
}

#[test]
fn mha_identical_tokens_give_identical_outputs() {
    let mut r = rng(15);
    let mha = MultiHeadAttention::new("mha", 16, 4, &mut r).unwrap();
    let token = rand_t(&[16], &mut r);
    let mut data = Vec::new();
    for _ in 0..6 {
        data.extend_from_slice(token.data());
    }
    let tokens = Tensor::new(vec![1, 6, 16], data).unwrap();
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(tokens);
    let y = mha.forward(&mut g, x).unwrap();
    let out = g.data_of(y);
    let first = &out[..16];
    for row in out.chunks(16) {
        assert!(max_abs_diff(row, first) < 1e-12);
    }
}

#[test]
fn mha_matches_direct_reference() {
    let mut r = rng(16);
    let mha = MultiHeadAttention::new("mha", 128, 4, &mut r).unwrap();
    let w = extract_weights(&mha);
    let tokens = rand_t(&[2, 16, 128], &mut r);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(tokens.clone());
    let y = mha.forward(&mut g, x).unwrap();
    let want = mha_oracle(&tokens, &w, 4);
    assert!(max_abs_diff(g.data_of(y), want.data()) < 1e-10);
}

#[test]
fn mha_rejects_indivisible_heads() {
    let mut r = rng(17);
    assert!(MultiHeadAttention::new("mha", 10, 4, &mut r).is_err());
}

// ── Softmax ─────────────────────────────────────────────────────────────────

#[test]
fn softmax_uniform_logits() {
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::zeros(&[1, 4]));
    let y = g.softmax(x).unwrap();
    for &v in g.data_of(y) {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn softmax_log_ratio_logits() {
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::new(vec![1, 2], vec![3.0_f64.ln(), 0.0]).unwrap());
    let y = g.softmax(x).unwrap();
    let out = g.data_of(y);
    assert!((out[0] - 0.75).abs() < 1e-12);
    assert!((out[1] - 0.25).abs() < 1e-12);
}

#[test]
fn softmax_survives_large_logits() {
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::new(vec![1, 2], vec![1000.0, 999.0]).unwrap());
    let y = g.softmax(x).unwrap();
    let out = g.data_of(y);
    assert!(out.iter().all(|v| v.is_finite()));
    assert!((out[0] - 0.7310585786300049).abs() < 1e-12);
    assert!((out[1] - 0.2689414213699951).abs() < 1e-12);
}

// ── mean_tokens ─────────────────────────────────────────────────────────────

#[test]
fn mean_tokens_single_token_identity() {
    let mut r = rng(18);
    let tokens = rand_t(&[2, 1, 5], &mut r);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(tokens.clone());
    let y = g.mean_tokens(x).unwrap();
    assert_eq!(g.data_of(y), tokens.data());
}

#[test]
fn mean_tokens_of_opposite_pair_is_zero() {
    let mut r = rng(19);
    let t = rand_t(&[1, 1, 6], &mut r);
    let mut data = t.data().to_vec();
    data.extend(t.data().iter().map(|v| -v));
    let tokens = Tensor::new(vec![1, 2, 6], data).unwrap();
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(tokens);
    let y = g.mean_tokens(x).unwrap();
    assert!(g.data_of(y).iter().all(|&v| v == 0.0));
}

#[test]
fn mean_tokens_matches_loop_oracle() {
    let mut r = rng(20);
    let tokens = rand_t(&[3, 7, 4], &mut r);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(tokens.clone());
    let y = g.mean_tokens(x).unwrap();
    for bi in 0..3 {
        for di in 0..4 {
            let mut acc = 0.0;
            for ni in 0..7 {
                acc += tokens.data()[(bi * 7 + ni) * 4 + di];
            }
            acc /= 7.0;
            assert!((g.data_of(y)[bi * 4 + di] - acc).abs() < 1e-12);
        }
    }
}

// ── Determinism ─────────────────────────────────────────────────────────────

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut r = rng(21);
        let mha = MultiHeadAttention::new("m", 32, 4, &mut r).unwrap();
        let tokens = rand_t(&[2, 8, 32], &mut r);
        let mut g = Graph::new(Mode::Eval);
        let x = g.constant(tokens);
        let y = mha.forward(&mut g, x).unwrap();
        g.detach(y)
    };
    let a = run();
    let b = run();
    assert_eq!(a.data(), b.data());
}

#[test]
fn forward_is_bitwise_identical_across_thread_counts() {
    let run = |threads: usize| {
        let mut r = rng(22);
        let input = rand_t(&[2, 8, 16, 16], &mut r);
        let weight = rand_t(&[32, 8, 3, 3], &mut r);
        let bias = rand_t(&[32], &mut r);
        let mut g = Graph::with_threads(Mode::Eval, threads);
        let x = g.constant(input);
        let w = g.constant(weight);
        let b = g.constant(bias);
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        g.detach(y)
    };
    assert_eq!(run(1).data(), run(4).data());
}

// ── Finite-difference gradient checks, one per op family ────────────────────

fn fd_config() -> GradCheckConfig {
    GradCheckConfig::default()
}

fn random_coeffs(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

#[test]
fn grad_conv2d() {
    let mut r = rng(30);
    let input = rand_t(&[2, 2, 6, 6], &mut r);
    let weight = rand_t(&[3, 2, 3, 3], &mut r);
    let bias = rand_t(&[3], &mut r);
    let coeffs = random_coeffs(2 * 3 * 6 * 6, &mut r);
    let res = check_gradients(&[input, weight, bias], fd_config(), |g, vars| {
        let y = g.conv2d(vars[0], vars[1], vars[2], 1, 1).unwrap();
        g.project(y, &coeffs)
    });
    assert!(res.passes(1e-4), "max rel err {}", res.max_rel_error);
}

#[test]
fn grad_conv2d_grouped() {
    let mut r = rng(31);
    let input = rand_t(&[2, 4, 4, 4], &mut r);
    let weight = rand_t(&[4, 1, 3, 3], &mut r); // depthwise
    let bias = rand_t(&[4], &mut r);
    let coeffs = random_coeffs(2 * 4 * 4 * 4, &mut r);
    let res = check_gradients(&[input, weight, bias], fd_config(), |g, vars| {
        let y = g
            .conv2d_grouped(vars[0], vars[1], vars[2], 1, 1, 4)
            .unwrap();
        g.project(y, &coeffs)
    });
    assert!(res.passes(1e-4), "max rel err {}", res.max_rel_error);
}

#[test]
fn grad_maxpool() {
    let mut r = rng(32);
    let input = rand_t(&[2, 2, 4, 4], &mut r);
    let coeffs = random_coeffs(2 * 2 * 2 * 2, &mut r);
    let res = check_gradients(&[input], fd_config(), |g, vars| {
        let y = g.maxpool2x2(vars[0]).unwrap();
        g.project(y, &coeffs)
    });
    assert!(res.passes(1e-4), "max rel err {}", res.max_rel_error);
}

#[test]
fn grad_channel_norm_train_mode() {
    let mut r = rng(33);
    let input = rand_t(&[3, 2, 4, 4], &mut r);
    let gamma = rand_t(&[2], &mut r);
    let beta = rand_t(&[2], &mut r);
    let coeffs = random_coeffs(3 * 2 * 4 * 4, &mut r);
    let res = check_gradients(&[input, gamma, beta], fd_config(), |g, vars| {
        let (y, _, _) = g.channel_norm_train(vars[0], vars[1], vars[2]).unwrap();
        g.project(y, &coeffs)
    });
    assert!(res.passes(1e-4), "max rel err {}", res.max_rel_error);
}

#[test]
fn grad_channel_norm_eval_mode() {
    let mut r = rng(34);
    let input = rand_t(&[2, 2, 4, 4], &mut r);
    let gamma = rand_t(&[2], &mut r);
    let beta = rand_t(&[2], &mut r);
    let running_mean = vec![0.1, -0.2];
    let running_var = vec![1.3, 0.7];
    let coeffs = random_coeffs(2 * 2 * 4 * 4, &mut r);
    let res = check_gradients(&[input, gamma, beta], fd_config(), |g, vars| {
        let y = g
            .channel_norm_eval(vars[0], vars[1], vars[2], &running_mean, &running_var)
            .unwrap();
        g.project(y, &coeffs)
    });
    assert!(res.passes(1e-4), "max rel err {}", res.max_rel_error);
}

#[test]
fn grad_prelu() {
    let mut r = rng(35);
    let input = rand_t(&[2, 3, 4, 4], &mut r);
    let alpha = rand_t(&[3], &mut r);
    let coeffs = random_coeffs(2 * 3 * 4 * 4, &mut r);
    let res = check_gradients(&[input, alpha], fd_config(), |g, vars| {
        let y = g.prelu(vars[0], vars[1]).unwrap();
        g.project(y, &coeffs)
    });
    assert!(res.passes(1e-4), "max rel err {}", res.max_rel_error);
}

#[test]
fn grad_linear() {
    let mut r = rng(36);
    let input = rand_t(&[3, 5], &mut r);
    let weight = rand_t(&[4, 5], &mut r);
    let bias = rand_t(&[4], &mut r);
    let coeffs = random_coeffs(12, &mut r);
    let res = check_gradients(&[input, weight, bias], fd_config(), |g, vars| {
        let y = g.linear(vars[0], vars[1], vars[2]).unwrap();
        g.project(y, &coeffs)
    });
    assert!(res.passes(1e-4), "max rel err {}", res.max_rel_error);
}

#[test]
fn grad_layer_norm() {
    let mut r = rng(37);
    let input = rand_t(&[2, 3, 8], &mut r);
    let gamma = rand_t(&[8], &mut r);
    let beta = rand_t(&[8], &mut r);
    let coeffs = random_coeffs(48, &mut r);
    let res = check_gradients(&[input, gamma, beta], fd_config(), |g, vars| {
        let y = g.layer_norm(vars[0], vars[1], vars[2]).unwrap();
        g.project(y, &coeffs)
    });
    assert!(res.passes(1e-4), "max rel err {}", res.max_rel_error);
}

#[test]
fn grad_softmax() {
    let mut r = rng(38);
    let input = rand_t(&[3, 5], &mut r);
    let coeffs = random_coeffs(15, &mut r);
    let res = check_gradients(&[input], fd_config(), |g, vars| {
        let y = g.softmax(vars[0]).unwrap();
        g.project(y, &coeffs)
    });
    assert!(res.passes(1e-4), "max rel err {}", res.max_rel_error);
}

#[test]
fn grad_mean_tokens() {
    let mut r = rng(39);
    let input = rand_t(&[2, 4, 3], &mut r);
    let coeffs = random_coeffs(6, &mut r);
    let res = check_gradients(&[input], fd_config(), |g, vars| {
        let y = g.mean_tokens(vars[0]).unwrap();
        g.project(y, &coeffs)
    });
    assert!(res.passes(1e-4), "max rel err {}", res.max_rel_error);
}

#[test]
fn grad_mha_composite() {
    let mut r = rng(40);
    let mha = MultiHeadAttention::new("m", 8, 2, &mut r).unwrap();
    let tokens = rand_t(&[2, 3, 8], &mut r);
    let coeffs = random_coeffs(2 * 3 * 8, &mut r);
    // check through the token input; parameter gradients flow through the
    // same linear/bmm/softmax machinery verified above
    let res = check_gradients(&[tokens], fd_config(), |g, vars| {
        let y = mha.forward(g, vars[0]).unwrap();
        g.project(y, &coeffs)
    });
    assert!(res.passes(1e-4), "max rel err {}", res.max_rel_error);
}

#[test]
fn grad_bmm_both_layouts() {
    let mut r = rng(41);
    for transpose_b in [false, true] {
        let a = rand_t(&[2, 3, 4], &mut r);
        let b = if transpose_b {
            rand_t(&[2, 5, 4], &mut r)
        } else {
            rand_t(&[2, 4, 5], &mut r)
        };
        let coeffs = random_coeffs(2 * 3 * 5, &mut r);
        let res = check_gradients(&[a, b], fd_config(), |g, vars| {
            let y = g.bmm(vars[0], vars[1], transpose_b).unwrap();
            g.project(y, &coeffs)
        });
        assert!(res.passes(1e-4), "tb={transpose_b} err {}", res.max_rel_error);
    }
}

#[test]
fn grad_cross_entropy() {
    let mut r = rng(42);
    let logits = rand_t(&[4, 6], &mut r);
    let targets = vec![2, 0, 5, 3];
    let res = check_gradients(&[logits], fd_config(), |g, vars| {
        g.cross_entropy(vars[0], &targets).unwrap()
    });
    assert!(res.passes(1e-4), "max rel err {}", res.max_rel_error);
}

#[test]
fn grad_small_ops() {
    let mut r = rng(43);
    // upsample + global_avg_pool + permute + reshape + scale + add + mul
    let a = rand_t(&[2, 3, 2, 2], &mut r);
    let b = rand_t(&[2, 3, 4, 4], &mut r);
    let coeffs = random_coeffs(2 * 3, &mut r);
    let res = check_gradients(&[a, b], fd_config(), |g, vars| {
        let up = g.upsample2x(vars[0]).unwrap();
        let sum = g.add(up, vars[1]).unwrap();
        let prod = g.mul(sum, vars[1]).unwrap();
        let p = g.permute(prod, &[0, 1, 3, 2]).unwrap();
        let p = g.reshape(p, vec![2, 3, 4, 4]).unwrap();
        let pooled = g.global_avg_pool(p).unwrap();
        let proj = g.project(pooled, &coeffs);
        g.scale(proj, 1.7)
    });
    assert!(res.passes(1e-4), "max rel err {}", res.max_rel_error);
}

// gradient flows correctly through ties: first maximal element wins
#[test]
fn maxpool_tie_routes_to_first_in_row_major_order() {
    let mut g = Graph::new(Mode::Train);
    let t = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
    let x = g.var(t);
    let y = g.maxpool2x2(x).unwrap();
    let s = g.sum_all(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad_of(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

// ── Value type sanity ───────────────────────────────────────────────────────

#[test]
fn values_are_copyable_handles() {
    fn assert_copy<T: Copy>() {}
    assert_copy::<Value>();
}
