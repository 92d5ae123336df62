//! Forward op builders: shape validation, kernel dispatch, tape recording.

use super::kernels::{self, ConvDims};
use super::{Graph, Op, Value};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;

impl Graph {
    /// 2-D cross-correlation: input `[B,Cin,H,W]`, weight `[Cout,Cin,kh,kw]`,
    /// bias `[Cout]`. Odd kernels only; `H' = (H + 2p - kh)/stride + 1`.
    pub fn conv2d(
        &mut self,
        input: Value,
        weight: Value,
        bias: Value,
        stride: usize,
        padding: usize,
    ) -> Result<Value> {
        self.conv2d_grouped(input, weight, bias, stride, padding, 1)
    }

    /// Grouped variant; `groups == Cin` with per-channel weights gives a
    /// depthwise convolution. Weight is `[Cout, Cin/groups, kh, kw]`.
    pub fn conv2d_grouped(
        &mut self,
        input: Value,
        weight: Value,
        bias: Value,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Value> {
        let ishape = self.shape_of(input);
        let wshape = self.shape_of(weight);
        if ishape.len() != 4 || wshape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                "4-D input and weight",
                format!("input {:?}, weight {:?}", ishape, wshape),
            ));
        }
        let (b, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (cout, w_cin, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::InvalidDimension(format!(
                "conv2d: groups {} must divide Cin {} and Cout {}",
                groups, cin, cout
            )));
        }
        if w_cin != cin / groups {
            return Err(Error::shape(
                "conv2d",
                format!("weight channel dim {}", cin / groups),
                format!("{}", w_cin),
            ));
        }
        if self.shape_of(bias) != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias [{}]", cout),
                format!("{:?}", self.shape_of(bias)),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidDimension(format!(
                "conv2d: kernel must be odd, got {}x{}",
                kh, kw
            )));
        }
        if stride < 1 {
            return Err(Error::InvalidDimension("conv2d: stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::InvalidDimension(format!(
                "conv2d: padded input {}x{} smaller than kernel {}x{}",
                h + 2 * padding,
                w + 2 * padding,
                kh,
                kw
            )));
        }
        let h_out = (h + 2 * padding - kh) / stride + 1;
        let w_out = (w + 2 * padding - kw) / stride + 1;
        let dims = ConvDims {
            batch: b,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            groups,
            h_out,
            w_out,
        };
        let mut out = Tensor::zeros(&[b, cout, h_out, w_out]);
        kernels::conv2d_forward(
            self.threads,
            &dims,
            self.data_of(input),
            self.data_of(weight),
            self.data_of(bias),
            out.data_mut(),
        );
        let needs = self.any_needs_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            },
            needs,
        ))
    }

    /// 2x2 max pooling with stride 2. Requires even spatial dims. Ties route
    /// the gradient to the first maximal element in row-major window order.
    pub fn maxpool2x2(&mut self, input: Value) -> Result<Value> {
        let shape = self.shape_of(input);
        if shape.len() != 4 {
            return Err(Error::shape("maxpool2x2", "4-D input", format!("{:?}", shape)));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidDimension(format!(
                "maxpool2x2: spatial dims must be even, got {}x{}",
                h, w
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data_of(input);
        let mut out = vec![0.0; b * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for bc in 0..b * c {
            let plane = &src[bc * h * w..][..h * w];
            let obase = bc * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_idx = (2 * oy) * w + 2 * ox;
                    let mut best = plane[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                    out[obase + oy * wo + ox] = best;
                    argmax[obase + oy * wo + ox] = (bc * h * w + best_idx) as u32;
                }
            }
        }
        let needs = self.node(input).needs_grad;
        let t = Tensor::new(vec![b, c, ho, wo], out).expect("pool shape");
        Ok(self.push(t, Op::MaxPool2x2 { input, argmax }, needs))
    }

    /// Training-mode per-channel batch norm over `(B, H, W)`. Returns the
    /// output plus the batch mean/variance so the caller can maintain
    /// running statistics.
    pub fn channel_norm_train(
        &mut self,
        input: Value,
        gamma: Value,
        beta: Value,
    ) -> Result<(Value, Vec<f64>, Vec<f64>)> {
        let (b, c, plane) = self.check_channel_norm(input, gamma, beta)?;
        let (mean, var) = kernels::batch_moments(b, c, plane, self.data_of(input));
        let mut out = Tensor::zeros(self.shape_of(input));
        kernels::channel_norm_apply(
            b,
            c,
            plane,
            BN_EPS,
            self.data_of(input),
            &mean,
            &var,
            self.data_of(gamma),
            self.data_of(beta),
            out.data_mut(),
        );
        let needs = self.any_needs_grad(&[input, gamma, beta]);
        let v = self.push(
            out,
            Op::ChannelNorm {
                input,
                gamma,
                beta,
                mean: mean.clone(),
                var: var.clone(),
                training: true,
            },
            needs,
        );
        Ok((v, mean, var))
    }

    /// Eval-mode per-channel batch norm using fixed running statistics.
    pub fn channel_norm_eval(
        &mut self,
        input: Value,
        gamma: Value,
        beta: Value,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Value> {
        let (b, c, plane) = self.check_channel_norm(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "channel_norm",
                format!("running stats of length {}", c),
                format!("{}/{}", running_mean.len(), running_var.len()),
            ));
        }
        let mut out = Tensor::zeros(self.shape_of(input));
        kernels::channel_norm_apply(
            b,
            c,
            plane,
            BN_EPS,
            self.data_of(input),
            running_mean,
            running_var,
            self.data_of(gamma),
            self.data_of(beta),
            out.data_mut(),
        );
        let needs = self.any_needs_grad(&[input, gamma, beta]);
        Ok(self.push(
            out,
            Op::ChannelNorm {
                input,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
                training: false,
            },
            needs,
        ))
    }

    fn check_channel_norm(&self, input: Value, gamma: Value, beta: Value) -> Result<(usize, usize, usize)> {
        let shape = self.shape_of(input);
        if shape.len() != 4 {
            return Err(Error::shape("channel_norm", "4-D input", format!("{:?}", shape)));
        }
        let (b, c) = (shape[0], shape[1]);
        let plane = shape[2] * shape[3];
        if b == 0 || plane == 0 {
            return Err(Error::InvalidDimension(
                "channel_norm: zero-size batch".into(),
            ));
        }
        if self.shape_of(gamma) != [c] || self.shape_of(beta) != [c] {
            return Err(Error::shape(
                "channel_norm",
                format!("gamma/beta [{}]", c),
                format!("{:?}/{:?}", self.shape_of(gamma), self.shape_of(beta)),
            ));
        }
        Ok((b, c, plane))
    }

    /// PReLU: `x if x >= 0 else alpha * x`, with `alpha` scalar or one value
    /// per channel (dim 1).
    pub fn prelu(&mut self, input: Value, alpha: Value) -> Result<Value> {
        let shape = self.shape_of(input);
        if shape.len() < 2 {
            return Err(Error::shape("prelu", "input of rank >= 2", format!("{:?}", shape)));
        }
        let channels = shape[1];
        let plane: usize = shape[2..].iter().product::<usize>().max(1);
        let alen = self.node(alpha).data.numel();
        if alen != 1 && alen != channels {
            return Err(Error::shape(
                "prelu",
                format!("alpha of length 1 or {}", channels),
                format!("{}", alen),
            ));
        }
        let batch = shape[0];
        let a = self.data_of(alpha);
        let src = self.data_of(input);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for c in 0..channels {
                let av = if alen == 1 { a[0] } else { a[c] };
                let base = (b * channels + c) * plane;
                for i in 0..plane {
                    let x = src[base + i];
                    out[base + i] = if x >= 0.0 { x } else { av * x };
                }
            }
        }
        let needs = self.any_needs_grad(&[input, alpha]);
        let t = Tensor::new(shape.to_vec(), out).expect("prelu shape");
        Ok(self.push(
            t,
            Op::Prelu {
                input,
                alpha,
                channels,
                plane,
            },
            needs,
        ))
    }

    /// Affine map on the last dimension: input `[..., Din]` treated as rows,
    /// weight `[Dout, Din]`, bias `[Dout]`.
    pub fn linear(&mut self, input: Value, weight: Value, bias: Value) -> Result<Value> {
        let ishape = self.shape_of(input).to_vec();
        let wshape = self.shape_of(weight);
        if ishape.is_empty() || wshape.len() != 2 {
            return Err(Error::shape(
                "linear",
                "input rank >= 1 and 2-D weight",
                format!("input {:?}, weight {:?}", ishape, wshape),
            ));
        }
        let d_in = *ishape.last().unwrap();
        let (d_out, w_in) = (wshape[0], wshape[1]);
        if w_in != d_in {
            return Err(Error::shape(
                "linear",
                format!("weight inner dim {}", d_in),
                format!("{}", w_in),
            ));
        }
        if self.shape_of(bias) != [d_out] {
            return Err(Error::shape(
                "linear",
                format!("bias [{}]", d_out),
                format!("{:?}", self.shape_of(bias)),
            ));
        }
        let rows = self.node(input).data.numel() / d_in;
        let mut out_shape = ishape.clone();
        *out_shape.last_mut().unwrap() = d_out;
        let mut out = Tensor::zeros(&out_shape);
        kernels::linear_forward(
            self.threads,
            rows,
            d_in,
            d_out,
            self.data_of(input),
            self.data_of(weight),
            self.data_of(bias),
            out.data_mut(),
        );
        let needs = self.any_needs_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                d_in,
                d_out,
            },
            needs,
        ))
    }

    /// Layer norm over the last dimension with epsilon 1e-5.
    pub fn layer_norm(&mut self, input: Value, gamma: Value, beta: Value) -> Result<Value> {
        let shape = self.shape_of(input).to_vec();
        let d = *shape.last().ok_or_else(|| {
            Error::shape("layer_norm", "input rank >= 1", "rank 0".to_string())
        })?;
        if d == 0 {
            return Err(Error::InvalidDimension("layer_norm: empty last dim".into()));
        }
        if self.shape_of(gamma) != [d] || self.shape_of(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma/beta [{}]", d),
                format!("{:?}/{:?}", self.shape_of(gamma), self.shape_of(beta)),
            ));
        }
        let mut out = Tensor::zeros(&shape);
        let (means, inv_stds) = kernels::layer_norm_forward(
            d,
            LN_EPS,
            self.data_of(input),
            self.data_of(gamma),
            self.data_of(beta),
            out.data_mut(),
        );
        let needs = self.any_needs_grad(&[input, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                means,
                inv_stds,
            },
            needs,
        ))
    }

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax(&mut self, input: Value) -> Result<Value> {
        let shape = self.shape_of(input).to_vec();
        let k = *shape.last().ok_or_else(|| {
            Error::shape("softmax", "input rank >= 1", "rank 0".to_string())
        })?;
        if k == 0 {
            return Err(Error::InvalidDimension("softmax: empty last dim".into()));
        }
        let mut out = Tensor::zeros(&shape);
        kernels::softmax_rows(k, self.data_of(input), out.data_mut());
        let needs = self.node(input).needs_grad;
        Ok(self.push(out, Op::Softmax { input, k }, needs))
    }

    /// Arithmetic mean over the token axis of `[B, N, D]`.
    pub fn mean_tokens(&mut self, input: Value) -> Result<Value> {
        let shape = self.shape_of(input);
        if shape.len() != 3 {
            return Err(Error::shape("mean_tokens", "[B,N,D] input", format!("{:?}", shape)));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        if n == 0 {
            return Err(Error::InvalidDimension("mean_tokens: zero tokens".into()));
        }
        let src = self.data_of(input);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let dst = &mut out[bi * d..][..d];
            for ni in 0..n {
                let row = &src[(bi * n + ni) * d..][..d];
                for di in 0..d {
                    dst[di] += row[di];
                }
            }
            for v in dst.iter_mut() {
                *v /= n as f64;
            }
        }
        let needs = self.node(input).needs_grad;
        let t = Tensor::new(vec![b, d], out).expect("mean shape");
        Ok(self.push(t, Op::MeanTokens { input }, needs))
    }

    /// Reinterpret under a new shape with the same element count.
    pub fn reshape(&mut self, input: Value, shape: Vec<usize>) -> Result<Value> {
        let t = self.detach(input).reshape(shape)?;
        let needs = self.node(input).needs_grad;
        Ok(self.push(t, Op::Reshape { input }, needs))
    }

    /// Axis permutation (generalized transpose).
    pub fn permute(&mut self, input: Value, axes: &[usize]) -> Result<Value> {
        let shape = self.shape_of(input).to_vec();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidDimension(format!(
                "permute: axes {:?} is not a permutation of 0..{}",
                axes, nd
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = permute_copy(self.data_of(input), &shape, axes, &out_shape);
        let needs = self.node(input).needs_grad;
        let t = Tensor::new(out_shape, out).expect("permute shape");
        Ok(self.push(
            t,
            Op::Permute {
                input,
                axes: axes.to_vec(),
            },
            needs,
        ))
    }

    /// Batched matmul: `a [G,M,K] @ b [G,K,N]`, or `b [G,N,K]` when
    /// `transpose_b` is set.
    pub fn bmm(&mut self, a: Value, b: Value, transpose_b: bool) -> Result<Value> {
        let ashape = self.shape_of(a);
        let bshape = self.shape_of(b);
        if ashape.len() != 3 || bshape.len() != 3 || ashape[0] != bshape[0] {
            return Err(Error::shape(
                "bmm",
                "two 3-D tensors with equal group dim",
                format!("{:?} x {:?}", ashape, bshape),
            ));
        }
        let (g, m, k) = (ashape[0], ashape[1], ashape[2]);
        let (bk, n) = if transpose_b {
            (bshape[2], bshape[1])
        } else {
            (bshape[1], bshape[2])
        };
        if bk != k {
            return Err(Error::shape(
                "bmm",
                format!("inner dim {}", k),
                format!("{}", bk),
            ));
        }
        let mut out = Tensor::zeros(&[g, m, n]);
        kernels::bmm_forward(
            self.threads,
            g,
            m,
            k,
            n,
            transpose_b,
            self.data_of(a),
            self.data_of(b),
            out.data_mut(),
        );
        let needs = self.any_needs_grad(&[a, b]);
        Ok(self.push(
            out,
            Op::Bmm {
                a,
                b,
                m,
                k,
                n,
                transpose_b,
            },
            needs,
        ))
    }

    /// Multiply by a compile-time constant factor.
    pub fn scale(&mut self, input: Value, factor: f64) -> Value {
        let mut t = self.detach(input);
        for v in t.data_mut() {
            *v *= factor;
        }
        let needs = self.node(input).needs_grad;
        self.push(t, Op::Scale { input, factor }, needs)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_same_shape(a, b, "add", |x, y| x + y)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y)
    }

    fn binary_same_shape(
        &mut self,
        a: Value,
        b: Value,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Value> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(
                name,
                format!("{:?}", self.shape_of(a)),
                format!("{:?}", self.shape_of(b)),
            ));
        }
        let out: Vec<f64> = self
            .data_of(a)
            .iter()
            .zip(self.data_of(b).iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape_of(a).to_vec(), out).expect("binary shape");
        let needs = self.any_needs_grad(&[a, b]);
        let op = match name {
            "add" => Op::Add { a, b },
            _ => Op::Mul { a, b },
        };
        Ok(self.push(t, op, needs))
    }

    /// Nearest-neighbor 2x spatial upsampling of `[B,C,H,W]`.
    pub fn upsample2x(&mut self, input: Value) -> Result<Value> {
        let shape = self.shape_of(input);
        if shape.len() != 4 {
            return Err(Error::shape("upsample2x", "4-D input", format!("{:?}", shape)));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let src = self.data_of(input);
        let mut out = vec![0.0; b * c * 4 * h * w];
        let (ho, wo) = (2 * h, 2 * w);
        for bc in 0..b * c {
            let sp = &src[bc * h * w..][..h * w];
            let dp = &mut out[bc * ho * wo..][..ho * wo];
            for y in 0..h {
                for x in 0..w {
                    let v = sp[y * w + x];
                    dp[(2 * y) * wo + 2 * x] = v;
                    dp[(2 * y) * wo + 2 * x + 1] = v;
                    dp[(2 * y + 1) * wo + 2 * x] = v;
                    dp[(2 * y + 1) * wo + 2 * x + 1] = v;
                }
            }
        }
        let needs = self.node(input).needs_grad;
        let t = Tensor::new(vec![b, c, ho, wo], out).expect("upsample shape");
        Ok(self.push(t, Op::Upsample2x { input }, needs))
    }

    /// Spatial mean of `[B,C,H,W]` down to `[B,C]`.
    pub fn global_avg_pool(&mut self, input: Value) -> Result<Value> {
        let shape = self.shape_of(input);
        if shape.len() != 4 {
            return Err(Error::shape("global_avg_pool", "4-D input", format!("{:?}", shape)));
        }
        let (b, c) = (shape[0], shape[1]);
        let plane = shape[2] * shape[3];
        if plane == 0 {
            return Err(Error::InvalidDimension("global_avg_pool: empty plane".into()));
        }
        let src = self.data_of(input);
        let mut out = vec![0.0; b * c];
        for bc in 0..b * c {
            out[bc] = src[bc * plane..][..plane].iter().sum::<f64>() / plane as f64;
        }
        let needs = self.node(input).needs_grad;
        let t = Tensor::new(vec![b, c], out).expect("gap shape");
        Ok(self.push(t, Op::GlobalAvgPool { input }, needs))
    }

    /// Mean cross-entropy between logits `[B,C]` and integer class targets.
    pub fn cross_entropy(&mut self, logits: Value, targets: &[usize]) -> Result<Value> {
        let shape = self.shape_of(logits);
        if shape.len() != 2 {
            return Err(Error::shape("cross_entropy", "[B,C] logits", format!("{:?}", shape)));
        }
        let (b, c) = (shape[0], shape[1]);
        if targets.len() != b {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets", b),
                format!("{}", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidDimension(format!(
                "cross_entropy: target {} out of range for {} classes",
                bad, c
            )));
        }
        if b == 0 {
            return Err(Error::InvalidDimension("cross_entropy: empty batch".into()));
        }
        let data = self.data_of(logits);
        let mut total = 0.0;
        for (bi, &t) in targets.iter().enumerate() {
            let row = &data[bi * c..][..c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            total -= row[t] - lse;
        }
        total /= b as f64;
        let needs = self.node(logits).needs_grad;
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Per-image convex combination of expert feature maps: for each image
    /// `b`, `out[b] = sum_k weights[b,k] * features[k][b]`.
    pub fn fuse_weighted(&mut self, features: &[Value], weights: Value) -> Result<Value> {
        if features.is_empty() {
            return Err(Error::InvalidDimension("fuse_weighted: no features".into()));
        }
        let fshape = self.shape_of(features[0]).to_vec();
        if fshape.is_empty() {
            return Err(Error::shape("fuse_weighted", "feature rank >= 1", "rank 0".to_string()));
        }
        for &f in features {
            if self.shape_of(f) != fshape {
                return Err(Error::shape(
                    "fuse_weighted",
                    format!("{:?}", fshape),
                    format!("{:?}", self.shape_of(f)),
                ));
            }
        }
        let b = fshape[0];
        let k = features.len();
        if self.shape_of(weights) != [b, k] {
            return Err(Error::shape(
                "fuse_weighted",
                format!("weights [{}, {}]", b, k),
                format!("{:?}", self.shape_of(weights)),
            ));
        }
        let per = self.node(features[0]).data.numel() / b;
        let wdata = self.data_of(weights);
        let mut out = vec![0.0; b * per];
        for bi in 0..b {
            let dst = &mut out[bi * per..][..per];
            for (ki, &f) in features.iter().enumerate() {
                let wv = wdata[bi * k + ki];
                let src = &self.node(f).data.data()[bi * per..][..per];
                if ki == 0 {
                    for i in 0..per {
                        dst[i] = wv * src[i];
                    }
                } else {
                    for i in 0..per {
                        dst[i] += wv * src[i];
                    }
                }
            }
        }
        let mut inputs: Vec<Value> = features.to_vec();
        inputs.push(weights);
        let needs = self.any_needs_grad(&inputs);
        let t = Tensor::new(fshape, out).expect("fuse shape");
        Ok(self.push(
            t,
            Op::FuseWeighted {
                features: features.to_vec(),
                weights,
            },
            needs,
        ))
    }

    /// Load-balance objective over a routing matrix `[N,K]`: column loads
    /// `l_j = sum_i P[i,j]`, mean activations `p̄_j = l_j / N`, and the loss
    /// `L = sum_j p̄_j * l_j`.
    pub fn load_balance(&mut self, probs: Value) -> Result<Value> {
        let shape = self.shape_of(probs);
        if shape.len() != 2 {
            return Err(Error::shape("load_balance", "[N,K] matrix", format!("{:?}", shape)));
        }
        let (n, k) = (shape[0], shape[1]);
        if n == 0 {
            return Err(Error::InvalidDimension("load_balance: empty batch".into()));
        }
        let data = self.data_of(probs);
        let mut loads = vec![0.0; k];
        for i in 0..n {
            for j in 0..k {
                loads[j] += data[i * k + j];
            }
        }
        let col_means: Vec<f64> = loads.iter().map(|&l| l / n as f64).collect();
        let loss: f64 = col_means.iter().zip(loads.iter()).map(|(&p, &l)| p * l).sum();
        let needs = self.node(probs).needs_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::LoadBalance { probs, col_means },
            needs,
        ))
    }

    /// Scalar projection `<input, coeffs>`; handy for building test losses.
    pub fn project(&mut self, input: Value, coeffs: &[f64]) -> Value {
        assert_eq!(
            self.node(input).data.numel(),
            coeffs.len(),
            "project: coefficient length mismatch"
        );
        let dot: f64 = self
            .data_of(input)
            .iter()
            .zip(coeffs.iter())
            .map(|(&x, &c)| x * c)
            .sum();
        let needs = self.node(input).needs_grad;
        self.push(
            Tensor::scalar(dot),
            Op::Project {
                input,
                coeffs: coeffs.to_vec(),
            },
            needs,
        )
    }

    /// Sum of all elements.
    pub fn sum_all(&mut self, input: Value) -> Value {
        let s: f64 = self.data_of(input).iter().sum();
        let needs = self.node(input).needs_grad;
        self.push(Tensor::scalar(s), Op::SumAll { input }, needs)
    }

    fn any_needs_grad(&self, values: &[Value]) -> bool {
        values.iter().any(|&v| self.node(v).needs_grad)
    }
}

/// Row-major copy under an axis permutation.
pub(crate) fn permute_copy(src: &[f64], in_shape: &[usize], axes: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let nd = in_shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let numel: usize = in_shape.iter().product();
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; nd];
    for slot in out.iter_mut() {
        let mut src_idx = 0;
        for d in 0..nd {
            src_idx += coords[d] * in_strides[axes[d]];
        }
        *slot = src[src_idx];
        for d in (0..nd).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}
