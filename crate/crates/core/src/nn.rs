//! Neural building blocks: affine layers, layer norm, multi-head attention,
//! MLP blocks, GDN/IGDN, and strided/masked convolutions.
//!
//! Attention and MLP blocks use pre-norm residual wiring: the query stream is
//! layer-normalized before attention and added back; key/value streams are
//! normalized without a residual.

use crate::rng::RngState;
use crate::tensor::{Tape, Tensor};

/// Smallest admissible GDN beta. Slightly above 1e-6 and exactly
/// representable in f32 so checkpoint round-trips preserve the bound.
pub const GDN_BETA_MIN: f64 = 1.01e-6_f32 as f64;

/// Default negative slope for leaky ReLU activations.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

fn glorot(rng: &mut RngState, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()
}

/// Affine map `x * W + b` for row-major `[L, in]` inputs.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut RngState, in_dim: usize, out_dim: usize) -> Linear {
        Linear {
            weight: Tensor::param(&[in_dim, out_dim], glorot(rng, in_dim, out_dim, in_dim * out_dim)),
            bias: Tensor::param(&[out_dim], vec![0.0; out_dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        let prod = tape.matmul(x, &self.weight);
        tape.add(&prod, &self.bias)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Per-feature normalization over the last axis.
pub struct LayerNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            scale: Tensor::param(&[dim], vec![1.0; dim]),
            shift: Tensor::param(&[dim], vec![0.0; dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        let last = x.rank() - 1;
        let mean = tape.mean_axes(x, &[last]);
        let centered = tape.sub(x, &mean);
        let sq = tape.square(&centered);
        let var = tape.mean_axes(&sq, &[last]);
        let var_eps = tape.add_scalar(&var, self.eps);
        let std = tape.sqrt(&var_eps);
        let normed = tape.div(&centered, &std);
        let scaled = tape.mul(&normed, &self.scale);
        tape.add(&scaled, &self.shift)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.scale"), self.scale.clone()));
        out.push((format!("{prefix}.shift"), self.shift.clone()));
    }
}

/// Scaled dot-product multi-head attention. `mask`, when present, is additive
/// over `[Lq, Lk]` scores (0 keeps, large negative blocks).
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub num_heads: usize,
    pub model_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut RngState, model_dim: usize, num_heads: usize) -> MultiHeadAttention {
        assert!(num_heads > 0 && model_dim % num_heads == 0, "model dim {model_dim} not divisible by {num_heads} heads");
        MultiHeadAttention {
            wq: Linear::new(rng, model_dim, model_dim),
            wk: Linear::new(rng, model_dim, model_dim),
            wv: Linear::new(rng, model_dim, model_dim),
            wo: Linear::new(rng, model_dim, model_dim),
            num_heads,
            model_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Tensor {
        self.forward_detailed(tape, q, k, v, mask).0
    }

    /// Forward pass that also returns the post-softmax weights `[heads, Lq, Lk]`.
    pub fn forward_detailed(
        &self,
        tape: &mut Tape,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        mask: Option<&Tensor>,
    ) -> (Tensor, Tensor) {
        let d = self.model_dim;
        let heads = self.num_heads;
        let dh = d / heads;
        assert_eq!(q.shape()[1], d, "query feature dim mismatch");
        assert_eq!(k.shape(), v.shape(), "key/value shapes must agree");
        assert_eq!(k.shape()[1], d, "key feature dim mismatch");
        let lq = q.shape()[0];
        let lk = k.shape()[0];
        assert!(lk > 0, "attention requires at least one key");

        let split = |tape: &mut Tape, x: &Tensor, l: usize| {
            let r = tape.reshape(x, &[l, heads, dh]);
            tape.permute(&r, &[1, 0, 2]) // [heads, L, dh]
        };
        let qp = self.wq.forward(tape, q);
        let kp = self.wk.forward(tape, k);
        let vp = self.wv.forward(tape, v);
        let qh = split(tape, &qp, lq);
        let kh = split(tape, &kp, lk);
        let vh = split(tape, &vp, lk);

        let kt = tape.permute(&kh, &[0, 2, 1]); // [heads, dh, Lk]
        let scores = tape.matmul(&qh, &kt);
        let scaled = tape.mul_scalar(&scores, 1.0 / (dh as f64).sqrt());
        let masked = match mask {
            Some(m) => {
                assert_eq!(m.shape(), &[lq, lk], "attention mask must be [Lq, Lk]");
                tape.add(&scaled, m)
            }
            None => scaled,
        };
        let weights = tape.softmax(&masked, 2);
        let ctx = tape.matmul(&weights, &vh); // [heads, Lq, dh]
        let merged = tape.permute(&ctx, &[1, 0, 2]);
        let flat = tape.reshape(&merged, &[lq, d]);
        (self.wo.forward(tape, &flat), weights)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.wq.collect_params(&format!("{prefix}.wq"), out);
        self.wk.collect_params(&format!("{prefix}.wk"), out);
        self.wv.collect_params(&format!("{prefix}.wv"), out);
        self.wo.collect_params(&format!("{prefix}.wo"), out);
    }
}

/// Pre-norm residual attention block: `q + MHA(LN(q), LN(kv), LN(kv))`.
pub struct AttnBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub mha: MultiHeadAttention,
}

impl AttnBlock {
    pub fn new(rng: &mut RngState, model_dim: usize, num_heads: usize) -> AttnBlock {
        AttnBlock {
            ln_q: LayerNorm::new(model_dim),
            ln_kv: LayerNorm::new(model_dim),
            mha: MultiHeadAttention::new(rng, model_dim, num_heads),
        }
    }

    /// Attention contribution before the residual add.
    pub fn attend(&self, tape: &mut Tape, q: &Tensor, kv: &Tensor, mask: Option<&Tensor>) -> Tensor {
        let qn = self.ln_q.forward(tape, q);
        let kvn = self.ln_kv.forward(tape, kv);
        self.mha.forward(tape, &qn, &kvn, &kvn, mask)
    }

    pub fn forward(&self, tape: &mut Tape, q: &Tensor, kv: &Tensor, mask: Option<&Tensor>) -> Tensor {
        let a = self.attend(tape, q, kv, mask);
        tape.add(q, &a)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.ln_q.collect_params(&format!("{prefix}.ln_q"), out);
        self.ln_kv.collect_params(&format!("{prefix}.ln_kv"), out);
        self.mha.collect_params(&format!("{prefix}.mha"), out);
    }
}

/// Pre-norm residual MLP block: `x + W2(act(W1(LN(x))))`.
pub struct MlpBlock {
    pub ln: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpBlock {
    pub fn new(rng: &mut RngState, dim: usize, hidden: usize) -> MlpBlock {
        MlpBlock {
            ln: LayerNorm::new(dim),
            fc1: Linear::new(rng, dim, hidden),
            fc2: Linear::new(rng, hidden, dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        let n = self.ln.forward(tape, x);
        let h = self.fc1.forward(tape, &n);
        let a = tape.leaky_relu(&h, LEAKY_RELU_SLOPE);
        let o = self.fc2.forward(tape, &a);
        tape.add(x, &o)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.ln.collect_params(&format!("{prefix}.ln"), out);
        self.fc1.collect_params(&format!("{prefix}.fc1"), out);
        self.fc2.collect_params(&format!("{prefix}.fc2"), out);
    }
}

/// Generalized divisive normalization over the channel axis:
/// `out_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j^2)`, or the inverse form
/// multiplying instead of dividing.
pub struct Gdn {
    pub beta: Tensor,
    pub gamma: Tensor,
    pub inverse: bool,
}

impl Gdn {
    pub fn new(channels: usize, inverse: bool) -> Gdn {
        let mut gamma = vec![0.0; channels * channels];
        for i in 0..channels {
            gamma[i * channels + i] = 0.1;
        }
        Gdn {
            beta: Tensor::param(&[channels], vec![1.0; channels]),
            gamma: Tensor::param(&[channels, channels], gamma),
            inverse,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        self.beta.with_values(|b| {
            assert!(b.iter().all(|&v| v >= GDN_BETA_MIN), "GDN beta below bound");
        });
        let shape = x.shape().to_vec();
        let c = *shape.last().unwrap();
        let n = x.len() / c;
        let flat = tape.reshape(x, &[n, c]);
        let sq = tape.square(&flat);
        let gamma_t = tape.permute(&self.gamma, &[1, 0]);
        let weighted = tape.matmul(&sq, &gamma_t);
        let denom_sq = tape.add(&weighted, &self.beta);
        let denom = tape.sqrt(&denom_sq);
        let out = if self.inverse {
            tape.mul(&flat, &denom)
        } else {
            tape.div(&flat, &denom)
        };
        tape.reshape(&out, &shape)
    }

    /// Clamp parameters back into their admissible region. Called after every
    /// optimizer step.
    pub fn project(&self) {
        let b: Vec<f64> = self.beta.to_vec().iter().map(|&v| v.max(GDN_BETA_MIN)).collect();
        self.beta.set_values(b);
        let g: Vec<f64> = self.gamma.to_vec().iter().map(|&v| v.max(0.0)).collect();
        self.gamma.set_values(g);
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.beta"), self.beta.clone()));
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
    }
}

/// Plain 2-D convolution layer with owned parameters.
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn new(rng: &mut RngState, k: usize, cin: usize, cout: usize, stride: usize, padding: usize) -> ConvLayer {
        let fan_in = k * k * cin;
        let fan_out = k * k * cout;
        ConvLayer {
            weight: Tensor::param(&[k, k, cin, cout], glorot(rng, fan_in, fan_out, fan_in * cout)),
            bias: Tensor::param(&[cout], vec![0.0; cout]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        tape.conv2d(x, &self.weight, &self.bias, self.stride, self.padding, None)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Transposed 2-D convolution layer (stride-2 upsampling in the synthesis path).
pub struct ConvTransposeLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTransposeLayer {
    pub fn new(
        rng: &mut RngState,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> ConvTransposeLayer {
        let fan_in = k * k * cin;
        let fan_out = k * k * cout;
        ConvTransposeLayer {
            weight: Tensor::param(&[k, k, cin, cout], glorot(rng, fan_in, fan_out, fan_in * cout)),
            bias: Tensor::param(&[cout], vec![0.0; cout]),
            stride,
            padding,
            output_padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        tape.conv2d_transpose(x, &self.weight, &self.bias, self.stride, self.padding, self.output_padding)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// The fixed 5x5 strictly causal raster mask: 1 at positions before the
/// center in raster order, 0 at the center and after.
pub fn causal_mask_5x5() -> Tensor {
    let mut m = vec![0.0; 25];
    for (i, slot) in m.iter_mut().enumerate() {
        if i < 12 {
            *slot = 1.0;
        }
    }
    Tensor::new(&[5, 5], m)
}

/// 5x5 masked convolution over the quantized latent: output at `(h, w)` sees
/// only raster-earlier input positions.
pub struct MaskedConv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub mask: Tensor,
}

impl MaskedConv {
    pub fn new(rng: &mut RngState, cin: usize, cout: usize) -> MaskedConv {
        let fan_in = 5 * 5 * cin;
        let fan_out = 5 * 5 * cout;
        MaskedConv {
            weight: Tensor::param(&[5, 5, cin, cout], glorot(rng, fan_in, fan_out, fan_in * cout)),
            bias: Tensor::param(&[cout], vec![0.0; cout]),
            mask: causal_mask_5x5(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        tape.conv2d(x, &self.weight, &self.bias, 1, 2, Some(&self.mask))
    }

    /// Output row for a single position, reading raw latent values. Loop
    /// order matches `conv2d` exactly, so results are bitwise identical to
    /// the full-tensor forward at that position.
    pub fn forward_at(&self, latent: &[f64], height: usize, width: usize, cin: usize, h: usize, w: usize) -> Vec<f64> {
        let kv = self.weight.to_vec();
        let bv = self.bias.to_vec();
        let mv = self.mask.to_vec();
        let cout = bv.len();
        let mut out = vec![0.0; cout];
        for (co, slot) in out.iter_mut().enumerate() {
            let mut acc = bv[co];
            for dy in 0..5usize {
                let iy = (h + dy) as isize - 2;
                if iy < 0 || iy >= height as isize {
                    continue;
                }
                for dx in 0..5usize {
                    if mv[dy * 5 + dx] == 0.0 {
                        continue;
                    }
                    let ix = (w + dx) as isize - 2;
                    if ix < 0 || ix >= width as isize {
                        continue;
                    }
                    let xo = (iy as usize * width + ix as usize) * cin;
                    let ko = ((dy * 5 + dx) * cin) * cout + co;
                    for ci in 0..cin {
                        acc += latent[xo + ci] * kv[ko + ci * cout];
                    }
                }
            }
            *slot = acc;
        }
        out
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}
