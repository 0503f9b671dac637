//! Forward kernels and gradient rules for every tape operation.
//!
//! Loop orders are fixed and sequential everywhere: per-row/per-position
//! results are bitwise identical whether an op runs on a full tensor or on a
//! single extracted row. The serial entropy-coding path relies on this.

use super::{Tape, Tensor};

/// Trailing-aligned broadcast of two shapes; size-1 axes stretch.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {:?} and {:?} are not broadcast-compatible",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Materialize `vals` (of `in_shape`) stretched to `out_shape`.
fn expand_to(vals: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if in_shape == out_shape {
        return vals.to_vec();
    }
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let n = numel(out_shape);
    let mut out = vec![0.0; n];
    let mut coords = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut in_idx = 0usize;
        for d in 0..rank {
            let dim = if d < pad { 1 } else { in_shape[d - pad] };
            let c = if dim == 1 { 0 } else { coords[d] };
            in_idx = in_idx * dim + c;
        }
        *slot = vals[in_idx];
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// Sum `grad` (of `grad_shape`) down to `target_shape` (inverse of broadcast).
fn reduce_to(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let rank = grad_shape.len();
    let pad = rank - target_shape.len();
    let mut out = vec![0.0; numel(target_shape)];
    let mut coords = vec![0usize; rank];
    for &g in grad {
        let mut t_idx = 0usize;
        for d in 0..rank {
            let dim = if d < pad { 1 } else { target_shape[d - pad] };
            let c = if dim == 1 { 0 } else { coords[d] };
            t_idx = t_idx * dim + c;
        }
        out[t_idx] += g;
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < grad_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

fn inv_sqrt_2pi() -> f64 {
    1.0 / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_pdf(z: f64) -> f64 {
    inv_sqrt_2pi() * (-0.5 * z * z).exp()
}

/// Smallest likelihood the entropy ops report; keeps `log2` finite.
pub const LIKELIHOOD_FLOOR: f64 = 5.421010862427522e-20; // 2^-64

impl Tape {
    // ---- binary elementwise -------------------------------------------------

    fn binary(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        fwd: impl Fn(f64, f64) -> f64,
        bwd: impl Fn(f64, f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Tensor {
        let out_shape = broadcast_shape(a.shape(), b.shape());
        let av = a.with_values(|v| expand_to(v, a.shape(), &out_shape));
        let bv = b.with_values(|v| expand_to(v, b.shape(), &out_shape));
        let vals: Vec<f64> = av.iter().zip(&bv).map(|(&x, &y)| fwd(x, y)).collect();
        let out = Tensor::from_op(out_shape.clone(), vals, self.wants_grad(&[a, b]));
        if out.is_tracked() {
            let (a, b) = (a.clone(), b.clone());
            let outv = out.to_vec();
            self.record(&out.clone(), move |g, sink| {
                let mut da = vec![0.0; g.len()];
                let mut db = vec![0.0; g.len()];
                for i in 0..g.len() {
                    let (ga, gb) = bwd(av[i], bv[i], outv[i], g[i]);
                    da[i] = ga;
                    db[i] = gb;
                }
                sink.add(&a, reduce_to(&da, &out_shape, a.shape()));
                sink.add(&b, reduce_to(&db, &out_shape, b.shape()));
            });
        }
        out
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(a, b, |x, y| x + y, |_, _, _, g| (g, g))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(a, b, |x, y| x - y, |_, _, _, g| (g, -g))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(a, b, |x, y| x * y, |x, y, _, g| (g * y, g * x))
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        b.with_values(|v| {
            assert!(v.iter().all(|&y| y != 0.0), "division by zero");
        });
        self.binary(a, b, |x, y| x / y, |_, y, o, g| (g / y, -g * o / y))
    }

    // ---- unary elementwise --------------------------------------------------

    fn unary(
        &mut self,
        x: &Tensor,
        fwd: impl Fn(f64) -> f64,
        bwd: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let vals: Vec<f64> = x.with_values(|v| v.iter().map(|&e| fwd(e)).collect());
        let out = Tensor::from_op(x.shape().to_vec(), vals, self.wants_grad(&[x]));
        if out.is_tracked() {
            let xin = x.clone();
            let xv = x.to_vec();
            let outv = out.to_vec();
            self.record(&out.clone(), move |g, sink| {
                let dx: Vec<f64> = (0..g.len()).map(|i| bwd(xv[i], outv[i], g[i])).collect();
                sink.add(&xin, dx);
            });
        }
        out
    }

    pub fn neg(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, |v| -v, |_, _, g| -g)
    }

    pub fn exp(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, f64::exp, |_, o, g| g * o)
    }

    pub fn ln(&mut self, x: &Tensor) -> Tensor {
        x.with_values(|v| assert!(v.iter().all(|&e| e > 0.0), "log of non-positive value"));
        self.unary(x, f64::ln, |v, _, g| g / v)
    }

    pub fn sqrt(&mut self, x: &Tensor) -> Tensor {
        x.with_values(|v| assert!(v.iter().all(|&e| e >= 0.0), "sqrt of negative value"));
        self.unary(x, f64::sqrt, |_, o, g| g * 0.5 / o)
    }

    pub fn square(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, |v| v * v, |v, _, g| 2.0 * v * g)
    }

    pub fn tanh(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, f64::tanh, |_, o, g| g * (1.0 - o * o))
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        self.unary(
            x,
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            |_, o, g| g * o * (1.0 - o),
        )
    }

    pub fn softplus(&mut self, x: &Tensor) -> Tensor {
        self.unary(
            x,
            |v| {
                if v > 30.0 {
                    v
                } else if v < -30.0 {
                    v.exp()
                } else {
                    v.exp().ln_1p()
                }
            },
            |v, _, g| {
                let s = if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                };
                g * s
            },
        )
    }

    pub fn leaky_relu(&mut self, x: &Tensor, slope: f64) -> Tensor {
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            move |v, _, g| if v > 0.0 { g } else { g * slope },
        )
    }

    pub fn clamp_min(&mut self, x: &Tensor, bound: f64) -> Tensor {
        self.unary(
            x,
            move |v| v.max(bound),
            move |v, _, g| if v >= bound { g } else { 0.0 },
        )
    }

    pub fn mul_scalar(&mut self, x: &Tensor, c: f64) -> Tensor {
        self.unary(x, move |v| v * c, move |_, _, g| g * c)
    }

    pub fn add_scalar(&mut self, x: &Tensor, c: f64) -> Tensor {
        self.unary(x, move |v| v + c, |_, _, g| g)
    }

    // ---- discretized Gaussian likelihood ------------------------------------

    /// Probability that a unit-width bin centered on `v` falls under
    /// `N(mu, sigma^2)`: `Phi((v+1/2-mu)/sigma) - Phi((v-1/2-mu)/sigma)`,
    /// evaluated through `erfc` of non-negative arguments so both tails stay
    /// accurate, clamped below at 2^-64.
    pub fn gaussian_likelihood(&mut self, v: &Tensor, mu: &Tensor, sigma: &Tensor) -> Tensor {
        assert_eq!(v.shape(), mu.shape(), "gaussian_likelihood shape mismatch");
        assert_eq!(v.shape(), sigma.shape(), "gaussian_likelihood shape mismatch");
        sigma.with_values(|s| assert!(s.iter().all(|&e| e > 0.0), "gaussian_likelihood: sigma must be positive"));
        let vv = v.to_vec();
        let mv = mu.to_vec();
        let sv = sigma.to_vec();
        let sqrt2 = std::f64::consts::SQRT_2;
        let vals: Vec<f64> = (0..vv.len())
            .map(|i| {
                let a = (vv[i] - mv[i]).abs();
                let lo = (a - 0.5) / (sv[i] * sqrt2);
                let hi = (a + 0.5) / (sv[i] * sqrt2);
                let p = 0.5 * (libm::erfc(lo) - libm::erfc(hi));
                p.max(LIKELIHOOD_FLOOR).min(1.0)
            })
            .collect();
        let out = Tensor::from_op(v.shape().to_vec(), vals, self.wants_grad(&[v, mu, sigma]));
        if out.is_tracked() {
            let (v, mu, sigma) = (v.clone(), mu.clone(), sigma.clone());
            self.record(&out.clone(), move |g, sink| {
                let n = g.len();
                let mut dv = vec![0.0; n];
                let mut dmu = vec![0.0; n];
                let mut dsig = vec![0.0; n];
                for i in 0..n {
                    let s = sv[i];
                    let hi = (vv[i] - mv[i] + 0.5) / s;
                    let lo = (vv[i] - mv[i] - 0.5) / s;
                    let phi_hi = normal_pdf(hi);
                    let phi_lo = normal_pdf(lo);
                    dv[i] = g[i] * (phi_hi - phi_lo) / s;
                    dmu[i] = g[i] * (phi_lo - phi_hi) / s;
                    dsig[i] = g[i] * (lo * phi_lo - hi * phi_hi) / s;
                }
                sink.add(&v, dv);
                sink.add(&mu, dmu);
                sink.add(&sigma, dsig);
            });
        }
        out
    }

    // ---- matmul -------------------------------------------------------------

    /// Batched matrix product `[..., M, K] x [..., K, P] -> [..., M, P]` with
    /// broadcast over the batch axes.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert!(a.rank() >= 2 && b.rank() >= 2, "matmul requires rank >= 2");
        let (m, ka) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
        let (kb, p) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
        assert_eq!(ka, kb, "matmul inner dimensions disagree: {ka} vs {kb}");
        let k = ka;
        let batch = broadcast_shape(&a.shape()[..a.rank() - 2], &b.shape()[..b.rank() - 2]);
        let nb = numel(&batch);

        // Expand batch axes of both operands, then run plain 2-D products.
        let mut a_shape_b = batch.clone();
        a_shape_b.extend_from_slice(&[m, k]);
        let mut b_shape_b = batch.clone();
        b_shape_b.extend_from_slice(&[k, p]);
        let av = a.with_values(|v| expand_batched(v, a.shape(), &a_shape_b));
        let bv = b.with_values(|v| expand_batched(v, b.shape(), &b_shape_b));

        let mut out = vec![0.0; nb * m * p];
        for bi in 0..nb {
            let ao = bi * m * k;
            let bo = bi * k * p;
            let oo = bi * m * p;
            for i in 0..m {
                for j in 0..p {
                    let mut acc = 0.0;
                    for t in 0..k {
                        acc += av[ao + i * k + t] * bv[bo + t * p + j];
                    }
                    out[oo + i * p + j] = acc;
                }
            }
        }
        self.matmul_macs += (nb * m * p * k) as u64;
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[m, p]);
        let out = Tensor::from_op(out_shape, out, self.wants_grad(&[a, b]));
        if out.is_tracked() {
            let (a, b) = (a.clone(), b.clone());
            self.record(&out.clone(), move |g, sink| {
                let mut da = vec![0.0; nb * m * k];
                let mut db = vec![0.0; nb * k * p];
                for bi in 0..nb {
                    let ao = bi * m * k;
                    let bo = bi * k * p;
                    let oo = bi * m * p;
                    // dA = dC * B^T
                    for i in 0..m {
                        for t in 0..k {
                            let mut acc = 0.0;
                            for j in 0..p {
                                acc += g[oo + i * p + j] * bv[bo + t * p + j];
                            }
                            da[ao + i * k + t] = acc;
                        }
                    }
                    // dB = A^T * dC
                    for t in 0..k {
                        for j in 0..p {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av[ao + i * k + t] * g[oo + i * p + j];
                            }
                            db[bo + t * p + j] = acc;
                        }
                    }
                }
                sink.add(&a, reduce_batched(&da, &a_shape_b, a.shape()));
                sink.add(&b, reduce_batched(&db, &b_shape_b, b.shape()));
            });
        }
        out
    }

    // ---- convolutions -------------------------------------------------------

    /// 2-D convolution, channels-last. `x`: `[H, W, Cin]`, `kernels`:
    /// `[k, k, Cin, Cout]`, `bias`: `[Cout]`. Zero padding; output size
    /// `floor((H + 2*padding - k)/stride) + 1`. An optional `{0,1}` mask of
    /// shape `[k, k]` silences kernel taps in both forward and backward.
    pub fn conv2d(
        &mut self,
        x: &Tensor,
        kernels: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
        mask: Option<&Tensor>,
    ) -> Tensor {
        assert_eq!(x.rank(), 3, "conv2d input must be [H, W, Cin]");
        assert_eq!(kernels.rank(), 4, "conv2d kernels must be [k, k, Cin, Cout]");
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = kernels.shape()[0];
        assert_eq!(kernels.shape()[1], k, "conv2d kernels must be square");
        assert_eq!(kernels.shape()[2], cin, "conv2d kernel channel mismatch");
        let cout = kernels.shape()[3];
        assert_eq!(bias.shape(), &[cout], "conv2d bias mismatch");
        assert!(k % 2 == 1, "conv2d kernel size must be odd");
        assert!(stride >= 1, "conv2d stride must be >= 1");
        assert!(h + 2 * padding >= k && w + 2 * padding >= k, "conv2d output would be empty");
        let mv: Option<Vec<f64>> = mask.map(|m| {
            assert_eq!(m.shape(), &[k, k], "conv2d mask must be [k, k]");
            let v = m.to_vec();
            assert!(v.iter().all(|&e| e == 0.0 || e == 1.0), "conv2d mask must be 0/1-valued");
            v
        });
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;

        let xv = x.to_vec();
        let kv = kernels.to_vec();
        let bv = bias.to_vec();
        let mut out = vec![0.0; ho * wo * cout];
        let mut macs = 0u64;
        for oh in 0..ho {
            for ow in 0..wo {
                for co in 0..cout {
                    let mut acc = bv[co];
                    for dy in 0..k {
                        let iy = (oh * stride + dy) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            if let Some(m) = &mv {
                                if m[dy * k + dx] == 0.0 {
                                    continue;
                                }
                            }
                            let ix = (ow * stride + dx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xo = (iy as usize * w + ix as usize) * cin;
                            let ko = ((dy * k + dx) * cin) * cout + co;
                            for ci in 0..cin {
                                acc += xv[xo + ci] * kv[ko + ci * cout];
                            }
                            macs += cin as u64;
                        }
                    }
                    out[(oh * wo + ow) * cout + co] = acc;
                }
            }
        }
        self.conv_macs += macs;
        let out = Tensor::from_op(vec![ho, wo, cout], out, self.wants_grad(&[x, kernels, bias]));
        if out.is_tracked() {
            let (x, kernels, bias) = (x.clone(), kernels.clone(), bias.clone());
            self.record(&out.clone(), move |g, sink| {
                let mut dx = vec![0.0; h * w * cin];
                let mut dk = vec![0.0; k * k * cin * cout];
                let mut db = vec![0.0; cout];
                for oh in 0..ho {
                    for ow in 0..wo {
                        for co in 0..cout {
                            let go = g[(oh * wo + ow) * cout + co];
                            db[co] += go;
                            for dy in 0..k {
                                let iy = (oh * stride + dy) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for dx_ in 0..k {
                                    if let Some(m) = &mv {
                                        if m[dy * k + dx_] == 0.0 {
                                            continue;
                                        }
                                    }
                                    let ix = (ow * stride + dx_) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xo = (iy as usize * w + ix as usize) * cin;
                                    let ko = ((dy * k + dx_) * cin) * cout + co;
                                    for ci in 0..cin {
                                        dx[xo + ci] += go * kv[ko + ci * cout];
                                        dk[ko + ci * cout] += go * xv[xo + ci];
                                    }
                                }
                            }
                        }
                    }
                }
                sink.add(&x, dx);
                sink.add(&kernels, dk);
                sink.add(&bias, db);
            });
        }
        out
    }

    /// Transposed (fractionally strided) convolution, channels-last.
    /// `x`: `[H, W, Cin]`, `kernels`: `[k, k, Cin, Cout]`. Output size
    /// `(H-1)*stride - 2*padding + k + output_padding`.
    pub fn conv2d_transpose(
        &mut self,
        x: &Tensor,
        kernels: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Tensor {
        assert_eq!(x.rank(), 3, "conv2d_transpose input must be [H, W, Cin]");
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = kernels.shape()[0];
        assert_eq!(kernels.shape()[1], k);
        assert_eq!(kernels.shape()[2], cin, "conv2d_transpose kernel channel mismatch");
        let cout = kernels.shape()[3];
        assert_eq!(bias.shape(), &[cout]);
        assert!(output_padding < stride, "output_padding must be < stride");
        let ho = (h - 1) * stride + k + output_padding - 2 * padding;
        let wo = (w - 1) * stride + k + output_padding - 2 * padding;

        let xv = x.to_vec();
        let kv = kernels.to_vec();
        let bv = bias.to_vec();
        let mut out = vec![0.0; ho * wo * cout];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = bv[i % cout];
        }
        let mut macs = 0u64;
        for ih in 0..h {
            for iw in 0..w {
                let xo = (ih * w + iw) * cin;
                for dy in 0..k {
                    let oy = (ih * stride + dy) as isize - padding as isize;
                    if oy < 0 || oy >= ho as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let ox = (iw * stride + dx) as isize - padding as isize;
                        if ox < 0 || ox >= wo as isize {
                            continue;
                        }
                        let oo = (oy as usize * wo + ox as usize) * cout;
                        let ko = (dy * k + dx) * cin * cout;
                        for ci in 0..cin {
                            let xval = xv[xo + ci];
                            for co in 0..cout {
                                out[oo + co] += xval * kv[ko + ci * cout + co];
                            }
                        }
                        macs += (cin * cout) as u64;
                    }
                }
            }
        }
        self.conv_macs += macs;
        let out = Tensor::from_op(vec![ho, wo, cout], out, self.wants_grad(&[x, kernels, bias]));
        if out.is_tracked() {
            let (x, kernels, bias) = (x.clone(), kernels.clone(), bias.clone());
            self.record(&out.clone(), move |g, sink| {
                let mut dx = vec![0.0; h * w * cin];
                let mut dk = vec![0.0; k * k * cin * cout];
                let mut db = vec![0.0; cout];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % cout] += gv;
                }
                for ih in 0..h {
                    for iw in 0..w {
                        let xo = (ih * w + iw) * cin;
                        for dy in 0..k {
                            let oy = (ih * stride + dy) as isize - padding as isize;
                            if oy < 0 || oy >= ho as isize {
                                continue;
                            }
                            for dx_ in 0..k {
                                let ox = (iw * stride + dx_) as isize - padding as isize;
                                if ox < 0 || ox >= wo as isize {
                                    continue;
                                }
                                let oo = (oy as usize * wo + ox as usize) * cout;
                                let ko = (dy * k + dx_) * cin * cout;
                                for ci in 0..cin {
                                    let mut acc = 0.0;
                                    for co in 0..cout {
                                        acc += g[oo + co] * kv[ko + ci * cout + co];
                                        dk[ko + ci * cout + co] += xv[xo + ci] * g[oo + co];
                                    }
                                    dx[xo + ci] += acc;
                                }
                            }
                        }
                    }
                }
                sink.add(&x, dx);
                sink.add(&kernels, dk);
                sink.add(&bias, db);
            });
        }
        out
    }

    // ---- reductions ----------------------------------------------------------

    /// Sum over `axes`, keeping reduced axes as size 1.
    pub fn sum_axes(&mut self, x: &Tensor, axes: &[usize]) -> Tensor {
        for &ax in axes {
            assert!(ax < x.rank(), "axis {ax} out of range for rank {}", x.rank());
        }
        let mut out_shape = x.shape().to_vec();
        for &ax in axes {
            out_shape[ax] = 1;
        }
        let vals = x.with_values(|v| reduce_to(v, x.shape(), &out_shape));
        let out = Tensor::from_op(out_shape.clone(), vals, self.wants_grad(&[x]));
        if out.is_tracked() {
            let xin = x.clone();
            let x_shape = x.shape().to_vec();
            self.record(&out.clone(), move |g, sink| {
                sink.add(&xin, expand_to(g, &out_shape, &x_shape));
            });
        }
        out
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(&mut self, x: &Tensor) -> Tensor {
        let total = x.with_values(|v| v.iter().sum::<f64>());
        let out = Tensor::from_op(vec![], vec![total], self.wants_grad(&[x]));
        if out.is_tracked() {
            let xin = x.clone();
            self.record(&out.clone(), move |g, sink| {
                sink.add(&xin, vec![g[0]; xin.len()]);
            });
        }
        out
    }

    /// Mean over `axes`, keeping reduced axes as size 1.
    pub fn mean_axes(&mut self, x: &Tensor, axes: &[usize]) -> Tensor {
        let n: usize = axes.iter().map(|&ax| x.shape()[ax]).product();
        let s = self.sum_axes(x, axes);
        self.mul_scalar(&s, 1.0 / n as f64)
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Tensor {
        let n = x.len() as f64;
        let s = self.sum_all(x);
        self.mul_scalar(&s, 1.0 / n)
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: &Tensor, axis: usize) -> Tensor {
        assert!(axis < x.rank(), "softmax axis out of range");
        x.with_values(|v| assert!(v.iter().all(|e| e.is_finite()), "softmax of non-finite input"));
        let shape = x.shape().to_vec();
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xv = x.to_vec();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut m = f64::NEG_INFINITY;
                for l in 0..lane {
                    m = m.max(xv[base + l * inner]);
                }
                let mut denom = 0.0;
                for l in 0..lane {
                    let e = (xv[base + l * inner] - m).exp();
                    out[base + l * inner] = e;
                    denom += e;
                }
                for l in 0..lane {
                    out[base + l * inner] /= denom;
                }
            }
        }
        let out = Tensor::from_op(shape, out, self.wants_grad(&[x]));
        if out.is_tracked() {
            let xin = x.clone();
            let sv = out.to_vec();
            self.record(&out.clone(), move |g, sink| {
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * lane * inner + i;
                        let mut dot = 0.0;
                        for l in 0..lane {
                            let idx = base + l * inner;
                            dot += g[idx] * sv[idx];
                        }
                        for l in 0..lane {
                            let idx = base + l * inner;
                            dx[idx] = sv[idx] * (g[idx] - dot);
                        }
                    }
                }
                sink.add(&xin, dx);
            });
        }
        out
    }

    // ---- shape ops -----------------------------------------------------------

    pub fn reshape(&mut self, x: &Tensor, new_shape: &[usize]) -> Tensor {
        assert_eq!(numel(new_shape), x.len(), "reshape changes element count");
        let out = Tensor::from_op(new_shape.to_vec(), x.to_vec(), self.wants_grad(&[x]));
        if out.is_tracked() {
            let xin = x.clone();
            self.record(&out.clone(), move |g, sink| {
                sink.add(&xin, g.to_vec());
            });
        }
        out
    }

    pub fn permute(&mut self, x: &Tensor, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), x.rank(), "permute rank mismatch");
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            assert!(p < perm.len() && !seen[p], "invalid permutation {:?}", perm);
            seen[p] = true;
        }
        let in_shape = x.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let vals = x.with_values(|v| permute_vals(v, &in_shape, perm));
        let out = Tensor::from_op(out_shape, vals, self.wants_grad(&[x]));
        if out.is_tracked() {
            let xin = x.clone();
            let mut inv = vec![0usize; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let fwd_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
            self.record(&out.clone(), move |g, sink| {
                sink.add(&xin, permute_vals(g, &fwd_shape, &inv));
            });
        }
        out
    }

    /// Contiguous slice of `len` indices starting at `start` along `axis`.
    pub fn narrow(&mut self, x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
        assert!(axis < x.rank(), "narrow axis out of range");
        assert!(start + len <= x.shape()[axis], "narrow slice out of bounds");
        let shape = x.shape().to_vec();
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let lane = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let xv = x.to_vec();
        let mut vals = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * lane * inner + start * inner;
            vals.extend_from_slice(&xv[base..base + len * inner]);
        }
        let out = Tensor::from_op(out_shape, vals, self.wants_grad(&[x]));
        if out.is_tracked() {
            let xin = x.clone();
            let total = x.len();
            self.record(&out.clone(), move |g, sink| {
                let mut dx = vec![0.0; total];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = o * lane * inner + start * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                sink.add(&xin, dx);
            });
        }
        out
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        let rank = parts[0].rank();
        assert!(axis < rank, "concat axis out of range");
        for p in parts {
            assert_eq!(p.rank(), rank, "concat rank mismatch");
            for d in 0..rank {
                if d != axis {
                    assert_eq!(
                        p.shape()[d],
                        parts[0].shape()[d],
                        "concat shapes disagree off-axis"
                    );
                }
            }
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let outer: usize = out_shape[..axis].iter().product();
        let lanes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let values: Vec<Vec<f64>> = parts.iter().map(|p| p.to_vec()).collect();
        let mut vals = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (pi, v) in values.iter().enumerate() {
                let base = o * lanes[pi] * inner;
                vals.extend_from_slice(&v[base..base + lanes[pi] * inner]);
            }
        }
        let tracked = self.grad_enabled && parts.iter().any(|p| p.is_tracked());
        let out = Tensor::from_op(out_shape, vals, tracked);
        if out.is_tracked() {
            let handles: Vec<Tensor> = parts.iter().map(|&p| p.clone()).collect();
            self.record(&out.clone(), move |g, sink| {
                let total_lane: usize = lanes.iter().sum();
                let mut offset = 0usize;
                for (pi, t) in handles.iter().enumerate() {
                    let mut dx = vec![0.0; t.len()];
                    for o in 0..outer {
                        let src = (o * total_lane + offset) * inner;
                        let dst = o * lanes[pi] * inner;
                        dx[dst..dst + lanes[pi] * inner]
                            .copy_from_slice(&g[src..src + lanes[pi] * inner]);
                    }
                    sink.add(t, dx);
                    offset += lanes[pi];
                }
            });
        }
        out
    }
}

fn permute_vals(vals: &[f64], in_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let mut out = vec![0.0; vals.len()];
    let mut coords = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut idx = 0usize;
        for d in 0..rank {
            idx += coords[d] * in_strides[perm[d]];
        }
        *slot = vals[idx];
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// Like `expand_to` but for operands whose trailing two axes are matrix dims.
fn expand_batched(vals: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    expand_to(vals, in_shape, out_shape)
}

fn reduce_batched(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    reduce_to(grad, grad_shape, target_shape)
}

#[cfg(test)]
mod tests {
    use super::super::{grad_check, Tape, Tensor};
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
        }
    }

    #[test]
    fn add_applies_elementwise() {
        let mut tape = Tape::no_grad();
        let a = Tensor::new(&[2], vec![1.0, 2.0]);
        let b = Tensor::new(&[2], vec![3.0, 4.0]);
        assert_eq!(tape.add(&a, &b).to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn leaky_relu_and_clamp_match_definitions() {
        let mut tape = Tape::no_grad();
        let x = Tensor::new(&[2], vec![-1.0, 2.0]);
        assert_eq!(tape.leaky_relu(&x, 0.01).to_vec(), vec![-0.01, 2.0]);
        let y = Tensor::new(&[1], vec![0.001]);
        assert_eq!(tape.clamp_min(&y, 0.01).to_vec(), vec![0.01]);
    }

    #[test]
    #[should_panic(expected = "not broadcast-compatible")]
    fn incompatible_broadcast_panics() {
        let mut tape = Tape::no_grad();
        let a = Tensor::new(&[2], vec![1.0, 2.0]);
        let b = Tensor::new(&[3], vec![1.0, 2.0, 3.0]);
        let _ = tape.add(&a, &b);
    }

    #[test]
    #[should_panic(expected = "division by zero")]
    fn div_by_zero_panics() {
        let mut tape = Tape::no_grad();
        let a = Tensor::new(&[1], vec![1.0]);
        let b = Tensor::new(&[1], vec![0.0]);
        let _ = tape.div(&a, &b);
    }

    #[test]
    #[should_panic(expected = "log of non-positive")]
    fn ln_of_negative_panics() {
        let mut tape = Tape::no_grad();
        let x = Tensor::new(&[1], vec![-1.0]);
        let _ = tape.ln(&x);
    }

    #[test]
    #[should_panic(expected = "sqrt of negative")]
    fn sqrt_of_negative_panics() {
        let mut tape = Tape::no_grad();
        let x = Tensor::new(&[1], vec![-4.0]);
        let _ = tape.sqrt(&x);
    }

    // Broadcast semantics against an explicit tiling oracle, all shapes up to
    // rank 4 with dims <= 3.
    #[test]
    fn broadcast_matches_tiling_oracle() {
        fn tile_oracle(av: &[f64], ash: &[usize], bv: &[f64], bsh: &[usize]) -> Vec<f64> {
            let osh = broadcast_shape(ash, bsh);
            let n: usize = osh.iter().product();
            let rank = osh.len();
            let mut out = vec![0.0; n];
            for flat in 0..n {
                let mut rem = flat;
                let mut coords = vec![0usize; rank];
                for d in (0..rank).rev() {
                    coords[d] = rem % osh[d];
                    rem /= osh[d];
                }
                let idx_of = |sh: &[usize]| {
                    let pad = rank - sh.len();
                    let mut idx = 0usize;
                    for d in 0..sh.len() {
                        let c = if sh[d] == 1 { 0 } else { coords[d + pad] };
                        idx = idx * sh[d] + c;
                    }
                    idx
                };
                out[flat] = av[idx_of(ash)] + bv[idx_of(bsh)];
            }
            out
        }

        let shapes: Vec<Vec<usize>> = vec![
            vec![],
            vec![1],
            vec![3],
            vec![1, 3],
            vec![2, 1],
            vec![2, 3],
            vec![1, 2, 3],
            vec![3, 1, 2],
            vec![2, 1, 3, 1],
            vec![1, 2, 1, 3],
        ];
        fn compatible(a: &[usize], b: &[usize]) -> bool {
            let rank = a.len().max(b.len());
            (0..rank).all(|i| {
                let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
                let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
                da == db || da == 1 || db == 1
            })
        }

        let mut next = 0.0;
        for ash in &shapes {
            for bsh in &shapes {
                if !compatible(ash, bsh) {
                    continue;
                }
                let an: usize = ash.iter().product();
                let bn: usize = bsh.iter().product();
                let av: Vec<f64> = (0..an).map(|i| i as f64 + next).collect();
                let bv: Vec<f64> = (0..bn).map(|i| (i as f64) * 0.5 - next).collect();
                next += 0.25;
                let mut tape = Tape::no_grad();
                let got = tape
                    .add(&Tensor::new(ash, av.clone()), &Tensor::new(bsh, bv.clone()))
                    .to_vec();
                let want = tile_oracle(&av, ash, &bv, bsh);
                assert_eq!(got, want, "shapes {ash:?} + {bsh:?}");
            }
        }
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::no_grad();
        let i2 = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(tape.matmul(&i2, &m).to_vec(), vec![5.0, 6.0, 7.0, 8.0]);
        let a = Tensor::new(&[1, 2], vec![1.0, 2.0]);
        let b = Tensor::new(&[2, 1], vec![3.0, 4.0]);
        assert_eq!(tape.matmul(&a, &b).to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // independent naive oracle with a different loop nesting
        fn oracle(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
            let mut c = vec![0.0; m * p];
            for t in 0..k {
                for i in 0..m {
                    for j in 0..p {
                        c[i * p + j] += a[i * k + t] * b[t * p + j];
                    }
                }
            }
            c
        }
        let mut rng = crate::rng::RngState::new(7);
        let av: Vec<f64> = (0..12).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let bv: Vec<f64> = (0..8).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let mut tape = Tape::no_grad();
        let got = tape
            .matmul(&Tensor::new(&[3, 4], av.clone()), &Tensor::new(&[4, 2], bv.clone()))
            .to_vec();
        assert_close(&got, &oracle(&av, &bv, 3, 4, 2), 1e-12);
    }

    #[test]
    #[should_panic(expected = "inner dimensions disagree")]
    fn matmul_inner_mismatch_panics() {
        let mut tape = Tape::no_grad();
        let a = Tensor::new(&[2, 3], vec![0.0; 6]);
        let b = Tensor::new(&[2, 2], vec![0.0; 4]);
        let _ = tape.matmul(&a, &b);
    }

    #[test]
    fn batched_matmul_broadcasts_batch_dims() {
        let mut tape = Tape::no_grad();
        let a = Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(&[2, 1], vec![1.0, 1.0]);
        let c = tape.matmul(&a, &b);
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn conv2d_scalar_affine() {
        // 1x1 conv, kernel 2, bias 1, input [[3]] -> [[7]]
        let mut tape = Tape::no_grad();
        let x = Tensor::new(&[1, 1, 1], vec![3.0]);
        let k = Tensor::new(&[1, 1, 1, 1], vec![2.0]);
        let b = Tensor::new(&[1], vec![1.0]);
        assert_eq!(tape.conv2d(&x, &k, &b, 1, 0, None).to_vec(), vec![7.0]);
    }

    #[test]
    fn conv2d_overlap_counting() {
        // 3x3 ones kernel on 3x3 ones image, pad 1: center 9, corners 4
        let mut tape = Tape::no_grad();
        let x = Tensor::new(&[3, 3, 1], vec![1.0; 9]);
        let k = Tensor::new(&[3, 3, 1, 1], vec![1.0; 9]);
        let b = Tensor::new(&[1], vec![0.0]);
        let out = tape.conv2d(&x, &k, &b, 1, 1, None).to_vec();
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[2], 4.0);
        assert_eq!(out[6], 4.0);
        assert_eq!(out[8], 4.0);
    }

    #[test]
    fn masked_conv_matches_sliding_window_oracle() {
        // 5x5 masked conv vs a naive per-position oracle on random 8x8x2 input
        let mut rng = crate::rng::RngState::new(11);
        let xv: Vec<f64> = (0..8 * 8 * 2).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let kv: Vec<f64> = (0..5 * 5 * 2 * 3).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let bv: Vec<f64> = (0..3).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let mut mv = vec![0.0; 25];
        for i in 0..12 {
            mv[i] = 1.0; // strictly-before-center raster mask
        }
        let mut tape = Tape::no_grad();
        let got = tape
            .conv2d(
                &Tensor::new(&[8, 8, 2], xv.clone()),
                &Tensor::new(&[5, 5, 2, 3], kv.clone()),
                &Tensor::new(&[3], bv.clone()),
                1,
                2,
                Some(&Tensor::new(&[5, 5], mv.clone())),
            )
            .to_vec();

        let mut want = vec![0.0; 8 * 8 * 3];
        for oh in 0..8usize {
            for ow in 0..8usize {
                for co in 0..3usize {
                    let mut acc = bv[co];
                    for dy in 0..5usize {
                        for dx in 0..5usize {
                            let iy = oh as isize + dy as isize - 2;
                            let ix = ow as isize + dx as isize - 2;
                            if iy < 0 || iy >= 8 || ix < 0 || ix >= 8 {
                                continue;
                            }
                            for ci in 0..2usize {
                                acc += mv[dy * 5 + dx]
                                    * xv[(iy as usize * 8 + ix as usize) * 2 + ci]
                                    * kv[((dy * 5 + dx) * 2 + ci) * 3 + co];
                            }
                        }
                    }
                    want[(oh * 8 + ow) * 3 + co] = acc;
                }
            }
        }
        assert_close(&got, &want, 1e-12);
    }

    #[test]
    fn masked_conv_with_ones_mask_is_bitwise_unmasked() {
        let mut rng = crate::rng::RngState::new(3);
        let x = Tensor::new(&[6, 6, 2], (0..72).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
        let k = Tensor::new(&[3, 3, 2, 2], (0..36).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
        let b = Tensor::new(&[2], vec![0.1, -0.2]);
        let ones = Tensor::new(&[3, 3], vec![1.0; 9]);
        let mut tape = Tape::no_grad();
        let with_mask = tape.conv2d(&x, &k, &b, 1, 1, Some(&ones)).to_vec();
        let without = tape.conv2d(&x, &k, &b, 1, 1, None).to_vec();
        assert!(with_mask
            .iter()
            .zip(&without)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    #[should_panic(expected = "mask must be [k, k]")]
    fn conv_mask_shape_mismatch_panics() {
        let mut tape = Tape::no_grad();
        let x = Tensor::new(&[4, 4, 1], vec![0.0; 16]);
        let k = Tensor::new(&[3, 3, 1, 1], vec![0.0; 9]);
        let b = Tensor::new(&[1], vec![0.0]);
        let m = Tensor::new(&[5, 5], vec![1.0; 25]);
        let _ = tape.conv2d(&x, &k, &b, 1, 1, Some(&m));
    }

    #[test]
    fn conv2d_transpose_doubles_spatial_size() {
        let mut tape = Tape::no_grad();
        let x = Tensor::new(&[3, 3, 2], vec![0.5; 18]);
        let k = Tensor::new(&[5, 5, 2, 1], vec![0.1; 50]);
        let b = Tensor::new(&[1], vec![0.0]);
        let out = tape.conv2d_transpose(&x, &k, &b, 2, 2, 1);
        assert_eq!(out.shape(), &[6, 6, 1]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::no_grad();
        let x = Tensor::new(&[3], vec![0.0, 0.0, 0.0]);
        let s = tape.softmax(&x, 0).to_vec();
        assert_close(&s, &[1.0 / 3.0; 3], 1e-12);
        let big = Tensor::new(&[2], vec![1000.0, 0.0]);
        let sb = tape.softmax(&big, 0).to_vec();
        assert!(sb[0] > 1.0 - 1e-12 && sb[1] < 1e-12);
        assert!(sb.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::RngState::new(99);
        let x = Tensor::new(&[5, 7], (0..35).map(|_| rng.uniform_range(-4.0, 4.0)).collect());
        let mut tape = Tape::no_grad();
        let s = tape.softmax(&x, 1).to_vec();
        for r in 0..5 {
            let sum: f64 = s[r * 7..(r + 1) * 7].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_axis_example() {
        let mut tape = Tape::no_grad();
        let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let s = tape.sum_axes(&x, &[0]);
        assert_eq!(s.shape(), &[1, 2]);
        assert_eq!(s.to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    #[should_panic(expected = "axis 2 out of range")]
    fn sum_axis_out_of_range_panics() {
        let mut tape = Tape::no_grad();
        let x = Tensor::new(&[2, 2], vec![0.0; 4]);
        let _ = tape.sum_axes(&x, &[2]);
    }

    #[test]
    #[should_panic(expected = "disagree off-axis")]
    fn concat_off_axis_mismatch_panics() {
        let mut tape = Tape::no_grad();
        let a = Tensor::new(&[2, 2], vec![0.0; 4]);
        let b = Tensor::new(&[3, 3], vec![0.0; 9]);
        let _ = tape.concat(&[&a, &b], 0);
    }

    #[test]
    fn concat_narrow_permute_roundtrip_values() {
        let mut tape = Tape::no_grad();
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(&[2, 1], vec![5.0, 6.0]);
        let c = tape.concat(&[&a, &b], 1);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.narrow(&c, 1, 0, 2);
        assert_eq!(back.to_vec(), a.to_vec());
        let p = tape.permute(&a, &[1, 0]);
        assert_eq!(p.to_vec(), vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn gradients_of_all_elementwise_ops_check_out() {
        let mut rng = crate::rng::RngState::new(21);
        let a = Tensor::param(&[2, 3], (0..6).map(|_| rng.uniform_range(0.3, 2.0)).collect());
        let b = Tensor::param(&[3], (0..3).map(|_| rng.uniform_range(0.4, 1.5)).collect());
        let err = grad_check(
            |tape| {
                let s = tape.add(&a, &b);
                let d = tape.div(&a, &b);
                let m = tape.mul(&s, &d);
                let m1 = tape.mul_scalar(&m, 0.1);
                let e = tape.exp(&m1);
                let e1 = tape.add_scalar(&e, 1.0);
                let l = tape.ln(&e1);
                let q = tape.sqrt(&l);
                let t = tape.tanh(&q);
                let sg = tape.sigmoid(&t);
                let sp = tape.softplus(&sg);
                let diff = tape.sub(&sp, &b);
                let lr = tape.leaky_relu(&diff, 0.01);
                let sq = tape.square(&lr);
                tape.sum_all(&sq)
            },
            &[a.clone(), b.clone()],
        );
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn gradients_of_matmul_softmax_reductions_check_out() {
        let mut rng = crate::rng::RngState::new(22);
        let a = Tensor::param(&[3, 4], (0..12).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
        let b = Tensor::param(&[4, 2], (0..8).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
        let err = grad_check(
            |tape| {
                let c = tape.matmul(&a, &b);
                let s = tape.softmax(&c, 1);
                let m = tape.mean_axes(&s, &[0]);
                let n = tape.narrow(&m, 1, 0, 1);
                let sq = tape.square(&n);
                tape.sum_all(&sq)
            },
            &[a.clone(), b.clone()],
        );
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn gradients_of_conv_ops_check_out() {
        let mut rng = crate::rng::RngState::new(23);
        let x = Tensor::param(&[5, 5, 2], (0..50).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
        let k = Tensor::param(&[3, 3, 2, 2], (0..36).map(|_| rng.uniform_range(-0.5, 0.5)).collect());
        let b = Tensor::param(&[2], vec![0.1, -0.1]);
        let mask = Tensor::new(&[3, 3], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let err = grad_check(
            |tape| {
                let c = tape.conv2d(&x, &k, &b, 1, 1, Some(&mask));
                let u = tape.conv2d_transpose(&c, &k, &b, 2, 1, 1);
                let sq = tape.square(&u);
                tape.sum_all(&sq)
            },
            &[x.clone(), k.clone(), b.clone()],
        );
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn gaussian_likelihood_matches_frozen_erf_oracle() {
        let mut tape = Tape::no_grad();
        let v = Tensor::new(&[4], vec![0.0, 0.0, 1.0, -2.0]);
        let mu = Tensor::new(&[4], vec![0.0, 0.0, 0.3, 0.5]);
        let s = Tensor::new(&[4], vec![1.0, 0.11, 2.0, 0.3]);
        let p = tape.gaussian_likelihood(&v, &mu, &s).to_vec();
        // frozen high-precision CDF-difference values
        assert!((p[0] - 0.3829249225480262).abs() < 1e-15);
        assert!((p[1] - 0.9999945183173473).abs() < 1e-9);
        assert!((p[2] - 0.18591904497289744).abs() < 1e-15);
        assert!((p[3] - 1.3083924686045405e-11).abs() < 1e-22);
    }

    #[test]
    fn gaussian_likelihood_telescopes_to_one() {
        let mut tape = Tape::no_grad();
        let vs: Vec<f64> = (-30..=30).map(|v| v as f64).collect();
        let n = vs.len();
        let v = Tensor::new(&[n], vs);
        let mu = Tensor::new(&[n], vec![0.3; n]);
        let s = Tensor::new(&[n], vec![2.0; n]);
        let total: f64 = tape.gaussian_likelihood(&v, &mu, &s).to_vec().iter().sum();
        assert!((total - 1.0).abs() < 1e-9, "total = {total}");
    }

    #[test]
    fn gaussian_likelihood_gradients_check_out() {
        let mu = Tensor::param(&[3], vec![0.2, -0.4, 1.1]);
        let sigma = Tensor::param(&[3], vec![0.8, 1.5, 0.4]);
        let err = grad_check(
            |tape| {
                let v = Tensor::new(&[3], vec![0.0, 1.0, 1.0]);
                let p = tape.gaussian_likelihood(&v, &mu, &sigma);
                let lp = tape.ln(&p);
                let nats = tape.mul_scalar(&lp, std::f64::consts::LOG2_E);
                let bits = tape.neg(&nats);
                tape.sum_all(&bits)
            },
            &[mu.clone(), sigma.clone()],
        );
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn mac_counters_track_conv_and_matmul() {
        let mut tape = Tape::no_grad();
        let x = Tensor::new(&[4, 4, 2], vec![1.0; 32]);
        let k = Tensor::new(&[1, 1, 2, 3], vec![0.5; 6]);
        let b = Tensor::new(&[3], vec![0.0; 3]);
        let _ = tape.conv2d(&x, &k, &b, 1, 0, None);
        let (conv, _) = tape.mac_counts();
        assert_eq!(conv, 4 * 4 * 2 * 3);
        let a = Tensor::new(&[2, 3], vec![1.0; 6]);
        let c = Tensor::new(&[3, 5], vec![1.0; 15]);
        let _ = tape.matmul(&a, &c);
        let (_, mm) = tape.mac_counts();
        assert_eq!(mm, 2 * 3 * 5);
    }
}
