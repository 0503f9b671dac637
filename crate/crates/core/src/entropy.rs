//! Probability models for rate estimation and entropy coding: the
//! Gaussian-convolved-uniform conditional, the learned non-parametric
//! factorized prior for hyperpriors, quantizers, and integer CMF tables.

use crate::rng::RngState;
use crate::tensor::{Tape, Tensor, LIKELIHOOD_FLOOR};

/// Scales below this are clamped before any likelihood or CMF evaluation.
pub const SCALE_LOWER_BOUND: f64 = 0.11;

/// Probability mass allowed to fall outside a coding alphabet.
pub const TAIL_MASS: f64 = 1e-9;

pub const CMF_PRECISION_BITS: u32 = 16;
pub const CMF_TOTAL: u32 = 1 << CMF_PRECISION_BITS;

/// Conditional model for quantized latents: `N(mu, sigma^2)` convolved with a
/// unit uniform, evaluated per unit bin.
pub struct GaussianConditional {
    pub scale_lower_bound: f64,
    pub tail_mass: f64,
}

impl Default for GaussianConditional {
    fn default() -> Self {
        GaussianConditional {
            scale_lower_bound: SCALE_LOWER_BOUND,
            tail_mass: TAIL_MASS,
        }
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

impl GaussianConditional {
    pub fn new() -> GaussianConditional {
        GaussianConditional::default()
    }

    /// Clamp a raw scale tensor to the lower bound (differentiable).
    pub fn bound_scale(&self, tape: &mut Tape, sigma_raw: &Tensor) -> Tensor {
        tape.clamp_min(sigma_raw, self.scale_lower_bound)
    }

    /// Per-element bin likelihoods; `sigma` must already be lower-bounded.
    pub fn likelihood(&self, tape: &mut Tape, v: &Tensor, mu: &Tensor, sigma: &Tensor) -> Tensor {
        tape.gaussian_likelihood(v, mu, sigma)
    }

    /// Scalar bin probability, not floored; used for CMF construction.
    pub fn bin_probability(&self, v: f64, mu: f64, sigma: f64) -> f64 {
        let a = (v - mu).abs();
        let s2 = sigma * std::f64::consts::SQRT_2;
        0.5 * (libm::erfc((a - 0.5) / s2) - libm::erfc((a + 0.5) / s2))
    }

    pub fn cdf(&self, x: f64, mu: f64, sigma: f64) -> f64 {
        std_normal_cdf((x - mu) / sigma)
    }
}

/// Total code length in bits implied by a tensor of likelihoods.
pub fn rate_bits(tape: &mut Tape, likelihoods: &Tensor) -> Tensor {
    likelihoods.with_values(|v| {
        assert!(v.iter().all(|&p| p > 0.0 && p <= 1.0), "likelihoods must lie in (0, 1]");
    });
    let logs = tape.ln(likelihoods);
    let bits = tape.mul_scalar(&logs, -std::f64::consts::LOG2_E);
    tape.sum_all(&bits)
}

/// Quantizer behavior: additive uniform noise during training, deterministic
/// rounding (half away from zero) at coding time.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum QuantMode {
    TrainNoise,
    EvalRound,
}

/// Apply quantization. In `TrainNoise` mode the noise sample is a constant on
/// the tape, so no gradient flows into it; the identity path through `x`
/// keeps the objective differentiable.
pub fn quantize(tape: &mut Tape, x: &Tensor, mode: QuantMode, rng: Option<&mut RngState>) -> Tensor {
    match mode {
        QuantMode::TrainNoise => {
            let rng = rng.expect("TrainNoise quantization needs an RNG");
            let noise = Tensor::new(x.shape(), rng.noise_vec(x.len()));
            tape.add(x, &noise)
        }
        QuantMode::EvalRound => {
            let vals: Vec<f64> = x.with_values(|v| v.iter().map(|&e| e.round()).collect());
            Tensor::new(x.shape(), vals)
        }
    }
}

/// One stage of the per-channel cumulative network.
struct PriorStage {
    h: Tensor,
    b: Tensor,
    a: Option<Tensor>,
}

/// Learned univariate density, one independent model per channel. The CDF is
/// a monotone 1 -> 3 -> 3 -> 3 -> 1 network with softplus-positive matrices,
/// tanh-bounded gates, and a final sigmoid; initialized to approximate a
/// logistic CDF of scale 1.
pub struct FactorizedPrior {
    pub channels: usize,
    models: Vec<Vec<PriorStage>>,
}

const PRIOR_WIDTHS: [usize; 5] = [1, 3, 3, 3, 1];

impl FactorizedPrior {
    pub fn new(rng: &mut RngState, channels: usize) -> FactorizedPrior {
        let mut models = Vec::with_capacity(channels);
        for _ in 0..channels {
            let mut stages = Vec::with_capacity(4);
            for k in 0..4 {
                let (din, dout) = (PRIOR_WIDTHS[k], PRIOR_WIDTHS[k + 1]);
                let raw = (1.0 / dout as f64).exp_m1().ln();
                let h = Tensor::param(&[dout, din], vec![raw; dout * din]);
                let b = Tensor::param(
                    &[dout, 1],
                    (0..dout).map(|_| rng.uniform_range(-0.5, 0.5)).collect(),
                );
                let a = if k < 3 {
                    Some(Tensor::param(&[dout, 1], vec![0.0; dout]))
                } else {
                    None
                };
                stages.push(PriorStage { h, b, a });
            }
            models.push(stages);
        }
        FactorizedPrior { channels, models }
    }

    /// Pre-sigmoid cumulative logits for a row of values `[1, n]`.
    fn logits(&self, tape: &mut Tape, channel: usize, x: &Tensor) -> Tensor {
        let mut l = x.clone();
        for stage in &self.models[channel] {
            let hp = tape.softplus(&stage.h);
            l = tape.matmul(&hp, &l);
            l = tape.add(&l, &stage.b);
            if let Some(a) = &stage.a {
                let gate = tape.tanh(a);
                let act = tape.tanh(&l);
                let gated = tape.mul(&gate, &act);
                l = tape.add(&l, &gated);
            }
        }
        l
    }

    /// Modeled CDF at `x` for one channel (scalar path, used by CMF building).
    pub fn cdf_scalar(&self, channel: usize, x: f64) -> f64 {
        let mut tape = Tape::no_grad();
        let t = Tensor::new(&[1, 1], vec![x]);
        let l = self.logits(&mut tape, channel, &t);
        let z = l.item();
        if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        }
    }

    /// Bin likelihoods `CDF(v + 1/2) - CDF(v - 1/2)` for a flat slice of one
    /// channel's values, floored at 2^-64. Uses the sign trick so both tails
    /// evaluate without cancellation.
    pub fn likelihood(&self, tape: &mut Tape, channel: usize, values: &Tensor) -> Tensor {
        assert!(channel < self.channels, "factorized prior channel out of range");
        let n = values.len();
        let row = tape.reshape(values, &[1, n]);
        let upper_in = tape.add_scalar(&row, 0.5);
        let lower_in = tape.add_scalar(&row, -0.5);
        let upper = self.logits(tape, channel, &upper_in);
        let lower = self.logits(tape, channel, &lower_in);
        let sign_vals: Vec<f64> = upper
            .to_vec()
            .iter()
            .zip(lower.to_vec().iter())
            .map(|(&u, &l)| if u + l >= 0.0 { -1.0 } else { 1.0 })
            .collect();
        let sign = Tensor::new(&[1, n], sign_vals);
        let su = tape.mul(&upper, &sign);
        let sl = tape.mul(&lower, &sign);
        let pu = tape.sigmoid(&su);
        let pl = tape.sigmoid(&sl);
        let diff = tape.sub(&pl, &pu);
        let signed = tape.mul(&diff, &sign);
        let floored = tape.clamp_min(&signed, LIKELIHOOD_FLOOR);
        tape.reshape(&floored, values.shape())
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (c, stages) in self.models.iter().enumerate() {
            for (k, stage) in stages.iter().enumerate() {
                out.push((format!("{prefix}.ch{c}.h{k}"), stage.h.clone()));
                out.push((format!("{prefix}.ch{c}.b{k}"), stage.b.clone()));
                if let Some(a) = &stage.a {
                    out.push((format!("{prefix}.ch{c}.a{k}"), stage.a.clone().unwrap_or_else(|| a.clone())));
                }
            }
        }
    }
}

/// Integer cumulative frequency table driving the range coder for one symbol
/// alphabet `[v_min, v_max]`. Frequencies are >= 1 each and sum exactly to
/// 2^16; layout is symbols ascending with implicit cumulative sums.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CmfTable {
    pub v_min: i32,
    pub v_max: i32,
    pub freqs: Vec<u32>,
    cum: Vec<u32>,
}

impl CmfTable {
    /// Deterministic quantization of a probability vector: floor, bump zeros
    /// to one, then reconcile to the exact total by adding to the
    /// largest-probability symbols (index order on ties) or removing from the
    /// smallest-probability symbols that stay above one.
    pub fn from_probs(probs: &[f64], v_min: i32) -> CmfTable {
        let n = probs.len();
        assert!(n >= 1, "empty alphabet");
        assert!(n as u64 <= CMF_TOTAL as u64, "alphabet too large for precision");
        let total = CMF_TOTAL as u64;
        let mut freqs: Vec<u64> = probs
            .iter()
            .map(|&p| ((p.max(0.0) * total as f64).floor() as u64).clamp(1, total))
            .collect();
        let mut sum: u64 = freqs.iter().sum();

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| probs[j].partial_cmp(&probs[i]).unwrap().then(i.cmp(&j)));
        while sum < total {
            for &i in &order {
                if sum == total {
                    break;
                }
                freqs[i] += 1;
                sum += 1;
            }
        }
        while sum > total {
            for &i in order.iter().rev() {
                if sum == total {
                    break;
                }
                if freqs[i] > 1 {
                    freqs[i] -= 1;
                    sum -= 1;
                }
            }
        }

        let freqs: Vec<u32> = freqs.iter().map(|&f| f as u32).collect();
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in &freqs {
            acc += f;
            cum.push(acc);
        }
        debug_assert_eq!(acc, CMF_TOTAL);
        CmfTable {
            v_min,
            v_max: v_min + n as i32 - 1,
            freqs,
            cum,
        }
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn symbol_index(&self, v: i32) -> usize {
        assert!(
            v >= self.v_min && v <= self.v_max,
            "value {v} outside alphabet [{}, {}]",
            self.v_min,
            self.v_max
        );
        (v - self.v_min) as usize
    }

    pub fn value_of(&self, index: usize) -> i32 {
        self.v_min + index as i32
    }

    pub fn cum_low(&self, index: usize) -> u32 {
        self.cum[index]
    }

    pub fn freq(&self, index: usize) -> u32 {
        self.freqs[index]
    }

    /// Symbol whose cumulative interval contains `target` (decode lookup).
    pub fn find(&self, target: u32) -> usize {
        debug_assert!(target < CMF_TOTAL);
        match self.cum.binary_search(&target) {
            Ok(i) => {
                // target equals cum[i]: symbol i starts here unless degenerate
                let mut i = i;
                while self.freqs[i] == 0 {
                    i += 1;
                }
                i
            }
            Err(i) => i - 1,
        }
    }
}

/// CMF for a discretized Gaussian over `[v_min, v_max]`; edge bins absorb the
/// tails so the table covers the full mass.
pub fn gaussian_cmf(gc: &GaussianConditional, mu: f64, sigma: f64, v_min: i32, v_max: i32) -> CmfTable {
    assert!(v_min <= v_max, "invalid alphabet bounds");
    let sigma = sigma.max(gc.scale_lower_bound);
    let n = (v_max - v_min + 1) as usize;
    let mut probs = vec![0.0; n];
    for (i, slot) in probs.iter_mut().enumerate() {
        let v = (v_min + i as i32) as f64;
        *slot = gc.bin_probability(v, mu, sigma);
    }
    probs[0] += gc.cdf(v_min as f64 - 0.5, mu, sigma);
    probs[n - 1] += 1.0 - gc.cdf(v_max as f64 + 0.5, mu, sigma);
    debug_assert!(probs.iter().sum::<f64>() >= 1.0 - TAIL_MASS);
    CmfTable::from_probs(&probs, v_min)
}

/// CMF for one channel of a factorized prior over `[v_min, v_max]`.
pub fn factorized_cmf(prior: &FactorizedPrior, channel: usize, v_min: i32, v_max: i32) -> CmfTable {
    assert!(v_min <= v_max, "invalid alphabet bounds");
    let n = (v_max - v_min + 1) as usize;
    let mut probs = vec![0.0; n];
    for (i, slot) in probs.iter_mut().enumerate() {
        let v = (v_min + i as i32) as f64;
        *slot = prior.cdf_scalar(channel, v + 0.5) - prior.cdf_scalar(channel, v - 0.5);
    }
    probs[0] += prior.cdf_scalar(channel, v_min as f64 - 0.5);
    probs[n - 1] += 1.0 - prior.cdf_scalar(channel, v_max as f64 + 0.5);
    CmfTable::from_probs(&probs, v_min)
}
