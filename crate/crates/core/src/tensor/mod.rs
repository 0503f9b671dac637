//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable after creation except for gradient accumulation and
//! explicit parameter updates between forward passes. A [`Tape`] records the
//! operations of one forward pass (define-by-run) and is replayed in reverse
//! by [`Tape::backward`]. Every differentiable op lives in [`ops`].

mod ops;

pub use ops::{broadcast_shape, LIKELIHOOD_FLOOR};

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

struct Inner {
    shape: Vec<usize>,
    values: RwLock<Vec<f64>>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: bool,
    tracked: bool,
    from_op: bool,
    id: u64,
}

/// Shared handle to a dense tensor. Cloning is cheap (reference count).
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, tracked: bool, from_op: bool) -> Tensor {
        assert_eq!(
            numel(&shape),
            values.len(),
            "tensor shape {:?} does not match value count {}",
            shape,
            values.len()
        );
        Tensor {
            inner: Arc::new(Inner {
                shape,
                values: RwLock::new(values),
                grad: Mutex::new(None),
                requires_grad,
                tracked,
                from_op,
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
            }),
        }
    }

    /// Constant tensor: no gradient flows through it.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Tensor {
        Tensor::build(shape.to_vec(), values, false, false, false)
    }

    /// Trainable leaf tensor: receives a gradient on backward.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Tensor {
        Tensor::build(shape.to_vec(), values, true, true, false)
    }

    pub(crate) fn from_op(shape: Vec<usize>, values: Vec<f64>, tracked: bool) -> Tensor {
        Tensor::build(shape, values, false, tracked, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![0.0; numel(shape)])
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        Tensor::new(shape, vec![v; numel(shape)])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.tracked
    }

    /// Copy of the flat value buffer.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.values.read().unwrap().clone()
    }

    /// Run `f` over the flat value buffer without copying.
    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.values.read().unwrap())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.inner.values.read().unwrap();
        assert_eq!(v.len(), 1, "item() on tensor with {} elements", v.len());
        v[0]
    }

    /// Replace the value buffer. Only meaningful for leaf tensors between
    /// forward passes (optimizer updates, finite differences).
    pub fn set_values(&self, values: Vec<f64>) {
        let mut v = self.inner.values.write().unwrap();
        assert_eq!(v.len(), values.len(), "set_values length mismatch");
        *v = values;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.len()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, piece: &[f64]) {
        let mut g = self.inner.grad.lock().unwrap();
        match g.as_mut() {
            Some(buf) => {
                for (acc, p) in buf.iter_mut().zip(piece) {
                    *acc += p;
                }
            }
            None => *g = Some(piece.to_vec()),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.inner.values.read().unwrap();
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("values", &&v[..v.len().min(8)])
            .finish()
    }
}

/// Gradient accumulator used during the reverse sweep.
pub struct GradSink {
    map: HashMap<u64, Vec<f64>>,
}

impl GradSink {
    /// Add a gradient contribution for `t`. Each op's backward calls this once
    /// per use of `t`, so repeated uses accumulate exactly once each.
    pub fn add(&mut self, t: &Tensor, piece: Vec<f64>) {
        debug_assert_eq!(piece.len(), t.len());
        if t.inner.requires_grad {
            t.accumulate_grad(&piece);
        }
        if t.inner.from_op && t.inner.tracked {
            match self.map.get_mut(&t.inner.id) {
                Some(buf) => {
                    for (acc, p) in buf.iter_mut().zip(&piece) {
                        *acc += p;
                    }
                }
                None => {
                    self.map.insert(t.inner.id, piece);
                }
            }
        }
    }
}

type BackwardFn = Box<dyn FnOnce(&[f64], &mut GradSink)>;

struct Node {
    out: Tensor,
    backward: BackwardFn,
}

/// Operation record for one forward pass. Rebuilt every pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    consumed: bool,
    conv_macs: u64,
    matmul_macs: u64,
}

impl Tape {
    /// Tape that records gradients for tracked inputs.
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
            conv_macs: 0,
            matmul_macs: 0,
        }
    }

    /// Forward-only tape: computes values, records nothing.
    pub fn no_grad() -> Tape {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.grad_enabled
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Multiply-accumulate counts executed so far (convolutions, matmuls).
    /// Used by the profiler cross-check; counts actually executed multiplies.
    pub fn mac_counts(&self) -> (u64, u64) {
        (self.conv_macs, self.matmul_macs)
    }

    /// Drop all recorded operations and saved intermediates.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    fn wants_grad(&self, inputs: &[&Tensor]) -> bool {
        self.grad_enabled && inputs.iter().any(|t| t.inner.tracked)
    }

    fn record(&mut self, out: &Tensor, backward: impl FnOnce(&[f64], &mut GradSink) + 'static) {
        if out.inner.tracked {
            self.nodes.push(Node {
                out: out.clone(),
                backward: Box::new(backward),
            });
        }
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` tensor the recorded graph touches and consumes the
    /// tape; a second call without a new forward pass panics.
    pub fn backward(&mut self, loss: &Tensor) {
        assert_eq!(loss.len(), 1, "backward requires a scalar loss, got shape {:?}", loss.shape());
        assert!(!self.consumed, "backward called twice on the same tape");
        assert!(!self.nodes.is_empty(), "backward on an empty tape");
        self.consumed = true;
        let mut sink = GradSink { map: HashMap::new() };
        sink.map.insert(loss.inner.id, vec![1.0]);
        for node in std::mem::take(&mut self.nodes).into_iter().rev() {
            let Some(g) = sink.map.remove(&node.out.inner.id) else {
                continue;
            };
            (node.backward)(&g, &mut sink);
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Max relative error between analytic gradients and central finite
/// differences (step `1e-4`) over every coordinate of `inputs`.
///
/// Error metric per coordinate: `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Tape) -> Tensor,
{
    const H: f64 = 1e-4;
    for t in inputs {
        assert!(t.requires_grad(), "grad_check inputs must require gradients");
        t.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape);
    assert!(loss.item().is_finite(), "grad_check: non-finite loss");
    if loss.is_tracked() {
        tape.backward(&loss);
    }
    let analytic: Vec<Vec<f64>> = inputs.iter().map(|t| t.grad_or_zeros()).collect();

    let mut max_err = 0.0_f64;
    for (t, grads) in inputs.iter().zip(&analytic) {
        let base = t.to_vec();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += H;
            t.set_values(plus);
            let fp = f(&mut Tape::no_grad()).item();
            let mut minus = base.clone();
            minus[i] -= H;
            t.set_values(minus);
            let fm = f(&mut Tape::no_grad()).item();
            t.set_values(base.clone());
            assert!(fp.is_finite() && fm.is_finite(), "grad_check: non-finite probe");
            let numeric = (fp - fm) / (2.0 * H);
            let a = grads[i];
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            max_err = max_err.max(err);
        }
    }
    max_err
}
