//! Differentiable primitives.
//!
//! Each submodule holds the raw forward/backward kernels. The functions
//! re-exported at this level wrap a kernel in a one-node [`Tape`] and return
//! `(output, BackwardFn)`; the backward evaluator maps an upstream gradient
//! to gradients for every input and parameter, in declared order.
//!
//! [`Tape`]: crate::autograd::Tape

pub mod activation;
pub mod conv;
pub mod layout;
pub mod local_attention;
pub mod matmul;
pub mod pool;
pub mod resize;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::autograd::traced;
use crate::error::{shape_err, Result};
use crate::params::NoParams;
use crate::tensor::Tensor;

pub use conv::{ConvGeometry, ConvParams, ConvWeights};
pub use local_attention::{BorderMode, LocalWindow};

type BackwardBox = Box<dyn Fn(&Tensor) -> Vec<Tensor> + Send + Sync>;

/// Maps the gradient of a forward output to gradients of its inputs and
/// parameters.
pub struct BackwardFn(BackwardBox);

impl BackwardFn {
    pub fn new(f: impl Fn(&Tensor) -> Vec<Tensor> + Send + Sync + 'static) -> Self {
        BackwardFn(Box::new(f))
    }

    pub fn apply(&self, upstream: &Tensor) -> Vec<Tensor> {
        (self.0)(upstream)
    }
}

impl std::fmt::Debug for BackwardFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("BackwardFn")
    }
}

/// Multiply-accumulate counter. Clones share the same count.
///
/// Only affinity-related products are counted: the attention logits and the
/// weighted aggregation of values. Projections and convolutions are not.
#[derive(Clone, Debug, Default)]
pub struct MacCounter(Arc<AtomicU64>);

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, macs: u64) {
        self.0.fetch_add(macs, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// Cross-correlation with zero padding. Backward yields `[dx, dkernel, dbias?]`.
pub fn conv2d(x: &Tensor, w: &ConvWeights) -> Result<(Tensor, BackwardFn)> {
    traced(
        std::slice::from_ref(x),
        w,
        &MacCounter::new(),
        |tape, ins, p| tape.conv2d(ins[0], p),
    )
}

/// [`conv2d`] restricted to per-channel filters (`groups == c_out == x.c`).
pub fn depthwise_conv2d(x: &Tensor, w: &ConvWeights) -> Result<(Tensor, BackwardFn)> {
    let c = x.shape().c;
    if w.geometry.groups != c || w.c_out() != c {
        return shape_err(format!(
            "depthwise conv needs groups = c_out = {c}, got groups {} and c_out {}",
            w.geometry.groups,
            w.c_out()
        ));
    }
    conv2d(x, w)
}

/// Half-pixel bilinear resize to a size no smaller than the input.
pub fn bilinear_upsample(x: &Tensor, out_h: usize, out_w: usize) -> Result<(Tensor, BackwardFn)> {
    let s = x.shape();
    if out_h < s.h || out_w < s.w {
        return shape_err(format!(
            "bilinear_upsample target {out_h}x{out_w} is smaller than input {}x{}",
            s.h, s.w
        ));
    }
    unary(x, |tape, v| tape.resize(v, out_h, out_w))
}

/// Adaptive average pooling to a `bins x bins` grid.
pub fn avg_pool_adaptive(x: &Tensor, bins: usize) -> Result<(Tensor, BackwardFn)> {
    unary(x, |tape, v| tape.adaptive_pool(v, bins))
}

/// Non-overlapping `factor x factor` average pooling.
pub fn avg_pool2d(x: &Tensor, factor: usize) -> Result<(Tensor, BackwardFn)> {
    unary(x, |tape, v| tape.avg_pool(v, factor))
}

pub fn sigmoid(x: &Tensor) -> Result<(Tensor, BackwardFn)> {
    unary(x, |tape, v| Ok(tape.sigmoid(v)))
}

pub fn relu(x: &Tensor) -> Result<(Tensor, BackwardFn)> {
    unary(x, |tape, v| Ok(tape.relu(v)))
}

/// Softmax over the last (`w`) axis; every `n*c*h` row is independent.
pub fn softmax_lastdim(x: &Tensor) -> Result<(Tensor, BackwardFn)> {
    unary(x, |tape, v| Ok(tape.softmax_rows(v)))
}

/// `(B,1,m,p) x (B,1,p,q) -> (B,1,m,q)`; adds `B*m*p*q` to `counter`.
pub fn batched_matmul(
    a: &Tensor,
    b: &Tensor,
    counter: &MacCounter,
) -> Result<(Tensor, BackwardFn)> {
    traced(
        &[a.clone(), b.clone()],
        &NoParams,
        counter,
        |tape, ins, _| tape.matmul(ins[0], ins[1]),
    )
}

fn unary(
    x: &Tensor,
    f: impl FnOnce(&mut crate::autograd::Tape, crate::autograd::Var) -> Result<crate::autograd::Var>,
) -> Result<(Tensor, BackwardFn)> {
    traced(
        std::slice::from_ref(x),
        &NoParams,
        &MacCounter::new(),
        |tape, ins, _| f(tape, ins[0]),
    )
}
