//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so index order is a topological
//! order and backward is a single reverse sweep. Gradients flowing into the
//! same node are summed in the order their consumers appear on the tape,
//! which keeps the result bit-reproducible.

use crate::error::{shape_err, Result};
use crate::ops::activation::{
    relu_backward, relu_forward, sigmoid_backward, sigmoid_forward, softmax_rows_backward,
    softmax_rows_forward,
};
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvParams};
use crate::ops::layout::{from_rows, to_rows, transpose_last2};
use crate::ops::local_attention::{
    local_attention_backward, local_attention_forward, local_attention_macs, BorderMode,
    LocalWindow,
};
use crate::ops::matmul::{matmul_macs, matmul_nn, matmul_nt, matmul_tn};
use crate::ops::pool::{
    adaptive_windows, uniform_windows, window_pool_backward, window_pool_forward, Windows,
};
use crate::ops::resize::{bilinear_backward, bilinear_forward};
use crate::ops::{BackwardFn, MacCounter};
use crate::params::Parameters;
use crate::tensor::{concat_channels, ensure_same_shape, Shape4, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type GradFn = Box<dyn Fn(&Tensor) -> Vec<Tensor> + Send + Sync>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    grad_fn: Option<GradFn>,
}

pub struct Tape {
    nodes: Vec<Node>,
    counter: MacCounter,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients for every node of a tape after [`Tape::backward`].
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    fn take_or_zeros(&mut self, i: usize, shape: Shape4) -> Tensor {
        self.0[i].take().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_counter(MacCounter::new())
    }

    pub fn with_counter(counter: MacCounter) -> Self {
        Tape {
            nodes: Vec::new(),
            counter,
        }
    }

    pub fn counter(&self) -> &MacCounter {
        &self.counter
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            grad_fn: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: &[Var],
        grad_fn: impl Fn(&Tensor) -> Vec<Tensor> + Send + Sync + 'static,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|v| v.0).collect(),
            grad_fn: Some(Box::new(grad_fn)),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from `out` seeded with `seed`.
    pub fn backward(&self, out: Var, seed: &Tensor) -> Gradients {
        assert_eq!(
            seed.shape(),
            self.shape(out),
            "upstream gradient shape must match the output"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed.clone());
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let (Some(f), Some(g)) = (&node.grad_fn, &grads[i]) else {
                continue;
            };
            let parent_grads = f(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients(grads)
    }

    pub fn conv2d(&mut self, x: Var, p: &ConvParams<Var>) -> Result<Var> {
        let xv = self.value(x).clone();
        let kv = self.value(p.kernel).clone();
        let geometry = p.geometry;
        let y = conv2d_forward(&xv, &kv, p.bias.map(|b| self.value(b)), geometry)?;
        let with_bias = p.bias.is_some();
        let mut parents = vec![x, p.kernel];
        parents.extend(p.bias);
        Ok(self.push(y, &parents, move |g| {
            let (gx, gk, gb) =
                conv2d_backward(&xv, &kv, with_bias, geometry, g).expect("conv backward shapes");
            let mut out = vec![gx, gk];
            out.extend(gb);
            out
        }))
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let in_shape = self.shape(x);
        let y = bilinear_forward(self.value(x), out_h, out_w)?;
        Ok(self.push(y, &[x], move |g| vec![bilinear_backward(in_shape, g)]))
    }

    fn window_pool(&mut self, x: Var, wy: Windows, wx: Windows) -> Var {
        let in_shape = self.shape(x);
        let y = window_pool_forward(self.value(x), &wy, &wx);
        self.push(y, &[x], move |g| {
            vec![window_pool_backward(in_shape, &wy, &wx, g)]
        })
    }

    /// Adaptive average pool to `bins x bins`.
    pub fn adaptive_pool(&mut self, x: Var, bins: usize) -> Result<Var> {
        let s = self.shape(x);
        let wy = adaptive_windows(s.h, bins)?;
        let wx = adaptive_windows(s.w, bins)?;
        Ok(self.window_pool(x, wy, wx))
    }

    /// Non-overlapping `factor x factor` average pool.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x);
        let wy = uniform_windows(s.h, factor)?;
        let wx = uniform_windows(s.w, factor)?;
        Ok(self.window_pool(x, wy, wx))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = sigmoid_forward(self.value(x));
        let yc = y.clone();
        self.push(y, &[x], move |g| vec![sigmoid_backward(&yc, g)])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let y = relu_forward(&xv);
        self.push(y, &[x], move |g| vec![relu_backward(&xv, g)])
    }

    /// Softmax along the `w` axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let y = softmax_rows_forward(self.value(x));
        let yc = y.clone();
        self.push(y, &[x], move |g| vec![softmax_rows_backward(&yc, g)])
    }

    /// `a * b` per batch; counted.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let y = matmul_nn(&av, &bv)?;
        self.counter.add(matmul_macs(av.shape(), bv.shape()));
        Ok(self.push(y, &[a, b], move |g| {
            vec![
                matmul_nt(g, &bv).expect("matmul backward"),
                matmul_tn(&av, g).expect("matmul backward"),
            ]
        }))
    }

    /// `a * b^T` per batch; counted.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let y = matmul_nt(&av, &bv)?;
        let bs = bv.shape();
        self.counter
            .add(matmul_macs(av.shape(), Shape4::new(bs.n, 1, bs.w, bs.h)));
        Ok(self.push(y, &[a, b], move |g| {
            vec![
                matmul_nn(g, &bv).expect("matmul backward"),
                matmul_tn(g, &av).expect("matmul backward"),
            ]
        }))
    }

    /// `a^T * b` per batch; counted.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let y = matmul_tn(&av, &bv)?;
        let s = av.shape();
        self.counter
            .add(matmul_macs(Shape4::new(s.n, 1, s.w, s.h), bv.shape()));
        Ok(self.push(y, &[a, b], move |g| {
            vec![
                matmul_nt(&bv, g).expect("matmul backward"),
                matmul_nn(&av, g).expect("matmul backward"),
            ]
        }))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let y = transpose_last2(self.value(x));
        self.push(y, &[x], |g| vec![transpose_last2(g)])
    }

    /// `(n, c, h, w) -> (n, 1, h*w, c)`.
    pub fn to_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let y = to_rows(self.value(x));
        self.push(y, &[x], move |g| vec![from_rows(g, s.h, s.w)])
    }

    /// `(n, 1, h*w, c) -> (n, c, h, w)`.
    pub fn from_rows(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        if self.shape(x).h != h * w || self.shape(x).c != 1 {
            return shape_err(format!(
                "{} is not a row layout of a {h}x{w} grid",
                self.shape(x)
            ));
        }
        let y = from_rows(self.value(x), h, w);
        Ok(self.push(y, &[x], |g| vec![to_rows(g)]))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape4) -> Result<Var> {
        let from = self.shape(x);
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, &[x], move |g| {
            vec![g.clone().reshape(from).expect("reshape backward")]
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(y, &[a, b], |g| vec![g.clone(), g.clone()]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let y = av.zip_map(&bv, |x, y| x * y)?;
        Ok(self.push(y, &[a, b], move |g| {
            vec![
                g.zip_map(&bv, |g, b| g * b).expect("mul backward"),
                g.zip_map(&av, |g, a| g * a).expect("mul backward"),
            ]
        }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, &[x], move |g| vec![g.map(|v| v * factor)])
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, cb) = (self.shape(a).c, self.shape(b).c);
        let y = concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, &[a, b], move |g| {
            vec![
                g.slice_channels(0, ca).expect("concat backward"),
                g.slice_channels(ca, cb).expect("concat backward"),
            ]
        }))
    }

    /// Concatenates any number of maps along channels.
    pub fn concat_many(&mut self, parts: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = parts.split_first() else {
            return shape_err("concat of zero tensors");
        };
        rest.iter().try_fold(first, |acc, &p| self.concat(acc, p))
    }

    /// Dilated local attention of `q` against sampled `k`/`v`; counted.
    pub fn local_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        window: LocalWindow,
        mode: BorderMode,
    ) -> Result<Var> {
        let (qv, kv, vv) = (
            self.value(q).clone(),
            self.value(k).clone(),
            self.value(v).clone(),
        );
        ensure_same_shape(&qv, &kv)?;
        let fwd = local_attention_forward(&qv, &kv, &vv, window, mode)?;
        self.counter
            .add(local_attention_macs(qv.shape(), vv.shape().c, window));
        let weights = fwd.weights;
        Ok(self.push(fwd.output, &[q, k, v], move |g| {
            let (gq, gk, gv) = local_attention_backward(&qv, &kv, &vv, &weights, window, g)
                .expect("local attention backward");
            vec![gq, gk, gv]
        }))
    }
}

/// Records `f` on a fresh tape whose leaves are `inputs` followed by
/// `params`, and packages the result as `(output, BackwardFn)`.
///
/// The backward evaluator returns one gradient per input, then one per
/// parameter tensor in [`Parameters::visit`] order.
pub fn traced<P, F>(
    inputs: &[Tensor],
    params: &P,
    counter: &MacCounter,
    f: F,
) -> Result<(Tensor, BackwardFn)>
where
    P: Parameters,
    F: FnOnce(&mut Tape, &[Var], &P::Vars) -> Result<Var>,
{
    let mut tape = Tape::with_counter(counter.clone());
    let ins: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let pv = params.register(&mut tape);
    let leaves = tape.len();
    let out = f(&mut tape, &ins, &pv)?;
    let value = tape.value(out).clone();
    let backward = BackwardFn::new(move |g| {
        let mut grads = tape.backward(out, g);
        (0..leaves)
            .map(|i| {
                let shape = tape.nodes[i].value.shape();
                grads.take_or_zeros(i, shape)
            })
            .collect()
    });
    Ok((value, backward))
}
