//! Brute-force references and the finite-difference gradient checker.
//!
//! Nothing here calls into the kernels it is used to check: the oracles read
//! tensors through plain indexing and evaluate with scalar loops.

use serde::Serialize;

use crate::error::{shape_err, GaldError, Result};
use crate::ops::conv::ConvWeights;
use crate::ops::BackwardFn;
use crate::tensor::{Shape4, Tensor};

/// Largest position count [`dense_attention_oracle`] accepts.
pub const DENSE_ORACLE_MAX_POSITIONS: usize = 64;

fn project(x: &Tensor, w: &Tensor, n: usize, pos: usize) -> Vec<f64> {
    let s = x.shape();
    let (c_out, c_in) = (w.shape().n, w.shape().c);
    let (y, xx) = (pos / s.w, pos % s.w);
    (0..c_out)
        .map(|o| {
            let mut acc = 0.0;
            for i in 0..c_in {
                acc += w.at(o, i, 0, 0) * x.at(n, i, y, xx);
            }
            acc
        })
        .collect()
}

/// Explicit `N x N` softmax attention: `softmax(X W_theta^T (X W_phi^T)^T) X W_g^T`.
///
/// Projection matrices are `(C', c, 1, 1)`. Output is `(n, C'_g, h, w)`.
pub fn dense_attention_oracle(
    x: &Tensor,
    w_theta: &Tensor,
    w_phi: &Tensor,
    w_g: &Tensor,
) -> Result<Tensor> {
    let s = x.shape();
    let positions = s.h * s.w;
    if positions > DENSE_ORACLE_MAX_POSITIONS {
        return Err(GaldError::TooLarge(format!(
            "dense oracle refuses {positions} positions (limit {DENSE_ORACLE_MAX_POSITIONS})"
        )));
    }
    for w in [w_theta, w_phi, w_g] {
        let ws = w.shape();
        if ws.c != s.c || ws.h != 1 || ws.w != 1 {
            return shape_err(format!("projection {ws} does not map {} channels", s.c));
        }
    }
    if w_theta.shape() != w_phi.shape() {
        return shape_err("query and key projections differ in shape");
    }
    let cg = w_g.shape().n;
    let mut out = Tensor::zeros(Shape4::new(s.n, cg, s.h, s.w));
    for n in 0..s.n {
        let q: Vec<Vec<f64>> = (0..positions).map(|p| project(x, w_theta, n, p)).collect();
        let k: Vec<Vec<f64>> = (0..positions).map(|p| project(x, w_phi, n, p)).collect();
        let v: Vec<Vec<f64>> = (0..positions).map(|p| project(x, w_g, n, p)).collect();
        for i in 0..positions {
            let mut logits = vec![0.0; positions];
            for j in 0..positions {
                let mut dot = 0.0;
                for c in 0..q[i].len() {
                    dot += q[i][c] * k[j][c];
                }
                logits[j] = dot;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for c in 0..cg {
                let mut acc = 0.0;
                for j in 0..positions {
                    acc += exps[j] / total * v[j][c];
                }
                let idx = out.index(n, c, i / s.w, i % s.w);
                out.data_mut()[idx] = acc;
            }
        }
    }
    Ok(out)
}

/// Direct six-loop cross-correlation with zero padding, stride, dilation,
/// groups and optional bias.
pub fn naive_conv_oracle(x: &Tensor, w: &ConvWeights) -> Result<Tensor> {
    let s = x.shape();
    let ks = w.kernel.shape();
    let g = w.geometry;
    if g.groups == 0 || g.stride == 0 || g.dilation == 0 {
        return shape_err("invalid conv geometry");
    }
    if ks.c * g.groups != s.c || !ks.n.is_multiple_of(g.groups) {
        return shape_err(format!(
            "kernel {ks} with {} groups does not fit input {s}",
            g.groups
        ));
    }
    let extent = |len: usize, k: usize| -> Option<usize> {
        let padded = (len + 2 * g.padding) as isize;
        let span = (g.dilation * (k - 1) + 1) as isize;
        (padded >= span).then(|| ((padded - span) as usize) / g.stride + 1)
    };
    let (Some(oh), Some(ow)) = (extent(s.h, ks.h), extent(s.w, ks.w)) else {
        return shape_err("conv output would be empty");
    };
    let cout_pg = ks.n / g.groups;
    let mut out = Tensor::zeros(Shape4::new(s.n, ks.n, oh, ow));
    for n in 0..s.n {
        for co in 0..ks.n {
            let group = co / cout_pg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = w.bias.as_ref().map_or(0.0, |b| b.data()[co]);
                    for cil in 0..ks.c {
                        let ci = group * ks.c + cil;
                        for ky in 0..ks.h {
                            for kx in 0..ks.w {
                                let iy =
                                    (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                let ix =
                                    (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += w.kernel.at(co, cil, ky, kx)
                                    * x.at(n, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    let idx = out.index(n, co, oy, ox);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
pub fn finite_diff_grad(
    f: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if !(eps > 0.0) {
        return shape_err(format!(
            "finite-difference step must be positive, got {eps}"
        ));
    }
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GaldError::NonFinite(format!(
                "objective is not finite around element {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Lower bound on the denominator of the relative error, so entries
    /// whose true gradient is ~0 are judged by absolute error instead.
    pub rel_floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-5,
            tol: 1e-6,
            rel_floor: 1e-3,
        }
    }
}

impl GradcheckOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

/// Comparison for one input or parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorGradReport {
    pub index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat element index of the largest relative error.
    pub argmax: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub tensors: Vec<TensorGradReport>,
    pub tol: f64,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }
}

/// Compares the analytic backward of `op` (seeded with ones) against central
/// differences of `sum(op(tensors))` for every tensor in `tensors`.
pub fn gradcheck<F>(op: F, tensors: &[Tensor], opts: GradcheckOptions) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<(Tensor, BackwardFn)>,
{
    let (out, backward) = op(tensors)?;
    let analytic = backward.apply(&Tensor::full(out.shape(), 1.0));
    if analytic.len() != tensors.len() {
        return shape_err(format!(
            "backward returned {} gradients for {} tensors",
            analytic.len(),
            tensors.len()
        ));
    }
    let mut reports = Vec::with_capacity(tensors.len());
    for (idx, (t, a)) in tensors.iter().zip(&analytic).enumerate() {
        if a.shape() != t.shape() {
            return shape_err(format!(
                "gradient {idx} has shape {}, expected {}",
                a.shape(),
                t.shape()
            ));
        }
        let numeric = finite_diff_grad(
            |probe| {
                let mut args = tensors.to_vec();
                args[idx] = probe.clone();
                Ok(op(&args)?.0.sum())
            },
            t,
            opts.eps,
        )?;
        let mut rep = TensorGradReport {
            index: idx,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            argmax: 0,
        };
        for (i, (an, nu)) in a.data().iter().zip(numeric.data()).enumerate() {
            let abs = (an - nu).abs();
            let rel = abs / an.abs().max(nu.abs()).max(opts.rel_floor);
            rep.max_abs_error = rep.max_abs_error.max(abs);
            if rel > rep.max_rel_error || !rel.is_finite() {
                rep.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                rep.argmax = i;
            }
        }
        reports.push(rep);
    }
    Ok(GradReport {
        tensors: reports,
        tol: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv::ConvGeometry;
    use crate::ops::{conv2d, sigmoid};

    #[test]
    fn linear_and_quadratic_functionals() {
        let x = Tensor::uniform(Shape4::new(1, 2, 2, 2), 3, -1.0, 1.0);
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
        let g = finite_diff_grad(
            |t| Ok(0.5 * t.data().iter().map(|v| v * v).sum::<f64>()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(g.max_abs_diff(&x).unwrap() < 1e-8);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let x = Tensor::zeros(Shape4::new(1, 1, 2, 3));
        let g = finite_diff_grad(|t| Ok(sigmoid(t)?.0.sum()), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| (v - 0.25).abs() < 1e-10));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::zeros(Shape4::new(1, 1, 1, 1));
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5).is_err());
        assert!(finite_diff_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
    }

    #[test]
    fn dense_oracle_limits_and_trivial_cases() {
        let big = Tensor::zeros(Shape4::new(1, 1, 9, 8));
        let w = Tensor::full(Shape4::new(1, 1, 1, 1), 1.0);
        assert!(matches!(
            dense_attention_oracle(&big, &w, &w, &w),
            Err(GaldError::TooLarge(_))
        ));

        let x = Tensor::uniform(Shape4::new(1, 3, 1, 1), 1, -1.0, 1.0);
        let wg = Tensor::uniform(Shape4::new(2, 3, 1, 1), 2, -1.0, 1.0);
        let wq = Tensor::uniform(Shape4::new(2, 3, 1, 1), 3, -1.0, 1.0);
        let out = dense_attention_oracle(&x, &wq, &wq, &wg).unwrap();
        for c in 0..2 {
            let v: f64 = (0..3).map(|i| wg.at(c, i, 0, 0) * x.data()[i]).sum();
            assert!((out.data()[c] - v).abs() < 1e-15);
        }

        let x = Tensor::uniform(Shape4::new(1, 3, 3, 2), 4, -1.0, 1.0);
        let zero = Tensor::zeros(Shape4::new(2, 3, 1, 1));
        let out = dense_attention_oracle(&x, &zero, &zero, &wg).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..6)
                .map(|p| {
                    (0..3)
                        .map(|i| wg.at(c, i, 0, 0) * x.at(0, i, p / 2, p % 2))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / 6.0;
            for p in 0..6 {
                assert!((out.at(0, c, p / 2, p % 2) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn naive_conv_identity() {
        let x = Tensor::uniform(Shape4::new(1, 2, 3, 3), 5, -1.0, 1.0);
        let mut k = Tensor::zeros(Shape4::new(2, 2, 1, 1));
        k.data_mut()[0] = 1.0;
        k.data_mut()[3] = 1.0;
        let w = ConvWeights::new(k, None, ConvGeometry::default()).unwrap();
        assert_eq!(naive_conv_oracle(&x, &w).unwrap(), x);
    }

    #[test]
    fn gradcheck_flags_corrupted_backward() {
        let x = Tensor::uniform(Shape4::new(1, 2, 5, 5), 1, -1.0, 1.0);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
        let w = ConvWeights::init(
            &mut rng,
            2,
            2,
            3,
            ConvGeometry {
                padding: 1,
                ..Default::default()
            },
            true,
        )
        .unwrap();
        let op = |ts: &[Tensor]| {
            let w = ConvWeights::new(ts[1].clone(), Some(ts[2].clone()), w.geometry)?;
            conv2d(&ts[0], &w)
        };
        let ts = [x, w.kernel.clone(), w.bias.clone().unwrap()];
        let good = gradcheck(op, &ts, GradcheckOptions::default()).unwrap();
        assert!(good.passed(), "{good:?}");

        let corrupted = |ts: &[Tensor]| {
            let (y, back) = op(ts)?;
            Ok((
                y,
                BackwardFn::new(move |g| {
                    back.apply(g)
                        .into_iter()
                        .map(|t| t.map(|v| v * 1.01))
                        .collect()
                }),
            ))
        };
        let bad = gradcheck(corrupted, &ts, GradcheckOptions::default()).unwrap();
        assert!(!bad.passed());
        assert!(bad.max_rel_error() > 1e-3);
    }
}
