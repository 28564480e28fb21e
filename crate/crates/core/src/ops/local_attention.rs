//! Dilated local attention.
//!
//! Every position attends to the `k x k` grid of positions at offsets
//! `r * (dy, dx)` with `dy, dx` in `[-(k-1)/2, (k-1)/2]`, enumerated row-major
//! over `(dy, dx)`. Keys and values are sampled after projection, so sampling a
//! 1x1-projected map is the same as projecting the sampled raw features.
//!
//! Positions outside the map are handled by [`BorderMode`]:
//! * `MaskedSoftmax` drops them from the softmax.
//! * `ZeroPadKeys` keeps them with a zero key and zero value, so each
//!   contributes a logit of 0 to the normaliser and nothing to the output.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::ops::activation::softmax_in_place;
use crate::parallel::for_each_chunk;
use crate::tensor::{Shape4, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BorderMode {
    #[default]
    MaskedSoftmax,
    ZeroPadKeys,
}

impl std::str::FromStr for BorderMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "masked_softmax" | "masked" => Ok(BorderMode::MaskedSoftmax),
            "zero_pad_keys" | "zero_pad" => Ok(BorderMode::ZeroPadKeys),
            other => Err(format!(
                "unknown border mode `{other}` (expected masked_softmax or zero_pad_keys)"
            )),
        }
    }
}

/// Sampling window: odd kernel size `k` and dilation `r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalWindow {
    pub kernel: usize,
    pub dilation: usize,
}

impl LocalWindow {
    pub fn new(kernel: usize, dilation: usize) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return config_err(format!(
                "local kernel size must be odd and positive, got {kernel}"
            ));
        }
        if dilation == 0 {
            return config_err("dilation must be at least 1");
        }
        Ok(LocalWindow { kernel, dilation })
    }

    /// Number of sampled neighbours, `k^2`.
    pub fn samples(&self) -> usize {
        self.kernel * self.kernel
    }

    /// `(dy, dx)` displacement of neighbour `j`.
    pub fn offset(&self, j: usize) -> (isize, isize) {
        let half = (self.kernel / 2) as isize;
        let r = self.dilation as isize;
        (
            ((j / self.kernel) as isize - half) * r,
            ((j % self.kernel) as isize - half) * r,
        )
    }

    fn offsets(&self) -> Vec<(isize, isize)> {
        (0..self.samples()).map(|j| self.offset(j)).collect()
    }
}

#[inline]
fn shifted(y: usize, x: usize, (dy, dx): (isize, isize), h: usize, w: usize) -> Option<usize> {
    let ny = y as isize + dy;
    let nx = x as isize + dx;
    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
        None
    } else {
        Some(ny as usize * w + nx as usize)
    }
}

/// Neighbour features for every position, plus which samples were in bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledTensor {
    /// Logical shape `(n, K, c, h, w)`, row-major.
    pub data: Vec<f64>,
    /// Logical shape `(K, h, w)`.
    pub valid: Vec<bool>,
    pub n: usize,
    pub samples: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl SampledTensor {
    pub fn get(&self, n: usize, j: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[(((n * self.samples + j) * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn is_valid(&self, j: usize, y: usize, x: usize) -> bool {
        self.valid[(j * self.h + y) * self.w + x]
    }

    pub fn valid_count(&self, y: usize, x: usize) -> usize {
        (0..self.samples)
            .filter(|&j| self.is_valid(j, y, x))
            .count()
    }
}

/// Gathers the `k x k` dilated neighbourhood of every position. Out-of-bounds
/// samples read as zero and are marked invalid in either border mode.
pub fn sample_neighbors(x: &Tensor, window: LocalWindow) -> SampledTensor {
    let s = x.shape();
    let k2 = window.samples();
    let plane = s.h * s.w;
    let mut data = vec![0.0; s.n * k2 * s.c * plane];
    let mut valid = vec![false; k2 * plane];
    for j in 0..k2 {
        let off = window.offset(j);
        for y in 0..s.h {
            for xx in 0..s.w {
                let Some(src) = shifted(y, xx, off, s.h, s.w) else {
                    continue;
                };
                valid[j * plane + y * s.w + xx] = true;
                for n in 0..s.n {
                    for c in 0..s.c {
                        data[((n * k2 + j) * s.c + c) * plane + y * s.w + xx] =
                            x.data()[(n * s.c + c) * plane + src];
                    }
                }
            }
        }
    }
    SampledTensor {
        data,
        valid,
        n: s.n,
        samples: k2,
        c: s.c,
        h: s.h,
        w: s.w,
    }
}

/// Channel-planar `(n, c, h, w)` to position-major `[n][h*w][c]`.
fn position_major(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let plane = s.h * s.w;
    let mut out = vec![0.0; x.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = &x.data()[(n * s.c + c) * plane..][..plane];
            for (p, v) in src.iter().enumerate() {
                out[(n * plane + p) * s.c + c] = *v;
            }
        }
    }
    out
}

fn channel_planar(pm: &[f64], shape: Shape4, stride: usize, offset: usize) -> Tensor {
    let plane = shape.h * shape.w;
    let mut out = Tensor::zeros(shape);
    let d = out.data_mut();
    for n in 0..shape.n {
        for p in 0..plane {
            let rec = &pm[(n * plane + p) * stride + offset..][..shape.c];
            for (c, v) in rec.iter().enumerate() {
                d[(n * shape.c + c) * plane + p] = *v;
            }
        }
    }
    out
}

/// Forward result: the aggregated values and the attention weights.
#[derive(Clone, Debug)]
pub struct LocalAttention {
    /// `(n, c_v, h, w)`.
    pub output: Tensor,
    /// `(n, K, h, w)`; zero at masked samples.
    pub weights: Tensor,
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
    if sq != sk {
        return shape_err(format!("query {sq} and key {sk} shapes differ"));
    }
    if sv.n != sq.n || sv.h != sq.h || sv.w != sq.w {
        return shape_err(format!("value {sv} does not match query grid {sq}"));
    }
    Ok(())
}

/// MACs of one forward call: `n * N * K * (c_qk + c_v)`.
pub fn local_attention_macs(q: Shape4, c_v: usize, window: LocalWindow) -> u64 {
    (q.n * q.h * q.w * window.samples() * (q.c + c_v)) as u64
}

pub fn local_attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    window: LocalWindow,
    mode: BorderMode,
) -> Result<LocalAttention> {
    check_qkv(q, k, v)?;
    let s = q.shape();
    let cv = v.shape().c;
    let (h, w, cq) = (s.h, s.w, s.c);
    let plane = h * w;
    let k2 = window.samples();
    let offsets = window.offsets();
    let (qp, kp, vp) = (position_major(q), position_major(k), position_major(v));

    let rec = k2 + cv;
    let mut records = vec![0.0; s.n * plane * rec];
    for_each_chunk(&mut records, rec, |pos, out| {
        let n = pos / plane;
        let p = pos % plane;
        let (y, x) = (p / w, p % w);
        let qrow = &qp[pos * cq..][..cq];
        let (weights, agg) = out.split_at_mut(k2);
        let outside = match mode {
            BorderMode::MaskedSoftmax => f64::NEG_INFINITY,
            BorderMode::ZeroPadKeys => 0.0,
        };
        for (j, &off) in offsets.iter().enumerate() {
            weights[j] = match shifted(y, x, off, h, w) {
                Some(src) => {
                    let krow = &kp[(n * plane + src) * cq..][..cq];
                    qrow.iter().zip(krow).map(|(a, b)| a * b).sum()
                }
                None => outside,
            };
        }
        // the centre sample is always in bounds, so the row max is finite
        softmax_in_place(weights);
        for (j, &off) in offsets.iter().enumerate() {
            if let Some(src) = shifted(y, x, off, h, w) {
                let a = weights[j];
                let vrow = &vp[(n * plane + src) * cv..][..cv];
                for (o, vv) in agg.iter_mut().zip(vrow) {
                    *o += a * vv;
                }
            }
        }
    });
    Ok(LocalAttention {
        output: channel_planar(&records, Shape4::new(s.n, cv, h, w), rec, k2),
        weights: channel_planar(&records, Shape4::new(s.n, k2, h, w), rec, 0),
    })
}

/// Gradients `(dq, dk, dv)` given the forward weights and upstream `gout`.
pub fn local_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    weights: &Tensor,
    window: LocalWindow,
    gout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    check_qkv(q, k, v)?;
    let s = q.shape();
    let cv = v.shape().c;
    if gout.shape() != v.shape() {
        return shape_err(format!("upstream {} != output {}", gout.shape(), v.shape()));
    }
    let (h, w, cq) = (s.h, s.w, s.c);
    let plane = h * w;
    let k2 = window.samples();
    let offsets = window.offsets();
    let (qp, kp, vp) = (position_major(q), position_major(k), position_major(v));
    let gp = position_major(gout);
    let wp = position_major(weights);

    // pass 1, per query position: logit gradients and dq
    let rec1 = k2 + cq;
    let mut first = vec![0.0; s.n * plane * rec1];
    for_each_chunk(&mut first, rec1, |pos, out| {
        let n = pos / plane;
        let p = pos % plane;
        let (y, x) = (p / w, p % w);
        let grow = &gp[pos * cv..][..cv];
        let wrow = &wp[pos * k2..][..k2];
        let (glogit, gq) = out.split_at_mut(k2);
        for (j, &off) in offsets.iter().enumerate() {
            if let Some(src) = shifted(y, x, off, h, w) {
                let vrow = &vp[(n * plane + src) * cv..][..cv];
                glogit[j] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
            }
        }
        let mean: f64 = glogit.iter().zip(wrow).map(|(g, a)| g * a).sum();
        for (g, a) in glogit.iter_mut().zip(wrow) {
            *g = a * (*g - mean);
        }
        for (j, &off) in offsets.iter().enumerate() {
            if let Some(src) = shifted(y, x, off, h, w) {
                let krow = &kp[(n * plane + src) * cq..][..cq];
                for (o, kv) in gq.iter_mut().zip(krow) {
                    *o += glogit[j] * kv;
                }
            }
        }
    });

    // pass 2, per key position: gather from every query that sampled it
    let rec2 = cq + cv;
    let mut second = vec![0.0; s.n * plane * rec2];
    for_each_chunk(&mut second, rec2, |pos, out| {
        let n = pos / plane;
        let p = pos % plane;
        let (y, x) = (p / w, p % w);
        let (gk, gv) = out.split_at_mut(cq);
        for (j, &(dy, dx)) in offsets.iter().enumerate() {
            let Some(qpos) = shifted(y, x, (-dy, -dx), h, w) else {
                continue;
            };
            let qi = n * plane + qpos;
            let gl = first[qi * rec1 + j];
            let a = wp[qi * k2 + j];
            for (o, qv) in gk.iter_mut().zip(&qp[qi * cq..][..cq]) {
                *o += gl * qv;
            }
            for (o, gv_up) in gv.iter_mut().zip(&gp[qi * cv..][..cv]) {
                *o += a * gv_up;
            }
        }
    });

    let gq = channel_planar(&first, s, rec1, k2);
    let gk = channel_planar(&second, s, rec2, 0);
    let gv = channel_planar(&second, v.shape(), rec2, cq);
    Ok((gq, gk, gv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qkv(seed: u64, c: usize, h: usize, w: usize) -> (Tensor, Tensor, Tensor) {
        let s = Shape4::new(1, c, h, w);
        (
            Tensor::uniform(s, seed, -1.0, 1.0),
            Tensor::uniform(s, seed + 1, -1.0, 1.0),
            Tensor::uniform(s, seed + 2, -1.0, 1.0),
        )
    }

    #[test]
    fn window_validation() {
        assert!(LocalWindow::new(4, 1).is_err());
        assert!(LocalWindow::new(3, 0).is_err());
        let win = LocalWindow::new(3, 2).unwrap();
        assert_eq!(win.offset(0), (-2, -2));
        assert_eq!(win.offset(4), (0, 0));
        assert_eq!(win.offset(5), (0, 2));
    }

    #[test]
    fn single_sample_is_identity() {
        let x = Tensor::uniform(Shape4::new(2, 3, 4, 5), 1, -1.0, 1.0);
        let s = sample_neighbors(&x, LocalWindow::new(1, 3).unwrap());
        assert_eq!(s.data, x.data());
        assert!(s.valid.iter().all(|&v| v));
    }

    #[test]
    fn interior_and_corner_counts() {
        let x = Tensor::zeros(Shape4::new(1, 1, 9, 9));
        let s = sample_neighbors(&x, LocalWindow::new(5, 2).unwrap());
        assert_eq!(s.valid_count(4, 4), 25);
        let s = sample_neighbors(&x, LocalWindow::new(3, 1).unwrap());
        assert_eq!(s.valid_count(0, 0), 4);
        assert_eq!(s.valid_count(0, 4), 6);
    }

    #[test]
    fn sampled_entries_follow_offsets() {
        let x = Tensor::uniform(Shape4::new(1, 2, 5, 5), 3, -1.0, 1.0);
        let win = LocalWindow::new(3, 2).unwrap();
        let s = sample_neighbors(&x, win);
        // j = 8 is offset (+2, +2)
        assert_eq!(s.get(0, 8, 1, 1, 2), x.at(0, 1, 3, 4));
        assert!(!s.is_valid(8, 3, 3));
        assert_eq!(s.get(0, 8, 1, 3, 3), 0.0);
    }

    #[test]
    fn masked_weights_normalise_over_valid_samples() {
        let (q, k, v) = qkv(10, 3, 5, 6);
        let win = LocalWindow::new(3, 2).unwrap();
        let out = local_attention_forward(&q, &k, &v, win, BorderMode::MaskedSoftmax).unwrap();
        let samples = sample_neighbors(&q, win);
        for y in 0..5 {
            for x in 0..6 {
                let mut total = 0.0;
                for j in 0..9 {
                    let a = out.weights.at(0, j, y, x);
                    if !samples.is_valid(j, y, x) {
                        assert_eq!(a, 0.0);
                    }
                    total += a;
                }
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_pad_leaks_mass_to_padding() {
        let (q, k, v) = qkv(20, 2, 3, 3);
        let win = LocalWindow::new(3, 1).unwrap();
        let out = local_attention_forward(&q, &k, &v, win, BorderMode::ZeroPadKeys).unwrap();
        let samples = sample_neighbors(&q, win);
        let corner: f64 = (0..9)
            .filter(|&j| samples.is_valid(j, 0, 0))
            .map(|j| out.weights.at(0, j, 0, 0))
            .sum();
        assert!(corner < 1.0 - 1e-6);
        let all: f64 = (0..9).map(|j| out.weights.at(0, j, 0, 0)).sum();
        assert!((all - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_logits_average_valid_values() {
        let s = Shape4::new(1, 2, 4, 4);
        let q = Tensor::zeros(s);
        let k = Tensor::uniform(s, 1, -1.0, 1.0);
        let v = Tensor::uniform(s, 2, -1.0, 1.0);
        let win = LocalWindow::new(3, 1).unwrap();
        let out = local_attention_forward(&q, &k, &v, win, BorderMode::MaskedSoftmax).unwrap();
        let samples = sample_neighbors(&v, win);
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let valid: Vec<usize> = (0..9).filter(|&j| samples.is_valid(j, y, x)).collect();
                    let mean = valid
                        .iter()
                        .map(|&j| samples.get(0, j, c, y, x))
                        .sum::<f64>()
                        / valid.len() as f64;
                    assert!((out.output.at(0, c, y, x) - mean).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn mac_formula() {
        let win = LocalWindow::new(5, 3).unwrap();
        assert_eq!(
            local_attention_macs(Shape4::new(1, 16, 64, 64), 16, win),
            2 * 16 * 4096 * 25
        );
    }
}
