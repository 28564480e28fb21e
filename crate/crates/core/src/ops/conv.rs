//! Grouped, strided, dilated 2-D cross-correlation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::parallel::for_each_chunk;
use crate::tensor::{Shape4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            dilation: 1,
            padding: 0,
            groups: 1,
        }
    }
}

/// A convolution's learnable tensors plus its fixed geometry.
///
/// `kernel` is shaped `(c_out, c_in / groups, kh, kw)`; `bias`, when present,
/// is `(1, c_out, 1, 1)`. The type parameter lets the same layout carry
/// tensors or tape handles.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub kernel: T,
    pub bias: Option<T>,
    pub geometry: ConvGeometry,
}

pub type ConvWeights = ConvParams<Tensor>;

impl<T> ConvParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ConvParams<U> {
        ConvParams {
            kernel: f(&self.kernel),
            bias: self.bias.as_ref().map(f),
            geometry: self.geometry,
        }
    }
}

impl ConvWeights {
    pub fn new(kernel: Tensor, bias: Option<Tensor>, geometry: ConvGeometry) -> Result<Self> {
        let ks = kernel.shape();
        if geometry.groups == 0 || geometry.stride == 0 || geometry.dilation == 0 {
            return shape_err("groups, stride and dilation must be positive");
        }
        if !ks.n.is_multiple_of(geometry.groups) {
            return shape_err(format!(
                "c_out {} not divisible by groups {}",
                ks.n, geometry.groups
            ));
        }
        if let Some(b) = &bias {
            if b.shape() != Shape4::new(1, ks.n, 1, 1) {
                return shape_err(format!(
                    "bias shape {} does not match c_out {}",
                    b.shape(),
                    ks.n
                ));
            }
        }
        Ok(ConvParams {
            kernel,
            bias,
            geometry,
        })
    }

    /// Uniform(-s, s) init with `s = 1/sqrt(fan_in)` for kernel and bias.
    pub fn init(
        rng: &mut ChaCha8Rng,
        c_out: usize,
        c_in: usize,
        kernel_size: usize,
        geometry: ConvGeometry,
        with_bias: bool,
    ) -> Result<Self> {
        if geometry.groups == 0 || !c_in.is_multiple_of(geometry.groups) {
            return shape_err(format!(
                "c_in {c_in} not divisible by groups {}",
                geometry.groups
            ));
        }
        let cin_pg = c_in / geometry.groups;
        let fan_in = (cin_pg * kernel_size * kernel_size) as f64;
        let s = 1.0 / fan_in.sqrt();
        let mut draw = |shape: Shape4| -> Result<Tensor> {
            let n = shape.numel()?;
            Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-s..s)).collect())
        };
        let kernel = draw(Shape4::new(c_out, cin_pg, kernel_size, kernel_size))?;
        let bias = if with_bias {
            Some(draw(Shape4::new(1, c_out, 1, 1))?)
        } else {
            None
        };
        ConvWeights::new(kernel, bias, geometry)
    }

    /// Bias-free 1x1 convolution from a `(c_out, c_in, 1, 1)` matrix.
    pub fn pointwise(matrix: Tensor) -> Result<Self> {
        let s = matrix.shape();
        if s.h != 1 || s.w != 1 {
            return shape_err(format!(
                "pointwise matrix must be (c_out, c_in, 1, 1), got {s}"
            ));
        }
        ConvWeights::new(matrix, None, ConvGeometry::default())
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.kernel.shape().c * self.geometry.groups
    }
}

/// Output extent along one axis, or `None` if the window never fits.
pub fn conv_out_len(
    len: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = len + 2 * pad;
    if padded < span {
        None
    } else {
        Some((padded - span) / stride + 1)
    }
}

struct Plan {
    x: Shape4,
    out: Shape4,
    kh: usize,
    kw: usize,
    cin_pg: usize,
    cout_pg: usize,
    g: ConvGeometry,
}

impl Plan {
    fn new(x: Shape4, kernel: Shape4, g: ConvGeometry) -> Result<Plan> {
        if g.groups == 0 || g.stride == 0 || g.dilation == 0 {
            return shape_err("groups, stride and dilation must be positive");
        }
        if kernel.h == 0 || kernel.w == 0 || kernel.n == 0 || kernel.c == 0 {
            return shape_err(format!("degenerate kernel shape {kernel}"));
        }
        if x.c != kernel.c * g.groups {
            return shape_err(format!(
                "input has {} channels, kernel expects {} x {} groups",
                x.c, kernel.c, g.groups
            ));
        }
        if !kernel.n.is_multiple_of(g.groups) {
            return shape_err(format!(
                "c_out {} not divisible by groups {}",
                kernel.n, g.groups
            ));
        }
        let oh = conv_out_len(x.h, kernel.h, g.stride, g.dilation, g.padding);
        let ow = conv_out_len(x.w, kernel.w, g.stride, g.dilation, g.padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return shape_err(format!(
                "conv output would be empty: input {x}, kernel {kernel}, geometry {g:?}"
            ));
        };
        Ok(Plan {
            x,
            out: Shape4::new(x.n, kernel.n, oh, ow),
            kh: kernel.h,
            kw: kernel.w,
            cin_pg: kernel.c,
            cout_pg: kernel.n / g.groups,
            g,
        })
    }

    /// Output indices along one axis whose input tap `o*stride + tap*dilation - pad`
    /// lands inside `[0, len)`.
    fn valid_range(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let off = (tap * self.g.dilation) as isize - self.g.padding as isize;
        let s = self.g.stride as isize;
        // o*s + off >= 0  and  o*s + off <= len-1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = len as isize - 1 - off;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(out_len as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    fn input_coord(&self, o: usize, tap: usize) -> usize {
        o * self.g.stride + tap * self.g.dilation - self.g.padding
    }
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with four interleaved partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, at) = a.split_at(a.len() / 4 * 4);
    let (bc, bt) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(4).zip(bc.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = at.iter().zip(bt).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn conv2d_forward(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    geometry: ConvGeometry,
) -> Result<Tensor> {
    let p = Plan::new(x.shape(), kernel.shape(), geometry)?;
    if let Some(b) = bias {
        if b.len() != p.out.c {
            return shape_err(format!(
                "bias has {} entries, c_out is {}",
                b.len(),
                p.out.c
            ));
        }
    }
    let (oh, ow) = (p.out.h, p.out.w);
    let (h, w) = (p.x.h, p.x.w);
    let mut out = Tensor::zeros(p.out);
    let xd = x.data();
    let kd = kernel.data();
    let bd = bias.map(|b| b.data());
    for_each_chunk(out.data_mut(), oh * ow, |plane_idx, plane| {
        let n = plane_idx / p.out.c;
        let co = plane_idx % p.out.c;
        if let Some(bd) = bd {
            plane.fill(bd[co]);
        }
        let group = co / p.cout_pg;
        for cil in 0..p.cin_pg {
            let ci = group * p.cin_pg + cil;
            let xp = &xd[(n * p.x.c + ci) * h * w..][..h * w];
            for ky in 0..p.kh {
                let (y0, y1) = p.valid_range(ky, h, oh);
                for kx in 0..p.kw {
                    let (x0, x1) = p.valid_range(kx, w, ow);
                    let wv = kd[((co * p.cin_pg + cil) * p.kh + ky) * p.kw + kx];
                    for oy in y0..y1 {
                        let iy = p.input_coord(oy, ky);
                        let xrow = &xp[iy * w..];
                        let orow = &mut plane[oy * ow..];
                        if p.g.stride == 1 && x1 > x0 {
                            let ix0 = p.input_coord(x0, kx);
                            axpy(&mut orow[x0..x1], wv, &xrow[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                orow[ox] += wv * xrow[p.input_coord(ox, kx)];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradients `(dx, dkernel, dbias)` for upstream `gy`.
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    with_bias: bool,
    geometry: ConvGeometry,
    gy: &Tensor,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let p = Plan::new(x.shape(), kernel.shape(), geometry)?;
    if gy.shape() != p.out {
        return shape_err(format!(
            "upstream gradient {} != conv output {}",
            gy.shape(),
            p.out
        ));
    }
    let (oh, ow) = (p.out.h, p.out.w);
    let (h, w) = (p.x.h, p.x.w);
    let xd = x.data();
    let kd = kernel.data();
    let gd = gy.data();

    let mut gx = Tensor::zeros(p.x);
    for_each_chunk(gx.data_mut(), h * w, |plane_idx, gplane| {
        let n = plane_idx / p.x.c;
        let ci = plane_idx % p.x.c;
        let group = ci / p.cin_pg;
        let cil = ci % p.cin_pg;
        for col in 0..p.cout_pg {
            let co = group * p.cout_pg + col;
            let gyp = &gd[(n * p.out.c + co) * oh * ow..][..oh * ow];
            for ky in 0..p.kh {
                let (y0, y1) = p.valid_range(ky, h, oh);
                for kx in 0..p.kw {
                    let (x0, x1) = p.valid_range(kx, w, ow);
                    let wv = kd[((co * p.cin_pg + cil) * p.kh + ky) * p.kw + kx];
                    for oy in y0..y1 {
                        let iy = p.input_coord(oy, ky);
                        if p.g.stride == 1 && x1 > x0 {
                            let ix0 = iy * w + p.input_coord(x0, kx);
                            let grow = &gyp[oy * ow + x0..oy * ow + x1];
                            axpy(&mut gplane[ix0..ix0 + grow.len()], wv, grow);
                        } else {
                            for ox in x0..x1 {
                                gplane[iy * w + p.input_coord(ox, kx)] += wv * gyp[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    });

    let mut gk = Tensor::zeros(kernel.shape());
    let per_co = p.cin_pg * p.kh * p.kw;
    for_each_chunk(gk.data_mut(), per_co, |co, gchunk| {
        let group = co / p.cout_pg;
        for n in 0..p.x.n {
            let gyp = &gd[(n * p.out.c + co) * oh * ow..][..oh * ow];
            for cil in 0..p.cin_pg {
                let ci = group * p.cin_pg + cil;
                let xp = &xd[(n * p.x.c + ci) * h * w..][..h * w];
                for ky in 0..p.kh {
                    let (y0, y1) = p.valid_range(ky, h, oh);
                    for kx in 0..p.kw {
                        let (x0, x1) = p.valid_range(kx, w, ow);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = p.input_coord(oy, ky);
                            if p.g.stride == 1 && x1 > x0 {
                                let ix0 = iy * w + p.input_coord(x0, kx);
                                let grow = &gyp[oy * ow + x0..oy * ow + x1];
                                acc += dot(grow, &xp[ix0..ix0 + grow.len()]);
                            } else {
                                for ox in x0..x1 {
                                    acc += gyp[oy * ow + ox] * xp[iy * w + p.input_coord(ox, kx)];
                                }
                            }
                        }
                        gchunk[(cil * p.kh + ky) * p.kw + kx] += acc;
                    }
                }
            }
        }
    });

    let gb = with_bias.then(|| {
        let mut gb = Tensor::zeros(Shape4::new(1, p.out.c, 1, 1));
        for (co, slot) in gb.data_mut().iter_mut().enumerate() {
            for n in 0..p.out.n {
                *slot += gd[(n * p.out.c + co) * oh * ow..][..oh * ow]
                    .iter()
                    .sum::<f64>();
            }
        }
        gb
    });
    Ok((gx, gk, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{conv2d, depthwise_conv2d};

    fn geom(stride: usize, dilation: usize, padding: usize, groups: usize) -> ConvGeometry {
        ConvGeometry {
            stride,
            dilation,
            padding,
            groups,
        }
    }

    #[test]
    fn identity_pointwise_kernel() {
        let x = Tensor::uniform(Shape4::new(2, 3, 4, 5), 1, -1.0, 1.0);
        let mut eye = Tensor::zeros(Shape4::new(3, 3, 1, 1));
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let w = ConvWeights::new(eye, None, ConvGeometry::default()).unwrap();
        let (y, _) = conv2d(&x, &w).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::full(Shape4::new(1, 1, 3, 3), 1.0);
        let w = ConvWeights::new(
            Tensor::full(Shape4::new(1, 1, 3, 3), 1.0),
            None,
            ConvGeometry::default(),
        )
        .unwrap();
        let (y, _) = conv2d(&x, &w).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn output_size_formula() {
        let x = Tensor::zeros(Shape4::new(1, 2, 7, 9));
        let w = ConvWeights::new(
            Tensor::zeros(Shape4::new(4, 2, 3, 3)),
            None,
            geom(2, 2, 1, 1),
        )
        .unwrap();
        let (y, _) = conv2d(&x, &w).unwrap();
        // (7 + 2 - 4 - 1)/2 + 1 = 3, (9 + 2 - 4 - 1)/2 + 1 = 4
        assert_eq!(y.shape(), Shape4::new(1, 4, 3, 4));
    }

    #[test]
    fn empty_output_is_an_error() {
        let x = Tensor::zeros(Shape4::new(1, 1, 2, 2));
        let w = ConvWeights::new(
            Tensor::zeros(Shape4::new(1, 1, 3, 3)),
            None,
            ConvGeometry::default(),
        )
        .unwrap();
        assert!(conv2d(&x, &w).is_err());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::zeros(Shape4::new(1, 3, 4, 4));
        let w = ConvWeights::new(
            Tensor::zeros(Shape4::new(2, 2, 1, 1)),
            None,
            ConvGeometry::default(),
        )
        .unwrap();
        assert!(conv2d(&x, &w).is_err());
        assert!(ConvWeights::new(
            Tensor::zeros(Shape4::new(3, 1, 1, 1)),
            None,
            geom(1, 1, 0, 2)
        )
        .is_err());
    }

    #[test]
    fn delta_depthwise_kernel_is_identity() {
        let x = Tensor::uniform(Shape4::new(1, 3, 5, 5), 4, -1.0, 1.0);
        let mut k = Tensor::zeros(Shape4::new(3, 1, 3, 3));
        for c in 0..3 {
            k.data_mut()[c * 9 + 4] = 1.0;
        }
        let w = ConvWeights::new(k, None, geom(1, 1, 1, 3)).unwrap();
        let (y, _) = depthwise_conv2d(&x, &w).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_channels_are_independent() {
        let x = Tensor::uniform(Shape4::new(1, 3, 6, 6), 5, -1.0, 1.0);
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let w = ConvWeights::init(&mut rng, 3, 3, 3, geom(2, 1, 1, 3), false).unwrap();
        let (y, _) = depthwise_conv2d(&x, &w).unwrap();
        let mut xp = x.clone();
        for v in &mut xp.data_mut()[..36] {
            *v += 0.5;
        }
        let (yp, _) = depthwise_conv2d(&xp, &w).unwrap();
        let plane = 9;
        assert_ne!(y.data()[..plane], yp.data()[..plane]);
        assert_eq!(y.data()[plane..], yp.data()[plane..]);
    }

    #[test]
    fn depthwise_rejects_dense_weights() {
        let x = Tensor::zeros(Shape4::new(1, 2, 4, 4));
        let w = ConvWeights::new(
            Tensor::zeros(Shape4::new(2, 2, 3, 3)),
            None,
            geom(1, 1, 1, 1),
        )
        .unwrap();
        assert!(depthwise_conv2d(&x, &w).is_err());
    }

    #[test]
    fn pointwise_from_matrix() {
        let m = Tensor::from_vec(Shape4::new(2, 3, 1, 1), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let w = ConvWeights::pointwise(m).unwrap();
        assert_eq!(w.c_out(), 2);
        assert_eq!(w.c_in(), 3);
    }
}
