//! Bilinear resampling with half-pixel centers.
//!
//! Destination index `d` maps to source coordinate `(d + 0.5) * in/out - 0.5`,
//! clamped to `[0, in - 1]`. Equal sizes give exact pass-through.

use crate::error::{shape_err, Result};
use crate::parallel::for_each_chunk;
use crate::tensor::{Shape4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub fn bilinear_forward(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 {
        return shape_err("bilinear resize to an empty size");
    }
    if s.h == 0 || s.w == 0 {
        return shape_err("bilinear resize of an empty input");
    }
    if out_h == s.h && out_w == s.w {
        return Ok(x.clone());
    }
    let ty = taps(s.h, out_h);
    let tx = taps(s.w, out_w);
    let mut out = Tensor::zeros(Shape4::new(s.n, s.c, out_h, out_w));
    let xd = x.data();
    for_each_chunk(out.data_mut(), out_h * out_w, |plane_idx, plane| {
        let xp = &xd[plane_idx * s.h * s.w..][..s.h * s.w];
        for (oy, ty) in ty.iter().enumerate() {
            let r0 = &xp[ty.lo * s.w..][..s.w];
            let r1 = &xp[ty.hi * s.w..][..s.w];
            for (ox, tx) in tx.iter().enumerate() {
                let top = r0[tx.lo] * (1.0 - tx.frac) + r0[tx.hi] * tx.frac;
                let bot = r1[tx.lo] * (1.0 - tx.frac) + r1[tx.hi] * tx.frac;
                plane[oy * out_w + ox] = top * (1.0 - ty.frac) + bot * ty.frac;
            }
        }
    });
    Ok(out)
}

pub fn bilinear_backward(in_shape: Shape4, gy: &Tensor) -> Tensor {
    let go = gy.shape();
    if go.h == in_shape.h && go.w == in_shape.w {
        return gy.clone();
    }
    let ty = taps(in_shape.h, go.h);
    let tx = taps(in_shape.w, go.w);
    let w = in_shape.w;
    let gd = gy.data();
    let mut gx = Tensor::zeros(in_shape);
    for_each_chunk(gx.data_mut(), in_shape.h * w, |plane_idx, plane| {
        let gp = &gd[plane_idx * go.h * go.w..][..go.h * go.w];
        for (oy, ty) in ty.iter().enumerate() {
            for (ox, tx) in tx.iter().enumerate() {
                let g = gp[oy * go.w + ox];
                let (gt, gb) = (g * (1.0 - ty.frac), g * ty.frac);
                plane[ty.lo * w + tx.lo] += gt * (1.0 - tx.frac);
                plane[ty.lo * w + tx.hi] += gt * tx.frac;
                plane[ty.hi * w + tx.lo] += gb * (1.0 - tx.frac);
                plane[ty.hi * w + tx.hi] += gb * tx.frac;
            }
        }
    });
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::bilinear_upsample;

    /// Scalar half-pixel interpolation written directly from the formula.
    fn scalar_bilinear(
        src: &[f64],
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
        y: usize,
        x: usize,
    ) -> f64 {
        let sy = ((y as f64 + 0.5) * h as f64 / oh as f64 - 0.5)
            .max(0.0)
            .min((h - 1) as f64);
        let sx = ((x as f64 + 0.5) * w as f64 / ow as f64 - 0.5)
            .max(0.0)
            .min((w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let p = |r: usize, c: usize| src[r * w + c];
        (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
            + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
    }

    #[test]
    fn identity_scale_passes_through() {
        let x = Tensor::uniform(Shape4::new(1, 2, 3, 5), 2, -1.0, 1.0);
        assert_eq!(bilinear_upsample(&x, 3, 5).unwrap().0, x);
    }

    #[test]
    fn constants_survive_resampling() {
        let x = Tensor::full(Shape4::new(1, 1, 3, 2), -4.5);
        let (y, _) = bilinear_upsample(&x, 7, 11).unwrap();
        assert!(y.data().iter().all(|&v| (v + 4.5).abs() < 1e-14));
    }

    #[test]
    fn two_by_two_to_four_by_four() {
        let src = [0.0, 1.0, 2.0, 3.0];
        let x = Tensor::from_vec(Shape4::new(1, 1, 2, 2), src.to_vec()).unwrap();
        let (y, _) = bilinear_upsample(&x, 4, 4).unwrap();
        for yy in 0..4 {
            for xx in 0..4 {
                let want = scalar_bilinear(&src, 2, 2, 4, 4, yy, xx);
                assert!((y.at(0, 0, yy, xx) - want).abs() < 1e-15);
            }
        }
        // corners clamp to the source corners, interior (1,1) blends as 0.25/0.75
        assert_eq!(y.at(0, 0, 0, 0), 0.0);
        assert_eq!(y.at(0, 0, 3, 3), 3.0);
        assert!((y.at(0, 0, 1, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rejects_shrinking_and_empty_targets() {
        let x = Tensor::zeros(Shape4::new(1, 1, 4, 4));
        assert!(bilinear_upsample(&x, 2, 4).is_err());
        assert!(bilinear_forward(&x, 0, 4).is_err());
    }

    #[test]
    fn downscale_by_two_averages_pairs() {
        let x = Tensor::from_vec(Shape4::new(1, 1, 1, 4), vec![1.0, 3.0, 5.0, 9.0]).unwrap();
        let y = bilinear_forward(&x, 1, 2).unwrap();
        assert_eq!(y.data(), &[2.0, 7.0]);
    }
}
