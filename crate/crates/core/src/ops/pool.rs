//! Window-average pooling: adaptive bins and fixed non-overlapping factors.

use crate::error::{shape_err, Result};
use crate::parallel::for_each_chunk;
use crate::tensor::{Shape4, Tensor};

/// Half-open `[start, end)` input ranges, one per output cell along an axis.
pub type Windows = Vec<(usize, usize)>;

/// Adaptive split: cell `i` spans `[floor(i*len/bins), floor((i+1)*len/bins))`.
pub fn adaptive_windows(len: usize, bins: usize) -> Result<Windows> {
    if bins == 0 || bins > len {
        return shape_err(format!("cannot split extent {len} into {bins} bins"));
    }
    Ok((0..bins)
        .map(|i| (i * len / bins, (i + 1) * len / bins))
        .collect())
}

/// Non-overlapping windows of width `factor`.
pub fn uniform_windows(len: usize, factor: usize) -> Result<Windows> {
    if factor == 0 || !len.is_multiple_of(factor) {
        return shape_err(format!("pool factor {factor} does not divide extent {len}"));
    }
    Ok((0..len / factor)
        .map(|i| (i * factor, (i + 1) * factor))
        .collect())
}

pub fn window_pool_forward(x: &Tensor, wy: &Windows, wx: &Windows) -> Tensor {
    let s = x.shape();
    let (oh, ow) = (wy.len(), wx.len());
    let mut out = Tensor::zeros(Shape4::new(s.n, s.c, oh, ow));
    let xd = x.data();
    for_each_chunk(out.data_mut(), oh * ow, |plane_idx, plane| {
        let xp = &xd[plane_idx * s.h * s.w..][..s.h * s.w];
        for (oy, &(y0, y1)) in wy.iter().enumerate() {
            for (ox, &(x0, x1)) in wx.iter().enumerate() {
                let mut acc = 0.0;
                for y in y0..y1 {
                    for v in &xp[y * s.w + x0..y * s.w + x1] {
                        acc += v;
                    }
                }
                plane[oy * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    });
    out
}

pub fn window_pool_backward(in_shape: Shape4, wy: &Windows, wx: &Windows, gy: &Tensor) -> Tensor {
    let (oh, ow) = (wy.len(), wx.len());
    let mut gx = Tensor::zeros(in_shape);
    let gd = gy.data();
    let w = in_shape.w;
    for_each_chunk(gx.data_mut(), in_shape.h * w, |plane_idx, plane| {
        let gp = &gd[plane_idx * oh * ow..][..oh * ow];
        for (oy, &(y0, y1)) in wy.iter().enumerate() {
            for (ox, &(x0, x1)) in wx.iter().enumerate() {
                let share = gp[oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for v in &mut plane[y * w + x0..y * w + x1] {
                        *v += share;
                    }
                }
            }
        }
    });
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{avg_pool2d, avg_pool_adaptive};

    #[test]
    fn single_bin_is_global_mean() {
        let x = Tensor::uniform(Shape4::new(2, 3, 5, 4), 11, -1.0, 1.0);
        let (y, _) = avg_pool_adaptive(&x, 1).unwrap();
        assert_eq!(y.shape(), Shape4::new(2, 3, 1, 1));
        for (i, v) in y.data().iter().enumerate() {
            let plane = &x.data()[i * 20..(i + 1) * 20];
            let mean = plane.iter().sum::<f64>() / 20.0;
            assert!((v - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = Tensor::full(Shape4::new(1, 2, 6, 6), 2.25);
        let (y, _) = avg_pool_adaptive(&x, 4).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.25));
    }

    #[test]
    fn two_bins_match_quadrant_means() {
        let x =
            Tensor::from_vec(Shape4::new(1, 1, 4, 4), (0..16).map(|v| v as f64).collect()).unwrap();
        let (y, _) = avg_pool_adaptive(&x, 2).unwrap();
        // quadrant sums by hand: TL 0+1+4+5, TR 2+3+6+7, BL 8+9+12+13, BR 10+11+14+15
        assert_eq!(y.data(), &[10.0 / 4.0, 18.0 / 4.0, 42.0 / 4.0, 50.0 / 4.0]);
    }

    #[test]
    fn adaptive_split_partitions_extent() {
        assert_eq!(
            adaptive_windows(7, 3).unwrap(),
            vec![(0, 2), (2, 4), (4, 7)]
        );
        assert!(adaptive_windows(3, 4).is_err());
        let x = Tensor::zeros(Shape4::new(1, 1, 3, 8));
        assert!(avg_pool_adaptive(&x, 4).is_err());
    }

    #[test]
    fn factor_pool_requires_divisibility() {
        let x = Tensor::zeros(Shape4::new(1, 1, 6, 6));
        assert_eq!(
            avg_pool2d(&x, 3).unwrap().0.shape(),
            Shape4::new(1, 1, 2, 2)
        );
        assert!(avg_pool2d(&x, 4).is_err());
    }
}
