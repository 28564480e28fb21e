//! Axis permutations between channel-planar maps and position-major rows.

use crate::tensor::{Shape4, Tensor};

/// Swaps the `h` and `w` axes of every `(n, c)` plane.
pub fn transpose_last2(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape4::new(s.n, s.c, s.w, s.h));
    let (src, dst) = (x.data(), out.data_mut());
    for p in 0..s.n * s.c {
        let base = p * s.h * s.w;
        for y in 0..s.h {
            for xx in 0..s.w {
                dst[base + xx * s.h + y] = src[base + y * s.w + xx];
            }
        }
    }
    out
}

/// `(n, c, h, w) -> (n, 1, h*w, c)`: one row per position.
pub fn to_rows(x: &Tensor) -> Tensor {
    let s = x.shape();
    let planar = x
        .clone()
        .reshape(Shape4::new(s.n, 1, s.c, s.h * s.w))
        .expect("same element count");
    transpose_last2(&planar)
}

/// Inverse of [`to_rows`].
pub fn from_rows(rows: &Tensor, h: usize, w: usize) -> Tensor {
    let s = rows.shape();
    debug_assert_eq!(s.h, h * w);
    let planar = transpose_last2(rows);
    planar
        .reshape(Shape4::new(s.n, s.w, h, w))
        .expect("same element count")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let x = Tensor::uniform(Shape4::new(2, 3, 2, 4), 5, -1.0, 1.0);
        let r = to_rows(&x);
        assert_eq!(r.shape(), Shape4::new(2, 1, 8, 3));
        assert_eq!(r.at(1, 0, 5, 2), x.at(1, 2, 1, 1));
        assert_eq!(from_rows(&r, 2, 4), x);
    }
}
