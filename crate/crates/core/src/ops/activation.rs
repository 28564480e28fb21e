//! Element-wise activations and the row softmax.

use crate::parallel::for_each_chunk;
use crate::tensor::Tensor;

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Uses the forward output `y`: `dx = dy * y * (1 - y)`.
pub fn sigmoid_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    y.zip_map(gy, |y, g| g * y * (1.0 - y))
        .expect("sigmoid gradient shape")
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    x.zip_map(gy, |v, g| if v > 0.0 { g } else { 0.0 })
        .expect("relu gradient shape")
}

/// Max-subtracted softmax over one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn softmax_rows_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let w = x.shape().w;
    for_each_chunk(out.data_mut(), w, |_, row| softmax_in_place(row));
    out
}

/// `dx = y * (dy - sum(dy * y))` per row.
pub fn softmax_rows_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let w = y.shape().w;
    let mut gx = gy.clone();
    let yd = y.data();
    for_each_chunk(gx.data_mut(), w, |r, row| {
        let yr = &yd[r * w..][..w];
        let dot: f64 = row.iter().zip(yr).map(|(g, y)| g * y).sum();
        for (g, y) in row.iter_mut().zip(yr) {
            *g = y * (*g - dot);
        }
    });
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{sigmoid, softmax_lastdim};
    use crate::tensor::Shape4;

    #[test]
    fn sigmoid_at_zero_and_range() {
        let x = Tensor::from_vec(Shape4::new(1, 1, 1, 4), vec![0.0, -800.0, 800.0, 3.0]).unwrap();
        let (y, _) = sigmoid(&x).unwrap();
        assert_eq!(y.data()[0], 0.5);
        assert!(y.all_finite());
        assert!(y.data()[3] > 0.0 && y.data()[3] < 1.0);
    }

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let x = Tensor::full(Shape4::new(1, 1, 2, 5), 0.3);
        let (y, _) = softmax_lastdim(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let x = Tensor::from_vec(Shape4::new(1, 1, 1, 3), vec![1000.0, 1000.1, 999.0]).unwrap();
        let (y, _) = softmax_lastdim(&x).unwrap();
        assert!(y.all_finite());
        assert!((y.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_under_extreme_logits() {
        let x = Tensor::uniform(Shape4::new(2, 3, 4, 7), 99, -1e6, 1e6);
        let (y, _) = softmax_lastdim(&x).unwrap();
        assert!(y.all_finite());
        for row in y.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
