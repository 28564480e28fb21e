//! Batched dense products over `(B, 1, rows, cols)` tensors.

use crate::error::{shape_err, Result};
use crate::parallel::for_each_chunk;
use crate::tensor::{Shape4, Tensor};

fn as_batch(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.c != 1 {
        return shape_err(format!(
            "{what}: batched matrices are (B,1,rows,cols), got {s}"
        ));
    }
    Ok((s.n, s.h, s.w))
}

/// `a[b] * b[b]`.
pub fn matmul_nn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, m, p) = as_batch(a, "lhs")?;
    let (bb, p2, q) = as_batch(b, "rhs")?;
    if ba != bb || p != p2 {
        return shape_err(format!("matmul dims: {} x {}", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(Shape4::new(ba, 1, m, q));
    let (ad, bd) = (a.data(), b.data());
    for_each_chunk(out.data_mut(), q, |row_idx, orow| {
        let bi = row_idx / m;
        let i = row_idx % m;
        let arow = &ad[(bi * m + i) * p..][..p];
        let bm = &bd[bi * p * q..][..p * q];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &bm[k * q..][..q];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    Ok(out)
}

/// `a[b] * b[b]^T`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, m, p) = as_batch(a, "lhs")?;
    let (bb, q, p2) = as_batch(b, "rhs")?;
    if ba != bb || p != p2 {
        return shape_err(format!("matmul_nt dims: {} x {}^T", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(Shape4::new(ba, 1, m, q));
    let (ad, bd) = (a.data(), b.data());
    for_each_chunk(out.data_mut(), q, |row_idx, orow| {
        let bi = row_idx / m;
        let i = row_idx % m;
        let arow = &ad[(bi * m + i) * p..][..p];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &bd[(bi * q + j) * p..][..p];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    });
    Ok(out)
}

/// `a[b]^T * b[b]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, p, m) = as_batch(a, "lhs")?;
    let (bb, p2, q) = as_batch(b, "rhs")?;
    if ba != bb || p != p2 {
        return shape_err(format!("matmul_tn dims: {}^T x {}", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(Shape4::new(ba, 1, m, q));
    let (ad, bd) = (a.data(), b.data());
    for_each_chunk(out.data_mut(), q, |row_idx, orow| {
        let bi = row_idx / m;
        let i = row_idx % m;
        let am = &ad[bi * p * m..][..p * m];
        let bm = &bd[bi * p * q..][..p * q];
        for k in 0..p {
            let av = am[k * m + i];
            for (o, bv) in orow.iter_mut().zip(&bm[k * q..][..q]) {
                *o += av * bv;
            }
        }
    });
    Ok(out)
}

/// MACs of `a * b`: `B * m * p * q`.
pub fn matmul_macs(a: Shape4, b: Shape4) -> u64 {
    (a.n * a.h * a.w * b.w) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{batched_matmul, MacCounter};

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, p, q) = (a.shape().h, a.shape().w, b.shape().w);
        let mut out = vec![0.0; m * q];
        for i in 0..m {
            for j in 0..q {
                for k in 0..p {
                    out[i * q + j] += a.data()[i * p + k] * b.data()[k * q + j];
                }
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let mut eye = Tensor::zeros(Shape4::new(1, 1, 3, 3));
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let b = Tensor::uniform(Shape4::new(1, 1, 3, 2), 3, -1.0, 1.0);
        let (y, _) = batched_matmul(&eye, &b, &MacCounter::new()).unwrap();
        assert_eq!(y, b);
    }

    #[test]
    fn counter_adds_m_p_q() {
        let a = Tensor::zeros(Shape4::new(1, 1, 4, 3));
        let b = Tensor::zeros(Shape4::new(1, 1, 3, 2));
        let counter = MacCounter::new();
        batched_matmul(&a, &b, &counter).unwrap();
        assert_eq!(counter.get(), 24);
        let a = Tensor::uniform(Shape4::new(1, 1, 4, 3), 1, -5.0, 5.0);
        let b = Tensor::uniform(Shape4::new(1, 1, 3, 2), 2, -5.0, 5.0);
        batched_matmul(&a, &b, &counter).unwrap();
        assert_eq!(counter.get(), 48);
    }

    #[test]
    fn matches_triple_loop() {
        let a = Tensor::uniform(Shape4::new(1, 1, 5, 5), 8, -1.0, 1.0);
        let b = Tensor::uniform(Shape4::new(1, 1, 5, 5), 9, -1.0, 1.0);
        let (y, _) = batched_matmul(&a, &b, &MacCounter::new()).unwrap();
        for (got, want) in y.data().iter().zip(triple_loop(&a, &b)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_variants_agree() {
        let a = Tensor::uniform(Shape4::new(2, 1, 3, 4), 1, -1.0, 1.0);
        let b = Tensor::uniform(Shape4::new(2, 1, 5, 4), 2, -1.0, 1.0);
        let bt = crate::ops::layout::transpose_last2(&b);
        assert_eq!(matmul_nt(&a, &b).unwrap(), matmul_nn(&a, &bt).unwrap());
        let at = crate::ops::layout::transpose_last2(&a);
        let c = Tensor::uniform(Shape4::new(2, 1, 3, 2), 3, -1.0, 1.0);
        let lhs = matmul_tn(&a, &c).unwrap();
        let rhs = matmul_nn(&at, &c).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-15);
    }

    #[test]
    fn mismatched_inner_dims_fail() {
        let a = Tensor::zeros(Shape4::new(1, 1, 2, 3));
        let b = Tensor::zeros(Shape4::new(1, 1, 2, 2));
        assert!(batched_matmul(&a, &b, &MacCounter::new()).is_err());
    }
}
