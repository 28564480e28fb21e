//! Dense rank-4 NCHW tensors of `f64` and their binary file format.
//!
//! File layout: the 8-byte magic `GALDTNS1`, four little-endian `u32` dims
//! in N, C, H, W order, then `N*C*H*W` little-endian `f64` values in
//! row-major NCHW order. Nothing else.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, GaldError, Result};

pub const MAGIC: &[u8; 8] = b"GALDTNS1";
const HEADER_LEN: usize = 8 + 4 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Element count, or an overflow error.
    pub fn numel(&self) -> Result<usize> {
        self.n
            .checked_mul(self.c)
            .and_then(|v| v.checked_mul(self.h))
            .and_then(|v| v.checked_mul(self.w))
            .ok_or(GaldError::Overflow(self.dims()))
    }

    /// Spatial positions per channel plane (`h * w`).
    pub fn n_positions(&self) -> usize {
        self.h * self.w
    }

    pub fn with_c(&self, c: usize) -> Self {
        Shape4 { c, ..*self }
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// How [`Tensor::create`] fills a new tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FillSpec {
    Zeros,
    Ones,
    Constant(f64),
    /// Uniform draws in `[lo, hi)` from a ChaCha8 stream seeded with `seed`.
    SeededUniform {
        seed: u64,
        lo: f64,
        hi: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor {
    pub fn create(shape: Shape4, fill: FillSpec) -> Result<Self> {
        let len = shape.numel()?;
        if len == 0 {
            return shape_err(format!("shape {shape} has no elements"));
        }
        let data = match fill {
            FillSpec::Zeros => vec![0.0; len],
            FillSpec::Ones => vec![1.0; len],
            FillSpec::Constant(v) => vec![v; len],
            FillSpec::SeededUniform { seed, lo, hi } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return shape_err(format!("invalid uniform range [{lo}, {hi})"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len).map(|_| rng.gen_range(lo..hi)).collect()
            }
        };
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        let len = shape.numel()?;
        if len != data.len() {
            return Err(GaldError::Length {
                expected: len,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Zero tensor for a shape the caller already knows to be valid.
    ///
    /// Panics if the element count overflows.
    pub fn zeros(shape: Shape4) -> Self {
        let len = shape
            .numel()
            .unwrap_or_else(|e| panic!("Tensor::zeros: {e}"));
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: Shape4, value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn uniform(shape: Shape4, seed: u64, lo: f64, hi: f64) -> Self {
        Tensor::create(shape, FillSpec::SeededUniform { seed, lo, hi })
            .unwrap_or_else(|e| panic!("Tensor::uniform: {e}"))
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    /// Same data under a different shape with equal element count.
    pub fn reshape(mut self, shape: Shape4) -> Result<Self> {
        if shape.numel()? != self.data.len() {
            return shape_err(format!("cannot reshape {} into {shape}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        ensure_same_shape(self, other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest element-wise absolute difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        ensure_same_shape(self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Channels `[start, start + len)` as a new tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape;
        if len == 0 || start + len > s.c {
            return shape_err(format!(
                "channel slice [{start}, {}) out of range for {s}",
                start + len
            ));
        }
        let plane = s.n_positions();
        let mut out = Tensor::zeros(s.with_c(len));
        for n in 0..s.n {
            let src = (n * s.c + start) * plane;
            let dst = n * len * plane;
            out.data[dst..dst + len * plane].copy_from_slice(&self.data[src..src + len * plane]);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::with_capacity(HEADER_LEN + 8 * self.data.len());
        bytes.extend_from_slice(MAGIC);
        for d in self.shape.dims() {
            let d = u32::try_from(d)
                .map_err(|_| GaldError::Format(format!("dimension {d} exceeds u32")))?;
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        Tensor::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        if bytes.len() < HEADER_LEN {
            return Err(GaldError::Format(format!(
                "file holds {} bytes, header needs {HEADER_LEN}",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(GaldError::Format("bad magic bytes".into()));
        }
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            let off = 8 + 4 * i;
            *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        let expected = shape.numel()?;
        let payload = &bytes[HEADER_LEN..];
        if !payload.len().is_multiple_of(8) || payload.len() / 8 != expected {
            return Err(GaldError::Length {
                expected,
                actual: payload.len() / 8,
            });
        }
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Tensor { shape, data })
    }
}

pub(crate) fn ensure_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return shape_err(format!("shape mismatch: {} vs {}", a.shape, b.shape));
    }
    Ok(())
}

/// `|a - b| <= atol + rtol * |b|` for every element.
pub fn approx_eq(a: &Tensor, b: &Tensor, rtol: f64, atol: f64) -> Result<bool> {
    ensure_same_shape(a, b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .all(|(x, y)| (x - y).abs() <= atol + rtol * y.abs()))
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape, b.shape);
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return shape_err(format!("concat_channels needs equal n,h,w: {sa} vs {sb}"));
    }
    let plane = sa.n_positions();
    let out_shape = sa.with_c(sa.c + sb.c);
    out_shape.numel()?;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data[n * sa.c * plane..(n + 1) * sa.c * plane]);
        data.extend_from_slice(&b.data[n * sb.c * plane..(n + 1) * sb.c * plane]);
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn create_fills() {
        let z = Tensor::create(Shape4::new(1, 1, 2, 2), FillSpec::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c = Tensor::create(Shape4::new(1, 2, 1, 1), FillSpec::Constant(3.5)).unwrap();
        assert_eq!(c.data(), &[3.5, 3.5]);
        let o = Tensor::create(Shape4::new(1, 1, 1, 3), FillSpec::Ones).unwrap();
        assert_eq!(o.data(), &[1.0; 3]);
    }

    #[test]
    fn seeded_uniform_is_reproducible() {
        let fill = FillSpec::SeededUniform {
            seed: 7,
            lo: -1.0,
            hi: 1.0,
        };
        let a = Tensor::create(Shape4::new(1, 1, 4, 4), fill).unwrap();
        let b = Tensor::create(Shape4::new(1, 1, 4, 4), fill).unwrap();
        let bytes = |t: &Tensor| {
            t.data()
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect::<Vec<_>>()
        };
        assert_eq!(bytes(&a), bytes(&b));
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn constructors_reject_overflow() {
        let huge = Shape4::new(usize::MAX, 2, 1, 1);
        assert!(matches!(
            Tensor::create(huge, FillSpec::Zeros),
            Err(GaldError::Overflow(_))
        ));
        assert!(matches!(
            Tensor::from_vec(huge, vec![]),
            Err(GaldError::Overflow(_))
        ));
        assert!(Tensor::create(Shape4::new(1, 0, 2, 2), FillSpec::Zeros).is_err());
    }

    #[test]
    #[should_panic]
    fn zeros_panics_on_overflow() {
        Tensor::zeros(Shape4::new(usize::MAX, usize::MAX, 1, 1));
    }

    #[test]
    fn approx_eq_cases() {
        let a = Tensor::from_vec(Shape4::new(1, 1, 1, 1), vec![1.0]).unwrap();
        let b = Tensor::from_vec(Shape4::new(1, 1, 1, 1), vec![1.0 + 1e-9]).unwrap();
        let c = Tensor::from_vec(Shape4::new(1, 1, 1, 1), vec![2.0]).unwrap();
        assert!(approx_eq(&a, &a, 0.0, 0.0).unwrap());
        assert!(approx_eq(&a, &b, 1e-6, 0.0).unwrap());
        assert!(!approx_eq(&a, &c, 1e-6, 0.0).unwrap());
        let d = Tensor::zeros(Shape4::new(1, 1, 1, 2));
        assert!(approx_eq(&a, &d, 1.0, 1.0).is_err());
    }

    #[test]
    fn load_rejects_bad_magic_and_truncation() {
        let t = Tensor::uniform(Shape4::new(1, 1, 2, 2), 3, -1.0, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        t.save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Tensor::from_bytes(&bad),
            Err(GaldError::Format(_))
        ));

        bytes.truncate(bytes.len() - 8);
        assert!(matches!(
            Tensor::from_bytes(&bytes),
            Err(GaldError::Length {
                expected: 4,
                actual: 3
            })
        ));
        assert!(matches!(
            Tensor::from_bytes(&bytes[..10]),
            Err(GaldError::Format(_))
        ));
    }

    #[test]
    fn concat_shapes_and_order() {
        let a = Tensor::uniform(Shape4::new(1, 2, 2, 2), 1, -1.0, 1.0);
        let b = Tensor::uniform(Shape4::new(1, 3, 2, 2), 2, -1.0, 1.0);
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), Shape4::new(1, 5, 2, 2));

        let z = Tensor::zeros(Shape4::new(1, 2, 2, 2));
        let az = concat_channels(&a, &z).unwrap();
        assert_eq!(az.slice_channels(0, 2).unwrap(), a);

        let b2 = Tensor::uniform(Shape4::new(1, 2, 2, 2), 9, -1.0, 1.0);
        assert_ne!(
            concat_channels(&a, &b2).unwrap(),
            concat_channels(&b2, &a).unwrap()
        );
        let bad = Tensor::zeros(Shape4::new(1, 1, 3, 2));
        assert!(concat_channels(&a, &bad).is_err());
    }

    fn small_shape() -> impl Strategy<Value = Shape4> {
        (1usize..3, 1usize..4, 1usize..5, 1usize..5)
            .prop_map(|(n, c, h, w)| Shape4::new(n, c, h, w))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn save_load_is_bit_identical(shape in small_shape(), seed in any::<u64>()) {
            let mut t = Tensor::uniform(shape, seed, -1e3, 1e3);
            // exercise odd bit patterns too
            t.data_mut()[0] = -0.0;
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.bin");
            t.save(&path).unwrap();
            let back = Tensor::load(&path).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&t));
        }

        #[test]
        fn concat_then_slice_recovers_inputs(
            (n, h, w) in (1usize..3, 1usize..4, 1usize..4),
            ca in 1usize..4,
            cb in 1usize..4,
            seed in any::<u64>(),
        ) {
            let a = Tensor::uniform(Shape4::new(n, ca, h, w), seed, -1.0, 1.0);
            let b = Tensor::uniform(Shape4::new(n, cb, h, w), seed ^ 1, -1.0, 1.0);
            let ab = concat_channels(&a, &b).unwrap();
            prop_assert_eq!(ab.slice_channels(0, ca).unwrap(), a);
            prop_assert_eq!(ab.slice_channels(ca, cb).unwrap(), b);
        }
    }
}
