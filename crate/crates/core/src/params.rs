//! Collections of learnable tensors.
//!
//! Parameter structs are generic over their leaf type so the same layout can
//! hold tensors or tape handles; a single `map` per struct fixes the visiting
//! order used everywhere (registration, flattening, rebuilding, optimiser
//! state).

use crate::autograd::Tape;
use crate::error::{shape_err, Result};
use crate::ops::conv::ConvParams;
use crate::tensor::Tensor;

pub trait Parameters: Sized {
    /// The same layout holding tape handles.
    type Vars;

    fn visit(&self, f: &mut dyn FnMut(&Tensor));

    fn rebuild(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self;

    fn register(&self, tape: &mut Tape) -> Self::Vars;

    fn to_vec(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |t| out.push(t.clone()));
        out
    }

    /// Same layout with tensors taken from `values` in visit order.
    fn from_slice(&self, values: &[Tensor]) -> Result<Self> {
        let mut it = values.iter();
        let mut bad = None;
        let rebuilt = self.rebuild(&mut |t| match it.next() {
            Some(v) if v.shape() == t.shape() => v.clone(),
            other => {
                bad.get_or_insert_with(|| {
                    format!(
                        "expected tensor of shape {}, got {:?}",
                        t.shape(),
                        other.map(|v| v.shape())
                    )
                });
                t.clone()
            }
        });
        if let Some(msg) = bad {
            return shape_err(msg);
        }
        if it.next().is_some() {
            return shape_err("too many tensors for parameter layout");
        }
        Ok(rebuilt)
    }

    fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    /// Total number of scalar parameters.
    fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.len());
        n
    }
}

/// Implements [`Parameters`] for `Name<Tensor>` given an inherent
/// `fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Name<U>`.
macro_rules! impl_parameters {
    ($name:ident) => {
        impl $crate::params::Parameters for $name<$crate::tensor::Tensor> {
            type Vars = $name<$crate::autograd::Var>;

            fn visit(&self, f: &mut dyn FnMut(&$crate::tensor::Tensor)) {
                let _ = self.map(&mut |t| f(t));
            }

            fn rebuild(
                &self,
                f: &mut dyn FnMut(&$crate::tensor::Tensor) -> $crate::tensor::Tensor,
            ) -> Self {
                self.map(f)
            }

            fn register(&self, tape: &mut $crate::autograd::Tape) -> Self::Vars {
                self.map(&mut |t| tape.leaf(t.clone()))
            }
        }
    };
}
pub(crate) use impl_parameters;

impl_parameters!(ConvParams);

/// Maps a list of generic parameter structs element-wise.
pub(crate) fn map_vec<A, B>(items: &[A], f: impl FnMut(&A) -> B) -> Vec<B> {
    items.iter().map(f).collect()
}

/// Placeholder for ops without learnable tensors.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoParams;

impl Parameters for NoParams {
    type Vars = ();

    fn visit(&self, _: &mut dyn FnMut(&Tensor)) {}

    fn rebuild(&self, _: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        NoParams
    }

    fn register(&self, _: &mut Tape) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv::{ConvGeometry, ConvWeights};
    use crate::tensor::Shape4;

    #[test]
    fn conv_params_round_trip_through_vec() {
        let w = ConvWeights::new(
            Tensor::uniform(Shape4::new(2, 3, 1, 1), 1, -1.0, 1.0),
            Some(Tensor::uniform(Shape4::new(1, 2, 1, 1), 2, -1.0, 1.0)),
            ConvGeometry::default(),
        )
        .unwrap();
        let v = w.to_vec();
        assert_eq!(v.len(), 2);
        assert_eq!(w.scalar_count(), 8);
        assert_eq!(w.from_slice(&v).unwrap(), w);
        assert!(w.from_slice(&v[..1]).is_err());
        assert!(w.from_slice(&[v[1].clone(), v[0].clone()]).is_err());
    }
}
