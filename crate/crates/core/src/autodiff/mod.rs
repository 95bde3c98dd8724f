//! Differentiable kernels with hand-written reverse passes.
//!
//! Every forward function returns whatever its backward counterpart needs;
//! there is no tape. Kernels are generic over [`Real`] so training runs in
//! `f32` while gradient checks run the identical code in `f64`.

pub mod conv;
pub mod gradcheck;
pub mod gru;
pub mod ops;
pub mod paramset;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, LinalgScalar, ScalarOperand};

pub use conv::{conv1d, conv1d_backward, conv_output_len, Conv1dCache};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use gru::{
    bi_gru_backward, bi_gru_forward, gru_layer, gru_layer_backward, BiGruCache, BiGruParams,
    Direction, GruCache, GruParams,
};
pub use ops::{
    cosine_similarity, cosine_similarity_backward, l2_normalize, l2_normalize_backward, linear,
    linear_backward, linear_rows, linear_rows_backward, prefix_mask, softmax_over_time,
    softmax_over_time_backward, NORM_EPS,
};
pub use paramset::ParamSet;

/// Floating point scalar the kernels are written against.
pub trait Real:
    num_traits::Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// A structured collection of named trainable tensors.
///
/// `tensors` and `tensors_mut` must list the same names in the same order;
/// optimizers and serialization rely on that.
pub trait Parameters<F: Real>: Clone {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)>;
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)>;

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, mut t) in out.tensors_mut() {
            t.fill(F::zero());
        }
        out
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    fn add_assign_from(&mut self, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    fn scale(&mut self, k: F) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }

    /// Flatten all tensors into one vector in declaration order.
    fn flatten(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, t) in self.tensors() {
            out.extend(t.iter().copied());
        }
        out
    }

    /// Inverse of [`Parameters::flatten`].
    fn assign_flat(&mut self, flat: &[F]) {
        let mut it = flat.iter().copied();
        for (_, mut t) in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = it.next().expect("flat vector too short");
            }
        }
        assert!(it.next().is_none(), "flat vector too long");
    }

    fn to_param_set(&self) -> ParamSet {
        let mut set = ParamSet::default();
        for (name, t) in self.tensors() {
            set.insert(name, t.mapv(|v| v.as_f64() as f32));
        }
        set
    }

    /// Overwrite every tensor from `set`, checking names and shapes.
    fn load_param_set(&mut self, set: &ParamSet) -> crate::Result<()> {
        let names: Vec<String> = self.tensors().into_iter().map(|(n, _)| n).collect();
        for name in set.names() {
            if !names.iter().any(|n| n == name) {
                return Err(crate::Error::Format(format!(
                    "unexpected tensor '{name}' in parameter file"
                )));
            }
        }
        for (name, mut t) in self.tensors_mut() {
            let src: &ArrayD<f32> = set.get(&name).ok_or_else(|| {
                crate::Error::Format(format!("parameter file is missing tensor '{name}'"))
            })?;
            if src.shape() != t.shape() {
                return Err(crate::Error::Shape(format!(
                    "tensor '{name}': file has {:?}, model expects {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.zip_mut_with(src, |d, &s| *d = F::lit(s as f64));
        }
        Ok(())
    }
}
