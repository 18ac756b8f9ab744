//! Flat enumeration of trainable tensors.
//!
//! Every parameter bundle lists its tensors by name and shape. The optimizer,
//! the gradient checker and the checkpoint format all work on this listing,
//! so gradient buffers are simply a second instance of the same bundle.

use crate::tensor::{ConvKernels, Matrix, Scalar};

pub struct ParamRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A named collection of trainable arrays.
pub trait ParamSet<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>);

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = Vec::new();
        self.visit("", &mut v);
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut v = Vec::new();
        self.visit_mut("", &mut v);
        v
    }

    fn scalar_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    fn fill_zero(&mut self) {
        for p in self.params_mut() {
            p.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Elementwise `self += other` for two bundles of identical layout.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.params();
        let mut dst = self.params_mut();
        assert_eq!(src.len(), dst.len(), "parameter layouts differ");
        for (d, s) in dst.iter_mut().zip(&src) {
            crate::tensor::add_into(d.data, s.data);
        }
    }

    fn scale(&mut self, factor: T) {
        for p in self.params_mut() {
            p.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn all_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Copy out every scalar in enumeration order.
    fn flatten(&self) -> Vec<T> {
        self.params()
            .iter()
            .flat_map(|p| p.data.iter().copied())
            .collect()
    }
}

pub(crate) fn push_matrix<'a, T: Scalar>(
    out: &mut Vec<ParamRef<'a, T>>,
    prefix: &str,
    name: &str,
    m: &'a Matrix<T>,
) {
    out.push(ParamRef {
        name: join(prefix, name),
        shape: m.shape().to_vec(),
        data: m.data(),
    });
}

pub(crate) fn push_matrix_mut<'a, T: Scalar>(
    out: &mut Vec<ParamMut<'a, T>>,
    prefix: &str,
    name: &str,
    m: &'a mut Matrix<T>,
) {
    out.push(ParamMut {
        name: join(prefix, name),
        shape: m.shape().to_vec(),
        data: m.data_mut(),
    });
}

pub(crate) fn push_vec<'a, T: Scalar>(
    out: &mut Vec<ParamRef<'a, T>>,
    prefix: &str,
    name: &str,
    v: &'a [T],
) {
    out.push(ParamRef {
        name: join(prefix, name),
        shape: vec![v.len()],
        data: v,
    });
}

pub(crate) fn push_vec_mut<'a, T: Scalar>(
    out: &mut Vec<ParamMut<'a, T>>,
    prefix: &str,
    name: &str,
    v: &'a mut [T],
) {
    out.push(ParamMut {
        name: join(prefix, name),
        shape: vec![v.len()],
        data: v,
    });
}

pub(crate) fn push_kernels<'a, T: Scalar>(
    out: &mut Vec<ParamRef<'a, T>>,
    prefix: &str,
    name: &str,
    k: &'a ConvKernels<T>,
) {
    out.push(ParamRef {
        name: join(prefix, name),
        shape: k.shape().to_vec(),
        data: k.data(),
    });
}

pub(crate) fn push_kernels_mut<'a, T: Scalar>(
    out: &mut Vec<ParamMut<'a, T>>,
    prefix: &str,
    name: &str,
    k: &'a mut ConvKernels<T>,
) {
    out.push(ParamMut {
        name: join(prefix, name),
        shape: k.shape().to_vec(),
        data: k.data_mut(),
    });
}
