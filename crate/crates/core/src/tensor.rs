//! Flat views over groups of dense parameters.
//!
//! Every trainable group (a gate, an expert) exposes its tensors in a fixed
//! canonical order so that averaging, descent steps, norms and serialization
//! can be written once.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub enum Tensor<'a> {
    Matrix(&'a DMatrix<f64>),
    Vector(&'a DVector<f64>),
}

pub enum TensorMut<'a> {
    Matrix(&'a mut DMatrix<f64>),
    Vector(&'a mut DVector<f64>),
}

impl Tensor<'_> {
    pub fn as_slice(&self) -> &[f64] {
        match self {
            Tensor::Matrix(m) => m.as_slice(),
            Tensor::Vector(v) => v.as_slice(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Tensor::Matrix(m) => m.shape(),
            Tensor::Vector(v) => (v.len(), 1),
        }
    }
}

impl TensorMut<'_> {
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        match self {
            TensorMut::Matrix(m) => m.as_mut_slice(),
            TensorMut::Vector(v) => v.as_mut_slice(),
        }
    }
}

/// A group of parameters with a canonical tensor order.
pub trait ParamGroup: Clone {
    fn tensors(&self) -> Vec<Tensor<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.as_slice().len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.as_slice());
        }
        out
    }

    fn norm_sq(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.as_slice().iter())
            .map(|v| v * v)
            .sum()
    }

    fn fill(&mut self, value: f64) {
        for mut t in self.tensors_mut() {
            t.as_mut_slice().fill(value);
        }
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    fn same_shape(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.shape() == y.shape())
    }

    /// `self -= step * grad`, elementwise.
    fn descend(&mut self, step: f64, grad: &Self) {
        for (mut dst, src) in self.tensors_mut().into_iter().zip(grad.tensors()) {
            for (d, g) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
                *d -= step * g;
            }
        }
    }

    /// `self += other`, elementwise.
    fn add_assign_group(&mut self, other: &Self) {
        for (mut dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
                *d += s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for mut t in self.tensors_mut() {
            for v in t.as_mut_slice() {
                *v *= factor;
            }
        }
    }

    /// `self - other`, elementwise.
    fn difference(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (mut dst, src) in out.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
                *d -= s;
            }
        }
        out
    }

    fn bit_eq(&self, other: &Self) -> bool {
        self.same_shape(other)
            && self
                .tensors()
                .iter()
                .zip(other.tensors().iter())
                .all(|(a, b)| a.as_slice() == b.as_slice())
    }

    /// Overwrite from a flat vector in canonical order.
    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Argument(format!(
                "flat length {} does not match group size {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for mut t in self.tensors_mut() {
            let s = t.as_mut_slice();
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }
}

/// Elementwise mean of same-shaped copies: sum in order, then divide by the count.
pub fn mean<G: ParamGroup>(copies: &[G]) -> Result<G> {
    let first = copies
        .first()
        .ok_or_else(|| Error::Protocol("cannot aggregate zero copies".into()))?;
    if copies.iter().any(|c| !c.same_shape(first)) {
        return Err(Error::Protocol("aggregated copies differ in shape".into()));
    }
    let mut acc = first.clone();
    for c in &copies[1..] {
        acc.add_assign_group(c);
    }
    let n = copies.len() as f64;
    for mut t in acc.tensors_mut() {
        for v in t.as_mut_slice() {
            *v /= n;
        }
    }
    Ok(acc)
}
