//! Shorthand constructors over [`Tape::apply`].

use super::primitive::Primitive;
use super::tape::{Tape, Var};
use crate::error::Result;

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Matmul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Minimum, &[a, b])
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Maximum, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, end }, &[x])
    }

    /// Columns `start..end` of a 2-D value.
    pub fn cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.slice(x, 1, start, end)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(Primitive::Reshape { shape: shape.into() }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Gelu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::LogSoftmax, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.apply(Primitive::LayerNorm { eps }, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Abs, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum { axis: None }, &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Sum { axis: Some(axis) }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean { axis: None }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Mean { axis: Some(axis) }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.apply(Primitive::Scale(factor), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::GatherRows { indices }, &[x])
    }

    pub fn im2col(&mut self, x: Var, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        self.apply(Primitive::Im2Col { height, width, kernel, stride, pad }, &[x])
    }

    /// Sum of several same-shaped values; `None` for an empty list.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Option<Var>> {
        let mut iter = terms.iter().copied();
        let Some(mut acc) = iter.next() else { return Ok(None) };
        for t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(Some(acc))
    }
}
