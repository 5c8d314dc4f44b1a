//! Flat parameter storage partitioned into named, shaped segments.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    /// `(rows, cols)` as seen by the autodiff graph: rank-1 segments are single rows.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }
}

/// A vector of parameters made of named blocks.
///
/// The same type carries weights, gradients, adjoints and hypergradients; two
/// vectors are compatible when their segment layouts are identical.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    segments: Vec<Segment>,
    data: Vec<f64>,
}

impl ParamVector {
    /// Zero-filled vector with the given `(name, shape)` blocks.
    pub fn zeros<N: AsRef<str>>(layout: &[(N, Vec<usize>)]) -> Result<Self> {
        let mut segments = Vec::with_capacity(layout.len());
        let mut offset = 0;
        for (name, shape) in layout {
            let name = name.as_ref();
            if segments.iter().any(|s: &Segment| s.name == name) {
                return Err(Error::invalid(format!("duplicate segment name `{name}`")));
            }
            let seg = Segment { name: name.to_string(), shape: shape.clone(), offset };
            offset += seg.len();
            segments.push(seg);
        }
        Ok(ParamVector { segments, data: vec![0.0; offset] })
    }

    /// A single unnamed-shape segment holding `values`.
    pub fn from_vec(name: &str, values: Vec<f64>) -> Self {
        let seg = Segment { name: name.to_string(), shape: vec![values.len()], offset: 0 };
        ParamVector { segments: vec![seg], data: values }
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector { segments: self.segments.clone(), data: vec![0.0; self.data.len()] }
    }

    /// Rebuilds a vector with this layout from flat values.
    pub fn unflatten(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.data.len() {
            return Err(Error::shape(format!(
                "expected {} values, got {}",
                self.data.len(),
                values.len()
            )));
        }
        Ok(ParamVector { segments: self.segments.clone(), data: values })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment_index(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    pub fn segment(&self, i: usize) -> &[f64] {
        let s = &self.segments[i];
        &self.data[s.offset..s.offset + s.len()]
    }

    pub fn segment_mut(&mut self, i: usize) -> &mut [f64] {
        let s = &self.segments[i];
        let (a, b) = (s.offset, s.offset + s.len());
        &mut self.data[a..b]
    }

    pub fn by_name(&self, name: &str) -> Option<&[f64]> {
        self.segment_index(name).map(|i| self.segment(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments == other.segments
    }

    pub(crate) fn check_layout(&self, other: &ParamVector, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape(format!("{what}: parameter layouts differ")))
        }
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &ParamVector) -> Result<()> {
        self.check_layout(other, "axpy")?;
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        for x in &mut self.data {
            *x *= a;
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_layout(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self - other`
    pub fn sub(&self, other: &ParamVector) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.data.iter().all(|v| *v >= 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
