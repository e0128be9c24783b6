//! Dense f64 tensors with reverse-mode differentiation.
//!
//! Everything the pipeline computes runs through [`Tape`], a linear record of
//! forward operations replayed in reverse for gradients. All math is 64-bit
//! and sequential, so identical inputs give bit-identical outputs.

mod params;
mod tape;

pub use params::{Init, ParamStore};
pub use tape::{Tape, Var};

use crate::error::{CoreError, Result};

/// A plain dense tensor value: row-major f64 data plus a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let m = rows.len();
        let n = if m == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            assert_eq!(r.len(), n, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor { shape: vec![m, n], data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a 2-D index; panics on rank != 2.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }
}
