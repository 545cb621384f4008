use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense row-major matrix of per-token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    rows: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Real> EmbeddingTable<T> {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![T::zero(); rows * dim],
        }
    }

    pub fn from_vec(rows: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::DimMismatch {
                expected: rows * dim,
                actual: data.len(),
                context: "table payload length",
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite entry at row {}, col {}",
                pos / dim.max(1),
                pos % dim.max(1)
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: r.len(),
                    context: "ragged rows",
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), dim, data)
    }

    /// i.i.d. uniform entries in `[-scale, scale]`.
    pub fn uniform<R: Rng>(rows: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * dim)
            .map(|_| T::from_f64_lossy(rng.gen_range(-scale..=scale)))
            .collect();
        Self { rows, dim, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[T]> {
        // chunks_exact panics on a zero chunk size
        let dim = self.dim.max(1);
        self.data
            .chunks_exact(dim)
            .take(if self.dim == 0 { 0 } else { self.rows })
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> EmbeddingTable<U> {
        EmbeddingTable {
            rows: self.rows,
            dim: self.dim,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossless()))
                .collect(),
        }
    }

    /// Adds `coef * v` to row `r`.
    pub fn axpy_row(&mut self, r: usize, coef: f64, v: &[f64]) {
        for (p, g) in self.row_mut(r).iter_mut().zip(v) {
            *p = T::from_f64_lossy(p.to_f64_lossless() + coef * g);
        }
    }
}
