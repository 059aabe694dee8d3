//! Exact brute-force L2 search over an uncompressed flat matrix.

use rayon::prelude::*;
use thiserror::Error;

use crate::kb::{EmbeddingMatrix, KbError};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Matrix(#[from] KbError),
}

/// Euclidean distance, accumulated in f64 over ascending coordinates.
pub fn l2_distance(x: &[f32], y: &[f32]) -> Result<f64, IndexError> {
    if x.len() != y.len() {
        return Err(IndexError::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(squared_l2(x, y).sqrt())
}

#[inline]
fn squared_l2(x: &[f32], y: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&a, &b) in x.iter().zip(y) {
        let d = f64::from(a) - f64::from(b);
        acc += d * d;
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    pub distance: f64,
}

/// Flat index. Owns a frozen copy of the matrix; never mutated after construction.
#[derive(Debug, Clone)]
pub struct FlatIndex {
    matrix: EmbeddingMatrix,
}

impl FlatIndex {
    pub fn new(matrix: EmbeddingMatrix) -> Result<Self, IndexError> {
        matrix.check_finite()?;
        Ok(Self { matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn len(&self) -> usize {
        self.matrix.count()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }

    /// The `min(k, N)` closest rows, ascending by distance then row index.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if query.len() != self.dim() {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim(),
                got: query.len(),
            });
        }
        let mut all: Vec<Neighbor> = self
            .matrix
            .rows()
            .enumerate()
            .map(|(row, v)| Neighbor {
                row,
                distance: squared_l2(query, v).sqrt(),
            })
            .collect();
        let k = k.min(all.len());
        let by_rank =
            |a: &Neighbor, b: &Neighbor| a.distance.total_cmp(&b.distance).then(a.row.cmp(&b.row));
        if k < all.len() {
            all.select_nth_unstable_by(k, by_rank);
            all.truncate(k);
        }
        all.sort_unstable_by(by_rank);
        Ok(all)
    }

    /// Runs [`FlatIndex::search`] for every query row, in parallel.
    pub fn search_batch(
        &self,
        queries: &EmbeddingMatrix,
        k: usize,
    ) -> Result<Vec<Vec<Neighbor>>, IndexError> {
        if queries.dim() != self.dim() {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim(),
                got: queries.dim(),
            });
        }
        queries
            .as_slice()
            .par_chunks_exact(queries.dim())
            .map(|q| self.search(q, k))
            .collect()
    }
}
