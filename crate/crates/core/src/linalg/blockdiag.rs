use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `X = diag(X_1, …, X_n)` kept as its blocks.
///
/// All blocks share the column count `d`; row counts may differ per block.
#[derive(Debug, Clone)]
pub struct BlockDiagOperator {
    blocks: Vec<DMatrix<f64>>,
    d: usize,
}

impl BlockDiagOperator {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let d = blocks.first().map_or(0, DMatrix::ncols);
        for (i, b) in blocks.iter().enumerate() {
            if b.ncols() != d {
                return Err(Error::DimensionMismatch(format!(
                    "block {i} has {} columns, expected {d}",
                    b.ncols()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("design block {i}")));
            }
        }
        Ok(BlockDiagOperator { blocks, d })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Columns per block.
    pub fn block_cols(&self) -> usize {
        self.d
    }

    pub fn total_rows(&self) -> usize {
        self.blocks.iter().map(DMatrix::nrows).sum()
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &DMatrix<f64> {
        &self.blocks[i]
    }

    /// `X_iᵀ X_i`, computed so the result is exactly symmetric.
    pub fn gram(&self, i: usize) -> DMatrix<f64> {
        exact_gram(&self.blocks[i])
    }

    /// `X v` split per block; `v` is the stacked `nd` vector.
    pub fn apply(&self, v: &DVector<f64>) -> Vec<DVector<f64>> {
        assert_eq!(v.len(), self.d * self.blocks.len());
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b * v.rows(i * self.d, self.d))
            .collect()
    }

    /// `Xᵀ r` for per-block vectors `r_i`, stacked into one `nd` vector.
    pub fn transpose_apply(&self, r: &[DVector<f64>]) -> DVector<f64> {
        assert_eq!(r.len(), self.blocks.len());
        let mut out = DVector::zeros(self.d * self.blocks.len());
        for (i, (b, ri)) in self.blocks.iter().zip(r).enumerate() {
            out.rows_mut(i * self.d, self.d).copy_from(&b.tr_mul(ri));
        }
        out
    }
}

pub(crate) fn exact_gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    let d = x.ncols();
    let mut g = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let v = x.column(a).dot(&x.column(b));
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
    }
    g
}
