use nalgebra::{DMatrix, DVector};

use super::guard;
use crate::error::{Error, Result};
#[cfg(feature = "parallel")]
use crate::par::*;

/// Compressed sparse row matrix.
///
/// Built from `(row, col, value)` triplets; repeated coordinates are summed so
/// the stored pattern never contains duplicates. Instances flagged symmetric
/// have been checked to satisfy `a[i][j] == a[j][i]` bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    symmetric: bool,
}

impl SparseMatrix {
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        for &(r, c, v) in &triplets {
            if r >= rows || c >= cols {
                return Err(Error::DimensionMismatch(format!(
                    "entry ({r}, {c}) outside a {rows}x{cols} matrix"
                )));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("sparse entry ({r}, {c})")));
            }
        }
        triplets.sort_unstable_by_key(|a| (a.0, a.1));

        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for i in 0..rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(SparseMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
            symmetric: false,
        })
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
            symmetric: true,
        }
    }

    /// Verifies exact symmetry and sets the symmetric flag.
    pub fn into_symmetric(mut self) -> Result<Self> {
        if self.rows != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} matrix cannot be symmetric",
                self.rows, self.cols
            )));
        }
        if let Some((row, col)) = self.first_asymmetry() {
            return Err(Error::Asymmetric { row, col });
        }
        self.symmetric = true;
        Ok(self)
    }

    fn first_asymmetry(&self) -> Option<(usize, usize)> {
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                if self.get(c, r) != self.values[k] {
                    return Some((r, c));
                }
            }
        }
        None
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric || (self.rows == self.cols && self.first_asymmetry().is_none())
    }

    pub fn is_flagged_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let range = self.row_ptr[row]..self.row_ptr[row + 1];
        match self.col_idx[range.clone()].binary_search(&col) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[row]..self.row_ptr[row + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    /// Largest absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.row(r).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self.get(i, i))
            .collect()
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "mul_vec: length mismatch");
        let mut y = vec![0.0; self.rows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols, "mul_vec: length mismatch");
        assert_eq!(y.len(), self.rows, "mul_vec: output length mismatch");
        let row_dot = |(r, out): (usize, &mut f64)| {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *out = acc;
        };
        crate::if_rayon!(
            y.par_iter_mut()
                .enumerate()
                .with_min_len(MIN_PAR_LEN * 32)
                .for_each(row_dot),
            y.iter_mut().enumerate().for_each(row_dot)
        );
    }

    pub fn mul_dvec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.mul_vec(x.as_slice()))
    }

    /// Dense copy. Recorded by the allocation guard.
    pub fn to_dense(&self) -> DMatrix<f64> {
        guard::record(self.rows, self.cols);
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.triplets() {
            out[(r, c)] = v;
        }
        out
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Result<Self> {
        let triplets = (0..m.nrows())
            .flat_map(|r| (0..m.ncols()).map(move |c| (r, c)))
            .filter_map(|(r, c)| {
                let v = m[(r, c)];
                (v != 0.0).then_some((r, c, v))
            })
            .collect();
        Self::from_triplets(m.nrows(), m.ncols(), triplets)
    }

    pub fn transpose(&self) -> SparseMatrix {
        let triplets = self.triplets().map(|(r, c, v)| (c, r, v)).collect();
        let mut t = Self::from_triplets(self.cols, self.rows, triplets)
            .expect("transpose of a valid matrix is valid");
        t.symmetric = self.symmetric;
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let m =
            SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (0, 1, 2.5), (1, 0, 3.5)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 1), 3.5);
        assert!(m.into_symmetric().is_ok());
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(matches!(
            SparseMatrix::from_triplets(2, 2, vec![(2, 0, 1.0)]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn asymmetry_detected() {
        let m = SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 0, 1.0 + 1e-15)]).unwrap();
        assert!(matches!(m.into_symmetric(), Err(Error::Asymmetric { .. })));
    }

    #[test]
    fn matvec_matches_dense() {
        let m = SparseMatrix::from_triplets(
            3,
            2,
            vec![(0, 0, 1.0), (1, 1, -2.0), (2, 0, 0.5), (2, 1, 4.0)],
        )
        .unwrap();
        let x = [3.0, -1.0];
        let dense = m.to_dense() * DVector::from_row_slice(&x);
        assert_eq!(m.mul_vec(&x), dense.as_slice());
        assert_eq!(m.transpose().transpose(), m);
    }
}
