use super::blockdiag::BlockDiagOperator;
use super::sparse::SparseMatrix;
use crate::error::{Error, Result};

/// `L = E diag(e) Eᵀ` for an oriented incidence matrix `E` (n×m).
pub fn laplacian_from_edges(
    incidence: &SparseMatrix,
    edge_weights: &[f64],
) -> Result<SparseMatrix> {
    let n = incidence.rows();
    let m = incidence.cols();
    if edge_weights.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "incidence has {m} columns but {} edge weights were given",
            edge_weights.len()
        )));
    }
    if let Some(k) = edge_weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("edge weight {k}")));
    }

    let mut ends: Vec<(Option<usize>, Option<usize>)> = vec![(None, None); m];
    for (r, c, v) in incidence.triplets() {
        let slot = &mut ends[c];
        if v == 1.0 && slot.0.is_none() {
            slot.0 = Some(r);
        } else if v == -1.0 && slot.1.is_none() {
            slot.1 = Some(r);
        } else {
            return Err(Error::InvalidArgument(format!(
                "incidence column {c} is not a single +1/-1 pair"
            )));
        }
    }

    let mut triplets = Vec::with_capacity(4 * m);
    for (k, (&w, ends)) in edge_weights.iter().zip(&ends).enumerate() {
        let (Some(i), Some(j)) = *ends else {
            return Err(Error::InvalidArgument(format!(
                "incidence column {k} is not a single +1/-1 pair"
            )));
        };
        triplets.push((i, i, w));
        triplets.push((j, j, w));
        triplets.push((i, j, -w));
        triplets.push((j, i, -w));
    }
    SparseMatrix::from_triplets(n, n, triplets)?.into_symmetric()
}

/// `A = λ (L ⊗ I_d) + XᵀX + ridge·I`, assembled sparse.
///
/// Off-diagonal blocks are `λ L_ij I_d`; diagonal blocks are
/// `λ L_ii I_d + X_iᵀ X_i`. Nothing of size `(nd)²` is allocated.
pub fn assemble_a(
    laplacian: &SparseMatrix,
    designs: &BlockDiagOperator,
    lambda: f64,
    ridge: f64,
) -> Result<SparseMatrix> {
    let n = laplacian.rows();
    if laplacian.cols() != n || designs.n_blocks() != n {
        return Err(Error::DimensionMismatch(format!(
            "laplacian is {}x{} but there are {} design blocks",
            laplacian.rows(),
            laplacian.cols(),
            designs.n_blocks()
        )));
    }
    if !lambda.is_finite() || !ridge.is_finite() {
        return Err(Error::NonFinite("lambda or ridge".into()));
    }
    if lambda < 0.0 || ridge < 0.0 {
        return Err(Error::InvalidArgument(
            "lambda and ridge must be nonnegative".into(),
        ));
    }
    let d = designs.block_cols();
    let nd = n * d;

    let mut triplets = Vec::with_capacity(n * d * d + laplacian.nnz() * d);
    for i in 0..n {
        let g = designs.gram(i);
        let base = i * d;
        for a in 0..d {
            for b in 0..d {
                let mut v = g[(a, b)];
                if a == b {
                    v += ridge;
                }
                if v != 0.0 {
                    triplets.push((base + a, base + b, v));
                }
            }
        }
    }
    if lambda != 0.0 {
        for (i, j, l) in laplacian.triplets() {
            let v = lambda * l;
            for a in 0..d {
                triplets.push((i * d + a, j * d + a, v));
            }
        }
    }
    SparseMatrix::from_triplets(nd, nd, triplets)?.into_symmetric()
}
