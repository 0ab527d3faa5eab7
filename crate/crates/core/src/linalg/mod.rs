//! Sparse and block-structured linear algebra shared by the solvers.

mod blockdiag;
mod boxlsq;
pub mod guard;
mod laplacian;
mod solve;
mod sparse;

pub(crate) use blockdiag::exact_gram;
pub use blockdiag::BlockDiagOperator;
pub use boxlsq::bounded_least_squares;
pub use laplacian::{assemble_a, laplacian_from_edges};
pub(crate) use solve::dense_spd_solve;
pub use solve::{spd_solve, Preconditioner, SolverOptions, SpdSolveReport, SpdSystem};
pub use sparse::SparseMatrix;
