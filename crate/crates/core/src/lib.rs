//! Multi-task linear regression that learns the task-relationship graph
//! together with the task models.
//!
//! The inner problem fits all task models under graph-Laplacian smoothing
//! for a fixed set of edge weights; the outer problem tunes the edge weights
//! against validation error plus sparsity regularizers, using the exact
//! hypergradient obtained from one adjoint solve.
//!
//! ```no_run
//! use graphmtl::{driver, synth};
//!
//! let spec = synth::SynthSpec::line(7);
//! let (tasks, truth) = synth::generate(&spec).unwrap();
//! let hp = graphmtl::HyperParams::default();
//! let fit = driver::fit(&tasks, &hp, &driver::SplitSpec::default()).unwrap();
//! println!("{} edges learned", fit.graph.edges().len());
//! # let _ = truth;
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod driver;
pub mod error;
pub mod graph;
pub mod hypergrad;
pub mod inner;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod par;
pub mod synth;

pub use driver::{FitResult, SplitSpec, TraceRecord};
pub use error::{Error, Result};
pub use graph::{ClusterAssignment, IncidenceView, TaskGraph};
pub use hypergrad::{HyperParams, Variant};
pub use inner::{EdgeReweights, StackedModel, TaskData};
pub use metrics::{FuzzyAdjacency, VeracityReport};
