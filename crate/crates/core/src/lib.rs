//! Parallel incremental quasi-Newton optimization for sparse matrix
//! factorization.
//!
//! The crate provides the factorization objective ([`model`]), five ways to
//! cover the observations with subsets of parameter-disjoint blocks
//! ([`partition`]), a compact L-BFGS memory ([`lbfgs`]), the HAMSI and
//! mini-batch gradient descent loops ([`optimizer`]), and ingestion and
//! output helpers ([`harness`]).

pub mod error;
pub mod harness;
pub mod lbfgs;
pub mod model;
pub mod optimizer;
pub mod partition;

pub use error::{Error, Result};
pub use lbfgs::LbfgsMemory;
pub use model::{Entry, FactorModel, ParamLayout, SparseObservations};
pub use optimizer::{run, run_from, Algorithm, Engine, RunConfig, Schedule, ScheduleMode, TraceRecord};
pub use partition::{build_cover, par_work, Cover, Scheme};
