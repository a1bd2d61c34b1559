//! Distributed DC optimal power flow built on Kron-reduced area models.
//!
//! Each area keeps its own buses, the far ends of its tie-lines and the
//! reference bus, and folds the rest of the grid into that reduced system.
//! Agents then run consensus ADMM on the injections at shared buses, using
//! local PTDF matrices for their line flows. Central solvers and a
//! phase-angle ADMM baseline are included for comparison.
//!
//! ```no_run
//! use ptdf_admm::{case, dist, partition};
//!
//! let text = std::fs::read_to_string("cases/pglib_opf_case57_ieee.m").unwrap();
//! let net = case::build_network(&case::parse_case(&text).unwrap()).unwrap();
//! let part = partition::partition_fallback(&net, 5, 0).unwrap();
//! let report = dist::run_distributed_ptdf(&net, &part, &dist::DistConfig::default()).unwrap();
//! println!("{} after {} iterations", report.objective, report.iterations);
//! ```

pub mod baseline;
pub mod case;
pub mod central;
pub mod dist;
pub mod kron;
mod linalg;
pub mod netmatrix;
pub mod partition;
pub mod qp;
pub mod report;
pub mod runtime;

pub use case::{BusId, Network};
pub use partition::{AreaId, Partition};
pub use report::{ConvergenceReport, TraceRow};
