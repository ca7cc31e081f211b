//! Joint multi-source localization and data association from unlabeled
//! time-difference-of-arrival (TDOA) measurements.
//!
//! The processing chain is:
//!
//! 1. [`multilateration`] draws sets of receiver pairs and solves the minimal
//!    three-equation TDOA problem for every combination of measurements,
//!    producing a candidate set of source positions.
//! 2. [`transport`] associates measurements with candidates by solving a
//!    sparsity-regularized unbalanced optimal transport problem in the dual,
//!    with log-domain Sinkhorn-type block updates.
//! 3. [`refine`] re-associates against the selected candidates and polishes
//!    each source position with a local least-squares search.
//!
//! [`pipeline`] ties these together, [`crlb`] provides the Cramér–Rao bound
//! used both as a retry trigger and as an evaluation benchmark, and
//! [`experiment`] runs seeded Monte-Carlo sweeps.

pub mod cli;
pub mod crlb;
pub mod error;
pub mod experiment;
pub mod multilateration;
pub mod pipeline;
pub mod refine;
pub mod scene;
pub mod seed;
pub mod transport;

pub use error::{Error, Result};
pub use scene::{Point3, ReceiverPair};
