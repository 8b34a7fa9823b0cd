//! Privacy-preserving face patch sharing and distributed training.
//!
//! Facial patches are split into XOR visual secret shares: one
//! authentication share per subject held by a trusted vault, and one
//! private share per patch spread across storage institutions. Training
//! workstations recombine shares only in memory, for the duration of a
//! round.

pub mod access;
pub mod bridge;
pub mod distribution;
pub mod hygiene;
pub mod metrics;
pub mod orchestrator;
pub mod parallel;
pub mod patch;
pub mod rng;
pub mod share_file;
pub mod simnet;
pub mod vault;
pub mod vss;

pub use parallel::Exec;
pub use vss::{GridShape, PatchImage, PatchKind, ShareGrid, ShareRole, SubjectId};
