//! Dissipativity-based abstraction certificates for networks of control systems.
//!
//! `simcert` constructs and verifies quadratic storage-function certificates
//! relating control systems to lower-dimensional abstractions, composes them
//! into network-level simulation functions over an interconnection matrix,
//! and evaluates formal error bounds between concrete and abstract output
//! trajectories. A reproducible Laplacian-network case study and a CLI front
//! end (`simcert`) sit on top of the library.
//!
//! The guide in `book/` walks through the concepts chapter by chapter; every
//! code snippet there is compiled and run as a doc-test.

pub mod casestudy;
pub mod compose;
pub mod matgeo;
pub mod plot;
pub mod report;
pub mod scenario;
pub mod storage;
pub mod synthesis;
pub mod sysmodel;

pub use matgeo::{Mat, Tolerance};
pub use report::VerificationReport;
pub use storage::{ComparisonFunctions, LmiCertificate, StorageCertificate};
pub use sysmodel::{ControlSystem, SignalSpec, SlopeRestrictedFn, Trajectory};
