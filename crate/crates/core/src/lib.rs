//! Trajectory inference from static population snapshots.
//!
//! The pipeline has three stages:
//!
//! 1. [`geometry`] builds a diffusion operator on a point cloud and derives a
//!    multiscale diffusion geodesic distance from it.
//! 2. [`gae`] trains an autoencoder whose latent Euclidean distances match that
//!    geodesic distance, so that flows can be learned in a space where straight
//!    lines follow the data manifold.
//! 3. [`training`] fits a neural ODE (optionally with a learned per-interval
//!    diffusion scale) whose pushforward of the first snapshot matches every
//!    later snapshot in optimal-transport distance.
//!
//! [`evaluation`] implements the leave-one-timepoint-out protocol, and
//! [`datasets`] provides synthetic snapshot generators and CSV I/O.

pub mod cli;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod gae;
pub mod geometry;
pub mod net;
pub mod ode;
pub mod training;
pub mod transport;

pub(crate) mod util;

pub use datasets::SnapshotDataset;
pub use error::{Error, Result};
pub use geometry::{DiffusionOperator, DistanceMatrix, GeodesicParams, KernelSpec, PointCloud};
pub use net::{Activation, AdamW, MultilayerNet};
