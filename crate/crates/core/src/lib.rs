//! Skeleton-graph registration of costal-cartilage point clouds for
//! transferring planned intercostal ultrasound scan paths from a template
//! to a subject.
//!
//! The pipeline is: coarse sternum alignment ([`preprocess`]), a
//! geodesic-restricted SOM fit of a dense template graph to both clouds
//! ([`somgraph`]), locally rigid node transforms blended into a non-rigid
//! warp ([`register`]), and sphere-neighborhood waypoint mapping. The
//! [`baselines`] module holds ICP, CPD and a sparse-graph variant for
//! comparison, [`synth`] generates desk-scale anatomy with ground truth,
//! [`shaperepair`] repairs binary masks through a rejection-sampled latent
//! manifold, and [`eval`] computes metrics and runs benchmarks.

// Validation uses !(x > 0.0) style checks so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod eval;
pub mod geom;
pub mod preprocess;
pub mod register;
pub mod rng;
pub mod shaperepair;
pub mod somgraph;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result};
pub use geom::{Point3, PointCloud, RigidTransform};
pub use register::{PipelineParams, RegisterParams, RegistrationOutput};
pub use shaperepair::BinaryMask;
pub use somgraph::SkeletonGraph;
