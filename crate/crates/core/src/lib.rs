//! Point spatio-temporal (PST) convolution for raw point cloud sequences.
//!
//! The crate is organized bottom-up:
//!
//! * [`geom`]: farthest point sampling and radius neighbor queries.
//! * [`tube`]: anchor frame selection and point tube construction.
//! * [`pstops`]: the PST convolution (spatial then temporal) with analytic gradients.
//! * [`psttrans`]: the PST transposed convolution (temporal scatter then
//!   inverse-distance interpolation).
//! * [`nn`]: batch norm, ReLU, pooling, linear heads, cross-entropy, SGD and a
//!   finite-difference gradient checker.
//! * [`net`]: PSTNet classification and segmentation architectures.
//! * [`data`]: synthetic moving-digit point cloud sequences and the PCSQ1 file format.
//! * [`train`]: training and evaluation loops shared by the CLI and the tests.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geom;
pub mod gradcheck;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod pstops;
pub mod psttrans;
pub mod rng;
pub mod sequence;
pub mod train;
pub mod tube;

pub use error::{Error, Result};
pub use geom::{NeighborList, Sampling};
pub use net::{Network, NetConfig, Target, Task};
pub use pstops::{LayerIO, PstConv, SpatialKernel, TemporalKernel};
pub use psttrans::{PstTrans, TransKernel};
pub use sequence::PointCloudSequence;
pub use tube::{AnchorMode, PointTube, TubeSpec};
