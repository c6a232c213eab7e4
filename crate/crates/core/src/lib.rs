//! One-shot weakly-supervised segmentation of 3D volumes.
//!
//! A single annotated support volume carries scribbles; a self-supervised
//! propagation-reconstruction network ([`prnet`]) relocates each scribble
//! point onto unlabeled volumes ([`propagate`]), a dual-level feature check
//! discards doubtful points, geodesic distance turns the surviving points
//! into dense pseudo masks ([`geos`]), and a small 3D UNet is trained on
//! those masks with progressive label correction ([`seg`]).
//!
//! Everything runs on the CPU at desk scale, driven by procedurally
//! generated phantoms ([`phantom`]).

pub mod error;
pub mod geos;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod prnet;
pub mod propagate;
pub mod scribble;
pub mod seg;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use volume::{LabelGrid, ScribbleSet, Volume3, Voxel};
