//! Regression of vessel cross-section orientations from 3D patches, with
//! Monte-Carlo uncertainty estimates and inter-operator agreement analysis.

pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod network;
pub mod optimizer;
pub mod phantom;
pub mod rng;
pub mod stats;
pub mod study;
pub mod uncertainty;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{Plane, PlaneOrientation, Vec3};
pub use phantom::{Annotation, GroundTruth, Landmark, PhantomSpec};
pub use volume::{Image2D, Patch, Volume};
