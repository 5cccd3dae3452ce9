//! The orientation regression network.

pub mod checkpoint;
mod config;
pub mod conv;
mod dropblock;
mod model;
mod ops;
mod params;
mod scalar;
mod simd;

pub use config::{
    conv_out, pool_out, ConvStage, DropBlockSpec, HeadLayer, NetworkConfig, PoolSpec,
    LOCATION_FEATURES, OUTPUTS,
};
pub use dropblock::{
    dropblock_gamma, dropblock_mask, expected_drop_fraction, nominal_gamma, SampleMask,
};
pub use model::{BatchStats, ForwardMode, Tape};
pub use params::{ConvParams, DenseParams, Gradients, NetworkParams, OUTPUT_INIT_SCALE};
pub use scalar::{gemm, Scalar};

use std::f64::consts::FRAC_PI_2;

use crate::geometry::PlaneOrientation;
use crate::volume::Patch;

/// Network input values for a patch.
pub fn patch_input<T: Scalar>(patch: &Patch) -> Vec<T> {
    patch
        .values
        .iter()
        .map(|&v| T::from_f64(v as f64))
        .collect()
}

/// Interprets raw outputs as angles normalized by `pi/2` and wraps each
/// into the canonical range.
pub fn decode_output<T: Scalar>(raw: [T; 2]) -> PlaneOrientation {
    PlaneOrientation::from_wrapped(raw[0].to_f64() * FRAC_PI_2, raw[1].to_f64() * FRAC_PI_2)
}

/// Normalized regression target of an orientation.
pub fn encode_target(o: PlaneOrientation) -> [f64; 2] {
    [o.theta / FRAC_PI_2, o.phi / FRAC_PI_2]
}
