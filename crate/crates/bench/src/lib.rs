//! Fixtures shared by the criterion benches.

use xsect_core::volume::PATCH_SIDE;
use xsect_core::Volume;

/// Deterministic pseudo-random values in [-1, 1].
pub fn signal(len: usize, seed: u32) -> Vec<f32> {
    (0..len)
        .map(|i| {
            let h = (i as u32)
                .wrapping_mul(2_654_435_761)
                .wrapping_add(seed.wrapping_mul(40_503));
            (h >> 8) as f32 / (1u32 << 23) as f32 - 1.0
        })
        .collect()
}

pub fn patch_input() -> Vec<f32> {
    signal(PATCH_SIDE.pow(3), 1)
}

/// A bright straight tube of radius `radius` mm along z through the centre
/// of an `n`^3 volume at 1 mm spacing.
pub fn tube_volume(n: usize, radius: f64) -> Volume {
    let c = (n as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(n.pow(3));
    for _k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let r = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
                data.push(if r <= radius { 400.0 } else { -100.0 });
            }
        }
    }
    Volume::new([n; 3], [1.0; 3], [0.0; 3], data).expect("valid volume")
}
