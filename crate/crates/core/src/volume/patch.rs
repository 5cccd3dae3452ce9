use serde::{Deserialize, Serialize};

use super::Volume;
use crate::geometry::Vec3;

pub const PATCH_SIDE: usize = 64;
/// Isotropic grid spacing (mm) patches are sampled on.
pub const PATCH_SPACING: f32 = 0.7;

const ISOTROPIC_TOLERANCE: f32 = 1e-4;

/// Fixed intensity window mapped affinely onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityWindow {
    pub lo: f32,
    pub hi: f32,
}

impl Default for IntensityWindow {
    fn default() -> Self {
        Self {
            lo: -100.0,
            hi: 800.0,
        }
    }
}

impl IntensityWindow {
    #[inline]
    pub fn map(&self, x: f32) -> f32 {
        let c = x.clamp(self.lo, self.hi);
        (2.0 * (c - self.lo) / (self.hi - self.lo) - 1.0).clamp(-1.0, 1.0)
    }
}

/// A 64^3 normalized neighbourhood of a pivot point, stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub values: Vec<f32>,
    /// Requested centre in mm.
    pub center: Vec3,
    pub source_spacing: [f32; 3],
}

impl Patch {
    pub fn side(&self) -> usize {
        PATCH_SIDE
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[(k * PATCH_SIDE + j) * PATCH_SIDE + i]
    }
}

fn is_patch_grid(v: &Volume) -> bool {
    v.spacing()
        .iter()
        .all(|s| (s - PATCH_SPACING).abs() <= ISOTROPIC_TOLERANCE)
}

pub fn extract_patch(v: &Volume, center: &Vec3) -> Patch {
    extract_patch_with(v, center, &IntensityWindow::default())
}

/// Crops the 64^3 neighbourhood of the voxel nearest to `center`.
///
/// Volumes that are not on the isotropic 0.7 mm grid are resampled onto it
/// (trilinear, centred exactly at `center`). Voxels outside the volume take
/// the window minimum.
pub fn extract_patch_with(v: &Volume, center: &Vec3, window: &IntensityWindow) -> Patch {
    let n = PATCH_SIDE;
    let half = (n / 2) as i64;
    let mut values = vec![-1.0f32; n * n * n];
    if is_patch_grid(v) {
        let c = v.world_to_voxel(center);
        let dims = v.dims();
        let ci = [c[0].round(), c[1].round(), c[2].round()];
        if ci.iter().all(|x| x.is_finite() && x.abs() < 1e12) {
            let ci = ci.map(|x| x as i64);
            let start_i = ci[0] - half;
            // x-range of the patch row that falls inside the volume
            let lo_i = (-start_i).clamp(0, n as i64) as usize;
            let hi_i = (dims[0] as i64 - start_i).clamp(0, n as i64) as usize;
            for pk in 0..n {
                let vk = ci[2] - half + pk as i64;
                if vk < 0 || vk >= dims[2] as i64 {
                    continue;
                }
                for pj in 0..n {
                    let vj = ci[1] - half + pj as i64;
                    if vj < 0 || vj >= dims[1] as i64 || lo_i >= hi_i {
                        continue;
                    }
                    let src = v.index((start_i + lo_i as i64) as usize, vj as usize, vk as usize);
                    let dst = (pk * n + pj) * n;
                    for (d, s) in values[dst + lo_i..dst + hi_i]
                        .iter_mut()
                        .zip(&v.data()[src..src + (hi_i - lo_i)])
                    {
                        *d = window.map(*s);
                    }
                }
            }
        }
    } else {
        let step = PATCH_SPACING as f64;
        for pk in 0..n {
            for pj in 0..n {
                for pi in 0..n {
                    let offset = Vec3::new(
                        (pi as i64 - half) as f64,
                        (pj as i64 - half) as f64,
                        (pk as i64 - half) as f64,
                    ) * step;
                    if let Some(x) = v.sample_world(&(center + offset)) {
                        values[(pk * n + pj) * n + pi] = window.map(x);
                    }
                }
            }
        }
    }
    Patch {
        values,
        center: *center,
        source_spacing: v.spacing(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_at_window_max() {
        let v = Volume::filled([70, 70, 70], [0.7; 3], [0.0; 3], 800.0).unwrap();
        let p = extract_patch(&v, &Vec3::new(24.5, 24.5, 24.5));
        assert!(p.values.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn far_outside_is_padding() {
        let v = Volume::filled([10, 10, 10], [0.7; 3], [0.0; 3], 500.0).unwrap();
        let p = extract_patch(&v, &Vec3::new(1e4, -1e4, 0.0));
        assert!(p.values.iter().all(|&x| x == -1.0));
    }

    #[test]
    fn crop_alignment_and_partial_padding() {
        let dims = [20, 20, 20];
        let mut data = vec![0.0f32; 8000];
        for k in 0..20 {
            for j in 0..20 {
                for i in 0..20 {
                    data[(k * 20 + j) * 20 + i] = (i + 20 * j) as f32;
                }
            }
        }
        let v = Volume::new(dims, [0.7; 3], [0.0; 3], data).unwrap();
        let window = IntensityWindow { lo: 0.0, hi: 400.0 };
        // centre on voxel (10, 10, 10)
        let p = extract_patch_with(&v, &Vec3::new(7.0, 7.0, 7.0), &window);
        // patch voxel 32 maps to volume voxel 10
        assert_eq!(p.at(32, 32, 32), window.map(10.0 + 200.0));
        assert_eq!(p.at(22, 23, 22), window.map(0.0 + 20.0));
        assert_eq!(p.at(21, 32, 32), -1.0);
        assert_eq!(p.at(42, 32, 32), -1.0);
        assert_eq!(p.at(41, 32, 32), window.map(19.0 + 200.0));
    }

    #[test]
    fn anisotropic_is_resampled() {
        let v = Volume::filled([50, 40, 20], [1.0, 1.0, 2.0], [0.0; 3], 350.0).unwrap();
        let p = extract_patch(&v, &Vec3::new(20.0, 20.0, 20.0));
        let w = IntensityWindow::default();
        assert_eq!(p.at(32, 32, 32), w.map(350.0));
        // 31 steps of 0.7 mm from the centre, still inside in x
        assert_eq!(p.at(63, 32, 32), w.map(350.0));
        assert_eq!(p.source_spacing, [1.0, 1.0, 2.0]);
    }

    #[test]
    fn window_is_monotone() {
        let w = IntensityWindow::default();
        let xs: Vec<f32> = (-300..1000).map(|x| x as f32 * 1.37).collect();
        for pair in xs.windows(2) {
            assert!(w.map(pair[0]) <= w.map(pair[1]));
        }
        assert_eq!(w.map(-1e6), -1.0);
        assert_eq!(w.map(1e6), 1.0);
    }
}
