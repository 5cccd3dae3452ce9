//! Volumes, patches and oblique reslicing.

mod io;
mod patch;
mod reslice;

pub use io::{load, read_from, save, write_to, MAGIC};
pub use patch::extract_patch_with;
pub use patch::{extract_patch, IntensityWindow, Patch, PATCH_SIDE, PATCH_SPACING};
pub use reslice::{reslice, reslice_with_background, Image2D};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// A scalar 3D image on an axis-aligned grid. Data is stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    origin: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f32; 3],
        origin: [f32; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "volume dims must be >= 1, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("origin must be finite"));
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::invalid("volume dims overflow"))?;
        if data.len() != len {
            return Err(Error::invalid(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("volume values must be finite"));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            data,
        })
    }

    pub fn filled(
        dims: [usize; 3],
        spacing: [f32; 3],
        origin: [f32; 3],
        value: f32,
    ) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, spacing, origin, vec![value; len])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Moves the volume in world space without touching voxel data.
    pub fn with_origin(mut self, origin: [f32; 3]) -> Self {
        self.origin = origin;
        self
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn spacing_f64(&self) -> Vec3 {
        Vec3::new(
            self.spacing[0] as f64,
            self.spacing[1] as f64,
            self.spacing[2] as f64,
        )
    }

    pub fn origin_f64(&self) -> Vec3 {
        Vec3::new(
            self.origin[0] as f64,
            self.origin[1] as f64,
            self.origin[2] as f64,
        )
    }

    /// Continuous voxel coordinates of a world point.
    pub fn world_to_voxel(&self, p: &Vec3) -> Vec3 {
        (p - self.origin_f64()).component_div(&self.spacing_f64())
    }

    pub fn voxel_to_world(&self, v: &Vec3) -> Vec3 {
        self.origin_f64() + v.component_mul(&self.spacing_f64())
    }

    /// World-space extent of the grid (distance between first and last voxel centres).
    pub fn extent(&self) -> Vec3 {
        Vec3::new(
            (self.dims[0] - 1) as f64,
            (self.dims[1] - 1) as f64,
            (self.dims[2] - 1) as f64,
        )
        .component_mul(&self.spacing_f64())
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let v = self.world_to_voxel(p);
        (0..3).all(|a| v[a] >= 0.0 && v[a] <= (self.dims[a] - 1) as f64)
    }

    /// Point normalized by the volume extents into `[0, 1]^3`, clamped.
    pub fn normalized_location(&self, p: &Vec3) -> [f64; 3] {
        let v = self.world_to_voxel(p);
        let mut out = [0.0; 3];
        for a in 0..3 {
            let span = (self.dims[a] - 1).max(1) as f64;
            out[a] = (v[a] / span).clamp(0.0, 1.0);
        }
        out
    }

    /// Trilinear interpolation at continuous voxel coordinates; `None`
    /// outside the grid.
    pub fn sample_voxel(&self, v: &Vec3) -> Option<f32> {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let x = v[a];
            let max = (self.dims[a] - 1) as f64;
            if !(x >= 0.0 && x <= max) {
                return None;
            }
            if self.dims[a] == 1 {
                base[a] = 0;
                frac[a] = 0.0;
                continue;
            }
            let f = x.floor().min(max - 1.0);
            base[a] = f as usize;
            frac[a] = x - f;
        }
        let [i, j, k] = base;
        let step = |a: usize| usize::from(self.dims[a] > 1);
        let (di, dj, dk) = (step(0), step(1), step(2));
        let c = |ii: usize, jj: usize, kk: usize| self.get(ii, jj, kk) as f64;
        let [fx, fy, fz] = frac;
        let c00 = c(i, j, k) * (1.0 - fx) + c(i + di, j, k) * fx;
        let c10 = c(i, j + dj, k) * (1.0 - fx) + c(i + di, j + dj, k) * fx;
        let c01 = c(i, j, k + dk) * (1.0 - fx) + c(i + di, j, k + dk) * fx;
        let c11 = c(i, j + dj, k + dk) * (1.0 - fx) + c(i + di, j + dj, k + dk) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        Some((c0 * (1.0 - fz) + c1 * fz) as f32)
    }

    /// Trilinear interpolation at a world point.
    pub fn sample_world(&self, p: &Vec3) -> Option<f32> {
        self.sample_voxel(&self.world_to_voxel(p))
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-500.0f32..1000.0)).collect();
        Volume::new(dims, [0.7, 0.8, 1.1], [-3.0, 4.5, 10.0], data).unwrap()
    }

    #[test]
    fn rejects_invalid() {
        assert!(Volume::new([0, 1, 1], [1.0; 3], [0.0; 3], vec![]).is_err());
        assert!(Volume::new([2, 1, 1], [1.0; 3], [0.0; 3], vec![0.0]).is_err());
        assert!(Volume::new([1, 1, 1], [0.0, 1.0, 1.0], [0.0; 3], vec![0.0]).is_err());
        assert!(Volume::new([1, 1, 1], [1.0; 3], [0.0; 3], vec![f32::NAN]).is_err());
    }

    #[test]
    fn trilinear_exact_at_grid_points() {
        let v = random_volume([7, 5, 6], 3);
        for k in 0..6 {
            for j in 0..5 {
                for i in 0..7 {
                    let p = v.voxel_to_world(&Vec3::new(i as f64, j as f64, k as f64));
                    let s = v.sample_world(&p).unwrap();
                    assert!((s - v.get(i, j, k)).abs() <= 1e-6 * v.get(i, j, k).abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn trilinear_reproduces_affine_field() {
        let dims = [6, 7, 8];
        let mut data = Vec::new();
        for k in 0..8 {
            for j in 0..7 {
                for i in 0..6 {
                    data.push(2.0 * i as f32 - 0.5 * j as f32 + 3.0 * k as f32 + 1.0);
                }
            }
        }
        let v = Volume::new(dims, [1.0; 3], [0.0; 3], data).unwrap();
        let p = Vec3::new(2.25, 3.5, 6.75);
        let expected = 2.0 * 2.25 - 0.5 * 3.5 + 3.0 * 6.75 + 1.0;
        assert!((v.sample_world(&p).unwrap() as f64 - expected).abs() < 1e-5);
        assert!(v.sample_world(&Vec3::new(-0.1, 0.0, 0.0)).is_none());
        assert!(v.sample_world(&Vec3::new(5.0, 6.0, 7.0)).is_some());
    }

    #[test]
    fn normalized_location_corners() {
        let v = random_volume([5, 5, 5], 1);
        let lo = v.normalized_location(&v.voxel_to_world(&Vec3::zeros()));
        let hi = v.normalized_location(&v.voxel_to_world(&Vec3::new(4.0, 4.0, 4.0)));
        assert_eq!(lo, [0.0; 3]);
        for x in hi {
            assert!((x - 1.0).abs() < 1e-9);
        }
    }
}
