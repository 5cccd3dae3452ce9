use std::collections::VecDeque;

use super::{IntensityWindow, Volume};
use crate::error::{Error, Result};
use crate::geometry::{inplane_basis, Plane, Vec3};

/// Square 2D image, row-major. Pixel `(i, j)` sits at offset
/// `((i - c) u + (j - c) v) * pixel_spacing` from the plane pivot, with
/// `c = (size - 1) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    pub size: usize,
    pub pixel_spacing: f64,
    pub data: Vec<f32>,
}

impl Image2D {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[j * self.size + i]
    }

    fn centred(&self, i: usize, j: usize) -> (f64, f64) {
        let c = (self.size as f64 - 1.0) / 2.0;
        (
            (i as f64 - c) * self.pixel_spacing,
            (j as f64 - c) * self.pixel_spacing,
        )
    }

    /// Largest caliper width (mm) of the pixels at or above `threshold`,
    /// probed every half degree. Each pixel counts with its full width.
    pub fn max_feret_diameter(&self, threshold: f32) -> f64 {
        let pts: Vec<(f64, f64)> = (0..self.size)
            .flat_map(|j| (0..self.size).map(move |i| (i, j)))
            .filter(|&(i, j)| self.get(i, j) >= threshold)
            .map(|(i, j)| self.centred(i, j))
            .collect();
        if pts.is_empty() {
            return 0.0;
        }
        let mut best = 0.0f64;
        for step in 0..360 {
            let a = (step as f64 * 0.5).to_radians();
            let (s, c) = a.sin_cos();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &(x, y) in &pts {
                let p = x * c + y * s;
                lo = lo.min(p);
                hi = hi.max(p);
            }
            best = best.max(hi - lo);
        }
        best + self.pixel_spacing
    }

    /// Sizes of the 4-connected regions of pixels at or above `threshold`,
    /// largest first.
    pub fn components(&self, threshold: f32) -> Vec<usize> {
        let n = self.size;
        let mut seen = vec![false; n * n];
        let mut sizes = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..n * n {
            if seen[start] || self.data[start] < threshold {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let mut count = 0;
            while let Some(p) = queue.pop_front() {
                count += 1;
                let (i, j) = (p % n, p / n);
                let mut push = |q: usize| {
                    if !seen[q] && self.data[q] >= threshold {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                };
                if i > 0 {
                    push(p - 1);
                }
                if i + 1 < n {
                    push(p + 1);
                }
                if j > 0 {
                    push(p - n);
                }
                if j + 1 < n {
                    push(p + n);
                }
            }
            sizes.push(count);
        }
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        sizes
    }
}

/// Samples `v` on a `size x size` grid in `plane` with the default
/// background (the lower end of the intensity window).
pub fn reslice(v: &Volume, plane: &Plane, size: usize, pixel_spacing: f64) -> Result<Image2D> {
    reslice_with_background(v, plane, size, pixel_spacing, IntensityWindow::default().lo)
}

pub fn reslice_with_background(
    v: &Volume,
    plane: &Plane,
    size: usize,
    pixel_spacing: f64,
    background: f32,
) -> Result<Image2D> {
    if size < 2 {
        return Err(Error::invalid("reslice size must be at least 2"));
    }
    if !(pixel_spacing > 0.0 && pixel_spacing.is_finite()) {
        return Err(Error::invalid("pixel spacing must be positive"));
    }
    let (u, w) = inplane_basis(&plane.normal());
    // Work relative to the volume origin so that moving origin and pivot
    // together does not change any intermediate value.
    let rel: Vec3 = plane.pivot - v.origin_f64();
    let spacing = v.spacing_f64();
    let c = (size as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(size * size);
    for j in 0..size {
        let dv = (j as f64 - c) * pixel_spacing;
        for i in 0..size {
            let du = (i as f64 - c) * pixel_spacing;
            let p = rel + u * du + w * dv;
            let voxel = p.component_div(&spacing);
            data.push(v.sample_voxel(&voxel).unwrap_or(background));
        }
    }
    Ok(Image2D {
        size,
        pixel_spacing,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PlaneOrientation;

    #[test]
    fn uniform_volume_gives_uniform_image() {
        let v = Volume::filled([30, 30, 30], [0.7; 3], [0.0; 3], 250.0).unwrap();
        let plane = Plane::new(
            Vec3::new(10.0, 10.0, 10.0),
            PlaneOrientation::new(0.4, -0.7),
        )
        .unwrap();
        let img = reslice(&v, &plane, 16, 0.5).unwrap();
        assert!(img.data.iter().all(|&x| (x - 250.0).abs() < 1e-4));
    }

    #[test]
    fn outside_is_background() {
        let v = Volume::filled([4, 4, 4], [1.0; 3], [0.0; 3], 5.0).unwrap();
        let plane =
            Plane::new(Vec3::new(100.0, 0.0, 0.0), PlaneOrientation::new(0.0, 0.0)).unwrap();
        let img = reslice_with_background(&v, &plane, 4, 1.0, -7.0).unwrap();
        assert!(img.data.iter().all(|&x| x == -7.0));
    }

    #[test]
    fn translation_equivariant() {
        let n = 12;
        let data: Vec<f32> = (0..n * n * n).map(|i| ((i * 37) % 101) as f32).collect();
        let v = Volume::new([n, n, n], [0.5, 0.75, 1.0], [1.0, -2.0, 0.5], data).unwrap();
        let o = PlaneOrientation::new(0.3, 0.9);
        let pivot = Vec3::new(3.25, 1.5, 4.0);
        let a = reslice(&v, &Plane::new(pivot, o).unwrap(), 9, 0.6).unwrap();
        let shift = [8.0f32, -4.5, 2.25];
        let moved = v
            .clone()
            .with_origin([1.0 + shift[0], -2.0 + shift[1], 0.5 + shift[2]]);
        let pivot2 = pivot + Vec3::new(shift[0] as f64, shift[1] as f64, shift[2] as f64);
        let b = reslice(&moved, &Plane::new(pivot2, o).unwrap(), 9, 0.6).unwrap();
        assert!(a
            .data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn feret_of_square_block() {
        let size = 21;
        let mut data = vec![0.0f32; size * size];
        for j in 5..15 {
            for i in 5..15 {
                data[j * size + i] = 1.0;
            }
        }
        let img = Image2D {
            size,
            pixel_spacing: 1.0,
            data,
        };
        // diagonal of the pixel-centre square plus one pixel width
        let d = img.max_feret_diameter(0.5);
        assert!((d - (9.0 * 2f64.sqrt() + 1.0)).abs() < 1e-3);
        assert_eq!(img.components(0.5), vec![100]);
    }
}
