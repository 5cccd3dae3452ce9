//! DropBlock masks: zeroed `b^3` blocks seeded only where the whole block
//! fits inside the feature map.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::Rng;
use rand_distr::{Distribution, Geometric};

use crate::error::{Error, Result};

fn check(dims: [usize; 3], block: usize, rate: f64) -> Result<()> {
    if block == 0 || block % 2 == 0 {
        return Err(Error::invalid(format!(
            "block size must be odd, got {block}"
        )));
    }
    if dims.iter().any(|&d| d < block) {
        return Err(Error::invalid(format!(
            "block {block} larger than feature map {dims:?}"
        )));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "drop rate must be in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// For each coordinate along a dimension, the number of valid seed
/// positions whose block covers it.
fn coverage(dim: usize, block: usize) -> Vec<usize> {
    let h = block / 2;
    (0..dim)
        .map(|x| {
            let lo = x.saturating_sub(h).max(h);
            let hi = (x + h).min(dim - 1 - h);
            if hi >= lo {
                hi - lo + 1
            } else {
                0
            }
        })
        .collect()
}

/// `(m, count)`: how many voxels are covered by exactly `m` seed positions.
fn coverage_histogram(dims: [usize; 3], block: usize) -> Vec<(usize, usize)> {
    use std::collections::BTreeMap;
    let per_dim: Vec<BTreeMap<usize, usize>> = dims
        .iter()
        .map(|&d| {
            let mut h = BTreeMap::new();
            for c in coverage(d, block) {
                *h.entry(c).or_insert(0) += 1;
            }
            h
        })
        .collect();
    let mut hist = BTreeMap::new();
    for (&a, &na) in &per_dim[0] {
        for (&b, &nb) in &per_dim[1] {
            for (&c, &nc) in &per_dim[2] {
                *hist.entry(a * b * c).or_insert(0usize) += na * nb * nc;
            }
        }
    }
    hist.into_iter().collect()
}

fn fraction_from_histogram(hist: &[(usize, usize)], total: usize, gamma: f64) -> f64 {
    hist.iter()
        .map(|&(m, count)| count as f64 * (1.0 - (1.0 - gamma).powi(m as i32)))
        .sum::<f64>()
        / total as f64
}

/// Expected fraction of zeroed voxels when every valid seed fires
/// independently with probability `gamma`, block overlaps included.
pub fn expected_drop_fraction(dims: [usize; 3], block: usize, gamma: f64) -> f64 {
    fraction_from_histogram(
        &coverage_histogram(dims, block),
        dims.iter().product(),
        gamma,
    )
}

/// Textbook seed probability `rate * prod(d) / (b^3 prod(d - b + 1))`,
/// which ignores block overlap.
pub fn nominal_gamma(dims: [usize; 3], block: usize, rate: f64) -> f64 {
    let total: f64 = dims.iter().map(|&d| d as f64).product();
    let valid: f64 = dims.iter().map(|&d| (d - block + 1) as f64).product();
    rate * total / ((block as f64).powi(3) * valid)
}

/// Seed probability whose expected drop fraction equals `rate` exactly.
pub fn dropblock_gamma(dims: [usize; 3], block: usize, rate: f64) -> Result<f64> {
    check(dims, block, rate)?;
    if rate == 0.0 {
        return Ok(0.0);
    }
    type Key = ([usize; 3], usize, u64);
    static CACHE: OnceLock<Mutex<HashMap<Key, f64>>> = OnceLock::new();
    let key = (dims, block, rate.to_bits());
    let cache = CACHE.get_or_init(Default::default);
    if let Some(&g) = cache.lock().unwrap().get(&key) {
        return Ok(g);
    }
    let hist = coverage_histogram(dims, block);
    let total = dims.iter().product();
    let max_fraction = fraction_from_histogram(&hist, total, 1.0);
    if rate >= max_fraction {
        return Err(Error::invalid(format!(
            "drop rate {rate} unreachable on {dims:?} (max {max_fraction})"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if fraction_from_histogram(&hist, total, mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let g = 0.5 * (lo + hi);
    cache.lock().unwrap().insert(key, g);
    Ok(g)
}

/// Fills `keep` (x-fastest, `dims` = `[x, y, z]` extents) with 1, then
/// zeroes a block around every fired seed. Seeds fire independently with
/// probability `gamma`; the gaps between fired seeds are drawn directly
/// from the matching geometric distribution.
fn fill_mask<R: Rng + ?Sized>(
    dims: [usize; 3],
    block: usize,
    gamma: f64,
    keep: &mut [u8],
    rng: &mut R,
) {
    keep.iter_mut().for_each(|k| *k = 1);
    if gamma <= 0.0 {
        return;
    }
    let h = block / 2;
    let [nx, ny, nz] = dims;
    let (vx, vy, vz) = (nx - 2 * h, ny - 2 * h, nz - 2 * h);
    let seeds = (vx * vy * vz) as u64;
    let gap = Geometric::new(gamma).expect("gamma in (0, 1]");
    let mut j = gap.sample(rng);
    while j < seeds {
        let i = j as usize;
        let (cx, cy, cz) = (i % vx + h, (i / vx) % vy + h, i / (vx * vy) + h);
        for z in cz - h..=cz + h {
            for y in cy - h..=cy + h {
                let row = (z * ny + y) * nx;
                keep[row + cx - h..=row + cx + h]
                    .iter_mut()
                    .for_each(|k| *k = 0);
            }
        }
        j = j.saturating_add(1).saturating_add(gap.sample(rng));
    }
}

/// Binary keep-mask (1 = kept) for one feature map.
pub fn dropblock_mask<R: Rng + ?Sized>(
    dims: [usize; 3],
    block: usize,
    rate: f64,
    rng: &mut R,
) -> Result<Vec<u8>> {
    let gamma = dropblock_gamma(dims, block, rate)?;
    let mut keep = vec![0u8; dims.iter().product()];
    fill_mask(dims, block, gamma, &mut keep, rng);
    Ok(keep)
}

/// Mask over all channels of one sample with its rescaling factor
/// `numel / kept` (0 when everything is dropped).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMask {
    pub keep: Vec<u8>,
    pub scale: f64,
}

impl SampleMask {
    pub fn sample<R: Rng + ?Sized>(
        channels: usize,
        side: usize,
        block: usize,
        rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let dims = [side; 3];
        let gamma = dropblock_gamma(dims, block, rate)?;
        let n = side.pow(3);
        let mut keep = vec![0u8; channels * n];
        for c in 0..channels {
            fill_mask(dims, block, gamma, &mut keep[c * n..(c + 1) * n], rng);
        }
        let kept = keep.iter().filter(|&&k| k == 1).count();
        let scale = if kept == 0 {
            0.0
        } else {
            keep.len() as f64 / kept as f64
        };
        Ok(Self { keep, scale })
    }

    pub fn apply<T: super::Scalar>(&self, x: &mut [T]) {
        let s = T::from_f64(self.scale);
        for (v, &k) in x.iter_mut().zip(&self.keep) {
            *v = if k == 1 { *v * s } else { T::ZERO };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coverage_counts() {
        assert_eq!(coverage(5, 3), vec![1, 2, 3, 2, 1]);
        assert_eq!(coverage(3, 3), vec![1, 1, 1]);
    }

    #[test]
    fn gamma_hits_rate_in_expectation() {
        for (side, rate) in [(16, 0.2), (8, 0.15), (64, 0.1), (3, 0.1)] {
            let g = dropblock_gamma([side; 3], 3, rate).unwrap();
            let f = expected_drop_fraction([side; 3], 3, g);
            assert!((f - rate).abs() < 1e-12, "{side} {rate}: {f}");
            // the overlap-free formula undershoots
            assert!(expected_drop_fraction([side; 3], 3, nominal_gamma([side; 3], 3, rate)) < rate);
        }
    }

    #[test]
    fn zero_rate_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = dropblock_mask([6, 7, 8], 3, 0.0, &mut rng).unwrap();
        assert!(m.iter().all(|&k| k == 1));
    }

    #[test]
    fn block_larger_than_map_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dropblock_mask([2, 8, 8], 3, 0.1, &mut rng).is_err());
    }
}
