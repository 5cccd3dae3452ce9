use super::config::{pool_out, PoolSpec};
use super::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Max pool over cubic maps; padding never wins. Optionally records the
/// flat input index of every maximum.
pub fn maxpool<T: Scalar>(
    x: &[T],
    channels: usize,
    side: usize,
    p: &PoolSpec,
    out: &mut [T],
    mut argmax: Option<&mut [u32]>,
) {
    let os = pool_out(side, p);
    let (s2, s3) = (side * side, side * side * side);
    let pad = p.padding as isize;
    let range = |o: usize| {
        let start = (o * p.stride) as isize - pad;
        let lo = start.max(0) as usize;
        let hi = ((start + p.size as isize).min(side as isize)) as usize;
        lo..hi
    };
    let mut idx = 0;
    for c in 0..channels {
        for oz in 0..os {
            for oy in 0..os {
                for ox in 0..os {
                    let mut best = T::NEG_INFINITY;
                    let mut at = 0usize;
                    for z in range(oz) {
                        for y in range(oy) {
                            let row = c * s3 + z * s2 + y * side;
                            for xx in range(ox) {
                                let v = x[row + xx];
                                if v > best {
                                    best = v;
                                    at = row + xx;
                                }
                            }
                        }
                    }
                    out[idx] = best;
                    if let Some(a) = argmax.as_deref_mut() {
                        a[idx] = at as u32;
                    }
                    idx += 1;
                }
            }
        }
    }
}

/// Per-channel affine normalization `gamma (z - mean) * invstd + beta`
/// followed by ReLU, in place.
pub fn bn_relu<T: Scalar>(
    z: &mut [T],
    channels: usize,
    mean: &[T],
    invstd: &[T],
    gamma: &[T],
    beta: &[T],
) {
    let n = z.len() / channels;
    for c in 0..channels {
        let (m, is, g, b) = (mean[c], invstd[c], gamma[c], beta[c]);
        for v in &mut z[c * n..(c + 1) * n] {
            let y = g * (*v - m) * is + b;
            *v = if y > T::ZERO { y } else { T::ZERO };
        }
    }
}

/// `sum f(x_i)` in f64 with independent lane accumulators.
pub fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut it = xs.chunks_exact(8);
    for ch in &mut it {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a += f(v.to_f64());
        }
    }
    acc.iter().sum::<f64>() + it.remainder().iter().map(|&v| f(v.to_f64())).sum::<f64>()
}

/// `(sum d_i, sum d_i * g(x_i))` in f64 with independent lane accumulators.
pub fn lane_sum2<T: Scalar>(d: &[T], x: &[T], g: impl Fn(f64) -> f64) -> (f64, f64) {
    let (mut a, mut b) = ([0.0f64; 8], [0.0f64; 8]);
    let (mut di, mut xi) = (d.chunks_exact(8), x.chunks_exact(8));
    for (dc, xc) in (&mut di).zip(&mut xi) {
        for i in 0..8 {
            let dv = dc[i].to_f64();
            a[i] += dv;
            b[i] += dv * g(xc[i].to_f64());
        }
    }
    let (mut sa, mut sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    for (&dv, &xv) in di.remainder().iter().zip(xi.remainder()) {
        sa += dv.to_f64();
        sb += dv.to_f64() * g(xv.to_f64());
    }
    (sa, sb)
}

pub fn invstd<T: Scalar>(var: T) -> T {
    T::ONE / (var + T::from_f64(BN_EPS)).sqrt()
}
