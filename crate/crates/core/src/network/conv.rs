//! 3D convolutions on cubic feature maps with "same" padding and no bias.
//!
//! Layouts: activations `[channels, z, y, x]`, weights
//! `[out, in, kz, ky, kx]`, all row-major.

use std::any::TypeId;

use super::scalar::{gemm, Scalar};
use super::simd;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub side: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_side(&self) -> usize {
        super::config::conv_out(self.side, self.kernel, self.stride)
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.side.pow(3)
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.out_side().pow(3)
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel.pow(3)
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }
}

macro_rules! dispatch_cb {
    ($cb:expr, $w:expr, $f:ident, $($arg:expr),*) => {
        match ($cb, $w) {
            (8, 8) => $f::<T, 8, 8>($($arg),*),
            (8, 16) => $f::<T, 8, 16>($($arg),*),
            (8, _) => $f::<T, 8, 32>($($arg),*),
            (4, 8) => $f::<T, 4, 8>($($arg),*),
            (4, 16) => $f::<T, 4, 16>($($arg),*),
            (4, _) => $f::<T, 4, 32>($($arg),*),
            (2, 8) => $f::<T, 2, 8>($($arg),*),
            (2, 16) => $f::<T, 2, 16>($($arg),*),
            (2, _) => $f::<T, 2, 32>($($arg),*),
            (_, 8) => $f::<T, 1, 8>($($arg),*),
            (_, 16) => $f::<T, 1, 16>($($arg),*),
            (_, _) => $f::<T, 1, 32>($($arg),*),
        }
    };
}

pub fn forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    assert!(x.len() == g.in_len() && w.len() == g.weight_len() && out.len() == g.out_len());
    let lay = Layout::new(g);
    let buf = lay.stage(g, x);
    if lay.w >= simd::LANES && simd::available() {
        if let (Some(b), Some(wf), Some(o)) = (as_f32(&buf), as_f32(w), as_f32_mut(out)) {
            return forward_f32(g, &lay, b, wf, o);
        }
    }
    let mut co0 = 0;
    while co0 < g.cout {
        let cb = block_width(g.cout - co0);
        dispatch_cb!(cb, lay.w, forward_block, g, &lay, &buf, w, co0, out);
        co0 += cb;
    }
}

/// Accumulates the weight gradient into `dw` and, when requested, writes
/// the input gradient into `dx`.
pub fn backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    dw: &mut [T],
    dx: Option<&mut [T]>,
) {
    assert!(x.len() == g.in_len() && w.len() == g.weight_len() && dout.len() == g.out_len());
    let lay = Layout::new(g);
    let buf = lay.stage(g, x);
    let dpad = lay.pad_output(g, dout);
    let fast = lay.w >= simd::LANES && simd::available();
    match (fast, as_f32(&buf), as_f32(&dpad), as_f32_mut(dw)) {
        (true, Some(b), Some(d), Some(dwf)) => weight_grad_f32(g, &lay, b, d, dwf),
        _ => {
            let mut co0 = 0;
            while co0 < g.cout {
                let cb = block_width(g.cout - co0);
                dispatch_cb!(cb, lay.w, weight_grad_block, g, &lay, &buf, &dpad, co0, dw);
                co0 += cb;
            }
        }
    }
    if let Some(dx) = dx {
        assert_eq!(dx.len(), g.in_len());
        if g.stride == 1 {
            input_grad_flipped(g, w, dout, dx);
        } else if let (true, Some(wf), Some(d), Some(dxf)) =
            (fast, as_f32(w), as_f32(&dpad), as_f32_mut(dx))
        {
            if lay.w == 32 {
                input_grad_f32::<2>(g, &lay, wf, d, dxf)
            } else {
                input_grad_f32::<1>(g, &lay, wf, d, dxf)
            }
        } else {
            match lay.w {
                8 => input_grad_scatter::<T, 8>(g, &lay, w, &dpad, dx),
                16 => input_grad_scatter::<T, 16>(g, &lay, w, &dpad, dx),
                _ => input_grad_scatter::<T, 32>(g, &lay, w, &dpad, dx),
            }
        }
    }
}

fn block_width(remaining: usize) -> usize {
    match remaining {
        8.. => 8,
        4..=7 => 4,
        2..=3 => 2,
        _ => 1,
    }
}

/// Zero-padded input split by x-phase modulo the stride, so that every
/// kernel tap reads a contiguous run of `w` values per output chunk.
///
/// Row `(ci, zz, yy)` holds `stride` phases of `pw` entries; entry `j` of
/// phase `r` is padded column `j * stride + r`.
struct Layout {
    os: usize,
    pz: usize,
    pw: usize,
    w: usize,
    chunks: usize,
}

impl Layout {
    fn new(g: &ConvGeom) -> Self {
        let (s, k, st, p) = (g.side, g.kernel, g.stride, g.pad());
        let os = g.out_side();
        let w = match os {
            0..=8 => 8,
            9..=16 => 16,
            _ => 32,
        };
        let chunks = os.div_ceil(w);
        let pz = (s + 2 * p).max((os - 1) * st + k);
        let pw = (chunks * w + (k - 1) / st).max((s + 2 * p - 1) / st) + 1;
        Self {
            os,
            pz,
            pw,
            w,
            chunks,
        }
    }

    /// Offset of input column `x` relative to its row start.
    fn columns(&self, g: &ConvGeom) -> Vec<usize> {
        let (st, p) = (g.stride, g.pad());
        (0..g.side)
            .map(|x| ((x + p) % st) * self.pw + (x + p) / st)
            .collect()
    }

    /// Offset of tap `kx` relative to its row start.
    fn kx_offsets(&self, g: &ConvGeom) -> Vec<usize> {
        (0..g.kernel)
            .map(|kx| (kx % g.stride) * self.pw + kx / g.stride)
            .collect()
    }

    #[inline]
    fn row(&self, g: &ConvGeom, ci: usize, zz: usize, yy: usize) -> usize {
        ((ci * self.pz + zz) * self.pz + yy) * g.stride * self.pw
    }

    fn stage<T: Scalar>(&self, g: &ConvGeom, x: &[T]) -> Vec<T> {
        let (s, st, p) = (g.side, g.stride, g.pad());
        let mut buf = vec![T::ZERO; g.cin * self.pz * self.pz * st * self.pw];
        let cols = self.columns(g);
        for ci in 0..g.cin {
            for z in 0..s {
                for y in 0..s {
                    let dst = &mut buf[self.row(g, ci, z + p, y + p)..];
                    let src = &x[((ci * s + z) * s + y) * s..][..s];
                    for (&c, &v) in cols.iter().zip(src) {
                        dst[c] = v;
                    }
                }
            }
        }
        buf
    }

    /// Inverse of [`Layout::stage`], dropping the padding.
    fn unstage<T: Scalar>(&self, g: &ConvGeom, buf: &[T], dx: &mut [T]) {
        let (s, p) = (g.side, g.pad());
        let cols = self.columns(g);
        for ci in 0..g.cin {
            for z in 0..s {
                for y in 0..s {
                    let src = &buf[self.row(g, ci, z + p, y + p)..];
                    let dst = &mut dx[((ci * s + z) * s + y) * s..][..s];
                    for (v, &c) in dst.iter_mut().zip(&cols) {
                        *v = src[c];
                    }
                }
            }
        }
    }

    /// Output-shaped tensor with rows zero-extended to whole chunks.
    fn pad_output<T: Scalar>(&self, g: &ConvGeom, d: &[T]) -> Vec<T> {
        let (os, rw) = (self.os, self.chunks * self.w);
        let mut out = vec![T::ZERO; g.cout * os * os * rw];
        for (r, src) in d.chunks_exact(os).enumerate() {
            out[r * rw..r * rw + os].copy_from_slice(src);
        }
        out
    }
}

fn as_f32<T: Scalar>(x: &[T]) -> Option<&[f32]> {
    (TypeId::of::<T>() == TypeId::of::<f32>())
        // SAFETY: T is f32.
        .then(|| unsafe { std::slice::from_raw_parts(x.as_ptr().cast(), x.len()) })
}

fn as_f32_mut<T: Scalar>(x: &mut [T]) -> Option<&mut [f32]> {
    (TypeId::of::<T>() == TypeId::of::<f32>())
        // SAFETY: T is f32.
        .then(|| unsafe { std::slice::from_raw_parts_mut(x.as_mut_ptr().cast(), x.len()) })
}

/// The staged buffer covers every row `(ci, oz * st + kz, oy * st + ky)`
/// and, within a row, `x0 + offs[kx] + w` never exceeds `stride * pw`.
fn check_staged(g: &ConvGeom, lay: &Layout, len: usize) {
    assert!((lay.os - 1) * g.stride + g.kernel <= lay.pz);
    assert!(lay.chunks * lay.w + (g.kernel - 1) / g.stride < lay.pw);
    assert_eq!(len, g.cin * lay.pz * lay.pz * g.stride * lay.pw);
}

fn forward_f32(g: &ConvGeom, lay: &Layout, buf: &[f32], w: &[f32], out: &mut [f32]) {
    check_staged(g, lay, buf.len());
    let mut co0 = 0;
    while co0 < g.cout {
        let cb = block_width(g.cout - co0);
        match (cb, lay.w) {
            (8, 32) => forward_f32_block::<8, 2>(g, lay, buf, w, co0, out),
            (8, _) => forward_f32_block::<8, 1>(g, lay, buf, w, co0, out),
            (4, 32) => forward_f32_block::<4, 2>(g, lay, buf, w, co0, out),
            (4, _) => forward_f32_block::<4, 1>(g, lay, buf, w, co0, out),
            (2, 32) => forward_f32_block::<2, 2>(g, lay, buf, w, co0, out),
            (2, _) => forward_f32_block::<2, 1>(g, lay, buf, w, co0, out),
            (_, 32) => forward_f32_block::<1, 2>(g, lay, buf, w, co0, out),
            (_, _) => forward_f32_block::<1, 1>(g, lay, buf, w, co0, out),
        }
        co0 += cb;
    }
}

fn forward_f32_block<const CB: usize, const V: usize>(
    g: &ConvGeom,
    lay: &Layout,
    buf: &[f32],
    w: &[f32],
    co0: usize,
    out: &mut [f32],
) {
    let (k, st, os) = (g.kernel, g.stride, lay.os);
    let width = V * simd::LANES;
    let wt: Vec<f32> = gather_weights::<f32, CB>(g, w, co0)
        .into_iter()
        .flatten()
        .collect();
    let offs = lay.kx_offsets(g);
    let os3 = os * os * os;
    let mut bases = Vec::with_capacity(g.cin * k * k);
    let mut res = [[0f32; 32]; CB];
    for oz in 0..os {
        for oy in 0..os {
            for x0 in (0..lay.chunks).map(|c| c * width) {
                bases.clear();
                for ci in 0..g.cin {
                    for kz in 0..k {
                        for ky in 0..k {
                            bases.push(lay.row(g, ci, oz * st + kz, oy * st + ky) + x0);
                        }
                    }
                }
                // SAFETY: availability checked by the caller, bounds by
                // `check_staged`.
                unsafe {
                    simd::forward_tile::<CB, V>(buf.as_ptr(), &bases, &offs, wt.as_ptr(), &mut res)
                };
                let len = width.min(os - x0);
                for (c, r) in res.iter().enumerate() {
                    let o = (co0 + c) * os3 + (oz * os + oy) * os + x0;
                    out[o..o + len].copy_from_slice(&r[..len]);
                }
            }
        }
    }
}

fn weight_grad_f32(g: &ConvGeom, lay: &Layout, buf: &[f32], dpad: &[f32], dw: &mut [f32]) {
    check_staged(g, lay, buf.len());
    let mut co0 = 0;
    while co0 < g.cout {
        let cb = block_width(g.cout - co0);
        match cb {
            8 => weight_grad_f32_block::<8, 2>(g, lay, buf, dpad, co0, dw),
            4 => weight_grad_f32_block::<4, 4>(g, lay, buf, dpad, co0, dw),
            2 => weight_grad_f32_block::<2, 4>(g, lay, buf, dpad, co0, dw),
            _ => weight_grad_f32_block::<1, 4>(g, lay, buf, dpad, co0, dw),
        }
        co0 += cb;
    }
}

/// Taps are processed `KB` at a time with the output gradient cut into
/// z-slabs small enough to stay cache resident.
fn weight_grad_f32_block<const CB: usize, const KB: usize>(
    g: &ConvGeom,
    lay: &Layout,
    buf: &[f32],
    dpad: &[f32],
    co0: usize,
    dw: &mut [f32],
) {
    const L: usize = simd::LANES;
    let (k, st, os) = (g.kernel, g.stride, lay.os);
    let rw = lay.chunks * lay.w;
    let dstride = os * os * rw;
    let taps = g.cin * k * k * k;
    let offs = lay.kx_offsets(g);
    let kblocks = k.div_ceil(KB);
    // last block padded by repeating its final tap; the copies are dropped
    let block_offs: Vec<[usize; KB]> = (0..kblocks)
        .map(|b| std::array::from_fn(|j| offs[(b * KB + j).min(k - 1)]))
        .collect();
    let groups = g.cin * k * k;
    let mut acc = vec![[[[0f32; L]; CB]; KB]; groups * kblocks];
    let slab = (32 * 1024 / (CB * os * rw)).max(1);
    let mut items = Vec::new();
    assert!(dpad.len() >= (co0 + CB) * dstride);
    for z0 in (0..os).step_by(slab) {
        for ci in 0..g.cin {
            for kz in 0..k {
                for ky in 0..k {
                    items.clear();
                    for oz in z0..(z0 + slab).min(os) {
                        for oy in 0..os {
                            let src = lay.row(g, ci, oz * st + kz, oy * st + ky);
                            let dst = ((co0 * os + oz) * os + oy) * rw;
                            items.extend((0..rw).step_by(L).map(|x| (src + x, dst + x)));
                        }
                    }
                    let gi = (ci * k + kz) * k + ky;
                    for (b, bo) in block_offs.iter().enumerate() {
                        // SAFETY: availability checked by the caller, bounds
                        // by `check_staged` and the assertion above.
                        unsafe {
                            simd::weight_tile::<CB, KB>(
                                buf.as_ptr(),
                                dpad.as_ptr(),
                                &items,
                                bo,
                                dstride,
                                &mut acc[gi * kblocks + b],
                            )
                        };
                    }
                }
            }
        }
    }
    for gi in 0..groups {
        for kx in 0..k {
            let a = &acc[gi * kblocks + kx / KB][kx % KB];
            for (c, lanes) in a.iter().enumerate() {
                dw[(co0 + c) * taps + gi * k + kx] += lanes.iter().sum::<f32>();
            }
        }
    }
}

/// Weights of output channels `co0..co0 + CB`, tap-major with the channel
/// innermost.
fn gather_weights<T: Scalar, const CB: usize>(g: &ConvGeom, w: &[T], co0: usize) -> Vec<[T; CB]> {
    let taps = g.cin * g.kernel.pow(3);
    (0..taps)
        .map(|t| std::array::from_fn(|c| w[(co0 + c) * taps + t]))
        .collect()
}

fn forward_block<T: Scalar, const CB: usize, const W: usize>(
    g: &ConvGeom,
    lay: &Layout,
    buf: &[T],
    w: &[T],
    co0: usize,
    out: &mut [T],
) {
    let (k, st, os) = (g.kernel, g.stride, lay.os);
    let offs = lay.kx_offsets(g);
    let wt = gather_weights::<T, CB>(g, w, co0);
    let os3 = os * os * os;
    for oz in 0..os {
        for oy in 0..os {
            for x0 in (0..lay.chunks).map(|c| c * W) {
                let mut acc = [[T::ZERO; W]; CB];
                let mut taps = wt.iter();
                for ci in 0..g.cin {
                    for kz in 0..k {
                        for ky in 0..k {
                            let base = lay.row(g, ci, oz * st + kz, oy * st + ky);
                            for kx in 0..k {
                                let wv = taps.next().unwrap();
                                let at = base + offs[kx] + x0;
                                let src: &[T; W] = buf[at..at + W].try_into().unwrap();
                                for c in 0..CB {
                                    for i in 0..W {
                                        acc[c][i] += wv[c] * src[i];
                                    }
                                }
                            }
                        }
                    }
                }
                let len = W.min(os - x0);
                for (c, a) in acc.iter().enumerate() {
                    let o = (co0 + c) * os3 + (oz * os + oy) * os + x0;
                    out[o..o + len].copy_from_slice(&a[..len]);
                }
            }
        }
    }
}

fn weight_grad_block<T: Scalar, const CB: usize, const W: usize>(
    g: &ConvGeom,
    lay: &Layout,
    buf: &[T],
    dpad: &[T],
    co0: usize,
    dw: &mut [T],
) {
    let (k, st, os) = (g.kernel, g.stride, lay.os);
    let offs = lay.kx_offsets(g);
    let rw = lay.chunks * W;
    let taps = g.cin * k * k * k;
    let mut acc = vec![[[T::ZERO; W]; CB]; k];
    for ci in 0..g.cin {
        for kz in 0..k {
            for ky in 0..k {
                acc.iter_mut().for_each(|a| *a = [[T::ZERO; W]; CB]);
                for oz in 0..os {
                    for oy in 0..os {
                        let base = lay.row(g, ci, oz * st + kz, oy * st + ky);
                        for x0 in (0..lay.chunks).map(|c| c * W) {
                            let d: [[T; W]; CB] = std::array::from_fn(|c| {
                                let at = (((co0 + c) * os + oz) * os + oy) * rw + x0;
                                dpad[at..at + W].try_into().unwrap()
                            });
                            for (kx, a) in acc.iter_mut().enumerate() {
                                let at = base + offs[kx] + x0;
                                let src: &[T; W] = buf[at..at + W].try_into().unwrap();
                                for c in 0..CB {
                                    for i in 0..W {
                                        a[c][i] += d[c][i] * src[i];
                                    }
                                }
                            }
                        }
                    }
                }
                for (kx, a) in acc.iter().enumerate() {
                    let t = ((ci * k + kz) * k + ky) * k + kx;
                    for (c, lanes) in a.iter().enumerate() {
                        dw[(co0 + c) * taps + t] += lanes.iter().copied().sum::<T>();
                    }
                }
            }
        }
    }
}

/// Input gradient of a stride-1 "same" convolution: a convolution of the
/// output gradient with the flipped, channel-transposed kernel.
fn input_grad_flipped<T: Scalar>(g: &ConvGeom, w: &[T], dout: &[T], dx: &mut [T]) {
    let k3 = g.kernel.pow(3);
    let mut wf = vec![T::ZERO; w.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            let src = &w[(co * g.cin + ci) * k3..][..k3];
            let dst = &mut wf[(ci * g.cout + co) * k3..][..k3];
            for (i, d) in dst.iter_mut().enumerate() {
                *d = src[k3 - 1 - i];
            }
        }
    }
    let tg = ConvGeom {
        cin: g.cout,
        cout: g.cin,
        ..*g
    };
    forward(&tg, dout, &wf, dx);
}

/// Strided input gradient: every output chunk scatters its weighted sum
/// over output channels into the staged layout, which is then unpadded.
fn input_grad_scatter<T: Scalar, const W: usize>(
    g: &ConvGeom,
    lay: &Layout,
    w: &[T],
    dpad: &[T],
    dx: &mut [T],
) {
    let (k, st, os) = (g.kernel, g.stride, lay.os);
    let rw = lay.chunks * W;
    let offs = lay.kx_offsets(g);
    let wt = transpose_weights(g, w);
    let mut buf = vec![T::ZERO; g.cin * lay.pz * lay.pz * st * lay.pw];
    let mut d = vec![[T::ZERO; W]; g.cout];
    for oz in 0..os {
        for oy in 0..os {
            for x0 in (0..lay.chunks).map(|c| c * W) {
                for (co, dc) in d.iter_mut().enumerate() {
                    let at = ((co * os + oz) * os + oy) * rw + x0;
                    *dc = dpad[at..at + W].try_into().unwrap();
                }
                let mut taps = wt.chunks_exact(g.cout);
                for ci in 0..g.cin {
                    for kz in 0..k {
                        for ky in 0..k {
                            let base = lay.row(g, ci, oz * st + kz, oy * st + ky);
                            for kx in 0..k {
                                let wv = taps.next().unwrap();
                                let mut acc = [T::ZERO; W];
                                for (&wc, dc) in wv.iter().zip(&d) {
                                    for i in 0..W {
                                        acc[i] += wc * dc[i];
                                    }
                                }
                                let at = base + offs[kx] + x0;
                                let dst: &mut [T; W] = (&mut buf[at..at + W]).try_into().unwrap();
                                for i in 0..W {
                                    dst[i] += acc[i];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    lay.unstage(g, &buf, dx);
}

/// Weights reordered to `[ci][tap][co]`.
fn transpose_weights<T: Scalar>(g: &ConvGeom, w: &[T]) -> Vec<T> {
    let k3 = g.kernel.pow(3);
    let mut wt = vec![T::ZERO; w.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for t in 0..k3 {
                wt[(ci * k3 + t) * g.cout + co] = w[(co * g.cin + ci) * k3 + t];
            }
        }
    }
    wt
}

fn input_grad_f32<const V: usize>(
    g: &ConvGeom,
    lay: &Layout,
    w: &[f32],
    dpad: &[f32],
    dx: &mut [f32],
) {
    let (k, st, os) = (g.kernel, g.stride, lay.os);
    let width = V * simd::LANES;
    let rw = lay.chunks * width;
    let offs = lay.kx_offsets(g);
    let wt = transpose_weights(g, w);
    let mut buf = vec![0f32; g.cin * lay.pz * lay.pz * st * lay.pw];
    check_staged(g, lay, buf.len());
    assert!(dpad.len() >= g.cout * os * os * rw);
    let mut bases = Vec::with_capacity(g.cin * k * k);
    for oz in 0..os {
        for oy in 0..os {
            for x0 in (0..lay.chunks).map(|c| c * width) {
                bases.clear();
                for ci in 0..g.cin {
                    for kz in 0..k {
                        for ky in 0..k {
                            bases.push(lay.row(g, ci, oz * st + kz, oy * st + ky) + x0);
                        }
                    }
                }
                let d = (oz * os + oy) * rw + x0;
                // SAFETY: availability checked by the caller, bounds by
                // `check_staged` and the assertion above.
                unsafe {
                    simd::scatter_tile::<V>(
                        buf.as_mut_ptr(),
                        &bases,
                        &offs,
                        wt.as_ptr(),
                        dpad.as_ptr().add(d),
                        os * os * rw,
                        g.cout,
                    )
                };
            }
        }
    }
    lay.unstage(g, &buf, dx);
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (s, k, st, p) = (g.side, g.kernel, g.stride, g.pad() as isize);
    let os = g.out_side();
    let n = os * os * os;
    let (s2, s3) = (s * s, s * s * s);
    let mut r = 0;
    for ci in 0..g.cin {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[r * n..(r + 1) * n];
                    let mut o = 0;
                    for oz in 0..os {
                        let iz = (oz * st) as isize + kz as isize - p;
                        for oy in 0..os {
                            let iy = (oy * st) as isize + ky as isize - p;
                            let inside = iz >= 0 && iz < s as isize && iy >= 0 && iy < s as isize;
                            for ox in 0..os {
                                let ix = (ox * st) as isize + kx as isize - p;
                                row[o] = if inside && ix >= 0 && ix < s as isize {
                                    x[ci * s3 + iz as usize * s2 + iy as usize * s + ix as usize]
                                } else {
                                    T::ZERO
                                };
                                o += 1;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (s, k, st, p) = (g.side, g.kernel, g.stride, g.pad() as isize);
    let os = g.out_side();
    let n = os * os * os;
    let (s2, s3) = (s * s, s * s * s);
    dx.iter_mut().for_each(|v| *v = T::ZERO);
    let mut r = 0;
    for ci in 0..g.cin {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[r * n..(r + 1) * n];
                    let mut o = 0;
                    for oz in 0..os {
                        let iz = (oz * st) as isize + kz as isize - p;
                        for oy in 0..os {
                            let iy = (oy * st) as isize + ky as isize - p;
                            let inside = iz >= 0 && iz < s as isize && iy >= 0 && iy < s as isize;
                            for ox in 0..os {
                                let ix = (ox * st) as isize + kx as isize - p;
                                if inside && ix >= 0 && ix < s as isize {
                                    dx[ci * s3
                                        + iz as usize * s2
                                        + iy as usize * s
                                        + ix as usize] += row[o];
                                }
                                o += 1;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

pub fn forward_im2col<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let n = g.out_side().pow(3);
    let rows = g.col_rows();
    let mut cols = vec![T::ZERO; rows * n];
    im2col(g, x, &mut cols);
    gemm(
        false,
        false,
        g.cout,
        n,
        rows,
        T::ONE,
        w,
        &cols,
        T::ZERO,
        out,
    );
}

pub fn backward_im2col<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    dw: &mut [T],
    dx: Option<&mut [T]>,
) {
    let n = g.out_side().pow(3);
    let rows = g.col_rows();
    let mut cols = vec![T::ZERO; rows * n];
    im2col(g, x, &mut cols);
    gemm(
        false,
        true,
        g.cout,
        rows,
        n,
        T::ONE,
        dout,
        &cols,
        T::ONE,
        dw,
    );
    if let Some(dx) = dx {
        gemm(
            true,
            false,
            rows,
            n,
            g.cout,
            T::ONE,
            w,
            dout,
            T::ZERO,
            &mut cols,
        );
        col2im(g, &cols, dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (s, k, p) = (g.side as isize, g.kernel as isize, g.pad() as isize);
        let os = g.out_side() as isize;
        let mut out = vec![0.0; g.out_len()];
        for co in 0..g.cout {
            for oz in 0..os {
                for oy in 0..os {
                    for ox in 0..os {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let (iz, iy, ix) = (
                                            oz * g.stride as isize + kz - p,
                                            oy * g.stride as isize + ky - p,
                                            ox * g.stride as isize + kx - p,
                                        );
                                        if [iz, iy, ix].iter().any(|&v| v < 0 || v >= s) {
                                            continue;
                                        }
                                        let xi = ((ci as isize * s + iz) * s + iy) * s + ix;
                                        let wi = ((((co * g.cin + ci) as isize * k + kz) * k + ky)
                                            * k)
                                            + kx;
                                        acc += x[xi as usize] * w[wi as usize];
                                    }
                                }
                            }
                        }
                        out[(((co as isize * os + oz) * os + oy) * os + ox) as usize] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn check_geom(g: ConvGeom) {
        let mut rng = ChaCha8Rng::seed_from_u64(g.side as u64 * 31 + g.stride as u64);
        let x = random(g.in_len(), &mut rng);
        let w = random(g.weight_len(), &mut rng);
        let expected = naive(&g, &x, &w);
        let mut out = vec![0.0; g.out_len()];
        forward(&g, &x, &w, &mut out);
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10);
        }
        // adjoint identity: <dout, conv(x)> = <x, conv^T(dout)> and
        // d<dout, conv(x)>/dw = dw
        let dout = random(g.out_len(), &mut rng);
        let mut dw = vec![0.0; g.weight_len()];
        let mut dx = vec![0.0; g.in_len()];
        backward(&g, &x, &w, &dout, &mut dw, Some(&mut dx));
        let lhs: f64 = dout.iter().zip(&out).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn direct_matches_naive() {
        check_geom(ConvGeom {
            cin: 2,
            cout: 3,
            side: 9,
            kernel: 3,
            stride: 1,
        });
        check_geom(ConvGeom {
            cin: 1,
            cout: 2,
            side: 70,
            kernel: 7,
            stride: 1,
        });
        check_geom(ConvGeom {
            cin: 3,
            cout: 13,
            side: 17,
            kernel: 3,
            stride: 1,
        });
    }

    #[test]
    fn strided_matches_naive() {
        check_geom(ConvGeom {
            cin: 2,
            cout: 3,
            side: 8,
            kernel: 3,
            stride: 2,
        });
        check_geom(ConvGeom {
            cin: 3,
            cout: 2,
            side: 7,
            kernel: 3,
            stride: 2,
        });
        check_geom(ConvGeom {
            cin: 2,
            cout: 11,
            side: 9,
            kernel: 5,
            stride: 2,
        });
        check_geom(ConvGeom {
            cin: 1,
            cout: 3,
            side: 3,
            kernel: 3,
            stride: 3,
        });
    }

    #[test]
    fn direct_and_im2col_agree() {
        for g in [
            ConvGeom {
                cin: 2,
                cout: 11,
                side: 12,
                kernel: 5,
                stride: 1,
            },
            ConvGeom {
                cin: 3,
                cout: 5,
                side: 40,
                kernel: 3,
                stride: 2,
            },
            ConvGeom {
                cin: 1,
                cout: 4,
                side: 37,
                kernel: 7,
                stride: 1,
            },
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let x: Vec<f32> = (0..g.in_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f32> = (0..g.weight_len())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let mut a = vec![0.0; g.out_len()];
            let mut b = vec![0.0; g.out_len()];
            forward(&g, &x, &w, &mut a);
            forward_im2col(&g, &x, &w, &mut b);
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-4);
            }
            let dout: Vec<f32> = (0..g.out_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (mut dw1, mut dw2) = (vec![0.0; w.len()], vec![0.0; w.len()]);
            let (mut dx1, mut dx2) = (vec![0.0; x.len()], vec![0.0; x.len()]);
            backward(&g, &x, &w, &dout, &mut dw1, Some(&mut dx1));
            backward_im2col(&g, &x, &w, &dout, &mut dw2, Some(&mut dx2));
            for (p, q) in dw1.iter().zip(&dw2).chain(dx1.iter().zip(&dx2)) {
                assert!((p - q).abs() < 1e-3 * q.abs().max(1.0), "{p} vs {q}");
            }
        }
    }
}
