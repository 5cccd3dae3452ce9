//! AVX-512 register tiles for single-precision convolutions, selected at
//! run time. Callers guarantee every offset they pass stays in bounds.

#[cfg(target_arch = "x86_64")]
mod imp {
    use std::arch::x86_64::*;
    use std::sync::OnceLock;

    pub const LANES: usize = 16;

    pub fn available() -> bool {
        static AVX512: OnceLock<bool> = OnceLock::new();
        *AVX512.get_or_init(|| is_x86_feature_detected!("avx512f"))
    }

    /// `res[c][16v + i] = sum_t wt[t][c] * buf[bases[t / k] + offs[t % k] + 16v + i]`.
    ///
    /// # Safety
    /// AVX-512F must be available and every read must be in bounds.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn forward_tile<const CB: usize, const V: usize>(
        buf: *const f32,
        bases: &[usize],
        offs: &[usize],
        wt: *const f32,
        res: &mut [[f32; 32]; CB],
    ) {
        let mut acc = [[_mm512_setzero_ps(); V]; CB];
        let mut w = wt;
        for &b in bases {
            for &o in offs {
                let p = buf.add(b + o);
                let mut s = [_mm512_setzero_ps(); V];
                for (v, sv) in s.iter_mut().enumerate() {
                    *sv = _mm512_loadu_ps(p.add(LANES * v));
                }
                for (c, ac) in acc.iter_mut().enumerate() {
                    let wc = _mm512_set1_ps(*w.add(c));
                    for v in 0..V {
                        ac[v] = _mm512_fmadd_ps(wc, s[v], ac[v]);
                    }
                }
                w = w.add(CB);
            }
        }
        for (r, ac) in res.iter_mut().zip(&acc) {
            for (v, a) in ac.iter().enumerate() {
                _mm512_storeu_ps(r.as_mut_ptr().add(LANES * v), *a);
            }
        }
    }

    /// For every item `(src, dst)` and tap `j`:
    /// `acc[j][c] += dout[dst + c * dstride ..][..16] * buf[src + offs[j] ..][..16]`.
    ///
    /// # Safety
    /// AVX-512F must be available and every read must be in bounds.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn weight_tile<const CB: usize, const KB: usize>(
        buf: *const f32,
        dout: *const f32,
        items: &[(usize, usize)],
        offs: &[usize; KB],
        dstride: usize,
        acc: &mut [[[f32; LANES]; CB]; KB],
    ) {
        let mut r = [[_mm512_setzero_ps(); CB]; KB];
        for (rj, aj) in r.iter_mut().zip(acc.iter()) {
            for (rc, ac) in rj.iter_mut().zip(aj) {
                *rc = _mm512_loadu_ps(ac.as_ptr());
            }
        }
        for &(src, dst) in items {
            let mut d = [_mm512_setzero_ps(); CB];
            for (c, dc) in d.iter_mut().enumerate() {
                *dc = _mm512_loadu_ps(dout.add(dst + c * dstride));
            }
            for j in 0..KB {
                let s = _mm512_loadu_ps(buf.add(src + offs[j]));
                for c in 0..CB {
                    r[j][c] = _mm512_fmadd_ps(d[c], s, r[j][c]);
                }
            }
        }
        for (rj, aj) in r.iter().zip(acc.iter_mut()) {
            for (rc, ac) in rj.iter().zip(aj) {
                _mm512_storeu_ps(ac.as_mut_ptr(), *rc);
            }
        }
    }

    /// For every tap `t` over `bases x offs`:
    /// `out[base + off + 16v ..][..16] += sum_co wt[t][co] * dout[co * dstride + 16v ..][..16]`.
    ///
    /// # Safety
    /// AVX-512F must be available and every access must be in bounds.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn scatter_tile<const V: usize>(
        out: *mut f32,
        bases: &[usize],
        offs: &[usize],
        wt: *const f32,
        dout: *const f32,
        dstride: usize,
        cout: usize,
    ) {
        let mut w = wt;
        for &b in bases {
            for &o in offs {
                let mut acc = [_mm512_setzero_ps(); V];
                for co in 0..cout {
                    let wc = _mm512_set1_ps(*w);
                    w = w.add(1);
                    let d = dout.add(co * dstride);
                    for (v, a) in acc.iter_mut().enumerate() {
                        *a = _mm512_fmadd_ps(wc, _mm512_loadu_ps(d.add(LANES * v)), *a);
                    }
                }
                let p = out.add(b + o);
                for (v, a) in acc.iter().enumerate() {
                    let q = p.add(LANES * v);
                    _mm512_storeu_ps(q, _mm512_add_ps(_mm512_loadu_ps(q), *a));
                }
            }
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod imp {
    pub const LANES: usize = 16;

    pub fn available() -> bool {
        false
    }

    pub unsafe fn forward_tile<const CB: usize, const V: usize>(
        _: *const f32,
        _: &[usize],
        _: &[usize],
        _: *const f32,
        _: &mut [[f32; 32]; CB],
    ) {
        unreachable!()
    }

    pub unsafe fn weight_tile<const CB: usize, const KB: usize>(
        _: *const f32,
        _: *const f32,
        _: &[(usize, usize)],
        _: &[usize; KB],
        _: usize,
        _: &mut [[[f32; LANES]; CB]; KB],
    ) {
        unreachable!()
    }

    pub unsafe fn scatter_tile<const V: usize>(
        _: *mut f32,
        _: &[usize],
        _: &[usize],
        _: *const f32,
        _: *const f32,
        _: usize,
        _: usize,
    ) {
        unreachable!()
    }
}

pub(super) use imp::*;
