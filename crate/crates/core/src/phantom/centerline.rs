use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// One analytic piece of a centerline.
#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Line {
        start: Vec3,
        dir: Vec3,
        length: f64,
    },
    /// Circle arc `center + radius (cos a e1 + sin a e2)` for `a` running
    /// from `start` over `sweep` radians (sign gives the direction).
    Arc {
        center: Vec3,
        radius: f64,
        e1: Vec3,
        e2: Vec3,
        start: f64,
        sweep: f64,
    },
}

impl Segment {
    pub fn length(&self) -> f64 {
        match self {
            Segment::Line { length, .. } => *length,
            Segment::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    fn angle_at(&self, s: f64) -> f64 {
        match self {
            Segment::Arc {
                radius,
                start,
                sweep,
                ..
            } => start + sweep.signum() * s / radius,
            Segment::Line { .. } => 0.0,
        }
    }

    pub fn point(&self, s: f64) -> Vec3 {
        match self {
            Segment::Line { start, dir, .. } => start + dir * s,
            Segment::Arc {
                center,
                radius,
                e1,
                e2,
                ..
            } => {
                let (sa, ca) = self.angle_at(s).sin_cos();
                center + (e1 * ca + e2 * sa) * *radius
            }
        }
    }

    pub fn tangent(&self, s: f64) -> Vec3 {
        match self {
            Segment::Line { dir, .. } => *dir,
            Segment::Arc { e1, e2, sweep, .. } => {
                let (sa, ca) = self.angle_at(s).sin_cos();
                (e2 * ca - e1 * sa) * sweep.signum()
            }
        }
    }

    /// Local arc length of the closest point to `q` and its distance.
    fn nearest(&self, q: &Vec3) -> (f64, f64) {
        match self {
            Segment::Line { start, dir, length } => {
                let s = (q - start).dot(dir).clamp(0.0, *length);
                (s, (q - self.point(s)).norm())
            }
            Segment::Arc {
                center,
                radius,
                e1,
                e2,
                start,
                sweep,
            } => {
                let r = q - center;
                let a = r.dot(e2).atan2(r.dot(e1));
                let rel = ((a - start) * sweep.signum()).rem_euclid(TAU);
                let len = self.length();
                if rel <= sweep.abs() {
                    let s = rel * radius;
                    (s, (q - self.point(s)).norm())
                } else {
                    let d0 = (q - self.point(0.0)).norm();
                    let d1 = (q - self.point(len)).norm();
                    if d0 <= d1 {
                        (0.0, d0)
                    } else {
                        (len, d1)
                    }
                }
            }
        }
    }
}

/// Parametric centerline description as written in phantom spec files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CenterlineSpec {
    Line {
        start: [f64; 3],
        direction: [f64; 3],
        length_mm: f64,
    },
    /// Arc in the vertical plane spanned by the horizontal heading
    /// `(cos az, sin az, 0)` and `+z`.
    Arc {
        center: [f64; 3],
        radius_mm: f64,
        azimuth_deg: f64,
        start_deg: f64,
        sweep_deg: f64,
    },
    /// Straight limb along the heading, a half circle turning up and back
    /// in the vertical plane, and a second straight limb running back.
    CandyCane {
        start: [f64; 3],
        arch_radius_mm: f64,
        ascending_mm: f64,
        descending_mm: f64,
        azimuth_deg: f64,
    },
}

fn heading(azimuth_deg: f64) -> Vec3 {
    let a = azimuth_deg.to_radians();
    Vec3::new(a.cos(), a.sin(), 0.0)
}

impl CenterlineSpec {
    pub fn build(&self) -> Result<Centerline> {
        let positive = |x: f64, what: &str| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{what} must be positive, got {x}")))
            }
        };
        match self {
            CenterlineSpec::Line {
                start,
                direction,
                length_mm,
            } => {
                positive(*length_mm, "line length")?;
                let d = Vec3::from(*direction);
                let norm = d.norm();
                if !(norm > 0.0 && norm.is_finite()) {
                    return Err(Error::invalid("line direction must be nonzero"));
                }
                Centerline::new(vec![Segment::Line {
                    start: Vec3::from(*start),
                    dir: d / norm,
                    length: *length_mm,
                }])
            }
            CenterlineSpec::Arc {
                center,
                radius_mm,
                azimuth_deg,
                start_deg,
                sweep_deg,
            } => {
                positive(*radius_mm, "arc radius")?;
                if *sweep_deg == 0.0 || sweep_deg.abs() > 360.0 {
                    return Err(Error::invalid("arc sweep must be in (0, 360] degrees"));
                }
                Centerline::new(vec![Segment::Arc {
                    center: Vec3::from(*center),
                    radius: *radius_mm,
                    e1: heading(*azimuth_deg),
                    e2: Vec3::z(),
                    start: start_deg.to_radians(),
                    sweep: sweep_deg.to_radians(),
                }])
            }
            CenterlineSpec::CandyCane {
                start,
                arch_radius_mm,
                ascending_mm,
                descending_mm,
                azimuth_deg,
            } => {
                positive(*arch_radius_mm, "arch radius")?;
                positive(*ascending_mm, "ascending length")?;
                positive(*descending_mm, "descending length")?;
                let h = heading(*azimuth_deg);
                let z = Vec3::z();
                let p0 = Vec3::from(*start);
                let p1 = p0 + h * *ascending_mm;
                let c = p1 + z * *arch_radius_mm;
                Centerline::new(vec![
                    Segment::Line {
                        start: p0,
                        dir: h,
                        length: *ascending_mm,
                    },
                    Segment::Arc {
                        center: c,
                        radius: *arch_radius_mm,
                        e1: -z,
                        e2: h,
                        start: 0.0,
                        sweep: PI,
                    },
                    Segment::Line {
                        start: c + z * *arch_radius_mm,
                        dir: -h,
                        length: *descending_mm,
                    },
                ])
            }
        }
    }
}

/// Result of projecting a point onto the centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length of the closest centerline point.
    pub s: f64,
    pub distance: f64,
    pub point: Vec3,
    pub tangent: Vec3,
}

/// A planar, arc-length parameterized chain of segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Centerline {
    segments: Vec<Segment>,
    offsets: Vec<f64>,
    binormal: Vec3,
}

impl Centerline {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::invalid("centerline needs at least one segment"));
        }
        let mut offsets = Vec::with_capacity(segments.len());
        let mut acc = 0.0;
        for s in &segments {
            offsets.push(acc);
            acc += s.length();
        }
        let binormal = match &segments[0] {
            Segment::Arc { e1, e2, .. } => e1.cross(e2),
            Segment::Line { dir, .. } => segments
                .iter()
                .find_map(|s| match s {
                    Segment::Arc { e1, e2, .. } => Some(e1.cross(e2)),
                    _ => None,
                })
                .unwrap_or_else(|| crate::geometry::inplane_basis(dir).0),
        };
        Ok(Self {
            segments,
            offsets,
            binormal,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn length(&self) -> f64 {
        self.offsets.last().unwrap() + self.segments.last().unwrap().length()
    }

    /// Unit normal of the plane containing the curve; perpendicular to
    /// every tangent.
    pub fn binormal(&self) -> Vec3 {
        self.binormal
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length());
        let idx = self.offsets.iter().rposition(|&o| o <= s).unwrap_or(0);
        (
            idx,
            (s - self.offsets[idx]).min(self.segments[idx].length()),
        )
    }

    pub fn point_at(&self, s: f64) -> Vec3 {
        let (i, local) = self.locate(s);
        self.segments[i].point(local)
    }

    pub fn tangent_at(&self, s: f64) -> Vec3 {
        let (i, local) = self.locate(s);
        self.segments[i].tangent(local)
    }

    pub fn project(&self, q: &Vec3) -> Projection {
        let mut best: Option<(usize, f64, f64)> = None;
        for (i, seg) in self.segments.iter().enumerate() {
            let (s, d) = seg.nearest(q);
            if best.map_or(true, |(_, _, bd)| d < bd) {
                best = Some((i, s, d));
            }
        }
        let (i, s, distance) = best.unwrap();
        Projection {
            s: self.offsets[i] + s,
            distance,
            point: self.segments[i].point(s),
            tangent: self.segments[i].tangent(s),
        }
    }

    /// Axis-aligned bounds of the curve, sampled every `step` mm.
    pub fn bounds(&self, step: f64) -> (Vec3, Vec3) {
        let n = (self.length() / step).ceil().max(1.0) as usize;
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for i in 0..=n {
            let p = self.point_at(self.length() * i as f64 / n as f64);
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        (lo, hi)
    }
}
