//! Plane and angle algebra.
//!
//! A cross-sectional plane is unoriented, so its unit normal `n` and `-n`
//! describe the same plane. Orientations are stored as a pair of spherical
//! angles `(theta, phi)` with the convention
//!
//! ```text
//! n = (cos(theta) cos(phi), cos(theta) sin(phi), -sin(theta))
//! ```
//!
//! which is the polar angle measured from `+z` shifted by `-pi/2`. The
//! canonical hemisphere is `n_x > 0`; ties on the `n_x = 0` great circle are
//! broken towards `n_y > 0`, and at the poles towards `n_z > 0`. Canonical
//! angles therefore satisfy `theta in [-pi/2, pi/2)` and `phi in (-pi/2, pi/2]`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Tolerance on `|n| = 1` accepted by [`normal_to_spherical`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneOrientation {
    pub theta: f64,
    pub phi: f64,
}

impl PlaneOrientation {
    /// Canonical representative of the plane described by `(theta, phi)`.
    ///
    /// Any pair of finite angles is accepted; the result is the orientation
    /// of the same geometric plane with angles in the canonical ranges.
    pub fn new(theta: f64, phi: f64) -> Self {
        canonical_from_normal(&spherical_to_normal_raw(theta, phi))
    }

    /// Builds an orientation from angles that are already canonical without
    /// touching them.
    pub const fn from_canonical(theta: f64, phi: f64) -> Self {
        Self { theta, phi }
    }

    /// Wraps each angle into `[-pi/2, pi/2)` independently. The result is
    /// returned unchanged when it already lies strictly inside the
    /// canonical hemisphere; boundary cases are canonicalized.
    pub fn from_wrapped(theta: f64, phi: f64) -> Self {
        let (t, p) = (wrap_half_pi(theta), wrap_half_pi(phi));
        if t > -FRAC_PI_2 && p > -FRAC_PI_2 {
            Self { theta: t, phi: p }
        } else {
            Self::new(t, p)
        }
    }

    pub fn from_degrees(theta_deg: f64, phi_deg: f64) -> Self {
        Self::new(theta_deg.to_radians(), phi_deg.to_radians())
    }

    pub fn canonicalize(self) -> Self {
        Self::new(self.theta, self.phi)
    }

    pub fn normal(&self) -> Vec3 {
        spherical_to_normal(*self)
    }

    pub fn theta_deg(&self) -> f64 {
        self.theta.to_degrees()
    }

    pub fn phi_deg(&self) -> f64 {
        self.phi.to_degrees()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.phi.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    /// Pivot point in millimetres.
    pub pivot: Vec3,
    pub orientation: PlaneOrientation,
}

impl Plane {
    pub fn new(pivot: Vec3, orientation: PlaneOrientation) -> Result<Self> {
        if !pivot.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("plane pivot must be finite"));
        }
        Ok(Self { pivot, orientation })
    }

    pub fn normal(&self) -> Vec3 {
        self.orientation.normal()
    }

    /// Signed distance of `point` from the plane along its normal.
    pub fn signed_distance(&self, point: &Vec3) -> f64 {
        (point - self.pivot).dot(&self.normal())
    }
}

fn spherical_to_normal_raw(theta: f64, phi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vec3::new(ct * cp, ct * sp, -st)
}

/// Whether `n` lies in the canonical hemisphere (see module docs).
fn in_canonical_hemisphere(n: &Vec3) -> bool {
    if n.x != 0.0 {
        return n.x > 0.0;
    }
    if n.y != 0.0 {
        return n.y > 0.0;
    }
    n.z >= 0.0
}

fn canonical_from_normal(n: &Vec3) -> PlaneOrientation {
    // Signed zeros would otherwise leak through atan2 and break the exact
    // sign-flip invariance.
    let clean = |v: f64| if v == 0.0 { 0.0 } else { v };
    let n = if in_canonical_hemisphere(n) { *n } else { -n };
    let (x, y, z) = (clean(n.x), clean(n.y), clean(n.z));
    let theta = (-z).atan2(x.hypot(y));
    let phi = if x == 0.0 && y == 0.0 {
        0.0
    } else {
        y.atan2(x)
    };
    PlaneOrientation {
        theta: clean(theta),
        phi: clean(phi),
    }
}

/// Spherical angles of the plane with unit normal `n`.
pub fn normal_to_spherical(n: &Vec3) -> Result<PlaneOrientation> {
    if !n.iter().all(|c| c.is_finite()) {
        return Err(Error::invalid("normal must be finite"));
    }
    let norm = n.norm();
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::invalid(format!(
            "normal must be a unit vector, got norm {norm}"
        )));
    }
    Ok(canonical_from_normal(n))
}

/// Unit normal of a canonical orientation, in the canonical hemisphere.
pub fn spherical_to_normal(o: PlaneOrientation) -> Vec3 {
    spherical_to_normal_raw(o.theta, o.phi)
}

/// Wraps an angle into `[-pi/2, pi/2)` modulo `pi`.
pub fn wrap_half_pi(a: f64) -> f64 {
    if (-FRAC_PI_2..FRAC_PI_2).contains(&a) {
        return a;
    }
    let w = (a + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    // rounding can land exactly on the open end
    if w >= FRAC_PI_2 {
        w - PI
    } else {
        w
    }
}

/// `min_k |a - b + k pi|`: the acute angular distance between two angles
/// that are only defined modulo `pi`.
pub fn acute_angle_diff(a: f64, b: f64) -> f64 {
    let d = wrap_half_pi(a - b).abs();
    if d > FRAC_PI_2 {
        FRAC_PI_2
    } else {
        d
    }
}

/// Orthonormal in-plane axes `(u, v)` with `{u, v, n}` right-handed.
pub fn inplane_basis(n: &Vec3) -> (Vec3, Vec3) {
    let z = Vec3::z();
    let u = if n.dot(&z).abs() > 0.999 {
        Vec3::x().cross(n).normalize()
    } else {
        z.cross(n).normalize()
    };
    let v = n.cross(&u);
    (u, v)
}

/// Area-uniform sample on the disc of `radius` mm around the plane pivot.
pub fn disc_sample<R: Rng + ?Sized>(plane: &Plane, radius: f64, rng: &mut R) -> Vec3 {
    if radius <= 0.0 {
        return plane.pivot;
    }
    let (u, v) = inplane_basis(&plane.normal());
    let r = radius * rng.gen::<f64>().sqrt();
    let (s, c) = (2.0 * PI * rng.gen::<f64>()).sin_cos();
    plane.pivot + u * (r * c) + v * (r * s)
}
