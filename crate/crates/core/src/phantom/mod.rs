//! Synthetic tubular phantoms with analytic ground truth.

mod centerline;
pub mod dataset;
mod landmarks;

pub use centerline::{Centerline, CenterlineSpec, Projection, Segment};
pub use landmarks::{
    centerline_baseline, centerline_orientation_at, ground_truth_annotations, read_annotations,
    simulate_operator, write_annotations, Annotation, GroundTruth, Landmark, LandmarkTruth,
    OperatorNoise, OPERATOR_PHI_LOA_DEG, OPERATOR_THETA_LOA_DEG,
};

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::volume::{IntensityWindow, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    pub lumen: f32,
    pub wall: f32,
    pub background: f32,
}

impl Default for Intensities {
    fn default() -> Self {
        Self {
            lumen: 400.0,
            wall: 100.0,
            background: -100.0,
        }
    }
}

/// Dissection flap: a wall-level band along the chord that cuts off the
/// angular sector `[angle, angle + sector]` of the lumen cross-section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlapSpec {
    /// Sector start, measured in the cross-section from the curve binormal.
    pub angle_deg: f64,
    pub sector_deg: f64,
    pub thickness_mm: f64,
    /// Arc-length interval covered, as fractions of the centerline length.
    pub extent: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub centerline: CenterlineSpec,
    /// Lumen radius at the start and end of the centerline (linear taper).
    pub radius_mm: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flap: Option<FlapSpec>,
    #[serde(default)]
    pub intensities: Intensities,
    pub noise_sigma: f64,
    pub spacing_mm: f32,
    /// Free space kept around the tube when the grid is fitted automatically.
    #[serde(default = "default_margin")]
    pub margin_mm: f64,
    /// Explicit grid; when absent the grid is fitted to the tube.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<[f32; 3]>,
}

fn default_margin() -> f64 {
    15.0
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<Centerline> {
        let sp = self.spacing_mm as f64;
        if !(sp > 0.0 && sp.is_finite()) {
            return Err(Error::invalid("spacing must be positive"));
        }
        for r in self.radius_mm {
            if !(r > 2.0 * sp) || !r.is_finite() {
                return Err(Error::invalid(format!(
                    "lumen radius {r} mm must exceed twice the spacing ({sp} mm)"
                )));
            }
        }
        if let Some(f) = &self.flap {
            if !(f.thickness_mm >= sp) {
                return Err(Error::invalid("flap must be at least one voxel thick"));
            }
            if !(f.sector_deg > 0.0 && f.sector_deg < 180.0) {
                return Err(Error::invalid("flap sector must be in (0, 180) degrees"));
            }
            if !(0.0 <= f.extent[0] && f.extent[0] < f.extent[1] && f.extent[1] <= 1.0) {
                return Err(Error::invalid(
                    "flap extent must be an increasing pair in [0, 1]",
                ));
            }
        }
        let w = IntensityWindow::default();
        let i = &self.intensities;
        for x in [i.lumen, i.wall, i.background] {
            if !(w.lo..=w.hi).contains(&x) {
                return Err(Error::invalid(format!(
                    "intensity {x} outside the normalization window [{}, {}]",
                    w.lo, w.hi
                )));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be >= 0"));
        }
        if !(self.margin_mm >= 0.0) {
            return Err(Error::invalid("margin must be >= 0"));
        }
        self.centerline.build()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    fn radius_at(&self, s: f64, total: f64) -> f64 {
        let u = (s / total).clamp(0.0, 1.0);
        self.radius_mm[0] + (self.radius_mm[1] - self.radius_mm[0]) * u
    }

    fn grid(&self, c: &Centerline) -> ([usize; 3], [f32; 3]) {
        if let Some(dims) = self.dims {
            return (dims, self.origin.unwrap_or([0.0; 3]));
        }
        let sp = self.spacing_mm as f64;
        let (lo, hi) = c.bounds(0.5);
        let pad = self.radius_mm[0].max(self.radius_mm[1]) + self.margin_mm;
        let lo = lo.add_scalar(-pad);
        let hi = hi.add_scalar(pad);
        let dims = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / sp).ceil() as usize + 1);
        // Snap the origin to the spacing grid so generation is independent
        // of tiny floating-point differences in the bounds.
        let origin = [0, 1, 2].map(|a| ((lo[a] / sp).floor() * sp) as f32);
        (dims, origin)
    }
}

/// Flap wall coverage in `[0, 1]` for a point offset `w` from the
/// centerline point with tangent `t`.
fn flap_coverage(f: &FlapSpec, binormal: &Vec3, t: &Vec3, w: &Vec3, r: f64, h: f64) -> f64 {
    let e1 = *binormal;
    let e2 = t.cross(binormal);
    let (a, b) = (w.dot(&e1), w.dot(&e2));
    let alpha = f.angle_deg.to_radians();
    let delta = f.sector_deg.to_radians();
    let gamma = b.atan2(a);
    if (gamma - alpha).rem_euclid(TAU) > delta {
        return 0.0;
    }
    let mid = alpha + 0.5 * delta;
    let dist = (a * mid.cos() + b * mid.sin() - r * (0.5 * delta).cos()).abs();
    (0.5 - (dist - 0.5 * f.thickness_mm) / h).clamp(0.0, 1.0)
}

/// Whether the flap wall touches the point at all (used by tests).
pub fn flap_contains(spec: &PhantomSpec, c: &Centerline, p: &Vec3) -> bool {
    let Some(f) = &spec.flap else { return false };
    let proj = c.project(p);
    let u = proj.s / c.length();
    if u < f.extent[0] || u > f.extent[1] {
        return false;
    }
    let r = spec.radius_at(proj.s, c.length());
    flap_coverage(
        f,
        &c.binormal(),
        &proj.tangent,
        &(p - proj.point),
        r,
        spec.spacing_mm as f64,
    ) > 0.0
}

/// Renders the phantom and its landmark ground truth. Edges are
/// partial-volume blended over one voxel; noise is drawn in voxel order.
pub fn generate<R: Rng + ?Sized>(spec: &PhantomSpec, rng: &mut R) -> Result<(Volume, GroundTruth)> {
    let c = spec.validate()?;
    let (dims, origin) = spec.grid(&c);
    let sp = spec.spacing_mm;
    let h = sp as f64;
    let total = c.length();
    let binormal = c.binormal();
    let it = spec.intensities;
    let (lumen, wall, bg) = (it.lumen as f64, it.wall as f64, it.background as f64);
    let o = Vec3::new(origin[0] as f64, origin[1] as f64, origin[2] as f64);
    let reach = spec.radius_mm[0].max(spec.radius_mm[1]) + h;
    let n = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = o + Vec3::new(i as f64, j as f64, k as f64) * h;
                let proj = c.project(&p);
                if proj.distance > reach {
                    data.push(bg);
                    continue;
                }
                let r = spec.radius_at(proj.s, total);
                let cov = (0.5 - (proj.distance - r) / h).clamp(0.0, 1.0);
                let mut inner = lumen;
                if let Some(f) = &spec.flap {
                    let u = proj.s / total;
                    if u >= f.extent[0] && u <= f.extent[1] {
                        let fc =
                            flap_coverage(f, &binormal, &proj.tangent, &(p - proj.point), r, h);
                        inner += (wall - lumen) * fc;
                    }
                }
                data.push(bg + cov * (inner - bg));
            }
        }
    }
    let mut out: Vec<f32> = data.into_iter().map(|x| x as f32).collect();
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).unwrap();
        for x in &mut out {
            *x += normal.sample(rng) as f32;
        }
    }
    let volume = Volume::new(dims, [sp; 3], origin, out)?;
    let gt = GroundTruth::from_centerline(c)?;
    Ok((volume, gt))
}

/// Ranges from which concrete candy-cane phantom specs are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomRecipe {
    pub arch_radius_mm: [f64; 2],
    pub ascending_mm: [f64; 2],
    pub descending_mm: [f64; 2],
    pub azimuth_deg: [f64; 2],
    pub lumen_radius_mm: [f64; 2],
    /// End-to-start radius ratio.
    pub taper: [f64; 2],
    pub flap_probability: f64,
    pub flap_thickness_mm: [f64; 2],
    pub flap_sector_deg: [f64; 2],
    pub flap_start: [f64; 2],
    #[serde(default)]
    pub intensities: Intensities,
    pub noise_sigma: f64,
    pub spacing_mm: f32,
    #[serde(default = "default_margin")]
    pub margin_mm: f64,
}

impl Default for PhantomRecipe {
    /// Aortic-scale canes (arch radius 110 mm, lumen radius 12 to 17 mm).
    fn default() -> Self {
        Self {
            arch_radius_mm: [110.0, 110.0],
            ascending_mm: [40.0, 60.0],
            descending_mm: [60.0, 90.0],
            azimuth_deg: [-35.0, 35.0],
            lumen_radius_mm: [12.0, 17.0],
            taper: [0.75, 0.95],
            flap_probability: 0.5,
            flap_thickness_mm: [1.4, 2.1],
            flap_sector_deg: [100.0, 150.0],
            flap_start: [0.55, 0.7],
            intensities: Intensities::default(),
            noise_sigma: 20.0,
            spacing_mm: 0.7,
            margin_mm: default_margin(),
        }
    }
}

impl PhantomRecipe {
    /// Aortic-scale canes sampled at 1 mm, used by the study.
    pub fn study() -> Self {
        Self {
            spacing_mm: 1.0,
            ..Self::default()
        }
    }

    /// Smaller canes that keep a few dozen volumes in memory at once.
    pub fn compact() -> Self {
        Self {
            arch_radius_mm: [50.0, 65.0],
            ascending_mm: [30.0, 45.0],
            descending_mm: [30.0, 45.0],
            lumen_radius_mm: [9.0, 12.0],
            ..Self::default()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PhantomSpec {
        let mut uniform = |r: [f64; 2]| {
            if r[1] > r[0] {
                rng.gen_range(r[0]..r[1])
            } else {
                r[0]
            }
        };
        let arch = uniform(self.arch_radius_mm);
        let asc = uniform(self.ascending_mm);
        let desc = uniform(self.descending_mm);
        let az = uniform(self.azimuth_deg);
        let r0 = uniform(self.lumen_radius_mm);
        let taper = uniform(self.taper);
        let flap_roll = uniform([0.0, 1.0]);
        let flap = (flap_roll < self.flap_probability).then(|| FlapSpec {
            angle_deg: uniform([0.0, 360.0]),
            sector_deg: uniform(self.flap_sector_deg),
            thickness_mm: uniform(self.flap_thickness_mm),
            extent: [uniform(self.flap_start), 1.0],
        });
        PhantomSpec {
            centerline: CenterlineSpec::CandyCane {
                start: [0.0; 3],
                arch_radius_mm: arch,
                ascending_mm: asc,
                descending_mm: desc,
                azimuth_deg: az,
            },
            radius_mm: [r0, r0 * taper],
            flap,
            intensities: self.intensities,
            noise_sigma: self.noise_sigma,
            spacing_mm: self.spacing_mm,
            margin_mm: self.margin_mm,
            dims: None,
            origin: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{acute_angle_diff, normal_to_spherical, Plane};
    use crate::volume::{extract_patch, reslice};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line_spec() -> PhantomSpec {
        PhantomSpec {
            centerline: CenterlineSpec::Line {
                start: [20.0, 20.0, 0.0],
                direction: [0.0, 0.0, 1.0],
                length_mm: 40.0,
            },
            radius_mm: [15.0, 15.0],
            flap: None,
            intensities: Intensities::default(),
            noise_sigma: 0.0,
            spacing_mm: 0.7,
            margin_mm: 5.0,
            dims: Some([58, 58, 58]),
            origin: Some([0.0; 3]),
        }
    }

    #[test]
    fn straight_tube_truth() {
        let (v, gt) = generate(&line_spec(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let expected = normal_to_spherical(&Vec3::z()).unwrap();
        assert_eq!(gt.landmarks.len(), 11);
        for t in &gt.landmarks {
            assert_eq!(t.orientation, expected);
            assert!(gt.centerline.project(&t.pivot).distance < 0.35);
        }
        // tube axis voxel is lumen, far corner background
        let i = v
            .world_to_voxel(&Vec3::new(20.0, 20.0, 20.0))
            .map(|x| x.round() as usize);
        assert_eq!(v.get(i[0], i[1], i[2]), 400.0);
        assert_eq!(v.get(57, 57, 57), -100.0);
    }

    #[test]
    fn patch_levels_on_tube() {
        let (v, _) = generate(&line_spec(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = extract_patch(&v, &Vec3::new(20.3, 20.3, 20.0));
        let w = IntensityWindow::default();
        let lumen = w.map(400.0);
        assert!((lumen - (2.0 * 500.0 / 900.0 - 1.0)).abs() < 1e-6);
        // patch centre is inside the tube
        assert_eq!(p.at(32, 32, 32), lumen);
        // 20 mm sideways is outside the 15 mm tube
        let off = (20.0f32 / 0.7).round() as usize;
        assert_eq!(p.at(32 + off, 32, 32), -1.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let mut spec = PhantomRecipe::compact().sample(&mut ChaCha8Rng::seed_from_u64(5));
        spec.margin_mm = 2.0;
        spec.radius_mm = [6.0, 5.0];
        let a = generate(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(a
            .0
            .data()
            .iter()
            .zip(b.0.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn spec_toml_round_trip() {
        let spec = PhantomRecipe::default().sample(&mut ChaCha8Rng::seed_from_u64(3));
        let text = spec.to_toml().unwrap();
        assert_eq!(PhantomSpec::from_toml(&text).unwrap(), spec);
        let recipe = PhantomRecipe::compact();
        assert_eq!(
            PhantomRecipe::from_toml(&recipe.to_toml().unwrap()).unwrap(),
            recipe
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = line_spec();
        s.radius_mm = [1.0, 15.0];
        assert!(generate(&s, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let mut s = line_spec();
        s.intensities.lumen = 5000.0;
        assert!(s.validate().is_err());
        let mut s = line_spec();
        s.flap = Some(FlapSpec {
            angle_deg: 0.0,
            sector_deg: 120.0,
            thickness_mm: 0.3,
            extent: [0.0, 1.0],
        });
        assert!(s.validate().is_err());
    }

    fn flap_spec() -> PhantomSpec {
        let mut s = line_spec();
        s.radius_mm = [12.0, 12.0];
        s.flap = Some(FlapSpec {
            angle_deg: 30.0,
            sector_deg: 140.0,
            thickness_mm: 1.6,
            extent: [0.3, 0.9],
        });
        s
    }

    #[test]
    fn flap_splits_the_lumen() {
        let spec = flap_spec();
        let (v, gt) = generate(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let t = gt.get(Landmark::DAr).unwrap();
        let img = reslice(&v, &Plane::new(t.pivot, t.orientation).unwrap(), 96, 0.35).unwrap();
        let comps = img.components(250.0);
        assert!(comps.len() >= 2, "components {comps:?}");
        assert!(comps[1] > 50);
        // outside the flap extent the lumen is a single region
        let t = gt.get(Landmark::SoV).unwrap();
        let img = reslice(&v, &Plane::new(t.pivot, t.orientation).unwrap(), 96, 0.35).unwrap();
        assert_eq!(img.components(250.0).len(), 1);
    }

    #[test]
    fn flap_stays_inside_its_sector() {
        let spec = flap_spec();
        let c = spec.validate().unwrap();
        let f = spec.flap.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (e1, t) = (c.binormal(), Vec3::z());
        let e2 = t.cross(&e1);
        let mut hits = 0;
        for _ in 0..20_000 {
            let p = Vec3::new(
                rng.gen_range(5.0..35.0),
                rng.gen_range(5.0..35.0),
                rng.gen_range(0.0..40.0),
            );
            if flap_contains(&spec, &c, &p) {
                hits += 1;
                let w = p - c.project(&p).point;
                let gamma = w.dot(&e2).atan2(w.dot(&e1));
                let rel = (gamma - f.angle_deg.to_radians()).rem_euclid(TAU);
                assert!(rel <= f.sector_deg.to_radians());
            }
        }
        assert!(hits > 0);
    }

    #[test]
    fn cane_truth_follows_tangent() {
        let spec = PhantomRecipe::compact().sample(&mut ChaCha8Rng::seed_from_u64(11));
        let c = spec.validate().unwrap();
        let gt = GroundTruth::from_centerline(c.clone()).unwrap();
        for t in &gt.landmarks {
            let proj = c.project(&t.pivot);
            assert!(proj.distance < 1e-9);
            let o = normal_to_spherical(&proj.tangent).unwrap();
            assert!(acute_angle_diff(o.theta, t.orientation.theta) < 1e-9);
        }
    }
}
