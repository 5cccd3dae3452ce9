use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::centerline::Centerline;
use crate::error::{Error, Result};
use crate::geometry::{normal_to_spherical, PlaneOrientation, Vec3};

/// The eleven measurement locations along the vessel, proximal to distal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Landmark {
    Ann,
    SoV,
    Stj,
    MAs,
    PAr,
    DAr,
    PDe,
    DDe,
    Cel,
    Ren,
    Bif,
}

impl Landmark {
    pub const ALL: [Landmark; 11] = [
        Landmark::Ann,
        Landmark::SoV,
        Landmark::Stj,
        Landmark::MAs,
        Landmark::PAr,
        Landmark::DAr,
        Landmark::PDe,
        Landmark::DDe,
        Landmark::Cel,
        Landmark::Ren,
        Landmark::Bif,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Landmark::Ann => "Ann",
            Landmark::SoV => "SoV",
            Landmark::Stj => "Stj",
            Landmark::MAs => "MAs",
            Landmark::PAr => "PAr",
            Landmark::DAr => "DAr",
            Landmark::PDe => "PDe",
            Landmark::DDe => "DDe",
            Landmark::Cel => "Cel",
            Landmark::Ren => "Ren",
            Landmark::Bif => "Bif",
        }
    }

    /// Position along the centerline as a fraction of its length. The arch
    /// apex of the candy-cane phantoms (near 0.5) is skipped on purpose.
    pub fn fraction(self) -> f64 {
        match self {
            Landmark::Ann => 0.02,
            Landmark::SoV => 0.06,
            Landmark::Stj => 0.10,
            Landmark::MAs => 0.20,
            Landmark::PAr => 0.35,
            Landmark::DAr => 0.65,
            Landmark::PDe => 0.75,
            Landmark::DDe => 0.82,
            Landmark::Cel => 0.88,
            Landmark::Ren => 0.93,
            Landmark::Bif => 0.98,
        }
    }

    /// Inter-operator positional limits of agreement (mm) for the clinical
    /// landmark this one stands in for.
    pub fn position_loa_mm(self) -> f64 {
        match self {
            Landmark::Ann => 0.4,
            Landmark::SoV => 2.2,
            Landmark::Stj => 1.0,
            Landmark::MAs => 2.8,
            Landmark::PAr => 5.7,
            Landmark::DAr => 6.4,
            Landmark::PDe => 4.9,
            Landmark::DDe => 29.9,
            Landmark::Cel => 1.7,
            Landmark::Ren => 2.5,
            Landmark::Bif => 2.4,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Landmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Landmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Landmark::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::NotFound(format!("landmark {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkTruth {
    pub landmark: Landmark,
    pub pivot: Vec3,
    pub orientation: PlaneOrientation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub centerline: Centerline,
    pub landmarks: Vec<LandmarkTruth>,
}

impl GroundTruth {
    pub fn from_centerline(centerline: Centerline) -> Result<Self> {
        let total = centerline.length();
        let landmarks = Landmark::ALL
            .into_iter()
            .map(|landmark| {
                let s = landmark.fraction() * total;
                Ok(LandmarkTruth {
                    landmark,
                    pivot: centerline.point_at(s),
                    orientation: normal_to_spherical(&centerline.tangent_at(s))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            centerline,
            landmarks,
        })
    }

    pub fn get(&self, landmark: Landmark) -> Option<&LandmarkTruth> {
        self.landmarks.iter().find(|l| l.landmark == landmark)
    }
}

/// A labelled plane placed by one (simulated) operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub landmark: Landmark,
    pub pivot: Vec3,
    pub orientation: PlaneOrientation,
    pub operator: u32,
}

/// Gaussian labelling noise of a simulated operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorNoise {
    /// Per-coordinate positional sigma (mm), indexed like [`Landmark::ALL`].
    pub pos_sigma_mm: [f64; 11],
    pub theta_sigma_deg: f64,
    pub phi_sigma_deg: f64,
}

/// Overall inter-operator angular limits of agreement (deg).
pub const OPERATOR_THETA_LOA_DEG: f64 = 10.60;
pub const OPERATOR_PHI_LOA_DEG: f64 = 21.39;

impl OperatorNoise {
    pub fn zero() -> Self {
        Self {
            pos_sigma_mm: [0.0; 11],
            theta_sigma_deg: 0.0,
            phi_sigma_deg: 0.0,
        }
    }

    /// Sigmas equal to the clinical limits of agreement divided by 1.96.
    pub fn calibrated() -> Self {
        Self {
            pos_sigma_mm: Landmark::ALL.map(|l| l.position_loa_mm() / 1.96),
            theta_sigma_deg: OPERATOR_THETA_LOA_DEG / 1.96,
            phi_sigma_deg: OPERATOR_PHI_LOA_DEG / 1.96,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .pos_sigma_mm
            .iter()
            .chain([&self.theta_sigma_deg, &self.phi_sigma_deg]);
        for s in all {
            if !(*s >= 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("noise sigma must be >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

fn gaussian<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).unwrap().sample(rng)
}

/// Perturbs every ground-truth plane with the operator's noise model.
pub fn simulate_operator<R: Rng + ?Sized>(
    gt: &GroundTruth,
    noise: &OperatorNoise,
    operator: u32,
    rng: &mut R,
) -> Result<Vec<Annotation>> {
    noise.validate()?;
    let out = gt
        .landmarks
        .iter()
        .map(|t| {
            let sp = noise.pos_sigma_mm[t.landmark.index()];
            let offset = Vec3::new(gaussian(sp, rng), gaussian(sp, rng), gaussian(sp, rng));
            let dt = gaussian(noise.theta_sigma_deg, rng).to_radians();
            let dp = gaussian(noise.phi_sigma_deg, rng).to_radians();
            Annotation {
                landmark: t.landmark,
                pivot: t.pivot + offset,
                orientation: if dt == 0.0 && dp == 0.0 {
                    t.orientation
                } else {
                    PlaneOrientation::new(t.orientation.theta + dt, t.orientation.phi + dp)
                },
                operator,
            }
        })
        .collect();
    Ok(out)
}

/// Orientation orthogonal to the analytic centerline at a landmark.
pub fn centerline_baseline(gt: &GroundTruth, landmark: Landmark) -> Result<PlaneOrientation> {
    let t = gt
        .get(landmark)
        .ok_or_else(|| Error::NotFound(format!("landmark {landmark} not in ground truth")))?;
    let s = landmark.fraction() * gt.centerline.length();
    let o = normal_to_spherical(&gt.centerline.tangent_at(s))?;
    debug_assert_eq!(o, t.orientation);
    Ok(o)
}

/// Orientation orthogonal to the centerline at its point closest to `p`.
pub fn centerline_orientation_at(centerline: &Centerline, p: &Vec3) -> Result<PlaneOrientation> {
    normal_to_spherical(&centerline.project(p).tangent)
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    landmark: String,
    op: u32,
    px: f64,
    py: f64,
    pz: f64,
    theta_deg: f64,
    phi_deg: f64,
}

pub fn write_annotations<W: Write>(rows: &[Annotation], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for a in rows {
        wtr.serialize(AnnotationRow {
            landmark: a.landmark.name().to_string(),
            op: a.operator,
            px: a.pivot.x,
            py: a.pivot.y,
            pz: a.pivot.z,
            theta_deg: a.orientation.theta_deg(),
            phi_deg: a.orientation.phi_deg(),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_annotations<R: Read>(r: R) -> Result<Vec<Annotation>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: AnnotationRow = row?;
        out.push(Annotation {
            landmark: row.landmark.parse()?,
            pivot: Vec3::new(row.px, row.py, row.pz),
            orientation: PlaneOrientation::from_degrees(row.theta_deg, row.phi_deg),
            operator: row.op,
        });
    }
    Ok(out)
}

/// Ground truth rows use operator id 0.
pub fn ground_truth_annotations(gt: &GroundTruth) -> Vec<Annotation> {
    gt.landmarks
        .iter()
        .map(|t| Annotation {
            landmark: t.landmark,
            pivot: t.pivot,
            orientation: t.orientation,
            operator: 0,
        })
        .collect()
}
