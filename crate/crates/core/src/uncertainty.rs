//! Sampling strategies for orientation uncertainty and the strategy
//! recommender.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{disc_sample, Plane, PlaneOrientation, Vec3};
use crate::network::{decode_output, ForwardMode, NetworkParams};
use crate::rng::{stream, StreamRng};
use crate::volume::{extract_patch, Volume};

/// Default disc radius for neighbour sampling, in mm.
pub const INS_RADIUS_MM: f64 = 1.53;
/// Redraws allowed when a neighbour seed falls outside the volume.
pub const INS_MAX_REDRAWS: usize = 10;
/// Upper bound on the INS standard deviation (degrees) for choosing INS.
pub const INS_STD_THRESHOLD_DEG: f64 = 0.20;
/// MCDbS standard deviation (degrees) at and above which neither
/// strategy is trusted.
pub const MCDBS_STD_THRESHOLD_DEG: f64 = 2.50;

const TAG_MCDS: u64 = 11;
const TAG_MCDBS: u64 = 12;
const TAG_INS: u64 = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    NoUq,
    Mcds,
    Ins,
    Mcdbs,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::NoUq,
        Strategy::Mcds,
        Strategy::Ins,
        Strategy::Mcdbs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::NoUq => "NoUQ",
            Strategy::Mcds => "MCDS",
            Strategy::Ins => "INS",
            Strategy::Mcdbs => "MCDbS",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nouq" => Ok(Strategy::NoUq),
            "mcds" => Ok(Strategy::Mcds),
            "ins" => Ok(Strategy::Ins),
            "mcdbs" => Ok(Strategy::Mcdbs),
            _ => Err(Error::invalid(format!(
                "unknown strategy {s:?} (nouq, mcds, ins, mcdbs)"
            ))),
        }
    }
}

/// Mean and population variance of angle samples, each angle unwrapped
/// modulo pi against the first sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: PlaneOrientation,
    /// `[theta, phi]` in rad^2.
    pub variance: [f64; 2],
    /// Unwrapped samples of some angle still span more than pi/2.
    pub high_dispersion: bool,
}

/// Representative of `x` modulo pi within pi/2 of `reference`.
pub fn unwrap_near(x: f64, reference: f64) -> f64 {
    x - PI * ((x - reference) / PI).round()
}

pub fn circular_aggregate(samples: &[PlaneOrientation]) -> Result<Aggregate> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot aggregate zero samples"));
    }
    let k = samples.len() as f64;
    let mut mean = [0.0; 2];
    let mut variance = [0.0; 2];
    let mut high_dispersion = false;
    for a in 0..2 {
        let angle = |o: &PlaneOrientation| if a == 0 { o.theta } else { o.phi };
        let r = angle(&samples[0]);
        // offsets from the first sample, so identical samples give exactly zero
        let d: Vec<f64> = samples
            .iter()
            .map(|o| unwrap_near(angle(o), r) - r)
            .collect();
        let md = d.iter().sum::<f64>() / k;
        variance[a] = d.iter().map(|x| (x - md) * (x - md)).sum::<f64>() / k;
        let (lo, hi) = d
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            });
        high_dispersion |= hi - lo > FRAC_PI_2;
        mean[a] = r + md;
    }
    Ok(Aggregate {
        mean: PlaneOrientation::from_wrapped(mean[0], mean[1]),
        variance,
        high_dispersion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDistribution {
    pub strategy: Strategy,
    pub mean: PlaneOrientation,
    /// `[theta, phi]` in rad^2.
    pub variance: [f64; 2],
    pub high_dispersion: bool,
    pub samples: Vec<PlaneOrientation>,
}

impl PredictionDistribution {
    pub fn from_samples(strategy: Strategy, samples: Vec<PlaneOrientation>) -> Result<Self> {
        let agg = circular_aggregate(&samples)?;
        Ok(Self {
            strategy,
            mean: agg.mean,
            variance: agg.variance,
            high_dispersion: agg.high_dispersion,
            samples,
        })
    }

    pub fn k(&self) -> usize {
        self.samples.len()
    }

    /// `[theta, phi]` standard deviation in degrees.
    pub fn std_deg(&self) -> [f64; 2] {
        [
            self.variance[0].sqrt().to_degrees(),
            self.variance[1].sqrt().to_degrees(),
        ]
    }
}

fn check_k(k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::invalid(format!(
            "sampling strategies need k >= 2, got {k}"
        )));
    }
    Ok(())
}

fn check_pivot(volume: &Volume, pivot: &Vec3) -> Result<()> {
    if !volume.contains(pivot) {
        return Err(Error::invalid(format!(
            "pivot {:?} lies outside the volume",
            pivot.as_slice()
        )));
    }
    Ok(())
}

/// Per-draw generator of the sampling strategies.
pub fn draw_rng(seed: u64, strategy: Strategy, draw: usize) -> StreamRng {
    let tag = match strategy {
        Strategy::Mcds => TAG_MCDS,
        Strategy::Mcdbs => TAG_MCDBS,
        Strategy::Ins | Strategy::NoUq => TAG_INS,
    };
    stream(seed, &[tag, draw as u64])
}

/// Single deterministic prediction at `pivot`.
pub fn predict_nouq(
    params: &NetworkParams<f32>,
    volume: &Volume,
    pivot: &Vec3,
) -> Result<PlaneOrientation> {
    check_pivot(volume, pivot)?;
    let patch = extract_patch(volume, pivot);
    let raw = params.forward(
        &patch.values,
        volume.normalized_location(pivot),
        ForwardMode::Deterministic,
        &mut stream(0, &[]),
    )?;
    Ok(decode_output(raw))
}

/// Head-only dropout sampling on encoder features computed once.
pub fn predict_mcds(
    params: &NetworkParams<f32>,
    volume: &Volume,
    pivot: &Vec3,
    k: usize,
    seed: u64,
) -> Result<PredictionDistribution> {
    check_k(k)?;
    check_pivot(volume, pivot)?;
    let patch = extract_patch(volume, pivot);
    let loc = volume.normalized_location(pivot);
    let features = params.encoder_features(
        &patch.values,
        ForwardMode::Deterministic,
        &mut stream(0, &[]),
    )?;
    let samples = (0..k)
        .map(|i| {
            let raw = params.head(
                &features,
                loc,
                ForwardMode::StochasticHead,
                &mut draw_rng(seed, Strategy::Mcds, i),
            )?;
            Ok(decode_output(raw))
        })
        .collect::<Result<Vec<_>>>()?;
    PredictionDistribution::from_samples(Strategy::Mcds, samples)
}

/// Full passes with DropBlock and Dropout active at a fixed pivot.
pub fn predict_mcdbs(
    params: &NetworkParams<f32>,
    volume: &Volume,
    pivot: &Vec3,
    k: usize,
    seed: u64,
) -> Result<PredictionDistribution> {
    check_k(k)?;
    check_pivot(volume, pivot)?;
    let patch = extract_patch(volume, pivot);
    let loc = volume.normalized_location(pivot);
    let samples = (0..k)
        .map(|i| {
            let raw = params.forward(
                &patch.values,
                loc,
                ForwardMode::StochasticFull,
                &mut draw_rng(seed, Strategy::Mcdbs, i),
            )?;
            Ok(decode_output(raw))
        })
        .collect::<Result<Vec<_>>>()?;
    PredictionDistribution::from_samples(Strategy::Mcdbs, samples)
}

/// Iterative neighbour sampling with an arbitrary predictor. Iterate `n`
/// predicts at `P_n`; the next seed is drawn on a disc around the original
/// pivot in the plane just predicted. Seeds rejected by `inside` are
/// redrawn up to [`INS_MAX_REDRAWS`] times.
pub fn ins_iterate(
    pivot: &Vec3,
    k: usize,
    radius: f64,
    rng: &mut StreamRng,
    inside: impl Fn(&Vec3) -> bool,
    mut predict: impl FnMut(&Vec3) -> Result<PlaneOrientation>,
) -> Result<Vec<PlaneOrientation>> {
    check_k(k)?;
    let mut seed_point = *pivot;
    let mut samples = Vec::with_capacity(k);
    for n in 0..k {
        let o = predict(&seed_point)?;
        samples.push(o);
        if n + 1 == k {
            break;
        }
        let plane = Plane::new(*pivot, o)?;
        let mut next = None;
        for _ in 0..=INS_MAX_REDRAWS {
            let p = disc_sample(&plane, radius, rng);
            if inside(&p) {
                next = Some(p);
                break;
            }
        }
        seed_point = next.ok_or_else(|| {
            Error::invalid(format!(
                "neighbour seed left the volume {} times in a row",
                INS_MAX_REDRAWS + 1
            ))
        })?;
    }
    Ok(samples)
}

pub fn predict_ins(
    params: &NetworkParams<f32>,
    volume: &Volume,
    pivot: &Vec3,
    k: usize,
    radius: f64,
    seed: u64,
) -> Result<PredictionDistribution> {
    check_pivot(volume, pivot)?;
    let mut rng = draw_rng(seed, Strategy::Ins, 0);
    let samples = ins_iterate(
        pivot,
        k,
        radius,
        &mut rng,
        |p| volume.contains(p),
        |p| predict_nouq(params, volume, p),
    )?;
    PredictionDistribution::from_samples(Strategy::Ins, samples)
}

/// Runs `strategy` with `k` draws; `k = 1` always means a single
/// deterministic pass.
pub fn predict(
    params: &NetworkParams<f32>,
    volume: &Volume,
    pivot: &Vec3,
    strategy: Strategy,
    k: usize,
    seed: u64,
) -> Result<PredictionDistribution> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k == 1 || strategy == Strategy::NoUq {
        let o = predict_nouq(params, volume, pivot)?;
        return PredictionDistribution::from_samples(Strategy::NoUq, vec![o]);
    }
    match strategy {
        Strategy::Mcds => predict_mcds(params, volume, pivot, k, seed),
        Strategy::Ins => predict_ins(params, volume, pivot, k, INS_RADIUS_MM, seed),
        Strategy::Mcdbs => predict_mcdbs(params, volume, pivot, k, seed),
        Strategy::NoUq => unreachable!(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Ins,
    Mcdbs,
    /// Neither estimate is reliable; defer to the centerline or a manual
    /// annotation.
    Fallback,
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Choice::Ins => "INS",
            Choice::Mcdbs => "MCDbS",
            Choice::Fallback => "fallback",
        })
    }
}

pub fn recommend_angle(ins_std_deg: f64, mcdbs_std_deg: f64) -> Choice {
    if ins_std_deg <= INS_STD_THRESHOLD_DEG {
        Choice::Ins
    } else if mcdbs_std_deg < MCDBS_STD_THRESHOLD_DEG {
        Choice::Mcdbs
    } else {
        Choice::Fallback
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub theta: Choice,
    pub phi: Choice,
    pub ins_std_deg: [f64; 2],
    pub mcdbs_std_deg: [f64; 2],
}

impl Recommendation {
    pub fn any_fallback(&self) -> bool {
        self.theta == Choice::Fallback || self.phi == Choice::Fallback
    }
}

impl fmt::Display for Recommendation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "theta:{} phi:{}", self.theta, self.phi)
    }
}

pub fn recommend(
    ins: &PredictionDistribution,
    mcdbs: &PredictionDistribution,
) -> Result<Recommendation> {
    if ins.strategy != Strategy::Ins || mcdbs.strategy != Strategy::Mcdbs {
        return Err(Error::invalid(
            "recommend needs an INS and an MCDbS distribution",
        ));
    }
    if ins.k() != mcdbs.k() {
        return Err(Error::invalid(format!(
            "sample counts differ: INS k={}, MCDbS k={}",
            ins.k(),
            mcdbs.k()
        )));
    }
    let (a, b) = (ins.std_deg(), mcdbs.std_deg());
    Ok(Recommendation {
        theta: recommend_angle(a[0], b[0]),
        phi: recommend_angle(a[1], b[1]),
        ins_std_deg: a,
        mcdbs_std_deg: b,
    })
}

/// One row of a prediction report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub strategy: Strategy,
    pub k: usize,
    pub theta_deg: f64,
    pub phi_deg: f64,
    pub std_theta_deg: f64,
    pub std_phi_deg: f64,
    pub recommendation: String,
    pub wall_ms: f64,
}

impl PredictionReport {
    pub fn new(
        d: &PredictionDistribution,
        recommendation: Option<&Recommendation>,
        wall_ms: f64,
    ) -> Self {
        let s = d.std_deg();
        Self {
            strategy: d.strategy,
            k: d.k(),
            theta_deg: d.mean.theta_deg(),
            phi_deg: d.mean.phi_deg(),
            std_theta_deg: s[0],
            std_phi_deg: s[1],
            recommendation: recommendation.map(|r| r.to_string()).unwrap_or_default(),
            wall_ms,
        }
    }
}

pub fn write_reports_csv<W: Write>(rows: &[PredictionReport], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_reports_json<W: Write>(rows: &[PredictionReport], w: W) -> Result<()> {
    serde_json::to_writer_pretty(w, rows).map_err(|e| Error::Io(e.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn o(t: f64, p: f64) -> PlaneOrientation {
        PlaneOrientation::from_canonical(t, p)
    }

    #[test]
    fn two_sample_by_hand() {
        let a = circular_aggregate(&[o(0.1, 0.0), o(0.3, 0.0)]).unwrap();
        assert!((a.mean.theta - 0.2).abs() < 1e-15);
        assert!((a.variance[0] - 0.01).abs() < 1e-15);
        assert_eq!(a.variance[1], 0.0);
    }

    #[test]
    fn wrap_pair_unwraps() {
        let a = circular_aggregate(&[o(FRAC_PI_2 - 0.01, 0.2), o(-FRAC_PI_2 + 0.01, 0.2)]).unwrap();
        assert!((a.variance[0] - 1e-4).abs() < 1e-12, "{:?}", a.variance);
        assert!((a.mean.theta.abs() - FRAC_PI_2).abs() < 1e-12);
        assert!(!a.high_dispersion);
    }

    #[test]
    fn constant_samples_have_zero_variance() {
        let a = circular_aggregate(&[o(0.4, -0.9); 7]).unwrap();
        assert_eq!(a.variance, [0.0, 0.0]);
        assert_eq!(a.mean, o(0.4, -0.9));
    }

    #[test]
    fn strategy_names_parse() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("bogus".parse::<Strategy>().is_err());
    }
}
