//! Agreement statistics and evaluation tables.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{acute_angle_diff, PlaneOrientation, Vec3};
use crate::phantom::Landmark;
use crate::uncertainty::unwrap_near;

/// Coverage factor of the 95% limits of agreement.
pub const LOA_FACTOR: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub sigma: f64,
    /// `LOA_FACTOR * sigma`; the limits are `+-loa` around zero bias.
    pub loa: f64,
}

impl Agreement {
    fn from_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            loa: LOA_FACTOR * sigma,
        }
    }
}

fn check_grid<T>(grid: &[Vec<T>]) -> Result<usize> {
    let m = grid.len();
    let n = grid.first().map_or(0, |r| r.len());
    if m < 2 || n < 2 {
        return Err(Error::invalid(format!(
            "agreement needs at least 2 measurements and 2 operators, got {m}x{n}"
        )));
    }
    if grid.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("ragged measurement grid"));
    }
    Ok(n)
}

/// Multi-operator limits of agreement. `grid[j][i]` is operator `i`'s
/// value for measurement `j`. Each value is taken relative to the
/// per-measurement mean across operators; `sigma^2` averages the
/// per-operator sample variances of these deviations with divisor `n - 1`.
pub fn jones_loa(grid: &[Vec<f64>]) -> Result<Agreement> {
    let n = check_grid(grid)?;
    let m = grid.len();
    let dev: Vec<Vec<f64>> = grid
        .iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / n as f64;
            row.iter().map(|x| x - mean).collect()
        })
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        let mean = dev.iter().map(|r| r[i]).sum::<f64>() / m as f64;
        total += dev.iter().map(|r| (r[i] - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    }
    Ok(Agreement::from_sigma((total / (n - 1) as f64).sqrt()))
}

/// [`jones_loa`] for angles defined modulo `period`; each row is unwrapped
/// against its first entry first.
pub fn jones_loa_periodic(grid: &[Vec<f64>], period: f64) -> Result<Agreement> {
    check_grid(grid)?;
    let unwrapped: Vec<Vec<f64>> = grid
        .iter()
        .map(|row| {
            let r = row[0];
            row.iter()
                .map(|&x| r + unwrap_near((x - r) * PI / period, 0.0) * period / PI)
                .collect()
        })
        .collect();
    jones_loa(&unwrapped)
}

/// Positional agreement: the root mean square of the per-coordinate sigmas.
pub fn position_loa(grid: &[Vec<Vec3>]) -> Result<Agreement> {
    check_grid(grid)?;
    let mut sum_sq = 0.0;
    for c in 0..3 {
        let g: Vec<Vec<f64>> = grid
            .iter()
            .map(|r| r.iter().map(|p| p[c]).collect())
            .collect();
        sum_sq += jones_loa(&g)?.sigma.powi(2);
    }
    Ok(Agreement::from_sigma((sum_sq / 3.0).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub bias: f64,
    /// Sample standard deviation of the differences.
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn bland_altman(a: &[f64], b: &[f64]) -> Result<BlandAltman> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(
            "Bland-Altman needs two equal series of length >= 2",
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let bias = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - bias).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(BlandAltman {
        bias,
        sd,
        lower: bias - LOA_FACTOR * sd,
        upper: bias + LOA_FACTOR * sd,
    })
}

/// Mean acute angular error per angle, in degrees.
pub fn circular_mae(preds: &[PlaneOrientation], refs: &[PlaneOrientation]) -> Result<(f64, f64)> {
    if preds.len() != refs.len() || preds.is_empty() {
        return Err(Error::invalid(format!(
            "prediction and reference counts differ or are zero ({} vs {})",
            preds.len(),
            refs.len()
        )));
    }
    let n = preds.len() as f64;
    let (mut t, mut p) = (0.0, 0.0);
    for (a, b) in preds.iter().zip(refs) {
        t += acute_angle_diff(a.theta, b.theta);
        p += acute_angle_diff(a.phi, b.phi);
    }
    Ok(((t / n).to_degrees(), (p / n).to_degrees()))
}

/// [`circular_mae`] averaged over several reference sets.
pub fn circular_mae_multi(
    preds: &[PlaneOrientation],
    refs: &[Vec<PlaneOrientation>],
) -> Result<(f64, f64)> {
    if refs.is_empty() {
        return Err(Error::invalid("no reference sets"));
    }
    let (mut t, mut p) = (0.0, 0.0);
    for r in refs {
        let (a, b) = circular_mae(preds, r)?;
        t += a;
        p += b;
    }
    let n = refs.len() as f64;
    Ok((t / n, p / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "manual-sim")]
    Manual,
    #[serde(rename = "centerline-baseline")]
    Centerline,
    NoUQ,
    INS,
    MCDS,
    MCDbS,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Manual,
        Method::Centerline,
        Method::NoUQ,
        Method::INS,
        Method::MCDS,
        Method::MCDbS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Manual => "manual-sim",
            Method::Centerline => "centerline-baseline",
            Method::NoUQ => "NoUQ",
            Method::INS => "INS",
            Method::MCDS => "MCDS",
            Method::MCDbS => "MCDbS",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One orientation measured by `method` for `operator` on a landmark of a
/// case. `pivot` is set when the method also places the point.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub case: String,
    pub landmark: Landmark,
    pub operator: u32,
    pub pivot: Option<Vec3>,
    pub orientation: PlaneOrientation,
}

/// Complete grids: measurements missing any operator are dropped.
fn grids<'a>(rows: impl Iterator<Item = &'a Measurement>) -> Vec<Vec<&'a Measurement>> {
    let rows: Vec<&Measurement> = rows.collect();
    let ops: BTreeSet<u32> = rows.iter().map(|r| r.operator).collect();
    let mut by_key: BTreeMap<(&str, usize), BTreeMap<u32, &Measurement>> = BTreeMap::new();
    for r in rows {
        by_key
            .entry((r.case.as_str(), r.landmark.index()))
            .or_default()
            .insert(r.operator, r);
    }
    by_key
        .into_values()
        .filter(|m| m.len() == ops.len())
        .map(|m| m.into_values().collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    /// `None` for the pooled "All" row.
    pub landmark: Option<Landmark>,
    pub method: Method,
    pub loa_pos_mm: Option<f64>,
    pub loa_theta_deg: Option<f64>,
    pub loa_phi_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeRow {
    pub landmark: Option<Landmark>,
    pub method: Method,
    pub theta_mae_deg: Option<f64>,
    pub phi_mae_deg: Option<f64>,
}

fn agreement_of(
    method: Method,
    landmark: Option<Landmark>,
    grid: &[Vec<&Measurement>],
) -> AgreementRow {
    let mut row = AgreementRow {
        landmark,
        method,
        loa_pos_mm: None,
        loa_theta_deg: None,
        loa_phi_deg: None,
    };
    if grid.len() < 2 || grid[0].len() < 2 {
        return row;
    }
    let angle = |f: fn(&PlaneOrientation) -> f64| -> Option<f64> {
        let g: Vec<Vec<f64>> = grid
            .iter()
            .map(|r| r.iter().map(|m| f(&m.orientation)).collect())
            .collect();
        jones_loa_periodic(&g, PI).ok().map(|a| a.loa.to_degrees())
    };
    row.loa_theta_deg = angle(|o| o.theta);
    row.loa_phi_deg = angle(|o| o.phi);
    if grid.iter().flatten().all(|m| m.pivot.is_some()) {
        let g: Vec<Vec<Vec3>> = grid
            .iter()
            .map(|r| r.iter().map(|m| m.pivot.unwrap()).collect())
            .collect();
        row.loa_pos_mm = position_loa(&g).ok().map(|a| a.loa);
    }
    row
}

/// Per-landmark agreement rows followed by the pooled "All" row.
/// Landmarks without a complete grid are N/A and do not enter "All".
pub fn agreement_table(method: Method, rows: &[Measurement]) -> Vec<AgreementRow> {
    let mut out = Vec::new();
    let mut pooled = Vec::new();
    for lm in Landmark::ALL {
        let g = grids(rows.iter().filter(|r| r.landmark == lm));
        let row = agreement_of(method, Some(lm), &g);
        if row.loa_theta_deg.is_some() {
            pooled.extend(g);
        }
        out.push(row);
    }
    out.push(agreement_of(method, None, &pooled));
    out
}

/// Per-landmark mean acute error against `truth`, plus the pooled row.
pub fn mae_table(
    method: Method,
    rows: &[Measurement],
    truth: impl Fn(&str, Landmark) -> Option<PlaneOrientation>,
) -> Vec<MaeRow> {
    let mut out = Vec::new();
    let (mut all_p, mut all_r) = (Vec::new(), Vec::new());
    for lm in Landmark::ALL {
        let (mut p, mut r) = (Vec::new(), Vec::new());
        for m in rows.iter().filter(|m| m.landmark == lm) {
            if let Some(t) = truth(&m.case, lm) {
                p.push(m.orientation);
                r.push(t);
            }
        }
        let mae = circular_mae(&p, &r).ok();
        out.push(MaeRow {
            landmark: Some(lm),
            method,
            theta_mae_deg: mae.map(|m| m.0),
            phi_mae_deg: mae.map(|m| m.1),
        });
        all_p.extend(p);
        all_r.extend(r);
    }
    let mae = circular_mae(&all_p, &all_r).ok();
    out.push(MaeRow {
        landmark: None,
        method,
        theta_mae_deg: mae.map(|m| m.0),
        phi_mae_deg: mae.map(|m| m.1),
    });
    out
}

fn label(l: Option<Landmark>) -> String {
    l.map_or_else(|| "All".to_string(), |l| l.name().to_string())
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |x| format!("{x:.4}"))
}

pub const AGREEMENT_HEADER: [&str; 5] = [
    "landmark",
    "method",
    "loa_pos_mm",
    "loa_theta_deg",
    "loa_phi_deg",
];
pub const MAE_HEADER: [&str; 4] = ["landmark", "method", "theta_mae_deg", "phi_mae_deg"];

pub fn write_agreement_csv<W: Write>(rows: &[AgreementRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(AGREEMENT_HEADER)?;
    for r in rows {
        wr.write_record([
            label(r.landmark),
            r.method.to_string(),
            cell(r.loa_pos_mm),
            cell(r.loa_theta_deg),
            cell(r.loa_phi_deg),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_mae_csv<W: Write>(rows: &[MaeRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(MAE_HEADER)?;
    for r in rows {
        wr.write_record([
            label(r.landmark),
            r.method.to_string(),
            cell(r.theta_mae_deg),
            cell(r.phi_mae_deg),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Fixed-width text rendering of an agreement table.
pub fn format_agreement(rows: &[AgreementRow]) -> String {
    let mut s = format!(
        "{:<9} {:<20} {:>12} {:>14} {:>12}\n",
        "landmark", "method", "LOA pos mm", "LOA theta deg", "LOA phi deg"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<9} {:<20} {:>12} {:>14} {:>12}",
            label(r.landmark),
            r.method.name(),
            cell(r.loa_pos_mm),
            cell(r.loa_theta_deg),
            cell(r.loa_phi_deg)
        );
    }
    s
}

pub fn format_mae(rows: &[MaeRow]) -> String {
    let mut s = format!(
        "{:<9} {:<20} {:>14} {:>12}\n",
        "landmark", "method", "theta MAE deg", "phi MAE deg"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<9} {:<20} {:>14} {:>12}",
            label(r.landmark),
            r.method.name(),
            cell(r.theta_mae_deg),
            cell(r.phi_mae_deg)
        );
    }
    s
}
