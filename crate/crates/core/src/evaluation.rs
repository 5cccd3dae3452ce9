//! Runs every method over annotated phantom cases and tabulates agreement
//! and error against the ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::network::NetworkParams;
use crate::phantom::dataset::PhantomCase;
use crate::phantom::{centerline_orientation_at, Landmark};
use crate::rng::derive;
use crate::stats::{agreement_table, mae_table, AgreementRow, MaeRow, Measurement, Method};
use crate::uncertainty::{
    predict_ins, predict_mcdbs, predict_mcds, predict_nouq, recommend, PredictionDistribution,
    Recommendation,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    /// Draws per sampling strategy.
    pub k: usize,
    pub seed: u64,
    pub ins_radius_mm: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            k: 10,
            seed: 0,
            ins_radius_mm: crate::uncertainty::INS_RADIUS_MM,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub measurements: BTreeMap<Method, Vec<Measurement>>,
    /// Mean per-angle standard deviation (degrees) of each sampling method.
    pub mean_std_deg: BTreeMap<Method, [f64; 2]>,
    pub recommendations: Vec<(String, Landmark, u32, Recommendation)>,
    pub agreement: Vec<AgreementRow>,
    pub mae: Vec<MaeRow>,
}

impl Evaluation {
    pub fn agreement_all(&self, method: Method) -> Option<&AgreementRow> {
        self.agreement
            .iter()
            .find(|r| r.method == method && r.landmark.is_none())
    }

    pub fn mae_all(&self, method: Method) -> Option<&MaeRow> {
        self.mae
            .iter()
            .find(|r| r.method == method && r.landmark.is_none())
    }
}

fn measurement(
    case: &PhantomCase,
    lm: Landmark,
    op: u32,
    o: crate::PlaneOrientation,
) -> Measurement {
    Measurement {
        case: case.id.clone(),
        landmark: lm,
        operator: op,
        pivot: None,
        orientation: o,
    }
}

/// Evaluates manual annotations, the centerline baseline and all four
/// network strategies at every operator's pivot. The centerline does not
/// reach the annulus, so it yields no `Ann` measurements.
pub fn evaluate(
    params: &NetworkParams<f32>,
    cases: &[PhantomCase],
    cfg: &EvaluationConfig,
) -> Result<Evaluation> {
    let mut ms: BTreeMap<Method, Vec<Measurement>> =
        Method::ALL.iter().map(|&m| (m, Vec::new())).collect();
    let mut std_sum: BTreeMap<Method, ([f64; 2], usize)> = BTreeMap::new();
    let mut recommendations = Vec::new();
    let mut push_dist = |ms: &mut BTreeMap<Method, Vec<Measurement>>,
                         m: Method,
                         x: Measurement,
                         d: &PredictionDistribution| {
        let s = d.std_deg();
        let e = std_sum.entry(m).or_insert(([0.0; 2], 0));
        e.0[0] += s[0];
        e.0[1] += s[1];
        e.1 += 1;
        ms.get_mut(&m).unwrap().push(x);
    };
    for (ci, case) in cases.iter().enumerate() {
        for a in &case.annotations {
            let (lm, op) = (a.landmark, a.operator);
            let mut manual = measurement(case, lm, op, a.orientation);
            manual.pivot = Some(a.pivot);
            ms.get_mut(&Method::Manual).unwrap().push(manual);
            if lm != Landmark::Ann {
                let o = centerline_orientation_at(&case.truth.centerline, &a.pivot)?;
                ms.get_mut(&Method::Centerline)
                    .unwrap()
                    .push(measurement(case, lm, op, o));
            }
            if !case.volume.contains(&a.pivot) {
                continue;
            }
            let seed = derive(cfg.seed, &[ci as u64, lm.index() as u64, op as u64]);
            let o = predict_nouq(params, &case.volume, &a.pivot)?;
            ms.get_mut(&Method::NoUQ)
                .unwrap()
                .push(measurement(case, lm, op, o));
            let ins = predict_ins(
                params,
                &case.volume,
                &a.pivot,
                cfg.k,
                cfg.ins_radius_mm,
                seed,
            )?;
            push_dist(
                &mut ms,
                Method::INS,
                measurement(case, lm, op, ins.mean),
                &ins,
            );
            let mcds = predict_mcds(params, &case.volume, &a.pivot, cfg.k, seed)?;
            push_dist(
                &mut ms,
                Method::MCDS,
                measurement(case, lm, op, mcds.mean),
                &mcds,
            );
            let mcdbs = predict_mcdbs(params, &case.volume, &a.pivot, cfg.k, seed)?;
            push_dist(
                &mut ms,
                Method::MCDbS,
                measurement(case, lm, op, mcdbs.mean),
                &mcdbs,
            );
            recommendations.push((case.id.clone(), lm, op, recommend(&ins, &mcdbs)?));
        }
    }
    let truth: BTreeMap<(&str, Landmark), crate::PlaneOrientation> = cases
        .iter()
        .flat_map(|c| {
            c.truth
                .landmarks
                .iter()
                .map(move |t| ((c.id.as_str(), t.landmark), t.orientation))
        })
        .collect();
    let mut agreement = Vec::new();
    let mut mae = Vec::new();
    for (&m, rows) in &ms {
        agreement.extend(agreement_table(m, rows));
        mae.extend(mae_table(m, rows, |c, l| truth.get(&(c, l)).copied()));
    }
    let mean_std_deg = std_sum
        .into_iter()
        .map(|(m, (s, n))| (m, [s[0] / n as f64, s[1] / n as f64]))
        .collect();
    Ok(Evaluation {
        measurements: ms,
        mean_std_deg,
        recommendations,
        agreement,
        mae,
    })
}
