//! One prediction request as served by both `xsect predict` and the HTTP
//! service.

use std::time::Instant;

use anyhow::Result;
use xsect_core::network::NetworkParams;
use xsect_core::uncertainty::{
    predict, predict_ins, predict_mcdbs, recommend, PredictionDistribution, PredictionReport,
    Recommendation, Strategy, INS_RADIUS_MM,
};
use xsect_core::{Vec3, Volume};

#[derive(Debug, Clone)]
pub struct Prediction {
    pub distribution: PredictionDistribution,
    /// Present whenever `k >= 2`; built from INS and MCDbS at the same k.
    pub recommendation: Option<Recommendation>,
    /// Wall-clock time of the requested strategy alone.
    pub wall_ms: f64,
}

impl Prediction {
    pub fn report(&self) -> PredictionReport {
        PredictionReport::new(
            &self.distribution,
            self.recommendation.as_ref(),
            self.wall_ms,
        )
    }
}

/// Runs `strategy` with `k` draws. `k = 1` forces a single deterministic
/// pass. For `k >= 2` the other of INS and MCDbS is also computed so that a
/// strategy can be recommended.
pub fn run(
    params: &NetworkParams<f32>,
    volume: &Volume,
    pivot: &Vec3,
    strategy: Strategy,
    k: usize,
    seed: u64,
) -> Result<Prediction> {
    let t = Instant::now();
    let distribution = predict(params, volume, pivot, strategy, k, seed)?;
    let wall_ms = t.elapsed().as_secs_f64() * 1e3;
    let recommendation = if k >= 2 {
        let ins = match distribution.strategy {
            Strategy::Ins => distribution.clone(),
            _ => predict_ins(params, volume, pivot, k, INS_RADIUS_MM, seed)?,
        };
        let mcdbs = match distribution.strategy {
            Strategy::Mcdbs => distribution.clone(),
            _ => predict_mcdbs(params, volume, pivot, k, seed)?,
        };
        Some(recommend(&ins, &mcdbs)?)
    } else {
        None
    };
    Ok(Prediction {
        distribution,
        recommendation,
        wall_ms,
    })
}
