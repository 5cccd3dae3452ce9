//! End-to-end phantom study: simulate annotated candy-cane volumes, train
//! on the operators' planes, then evaluate every method on held-out cases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Evaluation, EvaluationConfig};
use crate::geometry::Plane;
use crate::network::NetworkConfig;
use crate::optimizer::{train_with, EpochLog, PlaneSamples, TrainConfig, TrainOutcome};
use crate::phantom::dataset::{generate_case, PhantomCase};
use crate::phantom::{OperatorNoise, PhantomRecipe};
use crate::stats::Method;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub recipe: PhantomRecipe,
    pub noise: OperatorNoise,
    pub operators: u32,
    pub train_cases: usize,
    pub val_cases: usize,
    pub test_cases: usize,
    pub seed: u64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            recipe: PhantomRecipe::study(),
            noise: OperatorNoise::calibrated(),
            operators: 3,
            train_cases: 30,
            val_cases: 6,
            test_cases: 12,
            seed: 0,
            network: NetworkConfig::study(),
            train: TrainConfig {
                max_epochs: 20,
                batch_size: 16,
                lr_decay: 0.9,
                ..TrainConfig::default()
            },
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.operators < 2
            || self.train_cases == 0
            || self.val_cases == 0
            || self.test_cases == 0
        {
            return Err(Error::Config(
                "a study needs at least two operators and nonempty train, validation and test splits".into(),
            ));
        }
        self.noise.validate()?;
        self.network.validate()?;
        self.train.validate()
    }

    fn cases(&self, range: std::ops::Range<usize>) -> Result<Vec<PhantomCase>> {
        range
            .map(|i| generate_case(&self.recipe, &self.noise, self.operators, self.seed, i))
            .collect()
    }

    /// Case indices: training first, then validation, then test.
    pub fn split(&self) -> [std::ops::Range<usize>; 3] {
        let (a, b) = (self.train_cases, self.train_cases + self.val_cases);
        [0..a, a..b, b..b + self.test_cases]
    }
}

/// The three quantities the phantom study is judged on, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub nouq_mae_deg: [f64; 2],
    pub nouq_loa_deg: [f64; 2],
    pub manual_loa_deg: [f64; 2],
    pub mcdbs_mean_std_deg: [f64; 2],
    pub noise_sigma_deg: [f64; 2],
}

impl StudySummary {
    pub fn from_evaluation(ev: &Evaluation, noise: &OperatorNoise) -> Result<Self> {
        let missing = |what: &str| Error::Config(format!("study evaluation has no {what}"));
        let mae = ev
            .mae_all(Method::NoUQ)
            .ok_or_else(|| missing("NoUQ MAE"))?;
        let loa = |m: Method| -> Result<[f64; 2]> {
            let r = ev
                .agreement_all(m)
                .ok_or_else(|| missing("agreement row"))?;
            Ok([
                r.loa_theta_deg.ok_or_else(|| missing("theta LOA"))?,
                r.loa_phi_deg.ok_or_else(|| missing("phi LOA"))?,
            ])
        };
        Ok(Self {
            nouq_mae_deg: [
                mae.theta_mae_deg.ok_or_else(|| missing("theta MAE"))?,
                mae.phi_mae_deg.ok_or_else(|| missing("phi MAE"))?,
            ],
            nouq_loa_deg: loa(Method::NoUQ)?,
            manual_loa_deg: loa(Method::Manual)?,
            mcdbs_mean_std_deg: *ev
                .mean_std_deg
                .get(&Method::MCDbS)
                .ok_or_else(|| missing("MCDbS spread"))?,
            noise_sigma_deg: [noise.theta_sigma_deg, noise.phi_sigma_deg],
        })
    }

    pub fn mae_below_noise(&self) -> bool {
        (0..2).all(|i| self.nouq_mae_deg[i] < self.noise_sigma_deg[i])
    }

    pub fn loa_below_manual(&self) -> bool {
        (0..2).all(|i| self.nouq_loa_deg[i] < self.manual_loa_deg[i])
    }

    pub fn phi_spread_exceeds_theta(&self) -> bool {
        self.mcdbs_mean_std_deg[1] > self.mcdbs_mean_std_deg[0]
    }
}

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub training: TrainOutcome,
    pub evaluation: Evaluation,
    pub summary: StudySummary,
    pub test_cases: Vec<PhantomCase>,
}

/// Every operator annotation of every case as a training plane.
pub fn annotated_planes(cases: &[PhantomCase]) -> Result<PlaneSamples<'_>> {
    let mut items = Vec::new();
    for c in cases {
        for a in &c.annotations {
            items.push((&c.volume, Plane::new(a.pivot, a.orientation)?));
        }
    }
    Ok(PlaneSamples { items })
}

pub fn run_study(cfg: &StudyConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<StudyOutcome> {
    cfg.validate()?;
    let [tr, va, te] = cfg.split();
    let training = {
        let train_cases = cfg.cases(tr)?;
        let val_cases = cfg.cases(va)?;
        let train_set = annotated_planes(&train_cases)?;
        let val_set = annotated_planes(&val_cases)?;
        train_with(&cfg.network, &cfg.train, &train_set, &val_set, on_epoch)?
    };
    let test_cases = cfg.cases(te)?;
    let evaluation = evaluate(&training.params, &test_cases, &cfg.evaluation)?;
    let summary = StudySummary::from_evaluation(&evaluation, &cfg.noise)?;
    Ok(StudyOutcome {
        training,
        evaluation,
        summary,
        test_cases,
    })
}
