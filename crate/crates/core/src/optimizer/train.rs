use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{circular_huber, loss_and_grad, Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::geometry::{acute_angle_diff, disc_sample, Plane};
use crate::network::{decode_output, ForwardMode, NetworkConfig, NetworkParams};
use crate::rng::{stream, StreamRng};
use crate::volume::{extract_patch, Volume};

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_AUGMENT: u64 = 3;
const TAG_MASKS: u64 = 4;
const TAG_BN: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Rate of the first epoch.
    pub learning_rate: f64,
    /// Per-epoch multiplier of the learning rate; 1 keeps it constant.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub augmentation_radius_mm: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Training samples used to re-estimate the frozen BN statistics after
    /// every epoch; 0 keeps the momentum estimates gathered with masks
    /// active for every mode.
    pub bn_recalibration_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 0.002,
            lr_decay: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            delta: 1.0,
            augmentation_radius_mm: 1.53,
            patience: 10,
            min_delta: 1e-4,
            max_epochs: 60,
            seed: 0,
            bn_recalibration_samples: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size >= 1
            && self.learning_rate > 0.0
            && self.lr_decay > 0.0
            && self.lr_decay <= 1.0
            && self.delta > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.augmentation_radius_mm >= 0.0
            && self.min_delta >= 0.0
            && self.max_epochs >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid training configuration {self:?}"
            )))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// One network input with its location and target angles in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f32>,
    pub location: [f64; 3],
    pub target: [f64; 2],
}

pub trait TrainingData {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample `i`, augmented within `radius` mm using `rng`.
    fn example(&self, i: usize, radius: f64, rng: &mut StreamRng) -> Result<Example>;
}

/// Pre-built examples; augmentation does not apply.
impl TrainingData for [Example] {
    fn len(&self) -> usize {
        <[Example]>::len(self)
    }

    fn example(&self, i: usize, _radius: f64, _rng: &mut StreamRng) -> Result<Example> {
        Ok(self[i].clone())
    }
}

/// Annotated planes in volumes. Each draw re-samples the pivot on a disc
/// in the annotated plane and re-extracts the patch.
#[derive(Debug, Clone, Default)]
pub struct PlaneSamples<'a> {
    pub items: Vec<(&'a Volume, Plane)>,
}

impl TrainingData for PlaneSamples<'_> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn example(&self, i: usize, radius: f64, rng: &mut StreamRng) -> Result<Example> {
        let (volume, plane) = &self.items[i];
        let pivot = disc_sample(plane, radius, rng);
        Ok(Example {
            input: extract_patch(volume, &pivot).values,
            location: volume.normalized_location(&pivot),
            target: [plane.orientation.theta, plane.orientation.phi],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_theta_mae_deg: f64,
    pub val_phi_mae_deg: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,val_theta_mae_deg,val_phi_mae_deg";

pub fn write_log<W: Write>(log: &[EpochLog], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for e in log {
        wr.serialize(e)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub params: NetworkParams<f32>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn evaluate(params: &NetworkParams<f32>, val: &[Example], delta: f64) -> Result<(f64, f64, f64)> {
    let mut rng = stream(0, &[]);
    let (mut loss, mut t_mae, mut p_mae) = (0.0, 0.0, 0.0);
    for (i, ex) in val.iter().enumerate() {
        let raw = params.forward(&ex.input, ex.location, ForwardMode::Deterministic, &mut rng)?;
        let o = decode_output(raw);
        let l = circular_huber(o.theta, ex.target[0], delta)
            + circular_huber(o.phi, ex.target[1], delta);
        if !l.is_finite() {
            return Err(Error::NumericalFailure {
                sample: i,
                message: "non-finite validation loss".into(),
            });
        }
        loss += l;
        t_mae += acute_angle_diff(o.theta, ex.target[0]);
        p_mae += acute_angle_diff(o.phi, ex.target[1]);
    }
    let n = val.len() as f64;
    Ok((
        loss / (2.0 * n),
        t_mae.to_degrees() / n,
        p_mae.to_degrees() / n,
    ))
}

/// Re-estimates both sets of frozen BN statistics from evenly spaced,
/// un-augmented training samples: the running set from mask-free passes,
/// the masked set from passes with DropBlock active. Momentum estimates
/// mix parameters from across the epoch and, with DropBlock ahead of BN,
/// carry the masks' variance into deterministic inference.
fn recalibrate_bn<A: TrainingData + ?Sized>(
    params: &mut NetworkParams<f32>,
    train_set: &A,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = cfg.bn_recalibration_samples.min(train_set.len());
    if n == 0 {
        return Ok(());
    }
    let mut plain = params.clone();
    plain.config = plain.config.without_dropout();
    let picks: Vec<usize> = (0..n).map(|j| j * train_set.len() / n).collect();
    let (mut running, mut masked) = (Vec::new(), Vec::new());
    for chunk in picks.chunks(cfg.batch_size) {
        let examples: Vec<Example> = chunk
            .iter()
            .map(|&i| train_set.example(i, 0.0, &mut stream(cfg.seed, &[TAG_BN, i as u64])))
            .collect::<Result<_>>()?;
        let inputs: Vec<&[f32]> = examples.iter().map(|x| x.input.as_slice()).collect();
        let locations: Vec<[f64; 3]> = examples.iter().map(|x| x.location).collect();
        for (net, out, tag) in [(&plain, &mut running, 0), (&*params, &mut masked, 1)] {
            let mut streams: Vec<StreamRng> = chunk
                .iter()
                .map(|&i| stream(cfg.seed, &[TAG_BN, i as u64, tag]))
                .collect();
            let mut rngs: Vec<&mut StreamRng> = streams.iter_mut().collect();
            out.push(
                net.train_forward(&inputs, &locations, &mut rngs)?
                    .batch_stats(),
            );
        }
    }
    params.set_running_stats(&running)?;
    params.set_masked_stats(&masked)
}

fn validation_examples<B: TrainingData + ?Sized>(val_set: &B, seed: u64) -> Result<Vec<Example>> {
    (0..val_set.len())
        .map(|i| val_set.example(i, 0.0, &mut stream(seed, &[])))
        .collect()
}

/// Un-augmented validation loss and per-angle mean absolute error in
/// degrees, exactly as logged during training.
pub fn validation_metrics<B: TrainingData + ?Sized>(
    params: &NetworkParams<f32>,
    val_set: &B,
    delta: f64,
) -> Result<(f64, f64, f64)> {
    if val_set.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    evaluate(params, &validation_examples(val_set, 0)?, delta)
}

pub fn train<A, B>(
    net: &NetworkConfig,
    cfg: &TrainConfig,
    train_set: &A,
    val_set: &B,
) -> Result<TrainOutcome>
where
    A: TrainingData + ?Sized,
    B: TrainingData + ?Sized,
{
    train_with(net, cfg, train_set, val_set, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<A, B>(
    net: &NetworkConfig,
    cfg: &TrainConfig,
    train_set: &A,
    val_set: &B,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome>
where
    A: TrainingData + ?Sized,
    B: TrainingData + ?Sized,
{
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid(
            "training and validation splits must be nonempty",
        ));
    }
    let seed = cfg.seed;
    let mut params = NetworkParams::<f32>::init(net, &mut stream(seed, &[TAG_INIT]))?;
    let mut adam = Adam::new(cfg.adam(), &params);
    let val = validation_examples(val_set, seed)?;

    let mut log = Vec::new();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let e = epoch as u64;
        adam.config.learning_rate = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32 - 1);
        order.sort_unstable();
        order.shuffle(&mut stream(seed, &[TAG_SHUFFLE, e]));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let examples: Vec<Example> = chunk
                .iter()
                .map(|&i| {
                    train_set.example(
                        i,
                        cfg.augmentation_radius_mm,
                        &mut stream(seed, &[TAG_AUGMENT, e, i as u64]),
                    )
                })
                .collect::<Result<_>>()?;
            let inputs: Vec<&[f32]> = examples.iter().map(|x| x.input.as_slice()).collect();
            let locations: Vec<[f64; 3]> = examples.iter().map(|x| x.location).collect();
            let targets: Vec<[f64; 2]> = examples.iter().map(|x| x.target).collect();
            let mut streams: Vec<StreamRng> = chunk
                .iter()
                .map(|&i| stream(seed, &[TAG_MASKS, e, i as u64]))
                .collect();
            let mut rngs: Vec<&mut StreamRng> = streams.iter_mut().collect();
            let (loss, grads, stats) =
                loss_and_grad(&params, &inputs, &locations, &targets, cfg.delta, &mut rngs)
                    .map_err(|err| match err {
                        Error::NumericalFailure { sample, message } => Error::NumericalFailure {
                            sample: chunk[sample],
                            message: format!("epoch {epoch}: {message}"),
                        },
                        other => other,
                    })?;
            params.update_running_stats(&stats);
            adam.step(&mut params, &grads);
            loss_sum += loss.total * chunk.len() as f64;
        }
        recalibrate_bn(&mut params, train_set, cfg)?;
        let (val_loss, theta_mae, phi_mae) = evaluate(&params, &val, cfg.delta)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_loss,
            val_theta_mae_deg: theta_mae,
            val_phi_mae_deg: phi_mae,
        };
        on_epoch(&entry);
        log.push(entry);
        if val_loss < best.0 - cfg.min_delta {
            best = (val_loss, epoch, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.2,
        log,
        best_epoch: best.1,
        stopped_early,
    })
}
