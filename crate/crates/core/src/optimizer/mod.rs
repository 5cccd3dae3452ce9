//! Losses, Adam and the training loop.

mod train;

pub use train::{
    train, train_with, validation_metrics, write_log, EpochLog, Example, PlaneSamples, TrainConfig,
    TrainOutcome, TrainingData, LOG_HEADER,
};

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{acute_angle_diff, wrap_half_pi};
use crate::network::{BatchStats, Gradients, NetworkParams, Scalar};

pub fn huber(x: f64, y: f64, delta: f64) -> f64 {
    let d = (x - y).abs();
    if d < delta {
        0.5 * d * d
    } else {
        delta * d - 0.5 * delta * delta
    }
}

/// Huber loss on the acute difference of two angles in radians.
pub fn circular_huber(a: f64, b: f64, delta: f64) -> f64 {
    huber(acute_angle_diff(a, b), 0.0, delta)
}

/// Derivative of [`circular_huber`] with respect to `a`.
pub fn circular_huber_grad(a: f64, b: f64, delta: f64) -> f64 {
    wrap_half_pi(a - b).clamp(-delta, delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    /// Mean over samples and both angles.
    pub total: f64,
    /// `[theta, phi]` loss of every sample.
    pub components: Vec<[f64; 2]>,
}

/// Loss of raw network outputs against canonical targets in radians.
/// Outputs are rescaled by `pi/2` before the loss. Returns the loss and
/// its gradient with respect to each raw output.
pub fn output_loss<T: Scalar>(
    outputs: &[[T; 2]],
    targets: &[[f64; 2]],
    delta: f64,
) -> Result<(LossValue, Vec<[T; 2]>)> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::invalid(
            "outputs and targets must be nonempty and equal length",
        ));
    }
    let scale = 1.0 / (2 * outputs.len()) as f64;
    let mut components = Vec::with_capacity(outputs.len());
    let mut grads = Vec::with_capacity(outputs.len());
    let mut total = 0.0;
    for (i, (o, t)) in outputs.iter().zip(targets).enumerate() {
        let mut c = [0.0; 2];
        let mut g = [T::ZERO; 2];
        for a in 0..2 {
            let pred = o[a].to_f64() * FRAC_PI_2;
            c[a] = circular_huber(pred, t[a], delta);
            g[a] = T::from_f64(circular_huber_grad(pred, t[a], delta) * FRAC_PI_2 * scale);
        }
        if !(c.iter().all(|v| v.is_finite()) && o.iter().all(|v| v.is_finite())) {
            return Err(Error::NumericalFailure {
                sample: i,
                message: format!(
                    "non-finite loss (output {:?}, target {t:?})",
                    [o[0].to_f64(), o[1].to_f64()]
                ),
            });
        }
        total += c[0] + c[1];
        components.push(c);
        grads.push(g);
    }
    Ok((
        LossValue {
            total: total * scale,
            components,
        },
        grads,
    ))
}

/// One training-mode pass over a batch. `rngs[i]` drives the masks of
/// sample `i`. Also returns the batch-norm statistics of the pass.
pub fn loss_and_grad<T: Scalar, R: Rng + ?Sized>(
    params: &NetworkParams<T>,
    inputs: &[&[T]],
    locations: &[[f64; 3]],
    targets: &[[f64; 2]],
    delta: f64,
    rngs: &mut [&mut R],
) -> Result<(LossValue, Gradients<T>, BatchStats<T>)> {
    let tape = params.train_forward(inputs, locations, rngs)?;
    let (loss, d_out) = output_loss(&tape.outputs, targets, delta)?;
    let stats = tape.batch_stats();
    let grads = params.backward(tape, &d_out)?;
    if !grads.is_finite() {
        return Err(Error::NumericalFailure {
            sample: 0,
            message: "non-finite gradient in batch".into(),
        });
    }
    Ok((loss, grads, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(config: AdamConfig, params: &NetworkParams<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Scalar>(&mut self, params: &mut NetworkParams<T>, grads: &Gradients<T>) {
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = g[i].to_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p[i] = T::from_f64(p[i].to_f64() - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn huber_branches() {
        assert_eq!(huber(0.5, 0.0, 1.0), 0.125);
        assert_eq!(huber(2.0, 0.0, 1.0), 1.5);
        assert_eq!(huber(1.0, 0.0, 1.0), 0.5);
        assert!((huber(1.0 - 1e-12, 0.0, 1.0) - 0.5).abs() < 1e-11);
    }

    #[test]
    fn circular_examples() {
        assert!((circular_huber(0.3, 0.1, 1.0) - 0.02).abs() < 1e-12);
        assert!((circular_huber(FRAC_PI_2 - 0.01, -FRAC_PI_2 + 0.01, 1.0) - 0.0002).abs() < 1e-12);
    }

    #[test]
    fn loss_is_in_radians() {
        // normalized output 1 against target 0 is a quarter turn, in the linear branch
        let (l, g) = output_loss(&[[1.0f64, 0.0]], &[[0.0, 0.0]], 1.0).unwrap();
        let quarter = FRAC_PI_2 - 0.5;
        assert!((l.total - quarter / 2.0).abs() < 1e-12);
        // the derivative of the linear branch is delta, times the pi/2 chain factor over 2N
        assert!(
            (g[0][0] - FRAC_PI_2 / 2.0).abs() < 1e-12 || (g[0][0] + FRAC_PI_2 / 2.0).abs() < 1e-12
        );
        assert_ne!(l.total, huber(1.0, 0.0, 1.0) / 2.0);
    }

    #[test]
    fn loss_ignores_pi_shift_of_targets() {
        let out = [[0.3f64, -0.7], [0.9, 0.1]];
        let t = [[0.2, -1.2], [1.5, 0.0]];
        let (a, _) = output_loss(&out, &t, 1.0).unwrap();
        let t2 = [[0.2 + PI, -1.2 - PI], [1.5, 0.0 + 2.0 * PI]];
        let (b, _) = output_loss(&out, &t2, 1.0).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_reports_sample() {
        let err =
            output_loss(&[[0.0f64, 0.0], [f64::NAN, 0.0]], &[[0.0, 0.0]; 2], 1.0).unwrap_err();
        assert!(matches!(err, Error::NumericalFailure { sample: 1, .. }));
    }
}
