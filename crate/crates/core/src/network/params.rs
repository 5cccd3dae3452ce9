use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::NetworkConfig;
use super::conv::ConvGeom;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Output-layer weights start this much smaller than He so that initial
/// predictions sit near zero. Under head Dropout, full-scale outputs carry
/// noise comparable to the pi period of the loss and training stalls.
pub const OUTPUT_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    /// Frozen statistics for modes without encoder DropBlock.
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Frozen statistics for modes with encoder DropBlock active.
    pub masked_mean: Vec<T>,
    pub masked_var: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T> {
    /// `[out, in]`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub config: NetworkConfig,
    pub convs: Vec<ConvParams<T>>,
    pub dense: Vec<DenseParams<T>>,
}

/// Gradients aligned with [`NetworkParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

impl NetworkConfig {
    pub fn conv_geoms(&self) -> Vec<ConvGeom> {
        let shapes = self.stage_shapes();
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| ConvGeom {
                cin: shapes[i].0,
                cout: s.out_channels,
                side: shapes[i].1,
                kernel: s.kernel,
                stride: s.stride,
            })
            .collect()
    }
}

impl<T: Scalar> NetworkParams<T> {
    /// He initialization: weights `N(0, 2 / fan_in)`, zero biases, batch
    /// norm scale 1 and shift 0, running statistics (0, 1). The output
    /// layer is further scaled by [`OUTPUT_INIT_SCALE`].
    pub fn init<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut he = |fan_in: usize, n: usize| -> Vec<T> {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            (0..n).map(|_| T::from_f64(d.sample(rng))).collect()
        };
        let convs = config
            .conv_geoms()
            .iter()
            .map(|g| ConvParams {
                weight: he(g.cin * g.kernel.pow(3), g.weight_len()),
                gamma: vec![T::ONE; g.cout],
                beta: vec![T::ZERO; g.cout],
                running_mean: vec![T::ZERO; g.cout],
                running_var: vec![T::ONE; g.cout],
                masked_mean: vec![T::ZERO; g.cout],
                masked_var: vec![T::ONE; g.cout],
            })
            .collect();
        let mut dense: Vec<DenseParams<T>> = config
            .dense_shapes()
            .iter()
            .map(|&(i, o, _)| DenseParams {
                weight: he(i, i * o),
                bias: vec![T::ZERO; o],
            })
            .collect();
        if let Some(out) = dense.last_mut() {
            let s = T::from_f64(OUTPUT_INIT_SCALE);
            out.weight.iter_mut().for_each(|w| *w *= s);
        }
        Ok(Self {
            config: config.clone(),
            convs,
            dense,
        })
    }

    /// All tensors zero (running variance one); a shape-correct placeholder.
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let convs = config
            .conv_geoms()
            .iter()
            .map(|g| ConvParams {
                weight: vec![T::ZERO; g.weight_len()],
                gamma: vec![T::ZERO; g.cout],
                beta: vec![T::ZERO; g.cout],
                running_mean: vec![T::ZERO; g.cout],
                running_var: vec![T::ONE; g.cout],
                masked_mean: vec![T::ZERO; g.cout],
                masked_var: vec![T::ONE; g.cout],
            })
            .collect();
        let dense = config
            .dense_shapes()
            .iter()
            .map(|&(i, o, _)| DenseParams {
                weight: vec![T::ZERO; i * o],
                bias: vec![T::ZERO; o],
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            convs,
            dense,
        })
    }

    /// Trainable tensors in a fixed order, with names.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &c.weight));
            out.push((format!("bn{i}.gamma"), &c.gamma));
            out.push((format!("bn{i}.beta"), &c.beta));
        }
        for (i, d) in self.dense.iter().enumerate() {
            out.push((format!("fc{i}.weight"), &d.weight));
            out.push((format!("fc{i}.bias"), &d.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.gamma);
            out.push(&mut c.beta);
        }
        for d in &mut self.dense {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    /// Non-trainable batch-norm running statistics.
    pub fn buffers(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("bn{i}.running_mean"), &c.running_mean));
            out.push((format!("bn{i}.running_var"), &c.running_var));
            out.push((format!("bn{i}.masked_mean"), &c.masked_mean));
            out.push((format!("bn{i}.masked_var"), &c.masked_var));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.running_mean);
            out.push(&mut c.running_var);
            out.push(&mut c.masked_mean);
            out.push(&mut c.masked_var);
        }
        out
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients {
            tensors: self
                .tensors()
                .iter()
                .map(|(_, t)| vec![T::ZERO; t.len()])
                .collect(),
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .chain(self.buffers().iter())
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Elementwise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        NetworkParams {
            config: self.config.clone(),
            convs: self
                .convs
                .iter()
                .map(|p| ConvParams {
                    weight: c(&p.weight),
                    gamma: c(&p.gamma),
                    beta: c(&p.beta),
                    running_mean: c(&p.running_mean),
                    running_var: c(&p.running_var),
                    masked_mean: c(&p.masked_mean),
                    masked_var: c(&p.masked_var),
                })
                .collect(),
            dense: self
                .dense
                .iter()
                .map(|p| DenseParams {
                    weight: c(&p.weight),
                    bias: c(&p.bias),
                })
                .collect(),
        }
    }

    /// Checks every tensor length against the configuration.
    pub fn check_shapes(&self) -> Result<()> {
        let geoms = self.config.conv_geoms();
        let dense = self.config.dense_shapes();
        if geoms.len() != self.convs.len() || dense.len() != self.dense.len() {
            return Err(Error::invalid("layer count does not match configuration"));
        }
        for (g, p) in geoms.iter().zip(&self.convs) {
            let c = g.cout;
            if p.weight.len() != g.weight_len()
                || [
                    &p.gamma,
                    &p.beta,
                    &p.running_mean,
                    &p.running_var,
                    &p.masked_mean,
                    &p.masked_var,
                ]
                .iter()
                .any(|v| v.len() != c)
            {
                return Err(Error::invalid("conv tensor shape mismatch"));
            }
        }
        for (&(i, o, _), p) in dense.iter().zip(&self.dense) {
            if p.weight.len() != i * o || p.bias.len() != o {
                return Err(Error::invalid("dense tensor shape mismatch"));
            }
        }
        Ok(())
    }
}
