use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropBlockSpec {
    pub block: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Optional DropBlock on the input, then convolution ("same" padding, no
/// bias), batch norm, ReLU and an optional max pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvStage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropblock: Option<DropBlockSpec>,
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadLayer {
    Dense { out: usize, relu: bool },
    Dropout { rate: f64 },
}

/// Layer stack of the orientation regressor. The flattened encoder output
/// is concatenated with the 3 location coordinates before the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_side: usize,
    pub stages: Vec<ConvStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_dropblock: Option<DropBlockSpec>,
    pub head: Vec<HeadLayer>,
}

pub const LOCATION_FEATURES: usize = 3;
pub const OUTPUTS: usize = 2;

pub fn conv_out(side: usize, kernel: usize, stride: usize) -> usize {
    (side + 2 * (kernel / 2) - kernel) / stride + 1
}

pub fn pool_out(side: usize, p: &PoolSpec) -> usize {
    (side + 2 * p.padding - p.size) / p.stride + 1
}

fn db(rate: f64) -> Option<DropBlockSpec> {
    Some(DropBlockSpec { block: 3, rate })
}

impl NetworkConfig {
    /// The full-width network: four conv stages of 32/64/128/256 channels
    /// and a 1024/1024/256 head.
    pub fn reference() -> Self {
        Self::with_widths([32, 64, 128, 256], [1024, 1024, 256])
    }

    /// Narrow variant sized for CPU-only phantom studies.
    pub fn study() -> Self {
        Self::with_widths([4, 8, 16, 32], [256, 256, 64])
    }

    /// Same topology, kernels and drop rates as [`Self::reference`] with
    /// custom channel and hidden widths.
    pub fn with_widths(conv: [usize; 4], fc: [usize; 3]) -> Self {
        Self {
            input_side: 64,
            stages: vec![
                ConvStage {
                    dropblock: db(0.2),
                    kernel: 7,
                    out_channels: conv[0],
                    stride: 1,
                    pool: None,
                },
                ConvStage {
                    dropblock: db(0.2),
                    kernel: 3,
                    out_channels: conv[1],
                    stride: 2,
                    pool: Some(PoolSpec {
                        size: 3,
                        stride: 2,
                        padding: 1,
                    }),
                },
                ConvStage {
                    dropblock: db(0.15),
                    kernel: 3,
                    out_channels: conv[2],
                    stride: 2,
                    pool: Some(PoolSpec {
                        size: 3,
                        stride: 1,
                        padding: 0,
                    }),
                },
                ConvStage {
                    dropblock: db(0.1),
                    kernel: 3,
                    out_channels: conv[3],
                    stride: 2,
                    pool: None,
                },
            ],
            final_dropblock: db(0.1),
            head: vec![
                HeadLayer::Dense {
                    out: fc[0],
                    relu: true,
                },
                HeadLayer::Dropout { rate: 0.35 },
                HeadLayer::Dense {
                    out: fc[1],
                    relu: true,
                },
                HeadLayer::Dropout { rate: 0.2 },
                HeadLayer::Dense {
                    out: fc[2],
                    relu: true,
                },
                HeadLayer::Dense {
                    out: OUTPUTS,
                    relu: false,
                },
            ],
        }
    }

    /// A tiny 8^3-input network with every layer kind, for tests.
    pub fn miniature() -> Self {
        Self {
            input_side: 8,
            stages: vec![
                ConvStage {
                    dropblock: db(0.2),
                    kernel: 3,
                    out_channels: 3,
                    stride: 1,
                    pool: None,
                },
                ConvStage {
                    dropblock: db(0.15),
                    kernel: 3,
                    out_channels: 4,
                    stride: 2,
                    pool: Some(PoolSpec {
                        size: 3,
                        stride: 2,
                        padding: 1,
                    }),
                },
            ],
            final_dropblock: Some(DropBlockSpec {
                block: 1,
                rate: 0.1,
            }),
            head: vec![
                HeadLayer::Dense { out: 8, relu: true },
                HeadLayer::Dropout { rate: 0.2 },
                HeadLayer::Dense {
                    out: OUTPUTS,
                    relu: false,
                },
            ],
        }
    }

    /// Every DropBlock and Dropout rate set to zero.
    pub fn without_dropout(mut self) -> Self {
        for s in &mut self.stages {
            if let Some(d) = &mut s.dropblock {
                d.rate = 0.0;
            }
        }
        if let Some(d) = &mut self.final_dropblock {
            d.rate = 0.0;
        }
        for h in &mut self.head {
            if let HeadLayer::Dropout { rate } = h {
                *rate = 0.0;
            }
        }
        self
    }

    /// `(channels, side)` entering each stage, plus the encoder output.
    pub fn stage_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(1, self.input_side)];
        let mut side = self.input_side;
        for s in &self.stages {
            side = conv_out(side, s.kernel, s.stride);
            if let Some(p) = &s.pool {
                side = pool_out(side, p);
            }
            shapes.push((s.out_channels, side));
        }
        shapes
    }

    /// Conv output side of stage `i` (before pooling).
    pub fn conv_side(&self, i: usize) -> usize {
        let (_, side) = self.stage_shapes()[i];
        conv_out(side, self.stages[i].kernel, self.stages[i].stride)
    }

    /// Length of the flattened encoder output.
    pub fn encoder_len(&self) -> usize {
        let (c, s) = *self.stage_shapes().last().unwrap();
        c * s * s * s
    }

    /// Input width of the first dense layer (encoder output plus location).
    pub fn feature_len(&self) -> usize {
        self.encoder_len() + LOCATION_FEATURES
    }

    /// `(in, out, relu)` for every dense layer in order.
    pub fn dense_shapes(&self) -> Vec<(usize, usize, bool)> {
        let mut width = self.feature_len();
        let mut out = Vec::new();
        for h in &self.head {
            if let HeadLayer::Dense { out: o, relu } = *h {
                out.push((width, o, relu));
                width = o;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config(
                "network needs at least one conv stage".into(),
            ));
        }
        let check_db = |d: &Option<DropBlockSpec>, side: usize| -> Result<()> {
            if let Some(d) = d {
                if d.block % 2 == 0 || d.block == 0 {
                    return Err(Error::Config("dropblock size must be odd".into()));
                }
                if d.block > side {
                    return Err(Error::Config(format!(
                        "dropblock {} larger than feature side {side}",
                        d.block
                    )));
                }
                if !(0.0..1.0).contains(&d.rate) {
                    return Err(Error::Config(format!(
                        "drop rate {} outside [0, 1)",
                        d.rate
                    )));
                }
            }
            Ok(())
        };
        let mut side = self.input_side;
        for (i, s) in self.stages.iter().enumerate() {
            check_db(&s.dropblock, side)?;
            if s.kernel % 2 == 0 || s.stride == 0 || s.out_channels == 0 {
                return Err(Error::Config(format!(
                    "stage {i}: odd kernel, stride >= 1 and channels >= 1 required"
                )));
            }
            if s.kernel > side + 2 * (s.kernel / 2) {
                return Err(Error::Config(format!(
                    "stage {i}: kernel larger than input"
                )));
            }
            side = conv_out(side, s.kernel, s.stride);
            if let Some(p) = &s.pool {
                if p.size == 0
                    || p.stride == 0
                    || p.size > side + 2 * p.padding
                    || 2 * p.padding >= p.size
                {
                    return Err(Error::Config(format!("stage {i}: invalid pooling")));
                }
                side = pool_out(side, p);
            }
        }
        check_db(&self.final_dropblock, side)?;
        let dense = self.dense_shapes();
        match dense.last() {
            Some(&(_, OUTPUTS, false)) => {}
            _ => {
                return Err(Error::Config(
                    "head must end with a linear dense layer of width 2".into(),
                ))
            }
        }
        for h in &self.head {
            if let HeadLayer::Dropout { rate } = h {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
                }
            }
            if let HeadLayer::Dense { out: 0, .. } = h {
                return Err(Error::Config("dense width must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_shapes() {
        let c = NetworkConfig::reference();
        c.validate().unwrap();
        let sides: Vec<usize> = c.stage_shapes().iter().map(|s| s.1).collect();
        assert_eq!(sides, vec![64, 64, 16, 6, 3]);
        assert_eq!(c.conv_side(1), 32);
        assert_eq!(c.conv_side(2), 8);
        assert_eq!(c.feature_len(), 256 * 27 + 3);
        assert_eq!(c.feature_len(), 6915);
        let d = c.dense_shapes();
        assert_eq!(d[0], (6915, 1024, true));
        assert_eq!(d.last().copied(), Some((256, 2, false)));
    }

    #[test]
    fn rejects_even_kernel() {
        let mut c = NetworkConfig::reference();
        c.stages[1].kernel = 4;
        assert!(c.validate().is_err());
    }
}
