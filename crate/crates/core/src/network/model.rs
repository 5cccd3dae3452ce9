use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{pool_out, HeadLayer, LOCATION_FEATURES, OUTPUTS};
use super::conv;
use super::dropblock::SampleMask;
use super::ops::{bn_relu, invstd, lane_sum, lane_sum2, maxpool, BN_MOMENTUM};
use super::params::{Gradients, NetworkParams};
use super::scalar::{gemm, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ForwardMode {
    /// Batch statistics, DropBlock and Dropout active.
    Train,
    /// Running statistics, no stochastic layers.
    Deterministic,
    /// Only the head's Dropout layers are active.
    StochasticHead,
    /// DropBlock and Dropout active, frozen masked statistics.
    StochasticFull,
}

impl ForwardMode {
    pub fn encoder_stochastic(self) -> bool {
        matches!(self, ForwardMode::Train | ForwardMode::StochasticFull)
    }

    pub fn head_stochastic(self) -> bool {
        !matches!(self, ForwardMode::Deterministic)
    }
}

/// Inverted dropout mask: kept units scaled by `1 / (1 - rate)`.
fn dropout_mask<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<u8> {
    (0..n).map(|_| u8::from(rng.gen::<f64>() >= rate)).collect()
}

fn apply_dropout<T: Scalar>(x: &mut [T], mask: &[u8], rate: f64) {
    let s = T::from_f64(1.0 / (1.0 - rate));
    for (v, &k) in x.iter_mut().zip(mask) {
        *v = if k == 1 { *v * s } else { T::ZERO };
    }
}

impl<T: Scalar> NetworkParams<T> {
    fn check_input(&self, input: &[T]) -> Result<()> {
        let n = self.config.input_side.pow(3);
        if input.len() != n {
            return Err(Error::invalid(format!(
                "input has {} values, expected {n}",
                input.len()
            )));
        }
        Ok(())
    }

    /// Flattened encoder output for one sample. BN uses frozen statistics
    /// in every mode except `Train`, which is handled as a batch of one:
    /// the masked set when DropBlock is active, the running set otherwise.
    pub fn encoder_features<R: Rng + ?Sized>(
        &self,
        input: &[T],
        mode: ForwardMode,
        rng: &mut R,
    ) -> Result<Vec<T>> {
        self.check_input(input)?;
        if mode == ForwardMode::Train {
            let tape = self.train_forward(&[input], &[[0.5; 3]], &mut [rng])?;
            return Ok(tape.features[..self.config.encoder_len()].to_vec());
        }
        let shapes = self.config.stage_shapes();
        let mut x = input.to_vec();
        for ((stage, p), (i, g)) in self
            .config
            .stages
            .iter()
            .zip(&self.convs)
            .zip(self.config.conv_geoms().into_iter().enumerate())
        {
            if let (Some(d), true) = (stage.dropblock, mode.encoder_stochastic()) {
                SampleMask::sample(shapes[i].0, shapes[i].1, d.block, d.rate, rng)?.apply(&mut x);
            }
            let mut z = vec![T::ZERO; g.out_len()];
            conv::forward(&g, &x, &p.weight, &mut z);
            let (mean, var) = if mode.encoder_stochastic() {
                (&p.masked_mean, &p.masked_var)
            } else {
                (&p.running_mean, &p.running_var)
            };
            let is: Vec<T> = var.iter().map(|&v| invstd(v)).collect();
            bn_relu(&mut z, g.cout, mean, &is, &p.gamma, &p.beta);
            x = match &stage.pool {
                Some(ps) => {
                    let os = pool_out(g.out_side(), ps);
                    let mut out = vec![T::ZERO; g.cout * os.pow(3)];
                    maxpool(&z, g.cout, g.out_side(), ps, &mut out, None);
                    out
                }
                None => z,
            };
        }
        if let (Some(d), true) = (self.config.final_dropblock, mode.encoder_stochastic()) {
            let (c, s) = *shapes.last().unwrap();
            SampleMask::sample(c, s, d.block, d.rate, rng)?.apply(&mut x);
        }
        Ok(x)
    }

    /// Fully connected head on encoder features and a location in `[0,1]^3`.
    pub fn head<R: Rng + ?Sized>(
        &self,
        features: &[T],
        location: [f64; 3],
        mode: ForwardMode,
        rng: &mut R,
    ) -> Result<[T; 2]> {
        if features.len() != self.config.encoder_len() {
            return Err(Error::invalid(format!(
                "feature vector has {} values, expected {}",
                features.len(),
                self.config.encoder_len()
            )));
        }
        let mut h: Vec<T> = features.to_vec();
        h.extend(location.iter().map(|&l| T::from_f64(l)));
        let mut dense = self.dense.iter().zip(self.config.dense_shapes());
        for layer in &self.config.head {
            match *layer {
                HeadLayer::Dense { .. } => {
                    let (p, (nin, nout, relu)) = dense.next().unwrap();
                    let mut y = p.bias.clone();
                    gemm(
                        false,
                        false,
                        nout,
                        1,
                        nin,
                        T::ONE,
                        &p.weight,
                        &h,
                        T::ONE,
                        &mut y,
                    );
                    if relu {
                        y.iter_mut().for_each(|v| {
                            if *v < T::ZERO {
                                *v = T::ZERO
                            }
                        });
                    }
                    h = y;
                }
                HeadLayer::Dropout { rate } => {
                    if mode.head_stochastic() && rate > 0.0 {
                        let m = dropout_mask(h.len(), rate, rng);
                        apply_dropout(&mut h, &m, rate);
                    }
                }
            }
        }
        Ok([h[0], h[1]])
    }

    /// Raw two-value output for one sample. Encoder randomness is drawn
    /// before head randomness from the same generator.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &[T],
        location: [f64; 3],
        mode: ForwardMode,
        rng: &mut R,
    ) -> Result<[T; 2]> {
        if mode == ForwardMode::Train {
            self.check_input(input)?;
            let tape = self.train_forward(&[input], &[location], &mut [rng])?;
            return Ok(tape.outputs[0]);
        }
        let f = self.encoder_features(input, mode, rng)?;
        self.head(&f, location, mode, rng)
    }

    /// Training-mode forward pass over a batch, keeping what backprop needs.
    /// Sample `b` draws all of its masks from `rngs[b]`.
    pub fn train_forward<R: Rng + ?Sized>(
        &self,
        inputs: &[&[T]],
        locations: &[[f64; 3]],
        rngs: &mut [&mut R],
    ) -> Result<Tape<T>> {
        let batch = inputs.len();
        if batch == 0 || locations.len() != batch || rngs.len() != batch {
            return Err(Error::invalid(
                "batch inputs, locations and rngs must be nonempty and equal length",
            ));
        }
        for x in inputs {
            self.check_input(x)?;
        }
        let shapes = self.config.stage_shapes();
        let geoms = self.config.conv_geoms();
        let mut stages = Vec::with_capacity(geoms.len());
        let mut current: Vec<Vec<T>> = inputs.iter().map(|x| x.to_vec()).collect();
        for (i, (stage, g)) in self.config.stages.iter().zip(&geoms).enumerate() {
            let p = &self.convs[i];
            let mut masks = Vec::with_capacity(batch);
            for (x, rng) in current.iter_mut().zip(rngs.iter_mut()) {
                masks.push(match stage.dropblock {
                    Some(d) if d.rate > 0.0 => {
                        let m =
                            SampleMask::sample(shapes[i].0, shapes[i].1, d.block, d.rate, *rng)?;
                        m.apply(x);
                        Some(m)
                    }
                    _ => None,
                });
            }
            let mut z: Vec<Vec<T>> = Vec::with_capacity(batch);
            for x in &current {
                let mut out = vec![T::ZERO; g.out_len()];
                conv::forward(g, x, &p.weight, &mut out);
                z.push(out);
            }
            // batch statistics per channel
            let n = g.out_side().pow(3);
            let count = (n * batch) as f64;
            let mut mean = vec![T::ZERO; g.cout];
            let mut var = vec![T::ZERO; g.cout];
            for c in 0..g.cout {
                let s: f64 = z
                    .iter()
                    .map(|zb| lane_sum(&zb[c * n..(c + 1) * n], |v| v))
                    .sum();
                let m = s / count;
                let ss: f64 = z
                    .iter()
                    .map(|zb| lane_sum(&zb[c * n..(c + 1) * n], |v| (v - m) * (v - m)))
                    .sum();
                mean[c] = T::from_f64(m);
                var[c] = T::from_f64(ss / count);
            }
            let is: Vec<T> = var.iter().map(|&v| invstd(v)).collect();
            let mut next = Vec::with_capacity(batch);
            for zb in &z {
                let mut y = zb.clone();
                bn_relu(&mut y, g.cout, &mean, &is, &p.gamma, &p.beta);
                next.push(match &stage.pool {
                    Some(ps) => {
                        let mut out = vec![T::ZERO; g.cout * pool_out(g.out_side(), ps).pow(3)];
                        maxpool(&y, g.cout, g.out_side(), ps, &mut out, None);
                        out
                    }
                    None => y,
                });
            }
            let input = std::mem::replace(&mut current, next);
            stages.push(StageTape {
                input,
                masks,
                z,
                mean,
                var,
                invstd: is,
                count: n * batch,
            });
        }
        let (fc, fs) = *shapes.last().unwrap();
        let mut final_masks = Vec::with_capacity(batch);
        for (x, rng) in current.iter_mut().zip(rngs.iter_mut()) {
            final_masks.push(match self.config.final_dropblock {
                Some(d) if d.rate > 0.0 => {
                    let m = SampleMask::sample(fc, fs, d.block, d.rate, *rng)?;
                    m.apply(x);
                    Some(m)
                }
                _ => None,
            });
        }
        let width = self.config.feature_len();
        let mut h = Vec::with_capacity(batch * width);
        for (x, loc) in current.iter().zip(locations) {
            h.extend_from_slice(x);
            h.extend(loc.iter().map(|&l| T::from_f64(l)));
        }
        drop(current);
        let features = h.clone();
        let mut head = Vec::new();
        let mut dense = self.dense.iter().zip(self.config.dense_shapes());
        let mut cur_width = width;
        for layer in &self.config.head {
            match *layer {
                HeadLayer::Dense { .. } => {
                    let (p, (nin, nout, relu)) = dense.next().unwrap();
                    let mut y = Vec::with_capacity(batch * nout);
                    for _ in 0..batch {
                        y.extend_from_slice(&p.bias);
                    }
                    gemm(
                        false,
                        true,
                        batch,
                        nout,
                        nin,
                        T::ONE,
                        &h,
                        &p.weight,
                        T::ONE,
                        &mut y,
                    );
                    if relu {
                        y.iter_mut().for_each(|v| {
                            if *v < T::ZERO {
                                *v = T::ZERO
                            }
                        });
                    }
                    let input = std::mem::replace(&mut h, y);
                    head.push(HeadTape::Dense { input, relu });
                    cur_width = nout;
                }
                HeadLayer::Dropout { rate } => {
                    let mut masks = Vec::with_capacity(batch * cur_width);
                    if rate > 0.0 {
                        for (b, rng) in rngs.iter_mut().enumerate() {
                            let m = dropout_mask(cur_width, rate, *rng);
                            apply_dropout(&mut h[b * cur_width..(b + 1) * cur_width], &m, rate);
                            masks.extend(m);
                        }
                    } else {
                        masks.resize(batch * cur_width, 1);
                    }
                    head.push(HeadTape::Dropout { mask: masks, rate });
                }
            }
        }
        let outputs = h.chunks_exact(OUTPUTS).map(|c| [c[0], c[1]]).collect();
        Ok(Tape {
            batch,
            stages,
            final_masks,
            features,
            head,
            head_outputs: h,
            outputs,
        })
    }

    /// Momentum update of both sets of frozen BN statistics from a training
    /// batch (unbiased variance).
    pub fn update_running_stats(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::ONE - m;
        for (p, st) in self.convs.iter_mut().zip(&stats.stages) {
            let unbias = T::from_f64(st.count as f64 / (st.count as f64 - 1.0).max(1.0));
            for c in 0..p.gamma.len() {
                p.running_mean[c] = keep * p.running_mean[c] + m * st.mean[c];
                p.running_var[c] = keep * p.running_var[c] + m * st.var[c] * unbias;
                p.masked_mean[c] = p.running_mean[c];
                p.masked_var[c] = p.running_var[c];
            }
        }
    }

    /// Replaces the running statistics by the pooled statistics of several
    /// training batches: the mean of all samples and their unbiased total
    /// variance.
    pub fn set_running_stats(&mut self, batches: &[BatchStats<T>]) -> Result<()> {
        self.set_pooled(batches, false)
    }

    /// As [`Self::set_running_stats`], for the masked set.
    pub fn set_masked_stats(&mut self, batches: &[BatchStats<T>]) -> Result<()> {
        self.set_pooled(batches, true)
    }

    fn set_pooled(&mut self, batches: &[BatchStats<T>], masked: bool) -> Result<()> {
        if batches.is_empty() || batches.iter().any(|b| b.stages.len() != self.convs.len()) {
            return Err(Error::invalid("batch statistics do not match the network"));
        }
        for (i, p) in self.convs.iter_mut().enumerate() {
            let n: usize = batches.iter().map(|b| b.stages[i].count).sum();
            let (dst_mean, dst_var) = if masked {
                (&mut p.masked_mean, &mut p.masked_var)
            } else {
                (&mut p.running_mean, &mut p.running_var)
            };
            for c in 0..dst_mean.len() {
                let (mut m1, mut m2) = (0.0, 0.0);
                for b in batches {
                    let st = &b.stages[i];
                    let (w, mu, var) = (st.count as f64, st.mean[c].to_f64(), st.var[c].to_f64());
                    m1 += w * mu;
                    m2 += w * (var + mu * mu);
                }
                let mean = m1 / n as f64;
                let var =
                    (m2 / n as f64 - mean * mean).max(0.0) * n as f64 / (n as f64 - 1.0).max(1.0);
                dst_mean[c] = T::from_f64(mean);
                dst_var[c] = T::from_f64(var);
            }
        }
        Ok(())
    }

    /// Backpropagates `d_outputs` (gradient of the loss w.r.t. each raw
    /// output) through a recorded training pass.
    pub fn backward(&self, mut tape: Tape<T>, d_outputs: &[[T; 2]]) -> Result<Gradients<T>> {
        let batch = tape.batch;
        if d_outputs.len() != batch {
            return Err(Error::invalid(
                "output gradient count does not match the batch",
            ));
        }
        let mut grads = self.zero_grads();
        let n_conv = self.convs.len();
        let dense_shapes = self.config.dense_shapes();
        let mut dh: Vec<T> = d_outputs.iter().flat_map(|d| d.iter().copied()).collect();
        let mut out_act = std::mem::take(&mut tape.head_outputs);
        let mut dense_idx = dense_shapes.len();
        while let Some(layer) = tape.head.pop() {
            match layer {
                HeadTape::Dense { input, relu } => {
                    dense_idx -= 1;
                    let (nin, nout, _) = dense_shapes[dense_idx];
                    if relu {
                        for (d, y) in dh.iter_mut().zip(&out_act) {
                            if *y <= T::ZERO {
                                *d = T::ZERO;
                            }
                        }
                    }
                    let gw = 3 * n_conv + 2 * dense_idx;
                    gemm(
                        true,
                        false,
                        nout,
                        nin,
                        batch,
                        T::ONE,
                        &dh,
                        &input,
                        T::ONE,
                        &mut grads.tensors[gw],
                    );
                    for row in dh.chunks_exact(nout) {
                        for (g, &d) in grads.tensors[gw + 1].iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                    let mut dx = vec![T::ZERO; batch * nin];
                    gemm(
                        false,
                        false,
                        batch,
                        nin,
                        nout,
                        T::ONE,
                        &dh,
                        &self.dense[dense_idx].weight,
                        T::ZERO,
                        &mut dx,
                    );
                    dh = dx;
                    out_act = input;
                }
                HeadTape::Dropout { mask, rate } => {
                    if rate > 0.0 {
                        apply_dropout(&mut dh, &mask, rate);
                    }
                }
            }
        }
        let width = self.config.feature_len();
        let enc = self.config.encoder_len();
        debug_assert_eq!(width, enc + LOCATION_FEATURES);
        let mut d_next: Vec<Vec<T>> = dh.chunks_exact(width).map(|r| r[..enc].to_vec()).collect();
        for (d, m) in d_next.iter_mut().zip(&tape.final_masks) {
            if let Some(m) = m {
                m.apply(d);
            }
        }
        let geoms = self.config.conv_geoms();
        for i in (0..n_conv).rev() {
            let st = tape.stages.pop().unwrap();
            let g = &geoms[i];
            let p = &self.convs[i];
            let stage = &self.config.stages[i];
            let n = g.out_side().pow(3);
            // gradient w.r.t. the BN output (pre-ReLU) for each sample
            let mut dbn: Vec<Vec<T>> = Vec::with_capacity(batch);
            for (zb, dn) in st.z.iter().zip(&d_next) {
                let mut y = zb.clone();
                bn_relu(&mut y, g.cout, &st.mean, &st.invstd, &p.gamma, &p.beta);
                let mut dy = match &stage.pool {
                    Some(ps) => {
                        let os = pool_out(g.out_side(), ps);
                        let mut out = vec![T::ZERO; g.cout * os.pow(3)];
                        let mut arg = vec![0u32; out.len()];
                        maxpool(&y, g.cout, g.out_side(), ps, &mut out, Some(&mut arg));
                        let mut dy = vec![T::ZERO; y.len()];
                        for (&a, &d) in arg.iter().zip(dn) {
                            dy[a as usize] += d;
                        }
                        dy
                    }
                    None => dn.clone(),
                };
                for (d, v) in dy.iter_mut().zip(&y) {
                    if *v <= T::ZERO {
                        *d = T::ZERO;
                    }
                }
                dbn.push(dy);
            }
            drop(d_next);
            let (gi, bi) = (3 * i + 1, 3 * i + 2);
            let mut sum_d = vec![0.0f64; g.cout];
            let mut sum_dx = vec![0.0f64; g.cout];
            for (zb, db) in st.z.iter().zip(&dbn) {
                for c in 0..g.cout {
                    let (m, is) = (st.mean[c].to_f64(), st.invstd[c].to_f64());
                    let (a, b) = lane_sum2(&db[c * n..(c + 1) * n], &zb[c * n..(c + 1) * n], |z| {
                        (z - m) * is
                    });
                    sum_d[c] += a;
                    sum_dx[c] += b;
                }
            }
            for c in 0..g.cout {
                grads.tensors[gi][c] += T::from_f64(sum_dx[c]);
                grads.tensors[bi][c] += T::from_f64(sum_d[c]);
            }
            let cnt = st.count as f64;
            let mut new_next = Vec::with_capacity(if i > 0 { batch } else { 0 });
            for ((zb, mut db), (x, mask)) in
                st.z.into_iter()
                    .zip(dbn)
                    .zip(st.input.into_iter().zip(st.masks))
            {
                for c in 0..g.cout {
                    let (m, is) = (st.mean[c].to_f64(), st.invstd[c].to_f64());
                    let k = p.gamma[c].to_f64() * is / cnt;
                    let (sd, sdx) = (sum_d[c] / cnt, sum_dx[c] / cnt);
                    for (d, &z) in db[c * n..(c + 1) * n]
                        .iter_mut()
                        .zip(&zb[c * n..(c + 1) * n])
                    {
                        let xh = (z.to_f64() - m) * is;
                        *d = T::from_f64(k * cnt * (d.to_f64() - sd - xh * sdx));
                    }
                }
                drop(zb);
                if i > 0 {
                    let mut dx = vec![T::ZERO; g.in_len()];
                    conv::backward(
                        g,
                        &x,
                        &p.weight,
                        &db,
                        &mut grads.tensors[3 * i],
                        Some(&mut dx),
                    );
                    if let Some(m) = mask {
                        m.apply(&mut dx);
                    }
                    new_next.push(dx);
                } else {
                    conv::backward(g, &x, &p.weight, &db, &mut grads.tensors[3 * i], None);
                }
            }
            d_next = new_next;
        }
        Ok(grads)
    }
}

/// Per-stage batch mean and biased variance of a training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    stages: Vec<StageStats<T>>,
}

#[derive(Debug, Clone, PartialEq)]
struct StageStats<T> {
    mean: Vec<T>,
    var: Vec<T>,
    count: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn batch_stats(&self) -> BatchStats<T> {
        BatchStats {
            stages: self
                .stages
                .iter()
                .map(|s| StageStats {
                    mean: s.mean.clone(),
                    var: s.var.clone(),
                    count: s.count,
                })
                .collect(),
        }
    }
}

#[derive(Debug)]
struct StageTape<T> {
    /// Conv inputs after DropBlock, per sample.
    input: Vec<Vec<T>>,
    masks: Vec<Option<SampleMask>>,
    /// Conv outputs, per sample.
    z: Vec<Vec<T>>,
    mean: Vec<T>,
    var: Vec<T>,
    invstd: Vec<T>,
    count: usize,
}

#[derive(Debug)]
enum HeadTape<T> {
    Dense { input: Vec<T>, relu: bool },
    Dropout { mask: Vec<u8>, rate: f64 },
}

/// Activations and masks of one training-mode batch pass.
#[derive(Debug)]
pub struct Tape<T> {
    batch: usize,
    stages: Vec<StageTape<T>>,
    final_masks: Vec<Option<SampleMask>>,
    /// Head input rows (encoder features then location), `batch x F`.
    pub features: Vec<T>,
    head: Vec<HeadTape<T>>,
    head_outputs: Vec<T>,
    pub outputs: Vec<[T; 2]>,
}
