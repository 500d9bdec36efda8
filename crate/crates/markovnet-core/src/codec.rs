//! CsiNet Pro encoder/decoder pairs.
//!
//! Encoder: four same-padded 7×7 convolutions producing 16, 8, 4, 2 feature
//! maps, then a latent head that compresses the flattened 2×32×32 activation.
//! Decoder: the head's inverse, a mirrored convolution stack, and a final
//! tanh so reconstructions live in (−1, 1).
//!
//! Two latent heads exist. The FC head is a dense pair 2048 ↔ CR·2048. The
//! CNN head slices the 2×32×32 activation channel-then-delay-row into 64
//! maps of 1×32 along the angle axis and applies M = 64·CR kernels of
//! length 7, which keeps only local angular connections and shrinks the
//! head by two orders of magnitude.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;
use crate::tensor::{adam_step, glorot_uniform, AdamState, BnMode, Padding, RunningStats, Tape, Tensor, VarId};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentHead {
    Fc,
    Cnn,
}

/// Codeword length as a fraction of the 2·Rd·Nb real input dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionRatio {
    pub num: u32,
    pub den: u32,
}

impl CompressionRatio {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::config("compression ratio must be positive".to_string()));
        }
        Ok(CompressionRatio { num, den })
    }

    /// Parse "1/16" (or a bare denominator "16").
    pub fn parse(s: &str) -> Result<Self> {
        let (num, den) = match s.split_once('/') {
            Some((n, d)) => (
                n.trim().parse::<u32>().map_err(|_| Error::config(format!("bad ratio '{s}'")))?,
                d.trim().parse::<u32>().map_err(|_| Error::config(format!("bad ratio '{s}'")))?,
            ),
            None => (1, s.trim().parse::<u32>().map_err(|_| Error::config(format!("bad ratio '{s}'")))?),
        };
        Self::new(num, den)
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    fn exact_scaled(&self, whole: usize, what: &str) -> Result<usize> {
        let scaled = whole as u64 * self.num as u64;
        if scaled % self.den as u64 != 0 {
            return Err(Error::config(format!(
                "{what}: {whole}·{}/{} is not an integer",
                self.num, self.den
            )));
        }
        Ok((scaled / self.den as u64) as usize)
    }
}

impl std::fmt::Display for CompressionRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub rd: usize,
    pub nb: usize,
    /// Feature maps of the encoder convolution trunk.
    pub enc_widths: Vec<usize>,
    /// Feature maps of the decoder convolution trunk (final entry is the
    /// output channel count).
    pub dec_widths: Vec<usize>,
    pub kernel: usize,
    pub head: LatentHead,
    pub cr: CompressionRatio,
    pub batch_norm: bool,
    pub leaky_slope: f64,
    /// Linear variant: no activations, no normalization, bias-free.
    pub linear: bool,
}

impl CodecConfig {
    pub fn fc(cr: CompressionRatio) -> Self {
        CodecConfig {
            rd: 32,
            nb: 32,
            enc_widths: vec![16, 8, 4, 2],
            dec_widths: vec![16, 8, 4, 2],
            kernel: 7,
            head: LatentHead::Fc,
            cr,
            batch_norm: true,
            leaky_slope: 0.3,
            linear: false,
        }
    }

    pub fn cnn(cr: CompressionRatio) -> Self {
        CodecConfig { head: LatentHead::Cnn, ..Self::fc(cr) }
    }

    /// Bias-free linear autoencoder with a bare dense pair: the PCA
    /// comparison subject.
    pub fn linear_pair(latent: u32) -> Self {
        CodecConfig {
            enc_widths: vec![],
            dec_widths: vec![],
            linear: true,
            batch_norm: false,
            ..Self::fc(CompressionRatio { num: latent, den: 2048 })
        }
    }

    pub fn input_len(&self) -> usize {
        2 * self.rd * self.nb
    }

    /// Codeword length, exact or a configuration error.
    pub fn latent_len(&self) -> Result<usize> {
        match self.head {
            LatentHead::Fc => self.cr.exact_scaled(self.input_len(), "FC latent size"),
            LatentHead::Cnn => Ok(self.cnn_maps()? * self.nb),
        }
    }

    /// M = 64·CR slice kernels for the CNN head.
    pub fn cnn_maps(&self) -> Result<usize> {
        self.cr.exact_scaled(2 * self.rd, "CNN head map count")
    }

    pub fn validate(&self) -> Result<()> {
        if self.rd == 0 || self.nb == 0 {
            return Err(Error::config("codec extents must be positive".to_string()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        let latent = self.latent_len()?;
        if latent == 0 || latent > self.input_len() {
            return Err(Error::config(format!(
                "latent length {latent} outside 1..={}",
                self.input_len()
            )));
        }
        if self.head == LatentHead::Cnn && self.nb % 8 != 0 {
            return Err(Error::config("CNN head expects the angle axis in whole 8-lanes".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Layer<R> {
    Conv2d { weights: Tensor<R>, bias: Tensor<R> },
    BatchNorm { gamma: Tensor<R>, beta: Tensor<R>, running: RunningStats<R> },
    LeakyRelu { slope: f64 },
    Tanh,
    Affine { weights: Tensor<R>, bias: Tensor<R> },
    /// Per-sample target shape; the batch axis is prepended at run time.
    Reshape { shape: Vec<usize> },
}

/// Whether a layer belongs to the feature-extraction trunk or the
/// dimension-compression head; cost reports split along this line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Trunk,
    Head,
}

#[derive(Clone, Debug)]
pub struct CodecLayer<R> {
    pub layer: Layer<R>,
    pub stage: Stage,
}

/// One trained (or trainable) encoder/decoder pair plus the normalization
/// constants the decoder side must share.
#[derive(Clone, Debug)]
pub struct CodecModel<R> {
    pub config: CodecConfig,
    pub encoder: Vec<CodecLayer<R>>,
    pub decoder: Vec<CodecLayer<R>>,
    /// Training-set range-normalization scale (max |component|).
    pub norm_scale: Option<R>,
    /// Training-set max |codeword| for feedback quantization.
    pub codeword_scale: Option<R>,
    pub seed: u64,
}

fn conv_layer<R: Real>(rng: &mut ChaCha8Rng, cin: usize, cout: usize, kh: usize, kw: usize, linear: bool) -> Layer<R> {
    let fan_in = cin * kh * kw;
    let fan_out = cout * kh * kw;
    let weights = glorot_uniform(rng, &[cout, cin, kh, kw], fan_in, fan_out);
    let mut bias = Tensor::zeros(&[cout]);
    bias.set_requires_grad(!linear);
    Layer::Conv2d { weights, bias }
}

fn affine_layer<R: Real>(rng: &mut ChaCha8Rng, din: usize, dout: usize, linear: bool) -> Layer<R> {
    let weights = glorot_uniform(rng, &[dout, din], din, dout);
    let mut bias = Tensor::zeros(&[dout]);
    bias.set_requires_grad(!linear);
    Layer::Affine { weights, bias }
}

fn bn_layer<R: Real>(channels: usize) -> Layer<R> {
    let mut gamma = Tensor::from_vec(&[channels], vec![R::one(); channels]).expect("shape");
    gamma.set_requires_grad(true);
    let mut beta = Tensor::zeros(&[channels]);
    beta.set_requires_grad(true);
    Layer::BatchNorm { gamma, beta, running: RunningStats::new(channels, 0.9, 1e-5) }
}

/// Build a codec with seeded Glorot-uniform parameters; identical seeds
/// give bit-identical models.
pub fn build<R: Real>(config: &CodecConfig, seed: u64) -> Result<CodecModel<R>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.kernel;
    let latent = config.latent_len()?;
    let (rd, nb) = (config.rd, config.nb);

    let mut encoder: Vec<CodecLayer<R>> = Vec::new();
    let push_trunk = |stack: &mut Vec<CodecLayer<R>>, layer: Layer<R>| {
        stack.push(CodecLayer { layer, stage: Stage::Trunk });
    };

    // Encoder trunk: conv → (bn) → (leaky_relu), widths 2→16→8→4→2.
    let mut cin = 2;
    for &cout in &config.enc_widths {
        push_trunk(&mut encoder, conv_layer(&mut rng, cin, cout, k, k, config.linear));
        if config.batch_norm && !config.linear {
            push_trunk(&mut encoder, bn_layer(cout));
        }
        if !config.linear {
            push_trunk(&mut encoder, Layer::LeakyRelu { slope: config.leaky_slope });
        }
        cin = cout;
    }
    if !config.enc_widths.is_empty() && cin != 2 {
        return Err(Error::config("encoder trunk must end on 2 feature maps".to_string()));
    }

    // Latent head.
    match config.head {
        LatentHead::Fc => {
            push_trunk(&mut encoder, Layer::Reshape { shape: vec![config.input_len()] });
            encoder.push(CodecLayer {
                layer: affine_layer(&mut rng, config.input_len(), latent, config.linear),
                stage: Stage::Head,
            });
        }
        LatentHead::Cnn => {
            let maps = config.cnn_maps()?;
            encoder.push(CodecLayer {
                layer: Layer::Reshape { shape: vec![2 * rd, 1, nb] },
                stage: Stage::Head,
            });
            encoder.push(CodecLayer {
                layer: conv_layer(&mut rng, 2 * rd, maps, 1, k, config.linear),
                stage: Stage::Head,
            });
            encoder.push(CodecLayer { layer: Layer::Reshape { shape: vec![latent] }, stage: Stage::Head });
        }
    }

    let mut decoder: Vec<CodecLayer<R>> = Vec::new();
    match config.head {
        LatentHead::Fc => {
            decoder.push(CodecLayer {
                layer: affine_layer(&mut rng, latent, config.input_len(), config.linear),
                stage: Stage::Head,
            });
            decoder.push(CodecLayer { layer: Layer::Reshape { shape: vec![2, rd, nb] }, stage: Stage::Trunk });
        }
        LatentHead::Cnn => {
            let maps = config.cnn_maps()?;
            decoder.push(CodecLayer { layer: Layer::Reshape { shape: vec![maps, 1, nb] }, stage: Stage::Head });
            decoder.push(CodecLayer {
                layer: conv_layer(&mut rng, maps, 2 * rd, 1, k, config.linear),
                stage: Stage::Head,
            });
            decoder.push(CodecLayer { layer: Layer::Reshape { shape: vec![2, rd, nb] }, stage: Stage::Trunk });
        }
    }

    // Decoder trunk mirrors the encoder; the final conv maps back to 2
    // channels and feeds tanh directly (no normalization after it).
    let mut cin = 2;
    let n_dec = config.dec_widths.len();
    for (i, &cout) in config.dec_widths.iter().enumerate() {
        push_trunk(&mut decoder, conv_layer(&mut rng, cin, cout, k, k, config.linear));
        let last = i + 1 == n_dec;
        if !last && config.batch_norm && !config.linear {
            push_trunk(&mut decoder, bn_layer(cout));
        }
        if !last && !config.linear {
            push_trunk(&mut decoder, Layer::LeakyRelu { slope: config.leaky_slope });
        }
        cin = cout;
    }
    if !config.dec_widths.is_empty() && cin != 2 {
        return Err(Error::config("decoder trunk must end on 2 output channels".to_string()));
    }
    if !config.linear {
        push_trunk(&mut decoder, Layer::Tanh);
    }

    Ok(CodecModel { config: config.clone(), encoder, decoder, norm_scale: None, codeword_scale: None, seed })
}

impl<R: Real> CodecModel<R> {
    pub fn latent_len(&self) -> usize {
        self.config.latent_len().expect("validated at build")
    }

    /// Mutable references to every learnable parameter, in stack order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut out = Vec::new();
        for cl in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            match &mut cl.layer {
                Layer::Conv2d { weights, bias } | Layer::Affine { weights, bias } => {
                    if weights.requires_grad() {
                        out.push(&mut *weights);
                    }
                    if bias.requires_grad() {
                        out.push(&mut *bias);
                    }
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push(&mut *gamma);
                    out.push(&mut *beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameter_sizes(&mut self) -> Vec<usize> {
        self.parameters_mut().iter().map(|t| t.numel()).collect()
    }
}

/// Run one stack; `params` collects the tape ids of learnable leaves in
/// [`CodecModel::parameters_mut`] order.
fn run_stack<R: Real>(
    tape: &mut Tape<R>,
    stack: &mut [CodecLayer<R>],
    input: VarId,
    mode: BnMode,
    mut params: Option<&mut Vec<VarId>>,
) -> Result<VarId> {
    let mut cur = input;
    for cl in stack.iter_mut() {
        cur = match &mut cl.layer {
            Layer::Conv2d { weights, bias } => {
                let w = tape.leaf(weights);
                let b = tape.leaf(bias);
                if let Some(p) = params.as_deref_mut() {
                    if weights.requires_grad() {
                        p.push(w);
                    }
                    if bias.requires_grad() {
                        p.push(b);
                    }
                }
                tape.conv2d(cur, w, b, Padding::Same)?
            }
            Layer::Affine { weights, bias } => {
                let w = tape.leaf(weights);
                let b = tape.leaf(bias);
                if let Some(p) = params.as_deref_mut() {
                    if weights.requires_grad() {
                        p.push(w);
                    }
                    if bias.requires_grad() {
                        p.push(b);
                    }
                }
                tape.affine(cur, w, b)?
            }
            Layer::BatchNorm { gamma, beta, running } => {
                let g = tape.leaf(gamma);
                let b = tape.leaf(beta);
                if let Some(p) = params.as_deref_mut() {
                    p.push(g);
                    p.push(b);
                }
                tape.batch_norm(cur, g, b, running, mode)?
            }
            Layer::LeakyRelu { slope } => tape.leaky_relu(cur, *slope),
            Layer::Tanh => tape.tanh(cur),
            Layer::Reshape { shape } => {
                let n = tape.shape(cur)[0];
                let mut full = vec![n];
                full.extend_from_slice(shape);
                tape.reshape(cur, &full)?
            }
        };
    }
    Ok(cur)
}

fn batch_from<R: Real>(samples: &[&Tensor<R>]) -> Result<Tensor<R>> {
    let first = samples.first().ok_or_else(|| Error::contract("empty batch".to_string()))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(samples.len() * first.numel());
    for s in samples {
        if s.shape() != first.shape() {
            return Err(Error::contract("inconsistent sample shapes in batch".to_string()));
        }
        data.extend_from_slice(s.data());
    }
    Tensor::from_vec(&shape, data)
}

/// Compress a normalized batch `[N, 2, Rd, Nb]` into codewords `[N, L]`.
pub fn encode<R: Real>(model: &mut CodecModel<R>, x: &Tensor<R>) -> Result<Tensor<R>> {
    let expect = [x.shape()[0], 2, model.config.rd, model.config.nb];
    if x.shape() != expect {
        return Err(Error::contract(format!(
            "encode input must be {expect:?}, got {:?}",
            x.shape()
        )));
    }
    let mut tape = Tape::new();
    let xi = tape.leaf(x);
    let latent = run_stack(&mut tape, &mut model.encoder, xi, BnMode::Eval, None)?;
    Ok(tape.to_tensor(latent))
}

/// Reconstruct a batch from codewords `[N, L]`.
pub fn decode<R: Real>(model: &mut CodecModel<R>, codeword: &Tensor<R>) -> Result<Tensor<R>> {
    let latent = model.latent_len();
    if x_len(codeword) != latent {
        return Err(Error::contract(format!(
            "decode input must be [N, {latent}], got {:?}",
            codeword.shape()
        )));
    }
    let mut tape = Tape::new();
    let ci = tape.leaf(codeword);
    let out = run_stack(&mut tape, &mut model.decoder, ci, BnMode::Eval, None)?;
    Ok(tape.to_tensor(out))
}

fn x_len<R: Real>(t: &Tensor<R>) -> usize {
    if t.shape().len() == 2 {
        t.shape()[1]
    } else {
        0
    }
}

/// Training schedule for one codec.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule { epochs: 1000, batch_size: 200, learning_rate: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    /// Loss of the first batch before any update: measures how well a
    /// warm-started model transfers, independent of optimizer transients.
    pub pre_training_loss: Option<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.pre_training_loss.or_else(|| self.loss_history.first().copied())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }

    /// Moving-average smoothed history (window in epochs).
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        self.loss_history
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let lo = i.saturating_sub(w - 1);
                let span = &self.loss_history[lo..=i];
                span.iter().sum::<f64>() / span.len() as f64
            })
            .collect()
    }
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5851F42D4C957F2Du64.wrapping_mul(epoch as u64 + 1)));
    idx.shuffle(&mut rng);
    idx
}

/// Train an autoencoder on normalized sample tensors (targets are the
/// inputs). The model's range scale must already be set by the caller that
/// normalized `data`. Persists a checkpoint on completion when given a path.
pub fn train<R: Real>(
    model: &mut CodecModel<R>,
    data: &[Tensor<R>],
    schedule: &TrainSchedule,
    checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::contract("training set is empty".to_string()));
    }
    if schedule.batch_size < 2 {
        return Err(Error::config("batch size must be at least 2".to_string()));
    }
    let mut report = TrainReport::default();
    let mut adam: AdamState<R> = AdamState::with_learning_rate(schedule.learning_rate, &model.parameter_sizes());

    if schedule.epochs > 0 {
        let first: Vec<&Tensor<R>> = data.iter().take(schedule.batch_size.max(2)).collect();
        let x = batch_from(&first)?;
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let latent = run_stack(&mut tape, &mut model.encoder, xi, BnMode::Train, None)?;
        let recon = run_stack(&mut tape, &mut model.decoder, latent, BnMode::Train, None)?;
        let target = tape.leaf(&x);
        let loss = tape.mse_loss(recon, target)?;
        report.pre_training_loss = Some(tape.data(loss)[0].as_f64());
    }

    for epoch in 0..schedule.epochs {
        let idx = shuffled_indices(data.len(), schedule.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;

        let mut start = 0;
        while start < idx.len() {
            let mut end = (start + schedule.batch_size).min(idx.len());
            // A trailing singleton cannot batch-normalize; fold it in.
            if idx.len() - end == 1 {
                end = idx.len();
            }
            let batch_refs: Vec<&Tensor<R>> = idx[start..end].iter().map(|&i| &data[i]).collect();
            let x = batch_from(&batch_refs)?;

            let mut tape = Tape::new();
            let mut params = Vec::new();
            let xi = tape.leaf(&x);
            let latent = run_stack(&mut tape, &mut model.encoder, xi, BnMode::Train, Some(&mut params))?;
            let recon = run_stack(&mut tape, &mut model.decoder, latent, BnMode::Train, Some(&mut params))?;
            let target = tape.leaf(&x);
            let loss = tape.mse_loss(recon, target)?;
            let loss_val = tape.data(loss)[0].as_f64();
            if !loss_val.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    details: format!("loss became {loss_val}"),
                });
            }
            tape.backward(loss)?;

            let grads: Vec<Option<Vec<R>>> =
                params.iter().map(|&p| tape.grad(p).map(|g| g.to_vec())).collect();
            adam_step(&mut model.parameters_mut(), &grads, &mut adam)?;

            epoch_loss += loss_val;
            batches += 1;
            start = end;
        }
        report.loss_history.push(epoch_loss / batches.max(1) as f64);
    }

    if let Some(path) = checkpoint {
        crate::io::save_codec(model, path)?;
    }
    Ok(report)
}

/// Parameter and FLOP accounting for one codec.
///
/// `params` counts every learnable value (weights, biases, normalization
/// gains). `mac_weights` and `flops` follow the table convention: two FLOPs
/// per multiply-accumulate, biases and activations excluded.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub encoder_params: u64,
    pub decoder_params: u64,
    pub head_params: u64,
    pub trunk_params: u64,
    pub encoder_flops: u64,
    pub decoder_flops: u64,
    pub head_flops: u64,
    pub trunk_flops: u64,
    pub head_mac_weights: u64,
    pub trunk_mac_weights: u64,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.encoder_params + self.decoder_params
    }

    pub fn total_flops(&self) -> u64 {
        self.encoder_flops + self.decoder_flops
    }

    pub fn total_mac_weights(&self) -> u64 {
        self.head_mac_weights + self.trunk_mac_weights
    }
}

/// Exact counts from the live layer tensors (no hidden parameters).
pub fn count_cost<R: Real>(model: &CodecModel<R>) -> CostReport {
    let mut report = CostReport::default();
    for (is_encoder, stack) in [(true, &model.encoder), (false, &model.decoder)] {
        // Track activation shape to convert kernels into MACs.
        let mut shape: Vec<usize> = if is_encoder {
            vec![2, model.config.rd, model.config.nb]
        } else {
            vec![model.latent_len()]
        };
        for cl in stack {
            let (params, mac_weights, macs): (u64, u64, u64) = match &cl.layer {
                Layer::Conv2d { weights, bias } => {
                    let [cout, cin, kh, kw]: [usize; 4] = weights.shape().try_into().expect("conv weights are 4-D");
                    let (h, w) = (shape[1], shape[2]);
                    shape = vec![cout, h, w];
                    let wn = weights.numel() as u64;
                    ((wn + bias.numel() as u64), wn, (h * w * cout * cin * kh * kw) as u64)
                }
                Layer::Affine { weights, bias } => {
                    let dout = weights.shape()[0];
                    shape = vec![dout];
                    let wn = weights.numel() as u64;
                    (wn + bias.numel() as u64, wn, wn)
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    ((gamma.numel() + beta.numel()) as u64, 0, 0)
                }
                Layer::Reshape { shape: s } => {
                    shape = s.clone();
                    (0, 0, 0)
                }
                Layer::LeakyRelu { .. } | Layer::Tanh => (0, 0, 0),
            };
            let flops = 2 * macs;
            if is_encoder {
                report.encoder_params += params;
                report.encoder_flops += flops;
            } else {
                report.decoder_params += params;
                report.decoder_flops += flops;
            }
            match cl.stage {
                Stage::Head => {
                    report.head_params += params;
                    report.head_flops += flops;
                    report.head_mac_weights += mac_weights;
                }
                Stage::Trunk => {
                    report.trunk_params += params;
                    report.trunk_flops += flops;
                    report.trunk_mac_weights += mac_weights;
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cr(num: u32, den: u32) -> CompressionRatio {
        CompressionRatio::new(num, den).unwrap()
    }

    #[test]
    fn fc_latent_lengths() {
        assert_eq!(CodecConfig::fc(cr(1, 4)).latent_len().unwrap(), 512);
        assert_eq!(CodecConfig::fc(cr(1, 64)).latent_len().unwrap(), 32);
        // 2048/3 is not an integer.
        assert!(CodecConfig::fc(cr(1, 3)).latent_len().is_err());
    }

    #[test]
    fn cnn_latent_is_map_count_times_angle_axis() {
        let cfg = CodecConfig::cnn(cr(1, 16));
        assert_eq!(cfg.cnn_maps().unwrap(), 4);
        assert_eq!(cfg.latent_len().unwrap(), 128);
        assert!(CodecConfig::cnn(cr(1, 128)).validate().is_err());
    }

    #[test]
    fn builds_are_seed_deterministic() {
        let a: CodecModel<f64> = build(&CodecConfig::fc(cr(1, 16)), 7).unwrap();
        let b: CodecModel<f64> = build(&CodecConfig::fc(cr(1, 16)), 7).unwrap();
        for (la, lb) in a.encoder.iter().zip(&b.encoder) {
            if let (Layer::Conv2d { weights: wa, .. }, Layer::Conv2d { weights: wb, .. }) = (&la.layer, &lb.layer) {
                assert_eq!(wa.data(), wb.data());
            }
        }
        let c: CodecModel<f64> = build(&CodecConfig::fc(cr(1, 16)), 8).unwrap();
        let (wa, wc) = match (&a.encoder[0].layer, &c.encoder[0].layer) {
            (Layer::Conv2d { weights: wa, .. }, Layer::Conv2d { weights: wc, .. }) => (wa, wc),
            _ => unreachable!(),
        };
        assert_ne!(wa.data(), wc.data());
    }

    #[test]
    fn encode_decode_shapes_and_tanh_range() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut model: CodecModel<f64> = build(&CodecConfig::fc(cr(1, 16)), 1).unwrap();
        let x = Tensor::from_vec(
            &[3, 2, 32, 32],
            (0..3 * 2048).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let code = encode(&mut model, &x).unwrap();
        assert_eq!(code.shape(), &[3, 128]);
        let recon = decode(&mut model, &code).unwrap();
        assert_eq!(recon.shape(), &[3, 2, 32, 32]);
        assert!(recon.data().iter().all(|&v| v > -1.0 && v < 1.0));

        let bad = Tensor::<f64>::zeros(&[3, 64]);
        assert!(decode(&mut model, &bad).is_err());
    }

    #[test]
    fn cnn_head_keeps_angular_locality() {
        // Perturbing one angle column of the head input moves at most
        // `kernel` positions of each output map.
        let model: CodecModel<f64> = build(&CodecConfig::cnn(cr(1, 4)), 2).unwrap();
        let base = Tensor::<f64>::zeros(&[1, 2, 32, 32]);
        let mut poked = base.clone();
        let angle = 13;
        for ch in 0..2 {
            for row in 0..32 {
                poked.data_mut()[(ch * 32 + row) * 32 + angle] = 1.0;
            }
        }
        // Bypass the trunk: drive the head layers directly.
        let head_start = model
            .encoder
            .iter()
            .position(|l| l.stage == Stage::Head)
            .unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let b = tape.leaf(&base);
        let p = tape.leaf(&poked);
        let mut head = model.encoder[head_start..].to_vec();
        let yb = run_stack(&mut tape, &mut head, b, BnMode::Eval, None).unwrap();
        let yp = run_stack(&mut tape, &mut head, p, BnMode::Eval, None).unwrap();
        let (db, dp) = (tape.data(yb), tape.data(yp));
        let maps = model.config.cnn_maps().unwrap();
        let mut changed_positions = std::collections::BTreeSet::new();
        for m in 0..maps {
            for a in 0..32 {
                if (db[m * 32 + a] - dp[m * 32 + a]).abs() > 0.0 {
                    changed_positions.insert(a);
                }
            }
        }
        assert!(changed_positions.len() <= 7, "changed {changed_positions:?}");
        for &a in &changed_positions {
            assert!((a as i64 - angle as i64).abs() <= 3);
        }
    }

    #[test]
    fn fc_head_cost_matches_closed_form() {
        // Dense pair at CR = 1/4: (2048·512 + 512) + (512·2048 + 2048).
        let model: CodecModel<f64> = build(&CodecConfig::fc(cr(1, 4)), 0).unwrap();
        let cost = count_cost(&model);
        assert_eq!(cost.head_params, 2048 * 512 + 512 + 512 * 2048 + 2048);
        assert_eq!(cost.head_flops, 2 * (2048 * 512 + 512 * 2048));
        // Trunk: eight 7×7 convs (two chains of 2→16→8→4→2) + BN pairs.
        let conv_w = 2 * (2 * 16 * 49 + 16 * 8 * 49 + 8 * 4 * 49 + 4 * 2 * 49) as u64;
        let conv_b = 2 * (16 + 8 + 4 + 2) as u64;
        let bn = 2 * (16 + 8 + 4) as u64 + 2 * (16 + 8 + 4 + 2) as u64;
        assert_eq!(cost.trunk_params, conv_w + conv_b + bn);
        assert_eq!(cost.trunk_mac_weights, conv_w);
        assert_eq!(cost.trunk_flops, 2 * 1024 * conv_w);
    }

    #[test]
    fn cnn_head_cost_matches_closed_form() {
        // M = 16 at CR 1/4: (64·16·7 + 16) + (16·64·7 + 64) params,
        // 2·32·(64·16·7 + 16·64·7) FLOPs.
        let model: CodecModel<f64> = build(&CodecConfig::cnn(cr(1, 4)), 0).unwrap();
        let cost = count_cost(&model);
        assert_eq!(cost.head_params, (64 * 16 * 7 + 16) + (16 * 64 * 7 + 64));
        assert_eq!(cost.head_params, 14_416);
        assert_eq!(cost.head_flops, 2 * 32 * (64 * 16 * 7 + 16 * 64 * 7));
        assert_eq!(cost.head_flops, 917_504);

        let m16: CodecModel<f64> = build(&CodecConfig::cnn(cr(1, 16)), 0).unwrap();
        let c16 = count_cost(&m16);
        assert_eq!(c16.head_params, 1_796 + 1_856);
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let mut model: CodecModel<f64> = build(&CodecConfig::fc(cr(1, 16)), 5).unwrap();
        let before = match &model.encoder[0].layer {
            Layer::Conv2d { weights, .. } => weights.data().to_vec(),
            _ => unreachable!(),
        };
        let data = vec![Tensor::<f64>::zeros(&[2, 32, 32]); 4];
        let schedule = TrainSchedule { epochs: 0, batch_size: 2, ..Default::default() };
        let report = train(&mut model, &data, &schedule, None).unwrap();
        assert!(report.loss_history.is_empty());
        let after = match &model.encoder[0].layer {
            Layer::Conv2d { weights, .. } => weights.data().to_vec(),
            _ => unreachable!(),
        };
        assert_eq!(before, after);
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let data: Vec<Tensor<f64>> = (0..8)
            .map(|_| {
                Tensor::from_vec(&[2, 8, 8], (0..128).map(|_| rng.gen_range(-0.9..0.9)).collect()).unwrap()
            })
            .collect();
        let cfg = CodecConfig {
            rd: 8,
            nb: 8,
            enc_widths: vec![4, 2],
            dec_widths: vec![4, 2],
            cr: cr(1, 4),
            ..CodecConfig::fc(cr(1, 4))
        };
        let schedule = TrainSchedule { epochs: 5, batch_size: 4, seed: 3, ..Default::default() };
        let mut m1: CodecModel<f64> = build(&cfg, 11).unwrap();
        let h1 = train(&mut m1, &data, &schedule, None).unwrap();
        let mut m2: CodecModel<f64> = build(&cfg, 11).unwrap();
        let h2 = train(&mut m2, &data, &schedule, None).unwrap();
        assert_eq!(h1.loss_history, h2.loss_history);
    }

    #[test]
    fn divergence_carries_epoch_index() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let data: Vec<Tensor<f64>> = (0..4)
            .map(|_| {
                Tensor::from_vec(&[2, 8, 8], (0..128).map(|_| rng.gen_range(-0.9..0.9)).collect()).unwrap()
            })
            .collect();
        let cfg = CodecConfig {
            rd: 8,
            nb: 8,
            ..CodecConfig::linear_pair(16)
        };
        let mut model: CodecModel<f64> = build(&cfg, 1).unwrap();
        // Adam steps are ±lr regardless of gradient scale, so the squared
        // weight products overflow f64 immediately at this rate.
        let schedule = TrainSchedule { epochs: 50, batch_size: 2, learning_rate: 1e80, seed: 0 };
        match train(&mut model, &data, &schedule, None) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn tiny_dataset_memorizes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        // K = 8 samples on a small net: training MSE collapses.
        let data: Vec<Tensor<f64>> = (0..8)
            .map(|_| {
                Tensor::from_vec(&[2, 8, 8], (0..128).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()
            })
            .collect();
        let cfg = CodecConfig {
            rd: 8,
            nb: 8,
            enc_widths: vec![4, 2],
            dec_widths: vec![4, 2],
            ..CodecConfig::fc(cr(1, 2))
        };
        let mut model: CodecModel<f64> = build(&cfg, 21).unwrap();
        let schedule = TrainSchedule { epochs: 2000, batch_size: 8, seed: 1, ..Default::default() };
        let report = train(&mut model, &data, &schedule, None).unwrap();
        let final_loss = report.final_loss().unwrap();
        assert!(final_loss < 1e-3, "memorization loss {final_loss}");
        // Untrained model on the same data is strictly worse.
        let mut fresh: CodecModel<f64> = build(&cfg, 21).unwrap();
        let x = batch_from(&data.iter().collect::<Vec<_>>()).unwrap();
        let code = encode(&mut fresh, &x).unwrap();
        let recon = decode(&mut fresh, &code).unwrap();
        let untrained: f64 = recon
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 8.0;
        assert!(untrained.is_finite() && untrained > final_loss);
    }
}
