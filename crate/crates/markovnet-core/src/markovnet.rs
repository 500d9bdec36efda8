//! The differential multi-slot feedback pipeline.
//!
//! Slot 1 feeds back the CSI itself through a codec at CR₁. Every later
//! slot feeds back only the linear-prediction residual H_t − γ·Ĥ_{t−1},
//! whose energy is roughly (1−γ²) of the channel's, and reconstructs
//! Ĥ_t = f_d(s_t) + γ·Ĥ_{t−1}. The UE runs a replica of the decoder so both
//! ends form the residual against the same Ĥ_{t−1}; γ̂ is estimated on the
//! training split as a trace ratio and frozen into the pipeline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::CsiSequence;
use crate::codec::{self, CodecConfig, CodecModel, CompressionRatio, LatentHead, TrainReport, TrainSchedule};
use crate::quantizer::{quantize_codeword, QuantizerSpec};
use crate::scalar::Real;
use crate::sphere::{self, MagnitudeQuantizer};
use crate::tensor::Tensor;
use crate::transform::{complex_to_real, real_to_complex, CsiMatrix};
use crate::{Error, Result};

/// Samples per inference batch during dataset-wide passes.
const EVAL_BATCH: usize = 128;

/// One slot's feedback codec: a trained model, or the lossless identity
/// stub used by the pipeline oracles.
#[derive(Clone, Debug)]
pub enum CodecStage<R> {
    Model(CodecModel<R>),
    Identity,
}

impl<R: Real> CodecStage<R> {
    pub fn as_model(&self) -> Option<&CodecModel<R>> {
        match self {
            CodecStage::Model(m) => Some(m),
            CodecStage::Identity => None,
        }
    }
}

/// γ̂ = Re Trace(Σ H_t·H_{t−1}ᴴ) / Σ ‖H_{t−1}‖², averaged over all samples
/// and adjacent slot pairs of the training split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaEstimate {
    pub gamma_hat: f64,
    /// Number of (H_{t−1}, H_t) pairs averaged.
    pub sample_count: usize,
}

pub fn estimate_gamma<R: Real>(dataset: &CsiSequence<R>) -> Result<GammaEstimate> {
    if dataset.slots() < 2 {
        return Err(Error::contract(format!(
            "gamma estimation needs at least 2 slots, got {}",
            dataset.slots()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut pairs = 0usize;
    for k in 0..dataset.k {
        for t in 1..dataset.slots() {
            let cur = dataset.slot(k, t);
            let prev = dataset.slot(k, t - 1);
            // Re Tr(A·Bᴴ) = Σ Re(a)·Re(b) + Im(a)·Im(b)
            for (a, b) in cur.iter().zip(prev) {
                num += a.re.as_f64() * b.re.as_f64() + a.im.as_f64() * b.im.as_f64();
                den += b.re.as_f64() * b.re.as_f64() + b.im.as_f64() * b.im.as_f64();
            }
            pairs += 1;
        }
    }
    if den == 0.0 {
        return Err(Error::contract("gamma estimation over all-zero channels".to_string()));
    }
    Ok(GammaEstimate { gamma_hat: num / den, sample_count: pairs })
}

/// Feedback payload for one sample and slot.
#[derive(Clone, Debug)]
pub struct SlotPayload<R> {
    pub codeword: Vec<R>,
    pub codeword_bits: u64,
    /// Present on the spherical path.
    pub magnitude_code: Option<u32>,
    pub magnitude_saturated: bool,
}

impl<R: Real> SlotPayload<R> {
    pub fn total_bits(&self, mq: &MagnitudeQuantizer) -> u64 {
        self.codeword_bits + if self.magnitude_code.is_some() { mq.bits as u64 } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct MarkovNetPipeline<R> {
    pub slot1: CodecStage<R>,
    /// Codec for slot t at index t−2.
    pub residual_codecs: Vec<CodecStage<R>>,
    pub gamma: R,
    pub spherical: bool,
    pub magnitude_quantizer: MagnitudeQuantizer,
}

impl<R: Real> MarkovNetPipeline<R> {
    pub fn slots(&self) -> usize {
        self.residual_codecs.len() + 1
    }

    fn stage_mut(&mut self, t: usize) -> Result<&mut CodecStage<R>> {
        if t == 1 {
            Ok(&mut self.slot1)
        } else if t >= 2 && t <= self.slots() {
            Ok(&mut self.residual_codecs[t - 2])
        } else {
            Err(Error::contract(format!(
                "slot index {t} outside 1..={}",
                self.slots()
            )))
        }
    }

    /// An all-identity pipeline: the telescoping oracle.
    pub fn identity(slots: usize, gamma: f64, spherical: bool) -> Result<Self> {
        if slots == 0 {
            return Err(Error::config("pipeline needs at least one slot".to_string()));
        }
        Ok(MarkovNetPipeline {
            slot1: CodecStage::Identity,
            residual_codecs: vec![CodecStage::Identity; slots - 1],
            gamma: R::of(gamma),
            spherical,
            magnitude_quantizer: MagnitudeQuantizer::default(),
        })
    }
}

/// Run one codec stage over a batch of matrices (direct CSI for slot 1,
/// residuals afterwards). Handles the spherical split, range normalization,
/// and optional codeword quantization.
fn stage_encode<R: Real>(
    stage: &mut CodecStage<R>,
    spherical: bool,
    mq: &MagnitudeQuantizer,
    inputs: &[CsiMatrix<R>],
    quant: Option<&QuantizerSpec>,
) -> Result<Vec<SlotPayload<R>>> {
    let model = match stage {
        CodecStage::Identity => {
            // Lossless stub: the codeword is the (direction) tensor itself.
            // The spherical path still splits and quantizes the magnitude,
            // so only the codec is replaced by an oracle.
            return Ok(inputs
                .iter()
                .map(|m| {
                    let t = complex_to_real(m);
                    if spherical {
                        let norm = t.sum_squares().sqrt();
                        if norm > R::zero() {
                            let (code, saturated) = mq.encode_magnitude(norm);
                            SlotPayload {
                                codeword: t.data().iter().map(|&v| v / norm).collect(),
                                codeword_bits: t.numel() as u64 * 64,
                                magnitude_code: Some(code),
                                magnitude_saturated: saturated,
                            }
                        } else {
                            SlotPayload {
                                codeword: vec![R::zero(); t.numel()],
                                codeword_bits: t.numel() as u64 * 64,
                                magnitude_code: Some(0),
                                magnitude_saturated: true,
                            }
                        }
                    } else {
                        SlotPayload {
                            codeword: t.data().to_vec(),
                            codeword_bits: t.numel() as u64 * 64,
                            magnitude_code: None,
                            magnitude_saturated: false,
                        }
                    }
                })
                .collect());
        }
        CodecStage::Model(m) => m,
    };
    let norm_scale = model
        .norm_scale
        .ok_or_else(|| Error::contract("codec has no stored range scale".to_string()))?;

    let mut payloads = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_BATCH) {
        // Assemble the normalized batch.
        let mut mags: Vec<Option<(u32, bool)>> = Vec::with_capacity(chunk.len());
        let mut data: Vec<R> = Vec::with_capacity(chunk.len() * 2 * chunk[0].rows() * chunk[0].cols());
        for m in chunk {
            let x = complex_to_real(m);
            if spherical {
                let norm = x.sum_squares().sqrt();
                if norm > R::zero() {
                    mags.push(Some(mq.encode_magnitude(norm)));
                    data.extend(x.data().iter().map(|&v| v / norm / norm_scale));
                } else {
                    // A zero matrix has no direction; feed zeros and let the
                    // saturated magnitude flag the condition.
                    mags.push(Some((0, true)));
                    data.extend(std::iter::repeat(R::zero()).take(x.numel()));
                }
            } else {
                mags.push(None);
                data.extend(x.data().iter().map(|&v| v / norm_scale));
            }
        }
        let shape = [chunk.len(), 2, chunk[0].rows(), chunk[0].cols()];
        let batch = Tensor::from_vec(&shape, data)?;
        let codes = codec::encode(model, &batch)?;
        let latent = codes.shape()[1];

        for (i, mag) in mags.into_iter().enumerate() {
            let raw = &codes.data()[i * latent..(i + 1) * latent];
            let (values, bits) = match quant {
                Some(spec) => {
                    let scale = model.codeword_scale.ok_or_else(|| {
                        Error::contract("codec has no stored codeword scale".to_string())
                    })?;
                    let q = quantize_codeword(raw, spec, scale)?;
                    (q.values, q.bit_count)
                }
                None => (raw.to_vec(), latent as u64 * 64),
            };
            payloads.push(SlotPayload {
                codeword: values,
                codeword_bits: bits,
                magnitude_code: mag.map(|(c, _)| c),
                magnitude_saturated: mag.map(|(_, s)| s).unwrap_or(false),
            });
        }
    }
    Ok(payloads)
}

fn stage_decode<R: Real>(
    stage: &mut CodecStage<R>,
    spherical: bool,
    mq: &MagnitudeQuantizer,
    payloads: &[SlotPayload<R>],
    rd: usize,
    nb: usize,
) -> Result<Vec<CsiMatrix<R>>> {
    let model = match stage {
        CodecStage::Identity => {
            return payloads
                .iter()
                .map(|p| {
                    let t = Tensor::from_vec(&[2, rd, nb], p.codeword.clone())?;
                    if spherical {
                        let code = p.magnitude_code.ok_or_else(|| {
                            Error::contract("spherical payload is missing its magnitude code".to_string())
                        })?;
                        let magnitude: R = mq.decode_magnitude(code);
                        let norm = t.sum_squares().sqrt();
                        if norm > R::zero() {
                            real_to_complex(&sphere::renormalize_merge(&t, magnitude)?)
                        } else {
                            real_to_complex(&t)
                        }
                    } else {
                        real_to_complex(&t)
                    }
                })
                .collect();
        }
        CodecStage::Model(m) => m,
    };
    let norm_scale = model
        .norm_scale
        .ok_or_else(|| Error::contract("codec has no stored range scale".to_string()))?;

    let mut out = Vec::with_capacity(payloads.len());
    for chunk in payloads.chunks(EVAL_BATCH) {
        let latent = model.latent_len();
        let mut data = Vec::with_capacity(chunk.len() * latent);
        for p in chunk {
            if p.codeword.len() != latent {
                return Err(Error::contract(format!(
                    "payload codeword length {} does not match latent {latent}",
                    p.codeword.len()
                )));
            }
            data.extend_from_slice(&p.codeword);
        }
        let batch = Tensor::from_vec(&[chunk.len(), latent], data)?;
        let recon = codec::decode(model, &batch)?;
        let stride = 2 * rd * nb;

        for (i, p) in chunk.iter().enumerate() {
            let slice = &recon.data()[i * stride..(i + 1) * stride];
            let denorm: Vec<R> = slice.iter().map(|&v| v * norm_scale).collect();
            let t = Tensor::from_vec(&[2, rd, nb], denorm)?;
            let result = if spherical {
                let code = p.magnitude_code.ok_or_else(|| {
                    Error::contract("spherical payload is missing its magnitude code".to_string())
                })?;
                let magnitude: R = mq.decode_magnitude(code);
                // Decoder outputs are only approximately unit-norm; project
                // back onto the sphere before applying the magnitude.
                let norm = t.sum_squares().sqrt();
                if norm > R::zero() {
                    sphere::renormalize_merge(&t, magnitude)?
                } else {
                    t
                }
            } else {
                t
            };
            out.push(real_to_complex(&result)?);
        }
    }
    Ok(out)
}

/// Encode slot 1 (no prior) for a batch of samples.
pub fn encode_slot1_batch<R: Real>(
    pipeline: &mut MarkovNetPipeline<R>,
    h1: &[CsiMatrix<R>],
    quant: Option<&QuantizerSpec>,
) -> Result<Vec<SlotPayload<R>>> {
    let (spherical, mq) = (pipeline.spherical, pipeline.magnitude_quantizer);
    stage_encode(&mut pipeline.slot1, spherical, &mq, h1, quant)
}

pub fn decode_slot1_batch<R: Real>(
    pipeline: &mut MarkovNetPipeline<R>,
    payloads: &[SlotPayload<R>],
    rd: usize,
    nb: usize,
) -> Result<Vec<CsiMatrix<R>>> {
    let (spherical, mq) = (pipeline.spherical, pipeline.magnitude_quantizer);
    stage_decode(&mut pipeline.slot1, spherical, &mq, payloads, rd, nb)
}

/// Encode slot t ≥ 2: feed back the residual against γ·Ĥ_{t−1}, where
/// Ĥ_{t−1} is the decoder-side reconstruction (the UE keeps a decoder
/// replica to stay in lockstep with the gNB).
pub fn encode_slot_batch<R: Real>(
    pipeline: &mut MarkovNetPipeline<R>,
    t: usize,
    h: &[CsiMatrix<R>],
    h_prev_hat: &[CsiMatrix<R>],
    quant: Option<&QuantizerSpec>,
) -> Result<Vec<SlotPayload<R>>> {
    if t < 2 {
        return Err(Error::contract(format!("encode_slot handles t >= 2, got {t}")));
    }
    if h.len() != h_prev_hat.len() {
        return Err(Error::contract("mismatched batch lengths".to_string()));
    }
    let gamma = pipeline.gamma;
    let residuals: Vec<CsiMatrix<R>> = h
        .iter()
        .zip(h_prev_hat)
        .map(|(cur, prev)| cur.sub_scaled(gamma, prev))
        .collect::<Result<_>>()?;
    let (spherical, mq) = (pipeline.spherical, pipeline.magnitude_quantizer);
    stage_encode(pipeline.stage_mut(t)?, spherical, &mq, &residuals, quant)
}

pub fn decode_slot_batch<R: Real>(
    pipeline: &mut MarkovNetPipeline<R>,
    t: usize,
    payloads: &[SlotPayload<R>],
    h_prev_hat: &[CsiMatrix<R>],
) -> Result<Vec<CsiMatrix<R>>> {
    if t < 2 {
        return Err(Error::contract(format!("decode_slot handles t >= 2, got {t}")));
    }
    let gamma = pipeline.gamma;
    let (spherical, mq) = (pipeline.spherical, pipeline.magnitude_quantizer);
    let (rd, nb) = (h_prev_hat[0].rows(), h_prev_hat[0].cols());
    let residual_hat = stage_decode(pipeline.stage_mut(t)?, spherical, &mq, payloads, rd, nb)?;
    residual_hat
        .iter()
        .zip(h_prev_hat)
        .map(|(r, prev)| r.add_scaled(gamma, prev))
        .collect()
}

/// Single-sample wrappers around the batch ops.
pub fn encode_slot<R: Real>(
    pipeline: &mut MarkovNetPipeline<R>,
    t: usize,
    h: &CsiMatrix<R>,
    h_prev_hat: &CsiMatrix<R>,
    quant: Option<&QuantizerSpec>,
) -> Result<SlotPayload<R>> {
    Ok(encode_slot_batch(pipeline, t, &[h.clone()], &[h_prev_hat.clone()], quant)?.remove(0))
}

pub fn decode_slot<R: Real>(
    pipeline: &mut MarkovNetPipeline<R>,
    t: usize,
    payload: &SlotPayload<R>,
    h_prev_hat: &CsiMatrix<R>,
) -> Result<CsiMatrix<R>> {
    Ok(decode_slot_batch(pipeline, t, &[payload.clone()], &[h_prev_hat.clone()])?.remove(0))
}

pub fn encode_slot1<R: Real>(
    pipeline: &mut MarkovNetPipeline<R>,
    h1: &CsiMatrix<R>,
    quant: Option<&QuantizerSpec>,
) -> Result<SlotPayload<R>> {
    Ok(encode_slot1_batch(pipeline, &[h1.clone()], quant)?.remove(0))
}

pub fn decode_slot1<R: Real>(
    pipeline: &mut MarkovNetPipeline<R>,
    payload: &SlotPayload<R>,
    rd: usize,
    nb: usize,
) -> Result<CsiMatrix<R>> {
    Ok(decode_slot1_batch(pipeline, &[payload.clone()], rd, nb)?.remove(0))
}

/// Encode a whole sequence at the UE. Returns the payloads and the
/// encoder-side reconstructions produced by its decoder replica (which the
/// gNB must match exactly).
pub fn encode_sequence<R: Real>(
    pipeline: &mut MarkovNetPipeline<R>,
    slots: &[CsiMatrix<R>],
    quant: Option<&QuantizerSpec>,
) -> Result<(Vec<SlotPayload<R>>, Vec<CsiMatrix<R>>)> {
    if slots.len() != pipeline.slots() {
        return Err(Error::contract(format!(
            "sequence has {} slots, pipeline expects {}",
            slots.len(),
            pipeline.slots()
        )));
    }
    let (rd, nb) = (slots[0].rows(), slots[0].cols());
    let slot1_quant = slot1_quant_spec(quant);
    let mut payloads = Vec::with_capacity(slots.len());
    let mut recons = Vec::with_capacity(slots.len());

    let p1 = encode_slot1(pipeline, &slots[0], slot1_quant.as_ref())?;
    recons.push(decode_slot1(pipeline, &p1, rd, nb)?);
    payloads.push(p1);
    for t in 2..=slots.len() {
        let prev = recons[t - 2].clone();
        let p = encode_slot(pipeline, t, &slots[t - 1], &prev, quant)?;
        recons.push(decode_slot(pipeline, t, &p, &prev)?);
        payloads.push(p);
    }
    Ok((payloads, recons))
}

/// Decode a whole sequence at the gNB.
pub fn decode_sequence<R: Real>(
    pipeline: &mut MarkovNetPipeline<R>,
    payloads: &[SlotPayload<R>],
    rd: usize,
    nb: usize,
) -> Result<Vec<CsiMatrix<R>>> {
    if payloads.len() != pipeline.slots() {
        return Err(Error::contract(format!(
            "{} payloads for a {}-slot pipeline",
            payloads.len(),
            pipeline.slots()
        )));
    }
    let mut recons = Vec::with_capacity(payloads.len());
    recons.push(decode_slot1(pipeline, &payloads[0], rd, nb)?);
    for t in 2..=payloads.len() {
        let prev = recons[t - 2].clone();
        recons.push(decode_slot(pipeline, t, &payloads[t - 1], &prev)?);
    }
    Ok(recons)
}

/// Low-rate sweeps keep slot 1 at 8 bits so the differential chain starts
/// from a solid baseline.
pub fn slot1_quant_spec(quant: Option<&QuantizerSpec>) -> Option<QuantizerSpec> {
    quant.map(|q| {
        if q.bits < 8 {
            QuantizerSpec { bits: 8, ..*q }
        } else {
            *q
        }
    })
}

/// Training schedule for the whole pipeline.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PipelineSchedule {
    /// Slot-1 codec epochs (trained from scratch).
    pub epochs_slot1: usize,
    /// Slot-2 codec epochs (from scratch: its CR differs from slot 1's, so
    /// the warm-start rule cannot apply).
    pub epochs_scratch: usize,
    /// Epochs for slots ≥ 3, initialized from the previous slot's codec.
    pub epochs_warm: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PipelineSchedule {
    fn default() -> Self {
        PipelineSchedule {
            epochs_slot1: 1000,
            epochs_scratch: 1000,
            epochs_warm: 150,
            batch_size: 200,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SlotTrainReport {
    pub slot: usize,
    pub warm_started: bool,
    pub report: TrainReport,
}

#[derive(Debug)]
pub struct PipelineTrainOutcome<R> {
    pub pipeline: MarkovNetPipeline<R>,
    pub gamma_estimate: GammaEstimate,
    pub slot_reports: Vec<SlotTrainReport>,
}

/// Direction (or plain normalized) tensors for a list of matrices.
fn training_inputs<R: Real>(mats: &[CsiMatrix<R>], spherical: bool) -> Result<Vec<Tensor<R>>> {
    mats.iter()
        .map(|m| {
            let x = complex_to_real(m);
            if spherical {
                Ok(sphere::split(&x)?.direction)
            } else {
                Ok(x)
            }
        })
        .collect()
}

fn fit_scale<R: Real>(tensors: &[Tensor<R>]) -> Result<R> {
    let mut scale = R::zero();
    for t in tensors {
        for &v in t.data() {
            scale = scale.max(v.abs());
        }
    }
    if scale <= R::zero() {
        return Err(Error::contract("cannot fit a range scale on all-zero data".to_string()))
    }
    Ok(scale)
}

/// Largest |codeword entry| over the training inputs, stored with the model
/// for feedback quantization.
fn fit_codeword_scale<R: Real>(model: &mut CodecModel<R>, inputs: &[Tensor<R>]) -> Result<()> {
    let scale = model.norm_scale.expect("set before training");
    let mut max_abs = R::zero();
    for chunk in inputs.chunks(EVAL_BATCH) {
        let refs: Vec<&Tensor<R>> = chunk.iter().collect();
        let mut data = Vec::new();
        for t in &refs {
            data.extend(t.data().iter().map(|&v| v / scale));
        }
        let mut shape = vec![refs.len()];
        shape.extend_from_slice(refs[0].shape());
        let batch = Tensor::from_vec(&shape, data)?;
        let codes = codec::encode(model, &batch)?;
        for &c in codes.data() {
            max_abs = max_abs.max(c.abs());
        }
    }
    model.codeword_scale = Some(if max_abs > R::zero() { max_abs } else { R::one() });
    Ok(())
}

/// Train one direct (non-differential) codec on a set of matrices: the
/// slot-1 path of MarkovNet, and the whole of SphNet.
pub fn train_direct_codec<R: Real>(
    mats: &[CsiMatrix<R>],
    config: &CodecConfig,
    spherical: bool,
    schedule: &TrainSchedule,
    build_seed: u64,
    checkpoint: Option<&Path>,
) -> Result<(CodecModel<R>, TrainReport)> {
    let inputs = training_inputs(mats, spherical)?;
    let scale = fit_scale(&inputs)?;
    let normalized: Vec<Tensor<R>> = inputs
        .iter()
        .map(|t| {
            let data = t.data().iter().map(|&v| v / scale).collect();
            Tensor::from_vec(t.shape(), data).expect("shape unchanged")
        })
        .collect();
    let mut model = codec::build(config, build_seed)?;
    model.norm_scale = Some(scale);
    let report = codec::train(&mut model, &normalized, schedule, checkpoint)?;
    fit_codeword_scale(&mut model, &inputs)?;
    if let Some(path) = checkpoint {
        // Re-persist with the fitted codeword scale.
        crate::io::save_codec(&model, path)?;
    }
    Ok((model, report))
}

/// Train the full differential pipeline on the training split.
///
/// Slot 1 trains from scratch at CR₁. Slot 2 trains from scratch at CR₂
/// (different latent size, no warm start possible). Slots ≥ 3 initialize
/// from the previous slot's trained codec and share slot 2's range scale,
/// so the transfer stays meaningful. Residuals are always formed against
/// the already-trained prefix's reconstructions, never against the truth.
pub fn train_pipeline<R: Real>(
    train_data: &CsiSequence<R>,
    cr1: CompressionRatio,
    cr2: CompressionRatio,
    head: LatentHead,
    spherical: bool,
    schedule: &PipelineSchedule,
    out_dir: Option<&Path>,
) -> Result<PipelineTrainOutcome<R>> {
    let slots = train_data.slots();
    if slots < 2 {
        return Err(Error::config("pipeline training needs at least 2 slots".to_string()));
    }
    let gamma_estimate = estimate_gamma(train_data)?;
    let gamma = R::of(gamma_estimate.gamma_hat);
    let mq = MagnitudeQuantizer::default();
    let k = train_data.k;

    let make_config = |cr: CompressionRatio| -> CodecConfig {
        match head {
            LatentHead::Fc => CodecConfig {
                rd: train_data.rd(),
                nb: train_data.nb(),
                ..CodecConfig::fc(cr)
            },
            LatentHead::Cnn => CodecConfig {
                rd: train_data.rd(),
                nb: train_data.nb(),
                ..CodecConfig::cnn(cr)
            },
        }
    };

    // Slot 1.
    let h1: Vec<CsiMatrix<R>> = (0..k).map(|i| train_data.slot_matrix(i, 0)).collect();
    let ckpt = |slot: usize| out_dir.map(|d| d.join(format!("slot{slot:02}.ckpt")));
    let slot1_sched = TrainSchedule {
        epochs: schedule.epochs_slot1,
        batch_size: schedule.batch_size,
        learning_rate: schedule.learning_rate,
        seed: schedule.seed,
    };
    let (slot1_model, slot1_report) = train_direct_codec(
        &h1,
        &make_config(cr1),
        spherical,
        &slot1_sched,
        schedule.seed,
        ckpt(1).as_deref(),
    )?;

    let mut pipeline = MarkovNetPipeline {
        slot1: CodecStage::Model(slot1_model),
        residual_codecs: Vec::new(),
        gamma,
        spherical,
        magnitude_quantizer: mq,
    };
    let mut slot_reports = vec![SlotTrainReport { slot: 1, warm_started: false, report: slot1_report }];

    // Reconstructions of the trained prefix, advanced slot by slot.
    let p1 = encode_slot1_batch(&mut pipeline, &h1, None)?;
    let mut prev_hat = decode_slot1_batch(&mut pipeline, &p1, train_data.rd(), train_data.nb())?;
    let mut residual_scale: Option<R> = None;

    for t in 2..=slots {
        let ht: Vec<CsiMatrix<R>> = (0..k).map(|i| train_data.slot_matrix(i, t - 1)).collect();
        let residuals: Vec<CsiMatrix<R>> = ht
            .iter()
            .zip(&prev_hat)
            .map(|(cur, prev)| cur.sub_scaled(gamma, prev))
            .collect::<Result<_>>()?;
        let inputs = training_inputs(&residuals, spherical)?;

        let warm = t > 2;
        let mut model = if warm {
            // Clone the previous slot's codec, parameters and statistics.
            match pipeline.residual_codecs.last().unwrap() {
                CodecStage::Model(m) => m.clone(),
                CodecStage::Identity => unreachable!("training never inserts identity stages"),
            }
        } else {
            let mut m = codec::build(&make_config(cr2), schedule.seed.wrapping_add(t as u64))?;
            let scale = fit_scale(&inputs)?;
            residual_scale = Some(scale);
            m.norm_scale = Some(scale);
            m
        };
        // One shared residual range scale keeps warm starts meaningful.
        let scale = residual_scale.expect("set at slot 2");
        model.norm_scale = Some(scale);

        let normalized: Vec<Tensor<R>> = inputs
            .iter()
            .map(|x| {
                let data = x.data().iter().map(|&v| v / scale).collect();
                Tensor::from_vec(x.shape(), data).expect("shape unchanged")
            })
            .collect();
        let sched = TrainSchedule {
            epochs: if warm { schedule.epochs_warm } else { schedule.epochs_scratch },
            batch_size: schedule.batch_size,
            learning_rate: schedule.learning_rate,
            seed: schedule.seed.wrapping_add(t as u64),
        };
        let report = codec::train(&mut model, &normalized, &sched, ckpt(t).as_deref())?;
        fit_codeword_scale(&mut model, &inputs)?;
        if let Some(path) = ckpt(t) {
            crate::io::save_codec(&model, &path)?;
        }
        pipeline.residual_codecs.push(CodecStage::Model(model));
        slot_reports.push(SlotTrainReport { slot: t, warm_started: warm, report });

        // Advance the reconstruction prefix for the next slot's residuals.
        if t < slots {
            let payloads = encode_slot_batch(&mut pipeline, t, &ht, &prev_hat, None)?;
            prev_hat = decode_slot_batch(&mut pipeline, t, &payloads, &prev_hat)?;
        }
    }

    if let Some(dir) = out_dir {
        save_pipeline_manifest(&pipeline, &gamma_estimate, dir)?;
    }
    Ok(PipelineTrainOutcome { pipeline, gamma_estimate, slot_reports })
}

/// Per-slot evaluation record.
#[derive(Clone, Debug)]
pub struct SlotEval {
    pub slot: usize,
    pub nmse: crate::metrics::Nmse,
    /// Mean feedback bits per sample for this slot, magnitude included.
    pub bits_per_sample: f64,
    /// E‖H_t − γ̂·Ĥ_{t−1}‖² / E‖H_t‖², slots ≥ 2.
    pub residual_energy_ratio: Option<f64>,
}

/// Run the pipeline over a test set and report accuracy and feedback cost
/// per slot. `quant` applies codeword quantization at inference only.
pub fn evaluate_pipeline<R: Real>(
    pipeline: &mut MarkovNetPipeline<R>,
    test: &CsiSequence<R>,
    quant: Option<&QuantizerSpec>,
) -> Result<Vec<SlotEval>> {
    if test.slots() != pipeline.slots() {
        return Err(Error::contract(format!(
            "test set has {} slots, pipeline expects {}",
            test.slots(),
            pipeline.slots()
        )));
    }
    let k = test.k;
    let (rd, nb) = (test.rd(), test.nb());
    let mq = pipeline.magnitude_quantizer;
    let mut rows = Vec::with_capacity(test.slots());

    let h1: Vec<CsiMatrix<R>> = (0..k).map(|i| test.slot_matrix(i, 0)).collect();
    let slot1_quant = slot1_quant_spec(quant);
    let payloads = encode_slot1_batch(pipeline, &h1, slot1_quant.as_ref())?;
    let mut prev_hat = decode_slot1_batch(pipeline, &payloads, rd, nb)?;
    rows.push(SlotEval {
        slot: 1,
        nmse: crate::metrics::nmse(&h1, &prev_hat)?,
        bits_per_sample: payloads.iter().map(|p| p.total_bits(&mq) as f64).sum::<f64>() / k as f64,
        residual_energy_ratio: None,
    });

    for t in 2..=test.slots() {
        let ht: Vec<CsiMatrix<R>> = (0..k).map(|i| test.slot_matrix(i, t - 1)).collect();
        let gamma = pipeline.gamma;
        let mut res_energy = 0.0;
        let mut sig_energy = 0.0;
        for (cur, prev) in ht.iter().zip(&prev_hat) {
            res_energy += cur.sub_scaled(gamma, prev)?.frobenius_sq().as_f64();
            sig_energy += cur.frobenius_sq().as_f64();
        }
        let payloads = encode_slot_batch(pipeline, t, &ht, &prev_hat, quant)?;
        let recon = decode_slot_batch(pipeline, t, &payloads, &prev_hat)?;
        rows.push(SlotEval {
            slot: t,
            nmse: crate::metrics::nmse(&ht, &recon)?,
            bits_per_sample: payloads.iter().map(|p| p.total_bits(&mq) as f64).sum::<f64>() / k as f64,
            residual_energy_ratio: Some(res_energy / sig_energy),
        });
        prev_hat = recon;
    }
    Ok(rows)
}

/// Evaluate a single direct codec applied independently at every slot: the
/// per-slot SphNet baseline (γ plays no role).
pub fn evaluate_direct_codec<R: Real>(
    model: &mut CodecModel<R>,
    spherical: bool,
    test: &CsiSequence<R>,
    quant: Option<&QuantizerSpec>,
) -> Result<Vec<SlotEval>> {
    let mq = MagnitudeQuantizer::default();
    let k = test.k;
    let (rd, nb) = (test.rd(), test.nb());
    let mut rows = Vec::with_capacity(test.slots());
    for t in 1..=test.slots() {
        let ht: Vec<CsiMatrix<R>> = (0..k).map(|i| test.slot_matrix(i, t - 1)).collect();
        let mut stage = CodecStage::Model(model.clone());
        let payloads = stage_encode(&mut stage, spherical, &mq, &ht, quant)?;
        let recon = stage_decode(&mut stage, spherical, &mq, &payloads, rd, nb)?;
        rows.push(SlotEval {
            slot: t,
            nmse: crate::metrics::nmse(&ht, &recon)?,
            bits_per_sample: payloads.iter().map(|p| p.total_bits(&mq) as f64).sum::<f64>() / k as f64,
            residual_energy_ratio: None,
        });
    }
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
struct ManifestCodec {
    slot: usize,
    kind: String,
    checkpoint: Option<String>,
    cr: Option<String>,
    head: Option<String>,
    norm_scale: Option<f64>,
    codeword_scale: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct PipelineManifest {
    slots: usize,
    gamma: f64,
    gamma_sample_pairs: usize,
    spherical: bool,
    magnitude_bits: u32,
    magnitude_min_db: f64,
    magnitude_max_db: f64,
    codecs: Vec<ManifestCodec>,
}

/// Write `pipeline.toml` beside the per-slot checkpoints.
pub fn save_pipeline_manifest<R: Real>(
    pipeline: &MarkovNetPipeline<R>,
    gamma_estimate: &GammaEstimate,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let describe = |slot: usize, stage: &CodecStage<R>| -> ManifestCodec {
        match stage {
            CodecStage::Identity => ManifestCodec {
                slot,
                kind: "identity".into(),
                checkpoint: None,
                cr: None,
                head: None,
                norm_scale: None,
                codeword_scale: None,
            },
            CodecStage::Model(m) => ManifestCodec {
                slot,
                kind: "model".into(),
                checkpoint: Some(format!("slot{slot:02}.ckpt")),
                cr: Some(m.config.cr.to_string()),
                head: Some(match m.config.head {
                    LatentHead::Fc => "fc".into(),
                    LatentHead::Cnn => "cnn".into(),
                }),
                norm_scale: m.norm_scale.map(|v| v.as_f64()),
                codeword_scale: m.codeword_scale.map(|v| v.as_f64()),
            },
        }
    };
    let mut codecs = vec![describe(1, &pipeline.slot1)];
    for (i, stage) in pipeline.residual_codecs.iter().enumerate() {
        codecs.push(describe(i + 2, stage));
    }
    let manifest = PipelineManifest {
        slots: pipeline.slots(),
        gamma: pipeline.gamma.as_f64(),
        gamma_sample_pairs: gamma_estimate.sample_count,
        spherical: pipeline.spherical,
        magnitude_bits: pipeline.magnitude_quantizer.bits,
        magnitude_min_db: pipeline.magnitude_quantizer.min_db,
        magnitude_max_db: pipeline.magnitude_quantizer.max_db,
        codecs,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::config(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("pipeline.toml"), text)?;
    Ok(())
}

/// Load a pipeline saved by [`train_pipeline`] from its directory.
pub fn load_pipeline<R: Real>(dir: &Path) -> Result<MarkovNetPipeline<R>> {
    let manifest_path = dir.join("pipeline.toml");
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest: PipelineManifest = toml::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.display().to_string(),
        details: e.to_string(),
    })?;
    let load_stage = |mc: &ManifestCodec| -> Result<CodecStage<R>> {
        match mc.kind.as_str() {
            "identity" => Ok(CodecStage::Identity),
            "model" => {
                let rel = mc.checkpoint.as_ref().ok_or_else(|| Error::Format {
                    path: manifest_path.display().to_string(),
                    details: format!("slot {} has no checkpoint path", mc.slot),
                })?;
                Ok(CodecStage::Model(crate::io::load_codec(&dir.join(rel))?))
            }
            other => Err(Error::Format {
                path: manifest_path.display().to_string(),
                details: format!("unknown codec kind '{other}'"),
            }),
        }
    };
    if manifest.codecs.len() != manifest.slots {
        return Err(Error::Format {
            path: manifest_path.display().to_string(),
            details: "codec list does not cover every slot".into(),
        });
    }
    let slot1 = load_stage(&manifest.codecs[0])?;
    let residual_codecs = manifest.codecs[1..]
        .iter()
        .map(load_stage)
        .collect::<Result<Vec<_>>>()?;
    Ok(MarkovNetPipeline {
        slot1,
        residual_codecs,
        gamma: R::of(manifest.gamma),
        spherical: manifest.spherical,
        magnitude_quantizer: MagnitudeQuantizer::new(
            manifest.magnitude_bits,
            manifest.magnitude_min_db,
            manifest.magnitude_max_db,
        )?,
    })
}
