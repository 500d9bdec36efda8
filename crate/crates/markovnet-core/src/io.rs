//! Binary file formats.
//!
//! Model checkpoint: magic `MNETCKPT`, format version u32, then per-layer
//! records of (kind tag u32, shape list as u32s, parameter payload as
//! little-endian f64). Bit-exact round trips.
//!
//! Dataset: magic `CSIDSET1`, header (K, T, Rd, Nb as u32, gamma_true and
//! preset name, then the remaining generator fields), little-endian f32
//! interleaved real/imag, sample-major then slot-major, plus a sidecar text
//! manifest with the full config and seed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex;

use crate::channel::{ChannelConfig, CsiSequence};
use crate::codec::{CodecConfig, CodecLayer, CodecModel, CompressionRatio, Layer, LatentHead, Stage};
use crate::scalar::Real;
use crate::tensor::{RunningStats, Tensor};
use crate::{Error, Result};

const CKPT_MAGIC: &[u8; 8] = b"MNETCKPT";
const CKPT_VERSION: u32 = 1;
const DSET_MAGIC: &[u8; 8] = b"CSIDSET1";

// Record kinds. Bit 8 of the tag marks a latent-head layer.
const KIND_META: u32 = 0;
const KIND_CONV_W: u32 = 1;
const KIND_CONV_B: u32 = 2;
const KIND_BN_GAMMA: u32 = 3;
const KIND_BN_BETA: u32 = 4;
const KIND_BN_MEAN: u32 = 5;
const KIND_BN_VAR: u32 = 6;
const KIND_AFFINE_W: u32 = 7;
const KIND_AFFINE_B: u32 = 8;
const KIND_RESHAPE: u32 = 9;
const KIND_LEAKY: u32 = 10;
const KIND_TANH: u32 = 11;
const KIND_END_ENCODER: u32 = 255;
const HEAD_FLAG: u32 = 1 << 8;

fn fmt_err(path: &Path, details: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), details: details.into() }
}

struct RecordWriter<W: Write> {
    out: W,
}

impl<W: Write> RecordWriter<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn record(&mut self, tag: u32, shape: &[u32], payload: &[f64]) -> Result<()> {
        self.u32(tag)?;
        self.u32(shape.len() as u32)?;
        for &s in shape {
            self.u32(s)?;
        }
        self.u32(payload.len() as u32)?;
        for &p in payload {
            self.f64(p)?;
        }
        Ok(())
    }
}

struct RecordReader<'p, Rd: Read> {
    inp: Rd,
    path: &'p Path,
}

impl<Rd: Read> RecordReader<'_, Rd> {
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.inp
            .read_exact(&mut b)
            .map_err(|e| fmt_err(self.path, format!("truncated u32: {e}")))?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.inp
            .read_exact(&mut b)
            .map_err(|e| fmt_err(self.path, format!("truncated f64: {e}")))?;
        Ok(f64::from_le_bytes(b))
    }

    fn record(&mut self) -> Result<(u32, Vec<u32>, Vec<f64>)> {
        let tag = self.u32()?;
        let ndim = self.u32()? as usize;
        if ndim > 1 << 16 {
            return Err(fmt_err(self.path, format!("implausible shape rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()?);
        }
        let n = self.u32()? as usize;
        if n > 1 << 28 {
            return Err(fmt_err(self.path, format!("implausible payload length {n}")));
        }
        let mut payload = Vec::with_capacity(n);
        for _ in 0..n {
            payload.push(self.f64()?);
        }
        Ok((tag, shape, payload))
    }
}

fn tensor_payload<R: Real>(t: &Tensor<R>) -> Vec<f64> {
    t.data().iter().map(|&v| v.as_f64()).collect()
}

fn tensor_shape(t: &Tensor<impl Real>) -> Vec<u32> {
    t.shape().iter().map(|&s| s as u32).collect()
}

fn write_stack<R: Real, W: Write>(w: &mut RecordWriter<W>, stack: &[CodecLayer<R>]) -> Result<()> {
    for cl in stack {
        let head = if cl.stage == Stage::Head { HEAD_FLAG } else { 0 };
        match &cl.layer {
            Layer::Conv2d { weights, bias } => {
                w.record(KIND_CONV_W | head, &tensor_shape(weights), &tensor_payload(weights))?;
                w.record(KIND_CONV_B | head, &tensor_shape(bias), &tensor_payload(bias))?;
            }
            Layer::Affine { weights, bias } => {
                w.record(KIND_AFFINE_W | head, &tensor_shape(weights), &tensor_payload(weights))?;
                w.record(KIND_AFFINE_B | head, &tensor_shape(bias), &tensor_payload(bias))?;
            }
            Layer::BatchNorm { gamma, beta, running } => {
                w.record(KIND_BN_GAMMA | head, &tensor_shape(gamma), &tensor_payload(gamma))?;
                w.record(KIND_BN_BETA | head, &tensor_shape(beta), &tensor_payload(beta))?;
                let mean: Vec<f64> = running.mean.iter().map(|&v| v.as_f64()).collect();
                let var: Vec<f64> = running.var.iter().map(|&v| v.as_f64()).collect();
                w.record(KIND_BN_MEAN | head, &[mean.len() as u32], &mean)?;
                w.record(KIND_BN_VAR | head, &[var.len() as u32], &var)?;
            }
            Layer::Reshape { shape } => {
                let s: Vec<u32> = shape.iter().map(|&v| v as u32).collect();
                w.record(KIND_RESHAPE | head, &s, &[])?;
            }
            Layer::LeakyRelu { slope } => w.record(KIND_LEAKY | head, &[], &[*slope])?,
            Layer::Tanh => w.record(KIND_TANH | head, &[], &[])?,
        }
    }
    Ok(())
}

pub fn save_codec<R: Real>(model: &CodecModel<R>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = RecordWriter { out: BufWriter::new(File::create(path)?) };
    w.out.write_all(CKPT_MAGIC)?;
    w.u32(CKPT_VERSION)?;

    let cfg = &model.config;
    let mut meta_shape = vec![
        match cfg.head {
            LatentHead::Fc => 0u32,
            LatentHead::Cnn => 1,
        },
        cfg.cr.num,
        cfg.cr.den,
        cfg.rd as u32,
        cfg.nb as u32,
        cfg.kernel as u32,
        cfg.batch_norm as u32,
        cfg.linear as u32,
        (model.seed >> 32) as u32,
        (model.seed & 0xFFFF_FFFF) as u32,
        cfg.enc_widths.len() as u32,
        cfg.dec_widths.len() as u32,
    ];
    meta_shape.extend(cfg.enc_widths.iter().map(|&v| v as u32));
    meta_shape.extend(cfg.dec_widths.iter().map(|&v| v as u32));
    // Scales use -1 as the "unset" sentinel (they are strictly positive).
    let meta_payload = [
        cfg.leaky_slope,
        model.norm_scale.map_or(-1.0, |v| v.as_f64()),
        model.codeword_scale.map_or(-1.0, |v| v.as_f64()),
    ];
    w.record(KIND_META, &meta_shape, &meta_payload)?;

    write_stack(&mut w, &model.encoder)?;
    w.record(KIND_END_ENCODER, &[], &[])?;
    write_stack(&mut w, &model.decoder)?;
    w.out.flush()?;
    Ok(())
}

fn make_tensor<R: Real>(path: &Path, shape: &[u32], payload: &[f64], grad: bool) -> Result<Tensor<R>> {
    let shape: Vec<usize> = shape.iter().map(|&s| s as usize).collect();
    let data: Vec<R> = payload.iter().map(|&v| R::of(v)).collect();
    let mut t = Tensor::from_vec(&shape, data)
        .map_err(|e| fmt_err(path, format!("inconsistent tensor record: {e}")))?;
    t.set_requires_grad(grad);
    Ok(t)
}

pub fn load_codec<R: Real>(path: &Path) -> Result<CodecModel<R>> {
    let mut r = RecordReader { inp: BufReader::new(File::open(path)?), path };
    let mut magic = [0u8; 8];
    r.inp
        .read_exact(&mut magic)
        .map_err(|e| fmt_err(path, format!("missing magic: {e}")))?;
    if &magic != CKPT_MAGIC {
        return Err(fmt_err(path, "not a model checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(fmt_err(path, format!("unsupported checkpoint version {version}")));
    }

    let (tag, meta_shape, meta_payload) = r.record()?;
    if tag != KIND_META || meta_shape.len() < 12 || meta_payload.len() != 3 {
        return Err(fmt_err(path, "malformed checkpoint metadata"));
    }
    let enc_n = meta_shape[10] as usize;
    let dec_n = meta_shape[11] as usize;
    if meta_shape.len() != 12 + enc_n + dec_n {
        return Err(fmt_err(path, "metadata width list truncated"));
    }
    let config = CodecConfig {
        rd: meta_shape[3] as usize,
        nb: meta_shape[4] as usize,
        enc_widths: meta_shape[12..12 + enc_n].iter().map(|&v| v as usize).collect(),
        dec_widths: meta_shape[12 + enc_n..].iter().map(|&v| v as usize).collect(),
        kernel: meta_shape[5] as usize,
        head: if meta_shape[0] == 0 { LatentHead::Fc } else { LatentHead::Cnn },
        cr: CompressionRatio::new(meta_shape[1], meta_shape[2])?,
        batch_norm: meta_shape[6] != 0,
        leaky_slope: meta_payload[0],
        linear: meta_shape[7] != 0,
    };
    let seed = ((meta_shape[8] as u64) << 32) | meta_shape[9] as u64;
    let norm_scale = (meta_payload[1] >= 0.0).then(|| R::of(meta_payload[1]));
    let codeword_scale = (meta_payload[2] >= 0.0).then(|| R::of(meta_payload[2]));

    let mut encoder: Vec<CodecLayer<R>> = Vec::new();
    let mut decoder: Vec<CodecLayer<R>> = Vec::new();
    let mut in_decoder = false;
    let mut pending_conv: Option<(Tensor<R>, Stage)> = None;
    let mut pending_affine: Option<(Tensor<R>, Stage)> = None;
    let mut pending_bn: Option<(Tensor<R>, Option<Tensor<R>>, Option<Vec<R>>, Stage)> = None;

    loop {
        let rec = match r.record() {
            Ok(rec) => rec,
            Err(_) if in_decoder => break,
            Err(e) => return Err(e),
        };
        let (tag, shape, payload) = rec;
        let kind = tag & 0xFF;
        let stage = if tag & HEAD_FLAG != 0 { Stage::Head } else { Stage::Trunk };
        let stack: &mut Vec<CodecLayer<R>> = if in_decoder { &mut decoder } else { &mut encoder };
        match kind {
            KIND_END_ENCODER => {
                in_decoder = true;
            }
            KIND_CONV_W => pending_conv = Some((make_tensor(path, &shape, &payload, true)?, stage)),
            KIND_CONV_B => {
                let (weights, st) = pending_conv
                    .take()
                    .ok_or_else(|| fmt_err(path, "conv bias without weights"))?;
                let bias = make_tensor(path, &shape, &payload, !config.linear)?;
                stack.push(CodecLayer { layer: Layer::Conv2d { weights, bias }, stage: st });
            }
            KIND_AFFINE_W => pending_affine = Some((make_tensor(path, &shape, &payload, true)?, stage)),
            KIND_AFFINE_B => {
                let (weights, st) = pending_affine
                    .take()
                    .ok_or_else(|| fmt_err(path, "affine bias without weights"))?;
                let bias = make_tensor(path, &shape, &payload, !config.linear)?;
                stack.push(CodecLayer { layer: Layer::Affine { weights, bias }, stage: st });
            }
            KIND_BN_GAMMA => pending_bn = Some((make_tensor(path, &shape, &payload, true)?, None, None, stage)),
            KIND_BN_BETA => {
                let entry = pending_bn.as_mut().ok_or_else(|| fmt_err(path, "bn beta without gamma"))?;
                entry.1 = Some(make_tensor(path, &shape, &payload, true)?);
            }
            KIND_BN_MEAN => {
                let entry = pending_bn.as_mut().ok_or_else(|| fmt_err(path, "bn mean without gamma"))?;
                entry.2 = Some(payload.iter().map(|&v| R::of(v)).collect());
            }
            KIND_BN_VAR => {
                let (gamma, beta, mean, st) =
                    pending_bn.take().ok_or_else(|| fmt_err(path, "bn var without gamma"))?;
                let beta = beta.ok_or_else(|| fmt_err(path, "bn missing beta"))?;
                let mean = mean.ok_or_else(|| fmt_err(path, "bn missing running mean"))?;
                let var: Vec<R> = payload.iter().map(|&v| R::of(v)).collect();
                let mut running = RunningStats::new(mean.len(), 0.9, 1e-5);
                running.mean = mean;
                running.var = var;
                stack.push(CodecLayer { layer: Layer::BatchNorm { gamma, beta, running }, stage: st });
            }
            KIND_RESHAPE => {
                let s: Vec<usize> = shape.iter().map(|&v| v as usize).collect();
                stack.push(CodecLayer { layer: Layer::Reshape { shape: s }, stage });
            }
            KIND_LEAKY => {
                let slope = *payload.first().ok_or_else(|| fmt_err(path, "leaky record missing slope"))?;
                stack.push(CodecLayer { layer: Layer::LeakyRelu { slope }, stage });
            }
            KIND_TANH => stack.push(CodecLayer { layer: Layer::Tanh, stage }),
            other => return Err(fmt_err(path, format!("unknown record kind {other}"))),
        }
        if kind == KIND_TANH && in_decoder {
            // tanh is always the final decoder record in this architecture;
            // keep reading anyway in case of future layouts.
        }
    }

    Ok(CodecModel { config, encoder, decoder, norm_scale, codeword_scale, seed })
}

pub fn save_dataset<R: Real>(seq: &CsiSequence<R>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(DSET_MAGIC)?;
    let cfg = &seq.config;
    for v in [seq.k as u32, cfg.slots as u32, cfg.rd as u32, cfg.nb as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&cfg.gamma_true.to_le_bytes())?;
    let preset = cfg.preset.as_bytes();
    out.write_all(&(preset.len() as u32).to_le_bytes())?;
    out.write_all(preset)?;
    out.write_all(&(cfg.nf as u32).to_le_bytes())?;
    out.write_all(&(cfg.num_paths as u32).to_le_bytes())?;
    out.write_all(&cfg.path_decay.to_le_bytes())?;
    out.write_all(&cfg.power_spread_db.to_le_bytes())?;
    out.write_all(&cfg.seed.to_le_bytes())?;
    for &s in &seq.power_scales {
        out.write_all(&(s.as_f64() as f32).to_le_bytes())?;
    }
    for c in seq.raw() {
        out.write_all(&(c.re.as_f64() as f32).to_le_bytes())?;
        out.write_all(&(c.im.as_f64() as f32).to_le_bytes())?;
    }
    out.flush()?;

    let manifest = path.with_extension("manifest.txt");
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| fmt_err(path, format!("manifest serialization: {e}")))?;
    std::fs::write(manifest, format!("# dataset manifest\nsamples = {}\n\n{text}", seq.k))?;
    Ok(())
}

pub fn load_dataset<R: Real>(path: &Path) -> Result<CsiSequence<R>> {
    let mut r = RecordReader { inp: BufReader::new(File::open(path)?), path };
    let mut magic = [0u8; 8];
    r.inp
        .read_exact(&mut magic)
        .map_err(|e| fmt_err(path, format!("missing magic: {e}")))?;
    if &magic != DSET_MAGIC {
        return Err(fmt_err(path, "not a dataset file (bad magic)"));
    }
    let k = r.u32()? as usize;
    let slots = r.u32()? as usize;
    let rd = r.u32()? as usize;
    let nb = r.u32()? as usize;
    let gamma = r.f64()?;
    let plen = r.u32()? as usize;
    if plen > 4096 {
        return Err(fmt_err(path, "implausible preset name length"));
    }
    let mut pbytes = vec![0u8; plen];
    r.inp
        .read_exact(&mut pbytes)
        .map_err(|e| fmt_err(path, format!("truncated preset: {e}")))?;
    let preset = String::from_utf8(pbytes).map_err(|_| fmt_err(path, "preset not UTF-8"))?;
    let nf = r.u32()? as usize;
    let num_paths = r.u32()? as usize;
    let path_decay = r.f64()?;
    let power_spread_db = r.f64()?;
    let mut seed_b = [0u8; 8];
    r.inp
        .read_exact(&mut seed_b)
        .map_err(|e| fmt_err(path, format!("truncated seed: {e}")))?;
    let seed = u64::from_le_bytes(seed_b);

    let f32_at = |r: &mut RecordReader<BufReader<File>>| -> Result<f32> {
        let mut b = [0u8; 4];
        r.inp
            .read_exact(&mut b)
            .map_err(|e| fmt_err(path, format!("truncated payload: {e}")))?;
        Ok(f32::from_le_bytes(b))
    };
    let mut power_scales = Vec::with_capacity(k);
    for _ in 0..k {
        power_scales.push(R::of(f32_at(&mut r)? as f64));
    }
    let total = k * slots * rd * nb;
    let mut data = Vec::with_capacity(total);
    for _ in 0..total {
        let re = f32_at(&mut r)?;
        let im = f32_at(&mut r)?;
        data.push(Complex::new(R::of(re as f64), R::of(im as f64)));
    }

    let config = ChannelConfig {
        nb,
        nf,
        rd,
        gamma_true: gamma,
        num_paths,
        path_decay,
        power_spread_db,
        slots,
        seed,
        preset,
    };
    let sample_seeds = (0..k).map(|i| crate::channel::derived_seed(seed, i)).collect();
    Ok(CsiSequence::from_raw(config, k, data, power_scales, sample_seeds))
}
