//! Experiment orchestration: manifests in, deterministic CSV reports out.
//!
//! A manifest pins everything (dataset preset and sizes, pipeline CRs and
//! heads, schedules, quantizer sweeps, seeds); reports embed the manifest
//! hash so every row is reproducible from its header block.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{self, ChannelConfig, CsiSequence};
use crate::codec::{CodecConfig, CompressionRatio, LatentHead};
use crate::markovnet::{self, MarkovNetPipeline, PipelineSchedule, SlotEval};
use crate::metrics::to_db;
use crate::quantizer::{QuantizerMode, QuantizerSpec};
use crate::scalar::Real;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub preset: String,
    pub k_train: usize,
    pub k_test: usize,
    pub slots: usize,
    /// Override the preset's AR coefficient (rarely needed).
    pub gamma: Option<f64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { preset: "slow".into(), k_train: 5000, k_test: 1000, slots: 10, gamma: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub cr1: String,
    pub cr2s: Vec<String>,
    pub head: String,
    pub spherical: bool,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        PipelineSpec {
            cr1: "1/4".into(),
            cr2s: vec!["1/4".into(), "1/16".into(), "1/64".into()],
            head: "fc".into(),
            spherical: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub pipeline: PipelineSpec,
    pub schedule: PipelineSchedule,
    /// Codeword bit widths to sweep at evaluation (empty: unquantized only).
    pub quant_bits: Vec<u32>,
    pub mu: f64,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        ExperimentManifest {
            name: "experiment".into(),
            seed: 0,
            dataset: DatasetSpec::default(),
            pipeline: PipelineSpec::default(),
            schedule: PipelineSchedule::default(),
            quant_bits: vec![],
            mu: 255.0,
        }
    }
}

impl ExperimentManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("manifest parse: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("manifest serialize: {e}")))
    }

    /// Hash of the canonical serialization; pins reports to manifests.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml()?;
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        Ok(hex_prefix(&h.finalize(), 16))
    }

    pub fn channel_config(&self) -> Result<ChannelConfig> {
        let mut cfg = ChannelConfig::preset(&self.dataset.preset)?;
        cfg.slots = self.dataset.slots;
        cfg.seed = self.seed;
        if let Some(g) = self.dataset.gamma {
            cfg.gamma_true = g;
        }
        Ok(cfg)
    }

    pub fn head(&self) -> Result<LatentHead> {
        match self.pipeline.head.as_str() {
            "fc" => Ok(LatentHead::Fc),
            "cnn" => Ok(LatentHead::Cnn),
            other => Err(Error::config(format!("unknown head '{other}' (fc|cnn)"))),
        }
    }
}

fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().take(n).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// One NMSE report row.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub cr2: String,
    pub head: String,
    pub quant_bits: Option<u32>,
    pub slot: usize,
    pub nmse_linear: f64,
    pub nmse_db: f64,
    pub bits_per_sample: f64,
}

#[derive(Debug, Default)]
pub struct EvalReport {
    pub manifest_hash: String,
    pub rows: Vec<EvalRow>,
    pub cost_rows: Vec<CostRow>,
}

/// One cost report row (per codec of one pipeline config).
#[derive(Clone, Debug)]
pub struct CostRow {
    pub config: String,
    pub head: String,
    pub params: u64,
    pub mac_weight_params: u64,
    pub head_params: u64,
    pub flops: u64,
    pub head_flops: u64,
}

fn slot_rows(cr2: &str, head: &str, bits: Option<u32>, evals: &[SlotEval]) -> Vec<EvalRow> {
    evals
        .iter()
        .map(|e| EvalRow {
            cr2: cr2.to_string(),
            head: head.to_string(),
            quant_bits: bits,
            slot: e.slot,
            nmse_linear: e.nmse.linear,
            nmse_db: e.nmse.db,
            bits_per_sample: e.bits_per_sample,
        })
        .collect()
}

/// Train and evaluate every (CR₂, quantizer) combination in the manifest.
/// Deterministic under a fixed manifest; reports come back in manifest
/// order.
pub fn run_experiment<R: Real>(
    manifest: &ExperimentManifest,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let cfg = manifest.channel_config()?;
    let total = manifest.dataset.k_train + manifest.dataset.k_test;
    let all = channel::generate::<R>(&cfg, total)?;
    let (train, test) = all.split_at(manifest.dataset.k_train);

    let cr1 = CompressionRatio::parse(&manifest.pipeline.cr1)?;
    let head = manifest.head()?;
    let head_name = manifest.pipeline.head.clone();
    let mut report = EvalReport { manifest_hash: manifest.hash()?, ..Default::default() };

    for cr2_text in &manifest.pipeline.cr2s {
        let cr2 = CompressionRatio::parse(cr2_text)?;
        let pipe_dir = out_dir.map(|d| d.join(format!("pipeline_cr2_{}_{}", cr2.num, cr2.den)));
        let outcome = markovnet::train_pipeline::<R>(
            &train,
            cr1,
            cr2,
            head,
            manifest.pipeline.spherical,
            &manifest.schedule,
            pipe_dir.as_deref(),
        )?;
        let mut pipeline = outcome.pipeline;

        let evals = markovnet::evaluate_pipeline(&mut pipeline, &test, None)?;
        report.rows.extend(slot_rows(cr2_text, &head_name, None, &evals));
        for &bits in &manifest.quant_bits {
            let spec = QuantizerSpec::new(bits, manifest.mu, QuantizerMode::MuLaw)?;
            let evals = markovnet::evaluate_pipeline(&mut pipeline, &test, Some(&spec))?;
            report.rows.extend(slot_rows(cr2_text, &head_name, Some(bits), &evals));
        }

        report.cost_rows.extend(pipeline_cost_rows(&pipeline, cr2_text, &head_name));
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.toml"), manifest.to_toml()?)?;
        std::fs::write(dir.join("nmse_report.csv"), render_nmse_csv(manifest, &report)?)?;
        std::fs::write(dir.join("cost_report.csv"), render_cost_csv(manifest, &report)?)?;
    }
    Ok(report)
}

/// Cost rows for the distinct codecs of a pipeline (slot 1, slot 2; later
/// slots share slot 2's architecture).
pub fn pipeline_cost_rows<R: Real>(
    pipeline: &MarkovNetPipeline<R>,
    cr2: &str,
    head: &str,
) -> Vec<CostRow> {
    let mut rows = Vec::new();
    let mut push = |label: String, model: &crate::codec::CodecModel<R>| {
        let cost = crate::codec::count_cost(model);
        rows.push(CostRow {
            config: label,
            head: head.to_string(),
            params: cost.total_params(),
            mac_weight_params: cost.total_mac_weights(),
            head_params: cost.head_params,
            flops: cost.total_flops(),
            head_flops: cost.head_flops,
        });
    };
    if let Some(m) = pipeline.slot1.as_model() {
        push(format!("slot1_cr{}", m.config.cr), m);
    }
    if let Some(stage) = pipeline.residual_codecs.first() {
        if let Some(m) = stage.as_model() {
            push(format!("residual_cr{cr2}"), m);
        }
    }
    rows
}

/// Closed-form cost rows for standalone codec configs (`cost-report`).
pub fn standalone_cost_rows(crs: &[CompressionRatio]) -> Result<Vec<CostRow>> {
    let mut rows = Vec::new();
    for &cr in crs {
        for (name, cfg) in [
            ("fc", CodecConfig::fc(cr)),
            ("cnn", CodecConfig::cnn(cr)),
        ] {
            let model: crate::codec::CodecModel<f64> = crate::codec::build(&cfg, 0)?;
            let cost = crate::codec::count_cost(&model);
            rows.push(CostRow {
                config: format!("cr{cr}"),
                head: name.to_string(),
                params: cost.total_params(),
                mac_weight_params: cost.total_mac_weights(),
                head_params: cost.head_params,
                flops: cost.total_flops(),
                head_flops: cost.head_flops,
            });
        }
    }
    Ok(rows)
}

fn csv_header(manifest: &ExperimentManifest, hash: &str) -> String {
    format!(
        "# manifest_hash: {hash}\n# name: {}\n# seed: {}\n# preset: {} (k_train={}, k_test={}, slots={})\n",
        manifest.name,
        manifest.seed,
        manifest.dataset.preset,
        manifest.dataset.k_train,
        manifest.dataset.k_test,
        manifest.dataset.slots,
    )
}

pub fn render_nmse_csv(manifest: &ExperimentManifest, report: &EvalReport) -> Result<String> {
    let mut out = csv_header(manifest, &report.manifest_hash);
    out.push_str("cr2,head,quant_bits,slot,nmse_linear,nmse_db,bits_per_sample\n");
    for r in &report.rows {
        let bits = r.quant_bits.map_or("none".to_string(), |b| b.to_string());
        let db = if r.nmse_db == f64::NEG_INFINITY {
            "-inf".to_string()
        } else {
            format!("{:.6}", r.nmse_db)
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{:.9e},{},{:.1}",
            r.cr2, r.head, bits, r.slot, r.nmse_linear, db, r.bits_per_sample
        );
    }
    Ok(out)
}

pub fn render_cost_csv(manifest: &ExperimentManifest, report: &EvalReport) -> Result<String> {
    let mut out = csv_header(manifest, &report.manifest_hash);
    out.push_str("config,head,params,mac_weight_params,head_params,flops,head_flops\n");
    for r in &report.cost_rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.config, r.head, r.params, r.mac_weight_params, r.head_params, r.flops, r.head_flops
        );
    }
    Ok(out)
}

/// Entropy sweep CSV: (delta_slots, bits, avg_conditional_entropy,
/// avg_occupied_bins, samples).
pub fn render_entropy_csv(rows: &[crate::entropy::SweepRow]) -> String {
    let mut out = String::from("delta_slots,bits,avg_conditional_entropy,avg_occupied_bins,samples\n");
    for r in rows {
        let delta = r.delta.map_or("inf".to_string(), |d| d.to_string());
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.1},{}",
            delta, r.bits, r.avg_bits_per_element, r.avg_occupied_bins, r.samples
        );
    }
    out
}

/// dB helper re-export for report consumers.
pub fn nmse_db(linear: f64) -> f64 {
    to_db(linear)
}

#[derive(Debug, Clone)]
pub struct QuantSweepRow {
    pub bits: u32,
    pub slot: usize,
    pub nmse_db: f64,
    pub degradation_db: f64,
}

/// Quantization sweep on an already-trained pipeline: NMSE per slot per bit
/// width against the unquantized baseline.
pub fn quant_sweep<R: Real>(
    pipeline: &mut MarkovNetPipeline<R>,
    test: &CsiSequence<R>,
    bits: &[u32],
    mu: f64,
) -> Result<Vec<QuantSweepRow>> {
    let baseline = markovnet::evaluate_pipeline(pipeline, test, None)?;
    let mut rows = Vec::new();
    for &b in bits {
        let spec = QuantizerSpec::new(b, mu, QuantizerMode::MuLaw)?;
        let evals = markovnet::evaluate_pipeline(pipeline, test, Some(&spec))?;
        for (e, base) in evals.iter().zip(&baseline) {
            rows.push(QuantSweepRow {
                bits: b,
                slot: e.slot,
                nmse_db: e.nmse.db,
                degradation_db: e.nmse.db - base.nmse.db,
            });
        }
    }
    Ok(rows)
}
