//! Command-line harness: dataset generation, training, evaluation,
//! quantization and entropy sweeps, cost reports, and numeric oracles.
//!
//! Exit codes: 0 success, 2 configuration or contract error, 3 training
//! divergence, 4 I/O or file-format error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use markovnet_core::channel::{self, ChannelConfig};
use markovnet_core::codec::{CompressionRatio, LatentHead, TrainSchedule};
use markovnet_core::entropy;
use markovnet_core::eval::{self, ExperimentManifest};
use markovnet_core::io;
use markovnet_core::markovnet::{self, PipelineSchedule};
use markovnet_core::metrics::to_db;
use markovnet_core::oracles;
use markovnet_core::quantizer::{QuantizerMode, QuantizerSpec};
use markovnet_core::transform::CsiMatrix;
use markovnet_core::Error;

#[derive(Parser)]
#[command(name = "markovnet", about = "Differential CSI feedback at desk scale", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DatasetArgs {
    /// Channel preset: slow (gamma 0.99) or fast (gamma 0.9).
    #[arg(long, default_value = "slow")]
    preset: String,
    /// Override the preset's AR coefficient.
    #[arg(long)]
    gamma: Option<f64>,
    /// Sequence length T.
    #[arg(long, default_value_t = 10)]
    slots: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 1000)]
    epochs_slot1: usize,
    /// Slot-2 codec epochs (trained from scratch).
    #[arg(long, default_value_t = 1000)]
    epochs_scratch: usize,
    /// Epochs for warm-started slots (t >= 3).
    #[arg(long, default_value_t = 150)]
    epochs_warm: usize,
    #[arg(long, default_value_t = 200)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic AR(1) sparse channel dataset.
    Gen {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// Sample count K.
        #[arg(long, default_value_t = 6000)]
        k: usize,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a single-shot (slot-1 / SphNet) codec on a dataset's first slot.
    TrainSlot1 {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "1/4")]
        cr1: String,
        #[arg(long, default_value = "fc")]
        head: String,
        /// Disable spherical normalization (naive global scaling).
        #[arg(long)]
        no_sphere: bool,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full differential pipeline.
    TrainPipeline {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "1/4")]
        cr1: String,
        #[arg(long, default_value = "1/16")]
        cr2: String,
        #[arg(long, default_value = "fc")]
        head: String,
        #[arg(long)]
        no_sphere: bool,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for checkpoints and pipeline.toml.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained pipeline (optionally under codeword quantization)
    /// or run a full manifest experiment.
    Eval {
        /// Pipeline directory (from train-pipeline).
        #[arg(long, conflicts_with = "manifest")]
        pipeline: Option<PathBuf>,
        /// Test dataset path (required with --pipeline).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Full experiment manifest (TOML); trains and evaluates.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Codeword bits (omit for unquantized).
        #[arg(long)]
        bits: Option<u32>,
        #[arg(long, default_value_t = 255.0)]
        mu: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// NMSE degradation sweep over codeword bit widths.
    QuantSweep {
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated bit widths.
        #[arg(long, default_value = "4,6,8", value_delimiter = ',')]
        bits: Vec<u32>,
        #[arg(long, default_value_t = 255.0)]
        mu: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Conditional-entropy sweep over feedback intervals.
    EntropySweep {
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated slot offsets.
        #[arg(long, default_value = "1,2,4", value_delimiter = ',')]
        deltas: Vec<usize>,
        #[arg(long, default_value_t = 14)]
        bits: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter/FLOP table for FC vs CNN compression heads.
    CostReport {
        /// Comma-separated compression ratios.
        #[arg(long, default_value = "1/4,1/8,1/16,1/32,1/64", value_delimiter = ',')]
        cr: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the numeric oracles (finite differences, PCA, identity codec).
    OracleCheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Contract(_) | Error::Config(_) => 2,
                Error::Divergence { .. } => 3,
                Error::Io(_) | Error::Format { .. } | Error::ZeroChannel => 4,
            };
            ExitCode::from(code)
        }
    }
}

fn channel_config(args: &DatasetArgs) -> Result<ChannelConfig, Error> {
    let mut cfg = ChannelConfig::preset(&args.preset)?;
    cfg.slots = args.slots;
    cfg.seed = args.seed;
    if let Some(g) = args.gamma {
        cfg.gamma_true = g;
        cfg.preset = format!("{}(gamma={g})", args.preset);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pipeline_schedule(s: &ScheduleArgs, seed: u64) -> PipelineSchedule {
    PipelineSchedule {
        epochs_slot1: s.epochs_slot1,
        epochs_scratch: s.epochs_scratch,
        epochs_warm: s.epochs_warm,
        batch_size: s.batch,
        learning_rate: s.learning_rate,
        seed,
    }
}

fn parse_head(head: &str) -> Result<LatentHead, Error> {
    match head {
        "fc" => Ok(LatentHead::Fc),
        "cnn" => Ok(LatentHead::Cnn),
        other => Err(Error::config(format!("unknown head '{other}' (fc|cnn)"))),
    }
}

fn write_or_print(out: Option<&PathBuf>, name: &str, text: &str) -> Result<(), Error> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(name);
            std::fs::write(&path, text)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen { dataset, k, out } => {
            let cfg = channel_config(&dataset)?;
            eprintln!("generating {k} samples x {} slots ({} preset)...", cfg.slots, cfg.preset);
            let seq = channel::generate::<f64>(&cfg, k)?;
            io::save_dataset(&seq, &out)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::TrainSlot1 { dataset, cr1, head, no_sphere, schedule, seed, out } => {
            let seq = io::load_dataset::<f64>(&dataset)?;
            let cr = CompressionRatio::parse(&cr1)?;
            let head = parse_head(&head)?;
            let mats: Vec<CsiMatrix<f64>> = (0..seq.k).map(|i| seq.slot_matrix(i, 0)).collect();
            let config = match head {
                LatentHead::Fc => markovnet_core::codec::CodecConfig { rd: seq.rd(), nb: seq.nb(), ..markovnet_core::codec::CodecConfig::fc(cr) },
                LatentHead::Cnn => markovnet_core::codec::CodecConfig { rd: seq.rd(), nb: seq.nb(), ..markovnet_core::codec::CodecConfig::cnn(cr) },
            };
            let sched = TrainSchedule {
                epochs: schedule.epochs_slot1,
                batch_size: schedule.batch,
                learning_rate: schedule.learning_rate,
                seed,
            };
            eprintln!("training slot-1 codec at CR {cr} for {} epochs...", sched.epochs);
            let (_, report) =
                markovnet::train_direct_codec(&mats, &config, !no_sphere, &sched, seed, Some(&out))?;
            eprintln!(
                "final training loss {:.6e}; checkpoint at {}",
                report.final_loss().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::TrainPipeline { dataset, cr1, cr2, head, no_sphere, schedule, seed, out } => {
            let seq = io::load_dataset::<f64>(&dataset)?;
            let outcome = markovnet::train_pipeline::<f64>(
                &seq,
                CompressionRatio::parse(&cr1)?,
                CompressionRatio::parse(&cr2)?,
                parse_head(&head)?,
                !no_sphere,
                &pipeline_schedule(&schedule, seed),
                Some(&out),
            )?;
            eprintln!(
                "gamma_hat = {:.6} over {} pairs; {} codecs under {}",
                outcome.gamma_estimate.gamma_hat,
                outcome.gamma_estimate.sample_count,
                outcome.pipeline.slots(),
                out.display()
            );
            for r in &outcome.slot_reports {
                eprintln!(
                    "  slot {:2} ({}): first-epoch loss {:.4e} -> final {:.4e}",
                    r.slot,
                    if r.warm_started { "warm" } else { "scratch" },
                    r.report.initial_loss().unwrap_or(f64::NAN),
                    r.report.final_loss().unwrap_or(f64::NAN),
                );
            }
            Ok(())
        }
        Command::Eval { pipeline, dataset, manifest, bits, mu, out } => {
            if let Some(manifest_path) = manifest {
                let text = std::fs::read_to_string(&manifest_path)?;
                let manifest = ExperimentManifest::from_toml(&text)?;
                let report = eval::run_experiment::<f64>(&manifest, out.as_deref())?;
                if out.is_none() {
                    print!("{}", eval::render_nmse_csv(&manifest, &report)?);
                }
                return Ok(());
            }
            let pipeline_dir = pipeline
                .ok_or_else(|| Error::config("eval needs --pipeline or --manifest".to_string()))?;
            let dataset = dataset
                .ok_or_else(|| Error::config("eval --pipeline needs --dataset".to_string()))?;
            let mut pipe = markovnet::load_pipeline::<f64>(&pipeline_dir)?;
            let seq = io::load_dataset::<f64>(&dataset)?;
            let spec = match bits {
                Some(b) => Some(QuantizerSpec::new(b, mu, QuantizerMode::MuLaw)?),
                None => None,
            };
            let rows = markovnet::evaluate_pipeline(&mut pipe, &seq, spec.as_ref())?;
            let mut text = String::from("slot,nmse_linear,nmse_db,bits_per_sample\n");
            for r in &rows {
                let db = if r.nmse.db == f64::NEG_INFINITY { "-inf".into() } else { format!("{:.4}", r.nmse.db) };
                text.push_str(&format!("{},{:.9e},{},{:.1}\n", r.slot, r.nmse.linear, db, r.bits_per_sample));
            }
            write_or_print(out.as_ref(), "eval.csv", &text)
        }
        Command::QuantSweep { pipeline, dataset, bits, mu, out } => {
            let mut pipe = markovnet::load_pipeline::<f64>(&pipeline)?;
            let seq = io::load_dataset::<f64>(&dataset)?;
            let rows = eval::quant_sweep(&mut pipe, &seq, &bits, mu)?;
            let mut text = String::from("bits,slot,nmse_db,degradation_db\n");
            for r in &rows {
                text.push_str(&format!("{},{},{:.4},{:.4}\n", r.bits, r.slot, r.nmse_db, r.degradation_db));
            }
            write_or_print(out.as_ref(), "quant_sweep.csv", &text)
        }
        Command::EntropySweep { dataset, deltas, bits, out } => {
            let seq = io::load_dataset::<f64>(&dataset)?;
            let rows = entropy::entropy_sweep(&seq, &deltas, bits)?;
            write_or_print(out.as_ref(), "entropy_sweep.csv", &eval::render_entropy_csv(&rows))
        }
        Command::CostReport { cr, out } => {
            let crs: Vec<CompressionRatio> = cr
                .iter()
                .map(|s| CompressionRatio::parse(s))
                .collect::<Result<_, _>>()?;
            let rows = eval::standalone_cost_rows(&crs)?;
            let mut text =
                String::from("config,head,params,mac_weight_params,head_params,flops,head_flops\n");
            for r in &rows {
                text.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.config, r.head, r.params, r.mac_weight_params, r.head_params, r.flops, r.head_flops
                ));
            }
            write_or_print(out.as_ref(), "cost_report.csv", &text)
        }
        Command::OracleCheck => oracle_check(),
    }
}

/// A quick pass/fail sweep of the independent numeric oracles.
fn oracle_check() -> Result<(), Error> {
    use markovnet_core::tensor::{Padding, Tape, Tensor};
    let mut failures = 0;

    // Finite differences vs tape gradient on a conv+mse graph.
    {
        let mut state = 0x9E3779B97F4A7C15u64;
        let mut uniform = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let mut x = Tensor::<f64>::zeros(&[2, 2, 8, 8]);
        for v in x.data_mut().iter_mut() {
            *v = uniform();
        }
        x.set_requires_grad(true);
        let mut k = Tensor::<f64>::zeros(&[3, 2, 3, 3]);
        for v in k.data_mut().iter_mut() {
            *v = uniform();
        }
        k.set_requires_grad(true);
        let b = {
            let mut b = Tensor::<f64>::zeros(&[3]);
            b.set_requires_grad(true);
            b
        };
        let run = |kd: &[f64]| -> f64 {
            let mut t: Tape<f64> = Tape::new();
            let xi = t.leaf(&x);
            let ki = t.leaf(&Tensor::from_vec(&[3, 2, 3, 3], kd.to_vec()).unwrap());
            let bi = t.leaf(&b);
            let y = t.conv2d(xi, ki, bi, Padding::Same).unwrap();
            let zeros = Tensor::zeros(t.shape(y));
            let tg = t.leaf(&zeros);
            let loss = t.mse_loss(y, tg).unwrap();
            t.data(loss)[0]
        };
        let mut t: Tape<f64> = Tape::new();
        let xi = t.leaf(&x);
        let ki = t.leaf(&k);
        let bi = t.leaf(&b);
        let y = t.conv2d(xi, ki, bi, Padding::Same).unwrap();
        let zeros = Tensor::zeros(t.shape(y));
        let tg = t.leaf(&zeros);
        let loss = t.mse_loss(y, tg).unwrap();
        t.backward(loss).unwrap();
        let analytic = t.grad(ki).unwrap().to_vec();
        let mut f = |kd: &[f64]| run(kd);
        let numeric = oracles::finite_diff_gradient(&mut f, k.data(), 1e-5);
        let err = oracles::max_relative_error(&analytic, &numeric);
        report_line("finite-difference conv gradient", err < 1e-4, &format!("max rel err {err:.2e}"), &mut failures);
    }

    // PCA subspace-iteration oracle on a known spectrum.
    {
        let dim = 32;
        let n = 4000;
        let vars: Vec<f64> = (0..dim).map(|i| 4.0 * 0.7f64.powi(i as i32)).collect();
        let mut state = 1u64;
        let mut gauss = || {
            // xorshift-based normal via Box-Muller, deterministic.
            let mut next = || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64
            };
            let u1: f64 = next().max(1e-12);
            let u2: f64 = next();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let mut rows = Vec::with_capacity(n * dim);
        for _ in 0..n {
            for v in &vars {
                rows.push(gauss() * v.sqrt());
            }
        }
        let err = oracles::pca_reconstruction_error(&rows, dim, 4);
        let expect: f64 = vars[4..].iter().sum();
        let rel = (err - expect).abs() / expect;
        report_line("PCA reconstruction-error oracle", rel < 0.1, &format!("rel dev {rel:.3}"), &mut failures);
    }

    // Identity-codec telescoping.
    {
        let cfg = ChannelConfig { slots: 4, nf: 64, rd: 8, nb: 8, num_paths: 8, seed: 5, ..ChannelConfig::slow() };
        let seq = channel::generate::<f64>(&cfg, 4)?;
        let mut pipe = markovnet_core::markovnet::MarkovNetPipeline::<f64>::identity(4, 0.99, false)?;
        let mut worst = 0.0f64;
        for k in 0..4 {
            let slots: Vec<CsiMatrix<f64>> = (0..4).map(|t| seq.slot_matrix(k, t)).collect();
            let (payloads, _) = markovnet::encode_sequence(&mut pipe, &slots, None)?;
            let recons = markovnet::decode_sequence(&mut pipe, &payloads, 8, 8)?;
            for (r, s) in recons.iter().zip(&slots) {
                let err: f64 = r
                    .data()
                    .iter()
                    .zip(s.data())
                    .map(|(a, b)| (a - b).norm_sqr())
                    .sum();
                worst = worst.max(err / s.frobenius_sq());
            }
        }
        report_line("identity-codec telescoping", worst < 1e-24, &format!("worst NMSE {worst:.2e}"), &mut failures);
    }

    eprintln!("(NMSE of an exact reconstruction reports as {} dB)", to_db(0.0));
    if failures > 0 {
        Err(Error::contract(format!("{failures} oracle check(s) failed")))
    } else {
        Ok(())
    }
}

fn report_line(name: &str, pass: bool, detail: &str, failures: &mut usize) {
    if pass {
        println!("[PASS] {name}: {detail}");
    } else {
        println!("[FAIL] {name}: {detail}");
        *failures += 1;
    }
}
