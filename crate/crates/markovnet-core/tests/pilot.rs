//! Manual convergence probe (ignored): prints loss/NMSE trajectories.
use markovnet_core::channel::{self, ChannelConfig};
use markovnet_core::codec::{CodecConfig, CompressionRatio, TrainSchedule};
use markovnet_core::markovnet::{evaluate_direct_codec, train_direct_codec};
use markovnet_core::transform::CsiMatrix;

#[test]
#[ignore = "manual tuning probe"]
fn pilot_slot1_convergence() {
    let num_paths: usize = std::env::var("P_PATHS").ok().and_then(|s| s.parse().ok()).unwrap_or(48);
    let decay: f64 = std::env::var("P_DECAY").ok().and_then(|s| s.parse().ok()).unwrap_or(0.45);
    let lr: f64 = std::env::var("P_LR").ok().and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let epochs: usize = std::env::var("P_EPOCHS").ok().and_then(|s| s.parse().ok()).unwrap_or(300);
    let k: usize = std::env::var("P_K").ok().and_then(|s| s.parse().ok()).unwrap_or(128);
    let batch: usize = std::env::var("P_BATCH").ok().and_then(|s| s.parse().ok()).unwrap_or(32);

    let cfg = ChannelConfig {
        slots: 1,
        seed: 42,
        num_paths,
        path_decay: decay,
        ..ChannelConfig::slow()
    };
    let seq = channel::generate::<f64>(&cfg, k + 64).unwrap();
    let (train, test) = seq.split_at(k);
    let mats: Vec<CsiMatrix<f64>> = (0..train.k).map(|i| train.slot_matrix(i, 0)).collect();

    let stages = 6usize;
    let per = epochs / stages;
    let mut total = 0usize;
    let sched = TrainSchedule { epochs: per, batch_size: batch, learning_rate: lr, seed: 9 };
    // Train in stages by reusing train_direct_codec once, then codec::train.
    let t0 = std::time::Instant::now();
    let (mut model, rep) = train_direct_codec(&mats, &CodecConfig::fc(CompressionRatio::new(1, 4).unwrap()), true, &sched, 9, None).unwrap();
    total += per;
    let print_stage = |model: &mut _, total: usize, first: f64, last: f64| {
        let rows_tr = evaluate_direct_codec(model, true, &train, None).unwrap();
        let rows_te = evaluate_direct_codec(model, true, &test, None).unwrap();
        println!(
            "epoch {:4}: loss {:.4e} -> {:.4e} | train NMSE {:+.2} dB | test NMSE {:+.2} dB | {:.0}s",
            total, first, last, rows_tr[0].nmse.db, rows_te[0].nmse.db,
            t0.elapsed().as_secs_f64()
        );
    };
    print_stage(&mut model, total, rep.initial_loss().unwrap(), rep.final_loss().unwrap());
    let inputs: Vec<_> = mats
        .iter()
        .map(|m| {
            let x = markovnet_core::transform::complex_to_real(m);
            let s = markovnet_core::sphere::split(&x).unwrap();
            let scale = model.norm_scale.unwrap();
            let data: Vec<f64> = s.direction.data().iter().map(|&v| v / scale).collect();
            markovnet_core::tensor::Tensor::from_vec(x.shape(), data).unwrap()
        })
        .collect();
    for _ in 1..stages {
        let sched = TrainSchedule { epochs: per, batch_size: batch, learning_rate: lr, seed: 9 + total as u64 };
        let rep = markovnet_core::codec::train(&mut model, &inputs, &sched, None).unwrap();
        total += per;
        print_stage(&mut model, total, rep.initial_loss().unwrap(), rep.final_loss().unwrap());
    }
}
