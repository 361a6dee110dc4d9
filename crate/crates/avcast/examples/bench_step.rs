//! Rough timing of one training step and one evaluation pass at the
//! desk-scale configuration. Run: cargo run -p avcast --example bench_step

use avcast::data::{prepare_clips, PreparedClip};
use avcast::m3so::{generate_clip, M3soConfig, SpriteBank, SpriteSource};
use avcast::net::NetConfig;
use avcast::trainer::{TrainConfig, Trainer};
use avcast::{avfeat, evalkit};
use std::time::Instant;

fn main() {
    let m = M3soConfig {
        box_size: 32,
        frames_per_clip: 20,
        block_enabled: false,
        sprite_source: SpriteSource::Procedural { size: 16 },
        seed: 1,
        ..M3soConfig::default()
    };
    let bank = SpriteBank::procedural(16);
    let clips: Vec<_> = (0..16)
        .map(|i| generate_clip(&m, &bank, 100 + i).unwrap())
        .collect();
    let stft = avfeat::StftParams::default();
    let prepared: Vec<PreparedClip> = prepare_clips(&clips, &stft).unwrap();

    let net = NetConfig {
        frame_h: 32,
        frame_w: 32,
        enc_channels: [16, 32, 64],
        disc_channels: [8, 16, 32],
        ..NetConfig::default()
    };
    let cfg = TrainConfig {
        batch_size: 16,
        f_seen: 5,
        t_total: 20,
        adv_t_samples: Some(3),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(net.clone(), cfg).unwrap();
    let batch: Vec<&PreparedClip> = prepared.iter().collect();

    // Warm-up step, then timed steps.
    let t0 = Instant::now();
    let lb = trainer.train_step(&batch, 0, 0).unwrap();
    println!("step 0: {:.2?} recon {:.3} kl {:.3}", t0.elapsed(), lb.recon, lb.kl);
    let t1 = Instant::now();
    let n = 3;
    for s in 1..=n {
        trainer.train_step(&batch, 0, s).unwrap();
    }
    let per_step = t1.elapsed() / n as u32;
    println!("mean step: {per_step:.2?}");
    let steps_per_epoch = 500usize.div_ceil(16);
    println!(
        "projected epoch (500 clips, batch 16 = {steps_per_epoch} steps): {:.1?}",
        per_step * steps_per_epoch as u32
    );

    let t2 = Instant::now();
    let rollouts = evalkit::rollout_futures(
        &trainer.net_cfg,
        &trainer.gen,
        trainer.pe_table(),
        &prepared[0],
        5,
        20,
        10,
        7,
    )
    .unwrap();
    println!("best-of-10 rollout for one clip: {:.2?}", t2.elapsed());
    let gt: Vec<diffcore::Tensor> = (5..20).map(|t| prepared[0].frame_tensor(t)).collect();
    let t3 = Instant::now();
    let best = evalkit::best_of_k(&rollouts, &gt).unwrap();
    println!(
        "best_of_k scoring: {:.2?} (mean ssim {:.3})",
        t3.elapsed(),
        best.mean_ssim
    );
}
