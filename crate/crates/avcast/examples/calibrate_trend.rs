//! Calibration for the desk-scale learning-trend setup: trains on a
//! reduced clip pool and prints best-of-10 SSIM against the
//! copy-last-seen-frame baseline every few epochs.
//! Run: cargo run -p avcast --example calibrate_trend [clips] [epochs]

use avcast::data::{prepare_clips, PreparedClip};
use avcast::m3so::{generate_clip, M3soConfig, SpriteBank, SpriteSource};
use avcast::net::NetConfig;
use avcast::trainer::{TrainConfig, Trainer};
use avcast::{avfeat, evalkit};
use diffcore::Tensor;
use std::time::Instant;

fn copy_last_curve(clip: &PreparedClip, f: usize, t_total: usize) -> Vec<f64> {
    let last = clip.frame_tensor(f - 1);
    (f..t_total)
        .map(|t| evalkit::ssim(&last, &clip.frame_tensor(t)).unwrap())
        .collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(120);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(15);

    let m = M3soConfig {
        box_size: 32,
        frames_per_clip: 20,
        block_enabled: false,
        sprite_source: SpriteSource::Procedural { size: 16 },
        seed: 1,
        ..M3soConfig::default()
    };
    let bank = SpriteBank::procedural(16);
    let stft = avfeat::StftParams::default();
    let train_clips: Vec<_> = (0..n_train)
        .map(|i| generate_clip(&m, &bank, 1000 + i as u64).unwrap())
        .collect();
    let eval_clips: Vec<_> = (0..24)
        .map(|i| generate_clip(&m, &bank, 900_000 + i as u64).unwrap())
        .collect();
    let train = prepare_clips(&train_clips, &stft).unwrap();
    let eval = prepare_clips(&eval_clips, &stft).unwrap();

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
        seed: 5,
        ..TrainConfig::default()
    };
    let (f, t_total) = (cfg.f_seen, cfg.t_total);
    let mut trainer = Trainer::new(net, cfg).unwrap();

    // Copy-last baseline over the eval pool.
    let mut base_first = 0.0;
    let mut base_mean = 0.0;
    for c in &eval {
        let curve = copy_last_curve(c, f, t_total);
        base_first += curve[0];
        base_mean += curve.iter().sum::<f64>() / curve.len() as f64;
    }
    base_first /= eval.len() as f64;
    base_mean /= eval.len() as f64;
    println!("baseline copy-last: frame {} ssim {base_first:.4}, mean {base_mean:.4}", f + 1);

    let evaluate = |tr: &Trainer| -> (f64, f64) {
        let mut first = 0.0;
        let mut mean = 0.0;
        for (i, c) in eval.iter().enumerate() {
            let rollouts = evalkit::rollout_futures(
                &tr.net_cfg,
                &tr.gen,
                tr.pe_table(),
                c,
                f,
                t_total,
                10,
                7000 + i as u64,
            )
            .unwrap();
            let gt: Vec<Tensor> = (f..t_total).map(|t| c.frame_tensor(t)).collect();
            let best = evalkit::best_of_k(&rollouts, &gt).unwrap();
            first += best.ssim_curve[0];
            mean += best.mean_ssim;
        }
        (first / eval.len() as f64, mean / eval.len() as f64)
    };

    let start = Instant::now();
    for e in 0..epochs {
        let t0 = Instant::now();
        let lb = trainer.run_epoch(&train, None).unwrap();
        let dt = t0.elapsed();
        if (e + 1) % 4 == 0 || e == 0 {
            let (first, mean) = evaluate(&trainer);
            println!(
                "epoch {:>3} ({dt:.1?}): recon {:8.2} kl {:7.3} | ssim@{} {first:.4} (base {base_first:.4}) mean {mean:.4} (need {:.4}) | total {:.0?}",
                e + 1,
                lb.recon,
                lb.kl,
                f + 1,
                base_mean + 0.02,
                start.elapsed()
            );
        } else {
            println!("epoch {:>3} ({dt:.1?}): recon {:8.2} kl {:7.3}", e + 1, lb.recon, lb.kl);
        }
    }
}
