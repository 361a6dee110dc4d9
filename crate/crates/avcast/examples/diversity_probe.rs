//! Prints inter/intra-SSIM diversity numbers for a trained checkpoint
//! across a few rollout seeds. Useful for sizing diversity evaluations.
//! Run: cargo run -p avcast --example diversity_probe <ckpt_dir> [clip_seed0]

use avcast::data::prepare_clips;
use avcast::m3so::{generate_clip, M3soConfig, SpriteBank, SpriteSource};
use avcast::trainer::Trainer;
use avcast::{avfeat, evalkit};
use diffcore::Tensor;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = std::path::PathBuf::from(args.get(1).expect("usage: diversity_probe <ckpt_dir>"));
    let clip_seed0: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(90_000);
    let trainer = Trainer::load(&ckpt).expect("loading checkpoint");
    let (f, t_total) = (trainer.cfg.f_seen, trainer.cfg.t_total);

    let m = M3soConfig {
        box_size: trainer.net_cfg.frame_h,
        frames_per_clip: t_total,
        block_enabled: false,
        sprite_source: SpriteSource::Procedural { size: 16 },
        seed: 1,
        ..M3soConfig::default()
    };
    let bank = SpriteBank::procedural(16);
    let clips: Vec<_> = (0..8)
        .map(|i| generate_clip(&m, &bank, clip_seed0 + i as u64).unwrap())
        .collect();
    let pool = prepare_clips(&clips, &avfeat::StftParams::default()).unwrap();

    for seed in [1234u64, 4242, 9001, 31337, 77, 555] {
        let mut intra2 = 0.0;
        let mut intra100 = 0.0;
        let mut inter1 = 0.0;
        let mut inter100 = 0.0;
        let n = 6usize;
        for (i, clip) in pool.iter().take(n).enumerate() {
            let rollouts = evalkit::rollout_futures(
                &trainer.net_cfg,
                &trainer.gen,
                trainer.pe_table(),
                clip,
                f,
                t_total,
                100,
                seed + i as u64,
            )
            .unwrap();
            let gt: Vec<Tensor> = (f..t_total).map(|t| clip.frame_tensor(t)).collect();
            let curves = evalkit::diversity_curves(&rollouts, &gt, &[1, 2, 100]).unwrap();
            inter1 += curves.inter[0].1;
            inter100 += curves.inter[2].1;
            intra2 += curves.intra[0].1;
            intra100 += curves.intra[1].1;
        }
        println!(
            "seed {seed:>6}: inter(1) {:.4} inter(100) {:.4} | intra(2) {:.4} intra(100) {:.4} | intra(2)-intra(100) {:+.4}",
            inter1 / n as f64,
            inter100 / n as f64,
            intra2 / n as f64,
            intra100 / n as f64,
            (intra2 - intra100) / n as f64
        );
    }
}
