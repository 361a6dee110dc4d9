//! Verb implementations. Every verb freezes the effective configuration
//! into its output directory before doing any work.

use crate::config::RunConfig;
use anyhow::{anyhow, bail, Context, Result};
use avcast::data::{prepare_clips, PreparedClip};
use avcast::evalkit::{self, EvalSettings};
use avcast::m3so;
use avcast::net::NetConfig;
use avcast::trainer::Trainer;
use diffcore::Tensor;
use std::io::Write;
use std::path::{Path, PathBuf};

pub fn freeze_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let f = std::fs::File::create(out.join("run-config.json"))?;
    serde_json::to_writer_pretty(f, cfg)?;
    Ok(())
}

/// Output directory: explicit, or a fresh timestamp+seed name under the
/// default root.
pub fn resolve_out(out: Option<PathBuf>, cfg: &RunConfig, verb: &str) -> PathBuf {
    match out {
        Some(p) => p,
        None => {
            let root = std::env::var("AVCAST_OUT_ROOT").unwrap_or_else(|_| "runs".to_string());
            let stamp = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let seed = cfg.seed.unwrap_or(cfg.train.seed);
            PathBuf::from(root).join(format!("{verb}-{stamp}-seed{seed}"))
        }
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    freeze_config(cfg, out)?;
    let manifest = m3so::generate_dataset(&cfg.data.m3so, cfg.data.counts, out)
        .context("dataset generation")?;
    println!(
        "wrote {} split(s) under {} (train {}, val {}, test {})",
        manifest.splits.len(),
        out.display(),
        cfg.data.counts.train,
        cfg.data.counts.val,
        cfg.data.counts.test
    );
    Ok(())
}

fn load_prepared(cfg: &RunConfig, data_dir: &Path, split: &str) -> Result<Vec<PreparedClip>> {
    let (_, clips) = m3so::load_split(data_dir, split)
        .with_context(|| format!("loading split '{split}' from {}", data_dir.display()))?;
    Ok(prepare_clips(&clips, &cfg.stft)?)
}

fn net_cfg_for_data(cfg: &RunConfig) -> NetConfig {
    let mut net = cfg.net.clone();
    net.frame_h = cfg.data.m3so.box_size;
    net.frame_w = cfg.data.m3so.box_size;
    net
}

pub fn train(cfg: &RunConfig, data_dir: &Path, out: &Path, resume: bool) -> Result<()> {
    freeze_config(cfg, out)?;
    let train_pool = load_prepared(cfg, data_dir, "train")?;
    let val_pool = load_prepared(cfg, data_dir, "val").unwrap_or_default();

    let mut trainer = if resume && out.join("gen.ckpt").exists() {
        Trainer::load(out).context("resuming from checkpoint")?
    } else {
        Trainer::new(net_cfg_for_data(cfg), cfg.train.clone())?
    };

    let log_path = out.join("train_log.csv");
    let mut log = if trainer.epoch == 0 {
        let mut f = std::fs::File::create(&log_path)?;
        writeln!(f, "epoch,step,recon,kl,adv_g,total_g,total_d")?;
        f
    } else {
        std::fs::OpenOptions::new().append(true).open(&log_path)?
    };

    let mut best_val = f64::NEG_INFINITY;
    while trainer.epoch < cfg.train.epochs {
        let epoch = trainer.epoch;
        let lb = trainer.run_epoch(&train_pool, Some(&mut log))?;
        println!(
            "epoch {epoch}: recon {:.4} kl {:.4} adv_g {:.4} total_d {:.4} (gamma {:.6})",
            lb.recon, lb.kl, lb.adv_g, lb.total_d, lb.gamma
        );
        let done = trainer.epoch;
        if cfg.train.val_every > 0 && done % cfg.train.val_every == 0 && !val_pool.is_empty() {
            let take = cfg.train.val_clips.min(val_pool.len());
            let score = trainer.validate(&val_pool[..take], cfg.eval.seed)?;
            println!("  val best-of-{} ssim: {score:.4}", cfg.train.val_k);
            if score > best_val {
                best_val = score;
                trainer.save(&out.join("best"))?;
                dump_samples(&trainer, &val_pool[0], &out.join("samples").join(format!("epoch_{done}")), 2)?;
            }
        }
        if cfg.train.ckpt_every > 0 && done % cfg.train.ckpt_every == 0 {
            trainer.save(out)?;
        }
    }
    trainer.save(out)?;
    println!("finished at epoch {}; checkpoints in {}", trainer.epoch, out.display());
    Ok(())
}

fn dump_samples(trainer: &Trainer, clip: &PreparedClip, dir: &Path, k: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let rollouts = evalkit::rollout_futures(
        &trainer.net_cfg,
        &trainer.gen,
        trainer.pe_table(),
        clip,
        trainer.cfg.f_seen,
        trainer.cfg.t_total,
        k,
        0,
    )?;
    for (j, frames) in rollouts.iter().enumerate() {
        for (i, frame) in frames.iter().enumerate() {
            let t = trainer.cfg.f_seen + 1 + i;
            evalkit::write_pgm(frame, &dir.join(format!("r{j}_t{t:02}.pgm")))?;
        }
    }
    Ok(())
}

pub fn sample(cfg: &RunConfig, ckpt_dir: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    freeze_config(cfg, out)?;
    let trainer = Trainer::load(ckpt_dir)
        .with_context(|| format!("loading checkpoint from {}", ckpt_dir.display()))?;
    let pool = load_prepared(cfg, data_dir, &cfg.sample.split)?;
    let clip = pool
        .get(cfg.sample.index)
        .ok_or_else(|| anyhow!("clip index {} beyond split of {}", cfg.sample.index, pool.len()))?;
    let rollouts = evalkit::rollout_futures(
        &trainer.net_cfg,
        &trainer.gen,
        trainer.pe_table(),
        clip,
        trainer.cfg.f_seen,
        trainer.cfg.t_total,
        cfg.sample.k,
        cfg.sample.seed,
    )?;
    for (j, frames) in rollouts.iter().enumerate() {
        for (i, frame) in frames.iter().enumerate() {
            let t = trainer.cfg.f_seen + 1 + i;
            evalkit::write_pgm(frame, &out.join(format!("rollout{j}_t{t:02}.pgm")))?;
        }
    }
    // Seen context for reference.
    for t in 0..trainer.cfg.f_seen {
        evalkit::write_pgm(&clip.frame_tensor(t), &out.join(format!("seen_t{:02}.pgm", t + 1)))?;
    }
    println!(
        "wrote {} rollouts x {} frames to {}",
        cfg.sample.k,
        trainer.cfg.t_total - trainer.cfg.f_seen,
        out.display()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, ckpt_dir: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    freeze_config(cfg, out)?;
    let trainer = Trainer::load(ckpt_dir)
        .with_context(|| format!("loading checkpoint from {}", ckpt_dir.display()))?;
    let mut pool = load_prepared(cfg, data_dir, &cfg.eval.split)?;
    if cfg.eval.clips > 0 && cfg.eval.clips < pool.len() {
        pool.truncate(cfg.eval.clips);
    }
    if pool.is_empty() {
        bail!("evaluation split '{}' is empty", cfg.eval.split);
    }
    let settings = EvalSettings {
        f_seen: trainer.cfg.f_seen,
        t_total: trainer.cfg.t_total,
        k: cfg.eval.k,
        seed: cfg.eval.seed,
        diversity_k: cfg.eval.diversity_k.clone(),
        diversity_clips: cfg.eval.diversity_clips,
        block_size: cfg.eval.block_iou.then_some(cfg.data.m3so.block_size),
        mismatch_audio: false,
    };
    let mut report = evalkit::evaluate_pool(
        &trainer.net_cfg,
        &trainer.gen,
        trainer.pe_table(),
        &pool,
        &settings,
    )?;
    if cfg.eval.fooling {
        let mut judged_frames: Vec<Vec<Tensor>> = Vec::new();
        for (i, clip) in pool.iter().enumerate() {
            let rollouts = evalkit::rollout_futures(
                &trainer.net_cfg,
                &trainer.gen,
                trainer.pe_table(),
                clip,
                trainer.cfg.f_seen,
                trainer.cfg.t_total,
                1,
                cfg.eval.seed.wrapping_add(i as u64),
            )?;
            judged_frames.push(rollouts.into_iter().next().unwrap());
        }
        let judged: Vec<evalkit::JudgedClip> = pool
            .iter()
            .zip(&judged_frames)
            .map(|(clip, frames)| evalkit::JudgedClip {
                clip,
                gen_frames: frames,
                f_seen: trainer.cfg.f_seen,
            })
            .collect();
        report.fooling_rate = Some(evalkit::fooling_rate(&trainer.net_cfg, &trainer.disc, &judged)?);
    }
    evalkit::write_report_json(&report, &out.join("eval_report.json"))?;
    evalkit::write_curves_csv(&report, &out.join("curves.csv"))?;
    println!(
        "eval over {} clips: mean best-of-{} ssim {:.4}",
        report.clips,
        report.k,
        report.mean_ssim()
    );

    if cfg.eval.mismatch {
        let probe = evalkit::av_mismatch_probe(
            &trainer.net_cfg,
            &trainer.gen,
            trainer.pe_table(),
            &pool,
            &settings,
        )?;
        evalkit::write_report_json(&probe, &out.join("eval_mismatch.json"))?;
        println!(
            "mismatched-audio probe: mean ssim {:.4} (matched {:.4})",
            probe.mean_ssim(),
            report.mean_ssim()
        );
    }
    Ok(())
}

pub fn report(cfg: &RunConfig, report_path: &Path, out: &Path) -> Result<()> {
    freeze_config(cfg, out)?;
    let report: evalkit::EvalReport =
        serde_json::from_reader(std::fs::File::open(report_path).with_context(|| {
            format!("opening evaluation report {}", report_path.display())
        })?)?;
    let md = evalkit::render_markdown(&report, &cfg.eval.horizons);
    std::fs::write(out.join("report.md"), &md)?;
    evalkit::write_curves_csv(&report, &out.join("curves.csv"))?;
    println!("{md}");
    Ok(())
}
