//! Frame rasterization, whole-clip assembly, and on-disk datasets with
//! per-split JSON manifests.

use super::container::{load_clip_file, read_wav, save_clip_file, write_wav};
use super::glyphs::SpriteBank;
use super::trajectory::{synth_trajectory, Event, Trajectory};
use super::{audio, Clip, M3soConfig, Rect, SpriteSource};
use crate::error::{AvError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Renders a trajectory into [T, H, W] frames: black background, the
/// obstacle as a filled unit-intensity square from its intro frame on,
/// and the sprite alpha-composited on top.
pub fn render_frames(
    traj: &Trajectory,
    sprite: &[f64],
    sprite_size: usize,
    box_size: usize,
    block_intro_frame: Option<usize>,
) -> Result<Vec<f64>> {
    let t_total = traj.positions.len();
    let plane = box_size * box_size;
    let mut video = vec![0.0; t_total * plane];
    let lim = (box_size - sprite_size) as f64;
    for (t, &(px, py)) in traj.positions.iter().enumerate() {
        if !(0.0..=lim).contains(&px) || !(0.0..=lim).contains(&py) {
            return Err(AvError::invalid(
                "render_frames",
                format!("frame {t}: position ({px}, {py}) leaves the box"),
            ));
        }
        let frame = &mut video[t * plane..(t + 1) * plane];
        if let (Some(intro), Some(b)) = (block_intro_frame, traj.block_box.as_ref()) {
            if t >= intro {
                for y in b.y..b.y + b.h {
                    for x in b.x..b.x + b.w {
                        frame[y * box_size + x] = 1.0;
                    }
                }
            }
        }
        let ix = px.round() as usize;
        let iy = py.round() as usize;
        for sy in 0..sprite_size {
            for sx in 0..sprite_size {
                let g = sprite[sy * sprite_size + sx];
                if g > 0.0 {
                    let idx = (iy + sy) * box_size + (ix + sx);
                    frame[idx] = g + (1.0 - g) * frame[idx];
                }
            }
        }
    }
    Ok(video)
}

/// Deterministically generates one clip from a seed.
pub fn generate_clip(cfg: &M3soConfig, bank: &SpriteBank, seed: u64) -> Result<Clip> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let digit_class = match cfg.digit_class {
        Some(c) => c,
        None => rng.gen_range(0..10u8),
    };
    let variant = if bank.variants(digit_class) > 1 {
        rng.gen_range(0..bank.variants(digit_class))
    } else {
        0
    };
    let traj = synth_trajectory(cfg, &mut rng)?;
    let block_intro = cfg.block_enabled.then(|| cfg.block_frame - 1);
    let video = render_frames(
        &traj,
        bank.sprite(digit_class, variant),
        bank.size(),
        cfg.box_size,
        block_intro,
    )?;
    let wave = audio::synth_audio(&traj, cfg, digit_class)?;
    Ok(Clip {
        video,
        frames: cfg.frames_per_clip,
        height: cfg.box_size,
        width: cfg.box_size,
        audio: wave,
        audio_rate: cfg.audio_rate,
        fps: cfg.fps,
        digit_class,
        events: traj.events,
        block_box: traj.block_box,
        block_frame: cfg.block_enabled.then_some(cfg.block_frame),
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipMeta {
    pub id: usize,
    pub video_file: String,
    pub audio_file: String,
    pub seed: u64,
    pub digit_class: u8,
    pub block_box: Option<Rect>,
    pub events: Vec<Event>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: String,
    pub master_seed: u64,
    pub split_offset: u64,
    /// Distance reference for the tone amplitude.
    pub origin: String,
    pub config: M3soConfig,
    pub clips: Vec<ClipMeta>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub counts: SplitCounts,
    pub splits: Vec<String>,
}

const SPLIT_OFFSETS: [(&str, u64); 3] = [("train", 0), ("val", 1_000_000), ("test", 2_000_000)];

fn sprite_bank(cfg: &M3soConfig) -> Result<SpriteBank> {
    match &cfg.sprite_source {
        SpriteSource::Procedural { size } => Ok(SpriteBank::procedural(*size)),
        SpriteSource::IdxFiles { images, labels, size } => {
            super::glyphs::load_idx_sprites(Path::new(images), Path::new(labels), *size)
        }
    }
}

/// Writes all splits under `out_dir` (clip files, WAVs, one manifest per
/// split). Clip i of a split uses seed = master_seed + split_offset + i.
/// Each split is staged in a temp directory and renamed into place, so a
/// failed run leaves no partial split behind.
pub fn generate_dataset(cfg: &M3soConfig, counts: SplitCounts, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let bank = sprite_bank(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let mut splits = Vec::new();
    for (split, offset) in SPLIT_OFFSETS {
        let n = match split {
            "train" => counts.train,
            "val" => counts.val,
            _ => counts.test,
        };
        if n == 0 {
            continue;
        }
        let staging = out_dir.join(format!(".tmp-{split}"));
        if staging.exists() {
            std::fs::remove_dir_all(&staging)?;
        }
        let result = write_split(cfg, &bank, split, offset, n, &staging);
        match result {
            Ok(()) => {
                let final_dir = out_dir.join(split);
                if final_dir.exists() {
                    std::fs::remove_dir_all(&final_dir)?;
                }
                std::fs::rename(&staging, &final_dir)?;
                splits.push(split.to_string());
            }
            Err(e) => {
                let _ = std::fs::remove_dir_all(&staging);
                return Err(e);
            }
        }
    }
    let manifest = DatasetManifest {
        counts,
        splits,
    };
    let f = std::fs::File::create(out_dir.join("dataset.json"))?;
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(manifest)
}

fn write_split(
    cfg: &M3soConfig,
    bank: &SpriteBank,
    split: &str,
    offset: u64,
    n: usize,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut metas = Vec::with_capacity(n);
    for i in 0..n {
        let seed = cfg.seed + offset + i as u64;
        let clip = generate_clip(cfg, bank, seed)?;
        let video_file = format!("clip_{i:05}.m3so");
        let audio_file = format!("clip_{i:05}.wav");
        save_clip_file(
            &dir.join(&video_file),
            clip.frames,
            clip.height,
            clip.width,
            &clip.video,
        )?;
        write_wav(&dir.join(&audio_file), clip.audio_rate, &clip.audio)?;
        metas.push(ClipMeta {
            id: i,
            video_file,
            audio_file,
            seed,
            digit_class: clip.digit_class,
            block_box: clip.block_box,
            events: clip.events,
        });
    }
    let manifest = SplitManifest {
        split: split.to_string(),
        master_seed: cfg.seed,
        split_offset: offset,
        origin: "lower-left".to_string(),
        config: cfg.clone(),
        clips: metas,
    };
    let f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(())
}

/// Loads every clip of a split back into memory (quantized u8/i16
/// precision, as stored).
pub fn load_split(dataset_dir: &Path, split: &str) -> Result<(M3soConfig, Vec<Clip>)> {
    let dir = dataset_dir.join(split);
    let manifest_path = dir.join("manifest.json");
    let manifest: SplitManifest = serde_json::from_reader(std::fs::File::open(&manifest_path)?)?;
    let cfg = manifest.config.clone();
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for meta in &manifest.clips {
        let (t, h, w, video) = load_clip_file(&dir.join(&meta.video_file))?;
        let (rate, wave) = read_wav(&dir.join(&meta.audio_file))?;
        if t != cfg.frames_per_clip || rate != cfg.audio_rate {
            return Err(AvError::invalid(
                "load_split",
                format!("clip {} does not match split config", meta.id),
            ));
        }
        clips.push(Clip {
            video,
            frames: t,
            height: h,
            width: w,
            audio: wave,
            audio_rate: rate,
            fps: cfg.fps,
            digit_class: meta.digit_class,
            events: meta.events.clone(),
            block_box: meta.block_box,
            block_frame: cfg.block_enabled.then_some(cfg.block_frame),
        });
    }
    Ok((cfg, clips))
}
