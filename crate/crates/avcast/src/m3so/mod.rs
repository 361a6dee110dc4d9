//! M3SO benchmark generator: a digit sprite bouncing inside a box,
//! rasterized frames, a synchronized position-modulated tone, and an
//! optional surprise obstacle introduced mid-sequence. The `-NB`
//! variant simply disables the obstacle.

mod audio;
mod container;
mod dataset;
mod glyphs;
mod trajectory;

pub use audio::{amplitude_for_distance, block_tone_hz, digit_tone_hz, synth_audio, WALL_TONE_HZ};
pub use container::{load_clip_file, read_wav, save_clip_file, write_wav};
pub use dataset::{
    generate_clip, generate_dataset, load_split, render_frames, ClipMeta, DatasetManifest,
    SplitCounts, SplitManifest,
};
pub use glyphs::{digit_glyph, load_idx_sprites, SpriteBank};
pub use trajectory::{synth_trajectory, Event, EventKind, Trajectory};

use crate::error::{AvError, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned pixel rectangle (x, y = top-left corner).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct M3soConfig {
    /// Side of the square canvas in pixels.
    pub box_size: usize,
    /// Frames per clip (T).
    pub frames_per_clip: usize,
    pub fps: u32,
    /// Fixed digit class, or None to draw one per clip.
    pub digit_class: Option<u8>,
    pub sprite_source: SpriteSource,
    pub block_enabled: bool,
    /// 1-based frame number at which the obstacle appears.
    pub block_frame: usize,
    pub block_size: usize,
    pub audio_rate: u32,
    pub seed: u64,
    /// Sprite speed range in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum SpriteSource {
    /// Built-in segment-style digit glyphs.
    Procedural { size: usize },
    /// MNIST-format IDX image/label files.
    IdxFiles {
        images: String,
        labels: String,
        size: usize,
    },
}

impl SpriteSource {
    pub fn size(&self) -> usize {
        match self {
            SpriteSource::Procedural { size } => *size,
            SpriteSource::IdxFiles { size, .. } => *size,
        }
    }
}

impl Default for M3soConfig {
    fn default() -> Self {
        M3soConfig {
            box_size: 48,
            frames_per_clip: 60,
            fps: 10,
            digit_class: None,
            sprite_source: SpriteSource::Procedural { size: 16 },
            block_enabled: true,
            block_frame: 42,
            block_size: 8,
            audio_rate: 8000,
            seed: 0,
            speed_min: 2.0,
            speed_max: 4.0,
        }
    }
}

impl M3soConfig {
    pub fn sprite_size(&self) -> usize {
        self.sprite_source.size()
    }

    /// Audio samples per video frame.
    pub fn samples_per_frame(&self) -> usize {
        (self.audio_rate / self.fps) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.box_size <= self.sprite_size() + 2 {
            return Err(AvError::Config(format!(
                "box_size {} must exceed sprite size {} + 2",
                self.box_size,
                self.sprite_size()
            )));
        }
        if self.fps == 0 || self.audio_rate == 0 || self.audio_rate % self.fps != 0 {
            return Err(AvError::Config(format!(
                "audio_rate {} must be a positive multiple of fps {}",
                self.audio_rate, self.fps
            )));
        }
        if self.block_enabled {
            if self.block_frame < 2 || self.block_frame > self.frames_per_clip {
                return Err(AvError::Config(format!(
                    "block_frame {} out of range 2..={}",
                    self.block_frame, self.frames_per_clip
                )));
            }
            if self.block_size + 2 >= self.box_size {
                return Err(AvError::Config(format!(
                    "block_size {} does not fit in box {}",
                    self.block_size, self.box_size
                )));
            }
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return Err(AvError::Config(format!(
                "invalid speed range {}..{}",
                self.speed_min, self.speed_max
            )));
        }
        if let Some(c) = self.digit_class {
            if c > 9 {
                return Err(AvError::Config(format!("digit_class {c} out of 0..=9")));
            }
        }
        Ok(())
    }
}

/// A synchronized video/audio pair with its event metadata.
#[derive(Clone, Debug)]
pub struct Clip {
    /// Row-major [T, H, W] grayscale intensities in [0, 1].
    pub video: Vec<f64>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Mono waveform in [-1, 1]; exactly frames * samples_per_frame long.
    pub audio: Vec<f64>,
    pub audio_rate: u32,
    pub fps: u32,
    pub digit_class: u8,
    pub events: Vec<Event>,
    pub block_box: Option<Rect>,
    /// 1-based frame number the block appears at (when present).
    pub block_frame: Option<usize>,
}

impl Clip {
    pub fn samples_per_frame(&self) -> usize {
        (self.audio_rate / self.fps) as usize
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.video[t * plane..(t + 1) * plane]
    }

    /// Audio samples belonging to frame `t`: [t*S, (t+1)*S).
    pub fn audio_segment(&self, t: usize) -> &[f64] {
        let s = self.samples_per_frame();
        &self.audio[t * s..(t + 1) * s]
    }

    pub fn has_event_at(&self, frame: usize) -> bool {
        self.events.iter().any(|e| e.frame == frame)
    }
}
