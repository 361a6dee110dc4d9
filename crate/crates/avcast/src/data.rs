//! Clip preparation for the networks: precomputed per-frame audio
//! feature blocks and batch assembly helpers.

use crate::avfeat::{frame_spectrograms, StftParams};
use crate::error::{AvError, Result};
use crate::m3so::Clip;
use diffcore::Tensor;

/// A clip with its audio features flattened per frame.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    /// [T, H, W] intensities.
    pub video: Vec<f64>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// [T, d_HA * d_WA] magnitudes.
    pub audio_blocks: Vec<f64>,
    pub block_elems: usize,
    /// Ground-truth obstacle box, when the source clip has one.
    pub block_box: Option<crate::m3so::Rect>,
}

impl PreparedClip {
    pub fn frame(&self, t: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.video[t * plane..(t + 1) * plane]
    }

    pub fn audio_block(&self, t: usize) -> &[f64] {
        &self.audio_blocks[t * self.block_elems..(t + 1) * self.block_elems]
    }

    pub fn frame_tensor(&self, t: usize) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.frame(t).to_vec()).expect("frame shape")
    }
}

pub fn prepare_clip(clip: &Clip, stft: &StftParams) -> Result<PreparedClip> {
    let spec = frame_spectrograms(clip, stft)?;
    let elems = spec.block_elems();
    let mut blocks = Vec::with_capacity(clip.frames * elems);
    for b in &spec.blocks {
        blocks.extend_from_slice(b.data());
    }
    Ok(PreparedClip {
        video: clip.video.clone(),
        frames: clip.frames,
        height: clip.height,
        width: clip.width,
        audio_blocks: blocks,
        block_elems: elems,
        block_box: clip.block_box,
    })
}

pub fn prepare_clips(clips: &[Clip], stft: &StftParams) -> Result<Vec<PreparedClip>> {
    clips.iter().map(|c| prepare_clip(c, stft)).collect()
}

/// Stacks frame `t` of every clip into [B, 1, H, W].
pub fn frames_at(clips: &[&PreparedClip], t: usize) -> Result<Tensor> {
    let (h, w) = (clips[0].height, clips[0].width);
    let mut data = Vec::with_capacity(clips.len() * h * w);
    for c in clips {
        if c.height != h || c.width != w || t >= c.frames {
            return Err(AvError::invalid("frames_at", "clip shape mismatch in batch"));
        }
        data.extend_from_slice(c.frame(t));
    }
    Tensor::new(vec![clips.len(), 1, h, w], data).map_err(Into::into)
}

/// Stacks audio block `t` of every clip into [B, elems].
pub fn blocks_at(clips: &[&PreparedClip], t: usize) -> Result<Tensor> {
    let elems = clips[0].block_elems;
    let mut data = Vec::with_capacity(clips.len() * elems);
    for c in clips {
        if c.block_elems != elems || t >= c.frames {
            return Err(AvError::invalid("blocks_at", "audio block mismatch in batch"));
        }
        data.extend_from_slice(c.audio_block(t));
    }
    Tensor::new(vec![clips.len(), elems], data).map_err(Into::into)
}

/// Repeats one clip's frame `t` into [K, 1, H, W] (batched rollouts).
pub fn tile_frame(clip: &PreparedClip, t: usize, k: usize) -> Result<Tensor> {
    let (h, w) = (clip.height, clip.width);
    let mut data = Vec::with_capacity(k * h * w);
    for _ in 0..k {
        data.extend_from_slice(clip.frame(t));
    }
    Tensor::new(vec![k, 1, h, w], data).map_err(Into::into)
}

pub fn tile_block(clip: &PreparedClip, t: usize, k: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(k * clip.block_elems);
    for _ in 0..k {
        data.extend_from_slice(clip.audio_block(t));
    }
    Tensor::new(vec![k, clip.block_elems], data).map_err(Into::into)
}
