//! Audio features: per-frame STFT magnitude blocks and sinusoidal
//! temporal position encodings for the transformer inputs.

use crate::error::{AvError, Result};
use crate::m3so::Clip;
use diffcore::Tensor;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StftParams {
    pub window: usize,
    pub hop: usize,
    pub nfft: usize,
    /// Optional log(1 + m) compression of the magnitudes.
    pub log_scale: bool,
}

impl Default for StftParams {
    fn default() -> Self {
        StftParams {
            window: 256,
            hop: 64,
            nfft: 256,
            log_scale: false,
        }
    }
}

impl StftParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hop == 0 {
            return Err(AvError::Config("stft window/hop must be positive".into()));
        }
        if self.nfft < self.window {
            return Err(AvError::Config(format!(
                "nfft {} must be >= window {}",
                self.nfft, self.window
            )));
        }
        Ok(())
    }

    /// One-sided bin count (Nyquist excluded).
    pub fn bins(&self) -> usize {
        self.nfft / 2
    }

    pub fn cols_for(&self, samples: usize) -> usize {
        if samples < self.window {
            1
        } else {
            (samples - self.window) / self.hop + 1
        }
    }
}

/// Periodic Hann window.
fn hann(n: usize, i: usize) -> f64 {
    0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / n as f64).cos())
}

/// Hann-windowed one-sided STFT magnitudes [nfft/2, num_hops]. The wave
/// must span at least one window; shorter per-frame segments are padded
/// upstream (see [`frame_spectrograms`]).
pub fn stft(wave: &[f64], p: &StftParams) -> Result<Tensor> {
    p.validate()?;
    if wave.len() < p.window {
        return Err(AvError::invalid(
            "stft",
            format!("wave length {} < window {}", wave.len(), p.window),
        ));
    }
    let cols = (wave.len() - p.window) / p.hop + 1;
    let bins = p.bins();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(p.nfft);
    let mut out = vec![0.0; bins * cols];
    let mut buf = vec![Complex::new(0.0, 0.0); p.nfft];
    for c in 0..cols {
        let start = c * p.hop;
        for i in 0..p.nfft {
            let v = if i < p.window {
                wave[start + i] * hann(p.window, i)
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (k, slot) in buf.iter().take(bins).enumerate() {
            let m = slot.norm();
            out[k * cols + c] = if p.log_scale { (1.0 + m).ln() } else { m };
        }
    }
    Tensor::new(vec![bins, cols], out).map_err(Into::into)
}

/// Per-frame STFT magnitude blocks S_1..S_T, one per video frame.
#[derive(Clone, Debug)]
pub struct SpectrogramSeq {
    pub blocks: Vec<Tensor>,
    pub params: StftParams,
    pub audio_rate: u32,
    pub fps: u32,
    pub d_ha: usize,
    pub d_wa: usize,
}

impl SpectrogramSeq {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block_elems(&self) -> usize {
        self.d_ha * self.d_wa
    }

    /// Frequency (Hz) of the strongest bin in the first window of frame
    /// `t`'s segment, resolved against the STFT bin grid.
    pub fn peak_bin(&self, t: usize) -> usize {
        let block = &self.blocks[t];
        let cols = self.d_wa;
        let mut best = (0, f64::NEG_INFINITY);
        for k in 0..self.d_ha {
            let v = block.data()[k * cols];
            if v > best.1 {
                best = (k, v);
            }
        }
        best.0
    }

    pub fn bin_hz(&self, bin: usize) -> f64 {
        bin as f64 * self.audio_rate as f64 / self.params.nfft as f64
    }

    pub fn nearest_bin(&self, hz: f64) -> usize {
        ((hz * self.params.nfft as f64 / self.audio_rate as f64).round() as usize)
            .min(self.d_ha - 1)
    }
}

/// Splits the clip audio into per-frame segments [t*S, (t+1)*S) and
/// computes one magnitude block per frame. Segments shorter than one
/// window are zero-padded at the tail.
pub fn frame_spectrograms(clip: &Clip, params: &StftParams) -> Result<SpectrogramSeq> {
    params.validate()?;
    let s = clip.samples_per_frame();
    if clip.audio.len() != clip.frames * s {
        return Err(AvError::invalid(
            "frame_spectrograms",
            format!(
                "audio length {} != frames {} x {} samples",
                clip.audio.len(),
                clip.frames,
                s
            ),
        ));
    }
    let mut blocks = Vec::with_capacity(clip.frames);
    let mut padded;
    for t in 0..clip.frames {
        let seg = clip.audio_segment(t);
        let seg = if seg.len() < params.window {
            padded = seg.to_vec();
            padded.resize(params.window, 0.0);
            &padded[..]
        } else {
            seg
        };
        blocks.push(stft(seg, params)?);
    }
    let (d_ha, d_wa) = match blocks.first() {
        Some(b) => (b.shape()[0], b.shape()[1]),
        None => (params.bins(), params.cols_for(s)),
    };
    Ok(SpectrogramSeq {
        blocks,
        params: *params,
        audio_rate: clip.audio_rate,
        fps: clip.fps,
        d_ha,
        d_wa,
    })
}

/// Sinusoidal position code: entry 2i = sin(pos / 10000^(2i/d)),
/// entry 2i+1 = cos of the same argument. `d` must be even.
pub fn position_encode(pos: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(AvError::invalid("position_encode", format!("dim {d} must be even")));
    }
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let denom = 10000f64.powf(2.0 * i as f64 / d as f64);
        let arg = pos as f64 / denom;
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    Ok(out)
}

/// Precomputed table of position codes [max_len, d].
pub fn position_table(max_len: usize, d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(max_len * d);
    for pos in 0..max_len {
        data.extend(position_encode(pos, d)?);
    }
    Tensor::new(vec![max_len, d], data).map_err(Into::into)
}

/// Debug dump of one magnitude block as CSV (rows = frequency bins).
pub fn dump_block_csv(block: &Tensor, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let (rows, cols) = (block.shape()[0], block.shape()[1]);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in 0..rows {
        let row: Vec<String> = (0..cols)
            .map(|c| format!("{}", block.data()[r * cols + c]))
            .collect();
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    Ok(())
}
