//! Clip container: magic "M3SO", a version byte, u32-LE dims (T, H, W),
//! then one u8 per pixel (round(255 * intensity)). Audio is stored
//! separately as mono 16-bit PCM WAV.

use crate::error::{AvError, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const CLIP_MAGIC: &[u8; 4] = b"M3SO";
pub const CLIP_VERSION: u8 = 1;

pub fn save_clip_file(path: &Path, frames: usize, h: usize, w: usize, video: &[f64]) -> Result<()> {
    if video.len() != frames * h * w {
        return Err(AvError::invalid(
            "save_clip",
            format!("video length {} != {}x{}x{}", video.len(), frames, h, w),
        ));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CLIP_MAGIC)?;
    f.write_all(&[CLIP_VERSION])?;
    for dim in [frames as u32, h as u32, w as u32] {
        f.write_all(&dim.to_le_bytes())?;
    }
    let bytes: Vec<u8> = video.iter().map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Returns (frames, h, w, video in [0,1]).
pub fn load_clip_file(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CLIP_MAGIC {
        return Err(AvError::invalid("load_clip", format!("bad magic {magic:?}")));
    }
    let mut ver = [0u8; 1];
    f.read_exact(&mut ver)?;
    if ver[0] != CLIP_VERSION {
        return Err(AvError::invalid("load_clip", format!("unsupported version {}", ver[0])));
    }
    let mut dims = [0u32; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        f.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b);
    }
    let (t, h, w) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let mut bytes = vec![0u8; t * h * w];
    f.read_exact(&mut bytes)?;
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(AvError::invalid("load_clip", "trailing bytes"));
    }
    Ok((t, h, w, bytes.iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn write_wav(path: &Path, rate: u32, wave: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &v in wave {
        let s = (v.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        writer.write_sample(s)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Returns (sample_rate, samples in [-1, 1]).
pub fn read_wav(path: &Path) -> Result<(u32, Vec<f64>)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 {
        return Err(AvError::invalid(
            "read_wav",
            format!("expected mono 16-bit, got {} ch {} bits", spec.channels, spec.bits_per_sample),
        ));
    }
    let samples: std::result::Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    Ok((
        spec.sample_rate,
        samples?.into_iter().map(|s| s as f64 / i16::MAX as f64).collect(),
    ))
}
