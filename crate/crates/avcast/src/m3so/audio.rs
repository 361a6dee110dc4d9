//! Tone synthesis: a per-digit carrier whose loudness tracks the
//! sprite's distance from the lower-left corner, switching to a wall or
//! block tone for the full frame interval of a bounce.

use super::trajectory::{EventKind, Trajectory};
use super::M3soConfig;
use crate::error::{AvError, Result};

/// Carrier for digit class c: 440 * 2^(c/12) Hz.
pub fn digit_tone_hz(class: u8) -> f64 {
    440.0 * (2.0f64).powf(class as f64 / 12.0)
}

pub const WALL_TONE_HZ: f64 = 880.0;

pub fn block_tone_hz() -> f64 {
    1320.0
}

/// Peak amplitude of the carrier.
pub const A_MAX: f64 = 0.9;

/// a(d) = a_max * d0 / (d0 + d) with d0 = box_size / 2.
pub fn amplitude_for_distance(d: f64, box_size: usize) -> f64 {
    let d0 = box_size as f64 / 2.0;
    A_MAX * d0 / (d0 + d)
}

/// Synthesizes the clip waveform. The segment for frame t spans samples
/// [t*S, (t+1)*S); its RMS equals a(d_t)/sqrt(2) exactly, so loudness
/// ordering across frames matches the distance ordering exactly.
pub fn synth_audio(traj: &Trajectory, cfg: &M3soConfig, digit_class: u8) -> Result<Vec<f64>> {
    cfg.validate()?;
    let t_total = traj.positions.len();
    if t_total != cfg.frames_per_clip {
        return Err(AvError::invalid(
            "synth_audio",
            format!(
                "trajectory has {} frames, config says {}",
                t_total, cfg.frames_per_clip
            ),
        ));
    }
    let s = cfg.samples_per_frame();
    let rate = cfg.audio_rate as f64;
    let sprite_half = cfg.sprite_size() as f64 / 2.0;
    let f_digit = digit_tone_hz(digit_class);

    // Frame -> tone override; a block bounce wins over a simultaneous
    // wall bounce (it is the rarer, more salient cue).
    let mut tone = vec![f_digit; t_total];
    for e in &traj.events {
        let f = match e.kind {
            EventKind::Wall => WALL_TONE_HZ,
            EventKind::Block => block_tone_hz(),
        };
        if tone[e.frame] == block_tone_hz() {
            continue;
        }
        tone[e.frame] = f;
    }

    let mut wave = vec![0.0; t_total * s];
    let mut phase: f64 = 0.0;
    for t in 0..t_total {
        let (px, py) = traj.positions[t];
        let cx = px + sprite_half;
        let cy = py + sprite_half;
        // Distance from the lower-left corner (x = 0, y = box bottom).
        let d = (cx * cx + (cfg.box_size as f64 - cy).powi(2)).sqrt();
        let amp = amplitude_for_distance(d, cfg.box_size);

        let seg = &mut wave[t * s..(t + 1) * s];
        let step = std::f64::consts::TAU * tone[t] / rate;
        let mut energy = 0.0;
        for sample in seg.iter_mut() {
            let v = phase.sin();
            *sample = v;
            energy += v * v;
            phase += step;
        }
        phase = phase.rem_euclid(std::f64::consts::TAU);
        // Scale so the segment RMS is exactly amp / sqrt(2).
        let rms_raw = (energy / s as f64).sqrt();
        let scale = if rms_raw > 0.0 {
            amp / (std::f64::consts::SQRT_2 * rms_raw)
        } else {
            0.0
        };
        for sample in seg.iter_mut() {
            *sample = (*sample * scale).clamp(-1.0, 1.0);
        }
    }
    Ok(wave)
}
