//! Inference-time protocols: stochastic rollouts, best-of-K selection,
//! diversity curves, discriminator fooling rate, and the audio-visual
//! mismatch probe.

use super::ssim::{psnr, ssim};
use crate::data::{tile_block, tile_frame, PreparedClip};
use crate::error::{AvError, Result};
use crate::net::{
    discriminate_seq, run_sequence, Binding, BnMode, JudgeStep, NetConfig, RunMode, SeqInputs,
    ZSource,
};
use crate::util::{derived_rng, std_normal_vec};
use diffcore::{ParamStore, Tape, Tensor};

/// How many rollouts share one batched inference pass.
pub const ROLLOUT_CHUNK: usize = 10;

/// Samples `k` prior-driven rollouts for one clip. Rollout `j` draws its
/// noise from a stream keyed by (seed, j), so results are independent of
/// the chunking. Returns, per rollout, the generated frames [H, W] for
/// t = f_seen+1..=t_total.
pub fn rollout_futures(
    cfg: &NetConfig,
    gen: &ParamStore,
    pe_table: &Tensor,
    clip: &PreparedClip,
    f_seen: usize,
    t_total: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<Tensor>>> {
    rollout_futures_mismatched(cfg, gen, pe_table, clip, clip, f_seen, t_total, k, seed)
}

/// Same as [`rollout_futures`] but with the audio taken from a
/// (possibly different) clip: the mismatch construction.
#[allow(clippy::too_many_arguments)]
pub fn rollout_futures_mismatched(
    cfg: &NetConfig,
    gen: &ParamStore,
    pe_table: &Tensor,
    visual_clip: &PreparedClip,
    audio_clip: &PreparedClip,
    f_seen: usize,
    t_total: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<Tensor>>> {
    if k == 0 {
        return Err(AvError::invalid("rollout_futures", "k must be >= 1"));
    }
    if visual_clip.frames < f_seen || audio_clip.frames < t_total {
        return Err(AvError::invalid(
            "rollout_futures",
            format!(
                "clip supplies {} frames / {} audio frames, need {f_seen}/{t_total}",
                visual_clip.frames, audio_clip.frames
            ),
        ));
    }
    let (h, w) = (visual_clip.height, visual_clip.width);
    let mut out: Vec<Vec<Tensor>> = Vec::with_capacity(k);
    let mut start = 0;
    while start < k {
        let chunk = ROLLOUT_CHUNK.min(k - start);
        let frames: Vec<Tensor> = (0..f_seen)
            .map(|t| tile_frame(visual_clip, t, chunk))
            .collect::<Result<_>>()?;
        let audio: Vec<Tensor> = (0..t_total)
            .map(|t| tile_block(audio_clip, t, chunk))
            .collect::<Result<_>>()?;
        // Per-rollout noise streams keyed by the global rollout index.
        let steps = t_total - 1;
        let mut per_rollout: Vec<Vec<f64>> = Vec::with_capacity(chunk);
        for j in 0..chunk {
            let mut rng = derived_rng(seed, &[0x6e01, (start + j) as u64]);
            per_rollout.push(std_normal_vec(&mut rng, steps * cfg.z_dim));
        }
        let noise: Vec<Tensor> = (0..steps)
            .map(|s| {
                let mut data = Vec::with_capacity(chunk * cfg.z_dim);
                for pr in &per_rollout {
                    data.extend_from_slice(&pr[s * cfg.z_dim..(s + 1) * cfg.z_dim]);
                }
                Tensor::new(vec![chunk, cfg.z_dim], data).map_err(Into::into)
            })
            .collect::<Result<_>>()?;

        let mut tape = Tape::inference();
        let mut bind = Binding::new(&mut tape, gen, BnMode::Infer)?;
        let seq = run_sequence(
            cfg,
            &mut tape,
            &mut bind,
            pe_table,
            &SeqInputs {
                frames: &frames,
                audio_blocks: &audio,
                f_seen,
                t_total,
            },
            RunMode::Infer,
            ZSource::Prior,
            &noise,
        )?;
        for j in 0..chunk {
            let mut frames_j = Vec::with_capacity(seq.xhat.len());
            for &node in &seq.xhat {
                let v = tape.value(node);
                let plane = h * w;
                let data = v.data()[j * plane..(j + 1) * plane].to_vec();
                frames_j.push(Tensor::new(vec![h, w], data)?);
            }
            out.push(frames_j);
        }
        start += chunk;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct BestOfK {
    pub index: usize,
    pub mean_ssim: f64,
    pub ssim_curve: Vec<f64>,
    pub psnr_curve: Vec<f64>,
}

/// Selects the rollout with the highest mean per-frame SSIM against the
/// ground truth; ties keep the lowest index.
pub fn best_of_k(rollouts: &[Vec<Tensor>], ground_truth: &[Tensor]) -> Result<BestOfK> {
    if rollouts.is_empty() {
        return Err(AvError::invalid("best_of_k", "empty rollout set"));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in rollouts.iter().enumerate() {
        if r.len() != ground_truth.len() {
            return Err(AvError::invalid(
                "best_of_k",
                format!("rollout {i} has {} frames, ground truth {}", r.len(), ground_truth.len()),
            ));
        }
        let mean = mean_frame_ssim(r, ground_truth)?;
        if best.map(|(_, b)| mean > b).unwrap_or(true) {
            best = Some((i, mean));
        }
    }
    let (index, mean_ssim) = best.unwrap();
    let chosen = &rollouts[index];
    let mut ssim_curve = Vec::with_capacity(chosen.len());
    let mut psnr_curve = Vec::with_capacity(chosen.len());
    for (f, gt) in chosen.iter().zip(ground_truth) {
        ssim_curve.push(ssim(f, gt)?);
        psnr_curve.push(psnr(f, gt)?);
    }
    Ok(BestOfK {
        index,
        mean_ssim,
        ssim_curve,
        psnr_curve,
    })
}

pub fn mean_frame_ssim(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(AvError::invalid(
            "mean_frame_ssim",
            format!("{} vs {} frames", a.len(), b.len()),
        ));
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += ssim(x, y)?;
    }
    Ok(acc / a.len() as f64)
}

#[derive(Clone, Debug, Default)]
pub struct DiversityCurves {
    /// (K, best-of-K mean SSIM vs ground truth).
    pub inter: Vec<(usize, f64)>,
    /// (K, mean pairwise SSIM among the first K rollouts); K >= 2 only.
    pub intra: Vec<(usize, f64)>,
}

/// Nested-sampling diversity curves: every K reuses the first K
/// rollouts of the same set.
pub fn diversity_curves(
    rollouts: &[Vec<Tensor>],
    ground_truth: &[Tensor],
    k_values: &[usize],
) -> Result<DiversityCurves> {
    if k_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AvError::invalid("diversity_curves", "K values must be ascending"));
    }
    if k_values.last().copied().unwrap_or(0) > rollouts.len() {
        return Err(AvError::invalid(
            "diversity_curves",
            format!("largest K exceeds {} rollouts", rollouts.len()),
        ));
    }
    // Pairwise mean-SSIM cache over the full set (upper triangle).
    let kmax = k_values.last().copied().unwrap_or(0);
    let mut pair = vec![0.0; kmax * kmax];
    for i in 0..kmax {
        for j in (i + 1)..kmax {
            let v = mean_frame_ssim(&rollouts[i], &rollouts[j])?;
            pair[i * kmax + j] = v;
        }
    }
    let mut scores = Vec::with_capacity(kmax);
    for r in &rollouts[..kmax] {
        scores.push(mean_frame_ssim(r, ground_truth)?);
    }
    let mut curves = DiversityCurves::default();
    for &k in k_values {
        let inter = scores[..k].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        curves.inter.push((k, inter));
        if k >= 2 {
            let mut acc = 0.0;
            let mut n = 0usize;
            for i in 0..k {
                for j in (i + 1)..k {
                    acc += pair[i * kmax + j];
                    n += 1;
                }
            }
            curves.intra.push((k, acc / n as f64));
        }
    }
    Ok(curves)
}

/// A generated clip judged against its own real context.
pub struct JudgedClip<'a> {
    pub clip: &'a PreparedClip,
    /// Generated frames for t = f_seen+1..=t_total, [H, W].
    pub gen_frames: &'a [Tensor],
    pub f_seen: usize,
}

/// Fraction of generated frames (with their true aligned context) that
/// the sequence judge scores above 0.5.
pub fn fooling_rate(cfg: &NetConfig, disc: &ParamStore, judged: &[JudgedClip]) -> Result<f64> {
    if judged.is_empty() {
        return Err(AvError::invalid("fooling_rate", "empty evaluation set"));
    }
    let mut fooled = 0usize;
    let mut total = 0usize;
    for jc in judged {
        let t_total = jc.f_seen + jc.gen_frames.len();
        for (gi, gen_frame) in jc.gen_frames.iter().enumerate() {
            let t = jc.f_seen + 1 + gi; // 1-based judged frame
            if t <= cfg.r_history || t + cfg.k_lookahead - 1 > t_total {
                continue;
            }
            let p = judge_probability(cfg, disc, jc.clip, gen_frame, t)?;
            if p > 0.5 {
                fooled += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(AvError::invalid("fooling_rate", "no judgeable frames"));
    }
    Ok(fooled as f64 / total as f64)
}


/// Judge score for `frame` standing in for the clip's frame `t`
/// (1-based) with the real neighborhood and aligned audio.
pub fn judge_probability(
    cfg: &NetConfig,
    disc: &ParamStore,
    clip: &PreparedClip,
    frame: &Tensor,
    t: usize,
) -> Result<f64> {
    let mut tape = Tape::inference();
    let bind = Binding::new(&mut tape, disc, BnMode::Infer)?;
    let (h, w) = (clip.height, clip.width);
    let center_frame = tape.constant(frame.reshaped(vec![1, 1, h, w])?)?;
    let center_audio = tape.constant(Tensor::new(
        vec![1, clip.block_elems],
        clip.audio_block(t - 1).to_vec(),
    )?)?;
    let mut past = Vec::with_capacity(cfg.r_history);
    for j in (1..=cfg.r_history).rev() {
        let idx = t - 1 - j; // 0-based index of frame t - j
        let f = tape.constant(Tensor::new(vec![1, 1, h, w], clip.frame(idx).to_vec())?)?;
        let a = tape.constant(Tensor::new(
            vec![1, clip.block_elems],
            clip.audio_block(idx).to_vec(),
        )?)?;
        past.push(JudgeStep { frame: f, audio: a });
    }
    let mut future = Vec::with_capacity(cfg.k_lookahead - 1);
    for j in 1..cfg.k_lookahead {
        let idx = t - 1 + j;
        let f = tape.constant(Tensor::new(vec![1, 1, h, w], clip.frame(idx).to_vec())?)?;
        let a = tape.constant(Tensor::new(
            vec![1, clip.block_elems],
            clip.audio_block(idx).to_vec(),
        )?)?;
        future.push(JudgeStep { frame: f, audio: a });
    }
    let p = discriminate_seq(
        cfg,
        &mut tape,
        &bind,
        JudgeStep {
            frame: center_frame,
            audio: center_audio,
        },
        &past,
        &future,
    )?;
    tape.value(p).item().map_err(Into::into)
}
