//! Metrics and inference-time evaluation protocols: SSIM/PSNR,
//! best-of-K future selection, diversity curves, obstacle localization,
//! discriminator fooling rate, and the audio-visual mismatch probe.

mod block;
mod protocols;
mod report;
mod ssim;

pub use block::{iou, locate_block, BlockDetection, BoxRegion};
pub use protocols::{
    best_of_k, diversity_curves, fooling_rate, judge_probability, mean_frame_ssim,
    rollout_futures, rollout_futures_mismatched, BestOfK, DiversityCurves, JudgedClip,
    ROLLOUT_CHUNK,
};
pub use report::{render_markdown, write_curves_csv, write_pgm, write_report_json};
pub use ssim::{psnr, ssim, PSNR_CAP_DB, SSIM_WINDOW};

use crate::data::PreparedClip;
use crate::error::Result;
use crate::net::NetConfig;
use diffcore::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

/// Aggregated evaluation over a clip pool.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub f_seen: usize,
    pub t_total: usize,
    pub k: usize,
    pub clips: usize,
    /// Mean best-of-K SSIM per generated frame (t = f_seen+1..=t_total).
    pub ssim_per_frame: Vec<f64>,
    pub psnr_per_frame: Vec<f64>,
    /// Chosen rollout index per clip.
    pub chosen_indices: Vec<usize>,
    pub inter_ssim: Vec<(usize, f64)>,
    pub intra_ssim: Vec<(usize, f64)>,
    pub block_iou: Option<f64>,
    pub fooling_rate: Option<f64>,
}

impl EvalReport {
    pub fn mean_ssim(&self) -> f64 {
        if self.ssim_per_frame.is_empty() {
            return 0.0;
        }
        self.ssim_per_frame.iter().sum::<f64>() / self.ssim_per_frame.len() as f64
    }
}

/// Evaluation settings for [`evaluate_pool`].
#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub f_seen: usize,
    pub t_total: usize,
    pub k: usize,
    pub seed: u64,
    /// K values for diversity curves; empty disables them.
    pub diversity_k: Vec<usize>,
    /// Clips used for the (more expensive) diversity curves.
    pub diversity_clips: usize,
    /// Locate the obstacle in the final generated frame of each clip.
    pub block_size: Option<usize>,
    /// Shift audio by one pool position (the mismatch probe).
    pub mismatch_audio: bool,
}

/// Runs best-of-K evaluation (and optional diversity / localization)
/// over a clip pool, averaging curves across clips.
pub fn evaluate_pool(
    cfg: &NetConfig,
    gen: &ParamStore,
    pe_table: &Tensor,
    pool: &[PreparedClip],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if pool.is_empty() {
        return Err(crate::error::AvError::invalid("evaluate_pool", "empty clip pool"));
    }
    if settings.mismatch_audio && pool.len() < 2 {
        return Err(crate::error::AvError::invalid(
            "evaluate_pool",
            "mismatch probe needs at least two clips",
        ));
    }
    let horizon = settings.t_total - settings.f_seen;
    let mut report = EvalReport {
        f_seen: settings.f_seen,
        t_total: settings.t_total,
        k: settings.k,
        clips: pool.len(),
        ssim_per_frame: vec![0.0; horizon],
        psnr_per_frame: vec![0.0; horizon],
        ..EvalReport::default()
    };
    let mut iou_acc = 0.0;
    let mut iou_count = 0usize;
    let mut inter_acc: Vec<f64> = vec![0.0; settings.diversity_k.len()];
    let mut intra_acc: Vec<f64> = Vec::new();
    let mut div_clips = 0usize;

    for (i, clip) in pool.iter().enumerate() {
        let audio_clip = if settings.mismatch_audio {
            &pool[(i + 1) % pool.len()]
        } else {
            clip
        };
        let want_diversity =
            !settings.diversity_k.is_empty() && i < settings.diversity_clips;
        let k_needed = if want_diversity {
            settings.k.max(*settings.diversity_k.last().unwrap())
        } else {
            settings.k
        };
        let rollouts = rollout_futures_mismatched(
            cfg,
            gen,
            pe_table,
            clip,
            audio_clip,
            settings.f_seen,
            settings.t_total,
            k_needed,
            settings.seed.wrapping_add(i as u64),
        )?;
        let gt: Vec<Tensor> = (settings.f_seen..settings.t_total)
            .map(|t| clip.frame_tensor(t))
            .collect();
        let best = best_of_k(&rollouts[..settings.k], &gt)?;
        for (slot, v) in report.ssim_per_frame.iter_mut().zip(&best.ssim_curve) {
            *slot += v;
        }
        for (slot, v) in report.psnr_per_frame.iter_mut().zip(&best.psnr_curve) {
            *slot += v;
        }
        report.chosen_indices.push(best.index);

        if want_diversity {
            let curves = diversity_curves(&rollouts, &gt, &settings.diversity_k)?;
            if intra_acc.is_empty() {
                intra_acc = vec![0.0; curves.intra.len()];
            }
            for (slot, (_, v)) in inter_acc.iter_mut().zip(&curves.inter) {
                *slot += v;
            }
            for (slot, (_, v)) in intra_acc.iter_mut().zip(&curves.intra) {
                *slot += v;
            }
            div_clips += 1;
        }
        if let (Some(bs), Some(gt_box)) = (settings.block_size, clip.block_box) {
            let final_frame = rollouts[best.index].last().unwrap();
            let det = locate_block(final_frame, bs)?;
            iou_acc += det.region.map(|r| iou(&r, &gt_box)).unwrap_or(0.0);
            iou_count += 1;
        }
    }
    let n = pool.len() as f64;
    for v in report.ssim_per_frame.iter_mut() {
        *v /= n;
    }
    for v in report.psnr_per_frame.iter_mut() {
        *v /= n;
    }
    if div_clips > 0 {
        report.inter_ssim = settings
            .diversity_k
            .iter()
            .zip(&inter_acc)
            .map(|(&k, &v)| (k, v / div_clips as f64))
            .collect();
        let intra_ks: Vec<usize> = settings
            .diversity_k
            .iter()
            .copied()
            .filter(|&k| k >= 2)
            .collect();
        report.intra_ssim = intra_ks
            .iter()
            .zip(&intra_acc)
            .map(|(&k, &v)| (k, v / div_clips as f64))
            .collect();
    }
    if iou_count > 0 {
        report.block_iou = Some(iou_acc / iou_count as f64);
    }
    Ok(report)
}

/// Mismatch probe: evaluates the pool with every clip's audio replaced
/// by its neighbor's. The report has the standard shape; comparing its
/// SSIM against a matched run quantifies the model's audio reliance.
pub fn av_mismatch_probe(
    cfg: &NetConfig,
    gen: &ParamStore,
    pe_table: &Tensor,
    pool: &[PreparedClip],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let mut s = settings.clone();
    s.mismatch_audio = true;
    evaluate_pool(cfg, gen, pe_table, pool, &s)
}
