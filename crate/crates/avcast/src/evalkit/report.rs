//! Report serialization: JSON, per-frame CSV curves, PGM frame dumps,
//! and a small Markdown rendering of headline numbers.

use super::EvalReport;
use crate::error::{AvError, Result};
use diffcore::Tensor;
use std::io::Write;
use std::path::Path;

pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(f, report)?;
    Ok(())
}

/// Per-frame curves plus the diversity curves as flat CSV tables.
pub fn write_curves_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "frame,ssim,psnr")?;
    for (i, (s, p)) in report
        .ssim_per_frame
        .iter()
        .zip(&report.psnr_per_frame)
        .enumerate()
    {
        writeln!(f, "{},{s},{p}", report.f_seen + 1 + i)?;
    }
    if !report.inter_ssim.is_empty() {
        writeln!(f)?;
        writeln!(f, "k,inter_ssim")?;
        for (k, v) in &report.inter_ssim {
            writeln!(f, "{k},{v}")?;
        }
    }
    if !report.intra_ssim.is_empty() {
        writeln!(f)?;
        writeln!(f, "k,intra_ssim")?;
        for (k, v) in &report.intra_ssim {
            writeln!(f, "{k},{v}")?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Binary PGM (P5) dump of a single frame in [0, 1].
pub fn write_pgm(frame: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match *frame.shape() {
        [h, w] => (h, w),
        [1, h, w] => (h, w),
        [1, 1, h, w] => (h, w),
        _ => {
            return Err(AvError::invalid(
                "write_pgm",
                format!("expected a single frame, got {:?}", frame.shape()),
            ))
        }
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = frame
        .data()
        .iter()
        .map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8)
        .collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Markdown tables of SSIM/PSNR at selected horizons plus headline
/// scalars, shaped like the usual per-frame benchmark tables.
pub fn render_markdown(report: &EvalReport, horizons: &[usize]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# Evaluation report\n\nClips: {}, seen frames: {}, total frames: {}, best-of-{}\n\n",
        report.clips, report.f_seen, report.t_total, report.k
    ));
    out.push_str("| Metric |");
    for h in horizons {
        out.push_str(&format!(" Frame {h} |"));
    }
    out.push_str("\n|---|");
    for _ in horizons {
        out.push_str("---|");
    }
    out.push('\n');
    let row = |name: &str, curve: &[f64]| -> String {
        let mut r = format!("| {name} |");
        for &h in horizons {
            let idx = h.checked_sub(report.f_seen + 1);
            match idx.and_then(|i| curve.get(i)) {
                Some(v) => r.push_str(&format!(" {v:.4} |")),
                None => r.push_str(" - |"),
            }
        }
        r.push('\n');
        r
    };
    out.push_str(&row("SSIM", &report.ssim_per_frame));
    out.push_str(&row("PSNR", &report.psnr_per_frame));
    out.push('\n');
    if let Some(iou) = report.block_iou {
        out.push_str(&format!("Mean block localization IoU: {iou:.4}\n\n"));
    }
    if let Some(fr) = report.fooling_rate {
        out.push_str(&format!("Discriminator fooling rate: {fr:.4}\n\n"));
    }
    if !report.inter_ssim.is_empty() {
        out.push_str("| K | inter-SSIM | intra-SSIM |\n|---|---|---|\n");
        for (k, v) in &report.inter_ssim {
            let intra = report
                .intra_ssim
                .iter()
                .find(|(ik, _)| ik == k)
                .map(|(_, iv)| format!("{iv:.4}"))
                .unwrap_or_else(|| "-".to_string());
            out.push_str(&format!("| {k} | {v:.4} | {intra} |\n"));
        }
    }
    out
}
