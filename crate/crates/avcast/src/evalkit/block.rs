//! Obstacle localization: a matched filter over the frame with the
//! digit blob masked out.

use crate::error::{AvError, Result};
use crate::m3so::Rect;
use diffcore::Tensor;

pub type BoxRegion = Rect;

#[derive(Clone, Copy, Debug)]
pub struct BlockDetection {
    /// None for frames with no positive evidence (e.g. all black).
    pub region: Option<BoxRegion>,
    /// Sum of intensities under the winning window.
    pub score: f64,
}

const PIXEL_THRESHOLD: f64 = 0.5;
/// Component bounding-box tolerance around block_size.
const SIZE_SLACK: usize = 3;
/// Minimum bbox fill ratio for a component to count as the block.
const MIN_FILL: f64 = 0.6;

/// Intersection-over-union of two rectangles.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let x0 = a.x.max(b.x);
    let y0 = a.y.max(b.y);
    let x1 = (a.x + a.w).min(b.x + b.w);
    let y1 = (a.y + a.h).min(b.y + b.h);
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    let inter = ((x1 - x0) * (y1 - y0)) as f64;
    let union = (a.w * a.h + b.w * b.h) as f64 - inter;
    inter / union
}

fn frame_view(t: &Tensor) -> Result<(&[f64], usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((t.data(), h, w)),
        [1, h, w] => Ok((t.data(), h, w)),
        [1, 1, h, w] => Ok((t.data(), h, w)),
        _ => Err(AvError::invalid(
            "locate_block",
            format!("expected a single frame, got {:?}", t.shape()),
        )),
    }
}

/// Finds the block_size x block_size window maximizing the intensity
/// sum after masking bright components that do not look like a solid
/// square of roughly the right size (the digit). Ties break toward the
/// smallest (y, x). All-dark frames report no region and score zero.
pub fn locate_block(frame: &Tensor, block_size: usize) -> Result<BlockDetection> {
    let (data, h, w) = frame_view(frame)?;
    if h < block_size || w < block_size {
        return Err(AvError::invalid(
            "locate_block",
            format!("frame {h}x{w} smaller than block {block_size}"),
        ));
    }

    // Connected components over the thresholded frame (4-connectivity).
    let mut label = vec![usize::MAX; h * w];
    let mut comps: Vec<(usize, usize, usize, usize, usize)> = Vec::new(); // (x0, y0, x1, y1, area)
    for start in 0..h * w {
        if data[start] < PIXEL_THRESHOLD || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut stack = vec![start];
        label[start] = id;
        let (mut x0, mut y0, mut x1, mut y1, mut area) = (w, h, 0usize, 0usize, 0usize);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            area += 1;
            let mut push = |q: usize| {
                if data[q] >= PIXEL_THRESHOLD && label[q] == usize::MAX {
                    label[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
        }
        comps.push((x0, y0, x1, y1, area));
    }

    // Mask components that cannot be the block.
    let mut masked: Vec<f64> = data.to_vec();
    let mut block_like = vec![false; comps.len()];
    for (id, &(x0, y0, x1, y1, area)) in comps.iter().enumerate() {
        let bw = x1 - x0 + 1;
        let bh = y1 - y0 + 1;
        let fill = area as f64 / (bw * bh) as f64;
        let near = |d: usize| d.abs_diff(block_size) <= SIZE_SLACK;
        block_like[id] = near(bw) && near(bh) && fill >= MIN_FILL;
    }
    for p in 0..h * w {
        if label[p] != usize::MAX && !block_like[label[p]] {
            masked[p] = 0.0;
        }
    }

    // Sliding-window sums via an integral image.
    let mut integral = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            integral[(y + 1) * (w + 1) + x + 1] = masked[y * w + x]
                + integral[y * (w + 1) + x + 1]
                + integral[(y + 1) * (w + 1) + x]
                - integral[y * (w + 1) + x];
        }
    }
    let window_sum = |y: usize, x: usize| -> f64 {
        integral[(y + block_size) * (w + 1) + x + block_size]
            - integral[y * (w + 1) + x + block_size]
            - integral[(y + block_size) * (w + 1) + x]
            + integral[y * (w + 1) + x]
    };
    let mut best = (0usize, 0usize, f64::NEG_INFINITY);
    for y in 0..=h - block_size {
        for x in 0..=w - block_size {
            let s = window_sum(y, x);
            if s > best.2 + 1e-12 {
                best = (y, x, s);
            }
        }
    }
    if best.2 <= 0.0 {
        return Ok(BlockDetection {
            region: None,
            score: 0.0,
        });
    }
    Ok(BlockDetection {
        region: Some(Rect {
            x: best.1,
            y: best.0,
            w: block_size,
            h: block_size,
        }),
        score: best.2,
    })
}
