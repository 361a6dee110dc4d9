//! Digit sprites: procedural segment-style glyphs, or MNIST IDX files.

use crate::error::{AvError, Result};
use std::io::Read;
use std::path::Path;

/// Greyscale sprite bitmaps for digit classes 0..=9.
#[derive(Clone, Debug)]
pub struct SpriteBank {
    size: usize,
    /// Per class, one or more sprites (procedural: exactly one).
    sprites: Vec<Vec<Vec<f64>>>,
}

impl SpriteBank {
    pub fn procedural(size: usize) -> SpriteBank {
        SpriteBank {
            size,
            sprites: (0..10).map(|c| vec![digit_glyph(c, size)]).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn variants(&self, class: u8) -> usize {
        self.sprites[class as usize].len()
    }

    pub fn sprite(&self, class: u8, variant: usize) -> &[f64] {
        &self.sprites[class as usize][variant]
    }
}

/// Seven-segment style glyph rendered into a size x size bitmap with a
/// one-pixel margin. Stroke values are 1.0 on a 0.0 background.
pub fn digit_glyph(class: u8, size: usize) -> Vec<f64> {
    assert!(class <= 9, "digit class out of range");
    assert!(size >= 8, "glyph size too small");
    // Segment layout: a = top, b = upper-right, c = lower-right,
    // d = bottom, e = lower-left, f = upper-left, g = middle.
    const SEGMENTS: [&str; 10] = [
        "abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg",
    ];
    let mut img = vec![0.0; size * size];
    let m = 1; // margin
    let th = (size / 5).max(2); // stroke thickness
    let w = size - 2 * m;
    let h = size - 2 * m;
    let mid = m + (h - th) / 2;
    let mut fill = |x0: usize, y0: usize, dx: usize, dy: usize| {
        for y in y0..(y0 + dy).min(size) {
            for x in x0..(x0 + dx).min(size) {
                img[y * size + x] = 1.0;
            }
        }
    };
    for seg in SEGMENTS[class as usize].chars() {
        match seg {
            'a' => fill(m, m, w, th),
            'b' => fill(m + w - th, m, th, h / 2),
            'c' => fill(m + w - th, m + h / 2, th, h - h / 2),
            'd' => fill(m, m + h - th, w, th),
            'e' => fill(m, m + h / 2, th, h - h / 2),
            'f' => fill(m, m, th, h / 2),
            'g' => fill(m, mid, w, th),
            _ => unreachable!(),
        }
    }
    img
}

/// Loads MNIST-format IDX image/label files and rescales each image to
/// `size` x `size` by area averaging, normalized to [0, 1].
pub fn load_idx_sprites(images: &Path, labels: &Path, size: usize) -> Result<SpriteBank> {
    let imgs = read_idx_images(images)?;
    let labs = read_idx_labels(labels)?;
    if imgs.len() != labs.len() {
        return Err(AvError::invalid(
            "idx",
            format!("{} images but {} labels", imgs.len(), labs.len()),
        ));
    }
    let mut sprites: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 10];
    for ((img, rows, cols), lab) in imgs.into_iter().zip(labs) {
        if lab > 9 {
            continue;
        }
        sprites[lab as usize].push(resize_area(&img, rows, cols, size));
    }
    for (c, v) in sprites.iter().enumerate() {
        if v.is_empty() {
            return Err(AvError::invalid("idx", format!("no sprites for digit {c}")));
        }
    }
    Ok(SpriteBank { size, sprites })
}

type IdxImage = (Vec<u8>, usize, usize);

fn read_idx_images(path: &Path) -> Result<Vec<IdxImage>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 || bytes[3] != 0x03 {
        return Err(AvError::invalid("idx", "bad image file magic"));
    }
    let n = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let rows = u32::from_be_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_be_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() != need {
        return Err(AvError::invalid("idx", format!("expected {need} bytes, got {}", bytes.len())));
    }
    Ok((0..n)
        .map(|i| {
            let off = 16 + i * rows * cols;
            (bytes[off..off + rows * cols].to_vec(), rows, cols)
        })
        .collect())
}

fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 || bytes[3] != 0x01 {
        return Err(AvError::invalid("idx", "bad label file magic"));
    }
    let n = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + n {
        return Err(AvError::invalid("idx", "label payload length mismatch"));
    }
    Ok(bytes[8..].to_vec())
}

fn resize_area(img: &[u8], rows: usize, cols: usize, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for oy in 0..size {
        let y0 = oy * rows / size;
        let y1 = ((oy + 1) * rows / size).max(y0 + 1);
        for ox in 0..size {
            let x0 = ox * cols / size;
            let x1 = ((ox + 1) * cols / size).max(x0 + 1);
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += img[y * cols + x] as f64 / 255.0;
                }
            }
            out[oy * size + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}
