use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, FloatMap, Grid};

/// `mask = attention >= threshold`.
pub fn binarize(attention: &FloatMap, threshold: f32) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "binarization threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(attention.map(|&v| v >= threshold))
}

pub fn binarize_attention(attention: &AttentionMap, threshold: f32) -> Result<BinaryMask> {
    binarize(&attention.0, threshold)
}

/// Offsets `(dy, dx)` with `dy^2 + dx^2 <= r^2`.
pub fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn shifted(mask: &BinaryMask, r: usize, c: usize, dy: isize, dx: isize) -> Option<bool> {
    let y = r as isize + dy;
    let x = c as isize + dx;
    if y < 0 || x < 0 || y >= mask.height() as isize || x >= mask.width() as isize {
        None
    } else {
        Some(mask[(y as usize, x as usize)])
    }
}

/// Erosion; pixels beyond the border count as foreground.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let se = disk(radius);
    Grid::from_fn(mask.height(), mask.width(), |r, c| {
        se.iter().all(|&(dy, dx)| shifted(mask, r, c, dy, dx).unwrap_or(true))
    })
}

/// Dilation; pixels beyond the border count as background.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let se = disk(radius);
    Grid::from_fn(mask.height(), mask.width(), |r, c| {
        se.iter().any(|&(dy, dx)| shifted(mask, r, c, dy, dx).unwrap_or(false))
    })
}

pub fn open(mask: &BinaryMask, radius: usize) -> BinaryMask {
    dilate(&erode(mask, radius), radius)
}

pub fn close(mask: &BinaryMask, radius: usize) -> BinaryMask {
    erode(&dilate(mask, radius), radius)
}

/// Opening then closing with the coarse disk, then the same with the fine disk.
pub fn morphological_cleanup(mask: &BinaryMask, coarse_radius: usize, fine_radius: usize) -> BinaryMask {
    let m = close(&open(mask, coarse_radius), coarse_radius);
    close(&open(&m, fine_radius), fine_radius)
}
