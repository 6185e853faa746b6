//! PNG encoding and decoding for the pipeline's on-disk artifacts.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, FloatMap, Grid, RgbImage};

pub fn read_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| {
            [
                p[0] as f32 / 255.0,
                p[1] as f32 / 255.0,
                p[2] as f32 / 255.0,
            ]
        })
        .collect();
    Grid::from_vec(h as usize, w as usize, data)
}

pub fn read_rgb8(path: impl AsRef<Path>) -> Result<Grid<[u8; 3]>> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = img.dimensions();
    Grid::from_vec(h as usize, w as usize, img.pixels().map(|p| p.0).collect())
}

pub fn bytes_to_rgb(image: &Grid<[u8; 3]>) -> RgbImage {
    image.map(|p| p.map(|v| v as f32 / 255.0))
}

pub fn rgb_to_bytes(image: &RgbImage) -> Grid<[u8; 3]> {
    image.map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
}

pub fn write_rgb(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    write_rgb8(path, &rgb_to_bytes(image))
}

pub fn write_rgb8(path: impl AsRef<Path>, image: &Grid<[u8; 3]>) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(
        image.width() as u32,
        image.height() as u32,
        image.data().iter().flatten().copied().collect(),
    )
    .expect("buffer length matches dimensions");
    buf.save(path.as_ref())?;
    Ok(())
}

pub fn read_gray16(path: impl AsRef<Path>) -> Result<Grid<u16>> {
    let img = image::open(path.as_ref())?.to_luma16();
    let (w, h) = img.dimensions();
    Grid::from_vec(h as usize, w as usize, img.into_raw())
}

pub fn write_gray16(path: impl AsRef<Path>, values: &Grid<u16>) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        values.width() as u32,
        values.height() as u32,
        values.data().to_vec(),
    )
    .expect("buffer length matches dimensions");
    buf.save(path.as_ref())?;
    Ok(())
}

/// Writes a `[0, 1]` map as 16-bit grayscale with value `round(a * 65535)`,
/// kept within `[1, 65534]` so decoded values stay strictly inside `(0, 1)`.
pub fn write_unit_map(path: impl AsRef<Path>, map: &FloatMap) -> Result<()> {
    let q = map.map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round().clamp(1.0, 65534.0) as u16);
    write_gray16(path, &q)
}

pub fn read_unit_map(path: impl AsRef<Path>) -> Result<FloatMap> {
    Ok(read_gray16(path)?.map(|&v| v as f32 / 65535.0))
}

/// Writes a binary mask as 8-bit grayscale (0 or 255).
pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect(),
    )
    .expect("buffer length matches dimensions");
    buf.save(path.as_ref())?;
    Ok(())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let img = image::open(path.as_ref())?.to_luma8();
    let (w, h) = img.dimensions();
    Grid::from_vec(h as usize, w as usize, img.pixels().map(|p| p[0] >= 128).collect())
}

/// Writes an integer label image as 16-bit PNG.
pub fn write_labels(path: impl AsRef<Path>, labels: &Grid<u32>) -> Result<()> {
    if let Some(&max) = labels.data().iter().max() {
        if max > u16::MAX as u32 {
            return Err(Error::Input(format!(
                "label {max} does not fit a 16-bit PNG"
            )));
        }
    }
    write_gray16(path, &labels.map(|&l| l as u16))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Grid<u32>> {
    Ok(read_gray16(path)?.map(|&v| v as u32))
}

/// Sorted list of image files (png/jpg/jpeg/tif/tiff) directly inside `dir`.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(
            ext.as_deref(),
            Some("png" | "jpg" | "jpeg" | "tif" | "tiff")
        ) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
