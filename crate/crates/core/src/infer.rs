//! Attention maps for arbitrary images from a trained checkpoint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, AttentionMap};
use crate::error::{Error, Result};
use crate::grid::RgbImage;
use crate::pngio;
use crate::trainer::Checkpoint;

/// Smallest side accepted by [`infer_image`].
pub const MIN_INPUT_SIDE: usize = 64;
/// Sidecar written next to the attention PNGs.
pub const INFER_SIDECAR: &str = "attention.json";

/// Per-image attention with the single-image threshold.
pub fn infer_image(checkpoint: &Checkpoint, image: &RgbImage) -> Result<AttentionMap> {
    if image.height() < MIN_INPUT_SIDE || image.width() < MIN_INPUT_SIDE {
        return Err(Error::Input(format!(
            "image {}x{} is smaller than {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}",
            image.height(),
            image.width()
        )));
    }
    let confidence = attention_forward(image, &checkpoint.attention)?;
    checkpoint.header.sparsity.attend(&confidence)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferSidecar {
    pub config_hash: String,
    pub epoch: usize,
    pub stems: Vec<String>,
}

/// Writes `{stem}.png` (16-bit attention) for every image in `images` and a
/// sidecar naming the checkpoint's config hash. Returns the written paths.
pub fn infer_dir(checkpoint: &Checkpoint, images: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let inputs = pngio::list_images(images)?;
    if inputs.is_empty() {
        return Err(Error::Input(format!("no images in {}", images.display())));
    }
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut written = Vec::with_capacity(inputs.len());
    let mut stems = Vec::with_capacity(inputs.len());
    for path in inputs {
        let stem = pngio::file_stem(&path);
        let image = pngio::read_rgb(&path)?;
        let attention = infer_image(checkpoint, &image)?;
        let target = out.join(format!("{stem}.png"));
        pngio::write_unit_map(&target, &attention.0)?;
        written.push(target);
        stems.push(stem);
    }
    let sidecar = InferSidecar {
        config_hash: checkpoint.header.config_hash.clone(),
        epoch: checkpoint.header.epoch,
        stems,
    };
    let path = out.join(INFER_SIDECAR);
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(Error::io(&path))?;
    Ok(written)
}
