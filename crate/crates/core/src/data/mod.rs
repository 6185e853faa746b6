//! Tile extraction, tissue filtering, stain normalization, manifests and
//! balanced batch sampling.

mod manifest;
mod reinhard;
mod sampler;
mod slide;
mod store;
mod tissue;

pub use manifest::{ManifestEntry, ManifestHeader, ScaleSet, TileManifest};
pub use reinhard::{lab_stats, lab_to_rgb, reinhard_normalize, rgb_to_lab, LabStats, STD_FLOOR};
pub use sampler::{sample_balanced_batch, BalancedSampler};
pub use slide::{
    downsample_box, extract_dir, extract_tiles, DirectorySlide, ExtractConfig, MemorySlide, SlideReader,
    Tile, TileOrigin,
};
pub use store::{random_crop, StoredTile, TileStore, MANIFEST_FILE, TILES_DIR};
pub use tissue::{detect_tissue_fraction, filter_tile, TissueRule};
