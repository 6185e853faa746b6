use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::manifest::{ManifestEntry, ManifestHeader, ScaleSet, TileManifest};
use super::store::{TileStore, MANIFEST_FILE, TILES_DIR};
use super::reinhard::{reinhard_normalize, LabStats};
use super::tissue::{detect_tissue_fraction, TissueRule};
use crate::error::{Error, Result};
use crate::grid::{Grid, RgbImage};
use crate::pngio;

/// Pixel access to one slide at a set of magnifications.
pub trait SlideReader {
    fn source_id(&self) -> &str;
    fn available_levels(&self) -> Vec<u32>;
    fn read_level(&self, level: u32) -> Result<RgbImage>;
}

/// A slide stored as a directory holding one image per magnification,
/// named by the magnification factor (`10.png`, `20x.png`, ...).
#[derive(Clone, Debug)]
pub struct DirectorySlide {
    id: String,
    levels: BTreeMap<u32, PathBuf>,
}

impl DirectorySlide {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Input(format!("slide path {} has no name", dir.display())))?;
        let mut levels = BTreeMap::new();
        for path in pngio::list_images(dir)? {
            let stem = pngio::file_stem(&path).to_ascii_lowercase();
            if let Ok(level) = stem.trim_end_matches('x').parse::<u32>() {
                levels.insert(level, path);
            }
        }
        if levels.is_empty() {
            return Err(Error::Input(format!(
                "slide directory {} holds no magnification images",
                dir.display()
            )));
        }
        Ok(Self { id, levels })
    }
}

impl SlideReader for DirectorySlide {
    fn source_id(&self) -> &str {
        &self.id
    }

    fn available_levels(&self) -> Vec<u32> {
        self.levels.keys().copied().collect()
    }

    fn read_level(&self, level: u32) -> Result<RgbImage> {
        let path = self.levels.get(&level).ok_or_else(|| {
            Error::Config(format!("slide {} has no {level}x level", self.id))
        })?;
        pngio::read_rgb(path)
    }
}

/// In-memory slide, also used to turn a single pre-extracted patch into a
/// pyramid by downsampling.
#[derive(Clone, Debug)]
pub struct MemorySlide {
    id: String,
    levels: BTreeMap<u32, RgbImage>,
}

impl MemorySlide {
    pub fn new(id: impl Into<String>, levels: BTreeMap<u32, RgbImage>) -> Self {
        Self {
            id: id.into(),
            levels,
        }
    }

    /// Builds every level of `scale_set` from a patch scanned at
    /// `base_level`; each level must divide the base magnification.
    pub fn from_patch(
        id: impl Into<String>,
        patch: RgbImage,
        base_level: u32,
        scale_set: &ScaleSet,
    ) -> Result<Self> {
        let mut levels = BTreeMap::new();
        for &level in scale_set.levels() {
            if level > base_level || !base_level.is_multiple_of(level) {
                return Err(Error::Config(format!(
                    "cannot derive {level}x from a {base_level}x patch"
                )));
            }
            levels.insert(level, downsample_box(&patch, (base_level / level) as usize));
        }
        Ok(Self::new(id, levels))
    }
}

impl SlideReader for MemorySlide {
    fn source_id(&self) -> &str {
        &self.id
    }

    fn available_levels(&self) -> Vec<u32> {
        self.levels.keys().copied().collect()
    }

    fn read_level(&self, level: u32) -> Result<RgbImage> {
        self.levels
            .get(&level)
            .cloned()
            .ok_or_else(|| Error::Config(format!("slide {} has no {level}x level", self.id)))
    }
}

/// Box-filter downsampling by an integer factor; trailing partial blocks are dropped.
pub fn downsample_box(image: &RgbImage, factor: usize) -> RgbImage {
    if factor <= 1 {
        return image.clone();
    }
    let (h, w) = (image.height() / factor, image.width() / factor);
    let norm = (factor * factor) as f32;
    Grid::from_fn(h, w, |r, c| {
        let mut acc = [0.0f32; 3];
        for dy in 0..factor {
            for dx in 0..factor {
                let p = image[(r * factor + dy, c * factor + dx)];
                for k in 0..3 {
                    acc[k] += p[k];
                }
            }
        }
        acc.map(|v| v / norm)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileOrigin {
    pub level: u32,
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub pixels: RgbImage,
    /// Index into the scale set.
    pub magnification_label: usize,
    pub source_id: String,
    pub origin: TileOrigin,
}

impl Tile {
    /// File stem `{source_id}_{level}_{x}_{y}`.
    pub fn stem(&self) -> String {
        format!(
            "{}_{}_{}_{}",
            self.source_id, self.origin.level, self.origin.x, self.origin.y
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractConfig {
    pub scale_set: ScaleSet,
    pub tile_size: usize,
    pub tissue_threshold: f64,
    pub tissue_rule: TissueRule,
    pub normalization_target: Option<LabStats>,
}

/// Tiles every requested level of `slide` on a non-overlapping grid
/// (partial edge tiles dropped), keeps tissue tiles and hands each one to
/// `sink`. Returns the manifest entries of the kept tiles.
pub fn extract_tiles(
    slide: &dyn SlideReader,
    config: &ExtractConfig,
    mut sink: impl FnMut(Tile) -> Result<()>,
) -> Result<Vec<ManifestEntry>> {
    if config.tile_size == 0 {
        return Err(Error::Config("tile size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.tissue_threshold) {
        return Err(Error::Config(format!(
            "tissue threshold must lie in [0, 1], got {}",
            config.tissue_threshold
        )));
    }
    let available = slide.available_levels();
    for &level in config.scale_set.levels() {
        if !available.contains(&level) {
            return Err(Error::Config(format!(
                "slide {} does not provide the requested {level}x magnification",
                slide.source_id()
            )));
        }
    }
    let size = config.tile_size;
    let mut entries = Vec::new();
    for (label, &level) in config.scale_set.levels().iter().enumerate() {
        let image = slide.read_level(level)?;
        for gy in 0..image.height() / size {
            for gx in 0..image.width() / size {
                let (y, x) = (gy * size, gx * size);
                let pixels = image.crop(y, x, size, size)?;
                let fraction = detect_tissue_fraction(&pixels, &config.tissue_rule)?;
                if fraction < config.tissue_threshold {
                    continue;
                }
                let pixels = match &config.normalization_target {
                    Some(target) => reinhard_normalize(&pixels, target)?,
                    None => pixels,
                };
                entries.push(ManifestEntry {
                    source_id: slide.source_id().to_string(),
                    level,
                    x,
                    y,
                    tissue_fraction: fraction,
                });
                sink(Tile {
                    pixels,
                    magnification_label: label,
                    source_id: slide.source_id().to_string(),
                    origin: TileOrigin { level, x, y },
                })?;
            }
        }
    }
    Ok(entries)
}

/// Extracts every slide directory under `slides` into `out`, writing
/// `tiles/{stem}.png` and the manifest. Slides are visited in name order.
pub fn extract_dir(
    slides: impl AsRef<Path>,
    out: impl AsRef<Path>,
    config: &ExtractConfig,
) -> Result<TileManifest> {
    let (slides, out) = (slides.as_ref(), out.as_ref());
    let listing = std::fs::read_dir(slides).map_err(Error::io(slides))?;
    let mut dirs = Vec::new();
    for entry in listing {
        let path = entry.map_err(Error::io(slides))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Input(format!("no slide directories under {}", slides.display())));
    }
    let tiles_dir = out.join(TILES_DIR);
    std::fs::create_dir_all(&tiles_dir).map_err(Error::io(&tiles_dir))?;
    let mut entries = Vec::new();
    for dir in dirs {
        let slide = DirectorySlide::open(&dir)?;
        entries.extend(extract_tiles(&slide, config, |tile| {
            pngio::write_rgb(TileStore::tile_path(out, &tile.stem()), &tile.pixels)
        })?);
    }
    let header = ManifestHeader {
        scale_set: config.scale_set.clone(),
        tile_size: config.tile_size,
        tissue_threshold: config.tissue_threshold,
        normalization_target: config.normalization_target,
    };
    let manifest = TileManifest::new(header, entries)?;
    manifest.write(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PINK: [f32; 3] = [0.9, 0.4, 0.6];

    fn single_level(image: RgbImage) -> (MemorySlide, ExtractConfig) {
        let slide = MemorySlide::new("s1", BTreeMap::from([(20, image)]));
        let config = ExtractConfig {
            scale_set: ScaleSet::new(vec![20]).unwrap(),
            tile_size: 224,
            tissue_threshold: 0.7,
            tissue_rule: TissueRule::default(),
            normalization_target: None,
        };
        (slide, config)
    }

    fn run(slide: &MemorySlide, config: &ExtractConfig) -> (Vec<Tile>, Vec<ManifestEntry>) {
        let mut tiles = Vec::new();
        let entries = extract_tiles(slide, config, |t| {
            tiles.push(t);
            Ok(())
        })
        .unwrap();
        (tiles, entries)
    }

    #[test]
    fn full_tissue_gives_exact_grid() {
        let (slide, config) = single_level(Grid::filled(448, 448, PINK));
        let (tiles, entries) = run(&slide, &config);
        assert_eq!(tiles.len(), 4);
        assert_eq!(entries.len(), 4);
        assert!(tiles.iter().all(|t| t.pixels.height() == 224 && t.magnification_label == 0));
    }

    #[test]
    fn white_slide_gives_nothing() {
        let (slide, config) = single_level(Grid::filled(448, 448, [1.0; 3]));
        assert_eq!(run(&slide, &config).0.len(), 0);
    }

    #[test]
    fn left_half_tissue_keeps_left_column() {
        let img = Grid::from_fn(448, 448, |_, c| if c < 224 { PINK } else { [1.0; 3] });
        let (slide, config) = single_level(img);
        let (tiles, _) = run(&slide, &config);
        assert_eq!(tiles.len(), 2);
        assert!(tiles.iter().all(|t| t.origin.x == 0));
    }

    #[test]
    fn partial_edge_tiles_are_dropped() {
        let (slide, config) = single_level(Grid::filled(500, 300, PINK));
        assert_eq!(run(&slide, &config).0.len(), 2);
    }

    #[test]
    fn missing_level_is_config_error_naming_it() {
        let (slide, mut config) = single_level(Grid::filled(448, 448, PINK));
        config.scale_set = ScaleSet::new(vec![20, 40]).unwrap();
        match extract_tiles(&slide, &config, |_| Ok(())) {
            Err(Error::Config(msg)) => assert!(msg.contains("40x")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn patch_pyramid_levels() {
        let patch = Grid::filled(400, 400, PINK);
        let set = ScaleSet::new(vec![10, 20, 40]).unwrap();
        let slide = MemorySlide::from_patch("p", patch, 40, &set).unwrap();
        assert_eq!(slide.read_level(10).unwrap().height(), 100);
        assert_eq!(slide.read_level(40).unwrap().height(), 400);
        assert!(MemorySlide::from_patch("p", Grid::filled(8, 8, PINK), 30, &set).is_err());
    }
}
