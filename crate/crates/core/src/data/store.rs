use std::path::{Path, PathBuf};

use rand::Rng;

use super::manifest::{ScaleSet, TileManifest};
use super::slide::{MemorySlide, SlideReader};
use crate::error::{Error, Result};
use crate::grid::{Grid, RgbImage};
use crate::pngio;

/// A tile held in memory as 8-bit RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTile {
    pub pixels: Grid<[u8; 3]>,
    pub label: usize,
    pub stem: String,
}

impl StoredTile {
    pub fn to_rgb(&self) -> RgbImage {
        pngio::bytes_to_rgb(&self.pixels)
    }
}

/// Training tiles grouped by magnification label.
#[derive(Clone, Debug)]
pub struct TileStore {
    scale_set: ScaleSet,
    tiles: Vec<StoredTile>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TILES_DIR: &str = "tiles";

impl TileStore {
    pub fn new(scale_set: ScaleSet, tiles: Vec<StoredTile>) -> Result<Self> {
        if let Some(t) = tiles.iter().find(|t| t.label >= scale_set.count()) {
            return Err(Error::Input(format!("tile {} has label {} outside the scale set", t.stem, t.label)));
        }
        Ok(Self { scale_set, tiles })
    }

    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn tile_path(dir: &Path, stem: &str) -> PathBuf {
        dir.join(TILES_DIR).join(format!("{stem}.png"))
    }

    /// Loads every manifest entry from `dir/tiles/`, optionally keeping only
    /// the entries accepted by `keep`.
    pub fn load(dir: impl AsRef<Path>, keep: impl Fn(usize) -> bool) -> Result<(TileManifest, Self)> {
        let dir = dir.as_ref();
        let manifest = TileManifest::read(Self::manifest_path(dir))?;
        let set = manifest.header.scale_set.clone();
        let mut tiles = Vec::new();
        for (i, e) in manifest.entries.iter().enumerate() {
            if !keep(i) {
                continue;
            }
            let stem = e.stem();
            let path = Self::tile_path(dir, &stem);
            if !path.exists() {
                return Err(Error::Input(format!("manifest tile {} is missing", path.display())));
            }
            tiles.push(StoredTile {
                pixels: pngio::read_rgb8(&path)?,
                label: set.label_of(e.level).expect("validated manifest"),
                stem,
            });
        }
        let store = Self::new(set, tiles)?;
        Ok((manifest, store))
    }

    /// Builds every level of `scale_set` from each image in `dir`, treating
    /// the images as scanned at `base_level` and box-downsampling them.
    pub fn from_patches(dir: impl AsRef<Path>, scale_set: &ScaleSet, base_level: u32) -> Result<Self> {
        let dir = dir.as_ref();
        let paths = pngio::list_images(dir)?;
        if paths.is_empty() {
            return Err(Error::Config(format!("patch directory {} holds no images", dir.display())));
        }
        let mut tiles = Vec::new();
        for path in paths {
            let id = pngio::file_stem(&path);
            let slide = MemorySlide::from_patch(id.clone(), pngio::read_rgb(&path)?, base_level, scale_set)?;
            for (label, &level) in scale_set.levels().iter().enumerate() {
                tiles.push(StoredTile {
                    pixels: pngio::rgb_to_bytes(&slide.read_level(level)?),
                    label,
                    stem: format!("{id}_{level}"),
                });
            }
        }
        Self::new(scale_set.clone(), tiles)
    }

    pub fn scale_set(&self) -> &ScaleSet {
        &self.scale_set
    }

    pub fn tiles(&self) -> &[StoredTile] {
        &self.tiles
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn get(&self, index: usize) -> &StoredTile {
        &self.tiles[index]
    }

    /// Tile indices grouped by label.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.scale_set.count()];
        for (i, t) in self.tiles.iter().enumerate() {
            groups[t.label].push(i);
        }
        groups
    }

    /// Smallest tile side in the store.
    pub fn min_side(&self) -> usize {
        self.tiles
            .iter()
            .map(|t| t.pixels.height().min(t.pixels.width()))
            .min()
            .unwrap_or(0)
    }
}

/// Square crop of side `size` at a uniformly random position.
pub fn random_crop(tile: &Grid<[u8; 3]>, size: usize, rng: &mut impl Rng) -> Result<RgbImage> {
    if size == 0 || size > tile.height() || size > tile.width() {
        return Err(Error::Config(format!(
            "crop size {size} does not fit a {}x{} tile",
            tile.height(),
            tile.width()
        )));
    }
    let top = rng.gen_range(0..=tile.height() - size);
    let left = rng.gen_range(0..=tile.width() - size);
    Ok(Grid::from_fn(size, size, |r, c| {
        tile[(top + r, left + c)].map(|v| v as f32 / 255.0)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ManifestEntry, ManifestHeader};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn crop_stays_inside_and_covers_corners() {
        let tile = Grid::from_fn(6, 6, |r, c| [r as u8, c as u8, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..400 {
            let crop = random_crop(&tile, 4, &mut rng).unwrap();
            let top = (crop[(0, 0)][0] * 255.0).round() as usize;
            let left = (crop[(0, 0)][1] * 255.0).round() as usize;
            assert!(top <= 2 && left <= 2);
            seen.insert((top, left));
        }
        assert_eq!(seen.len(), 9);
        assert!(random_crop(&tile, 7, &mut rng).is_err());
    }

    #[test]
    fn patches_become_pyramids() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a", "b"] {
            pngio::write_rgb8(dir.path().join(format!("{name}.png")), &Grid::filled(80, 80, [9, 9, 9])).unwrap();
        }
        let set = ScaleSet::new(vec![10, 20, 40]).unwrap();
        let store = TileStore::from_patches(dir.path(), &set, 40).unwrap();
        assert_eq!(store.len(), 6);
        assert_eq!(store.groups().iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 2]);
        assert_eq!(store.get(0).pixels.height(), 20);
        assert_eq!(store.get(2).pixels.height(), 80);
        assert_eq!(store.min_side(), 20);
    }

    #[test]
    fn load_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join(TILES_DIR)).unwrap();
        let header = ManifestHeader {
            scale_set: ScaleSet::new(vec![10, 20]).unwrap(),
            tile_size: 8,
            tissue_threshold: 0.5,
            normalization_target: None,
        };
        let entries: Vec<_> = [10, 20, 20]
            .iter()
            .enumerate()
            .map(|(i, &level)| ManifestEntry {
                source_id: "s".into(),
                level,
                x: i * 8,
                y: 0,
                tissue_fraction: 1.0,
            })
            .collect();
        for e in &entries {
            pngio::write_rgb8(TileStore::tile_path(dir.path(), &e.stem()), &Grid::filled(8, 8, [200, 10, 90]))
                .unwrap();
        }
        TileManifest::new(header, entries).unwrap().write(TileStore::manifest_path(dir.path())).unwrap();
        let (_, store) = TileStore::load(dir.path(), |_| true).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(store.groups(), vec![vec![0], vec![1, 2]]);
        assert_eq!(store.get(0).pixels[(3, 3)], [200, 10, 90]);
        let (_, part) = TileStore::load(dir.path(), |i| i != 1).unwrap();
        assert_eq!(part.len(), 2);
    }
}
