//! Synthetic multi-magnification tiles: dark-purple elliptical blobs on a
//! pink fractal-noise background, where blob size is the only scale cue.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    detect_tissue_fraction, ManifestEntry, ManifestHeader, ScaleSet, TileManifest, TileStore,
    TissueRule, MANIFEST_FILE, TILES_DIR,
};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid, RgbImage};
use crate::pngio;

pub const MASKS_DIR: &str = "masks";
pub const LABELS_DIR: &str = "labels";

const BACKGROUND: [f32; 3] = [0.90, 0.62, 0.76];
const BACKGROUND_TEXTURE: [f32; 3] = [0.05, 0.09, 0.06];
const NUCLEUS: [f32; 3] = [0.36, 0.22, 0.52];
const NUCLEUS_JITTER: f32 = 0.04;
const NOISE_OCTAVES: u32 = 6;
const PLACEMENT_ATTEMPTS: usize = 400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub scale_set: ScaleSet,
    pub tile_size: usize,
    /// Mean blob radius per unit of magnification, for a 160 px tile.
    pub radius_per_magnification: f64,
    pub foreground_fraction: f64,
    /// Largest ratio between the two ellipse semi-axes.
    pub max_aspect: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scale_set: ScaleSet::default(),
            tile_size: 160,
            radius_per_magnification: 0.4,
            foreground_fraction: 0.07,
            max_aspect: 2.0,
        }
    }
}

impl SynthConfig {
    /// Mean blob radius in pixels at label index `level`.
    pub fn radius(&self, level: usize) -> Result<f64> {
        let mag = *self.scale_set.levels().get(level).ok_or_else(|| {
            Error::Config(format!(
                "level index {level} outside a scale set of {} levels",
                self.scale_set.count()
            ))
        })?;
        let r = self.radius_per_magnification * mag as f64 * self.tile_size as f64 / 160.0;
        if r >= self.tile_size as f64 / 2.0 {
            return Err(Error::Config(format!(
                "blob radius {r:.1} px at {mag}x does not fit a {} px tile",
                self.tile_size
            )));
        }
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        if self.tile_size < 8 {
            return Err(Error::Config("synthetic tile size must be at least 8".into()));
        }
        if !(self.foreground_fraction > 0.0 && self.foreground_fraction < 0.5) {
            return Err(Error::Config("foreground fraction must lie in (0, 0.5)".into()));
        }
        // written so that NaN fails both checks
        let aspect_ok = self.max_aspect >= 1.0;
        let radius_ok = self.radius_per_magnification > 0.0;
        if !aspect_ok || !radius_ok {
            return Err(Error::Config("blob aspect must be >= 1 and radius positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTile {
    pub pixels: RgbImage,
    pub magnification_label: usize,
    pub gt_mask: BinaryMask,
    pub gt_instances: Grid<u32>,
}

impl SynthTile {
    pub fn instance_count(&self) -> usize {
        self.gt_instances.data().iter().copied().max().unwrap_or(0) as usize
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Multi-octave value noise with amplitude proportional to wavelength,
/// roughly in `[-1, 1]`.
fn fractal_noise(size: usize, rng: &mut impl Rng) -> Vec<f32> {
    let mut out = vec![0.0f32; size * size];
    let mut total = 0.0f32;
    for octave in 0..NOISE_OCTAVES {
        let cells = 2usize << octave;
        let amplitude = 1.0 / cells as f32;
        total += amplitude;
        let lattice: Vec<f32> = (0..(cells + 1) * (cells + 1))
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let step = cells as f32 / size as f32;
        for r in 0..size {
            let fy = (r as f32 + 0.5) * step;
            let (iy, ty) = (fy as usize, smooth(fy.fract()));
            for c in 0..size {
                let fx = (c as f32 + 0.5) * step;
                let (ix, tx) = (fx as usize, smooth(fx.fract()));
                let at = |y: usize, x: usize| lattice[y * (cells + 1) + x];
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                out[r * size + c] += amplitude * (top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Generates one tile at label index `level`.
pub fn generate_blob_tile(level: usize, config: &SynthConfig, rng: &mut impl Rng) -> Result<SynthTile> {
    config.validate()?;
    let radius = config.radius(level)?;
    let size = config.tile_size;
    let noise = fractal_noise(size, rng);

    let expected = config.foreground_fraction * (size * size) as f64
        / (std::f64::consts::PI * radius * radius);
    let mut count = expected.floor() as usize;
    if rng.gen::<f64>() < expected.fract() {
        count += 1;
    }

    // semi-axes r*sqrt(rho) and r/sqrt(rho) keep the area at pi*r^2
    let max_major = size as f64 / 2.0 - 1.0;
    let mut blobs: Vec<Ellipse> = Vec::with_capacity(count);
    for _ in 0..count {
        let rho_cap = config.max_aspect.min((max_major / radius).powi(2)).max(1.0);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let rho = rng.gen_range(1.0..=rho_cap);
            let a = radius * rho.sqrt();
            let b = radius / rho.sqrt();
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let lo = a + 0.5;
            let hi = size as f64 - a - 0.5;
            if lo >= hi {
                break;
            }
            let cx = rng.gen_range(lo..hi);
            let cy = rng.gen_range(lo..hi);
            let clear = blobs.iter().all(|o| {
                let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
                d > o.a + a + 1.5
            });
            if clear {
                blobs.push(Ellipse { cx, cy, a, b, cos: theta.cos(), sin: theta.sin() });
                break;
            }
        }
    }

    let mut pixels = Grid::from_fn(size, size, |r, c| {
        let n = noise[r * size + c];
        [0, 1, 2].map(|k| (BACKGROUND[k] + BACKGROUND_TEXTURE[k] * n).clamp(0.0, 1.0))
    });
    let mut instances = Grid::filled(size, size, 0u32);
    for (i, e) in blobs.iter().enumerate() {
        let color = NUCLEUS.map(|v| v + rng.gen_range(-NUCLEUS_JITTER..NUCLEUS_JITTER));
        let r0 = (e.cy - e.a).floor().max(0.0) as usize;
        let r1 = ((e.cy + e.a).ceil() as usize).min(size);
        let c0 = (e.cx - e.a).floor().max(0.0) as usize;
        let c1 = ((e.cx + e.a).ceil() as usize).min(size);
        for r in r0..r1 {
            for c in c0..c1 {
                if e.contains(c as f64 + 0.5, r as f64 + 0.5) {
                    let n = noise[r * size + c];
                    pixels[(r, c)] = color.map(|v| (v + 0.03 * n).clamp(0.0, 1.0));
                    instances[(r, c)] = i as u32 + 1;
                }
            }
        }
    }
    // an instance id can vanish if its ellipse covers no pixel centre
    let instances = relabel_consecutive(&instances);
    Ok(SynthTile {
        pixels,
        magnification_label: level,
        gt_mask: instances.map(|&l| l > 0),
        gt_instances: instances,
    })
}

/// Renumbers nonzero labels to `1..=K` in order of first appearance.
pub fn relabel_consecutive(labels: &Grid<u32>) -> Grid<u32> {
    let mut map = std::collections::HashMap::new();
    labels.map(|&l| {
        if l == 0 {
            0
        } else {
            let next = map.len() as u32 + 1;
            *map.entry(l).or_insert(next)
        }
    })
}

/// Deterministic generator for tile `index` at label `level`.
pub fn tile_rng(seed: u64, level: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((level as u64) << 32) | index as u64);
    rng
}

pub fn synth_stem(level_factor: u32, index: usize) -> String {
    format!("synth{index:05}_{level_factor}_0_0")
}

/// Writes `n_per_level` tiles per level under `out` (`tiles/`, `masks/`,
/// `labels/`, `manifest.jsonl`) and returns the manifest.
pub fn generate_dataset(
    config: &SynthConfig,
    n_per_level: usize,
    out: impl AsRef<Path>,
    seed: u64,
) -> Result<TileManifest> {
    config.validate()?;
    if n_per_level == 0 {
        return Err(Error::Config("tiles per level must be at least 1".into()));
    }
    let out = out.as_ref();
    for sub in [TILES_DIR, MASKS_DIR, LABELS_DIR] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    }
    let rule = TissueRule::default();
    let mut entries = Vec::with_capacity(n_per_level * config.scale_set.count());
    for (level, &factor) in config.scale_set.levels().iter().enumerate() {
        for index in 0..n_per_level {
            let tile = generate_blob_tile(level, config, &mut tile_rng(seed, level, index))?;
            let stem = synth_stem(factor, index);
            pngio::write_rgb(TileStore::tile_path(out, &stem), &tile.pixels)?;
            pngio::write_mask(out.join(MASKS_DIR).join(format!("{stem}.png")), &tile.gt_mask)?;
            pngio::write_labels(out.join(LABELS_DIR).join(format!("{stem}.png")), &tile.gt_instances)?;
            entries.push(ManifestEntry {
                source_id: format!("synth{index:05}"),
                level: factor,
                x: 0,
                y: 0,
                tissue_fraction: detect_tissue_fraction(&tile.pixels, &rule)?,
            });
        }
    }
    let header = ManifestHeader {
        scale_set: config.scale_set.clone(),
        tile_size: config.tile_size,
        tissue_threshold: 0.0,
        normalization_target: None,
    };
    let manifest = TileManifest::new(header, entries)?;
    manifest.write(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
