//! Attention map to nucleus instances: binarization, morphological cleanup,
//! distance-transform markers and marker-driven watershed.

mod distance;
mod morphology;
mod watershed;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use distance::{distance_to_set, distance_transform, gaussian_blur};
pub use morphology::{binarize, binarize_attention, close, dilate, disk, erode, morphological_cleanup, open};
pub use watershed::{compute_markers, watershed_instances, Markers};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, FloatMap, Grid};
use crate::pngio;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub threshold: f32,
    pub coarse_radius: usize,
    pub fine_radius: usize,
    pub blur_sigma: f64,
    pub maxima_radius: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            coarse_radius: 2,
            fine_radius: 1,
            blur_sigma: 1.0,
            maxima_radius: 7,
        }
    }
}

/// Every intermediate of one post-processing run.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub mask: BinaryMask,
    pub markers: Markers,
    pub instances: Grid<u32>,
}

impl Segmentation {
    pub fn instance_count(&self) -> usize {
        self.instances.data().iter().copied().max().unwrap_or(0) as usize
    }
}

pub fn segment(attention: &FloatMap, config: &PostprocessConfig) -> Result<Segmentation> {
    if attention.is_empty() {
        return Err(Error::Input("attention map is empty".into()));
    }
    let raw = binarize(attention, config.threshold)?;
    let mask = morphological_cleanup(&raw, config.coarse_radius, config.fine_radius);
    let markers = compute_markers(&mask, config.blur_sigma, config.maxima_radius);
    let instances = watershed_instances(&markers.distance, &markers.labels, &mask)?;
    Ok(Segmentation {
        mask,
        markers,
        instances,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub label: u32,
    pub area: usize,
    /// `[row, col]` mean pixel position.
    pub centroid: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSidecar {
    pub instance_count: usize,
    pub instances: Vec<InstanceSummary>,
}

pub fn summarize(labels: &Grid<u32>) -> InstanceSidecar {
    let k = labels.data().iter().copied().max().unwrap_or(0) as usize;
    let mut acc = vec![(0usize, 0.0f64, 0.0f64); k + 1];
    for (r, c, &l) in labels.indexed() {
        let a = &mut acc[l as usize];
        a.0 += 1;
        a.1 += r as f64;
        a.2 += c as f64;
    }
    let instances = acc
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, a)| a.0 > 0)
        .map(|(l, &(n, sr, sc))| InstanceSummary {
            label: l as u32,
            area: n,
            centroid: [sr / n as f64, sc / n as f64],
        })
        .collect::<Vec<_>>();
    InstanceSidecar {
        instance_count: instances.len(),
        instances,
    }
}

/// Writes `{stem}.png` (16-bit labels) and `{stem}.json` into `dir`.
pub fn write_instances(dir: &Path, stem: &str, labels: &Grid<u32>) -> Result<()> {
    pngio::write_labels(dir.join(format!("{stem}.png")), labels)?;
    let path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&summarize(labels))?;
    std::fs::write(&path, json).map_err(Error::io(&path))
}

/// Segments every attention PNG in `attention_dir` into `out`; returns the
/// processed stems. Non-PNG files and sidecars are ignored.
pub fn postprocess_dir(attention_dir: &Path, out: &Path, config: &PostprocessConfig) -> Result<Vec<String>> {
    let inputs: Vec<_> = pngio::list_images(attention_dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    if inputs.is_empty() {
        return Err(Error::Input(format!(
            "no attention maps in {}",
            attention_dir.display()
        )));
    }
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut stems = Vec::with_capacity(inputs.len());
    for path in inputs {
        let stem = pngio::file_stem(&path);
        let attention = pngio::read_unit_map(&path)?;
        let seg = segment(&attention, config)?;
        write_instances(out, &stem, &seg.instances)?;
        stems.push(stem);
    }
    Ok(stems)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_counts_and_centroids() {
        let mut labels = Grid::filled(4, 4, 0u32);
        labels[(0, 0)] = 1;
        labels[(0, 1)] = 1;
        labels[(3, 3)] = 2;
        let s = summarize(&labels);
        assert_eq!(s.instance_count, 2);
        assert_eq!(s.instances[0].area, 2);
        assert_eq!(s.instances[0].centroid, [0.0, 0.5]);
        assert_eq!(s.instances[1].centroid, [3.0, 3.0]);
    }

    #[test]
    fn segment_two_blobs() {
        let att = Grid::from_fn(40, 80, |r, c| {
            let d1 = (r as f32 - 20.0).powi(2) + (c as f32 - 20.0).powi(2);
            let d2 = (r as f32 - 20.0).powi(2) + (c as f32 - 60.0).powi(2);
            if d1 <= 81.0 || d2 <= 81.0 { 0.9 } else { 0.1 }
        });
        let seg = segment(&att, &PostprocessConfig::default()).unwrap();
        assert_eq!(seg.instance_count(), 2);
        assert_ne!(seg.instances[(20, 20)], seg.instances[(20, 60)]);
    }
}
