use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::RgbImage;

/// HSV rule: a pixel is tissue when it is saturated enough to not be glass
/// and dark enough to not be blank background.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueRule {
    pub min_saturation: f32,
    pub max_value: f32,
}

impl Default for TissueRule {
    fn default() -> Self {
        Self {
            min_saturation: 0.07,
            max_value: 0.95,
        }
    }
}

impl TissueRule {
    pub fn is_tissue(&self, [r, g, b]: [f32; 3]) -> bool {
        let value = r.max(g).max(b);
        let min = r.min(g).min(b);
        let saturation = if value > 0.0 { (value - min) / value } else { 0.0 };
        saturation > self.min_saturation && value < self.max_value
    }
}

pub fn detect_tissue_fraction(pixels: &RgbImage, rule: &TissueRule) -> Result<f64> {
    if pixels.is_empty() {
        return Err(Error::Input("cannot measure tissue on an empty image".into()));
    }
    let tissue = pixels.data().iter().filter(|&&p| rule.is_tissue(p)).count();
    Ok(tissue as f64 / pixels.len() as f64)
}

/// Keeps tiles whose tissue fraction reaches `threshold` (inclusive).
pub fn filter_tile(pixels: &RgbImage, threshold: f64, rule: &TissueRule) -> Result<bool> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "tissue threshold must lie in [0, 1], got {threshold}"
        )));
    }
    Ok(detect_tissue_fraction(pixels, rule)? >= threshold)
}
