use rand::seq::index;
use rand::Rng;

use super::manifest::TileManifest;
use crate::error::{Error, Result};

/// Draws batches with per-level counts that differ by at most one.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    groups: Vec<Vec<usize>>,
}

impl BalancedSampler {
    /// `groups[l]` lists the item indices carrying label `l`.
    pub fn new(groups: Vec<Vec<usize>>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Config("sampler needs at least one level".into()));
        }
        if let Some(l) = groups.iter().position(|g| g.is_empty()) {
            return Err(Error::Config(format!("level index {l} has no tiles")));
        }
        Ok(Self { groups })
    }

    pub fn from_manifest(manifest: &TileManifest) -> Result<Self> {
        let groups = manifest.indices_by_label();
        if let Some(l) = groups.iter().position(|g| g.is_empty()) {
            return Err(Error::Config(format!(
                "manifest has no tiles at {}x",
                manifest.header.scale_set.levels()[l]
            )));
        }
        Self::new(groups)
    }

    pub fn num_levels(&self) -> usize {
        self.groups.len()
    }

    /// Returns `(label, item index)` pairs, grouped by label.
    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
        let n = self.groups.len();
        if batch_size < n {
            return Err(Error::Config(format!(
                "batch size {batch_size} is smaller than the number of levels {n}"
            )));
        }
        let mut counts = vec![batch_size / n; n];
        for l in index::sample(rng, n, batch_size % n) {
            counts[l] += 1;
        }
        let mut batch = Vec::with_capacity(batch_size);
        for (label, (&count, group)) in counts.iter().zip(&self.groups).enumerate() {
            for _ in 0..count {
                batch.push((label, group[rng.gen_range(0..group.len())]));
            }
        }
        Ok(batch)
    }
}

/// Samples `batch_size` manifest entry indices balanced over magnification levels.
pub fn sample_balanced_batch(
    manifest: &TileManifest,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let sampler = BalancedSampler::from_manifest(manifest)?;
    Ok(sampler
        .sample(batch_size, rng)?
        .into_iter()
        .map(|(_, i)| i)
        .collect())
}
