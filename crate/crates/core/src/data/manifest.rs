use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::reinhard::LabStats;
use crate::error::{Error, Result};

/// Ordered magnification factors; a tile's label is its index here.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct ScaleSet {
    levels: Vec<u32>,
}

impl ScaleSet {
    pub fn new(levels: Vec<u32>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("scale set must not be empty".into()));
        }
        if levels.contains(&0) {
            return Err(Error::Config("magnification factors must be positive".into()));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "scale set must be strictly increasing, got {levels:?}"
            )));
        }
        Ok(Self { levels })
    }

    /// Parses `"10,20,40"` (an optional trailing `x` per entry is accepted).
    pub fn parse(text: &str) -> Result<Self> {
        let levels = text
            .split(',')
            .map(|s| {
                let s = s.trim().trim_end_matches(['x', 'X']);
                s.parse::<u32>()
                    .map_err(|_| Error::Config(format!("bad magnification '{s}' in '{text}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn count(&self) -> usize {
        self.levels.len()
    }

    pub fn label_of(&self, level: u32) -> Option<usize> {
        self.levels.iter().position(|&l| l == level)
    }
}

impl Default for ScaleSet {
    fn default() -> Self {
        Self {
            levels: vec![10, 20, 40],
        }
    }
}

impl TryFrom<Vec<u32>> for ScaleSet {
    type Error = Error;
    fn try_from(levels: Vec<u32>) -> Result<Self> {
        Self::new(levels)
    }
}

impl From<ScaleSet> for Vec<u32> {
    fn from(set: ScaleSet) -> Self {
        set.levels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub scale_set: ScaleSet,
    pub tile_size: usize,
    pub tissue_threshold: f64,
    pub normalization_target: Option<LabStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source_id: String,
    /// Magnification factor, not the label index.
    pub level: u32,
    pub x: usize,
    pub y: usize,
    pub tissue_fraction: f64,
}

impl ManifestEntry {
    pub fn stem(&self) -> String {
        format!("{}_{}_{}_{}", self.source_id, self.level, self.x, self.y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileManifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

impl TileManifest {
    pub fn new(header: ManifestHeader, entries: Vec<ManifestEntry>) -> Result<Self> {
        let manifest = Self { header, entries };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.tile_size == 0 {
            return Err(Error::Config("manifest tile size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&h.tissue_threshold) {
            return Err(Error::Config(format!(
                "manifest tissue threshold {} outside [0, 1]",
                h.tissue_threshold
            )));
        }
        if let Some(target) = &h.normalization_target {
            target.validate()?;
        }
        for e in &self.entries {
            if h.scale_set.label_of(e.level).is_none() {
                return Err(Error::Input(format!(
                    "manifest entry {} has level {} outside the scale set",
                    e.stem(),
                    e.level
                )));
            }
            if !(e.tissue_fraction >= h.tissue_threshold && e.tissue_fraction <= 1.0) {
                return Err(Error::Input(format!(
                    "manifest entry {} has tissue fraction {} below threshold {}",
                    e.stem(),
                    e.tissue_fraction,
                    h.tissue_threshold
                )));
            }
        }
        Ok(())
    }

    /// Number of entries per magnification factor, including empty levels.
    pub fn per_level_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts: BTreeMap<u32, usize> =
            self.header.scale_set.levels().iter().map(|&l| (l, 0)).collect();
        for e in &self.entries {
            *counts.entry(e.level).or_default() += 1;
        }
        counts
    }

    /// Entry indices grouped by label index.
    pub fn indices_by_label(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.header.scale_set.count()];
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(label) = self.header.scale_set.label_of(e.level) {
                groups[label].push(i);
            }
        }
        groups
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::from_lines(text.lines().map(|l| Ok(l.to_string())))
    }

    fn from_lines(lines: impl Iterator<Item = Result<String>>) -> Result<Self> {
        let mut header = None;
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |e: serde_json::Error| Error::Input(format!("manifest line {}: {e}", n + 1));
            if header.is_none() {
                header = Some(serde_json::from_str::<ManifestHeader>(&line).map_err(bad)?);
            } else {
                entries.push(serde_json::from_str::<ManifestEntry>(&line).map_err(bad)?);
            }
        }
        let header = header.ok_or_else(|| Error::Input("manifest has no header record".into()))?;
        Self::new(header, entries)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(Error::io(path))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl()?.as_bytes()).map_err(Error::io(path))?;
        w.flush().map_err(Error::io(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(Error::io(path))?;
        Self::from_lines(
            BufReader::new(file)
                .lines()
                .map(|l| l.map_err(Error::io(path))),
        )
    }
}
