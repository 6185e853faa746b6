//! Aggregated Jaccard index, Hausdorff distance between foreground
//! boundaries, and pixelwise Dice.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid};
use crate::pngio;
use crate::postprocess::distance_to_set;

pub type LabelMap = Grid<u32>;

/// Integer numerator and denominator of the aggregated Jaccard index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AjiParts {
    pub numerator: u64,
    pub denominator: u64,
}

impl AjiParts {
    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

fn check_shapes(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::Input(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

fn areas(labels: &LabelMap) -> BTreeMap<u32, u64> {
    let mut out = BTreeMap::new();
    for &l in labels.data() {
        if l > 0 {
            *out.entry(l).or_insert(0) += 1;
        }
    }
    out
}

/// Each ground-truth instance is matched to the prediction of highest
/// Jaccard overlap (smallest id on ties; a prediction may be matched more
/// than once). Ground-truth instances without any overlap contribute their
/// area to the denominator, as do predictions never matched.
pub fn aji_parts(pred: &LabelMap, gt: &LabelMap) -> Result<AjiParts> {
    check_shapes(pred, gt)?;
    let gt_area = areas(gt);
    if gt_area.is_empty() {
        return Err(Error::Input("ground truth holds no instance; AJI is undefined".into()));
    }
    let pred_area = areas(pred);
    let mut inter: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for (&g, &p) in gt.data().iter().zip(pred.data()) {
        if g > 0 && p > 0 {
            *inter.entry((g, p)).or_insert(0) += 1;
        }
    }
    let mut numerator = 0u64;
    let mut denominator = 0u64;
    let mut picked = BTreeSet::new();
    for (&g, &ga) in &gt_area {
        // (intersection, union, pred id) of the best match so far
        let mut best: Option<(u64, u64, u32)> = None;
        for (&(_, p), &i) in inter.range((g, 0)..=(g, u32::MAX)) {
            let u = ga + pred_area[&p] - i;
            let better = match best {
                None => true,
                Some((bi, bu, _)) => i as u128 * bu as u128 > bi as u128 * u as u128,
            };
            if better {
                best = Some((i, u, p));
            }
        }
        match best {
            Some((i, u, p)) => {
                numerator += i;
                denominator += u;
                picked.insert(p);
            }
            None => denominator += ga,
        }
    }
    denominator += pred_area
        .iter()
        .filter(|(p, _)| !picked.contains(*p))
        .map(|(_, &a)| a)
        .sum::<u64>();
    Ok(AjiParts {
        numerator,
        denominator,
    })
}

pub fn aji(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    Ok(aji_parts(pred, gt)?.value())
}

fn foreground(labels: &LabelMap) -> BinaryMask {
    labels.map(|&l| l > 0)
}

/// Foreground pixels with at least one 4-neighbour in the background or
/// outside the image.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    Grid::from_fn(h, w, |r, c| {
        mask[(r, c)]
            && (r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask[(r - 1, c)]
                || !mask[(r + 1, c)]
                || !mask[(r, c - 1)]
                || !mask[(r, c + 1)])
    })
}

/// Symmetric Hausdorff distance between the foreground boundaries; `None`
/// when either foreground is empty.
pub fn hausdorff(pred: &LabelMap, gt: &LabelMap) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let bp = boundary(&foreground(pred));
    let bg = boundary(&foreground(gt));
    let (Some(to_p), Some(to_g)) = (distance_to_set(&bp), distance_to_set(&bg)) else {
        return Ok(None);
    };
    let directed = |from: &BinaryMask, to: &Grid<f32>| {
        from.data()
            .iter()
            .zip(to.data())
            .filter(|(&b, _)| b)
            .map(|(_, &d)| d as f64)
            .fold(0.0, f64::max)
    };
    Ok(Some(directed(&bp, &to_g).max(directed(&bg, &to_p))))
}

/// Mean of per-image Hausdorff distances over images where it is defined.
pub fn average_hausdorff(pairs: &[(&LabelMap, &LabelMap)]) -> Result<Option<f64>> {
    let mut values = Vec::new();
    for (p, g) in pairs {
        if let Some(d) = hausdorff(p, g)? {
            values.push(d);
        }
    }
    Ok((!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64))
}

pub fn mask_dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::Input("masks differ in size".into()));
    }
    let (mut both, mut total) = (0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        both += (p && g) as u64;
        total += p as u64 + g as u64;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * both as f64 / total as f64 })
}

pub fn dice(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    check_shapes(pred, gt)?;
    mask_dice(&foreground(pred), &foreground(gt))
}

pub fn average_dice(pairs: &[(&LabelMap, &LabelMap)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("no image pairs to evaluate".into()));
    }
    let mut sum = 0.0;
    for (p, g) in pairs {
        sum += dice(p, g)?;
    }
    Ok(sum / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub stem: String,
    pub aji_num: Option<u64>,
    pub aji_den: Option<u64>,
    pub ahd: Option<f64>,
    pub dice: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub aji: Option<f64>,
    pub ahd: Option<f64>,
    pub adc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aggregate: Aggregate,
    pub per_image: Vec<ImageMetrics>,
    /// Stems present in only one of the two directories.
    #[serde(default)]
    pub unmatched: Vec<String>,
}

pub fn evaluate_image(stem: &str, pred: &LabelMap, gt: &LabelMap) -> Result<ImageMetrics> {
    let mut notes = Vec::new();
    let (aji_num, aji_den) = match aji_parts(pred, gt) {
        Ok(p) => (Some(p.numerator), Some(p.denominator)),
        Err(Error::Input(msg)) => {
            notes.push(msg);
            (None, None)
        }
        Err(e) => return Err(e),
    };
    let ahd = hausdorff(pred, gt)?;
    if ahd.is_none() {
        notes.push("empty foreground; excluded from AHD".into());
    }
    Ok(ImageMetrics {
        stem: stem.to_string(),
        aji_num,
        aji_den,
        ahd,
        dice: dice(pred, gt)?,
        notes,
    })
}

/// Pools AJI numerators and denominators, averages AHD and Dice per image.
pub fn aggregate(per_image: &[ImageMetrics]) -> Aggregate {
    let (num, den) = per_image
        .iter()
        .filter_map(|m| Some((m.aji_num?, m.aji_den?)))
        .fold((0u64, 0u64), |(a, b), (n, d)| (a + n, b + d));
    let ahds: Vec<f64> = per_image.iter().filter_map(|m| m.ahd).collect();
    Aggregate {
        aji: (den > 0).then(|| num as f64 / den as f64),
        ahd: (!ahds.is_empty()).then(|| ahds.iter().sum::<f64>() / ahds.len() as f64),
        adc: if per_image.is_empty() {
            0.0
        } else {
            per_image.iter().map(|m| m.dice).sum::<f64>() / per_image.len() as f64
        },
    }
}

fn stems(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    Ok(pngio::list_images(dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .map(|p| (pngio::file_stem(&p), p))
        .collect())
}

/// Evaluates every 16-bit label PNG of `pred_dir` against the file with
/// the same stem in `gt_dir`. Stems found on one side only are listed in
/// `unmatched` and skipped.
pub fn evaluate_dataset(pred_dir: impl AsRef<Path>, gt_dir: impl AsRef<Path>) -> Result<MetricsReport> {
    let preds = stems(pred_dir.as_ref())?;
    let gts = stems(gt_dir.as_ref())?;
    let mut per_image = Vec::new();
    let mut unmatched = Vec::new();
    for (stem, gt_path) in &gts {
        match preds.get(stem) {
            Some(p) => per_image.push(evaluate_image(stem, &pngio::read_labels(p)?, &pngio::read_labels(gt_path)?)?),
            None => unmatched.push(stem.clone()),
        }
    }
    unmatched.extend(preds.keys().filter(|s| !gts.contains_key(*s)).cloned());
    unmatched.sort();
    if per_image.is_empty() {
        return Err(Error::Input(format!(
            "no matching stems between {} and {}",
            pred_dir.as_ref().display(),
            gt_dir.as_ref().display()
        )));
    }
    Ok(MetricsReport {
        aggregate: aggregate(&per_image),
        per_image,
        unmatched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, top: usize, left: usize, side: usize, label: u32) -> LabelMap {
        Grid::from_fn(h, w, |r, c| {
            if (top..top + side).contains(&r) && (left..left + side).contains(&c) {
                label
            } else {
                0
            }
        })
    }

    #[test]
    fn aji_identity_and_empty() {
        let g = square(10, 10, 2, 2, 4, 1);
        assert_eq!(aji(&g, &g).unwrap(), 1.0);
        assert_eq!(aji(&Grid::filled(10, 10, 0), &g).unwrap(), 0.0);
        assert!(aji(&g, &Grid::filled(10, 10, 0)).is_err());
    }

    #[test]
    fn aji_shifted_square() {
        let g = square(10, 10, 2, 2, 4, 1);
        let p = square(10, 10, 2, 4, 4, 1);
        let parts = aji_parts(&p, &g).unwrap();
        assert_eq!((parts.numerator, parts.denominator), (8, 24));
        assert!((parts.value() - 8.0 / 24.0).abs() < 1e-12);
    }

    #[test]
    fn hausdorff_cases() {
        let g = square(12, 12, 3, 3, 5, 1);
        assert_eq!(hausdorff(&g, &g).unwrap(), Some(0.0));
        let mut a = Grid::filled(10, 10, 0u32);
        let mut b = Grid::filled(10, 10, 0u32);
        a[(1, 1)] = 1;
        b[(1, 6)] = 1;
        assert_eq!(hausdorff(&a, &b).unwrap(), Some(5.0));
        assert_eq!(hausdorff(&a, &Grid::filled(10, 10, 0)).unwrap(), None);
        let big = square(12, 12, 2, 2, 7, 1);
        let d = hausdorff(&g, &big).unwrap().unwrap();
        assert!((1.0..=2f64.sqrt()).contains(&d), "{d}");
    }

    #[test]
    fn dice_cases() {
        let g = square(10, 10, 0, 0, 4, 1);
        assert_eq!(dice(&g, &g).unwrap(), 1.0);
        assert_eq!(dice(&square(10, 10, 5, 5, 4, 1), &g).unwrap(), 0.0);
        let half = Grid::from_fn(10, 10, |r, c| (r < 2 && c < 4) as u32);
        assert!((dice(&half, &g).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let empty = Grid::filled(3, 3, 0u32);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn pooled_aji() {
        let a = ImageMetrics { stem: "a".into(), aji_num: Some(8), aji_den: Some(24), ahd: Some(1.0), dice: 1.0, notes: vec![] };
        let b = ImageMetrics { stem: "b".into(), aji_num: Some(0), aji_den: Some(16), ahd: None, dice: 0.0, notes: vec![] };
        let agg = aggregate(&[a, b]);
        assert!((agg.aji.unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(agg.adc, 0.5);
        assert_eq!(agg.ahd, Some(1.0));
    }
}
