//! Color transfer in the decorrelated l-alpha-beta space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, RgbImage};

/// Floor applied to a channel standard deviation before dividing by it.
pub const STD_FLOOR: f64 = 1e-6;
/// Lower bound on LMS responses before taking logarithms.
const LMS_FLOOR: f64 = 1e-6;

const RGB_TO_LMS: [[f64; 3]; 3] = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl LabStats {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mean.iter().all(|v| v.is_finite())
            && self.std.iter().all(|&s| s.is_finite() && s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "normalization target needs finite means and positive deviations: {self:?}"
            )))
        }
    }
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    inv
}

fn log_lms_to_lab([l, m, s]: [f64; 3]) -> [f64; 3] {
    [
        (l + m + s) / 3f64.sqrt(),
        (l + m - 2.0 * s) / 6f64.sqrt(),
        (l - m) / 2f64.sqrt(),
    ]
}

fn lab_to_log_lms([a, b, c]: [f64; 3]) -> [f64; 3] {
    let (a, b, c) = (a / 3f64.sqrt(), b / 6f64.sqrt(), c / 2f64.sqrt());
    [a + b + c, a + b - c, a - 2.0 * b]
}

pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lms = mat_vec(&RGB_TO_LMS, rgb).map(|v| v.max(LMS_FLOOR).log10());
    log_lms_to_lab(lms)
}

pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let lms = lab_to_log_lms(lab).map(|v| 10f64.powf(v));
    mat_vec(&invert3(&RGB_TO_LMS), lms)
}

fn to_lab_pixels(image: &RgbImage) -> Vec<[f64; 3]> {
    image
        .data()
        .iter()
        .map(|p| rgb_to_lab(p.map(f64::from)))
        .collect()
}

fn stats_of(lab: &[[f64; 3]]) -> LabStats {
    let n = lab.len().max(1) as f64;
    let mut mean = [0.0; 3];
    for p in lab {
        for c in 0..3 {
            mean[c] += p[c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 3];
    for p in lab {
        for c in 0..3 {
            var[c] += (p[c] - mean[c]).powi(2);
        }
    }
    LabStats {
        mean,
        std: var.map(|v| (v / n).sqrt()),
    }
}

/// Per-channel mean and standard deviation in l-alpha-beta space.
pub fn lab_stats(image: &RgbImage) -> Result<LabStats> {
    if image.is_empty() {
        return Err(Error::Input("cannot compute color statistics of an empty image".into()));
    }
    Ok(stats_of(&to_lab_pixels(image)))
}

/// Matches the image's l-alpha-beta channel statistics to `target`, then
/// clips back to valid RGB.
pub fn reinhard_normalize(image: &RgbImage, target: &LabStats) -> Result<RgbImage> {
    target.validate()?;
    if image.is_empty() {
        return Err(Error::Input("cannot normalize an empty image".into()));
    }
    let lab = to_lab_pixels(image);
    let source = stats_of(&lab);
    let mut src_std = source.std;
    for (c, s) in src_std.iter_mut().enumerate() {
        if *s < STD_FLOOR {
            log::warn!("color channel {c} has zero spread; using std floor {STD_FLOOR}");
            *s = STD_FLOOR;
        }
    }
    let data = lab
        .iter()
        .map(|p| {
            let mapped =
                [0, 1, 2].map(|c| (p[c] - source.mean[c]) / src_std[c] * target.std[c] + target.mean[c]);
            lab_to_rgb(mapped).map(|v| v.clamp(0.0, 1.0) as f32)
        })
        .collect();
    Grid::from_vec(image.height(), image.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, lo: f32, hi: f32) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(24, 20, |_, _| [0, 1, 2].map(|_| rng.gen_range(lo..hi)))
    }

    #[test]
    fn own_statistics_are_identity() {
        let img = random_image(1, 0.05, 0.95);
        let stats = lab_stats(&img).unwrap();
        let out = reinhard_normalize(&img, &stats).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn constant_image_maps_to_target_mean() {
        let img: RgbImage = Grid::filled(6, 6, [0.6, 0.3, 0.5]);
        let target = lab_stats(&random_image(2, 0.2, 0.8)).unwrap();
        let out = reinhard_normalize(&img, &target).unwrap();
        let first = out.data()[0];
        assert!(out.data().iter().all(|p| *p == first));
        let expect = lab_to_rgb(target.mean).map(|v| v.clamp(0.0, 1.0) as f32);
        for c in 0..3 {
            assert!((first[c] - expect[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn shifted_target_mean_is_reached() {
        let img = random_image(3, 0.2, 0.6);
        let mut target = lab_stats(&img).unwrap();
        target.mean[0] += 0.1;
        let out = reinhard_normalize(&img, &target).unwrap();
        assert!(out.data().iter().flatten().all(|&v| v < 1.0), "no clipping expected");
        let got = lab_stats(&out).unwrap();
        for c in 0..3 {
            // f32 output storage limits agreement to ~1e-6 relative
            assert!((got.mean[c] - target.mean[c]).abs() < 1e-4, "channel {c}");
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let img = random_image(4, 0.1, 0.7);
        let target = lab_stats(&random_image(5, 0.3, 0.6)).unwrap();
        let once = reinhard_normalize(&img, &target).unwrap();
        let twice = reinhard_normalize(&once, &target).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn invalid_target_rejected() {
        let img = random_image(6, 0.1, 0.9);
        let bad = LabStats {
            mean: [0.0; 3],
            std: [1.0, 0.0, 1.0],
        };
        assert!(matches!(reinhard_normalize(&img, &bad), Err(Error::Config(_))));
    }
}
