//! Oracles shared by the property suites and the acceptance run.
#![allow(dead_code)]

use std::collections::BTreeSet;

use nucleiseg::attention::{
    attended_count, batch_percentile_threshold, compressed_sigmoid, Activation,
    ConfidenceRegressor, SparsityConfig,
};
use nucleiseg::metrics::{aji, aji_parts, LabelMap};
use nucleiseg::nn::Tensor;
use nucleiseg::postprocess::{segment, PostprocessConfig};
use nucleiseg::regularizers::{
    equivariance_from_attention, equivariance_loss, smoothness_grad_into, smoothness_value,
    GridTransform,
};
use nucleiseg::scale::{scale_loss, scale_loss_grad};
use nucleiseg::{FloatMap, Grid, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_POINTS: usize = 50;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn central(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Worst relative error of the scale-loss gradient over random logits.
pub fn scale_loss_grad_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..GRAD_POINTS {
        let scores: Vec<f64> = (0..3).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let label = rng.gen_range(0..3);
        let grad = scale_loss_grad(&scores, label).unwrap();
        for j in 0..3 {
            let f = |v: f64| {
                let mut s = scores.clone();
                s[j] = v;
                scale_loss(&s, label).unwrap()
            };
            worst = worst.max(rel_err(grad[j], central(f, scores[j], 1e-5)));
        }
    }
    worst
}

pub fn smoothness_grad_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (9, 7);
    let mut worst = 0.0f64;
    for _ in 0..GRAD_POINTS {
        let map: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();
        let mut grad = vec![0.0; h * w];
        smoothness_grad_into(&map, h, w, 1.0, &mut grad).unwrap();
        let i = rng.gen_range(0..h * w);
        let f = |v: f64| {
            let mut m = map.clone();
            m[i] = v;
            smoothness_value(&m, h, w).unwrap()
        };
        // neighbour differences of uniform values are far from zero at this step
        worst = worst.max(rel_err(grad[i], central(f, map[i], 1e-5)));
    }
    worst
}

/// Both branches of the equivariance loss, cycling through the transforms.
pub fn equivariance_grad_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 6;
    let mut worst = 0.0f64;
    for k in 0..GRAD_POINTS {
        let t = GridTransform::ALL[k % 6];
        let a1 = Tensor::from_vec([1, 2, n, n], (0..2 * n * n).map(|_| rng.gen()).collect()).unwrap();
        let a2 = Tensor::from_vec([1, 2, n, n], (0..2 * n * n).map(|_| rng.gen()).collect()).unwrap();
        let (_, d1, d2) = equivariance_from_attention::<f64>(&a1, &a2, t).unwrap();
        let i = rng.gen_range(0..2 * n * n);
        let f1 = |v: f64| {
            let mut a = a1.clone();
            a.data_mut()[i] = v;
            equivariance_from_attention(&a, &a2, t).unwrap().0
        };
        let f2 = |v: f64| {
            let mut a = a2.clone();
            a.data_mut()[i] = v;
            equivariance_from_attention(&a1, &a, t).unwrap().0
        };
        worst = worst.max(rel_err(d1.data()[i], central(f1, a1.data()[i], 1e-5)));
        worst = worst.max(rel_err(d2.data()[i], central(f2, a2.data()[i], 1e-5)));
    }
    worst
}

pub fn compressed_sigmoid_grad_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..GRAD_POINTS {
        let tau = rng.gen_range(-1.0..1.0);
        let r = rng.gen_range(1.0..30.0);
        let x = tau + rng.gen_range(-0.3..0.3);
        let act = Activation::Compressed { tau, r };
        let numeric = central(|v| compressed_sigmoid(v, tau, r), x, 1e-6);
        worst = worst.max(rel_err(act.derivative(x), numeric));
    }
    worst
}

/// Count of pixels above the threshold on `maps` random tie-free maps,
/// against ceil(7 HW / 100) in integers.
pub fn sparsity_count_check(seed: u64, maps: usize) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..maps {
        let (h, w): (usize, usize) = (rng.gen_range(8..80), rng.gen_range(8..80));
        let map: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut sorted = map.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.windows(2).any(|p| p[0] >= p[1]) {
            return Err(format!("{h}x{w} map has a tie"));
        }
        let tau = batch_percentile_threshold(&[&map], 93.0).map_err(|e| e.to_string())?;
        let above = map.iter().filter(|&&v| v > tau).count();
        let expect = (7 * h * w).div_ceil(100);
        if above != expect || attended_count(93.0, h * w) != expect {
            return Err(format!("{h}x{w}: {above} above tau, expected {expect}"));
        }
        // the activation puts exactly those pixels above one half
        let half = map.iter().filter(|&&v| compressed_sigmoid(v, tau, 20.0) > 0.5).count();
        if half != expect {
            return Err(format!("{h}x{w}: {half} activations above 0.5, expected {expect}"));
        }
    }
    Ok(())
}

/// Confidence as a fixed function of each pixel's own colour.
pub struct Pixelwise;

impl ConfidenceRegressor<f64> for Pixelwise {
    fn regress(&self, images: &Tensor<f64>) -> Result<Tensor<f64>> {
        let [_, n, h, w] = images.dims();
        let mut out = Tensor::zeros(1, n, h, w);
        for b in 0..n {
            let (r, g, bl) = (images.plane(0, b), images.plane(1, b), images.plane(2, b));
            for (i, o) in out.plane_mut(0, b).iter_mut().enumerate() {
                *o = (3.0 * r[i] - 2.0 * g[i] + bl[i]).sin();
            }
        }
        Ok(out)
    }
}

/// Largest equivariance loss of the pixelwise stub over all transforms, with
/// and without the sparse activation.
pub fn pixelwise_equivariance_worst(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Grid::from_fn(40, 40, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
    let mut worst = 0.0f64;
    for sparse_enabled in [true, false] {
        let sparsity = SparsityConfig { sparse_enabled, ..SparsityConfig::default() };
        for t in GridTransform::ALL {
            worst = worst.max(equivariance_loss(&image, &Pixelwise, t, &sparsity).unwrap());
        }
    }
    worst
}

/// Pixel index sets per instance id, straight from the map.
pub fn instances(map: &LabelMap) -> Vec<(u32, BTreeSet<usize>)> {
    let ids: BTreeSet<u32> = map.data().iter().copied().filter(|&l| l > 0).collect();
    ids.into_iter()
        .map(|id| {
            let px = map.data().iter().enumerate().filter(|(_, &l)| l == id).map(|(i, _)| i).collect();
            (id, px)
        })
        .collect()
}

/// For every GT instance, scan every predicted instance by set operations
/// and keep the strict argmax of IoU (earliest id wins ties); zero overlap
/// leaves the GT unmatched.
pub fn aji_oracle(pred: &LabelMap, gt: &LabelMap) -> (u64, u64) {
    let g = instances(gt);
    let p = instances(pred);
    let (mut num, mut den) = (0u64, 0u64);
    let mut used = BTreeSet::new();
    for (_, gs) in &g {
        let mut best: Option<(f64, usize)> = None;
        for (j, (_, ps)) in p.iter().enumerate() {
            let inter = gs.intersection(ps).count();
            if inter == 0 {
                continue;
            }
            let iou = inter as f64 / gs.union(ps).count() as f64;
            if best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, j));
            }
        }
        match best {
            Some((_, j)) => {
                num += gs.intersection(&p[j].1).count() as u64;
                den += gs.union(&p[j].1).count() as u64;
                used.insert(j);
            }
            None => den += gs.len() as u64,
        }
    }
    for (j, (_, ps)) in p.iter().enumerate() {
        if !used.contains(&j) {
            den += ps.len() as u64;
        }
    }
    (num, den)
}

pub fn random_label_map(rng: &mut ChaCha8Rng, h: usize, w: usize, max_id: u32) -> LabelMap {
    // blocky maps so instances overlap in interesting ways
    let mut map = Grid::filled(h, w, 0u32);
    for _ in 0..rng.gen_range(0..=max_id) {
        let id = rng.gen_range(1..=max_id);
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (r1, c1) = (rng.gen_range(r0..h) + 1, rng.gen_range(c0..w) + 1);
        for r in r0..r1 {
            for c in c0..c1 {
                map[(r, c)] = id;
            }
        }
    }
    map
}

/// Exact agreement with the oracle on `pairs` random maps of side ≤ 8 that
/// have at least one GT instance; all-background GT must be rejected.
pub fn aji_oracle_check(seed: u64, pairs: usize) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    while checked < pairs {
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let gt = random_label_map(&mut rng, h, w, 3);
        let pred = random_label_map(&mut rng, h, w, 3);
        if gt.data().iter().all(|&l| l == 0) {
            if aji(&pred, &gt).is_ok() {
                return Err("empty ground truth accepted".into());
            }
            continue;
        }
        let parts = aji_parts(&pred, &gt).map_err(|e| e.to_string())?;
        let (num, den) = aji_oracle(&pred, &gt);
        if (parts.numerator, parts.denominator) != (num, den) || parts.value() != num as f64 / den as f64 {
            return Err(format!("{gt:?} {pred:?}: {}/{} vs {num}/{den}", parts.numerator, parts.denominator));
        }
        checked += 1;
    }
    Ok(())
}

/// Two 16 px squares overlapping in 8 px.
pub fn aji_hand_case() -> f64 {
    let gt = Grid::from_fn(8, 8, |r, c| u32::from(r < 4 && c < 4));
    let pred = Grid::from_fn(8, 8, |r, c| u32::from(r < 4 && (2..6).contains(&c)));
    aji(&pred, &gt).unwrap()
}

pub fn disks(h: usize, w: usize, centers: &[(f32, f32)], radius: f32) -> FloatMap {
    Grid::from_fn(h, w, |r, c| {
        let inside = centers
            .iter()
            .any(|&(y, x)| (r as f32 - y).powi(2) + (c as f32 - x).powi(2) <= radius * radius);
        if inside { 0.95 } else { 0.03 }
    })
}

/// Up to ten centres on a jittered 40 px lattice, so disks never touch.
pub fn lattice(n: usize, rng: &mut ChaCha8Rng) -> Vec<(f32, f32)> {
    (0..n)
        .map(|i| {
            let (row, col) = (i / 5, i % 5);
            (
                25.0 + 40.0 * row as f32 + rng.gen_range(-4.0..4.0),
                25.0 + 40.0 * col as f32 + rng.gen_range(-4.0..4.0),
            )
        })
        .collect()
}

/// n separated disks give n instances for n = 1..10, and a repeat of each
/// run gives the same labels.
pub fn disk_benchmark(seed: u64) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = PostprocessConfig::default();
    for n in 1..=10 {
        let radius = rng.gen_range(6.0..11.0);
        let att = disks(100, 210, &lattice(n, &mut rng), radius);
        let seg = segment(&att, &config).map_err(|e| e.to_string())?;
        if seg.instance_count() != n {
            return Err(format!("{n} disks of radius {radius}: {} instances", seg.instance_count()));
        }
        if segment(&att, &config).map_err(|e| e.to_string())? != seg {
            return Err(format!("{n} disks: repeated run differs"));
        }
    }
    Ok(())
}
