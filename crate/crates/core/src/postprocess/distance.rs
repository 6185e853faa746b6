use crate::grid::{BinaryMask, FloatMap, Grid};

const FAR: f64 = 1e20;

/// Exact squared distance transform of a sampled function along one line.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this stops at k = 0
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance from each foreground pixel to the nearest background
/// pixel, where everything outside the image counts as background.
pub fn distance_transform(mask: &BinaryMask) -> FloatMap {
    let (h, w) = (mask.height() + 2, mask.width() + 2);
    let inside = |r: usize, c: usize| {
        r >= 1 && c >= 1 && r <= mask.height() && c <= mask.width() && mask[(r - 1, c - 1)]
    };
    let mut grid: Vec<f64> = (0..h * w)
        .map(|i| if inside(i / w, i % w) { FAR } else { 0.0 })
        .collect();
    squared_edt_2d(&mut grid, h, w);
    Grid::from_fn(mask.height(), mask.width(), |r, c| grid[(r + 1) * w + c + 1].sqrt() as f32)
}

/// Euclidean distance from every pixel to the nearest `true` pixel of
/// `targets`; `None` when there is no target.
pub fn distance_to_set(targets: &BinaryMask) -> Option<FloatMap> {
    if !targets.data().iter().any(|&b| b) {
        return None;
    }
    let (h, w) = (targets.height(), targets.width());
    let mut grid: Vec<f64> = targets.data().iter().map(|&t| if t { 0.0 } else { FAR }).collect();
    squared_edt_2d(&mut grid, h, w);
    Some(Grid::from_vec(h, w, grid.iter().map(|v| v.sqrt() as f32).collect()).expect("shape"))
}

fn squared_edt_2d(grid: &mut [f64], h: usize, w: usize) {
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
}

/// Index into `0..n` under half-sample symmetric reflection.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur truncated at four standard deviations, with
/// reflected borders.
pub fn gaussian_blur(map: &FloatMap, sigma: f64) -> FloatMap {
    if sigma <= 0.0 || map.is_empty() {
        return map.clone();
    }
    let radius = (4.0 * sigma + 0.5) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (map.height(), map.width());
    let horizontal: Vec<f64> = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            kernel
                .iter()
                .zip(-radius..)
                .map(|(k, d)| k * map[(r, reflect(c as isize + d, w))] as f64)
                .sum()
        })
        .collect();
    Grid::from_fn(h, w, |r, c| {
        kernel
            .iter()
            .zip(-radius..)
            .map(|(k, d)| k * horizontal[reflect(r as isize + d, h) * w + c])
            .sum::<f64>() as f32
    })
}
