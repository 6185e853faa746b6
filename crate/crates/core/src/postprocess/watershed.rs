use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::distance::{distance_transform, gaussian_blur};
use super::morphology::disk;
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, FloatMap, Grid};

/// Seed labels `1..=count` plus the smoothed distance map they were found on.
#[derive(Clone, Debug, PartialEq)]
pub struct Markers {
    pub labels: Grid<u32>,
    pub distance: FloatMap,
    pub count: usize,
}

impl Markers {
    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.labels
            .indexed()
            .filter(|(_, _, &l)| l > 0)
            .map(|(r, c, _)| (r, c))
            .collect()
    }
}

/// Distance transform, Gaussian smoothing and circular-window local maxima.
/// Touching maxima of a plateau collapse to the plateau's first pixel in
/// row-major order.
pub fn compute_markers(mask: &BinaryMask, blur_sigma: f64, maxima_radius: usize) -> Markers {
    let distance = gaussian_blur(&distance_transform(mask), blur_sigma);
    let (h, w) = (mask.height(), mask.width());
    let window = disk(maxima_radius);
    let candidate = Grid::from_fn(h, w, |r, c| {
        let v = distance[(r, c)];
        mask[(r, c)]
            && v > 0.0
            && window.iter().all(|&(dy, dx)| {
                let (y, x) = (r as isize + dy, c as isize + dx);
                y < 0 || x < 0 || y >= h as isize || x >= w as isize || distance[(y as usize, x as usize)] <= v
            })
    });
    let mut labels = Grid::filled(h, w, 0u32);
    let mut seen = Grid::filled(h, w, false);
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        let (r0, c0) = (start / w, start % w);
        if !candidate[(r0, c0)] || seen[(r0, c0)] {
            continue;
        }
        count += 1;
        labels[(r0, c0)] = count;
        seen[(r0, c0)] = true;
        stack.push((r0, c0));
        while let Some((r, c)) = stack.pop() {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (y, x) = (r as isize + dy, c as isize + dx);
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    let (y, x) = (y as usize, x as usize);
                    if candidate[(y, x)] && !seen[(y, x)] {
                        seen[(y, x)] = true;
                        stack.push((y, x));
                    }
                }
            }
        }
    }
    Markers {
        labels,
        distance,
        count: count as usize,
    }
}

/// Priority flood on the inverted distance map from the given markers,
/// restricted to `mask` and 4-connected. Equal elevations are resolved in
/// row-major order. Mask components that hold no marker receive fresh labels
/// after the seeded ones.
pub fn watershed_instances(distance: &FloatMap, markers: &Grid<u32>, mask: &BinaryMask) -> Result<Grid<u32>> {
    if !distance.same_shape(markers) || !distance.same_shape(mask) {
        return Err(Error::Input("distance map, markers and mask differ in size".into()));
    }
    let (h, w) = (mask.height(), mask.width());
    let mut labels = Grid::filled(h, w, 0u32);
    let mut next = 0u32;
    // max-heap on distance == min-heap on elevation; Reverse(index) gives row-major ties
    let mut heap: BinaryHeap<(u32, Reverse<usize>)> = BinaryHeap::new();
    let key = |i: usize| distance.data()[i].max(0.0).to_bits();
    for (i, &m) in markers.data().iter().enumerate() {
        if m == 0 {
            continue;
        }
        if !mask.data()[i] {
            return Err(Error::Input(format!(
                "marker {m} at ({}, {}) lies outside the mask",
                i / w,
                i % w
            )));
        }
        labels.data_mut()[i] = m;
        next = next.max(m);
        heap.push((key(i), Reverse(i)));
    }
    let flood = |heap: &mut BinaryHeap<(u32, Reverse<usize>)>, labels: &mut Grid<u32>| {
        while let Some((_, Reverse(i))) = heap.pop() {
            let (r, c) = (i / w, i % w);
            let label = labels.data()[i];
            let neighbours = [
                (r > 0).then(|| i - w),
                (c > 0).then(|| i - 1),
                (c + 1 < w).then(|| i + 1),
                (r + 1 < h).then(|| i + w),
            ];
            for j in neighbours.into_iter().flatten() {
                if mask.data()[j] && labels.data()[j] == 0 {
                    labels.data_mut()[j] = label;
                    heap.push((key(j), Reverse(j)));
                }
            }
        }
    };
    flood(&mut heap, &mut labels);
    for i in 0..h * w {
        if mask.data()[i] && labels.data()[i] == 0 {
            next += 1;
            labels.data_mut()[i] = next;
            heap.push((key(i), Reverse(i)));
            flood(&mut heap, &mut labels);
        }
    }
    Ok(labels)
}
