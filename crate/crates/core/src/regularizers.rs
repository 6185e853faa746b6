//! Smoothness and transformation-equivariance penalties on attention maps,
//! and assembly of the total training loss.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Activation, AttentionMap, ConfidenceRegressor, SparsityConfig};
use crate::error::{Error, Result};
use crate::grid::{Grid, RgbImage};
use crate::nn::{Real, Tensor};

/// Symmetries of the square pixel grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridTransform {
    FlipHorizontal,
    FlipVertical,
    Transpose,
    /// Counter-clockwise quarter turn.
    Rotate90,
    Rotate180,
    Rotate270,
}

impl GridTransform {
    pub const ALL: [GridTransform; 6] = [
        GridTransform::FlipHorizontal,
        GridTransform::FlipVertical,
        GridTransform::Transpose,
        GridTransform::Rotate90,
        GridTransform::Rotate180,
        GridTransform::Rotate270,
    ];

    pub fn inverse(self) -> Self {
        match self {
            GridTransform::Rotate90 => GridTransform::Rotate270,
            GridTransform::Rotate270 => GridTransform::Rotate90,
            t => t,
        }
    }

    /// Source pixel read by destination `(r, c)` on an `n x n` grid.
    fn source(self, r: usize, c: usize, n: usize) -> (usize, usize) {
        let last = n - 1;
        match self {
            GridTransform::FlipHorizontal => (r, last - c),
            GridTransform::FlipVertical => (last - r, c),
            GridTransform::Transpose => (c, r),
            GridTransform::Rotate90 => (c, last - r),
            GridTransform::Rotate180 => (last - r, last - c),
            GridTransform::Rotate270 => (last - c, r),
        }
    }

    pub fn apply_plane<T: Copy>(self, src: &[T], n: usize, dst: &mut [T]) {
        debug_assert_eq!(src.len(), n * n);
        for r in 0..n {
            for c in 0..n {
                let (sr, sc) = self.source(r, c, n);
                dst[r * n + c] = src[sr * n + sc];
            }
        }
    }

    pub fn apply_grid<T: Copy>(self, grid: &Grid<T>) -> Result<Grid<T>> {
        let n = require_square(grid.height(), grid.width())?;
        Ok(Grid::from_fn(n, n, |r, c| {
            let (sr, sc) = self.source(r, c, n);
            grid[(sr, sc)]
        }))
    }

    /// Applies the transform to every `(channel, batch)` plane.
    pub fn apply_tensor<T: Real>(self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = require_square(x.height(), x.width())?;
        let mut out = Tensor::zeros(x.channels(), x.batch(), n, n);
        for ch in 0..x.channels() {
            for b in 0..x.batch() {
                self.apply_plane(x.plane(ch, b), n, out.plane_mut(ch, b));
            }
        }
        Ok(out)
    }
}

fn require_square(h: usize, w: usize) -> Result<usize> {
    if h != w {
        return Err(Error::Input(format!(
            "grid transforms need a square input, got {h}x{w}"
        )));
    }
    Ok(h)
}

/// Non-empty set of transforms sampled uniformly, one per training batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSet {
    transforms: Vec<GridTransform>,
}

impl Default for TransformSet {
    fn default() -> Self {
        Self {
            transforms: GridTransform::ALL.to_vec(),
        }
    }
}

impl TransformSet {
    pub fn new(transforms: Vec<GridTransform>) -> Result<Self> {
        if transforms.is_empty() {
            return Err(Error::Config("transform set must not be empty".into()));
        }
        Ok(Self { transforms })
    }

    pub fn transforms(&self) -> &[GridTransform] {
        &self.transforms
    }

    pub fn sample(&self, rng: &mut impl Rng) -> GridTransform {
        *self.transforms.choose(rng).expect("non-empty by construction")
    }
}

fn smoothness_norm(h: usize, w: usize) -> Result<f64> {
    if h < 2 || w < 2 {
        return Err(Error::Input(format!(
            "smoothness needs a map of at least 2x2, got {h}x{w}"
        )));
    }
    Ok(((h - 1) * (w - 1)) as f64)
}

/// Sum of absolute vertical and horizontal forward differences over all
/// neighbouring pairs, divided by `(H-1)(W-1)`.
pub fn smoothness_value<T: Real>(map: &[T], h: usize, w: usize) -> Result<f64> {
    let norm = smoothness_norm(h, w)?;
    let mut sum = 0.0;
    for r in 0..h {
        for c in 0..w {
            let v = map[r * w + c].as_f64();
            if r + 1 < h {
                sum += (map[(r + 1) * w + c].as_f64() - v).abs();
            }
            if c + 1 < w {
                sum += (map[r * w + c + 1].as_f64() - v).abs();
            }
        }
    }
    Ok(sum / norm)
}

/// Adds `scale * d(smoothness)/d(map)` into `grad`; `sign(0)` is taken as 0.
pub fn smoothness_grad_into<T: Real>(map: &[T], h: usize, w: usize, scale: f64, grad: &mut [T]) -> Result<()> {
    let k = scale / smoothness_norm(h, w)?;
    let sign = |d: T| {
        if d > T::zero() {
            T::lit(k)
        } else if d < T::zero() {
            T::lit(-k)
        } else {
            T::zero()
        }
    };
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if r + 1 < h {
                let s = sign(map[i + w] - map[i]);
                grad[i + w] += s;
                grad[i] -= s;
            }
            if c + 1 < w {
                let s = sign(map[i + 1] - map[i]);
                grad[i + 1] += s;
                grad[i] -= s;
            }
        }
    }
    Ok(())
}

pub fn smoothness_loss(attention: &AttentionMap) -> Result<f64> {
    let m = attention.map();
    smoothness_value(m.data(), m.height(), m.width())
}

/// Batch mean of per-map smoothness on a `[1, B, H, W]` attention tensor,
/// with its gradient.
pub fn batch_smoothness<T: Real>(attention: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (h, w, n) = (attention.height(), attention.width(), attention.batch());
    let mut grad = Tensor::zeros(1, n, h, w);
    let mut total = 0.0;
    for b in 0..n {
        let plane = attention.plane(0, b);
        total += smoothness_value(plane, h, w)?;
        smoothness_grad_into(plane, h, w, 1.0 / n as f64, grad.plane_mut(0, b))?;
    }
    Ok((total / n as f64, grad))
}

/// Equivariance penalty between already-activated maps.
///
/// `primary` is the attention of the untransformed input and `transformed`
/// the attention of `t(input)`, both `[1, B, N, N]`. Returns
/// `mean((t(primary) - transformed)^2)` and the gradients with respect to
/// both inputs.
pub fn equivariance_from_attention<T: Real>(
    primary: &Tensor<T>,
    transformed: &Tensor<T>,
    t: GridTransform,
) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    if primary.dims() != transformed.dims() {
        return Err(Error::Input(format!(
            "equivariance branches disagree in shape: {:?} vs {:?}",
            primary.dims(),
            transformed.dims()
        )));
    }
    let moved = t.apply_tensor(primary)?;
    let count = moved.data().len() as f64;
    let mut diff = moved;
    let mut loss = 0.0;
    for (d, &a2) in diff.data_mut().iter_mut().zip(transformed.data()) {
        *d -= a2;
        loss += d.as_f64() * d.as_f64();
    }
    let k = T::lit(2.0 / count);
    diff.data_mut().iter_mut().for_each(|d| *d *= k);
    let d_transformed = diff.map(|v| -v);
    let d_primary = t.inverse().apply_tensor(&diff)?;
    Ok((loss / count, d_primary, d_transformed))
}

/// Equivariance loss of a confidence regressor on one square image.
///
/// Both branches are activated with the threshold of the untransformed
/// branch; a grid permutation leaves percentiles unchanged, so recomputing
/// it on the transformed branch gives the same value.
pub fn equivariance_loss<T: Real, F: ConfidenceRegressor<T>>(
    image: &RgbImage,
    model: &F,
    t: GridTransform,
    sparsity: &SparsityConfig,
) -> Result<f64> {
    require_square(image.height(), image.width())?;
    let x = Tensor::<T>::from_rgb_batch(&[image])?;
    let a1 = model.regress(&x)?;
    let a2 = model.regress(&t.apply_tensor(&x)?)?;
    let act = sparsity.activation_for(&[a1.plane(0, 0)])?;
    equivariance_with_activation(&a1, &a2, t, act)
}

pub fn equivariance_with_activation<T: Real>(
    a_primary: &Tensor<T>,
    a_transformed: &Tensor<T>,
    t: GridTransform,
    act: Activation,
) -> Result<f64> {
    let (loss, _, _) = equivariance_from_attention(
        &act.apply_tensor(a_primary),
        &act.apply_tensor(a_transformed),
        t,
    )?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub smooth_on: bool,
    pub equiv_on: bool,
    pub sparse_on: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            smooth_on: true,
            equiv_on: true,
            sparse_on: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub smooth: f64,
    pub equiv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            smooth: 1.0,
            equiv: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub scale: f64,
    pub smooth: f64,
    pub equiv: f64,
    pub total: f64,
    pub flags: AblationFlags,
}

/// `scale + smooth + equiv`, with disabled terms dropped from the total.
pub fn total_loss(
    scale: f64,
    smooth: f64,
    equiv: f64,
    flags: AblationFlags,
    weights: LossWeights,
) -> Result<LossBundle> {
    for (name, v) in [("scale", scale), ("smooth", smooth), ("equiv", equiv)] {
        if !v.is_finite() {
            return Err(Error::TrainingFault {
                message: format!("{name} loss is {v}"),
                last_checkpoint: None,
            });
        }
    }
    let mut total = scale;
    if flags.smooth_on {
        total += weights.smooth * smooth;
    }
    if flags.equiv_on {
        total += weights.equiv * equiv;
    }
    Ok(LossBundle {
        scale,
        smooth,
        equiv,
        total,
        flags,
    })
}
