//! Minimal CPU neural-network substrate: channel-major tensors, dilated
//! convolutions with explicit backward passes, and the AdamW optimizer.
//!
//! Activations are stored as `[channels, batch, height, width]` so that a
//! convolution over the whole batch is one GEMM against an im2col buffer.

mod conv;
mod layers;
mod optim;

use std::fmt::Debug;

pub use conv::{Conv2d, ConvCache, ConvSpec, PadMode};
pub use layers::{
    global_avg_pool, global_avg_pool_backward, leaky_relu_backward, leaky_relu_inplace, Linear,
};
pub use optim::{AdamW, AdamWConfig};


use crate::error::{Error, Result};
use crate::grid::{Grid, RgbImage};

/// Floating-point element type usable by the network code.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` for row/column-strided matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

/// Makes the calling thread flush subnormal floats to zero. Saturated
/// compressed sigmoids otherwise push activations and gradients into the
/// subnormal range, where arithmetic is many times slower.
pub fn flush_subnormals() {
    #[cfg(all(target_arch = "x86_64", target_feature = "sse"))]
    #[allow(deprecated)]
    // SAFETY: only sets the FTZ and DAZ bits of this thread's MXCSR.
    unsafe {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        _mm_setcsr(_mm_getcsr() | 0x8040);
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize), what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm operand {what} too short: needs index {last}, has {len}");
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, a_strides, "a");
                check_extent(b.len(), k, n, b_strides, "b");
                check_extent(c.len(), m, n, c_strides, "c");
                // SAFETY: every index touched by the kernel is bounded by the
                // extent checks above and the slices outlive the call.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Anything holding trainable parameters as flat buffers.
pub trait Parameterized<T> {
    fn params(&self) -> Vec<&[T]>;
    fn params_mut(&mut self) -> Vec<&mut [T]>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn fill_zero(&mut self)
    where
        T: Real,
    {
        for p in self.params_mut() {
            p.fill(T::zero());
        }
    }
}

/// Dense 4-D tensor in `[channels, batch, height, width]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            dims: [channels, batch, height, width],
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Input(format!(
                "tensor dims {dims:?} need {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// Stacks equally sized RGB images into a `[3, B, H, W]` tensor.
    pub fn from_rgb_batch(images: &[&RgbImage]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Input("empty image batch".into()))?;
        let (h, w) = (first.height(), first.width());
        let n = images.len();
        let mut t = Self::zeros(3, n, h, w);
        for (b, img) in images.iter().enumerate() {
            if img.height() != h || img.width() != w {
                return Err(Error::Input(format!(
                    "batch image {b} is {}x{}, expected {h}x{w}",
                    img.height(),
                    img.width()
                )));
            }
            for ch in 0..3 {
                let plane = t.plane_mut(ch, b);
                for (dst, px) in plane.iter_mut().zip(img.data()) {
                    *dst = T::lit(px[ch] as f64);
                }
            }
        }
        Ok(t)
    }

    /// Stacks single-channel maps into a `[1, B, H, W]` tensor.
    pub fn from_maps(maps: &[&Grid<T>]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Input("empty map batch".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            if m.height() != h || m.width() != w {
                return Err(Error::Input("maps in a batch must share a size".into()));
            }
            data.extend_from_slice(m.data());
        }
        Self::from_vec([1, maps.len(), h, w], data)
    }

    pub fn plane_grid(&self, channel: usize, batch: usize) -> Grid<T> {
        Grid::from_vec(self.height(), self.width(), self.plane(channel, batch).to_vec())
            .expect("plane size matches")
    }

    pub fn to_rgb(&self, batch: usize) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        let mut img = Grid::filled(h, w, [0.0f32; 3]);
        for ch in 0..3.min(self.channels()) {
            for (px, v) in img.data_mut().iter_mut().zip(self.plane(ch, batch)) {
                px[ch] = v.as_f64() as f32;
            }
        }
        img
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl<T> Tensor<T> {
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.dims[0]
    }

    pub fn batch(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn plane(&self, channel: usize, batch: usize) -> &[T] {
        let hw = self.plane_len();
        let start = (channel * self.dims[1] + batch) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, channel: usize, batch: usize) -> &mut [T] {
        let hw = self.plane_len();
        let start = (channel * self.dims[1] + batch) * hw;
        &mut self.data[start..start + hw]
    }
}
