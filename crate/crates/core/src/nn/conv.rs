use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Parameterized, Real, Tensor};
use crate::error::{Error, Result};

/// Border handling for convolution inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadMode {
    #[default]
    Zero,
    /// Periodic wrap-around; makes the layer exactly equivariant to cyclic shifts.
    Circular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// Stride-1 square kernel with padding chosen to preserve spatial size.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn strided(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            dilation: 1,
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    /// `[out][in][ky][kx]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    spec: ConvSpec,
    pad_mode: PadMode,
}

/// Forward state needed to back-propagate through one convolution call.
#[derive(Debug)]
pub struct ConvCache<T> {
    input: Tensor<T>,
}

impl<T> ConvCache<T> {
    /// The input the layer saw.
    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }
}

/// Upper bound on im2col scratch elements; small enough to stay cache resident.
#[cfg(not(test))]
const COLS_BUDGET: usize = 1 << 16;
/// Forces several bands per image in the unit tests.
#[cfg(test)]
const COLS_BUDGET: usize = 64;

impl<T: Real> Conv2d<T> {
    /// He-uniform weights, zero bias.
    pub fn new(spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let fan_in = spec.patch_len() as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = (0..spec.out_channels * spec.patch_len())
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            weight,
            bias: vec![T::zero(); spec.out_channels],
            spec,
            pad_mode: PadMode::Zero,
        }
    }

    pub fn zeros(spec: ConvSpec) -> Self {
        Self {
            weight: vec![T::zero(); spec.out_channels * spec.patch_len()],
            bias: vec![T::zero(); spec.out_channels],
            spec,
            pad_mode: PadMode::Zero,
        }
    }

    pub fn from_parts(spec: ConvSpec, weight: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weight.len() != spec.out_channels * spec.patch_len() || bias.len() != spec.out_channels
        {
            return Err(Error::Input(format!(
                "convolution parameters do not match {spec:?}"
            )));
        }
        Ok(Self {
            weight,
            bias,
            spec,
            pad_mode: PadMode::Zero,
        })
    }

    pub fn spec(&self) -> ConvSpec {
        self.spec
    }

    pub fn pad_mode(&self) -> PadMode {
        self.pad_mode
    }

    pub fn set_pad_mode(&mut self, mode: PadMode) {
        self.pad_mode = mode;
    }

    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let s = &self.spec;
        let span = s.dilation * (s.kernel - 1) + 1;
        let (ph, pw) = (height + 2 * s.padding, width + 2 * s.padding);
        if ph < span || pw < span {
            return Err(Error::Input(format!(
                "input {height}x{width} is smaller than the kernel span {span}"
            )));
        }
        Ok(((ph - span) / s.stride + 1, (pw - span) / s.stride + 1))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        if x.channels() != self.spec.in_channels {
            return Err(Error::Input(format!(
                "convolution expects {} input channels, got {}",
                self.spec.in_channels,
                x.channels()
            )));
        }
        if self.pad_mode == PadMode::Circular && self.spec.padding > x.height().min(x.width()) {
            return Err(Error::Input(
                "circular padding wider than the input".to_string(),
            ));
        }
        self.output_size(x.height(), x.width())
    }

    /// Fills columns `col_off..col_off + rows*ow` of every patch row of
    /// `cols` (row stride `ld`) for output rows `oy0..oy1` of image `b`.
    #[allow(clippy::too_many_arguments)]
    fn im2col(
        &self,
        x: &Tensor<T>,
        b: usize,
        oy0: usize,
        oy1: usize,
        ow: usize,
        cols: &mut [T],
        ld: usize,
        col_off: usize,
    ) {
        let ConvSpec {
            in_channels,
            kernel: k,
            stride: s,
            padding: p,
            dilation: d,
            ..
        } = self.spec;
        let (h, w) = (x.height() as isize, x.width() as isize);
        let span = (oy1 - oy0) * ow;
        for ci in 0..in_channels {
            let plane = x.plane(ci, b);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_row = &mut cols[row * ld + col_off..row * ld + col_off + span];
                    let off_y = (ky * d) as isize - p as isize;
                    let off_x = (kx * d) as isize - p as isize;
                    let (lo, hi) = valid_range(off_x, s, w, ow);
                    for (ri, oy) in (oy0..oy1).enumerate() {
                        let dst = &mut dst_row[ri * ow..(ri + 1) * ow];
                        let iy = (oy * s) as isize + off_y;
                        match self.pad_mode {
                            PadMode::Zero => {
                                if iy < 0 || iy >= h {
                                    dst.fill(T::zero());
                                    continue;
                                }
                                let src = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                                dst[..lo].fill(T::zero());
                                dst[hi..].fill(T::zero());
                                if s == 1 {
                                    let a = (lo as isize + off_x) as usize;
                                    dst[lo..hi].copy_from_slice(&src[a..a + (hi - lo)]);
                                } else {
                                    for (ox, v) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                                        *v = src[((ox * s) as isize + off_x) as usize];
                                    }
                                }
                            }
                            PadMode::Circular => {
                                let iy = iy.rem_euclid(h);
                                let src = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                                if s == 1 {
                                    let (mut ox, mut ix) = (0, off_x.rem_euclid(w) as usize);
                                    while ox < ow {
                                        let run = (w as usize - ix).min(ow - ox);
                                        dst[ox..ox + run].copy_from_slice(&src[ix..ix + run]);
                                        ox += run;
                                        ix = 0;
                                    }
                                } else {
                                    for (ox, v) in dst.iter_mut().enumerate() {
                                        *v = src[((ox * s) as isize + off_x).rem_euclid(w) as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulates column gradients for output
    /// rows `oy0..oy1` of image `b` into `dx`.
    #[allow(clippy::too_many_arguments)]
    fn col2im(
        &self,
        dcols: &[T],
        ld: usize,
        b: usize,
        oy0: usize,
        oy1: usize,
        ow: usize,
        dx: &mut Tensor<T>,
    ) {
        let ConvSpec {
            in_channels,
            kernel: k,
            stride: s,
            padding: p,
            dilation: d,
            ..
        } = self.spec;
        let (h, w) = (dx.height() as isize, dx.width() as isize);
        let span = (oy1 - oy0) * ow;
        for ci in 0..in_channels {
            let plane = dx.plane_mut(ci, b);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src_row = &dcols[row * ld..row * ld + span];
                    let off_y = (ky * d) as isize - p as isize;
                    let off_x = (kx * d) as isize - p as isize;
                    let (lo, hi) = valid_range(off_x, s, w, ow);
                    for (ri, oy) in (oy0..oy1).enumerate() {
                        let src = &src_row[ri * ow..(ri + 1) * ow];
                        let iy = (oy * s) as isize + off_y;
                        match self.pad_mode {
                            PadMode::Zero => {
                                if iy < 0 || iy >= h {
                                    continue;
                                }
                                let dst = &mut plane[(iy * w) as usize..((iy + 1) * w) as usize];
                                for (ox, &g) in src.iter().enumerate().take(hi).skip(lo) {
                                    dst[((ox * s) as isize + off_x) as usize] += g;
                                }
                            }
                            PadMode::Circular => {
                                let iy = iy.rem_euclid(h);
                                let dst = &mut plane[(iy * w) as usize..((iy + 1) * w) as usize];
                                if s == 1 {
                                    let (mut ox, mut ix) = (0, off_x.rem_euclid(w) as usize);
                                    while ox < ow {
                                        let run = (w as usize - ix).min(ow - ox);
                                        for (d, &g) in dst[ix..ix + run].iter_mut().zip(&src[ox..ox + run]) {
                                            *d += g;
                                        }
                                        ox += run;
                                        ix = 0;
                                    }
                                } else {
                                    for (ox, &g) in src.iter().enumerate() {
                                        dst[((ox * s) as isize + off_x).rem_euclid(w) as usize] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Training forward pass; keeps the input for [`Self::backward`].
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let y = self.infer(x)?;
        Ok((y, ConvCache { input: x.clone() }))
    }

    /// Output rows per im2col band.
    fn band_rows(&self, oh: usize, ow: usize) -> usize {
        (COLS_BUDGET / (self.spec.patch_len() * ow)).clamp(1, oh)
    }

    /// Forward pass without caching; processes output rows in bands so that
    /// large images fit in a bounded scratch buffer.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (oh, ow) = self.check_input(x)?;
        let n = x.batch();
        let total = n * oh * ow;
        let kk = self.spec.patch_len();
        let band = self.band_rows(oh, ow);
        let mut cols = vec![T::zero(); kk * band * ow];
        let mut y = Tensor::zeros(self.spec.out_channels, n, oh, ow);
        for b in 0..n {
            let mut oy0 = 0;
            while oy0 < oh {
                let oy1 = (oy0 + band).min(oh);
                let span = (oy1 - oy0) * ow;
                self.im2col(x, b, oy0, oy1, ow, &mut cols, span, 0);
                let offset = b * oh * ow + oy0 * ow;
                T::gemm(
                    self.spec.out_channels,
                    kk,
                    span,
                    T::one(),
                    &self.weight,
                    (kk, 1),
                    &cols,
                    (span, 1),
                    T::zero(),
                    &mut y.data_mut()[offset..],
                    (total, 1),
                );
                oy0 = oy1;
            }
        }
        self.add_bias(&mut y);
        Ok(y)
    }

    fn add_bias(&self, y: &mut Tensor<T>) {
        let per = y.batch() * y.plane_len();
        for (chunk, &b) in y.data_mut().chunks_mut(per).zip(&self.bias) {
            if b != T::zero() {
                chunk.iter_mut().for_each(|v| *v += b);
            }
        }
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the layer input. Columns are rebuilt band by band from
    /// the cached input.
    pub fn backward(&self, cache: &ConvCache<T>, dy: &Tensor<T>, grad: &mut Conv2d<T>) -> Tensor<T> {
        let x = &cache.input;
        let [_, n, h, w] = x.dims();
        let (oh, ow) = (dy.height(), dy.width());
        let total = n * oh * ow;
        let kk = self.spec.patch_len();
        let m = self.spec.out_channels;
        debug_assert_eq!(dy.data().len(), m * total);

        for (gb, chunk) in grad.bias.iter_mut().zip(dy.data().chunks(total)) {
            *gb += chunk.iter().copied().sum::<T>();
        }

        let band = self.band_rows(oh, ow);
        let mut cols = vec![T::zero(); kk * band * ow];
        let mut dcols = vec![T::zero(); kk * band * ow];
        let mut dx = Tensor::zeros(self.spec.in_channels, n, h, w);
        for b in 0..n {
            let mut oy0 = 0;
            while oy0 < oh {
                let oy1 = (oy0 + band).min(oh);
                let span = (oy1 - oy0) * ow;
                let dyb = &dy.data()[b * oh * ow + oy0 * ow..];
                self.im2col(x, b, oy0, oy1, ow, &mut cols, span, 0);
                T::gemm(
                    m,
                    span,
                    kk,
                    T::one(),
                    dyb,
                    (total, 1),
                    &cols,
                    (1, span),
                    T::one(),
                    &mut grad.weight,
                    (kk, 1),
                );
                T::gemm(
                    kk,
                    m,
                    span,
                    T::one(),
                    &self.weight,
                    (1, kk),
                    dyb,
                    (total, 1),
                    T::zero(),
                    &mut dcols,
                    (span, 1),
                );
                self.col2im(&dcols, span, b, oy0, oy1, ow, &mut dx);
                oy0 = oy1;
            }
        }
        dx
    }
}

/// Output columns `lo..hi` whose source column `ox*s + off` lies in `[0, w)`.
fn valid_range(off: isize, s: usize, w: isize, ow: usize) -> (usize, usize) {
    let s = s as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = if w - off <= 0 { 0 } else { (w - off + s - 1) / s };
    let hi = (hi as usize).min(ow);
    ((lo as usize).min(hi), hi)
}

impl<T> Parameterized<T> for Conv2d<T> {
    fn params(&self) -> Vec<&[T]> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        vec![&mut self.weight, &mut self.bias]
    }
}
