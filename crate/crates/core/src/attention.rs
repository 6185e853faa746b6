//! The attention network and its sparsity activation.
//!
//! A dilated, stride-1 convolutional stack regresses a confidence map `a` for
//! each input tile. Sparsity comes from a compressed sigmoid centred on a
//! threshold `tau` taken as an order statistic of `a`, so that a fixed share
//! of pixels (the top `100 - eta` percent) end up above one half.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FloatMap, Grid, RgbImage};
use crate::nn::{
    leaky_relu_backward, leaky_relu_inplace, Conv2d, ConvCache, ConvSpec, PadMode, Parameterized,
    Real, Tensor,
};

/// Smallest spatial size accepted by the networks.
pub const MIN_INPUT_SIZE: usize = 64;
/// Dilation of each of the seven 3x3 layers.
pub const DILATIONS: [usize; 7] = [1, 1, 2, 4, 8, 1, 1];
pub const LEAKY_SLOPE: f64 = 0.01;

/// Channel widths of the attention stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionPreset {
    /// 3-16-32-64-64-64-32-1
    #[default]
    Standard,
    /// 3-8-16-16-16-16-8-1, for CPU-scale experiments.
    Desk,
}

impl AttentionPreset {
    pub fn channels(self) -> [usize; 8] {
        match self {
            AttentionPreset::Standard => [3, 16, 32, 64, 64, 64, 32, 1],
            AttentionPreset::Desk => [3, 8, 16, 16, 16, 16, 8, 1],
        }
    }
}

/// Pre-activation confidence map `a` of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap(pub FloatMap);

/// Activated attention map `A` of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap(pub FloatMap);

impl AttentionMap {
    pub fn map(&self) -> &FloatMap {
        &self.0
    }
}

/// Anything that turns a `[3, B, H, W]` batch into `[1, B, H, W]` confidences.
pub trait ConfidenceRegressor<T> {
    fn regress(&self, images: &Tensor<T>) -> Result<Tensor<T>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionNet<T> {
    layers: Vec<Conv2d<T>>,
}

/// Per-call forward state of [`AttentionNet::forward`].
#[derive(Debug)]
pub struct AttentionCache<T> {
    convs: Vec<ConvCache<T>>,
}

impl<T: Real> AttentionNet<T> {
    pub fn new(preset: AttentionPreset, rng: &mut impl Rng) -> Self {
        Self::with_channels(&preset.channels(), rng)
    }

    pub fn with_channels(channels: &[usize; 8], rng: &mut impl Rng) -> Self {
        let layers = DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| Conv2d::new(ConvSpec::same(channels[i], channels[i + 1], 3, d), rng))
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Conv2d<T>>) -> Result<Self> {
        if layers.len() != DILATIONS.len() {
            return Err(Error::Input(format!(
                "attention network needs {} layers, got {}",
                DILATIONS.len(),
                layers.len()
            )));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Conv2d<T>] {
        &self.layers
    }

    /// Same architecture with every parameter zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Conv2d::zeros(l.spec())).collect(),
        }
    }

    pub fn set_pad_mode(&mut self, mode: PadMode) {
        self.layers.iter_mut().for_each(|l| l.set_pad_mode(mode));
    }

    pub fn zero_final_layer(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.fill_zero();
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != 3 {
            return Err(Error::Input(format!(
                "attention network expects 3 channels, got {}",
                x.channels()
            )));
        }
        if x.height() < MIN_INPUT_SIZE || x.width() < MIN_INPUT_SIZE {
            return Err(Error::Input(format!(
                "attention input {}x{} is below the {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE} minimum",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    /// Training forward pass returning `[1, B, H, W]` confidences.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, AttentionCache<T>)> {
        self.check_input(x)?;
        let slope = T::lit(LEAKY_SLOPE);
        let mut convs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (mut y, cache) = layer.forward(&h)?;
            convs.push(cache);
            if i + 1 < self.layers.len() {
                leaky_relu_inplace(y.data_mut(), slope);
            }
            h = y;
        }
        Ok((h, AttentionCache { convs }))
    }

    /// Cache-free forward pass for inference on arbitrarily large inputs.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let slope = T::lit(LEAKY_SLOPE);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(&h)?;
            if i + 1 < self.layers.len() {
                leaky_relu_inplace(h.data_mut(), slope);
            }
        }
        Ok(h)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input images.
    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        d_confidence: &Tensor<T>,
        grads: &mut AttentionNet<T>,
    ) -> Tensor<T> {
        let slope = T::lit(LEAKY_SLOPE);
        let mut g = d_confidence.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                // the next layer's cached input is this layer's activation
                leaky_relu_backward(cache.convs[i + 1].input().data(), g.data_mut(), slope);
            }
            g = self.layers[i].backward(&cache.convs[i], &g, &mut grads.layers[i]);
        }
        g
    }
}

impl<T: Real> ConfidenceRegressor<T> for AttentionNet<T> {
    fn regress(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(images)
    }
}

impl<T> Parameterized<T> for AttentionNet<T> {
    fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Confidence map of a single RGB image.
pub fn attention_forward<T: Real>(image: &RgbImage, net: &AttentionNet<T>) -> Result<ConfidenceMap> {
    let x = Tensor::<T>::from_rgb_batch(&[image])?;
    let a = net.infer(&x)?;
    Ok(ConfidenceMap(
        a.plane_grid(0, 0).map(|v| v.as_f64() as f32),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    /// Percentile `eta` in (0, 100); the top `100 - eta` percent are attended.
    pub eta: f64,
    /// Sigmoid compression `r`.
    pub r: f64,
    pub sparse_enabled: bool,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self {
            eta: 93.0,
            r: 20.0,
            sparse_enabled: true,
        }
    }
}

impl SparsityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 100.0) {
            return Err(Error::Config(format!(
                "eta must lie in (0, 100), got {}",
                self.eta
            )));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::Config(format!("r must be positive, got {}", self.r)));
        }
        Ok(())
    }

    /// Activation for a batch of confidence maps (threshold from the batch).
    pub fn activation_for<T: Real>(&self, maps: &[&[T]]) -> Result<Activation> {
        if self.sparse_enabled {
            Ok(Activation::Compressed {
                tau: batch_percentile_threshold(maps, self.eta)?,
                r: self.r,
            })
        } else {
            Ok(Activation::Plain)
        }
    }

    /// Single-image attention with a per-image threshold.
    pub fn attend(&self, confidence: &ConfidenceMap) -> Result<AttentionMap> {
        let act = self.activation_for(&[confidence.0.data()])?;
        Ok(act.apply_map(confidence))
    }
}

/// Number of pixels attended in an `hw`-pixel map: `ceil((100 - eta) * hw / 100)`,
/// kept within `[1, hw - 1]` so a threshold below the attended set exists.
pub fn attended_count(eta: f64, hw: usize) -> usize {
    let exact = (100.0 - eta) * hw as f64 / 100.0;
    // absorb representation error such as 7.000000000000001
    let k = (exact - 1e-9).ceil().max(1.0) as usize;
    k.min(hw.saturating_sub(1)).max(1)
}

/// Threshold of one map: the largest value outside its top
/// [`attended_count`] values, so exactly that many pixels lie strictly above
/// it when there are no ties.
pub fn map_percentile<T: Real>(values: &[T], eta: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Input("empty confidence map".into()));
    }
    if values.len() == 1 {
        return Ok(values[0].as_f64());
    }
    let k = attended_count(eta, values.len());
    let mut sorted: Vec<f64> = values.iter().map(|v| v.as_f64()).collect();
    let idx = sorted.len() - 1 - k;
    let (_, nth, _) = sorted.select_nth_unstable_by(idx, f64::total_cmp);
    Ok(*nth)
}

/// Mean over the batch of each map's percentile value. The result is a
/// constant with respect to differentiation.
pub fn batch_percentile_threshold<T: Real>(maps: &[&[T]], eta: f64) -> Result<f64> {
    if !(eta > 0.0 && eta < 100.0) {
        return Err(Error::Config(format!("eta must lie in (0, 100), got {eta}")));
    }
    if maps.is_empty() {
        return Err(Error::Input("empty confidence batch".into()));
    }
    let mut sum = 0.0;
    for m in maps {
        sum += map_percentile(m, eta)?;
    }
    Ok(sum / maps.len() as f64)
}

/// Batch threshold computed directly on a `[1, B, H, W]` tensor.
pub fn tensor_percentile_threshold<T: Real>(conf: &Tensor<T>, eta: f64) -> Result<f64> {
    let maps: Vec<&[T]> = (0..conf.batch()).map(|b| conf.plane(0, b)).collect();
    batch_percentile_threshold(&maps, eta)
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `1 / (1 + exp(-r (x - tau)))`
pub fn compressed_sigmoid(x: f64, tau: f64, r: f64) -> f64 {
    logistic(r * (x - tau))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Compressed { tau: f64, r: f64 },
    /// Plain logistic, used when sparsity is disabled.
    Plain,
}

impl Activation {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Activation::Compressed { tau, r } => compressed_sigmoid(x, tau, r),
            Activation::Plain => logistic(x),
        }
    }

    /// Derivative expressed through the activation output `y`.
    pub fn derivative_from_output(&self, y: f64) -> f64 {
        let slope = match *self {
            Activation::Compressed { r, .. } => r,
            Activation::Plain => 1.0,
        };
        slope * y * (1.0 - y)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.derivative_from_output(self.eval(x))
    }

    pub fn apply_tensor<T: Real>(&self, conf: &Tensor<T>) -> Tensor<T> {
        conf.map(|v| T::lit(self.eval(v.as_f64())))
    }

    /// Multiplies `grad` in place by the activation derivative.
    pub fn backward_tensor<T: Real>(&self, output: &Tensor<T>, grad: &mut Tensor<T>) {
        for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
            *g *= T::lit(self.derivative_from_output(y.as_f64()));
        }
    }

    /// Attention map of one image, kept strictly inside (0, 1).
    pub fn apply_map(&self, conf: &ConfidenceMap) -> AttentionMap {
        const EDGE: f64 = 1e-6;
        AttentionMap(
            conf.0
                .map(|&v| self.eval(v as f64).clamp(EDGE, 1.0 - EDGE) as f32),
        )
    }
}

/// `J[c] = A * I[c]` for one image.
pub fn apply_attention(image: &RgbImage, attention: &AttentionMap) -> Result<RgbImage> {
    if !image.same_shape(&attention.0) {
        return Err(Error::Input(format!(
            "attention {}x{} does not match image {}x{}",
            attention.0.height(),
            attention.0.width(),
            image.height(),
            image.width()
        )));
    }
    let data = image
        .data()
        .iter()
        .zip(attention.0.data())
        .map(|(p, &a)| [p[0] * a, p[1] * a, p[2] * a])
        .collect();
    Grid::from_vec(image.height(), image.width(), data)
}

/// Batched `J = A * I` on tensors (`A` is `[1, B, H, W]`, `I` is `[C, B, H, W]`).
pub fn apply_attention_tensor<T: Real>(images: &Tensor<T>, attention: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, n, h, w] = images.dims();
    if attention.dims() != [1, n, h, w] {
        return Err(Error::Input(format!(
            "attention dims {:?} do not match images {:?}",
            attention.dims(),
            images.dims()
        )));
    }
    let mut out = images.clone();
    for ch in 0..c {
        for b in 0..n {
            let a = attention.plane(0, b);
            for (v, &w) in out.plane_mut(ch, b).iter_mut().zip(a) {
                *v *= w;
            }
        }
    }
    Ok(out)
}

/// Gradient of `J = A * I` with respect to `A`: `sum_c dJ[c] * I[c]`.
pub fn attention_grad_from_attended<T: Real>(images: &Tensor<T>, d_attended: &Tensor<T>) -> Tensor<T> {
    let [c, n, h, w] = images.dims();
    let mut da = Tensor::zeros(1, n, h, w);
    for ch in 0..c {
        for b in 0..n {
            let img = images.plane(ch, b);
            let dj = d_attended.plane(ch, b);
            for ((g, &x), &d) in da.plane_mut(0, b).iter_mut().zip(img).zip(dj) {
                *g += x * d;
            }
        }
    }
    da
}
