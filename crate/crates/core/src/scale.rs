//! Magnification classifier and the pretext negative log-likelihood.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{LEAKY_SLOPE, MIN_INPUT_SIZE};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, leaky_relu_backward, leaky_relu_inplace, Conv2d,
    ConvCache, ConvSpec, Linear, Parameterized, Real, Tensor,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalePreset {
    /// Stem, three residual blocks and a linear head: 8 weight layers.
    #[default]
    Desk,
    /// 34 weight layers in four stages of 3, 4, 6 and 3 residual blocks.
    Resnet34,
}

struct StageSpec {
    channels: usize,
    blocks: usize,
    stride: usize,
}

impl ScalePreset {
    fn stem(self) -> ConvSpec {
        match self {
            ScalePreset::Desk => ConvSpec::strided(3, 16, 3, 2, 1),
            ScalePreset::Resnet34 => ConvSpec::strided(3, 64, 7, 2, 3),
        }
    }

    fn stages(self) -> Vec<StageSpec> {
        let s = |channels, blocks, stride| StageSpec {
            channels,
            blocks,
            stride,
        };
        match self {
            ScalePreset::Desk => vec![s(16, 1, 1), s(32, 1, 2), s(64, 1, 2)],
            // the first stage downsamples in place of a max-pool
            ScalePreset::Resnet34 => vec![s(64, 3, 2), s(128, 4, 2), s(256, 6, 2), s(512, 3, 2)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ResidualBlock<T> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    projection: Option<Conv2d<T>>,
}

struct BlockCache<T> {
    conv1: ConvCache<T>,
    act1: Tensor<T>,
    conv2: ConvCache<T>,
    projection: Option<ConvCache<T>>,
    out: Tensor<T>,
}

impl<T: Real> ResidualBlock<T> {
    fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let conv1 = Conv2d::new(ConvSpec::strided(in_ch, out_ch, 3, stride, 1), rng);
        // residual branch starts at zero so every block is initially an identity map
        let conv2 = Conv2d::zeros(ConvSpec::strided(out_ch, out_ch, 3, 1, 1));
        let projection = (stride != 1 || in_ch != out_ch)
            .then(|| Conv2d::new(ConvSpec::strided(in_ch, out_ch, 1, stride, 0), rng));
        Self {
            conv1,
            conv2,
            projection,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv1: Conv2d::zeros(self.conv1.spec()),
            conv2: Conv2d::zeros(self.conv2.spec()),
            projection: self.projection.as_ref().map(|p| Conv2d::zeros(p.spec())),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let slope = T::lit(LEAKY_SLOPE);
        let (mut h, c1) = self.conv1.forward(x)?;
        leaky_relu_inplace(h.data_mut(), slope);
        let (mut y, c2) = self.conv2.forward(&h)?;
        let projection = match &self.projection {
            Some(p) => {
                let (s, cp) = p.forward(x)?;
                y.data_mut().iter_mut().zip(s.data()).for_each(|(a, &b)| *a += b);
                Some(cp)
            }
            None => {
                y.data_mut().iter_mut().zip(x.data()).for_each(|(a, &b)| *a += b);
                None
            }
        };
        leaky_relu_inplace(y.data_mut(), slope);
        Ok((
            y.clone(),
            BlockCache {
                conv1: c1,
                act1: h,
                conv2: c2,
                projection,
                out: y,
            },
        ))
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let slope = T::lit(LEAKY_SLOPE);
        let mut h = self.conv1.infer(x)?;
        leaky_relu_inplace(h.data_mut(), slope);
        let mut y = self.conv2.infer(&h)?;
        let shortcut = match &self.projection {
            Some(p) => p.infer(x)?,
            None => x.clone(),
        };
        y.data_mut().iter_mut().zip(shortcut.data()).for_each(|(a, &b)| *a += b);
        leaky_relu_inplace(y.data_mut(), slope);
        Ok(y)
    }

    fn backward(&self, cache: &BlockCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Tensor<T> {
        let slope = T::lit(LEAKY_SLOPE);
        let mut g = dy.clone();
        leaky_relu_backward(cache.out.data(), g.data_mut(), slope);
        let mut dh = self.conv2.backward(&cache.conv2, &g, &mut grad.conv2);
        leaky_relu_backward(cache.act1.data(), dh.data_mut(), slope);
        let mut dx = self.conv1.backward(&cache.conv1, &dh, &mut grad.conv1);
        match (&self.projection, &cache.projection, &mut grad.projection) {
            (Some(p), Some(cp), Some(gp)) => {
                let ds = p.backward(cp, &g, gp);
                dx.data_mut().iter_mut().zip(ds.data()).for_each(|(a, &b)| *a += b);
            }
            _ => dx.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
        }
        dx
    }

    fn params(&self) -> Vec<&[T]> {
        let mut v = self.conv1.params();
        v.extend(self.conv2.params());
        if let Some(p) = &self.projection {
            v.extend(p.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        if let Some(p) = &mut self.projection {
            v.extend(p.params_mut());
        }
        v
    }
}

/// Residual convolutional classifier with global average pooling, so any
/// input of at least [`MIN_INPUT_SIZE`] pixels per side is accepted.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleNet<T> {
    stem: Conv2d<T>,
    blocks: Vec<ResidualBlock<T>>,
    head: Linear<T>,
}

pub struct ScaleCache<T> {
    stem: ConvCache<T>,
    stem_out: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    pooled: Vec<T>,
    final_dims: [usize; 4],
}

impl<T: Real> ScaleNet<T> {
    pub fn new(preset: ScalePreset, num_classes: usize, rng: &mut impl Rng) -> Self {
        let stem = Conv2d::new(preset.stem(), rng);
        let mut ch = preset.stem().out_channels;
        let mut blocks = Vec::new();
        for stage in preset.stages() {
            for i in 0..stage.blocks {
                let stride = if i == 0 { stage.stride } else { 1 };
                blocks.push(ResidualBlock::new(ch, stage.channels, stride, rng));
                ch = stage.channels;
            }
        }
        Self {
            stem,
            blocks,
            head: Linear::new(ch, num_classes, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_features()
    }

    /// Count of convolution and linear layers on the main path.
    pub fn depth(&self) -> usize {
        1 + 2 * self.blocks.len() + 1
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stem: Conv2d::zeros(self.stem.spec()),
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
            head: Linear::zeros(self.head.in_features(), self.head.out_features()),
        }
    }

    pub fn zero_head(&mut self) {
        self.head.fill_zero();
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != 3 {
            return Err(Error::Input(format!(
                "scale network expects 3 channels, got {}",
                x.channels()
            )));
        }
        if x.height() < MIN_INPUT_SIZE || x.width() < MIN_INPUT_SIZE {
            return Err(Error::Input(format!(
                "scale network input {}x{} is below the {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE} minimum",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    /// Returns scores as `[class][batch]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Vec<T>, ScaleCache<T>)> {
        self.check_input(x)?;
        let (mut h, stem_cache) = self.stem.forward(x)?;
        leaky_relu_inplace(h.data_mut(), T::lit(LEAKY_SLOPE));
        let stem_out = h.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&h)?;
            caches.push(c);
            h = y;
        }
        let pooled = global_avg_pool(&h);
        let scores = self.head.forward(&pooled, x.batch());
        Ok((
            scores,
            ScaleCache {
                stem: stem_cache,
                stem_out,
                blocks: caches,
                pooled,
                final_dims: h.dims(),
            },
        ))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut h = self.stem.infer(x)?;
        leaky_relu_inplace(h.data_mut(), T::lit(LEAKY_SLOPE));
        for block in &self.blocks {
            h = block.infer(&h)?;
        }
        Ok(self.head.forward(&global_avg_pool(&h), x.batch()))
    }

    /// Accumulates gradients into `grads`; returns the gradient with respect
    /// to the attended input.
    pub fn backward(&self, cache: &ScaleCache<T>, d_scores: &[T], grads: &mut ScaleNet<T>) -> Tensor<T> {
        let batch = cache.final_dims[1];
        let dpooled = self
            .head
            .backward(&cache.pooled, d_scores, batch, &mut grads.head);
        let mut g = global_avg_pool_backward(cache.final_dims, &dpooled);
        for ((block, c), gb) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grads.blocks.iter_mut())
            .rev()
        {
            g = block.backward(c, &g, gb);
        }
        leaky_relu_backward(cache.stem_out.data(), g.data_mut(), T::lit(LEAKY_SLOPE));
        self.stem.backward(&cache.stem, &g, &mut grads.stem)
    }
}

impl<T> Parameterized<T> for ScaleNet<T>
where
    T: Real,
{
    fn params(&self) -> Vec<&[T]> {
        let mut v = self.stem.params();
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.stem.params_mut();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}

/// Scores of one image and their softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleScores {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ScaleScores {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let probabilities = softmax(&scores);
        Self {
            scores,
            probabilities,
        }
    }

    pub fn predicted(&self) -> usize {
        self.scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(scores);
    scores.iter().map(|s| (s - lse).exp()).collect()
}

/// `-log softmax(scores)[label]`.
pub fn scale_loss(scores: &[f64], label: usize) -> Result<f64> {
    if label >= scores.len() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            scores.len()
        )));
    }
    Ok((log_sum_exp(scores) - scores[label]).max(0.0))
}

/// `softmax(scores) - onehot(label)`.
pub fn scale_loss_grad(scores: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= scores.len() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            scores.len()
        )));
    }
    let mut g = softmax(scores);
    g[label] -= 1.0;
    Ok(g)
}

/// Scores for one attended image.
pub fn scale_forward<T: Real>(attended: &Tensor<T>, net: &ScaleNet<T>) -> Result<ScaleScores> {
    if attended.batch() != 1 {
        return Err(Error::Input("scale_forward takes a single image".into()));
    }
    let s = net.infer(attended)?;
    Ok(ScaleScores::from_scores(s.iter().map(|v| v.as_f64()).collect()))
}

/// Mean NLL over a batch of `[class][batch]` scores, with its gradient.
pub fn batch_scale_loss<T: Real>(scores: &[T], labels: &[usize], classes: usize) -> Result<(f64, Vec<T>)> {
    let batch = labels.len();
    let mut total = 0.0;
    let mut grad = vec![T::zero(); scores.len()];
    for (b, &label) in labels.iter().enumerate() {
        let s: Vec<f64> = (0..classes).map(|c| scores[c * batch + b].as_f64()).collect();
        total += scale_loss(&s, label)?;
        for (c, g) in scale_loss_grad(&s, label)?.into_iter().enumerate() {
            grad[c * batch + b] = T::lit(g / batch as f64);
        }
    }
    Ok((total / batch as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        let p = softmax(&[10.0, 0.0, 0.0]);
        assert!((p[0] - 0.99991).abs() < 1e-5);
    }

    #[test]
    fn loss_cases() {
        assert!((scale_loss(&[1.0, 1.0, 1.0], 2).unwrap() - 3f64.ln()).abs() < 1e-12);
        let expected = (1.0 + 2.0 * (-2f64).exp()).ln();
        assert!((scale_loss(&[2.0, 0.0, 0.0], 0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.2395).abs() < 1e-4);
        assert!(scale_loss(&[800.0, 0.0, 0.0], 0).unwrap() < 1e-12);
        assert!(matches!(scale_loss(&[0.0; 3], 3), Err(Error::Input(_))));
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = ScaleNet::<f32>::new(ScalePreset::Desk, 3, &mut rng);
        net.zero_head();
        let x = Tensor::from_vec([3, 1, 64, 64], (0..3 * 64 * 64).map(|i| (i % 13) as f32 / 13.0).collect())
            .unwrap();
        let s = scale_forward(&x, &net).unwrap();
        for p in s.probabilities {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn presets_have_expected_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(ScaleNet::<f32>::new(ScalePreset::Desk, 3, &mut rng).depth(), 8);
        assert_eq!(ScaleNet::<f32>::new(ScalePreset::Resnet34, 3, &mut rng).depth(), 34);
    }

    #[test]
    fn undersized_input_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = ScaleNet::<f32>::new(ScalePreset::Desk, 3, &mut rng);
        let x = Tensor::zeros(3, 1, 48, 64);
        assert!(matches!(scale_forward(&x, &net), Err(Error::Input(_))));
    }

    #[test]
    fn network_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = ScaleNet::<f64>::new(ScalePreset::Desk, 3, &mut rng);
        // give the zero-initialized residual branches some weight
        for p in net.params_mut() {
            for v in p.iter_mut() {
                if *v == 0.0 {
                    *v = rng.gen_range(-0.05..0.05);
                }
            }
        }
        let x = Tensor::from_vec([3, 2, 64, 64], (0..2 * 3 * 64 * 64).map(|_| rng.gen()).collect()).unwrap();
        let labels = [0usize, 2];
        let loss = |n: &ScaleNet<f64>, x: &Tensor<f64>| {
            batch_scale_loss(&n.infer(x).unwrap(), &labels, 3).unwrap().0
        };
        let (scores, cache) = net.forward(&x).unwrap();
        let (_, ds) = batch_scale_loss(&scores, &labels, 3).unwrap();
        let mut grads = net.zeros_like();
        let dx = net.backward(&cache, &ds, &mut grads);
        // small enough that probes rarely straddle a leaky-relu kink
        let eps = 1e-7;
        let n_groups = net.params().len();
        for gi in 0..n_groups {
            let len = net.params()[gi].len();
            for idx in [0, len / 2, len - 1] {
                let mut p = net.clone();
                p.params_mut()[gi][idx] += eps;
                let mut m = net.clone();
                m.params_mut()[gi][idx] -= eps;
                let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
                let an = grads.params()[gi][idx];
                assert!((fd - an).abs() <= 1e-6 + 1e-4 * fd.abs(), "group {gi} idx {idx}: {fd} vs {an}");
            }
        }
        for idx in [5usize, 4000, 20000] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * eps);
            assert!((fd - dx.data()[idx]).abs() <= 1e-7 + 1e-4 * fd.abs());
        }
    }
}
