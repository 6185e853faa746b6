use rand::Rng;

use super::{Parameterized, Real, Tensor};

pub fn leaky_relu_inplace<T: Real>(data: &mut [T], slope: T) {
    for v in data {
        if *v < T::zero() {
            *v *= slope;
        }
    }
}

/// Scales `grad` in place by the leaky-ReLU derivative, read off the
/// activation output (its sign matches the input's for positive slopes).
pub fn leaky_relu_backward<T: Real>(output: &[T], grad: &mut [T], slope: T) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y < T::zero() {
            *g *= slope;
        }
    }
}

/// `[C, B, H, W] -> [C][B]` spatial mean.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let hw = T::lit(x.plane_len() as f64);
    x.data()
        .chunks(x.plane_len())
        .map(|p| p.iter().copied().sum::<T>() / hw)
        .collect()
}

pub fn global_avg_pool_backward<T: Real>(dims: [usize; 4], dpooled: &[T]) -> Tensor<T> {
    let mut dx = Tensor::zeros(dims[0], dims[1], dims[2], dims[3]);
    let hw = dx.plane_len();
    let scale = T::lit(hw as f64).recip();
    for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(dpooled) {
        plane.fill(g * scale);
    }
    dx
}

/// Fully connected layer acting on `[in_features][batch]` column blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[out][in]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    in_features: usize,
    out_features: usize,
}

impl<T: Real> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Self {
            weight: (0..in_features * out_features)
                .map(|_| T::lit(rng.gen_range(-bound..bound)))
                .collect(),
            bias: vec![T::zero(); out_features],
            in_features,
            out_features,
        }
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            weight: vec![T::zero(); in_features * out_features],
            bias: vec![T::zero(); out_features],
            in_features,
            out_features,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    /// `x` is `[in][batch]`; returns `[out][batch]`.
    pub fn forward(&self, x: &[T], batch: usize) -> Vec<T> {
        let mut y = vec![T::zero(); self.out_features * batch];
        T::gemm(
            self.out_features,
            self.in_features,
            batch,
            T::one(),
            &self.weight,
            (self.in_features, 1),
            x,
            (batch, 1),
            T::zero(),
            &mut y,
            (batch, 1),
        );
        for (row, &b) in y.chunks_mut(batch).zip(&self.bias) {
            row.iter_mut().for_each(|v| *v += b);
        }
        y
    }

    pub fn backward(&self, x: &[T], dy: &[T], batch: usize, grad: &mut Linear<T>) -> Vec<T> {
        T::gemm(
            self.out_features,
            batch,
            self.in_features,
            T::one(),
            dy,
            (batch, 1),
            x,
            (1, batch),
            T::one(),
            &mut grad.weight,
            (self.in_features, 1),
        );
        for (gb, row) in grad.bias.iter_mut().zip(dy.chunks(batch)) {
            *gb += row.iter().copied().sum::<T>();
        }
        let mut dx = vec![T::zero(); self.in_features * batch];
        T::gemm(
            self.in_features,
            self.out_features,
            batch,
            T::one(),
            &self.weight,
            (1, self.in_features),
            dy,
            (batch, 1),
            T::zero(),
            &mut dx,
            (batch, 1),
        );
        dx
    }
}

impl<T> Parameterized<T> for Linear<T> {
    fn params(&self) -> Vec<&[T]> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        vec![&mut self.weight, &mut self.bias]
    }
}
