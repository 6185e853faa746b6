use super::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    step: u64,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient group mismatch");
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let decay = T::lit(1.0 - c.learning_rate * c.weight_decay);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.learning_rate / bias1);
        let inv_bias2_sqrt = T::lit(1.0 / bias2.sqrt());
        let eps = T::lit(c.eps);

        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *p *= decay;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v).sqrt() * inv_bias2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> AdamWConfig {
        AdamWConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }

    #[test]
    fn zero_gradient_step_only_shrinks() {
        let mut opt = AdamW::<f64>::new(config());
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.0; 3];
        opt.step(vec![&mut p], vec![&g]);
        let f = 1.0 - 2e-4 * 1e-4;
        assert_eq!(p, vec![f, -2.0 * f, 0.5 * f]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            weight_decay: 0.0,
            ..config()
        });
        let mut p = vec![0.0, 0.0];
        let g = vec![3.0, -0.1];
        opt.step(vec![&mut p], vec![&g]);
        assert!((p[0] + 2e-4).abs() < 1e-9);
        assert!((p[1] - 2e-4).abs() < 1e-9);
    }
}
