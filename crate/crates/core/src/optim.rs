//! Adam optimiser over a fixed list of parameter arrays.

use ndarray::Zip;

use crate::autodiff::Array;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learn_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learn_rate: f64, beta1: f64, beta2: f64) -> Self {
        AdamConfig {
            learn_rate,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: i32,
    first: Vec<Array>,
    second: Vec<Array>,
}

impl Adam {
    /// Moment buffers are shaped after `params`.
    pub fn new(config: AdamConfig, params: &[&Array]) -> Self {
        let zeros: Vec<Array> = params.iter().map(|p| Array::zeros(p.raw_dim())).collect();
        Adam {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one bias-corrected update. `grads[i]` must match `params[i]`.
    pub fn update(&mut self, params: &mut [&mut Array], grads: &[Array]) {
        assert_eq!(params.len(), self.first.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let AdamConfig {
            learn_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= learn_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_learn_rate() {
        let mut p = array![[1.0, -1.0]];
        let mut adam = Adam::new(AdamConfig::new(0.1, 0.5, 0.9), &[&p]);
        adam.update(&mut [&mut p], &[array![[3.0, -0.5]]]);
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((p[[0, 0]] - 0.9).abs() < 1e-7);
        assert!((p[[0, 1]] + 0.9).abs() < 1e-7);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = array![[5.0]];
        let mut adam = Adam::new(AdamConfig::new(0.05, 0.9, 0.999), &[&p]);
        for _ in 0..2000 {
            let g = p.mapv(|x| 2.0 * (x - 2.0));
            adam.update(&mut [&mut p], &[g]);
        }
        assert!((p[[0, 0]] - 2.0).abs() < 1e-3);
    }
}
