//! Adam with decoupled weight decay.

use ndarray::Array2;

use crate::nn::Parameters;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied directly to parameters flagged for decay, scaled by `lr`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<R> {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Array2<R>>,
    v: Vec<Array2<R>>,
}

impl<R: Real> AdamW<R> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update from the accumulated gradients. Gradients are left intact.
    pub fn step<P: Parameters<R> + ?Sized>(&mut self, model: &mut P) {
        let params = model.named_params_mut();
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| Array2::zeros(p.value.raw_dim())).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed between steps");
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (R::of(c.beta1), R::of(c.beta2));
        let (ob1, ob2) = (R::of(1.0 - c.beta1), R::of(1.0 - c.beta2));
        let step = R::of(c.lr / bc1);
        let inv_bc2 = R::of(1.0 / bc2);
        let eps = R::of(c.eps);
        let shrink = R::of(1.0 - c.lr * c.weight_decay);
        for ((_, p), (m, v)) in params.into_iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if p.decay && c.weight_decay != 0.0 {
                p.value.mapv_inplace(|x| x * shrink);
            }
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|x, &g, m, v| {
                    *m = b1 * *m + ob1 * g;
                    *v = b2 * *v + ob2 * g * g;
                    *x -= step * *m / ((*v * inv_bc2).sqrt() + eps);
                });
        }
    }
}
