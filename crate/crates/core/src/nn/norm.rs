use ndarray::{Array1, Array2, Zip};

use super::{join, row_sum, Param, Parameters};
use crate::real::Real;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm<R> {
    pub gamma: Param<R>,
    pub beta: Param<R>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<R> {
    xhat: Array2<R>,
    inv_std: Array1<R>,
}

impl<R: Real> LayerNorm<R> {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Param::filled(1, d, 1.0),
            beta: Param::filled(1, d, 0.0),
        }
    }

    pub fn forward(&self, x: &Array2<R>) -> (Array2<R>, LayerNormCache<R>) {
        let d = R::of(x.ncols() as f64);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        Zip::from(xhat.rows_mut())
            .and(&mut inv_std)
            .for_each(|mut row, s| {
                let mean = row.sum() / d;
                row.mapv_inplace(|v| v - mean);
                let var = row.iter().map(|&v| v * v).sum::<R>() / d;
                let inv = R::one() / (var + R::of(LN_EPS)).sqrt();
                row.mapv_inplace(|v| v * inv);
                *s = inv;
            });
        let mut y = &xhat * &self.gamma.value;
        y += &self.beta.value;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<R>, dy: &Array2<R>) -> Array2<R> {
        self.gamma.grad += &row_sum(&(dy * &cache.xhat));
        self.beta.grad += &row_sum(dy);
        let dxhat = dy * &self.gamma.value;
        let d = R::of(dy.ncols() as f64);
        let mut dx = Array2::zeros(dy.raw_dim());
        Zip::from(dx.rows_mut())
            .and(dxhat.rows())
            .and(cache.xhat.rows())
            .and(&cache.inv_std)
            .for_each(|mut out, g, xh, &inv| {
                let sum_g = g.sum();
                let sum_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<R>();
                Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| {
                    *o = inv / d * (d * gi - sum_g - xi * sum_gx);
                });
            });
        dx
    }
}

impl<R: Real> Parameters<R> for LayerNorm<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}
