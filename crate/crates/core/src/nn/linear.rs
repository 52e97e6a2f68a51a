use ndarray::linalg::general_mat_mul;
use ndarray::Array2;
use rand::Rng;

use super::{join, row_sum, Param, Parameters};
use crate::real::Real;

/// `y = x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear<R> {
    pub w: Param<R>,
    pub b: Option<Param<R>>,
}

impl<R: Real> Linear<R> {
    pub fn new<G: Rng>(input: usize, output: usize, rng: &mut G) -> Self {
        Self {
            w: Param::normal(input, output, 1.0 / (input as f64).sqrt(), true, rng),
            b: Some(Param::filled(1, output, 0.0)),
        }
    }

    /// For projections whose bias would be a no-op (e.g. attention keys,
    /// where a shared offset cancels in the softmax).
    pub fn without_bias<G: Rng>(input: usize, output: usize, rng: &mut G) -> Self {
        Self {
            w: Param::normal(input, output, 1.0 / (input as f64).sqrt(), true, rng),
            b: None,
        }
    }

    pub fn forward(&self, x: &Array2<R>) -> Array2<R> {
        let mut y = x.dot(&self.w.value);
        if let Some(b) = &self.b {
            y += &b.value;
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Array2<R>, dy: &Array2<R>) -> Array2<R> {
        general_mat_mul(R::one(), &x.t(), dy, R::one(), &mut self.w.grad);
        if let Some(b) = &mut self.b {
            b.grad += &row_sum(dy);
        }
        dy.dot(&self.w.value.t())
    }
}

impl<R: Real> Parameters<R> for Linear<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        out.push((join(prefix, "w"), &self.w));
        if let Some(b) = &self.b {
            out.push((join(prefix, "b"), b));
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        out.push((join(prefix, "w"), &mut self.w));
        if let Some(b) = &mut self.b {
            out.push((join(prefix, "b"), b));
        }
    }
}
