//! Layers with explicit forward caches and hand-derived backward passes.
//!
//! Forward passes borrow parameters immutably and return a cache; backward
//! passes accumulate into each [`Param`]'s gradient buffer.

mod attention;
mod linear;
mod norm;
pub mod ops;
mod transformer;

pub use attention::{
    CrossAttention, CrossAttentionCache, MultiHeadAttention, SelfAttentionCache, TimeLayout,
    TIME_BUCKETS,
};
pub use linear::Linear;
pub use norm::{LayerNorm, LayerNormCache};
pub use transformer::{Block, BlockCache, FeedForward, Stack, StackCache};

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<R> {
    pub value: Array2<R>,
    pub grad: Array2<R>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl<R: Real> Param<R> {
    pub fn new(value: Array2<R>, decay: bool) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad, decay }
    }

    pub fn normal<G: Rng>(rows: usize, cols: usize, std: f64, decay: bool, rng: &mut G) -> Self {
        let value = Array2::from_shape_simple_fn((rows, cols), || {
            R::of(std * rng.sample::<f64, _>(StandardNormal))
        });
        Self::new(value, decay)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::new(Array2::from_elem((rows, cols), R::of(v)), false)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(R::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Adds `g` into gradient row `row`.
    pub fn scatter_row(&mut self, row: usize, g: ArrayView1<R>) {
        let mut dst = self.grad.row_mut(row);
        dst += &g;
    }
}

/// Named parameter traversal, used by the optimizer, checkpoints and
/// gradient checks. Names are `/`-separated paths.
pub trait Parameters<R: Real> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>);

    fn named_params(&self) -> Vec<(String, &Param<R>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// Sum over rows as a 1×n matrix.
pub(crate) fn row_sum<R: Real>(x: &Array2<R>) -> Array2<R> {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}
