use ndarray::{s, Array2};
use rand::Rng;

use super::ops::{softmax_backward, softmax_rows};
use super::{join, Linear, Param, Parameters};
use crate::real::Real;

/// Relative-time buckets: frame distances `0..TIME_BUCKETS-2` (the last of
/// them also covers every larger distance) plus one bucket for pairs where
/// either token has no frame.
pub const TIME_BUCKETS: usize = 6;
const UNTIMED: u8 = (TIME_BUCKETS - 1) as u8;

/// Initial offsets per bucket: same-frame pairs start favoured.
const LOCALITY_PRIOR: [f64; TIME_BUCKETS] = [3.0, 1.0, 0.0, 0.0, 0.0, 0.0];

/// Bucket index of every query/key pair of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeLayout {
    pub buckets: Array2<u8>,
}

impl TimeLayout {
    pub fn new(times: &[Option<usize>]) -> Self {
        let far = TIME_BUCKETS - 2;
        let buckets = Array2::from_shape_fn((times.len(), times.len()), |(i, j)| {
            match (times[i], times[j]) {
                (Some(a), Some(b)) => a.abs_diff(b).min(far) as u8,
                _ => UNTIMED,
            }
        });
        Self { buckets }
    }

    pub fn untimed(len: usize) -> Self {
        Self {
            buckets: Array2::from_elem((len, len), UNTIMED),
        }
    }

    pub fn len(&self) -> usize {
        self.buckets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Bidirectional multi-head self-attention with a learned per-head score
/// offset for each relative-time bucket.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention<R> {
    pub heads: usize,
    pub wq: Linear<R>,
    pub wk: Linear<R>,
    pub wv: Linear<R>,
    pub wo: Linear<R>,
    /// `heads × TIME_BUCKETS`.
    pub time_bias: Param<R>,
}

#[derive(Clone, Debug)]
pub struct SelfAttentionCache<R> {
    x: Array2<R>,
    q: Array2<R>,
    k: Array2<R>,
    v: Array2<R>,
    probs: Vec<Array2<R>>,
    concat: Array2<R>,
}

impl<R: Real> MultiHeadAttention<R> {
    pub fn new<G: Rng>(d: usize, heads: usize, rng: &mut G) -> Self {
        assert!(heads > 0 && d % heads == 0, "d must be divisible by heads");
        Self {
            heads,
            wq: Linear::new(d, d, rng),
            wk: Linear::without_bias(d, d, rng),
            wv: Linear::new(d, d, rng),
            wo: Linear::new(d, d, rng),
            time_bias: Param::new(
                Array2::from_shape_fn((heads, TIME_BUCKETS), |(_, b)| R::of(LOCALITY_PRIOR[b])),
                false,
            ),
        }
    }

    pub fn forward(&self, x: &Array2<R>, layout: &TimeLayout) -> (Array2<R>, SelfAttentionCache<R>) {
        let (len, d) = x.dim();
        assert_eq!(layout.len(), len, "time layout does not match the sequence");
        let dh = d / self.heads;
        let scale = R::of(1.0 / (dh as f64).sqrt());
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let mut concat = Array2::zeros((len, d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = q.slice(cols).dot(&k.slice(cols).t());
            let bias = self.time_bias.value.row(h);
            p.zip_mut_with(&layout.buckets, |v, &b| *v = *v * scale + bias[b as usize]);
            softmax_rows(&mut p);
            concat.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let y = self.wo.forward(&concat);
        (
            y,
            SelfAttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                concat,
            },
        )
    }

    pub fn backward(
        &mut self,
        cache: &SelfAttentionCache<R>,
        layout: &TimeLayout,
        dy: &Array2<R>,
    ) -> Array2<R> {
        let d = dy.ncols();
        let dh = d / self.heads;
        let scale = R::of(1.0 / (dh as f64).sqrt());
        let dconcat = self.wo.backward(&cache.concat, dy);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dout = dconcat.slice(cols);
            let dp = dout.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dout));
            let mut ds = softmax_backward(p, &dp);
            let mut dbias = [R::zero(); TIME_BUCKETS];
            ds.zip_mut_with(&layout.buckets, |g, &b| {
                dbias[b as usize] += *g;
                *g *= scale;
            });
            for (b, g) in dbias.iter().enumerate() {
                self.time_bias.grad[[h, b]] += *g;
            }
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let mut dx = self.wq.backward(&cache.x, &dq);
        dx += &self.wk.backward(&cache.x, &dk);
        dx += &self.wv.backward(&cache.x, &dv);
        dx
    }
}

impl<R: Real> Parameters<R> for MultiHeadAttention<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        self.wq.collect(&join(prefix, "wq"), out);
        self.wk.collect(&join(prefix, "wk"), out);
        self.wv.collect(&join(prefix, "wv"), out);
        self.wo.collect(&join(prefix, "wo"), out);
        out.push((join(prefix, "time_bias"), &self.time_bias));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        self.wq.collect_mut(&join(prefix, "wq"), out);
        self.wk.collect_mut(&join(prefix, "wk"), out);
        self.wv.collect_mut(&join(prefix, "wv"), out);
        self.wo.collect_mut(&join(prefix, "wo"), out);
        out.push((join(prefix, "time_bias"), &mut self.time_bias));
    }
}

/// Single-head cross-attention from learned latent queries into an input
/// sequence: `M = softmax(Q·(X·W_K)ᵀ/√d)`, `out = M·(X·W_V)`.
#[derive(Clone, Debug)]
pub struct CrossAttention<R> {
    pub queries: Param<R>,
    pub w_k: Param<R>,
    pub w_v: Param<R>,
}

/// Keys, values and the attention-weight matrix of one extraction.
#[derive(Clone, Debug)]
pub struct CrossAttentionCache<R> {
    pub input: Array2<R>,
    pub keys: Array2<R>,
    pub values: Array2<R>,
    pub weights: Array2<R>,
}

impl<R: Real> CrossAttention<R> {
    pub fn new<G: Rng>(n_queries: usize, d: usize, rng: &mut G) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            queries: Param::normal(n_queries, d, 1.0, true, rng),
            w_k: Param::normal(d, d, std, true, rng),
            w_v: Param::normal(d, d, std, true, rng),
        }
    }

    pub fn n_queries(&self) -> usize {
        self.queries.value.nrows()
    }

    pub fn forward(&self, input: &Array2<R>) -> (Array2<R>, CrossAttentionCache<R>) {
        let d = self.queries.value.ncols();
        let keys = input.dot(&self.w_k.value);
        let values = input.dot(&self.w_v.value);
        let mut weights = self.queries.value.dot(&keys.t());
        let scale = R::of(1.0 / (d as f64).sqrt());
        weights.mapv_inplace(|v| v * scale);
        softmax_rows(&mut weights);
        debug_assert!(weights
            .rows()
            .into_iter()
            .all(|r| (r.sum().f64() - 1.0).abs() < 1e-4 && r.iter().all(|&v| v >= R::zero())));
        let out = weights.dot(&values);
        (
            out,
            CrossAttentionCache {
                input: input.clone(),
                keys,
                values,
                weights,
            },
        )
    }

    /// Returns `dL/d input`.
    pub fn backward(&mut self, cache: &CrossAttentionCache<R>, dout: &Array2<R>) -> Array2<R> {
        let d = self.queries.value.ncols();
        let scale = R::of(1.0 / (d as f64).sqrt());
        let dm = dout.dot(&cache.values.t());
        let dvalues = cache.weights.t().dot(dout);
        let mut ds = softmax_backward(&cache.weights, &dm);
        ds.mapv_inplace(|v| v * scale);
        self.queries.grad += &ds.dot(&cache.keys);
        let dkeys = ds.t().dot(&self.queries.value);
        self.w_k.grad += &cache.input.t().dot(&dkeys);
        self.w_v.grad += &cache.input.t().dot(&dvalues);
        let mut dx = dkeys.dot(&self.w_k.value.t());
        dx += &dvalues.dot(&self.w_v.value.t());
        dx
    }
}

impl<R: Real> Parameters<R> for CrossAttention<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        out.push((join(prefix, "queries"), &self.queries));
        out.push((join(prefix, "w_k"), &self.w_k));
        out.push((join(prefix, "w_v"), &self.w_v));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        out.push((join(prefix, "queries"), &mut self.queries));
        out.push((join(prefix, "w_k"), &mut self.w_k));
        out.push((join(prefix, "w_v"), &mut self.w_v));
    }
}
