//! Contrastive log-ratio upper bound on mutual information, with a learned
//! diagonal-Gaussian conditional `q(y | x)`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{invalid, Result};
use crate::nn::{join, Linear, Param, Parameters};
use crate::optim::{AdamConfig, AdamW};
use crate::real::Real;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Mean over the token axis.
pub fn pool_tokens<R: Real>(tokens: &Array2<R>) -> Result<Array1<R>> {
    if tokens.nrows() == 0 {
        return invalid("cannot pool an empty token set");
    }
    Ok(tokens.mean_axis(Axis(0)).expect("non-empty"))
}

/// `x ↦ (μ, log σ²)` through one tanh hidden layer.
#[derive(Clone, Debug)]
pub struct ConditionalModel<R> {
    pub hidden: Linear<R>,
    pub mean: Linear<R>,
    pub logvar: Linear<R>,
}

#[derive(Clone, Debug)]
pub struct ConditionalCache<R> {
    x: Array2<R>,
    h: Array2<R>,
    /// Unclamped log-variance; the clamp has zero gradient outside its range.
    raw_logvar: Array2<R>,
}

impl<R: Real> ConditionalModel<R> {
    pub fn new<G: Rng>(x_dim: usize, y_dim: usize, hidden: usize, rng: &mut G) -> Self {
        let mut logvar = Linear::new(hidden, y_dim, rng);
        // Start near unit variance.
        logvar.w.value.mapv_inplace(|v| v * R::of(0.1));
        Self {
            hidden: Linear::new(x_dim, hidden, rng),
            mean: Linear::new(hidden, y_dim, rng),
            logvar,
        }
    }

    pub fn forward(&self, x: &Array2<R>) -> (Array2<R>, Array2<R>, ConditionalCache<R>) {
        let h = self.hidden.forward(x).mapv(|v| v.tanh());
        let mu = self.mean.forward(&h);
        let raw_logvar = self.logvar.forward(&h);
        let (lo, hi) = (R::of(LOGVAR_MIN), R::of(LOGVAR_MAX));
        let lv = raw_logvar.mapv(|v| v.max(lo).min(hi));
        (
            mu,
            lv,
            ConditionalCache {
                x: x.clone(),
                h,
                raw_logvar,
            },
        )
    }

    /// Accumulates parameter gradients; returns `dL/dx`.
    pub fn backward(
        &mut self,
        cache: &ConditionalCache<R>,
        dmu: &Array2<R>,
        dlogvar: &Array2<R>,
    ) -> Array2<R> {
        let (lo, hi) = (R::of(LOGVAR_MIN), R::of(LOGVAR_MAX));
        let mut dlv = dlogvar.clone();
        dlv.zip_mut_with(&cache.raw_logvar, |g, &raw| {
            if raw < lo || raw > hi {
                *g = R::zero();
            }
        });
        let mut dh = self.mean.backward(&cache.h, dmu);
        dh += &self.logvar.backward(&cache.h, &dlv);
        dh.zip_mut_with(&cache.h, |g, &h| *g *= R::one() - h * h);
        self.hidden.backward(&cache.x, &dh)
    }

    /// `L[i][j] = log q(y_j | x_i)`.
    pub fn log_density_matrix(&self, x: &Array2<R>, y: &Array2<R>) -> Array2<f64> {
        let (mu, lv, _) = self.forward(x);
        pair_log_density(&mu, &lv, y)
    }
}

fn pair_log_density<R: Real>(mu: &Array2<R>, lv: &Array2<R>, y: &Array2<R>) -> Array2<f64> {
    let b = mu.nrows();
    let dim = mu.ncols();
    let mut out = Array2::zeros((b, y.nrows()));
    for i in 0..b {
        for j in 0..y.nrows() {
            let mut acc = 0.0;
            for k in 0..dim {
                let diff = y[[j, k]].f64() - mu[[i, k]].f64();
                let l = lv[[i, k]].f64();
                acc += diff * diff * (-l).exp() + l + LN_2PI;
            }
            out[[i, j]] = -0.5 * acc;
        }
    }
    out
}

impl<R: Real> Parameters<R> for ConditionalModel<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        self.hidden.collect(&join(prefix, "hidden"), out);
        self.mean.collect(&join(prefix, "mean"), out);
        self.logvar.collect(&join(prefix, "logvar"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        self.hidden.collect_mut(&join(prefix, "hidden"), out);
        self.mean.collect_mut(&join(prefix, "mean"), out);
        self.logvar.collect_mut(&join(prefix, "logvar"), out);
    }
}

fn check_batch<R>(x: &Array2<R>, y: &Array2<R>) -> Result<()> {
    if x.nrows() < 2 {
        return invalid(format!("CLUB needs a batch of at least 2, got {}", x.nrows()));
    }
    if x.nrows() != y.nrows() {
        return invalid("x and y batches differ in size");
    }
    Ok(())
}

/// `(1/B)Σᵢ log q(yᵢ|xᵢ) − (1/B²)ΣᵢΣⱼ log q(yⱼ|xᵢ)`, summed as
/// `(1/B²)ΣᵢΣⱼ [log q(yᵢ|xᵢ) − log q(yⱼ|xᵢ)]` so identical `y` give exactly 0.
pub fn club_estimate<R: Real>(
    x: &Array2<R>,
    y: &Array2<R>,
    q: &ConditionalModel<R>,
) -> Result<f64> {
    check_batch(x, y)?;
    Ok(contrast(&q.log_density_matrix(x, y)))
}

fn contrast(l: &Array2<f64>) -> f64 {
    let b = l.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let pos = l[[i, i]];
        for j in 0..b {
            total += pos - l[[i, j]];
        }
    }
    total / (b * b) as f64
}

/// Estimate with gradients. `dvalue` scales everything; gradients w.r.t. the
/// conditional's parameters are accumulated, and `(dx, dy)` returned.
pub fn club_backward<R: Real>(
    x: &Array2<R>,
    y: &Array2<R>,
    q: &mut ConditionalModel<R>,
    dvalue: f64,
) -> Result<(f64, Array2<R>, Array2<R>)> {
    check_batch(x, y)?;
    let (mu, lv, cache) = q.forward(x);
    let value = contrast(&pair_log_density(&mu, &lv, y));
    let b = x.nrows();
    let dim = y.ncols();
    let bf = b as f64;
    let mut dmu = Array2::zeros(mu.raw_dim());
    let mut dlv = Array2::zeros(lv.raw_dim());
    let mut dy = Array2::zeros(y.raw_dim());
    for i in 0..b {
        for j in 0..b {
            // d value / d log q(y_j | x_i)
            let w = dvalue * (if i == j { 1.0 / bf } else { 0.0 } - 1.0 / (bf * bf));
            if w == 0.0 {
                continue;
            }
            for k in 0..dim {
                let prec = (-lv[[i, k]].f64()).exp();
                let diff = y[[j, k]].f64() - mu[[i, k]].f64();
                dmu[[i, k]] += R::of(w * diff * prec);
                dlv[[i, k]] += R::of(w * 0.5 * (diff * diff * prec - 1.0));
                dy[[j, k]] -= R::of(w * diff * prec);
            }
        }
    }
    let dx = q.backward(&cache, &dmu, &dlv);
    Ok((value, dx, dy))
}

/// Mean negative log-likelihood of the positive pairs, and its gradients
/// accumulated into `q`.
pub fn nll_backward<R: Real>(x: &Array2<R>, y: &Array2<R>, q: &mut ConditionalModel<R>) -> f64 {
    let (mu, lv, cache) = q.forward(x);
    let b = x.nrows() as f64;
    let mut nll = 0.0;
    let mut dmu = Array2::zeros(mu.raw_dim());
    let mut dlv = Array2::zeros(lv.raw_dim());
    for ((i, k), &m) in mu.indexed_iter() {
        let l = lv[[i, k]].f64();
        let prec = (-l).exp();
        let diff = y[[i, k]].f64() - m.f64();
        nll += 0.5 * (diff * diff * prec + l + LN_2PI);
        dmu[[i, k]] = R::of(-diff * prec / b);
        dlv[[i, k]] = R::of(0.5 * (1.0 - diff * diff * prec) / b);
    }
    q.backward(&cache, &dmu, &dlv);
    nll / b
}

/// The conditional together with its own optimizer.
#[derive(Clone, Debug)]
pub struct ClubEstimator<R> {
    pub q: ConditionalModel<R>,
    pub opt: AdamW<R>,
}

impl<R: Real> ClubEstimator<R> {
    pub fn new<G: Rng>(dim: usize, hidden: usize, lr: f64, rng: &mut G) -> Self {
        Self {
            q: ConditionalModel::new(dim, dim, hidden, rng),
            opt: AdamW::new(AdamConfig {
                lr,
                weight_decay: 0.0,
                ..AdamConfig::default()
            }),
        }
    }

    pub fn estimate(&self, x: &Array2<R>, y: &Array2<R>) -> Result<f64> {
        club_estimate(x, y, &self.q)
    }

    /// One maximum-likelihood step; returns the NLL before the step.
    pub fn fit_conditional_step(&mut self, x: &Array2<R>, y: &Array2<R>) -> Result<f64> {
        if x.nrows() == 0 || x.nrows() != y.nrows() {
            return invalid("fit step needs a non-empty paired batch");
        }
        self.q.zero_grad();
        let nll = nll_backward(x, y, &mut self.q);
        self.opt.step(&mut self.q);
        self.q.zero_grad();
        Ok(nll)
    }
}
