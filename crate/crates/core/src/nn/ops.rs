use ndarray::{Array2, Zip};

use crate::real::Real;

/// Numerically stable softmax applied to each row in place.
pub fn softmax_rows<R: Real>(x: &mut Array2<R>) {
    for mut row in x.rows_mut() {
        match row.as_slice_mut() {
            Some(v) => softmax_slice(v),
            None => {
                let mut v = row.to_vec();
                softmax_slice(&mut v);
                row.iter_mut().zip(v).for_each(|(d, s)| *d = s);
            }
        }
    }
}

fn softmax_slice<R: Real>(v: &mut [R]) {
    let max = lanes_fold(v, R::neg_infinity(), |a, b| if b > a { b } else { a });
    for e in v.iter_mut() {
        *e = (*e - max).fast_exp();
    }
    let inv = R::one() / lanes_fold(v, R::zero(), |a, b| a + b);
    for e in v.iter_mut() {
        *e *= inv;
    }
}

/// Reduction with eight independent accumulators so it vectorizes.
fn lanes_fold<R: Real>(v: &[R], init: R, f: impl Fn(R, R) -> R) -> R {
    let mut acc = [init; 8];
    let chunks = v.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] = f(acc[i], c[i]);
        }
    }
    let mut out = init;
    for &a in acc.iter().chain(tail) {
        out = f(out, a);
    }
    out
}

/// Given `p = softmax(s)` row-wise and `dp`, returns `ds`.
pub fn softmax_backward<R: Real>(p: &Array2<R>, dp: &Array2<R>) -> Array2<R> {
    let mut ds = Array2::zeros(p.raw_dim());
    Zip::from(ds.rows_mut())
        .and(p.rows())
        .and(dp.rows())
        .for_each(|mut out, pr, gr| {
            let dot = pr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum::<R>();
            Zip::from(&mut out)
                .and(&pr)
                .and(&gr)
                .for_each(|o, &pi, &gi| *o = pi * (gi - dot));
        });
    ds
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu<R: Real>(x: R) -> R {
    let half = R::of(0.5);
    let inner = R::of(GELU_C) * (x + R::of(GELU_A) * x * x * x);
    half * x * (R::one() + inner.fast_tanh())
}

pub fn gelu_grad<R: Real>(x: R) -> R {
    let half = R::of(0.5);
    let inner = R::of(GELU_C) * (x + R::of(GELU_A) * x * x * x);
    let t = inner.fast_tanh();
    let dinner = R::of(GELU_C) * (R::one() + R::of(3.0 * GELU_A) * x * x);
    half * (R::one() + t) + half * x * (R::one() - t * t) * dinner
}

/// Mean cross-entropy of `logits` (rows) against integer targets, with its
/// gradient. An empty batch has loss 0 and an empty gradient.
pub fn cross_entropy<R: Real>(logits: &Array2<R>, targets: &[usize]) -> (f64, Array2<R>) {
    let n = logits.nrows();
    assert_eq!(n, targets.len(), "one target per logit row");
    if n == 0 {
        return (0.0, logits.clone());
    }
    let mut probs = logits.clone();
    let mut total = 0.0f64;
    for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
        let max = row.iter().fold(R::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<R>().ln();
        total += (lse - row[t]).f64();
        row.mapv_inplace(|v| (v - lse).exp());
    }
    let inv_n = R::of(1.0 / n as f64);
    for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
        row[t] -= R::one();
        row.mapv_inplace(|v| v * inv_n);
    }
    (total / n as f64, probs)
}

pub fn argmax_rows<R: Real>(x: &Array2<R>) -> Vec<usize> {
    x.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
