mod common;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rtmae::club::{club_backward, club_estimate, nll_backward, ClubEstimator, ConditionalModel};
use rtmae::nn::Parameters;

fn correlated(n: usize, rho: f64, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
    let mut x = Array2::zeros((n, 1));
    let mut y = Array2::zeros((n, 1));
    for i in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        x[[i, 0]] = a;
        y[[i, 0]] = rho * a + (1.0 - rho * rho).sqrt() * b;
    }
    (x, y)
}

fn fit(rho: f64, seed: u64) -> (ClubEstimator<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut est = ClubEstimator::new(1, 16, 5e-3, &mut rng);
    for _ in 0..1500 {
        let (x, y) = correlated(256, rho, &mut rng);
        est.fit_conditional_step(&x, &y).unwrap();
    }
    (est, rng)
}

/// Mean of `club_estimate` over disjoint batches of 1000 covering `n` samples.
fn evaluate(est: &ClubEstimator<f64>, rho: f64, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let chunks = n / 1000;
    (0..chunks)
        .map(|_| {
            let (x, y) = correlated(1000, rho, rng);
            est.estimate(&x, &y).unwrap()
        })
        .sum::<f64>()
        / chunks as f64
}

#[test]
fn fitted_estimate_approaches_gaussian_limit() {
    let rho = 0.8;
    let (est, mut rng) = fit(rho, 3);
    let value = evaluate(&est, rho, 10_000, &mut rng);
    let limit = common::gaussian_club(rho);
    assert!((value - limit).abs() < 0.2, "estimate {value}, limit {limit}");
    // An upper bound on the true mutual information.
    assert!(value > common::gaussian_mi(rho));
}

#[test]
fn independent_pairs_estimate_near_zero() {
    let (est, mut rng) = fit(0.0, 4);
    let value = evaluate(&est, 0.0, 10_000, &mut rng);
    assert!(value.abs() <= 0.05, "{value}");
}

#[test]
fn shuffling_partners_removes_the_signal() {
    let rho = 0.8;
    let (est, mut rng) = fit(rho, 5);
    let (x, y) = correlated(1000, rho, &mut rng);
    let paired = est.estimate(&x, &y).unwrap();
    let mut order: Vec<usize> = (0..1000).collect();
    order.rotate_left(1);
    let ys = Array2::from_shape_fn((1000, 1), |(i, _)| y[[order[i], 0]]);
    let shuffled = est.estimate(&x, &ys).unwrap();
    assert!(paired - shuffled > 1.0, "{paired} vs {shuffled}");
    assert!(shuffled.abs() < 0.2);
}

#[test]
fn log_density_matrix_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q: ConditionalModel<f64> = ConditionalModel::new(3, 2, 5, &mut rng);
    let x = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
    let y = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
    let (mu, lv, _) = q.forward(&x);
    let l = q.log_density_matrix(&x, &y);
    for i in 0..4 {
        for j in 0..4 {
            let mut want = 0.0;
            for k in 0..2 {
                let var = lv[[i, k]].exp();
                want += -0.5 * (2.0 * std::f64::consts::PI * var).ln()
                    - (y[[j, k]] - mu[[i, k]]).powi(2) / (2.0 * var);
            }
            assert!((l[[i, j]] - want).abs() < 1e-12);
        }
    }
    let mut contrast = 0.0;
    for i in 0..4 {
        contrast += l[[i, i]] - (0..4).map(|j| l[[i, j]]).sum::<f64>() / 4.0;
    }
    assert!((club_estimate(&x, &y, &q).unwrap() - contrast / 4.0).abs() < 1e-12);
}

fn numeric_grad(f: &dyn Fn(&Array2<f64>) -> f64, at: &Array2<f64>) -> Array2<f64> {
    let h = 1e-6;
    Array2::from_shape_fn(at.raw_dim(), |ix| {
        let mut p = at.clone();
        p[ix] += h;
        let mut m = at.clone();
        m[ix] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    })
}

#[test]
fn estimate_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q: ConditionalModel<f64> = ConditionalModel::new(3, 3, 4, &mut rng);
    let x = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
    let y = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
    let mut qq = q.clone();
    let (_, dx, dy) = club_backward(&x, &y, &mut qq, 1.0).unwrap();
    let nx = numeric_grad(&|xv| club_estimate(xv, &y, &q).unwrap(), &x);
    let ny = numeric_grad(&|yv| club_estimate(&x, yv, &q).unwrap(), &y);
    for (a, n) in dx.iter().chain(dy.iter()).zip(nx.iter().chain(ny.iter())) {
        assert!((a - n).abs() < 1e-6, "{a} vs {n}");
    }
    // Parameter gradients of the estimate.
    for (g, (name, p)) in qq.named_params().into_iter().enumerate() {
        for idx in 0..p.value.len() {
            let bump = |s: f64| {
                let mut m = q.clone();
                let target = m.named_params_mut().swap_remove(g).1;
                *target.value.iter_mut().nth(idx).unwrap() += s;
                club_estimate(&x, &y, &m).unwrap()
            };
            let n = (bump(1e-6) - bump(-1e-6)) / 2e-6;
            let a = *p.grad.iter().nth(idx).unwrap();
            assert!((a - n).abs() < 1e-6, "{name}[{idx}]: {a} vs {n}");
        }
    }
}

#[test]
fn nll_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q: ConditionalModel<f64> = ConditionalModel::new(2, 2, 4, &mut rng);
    let x = Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.0..1.0));
    let y = Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.0..1.0));
    let mut qq = q.clone();
    nll_backward(&x, &y, &mut qq);
    let nll = |m: &ConditionalModel<f64>| {
        let mut c = m.clone();
        nll_backward(&x, &y, &mut c)
    };
    for (g, (name, p)) in qq.named_params().into_iter().enumerate() {
        for idx in 0..p.value.len() {
            let bump = |s: f64| {
                let mut m = q.clone();
                let target = m.named_params_mut().swap_remove(g).1;
                *target.value.iter_mut().nth(idx).unwrap() += s;
                nll(&m)
            };
            let n = (bump(1e-6) - bump(-1e-6)) / 2e-6;
            let a = *p.grad.iter().nth(idx).unwrap();
            assert!((a - n).abs() < 1e-6, "{name}[{idx}]: {a} vs {n}");
        }
    }
}
