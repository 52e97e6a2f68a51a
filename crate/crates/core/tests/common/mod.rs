//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

/// Row-wise softmax-attention with explicit loops: queries `n×d`, input
/// `t×d`, projections `d×d`. Returns `(out n×d, weights n×t)`.
pub fn brute_force_attention(
    queries: &[Vec<f64>],
    input: &[Vec<f64>],
    w_k: &[Vec<f64>],
    w_v: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = queries[0].len();
    let project = |x: &[f64], w: &[Vec<f64>]| -> Vec<f64> {
        (0..d).map(|c| (0..d).map(|r| x[r] * w[r][c]).sum()).collect()
    };
    let keys: Vec<Vec<f64>> = input.iter().map(|x| project(x, w_k)).collect();
    let values: Vec<Vec<f64>> = input.iter().map(|x| project(x, w_v)).collect();
    let mut out = Vec::new();
    let mut weights = Vec::new();
    for q in queries {
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let w: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let o: Vec<f64> = (0..d)
            .map(|c| w.iter().zip(&values).map(|(wi, v)| wi * v[c]).sum())
            .collect();
        out.push(o);
        weights.push(w);
    }
    (out, weights)
}

/// `ρ²/(1−ρ²)`: the CLUB value under the exact Gaussian conditional of a
/// standard bivariate normal pair with correlation `ρ`.
pub fn gaussian_club(rho: f64) -> f64 {
    rho * rho / (1.0 - rho * rho)
}

/// `−½·ln(1−ρ²)`.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}
