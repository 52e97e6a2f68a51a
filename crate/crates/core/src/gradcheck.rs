//! Central finite differences against the analytic batch gradients.

use crate::club::ConditionalModel;
use crate::error::Result;
use crate::model::RtMae;
use crate::nn::Parameters;
use crate::trainer::{batch_loss_and_grads, BatchItem};

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)`, or 0 when both vanish.
    pub rel_error: f64,
}

fn relative(a: &[f64], n: &[f64]) -> (f64, f64, f64) {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let (na, nn) = (norm(a), norm(n));
    let denom = na.max(nn);
    let rel = if denom < 1e-300 { 0.0 } else { norm(&diff) / denom };
    (na, nn, rel)
}

/// Checks every parameter group of the model and of the conditional density
/// model against the total batch objective.
pub fn check_batch(
    model: &RtMae<f64>,
    q: &ConditionalModel<f64>,
    batch: &[BatchItem<'_>],
    lambda: f64,
    weights: (f64, f64),
    step: f64,
) -> Result<Vec<GroupReport>> {
    let mut m = model.clone();
    let mut cq = q.clone();
    m.zero_grad();
    cq.zero_grad();
    batch_loss_and_grads(&mut m, &mut cq, batch, lambda, weights)?;
    let analytic: Vec<(String, Vec<f64>)> = m
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.iter().copied().collect()))
        .chain(
            cq.named_params()
                .into_iter()
                .map(|(n, p)| (format!("club/{n}"), p.grad.iter().copied().collect())),
        )
        .collect();

    let loss_at = |m: &mut RtMae<f64>, cq: &mut ConditionalModel<f64>| -> Result<f64> {
        Ok(batch_loss_and_grads(m, cq, batch, lambda, weights)?.loss)
    };
    let model_groups = m.named_params().len();
    let mut reports = Vec::with_capacity(analytic.len());
    for (g, (name, a)) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for idx in 0..a.len() {
            let mut central = [0.0; 2];
            for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut pm = m.clone();
                let mut pq = cq.clone();
                {
                    let p = if g < model_groups {
                        pm.named_params_mut().swap_remove(g).1
                    } else {
                        pq.named_params_mut().swap_remove(g - model_groups).1
                    };
                    let v = p.value.iter_mut().nth(idx).expect("index in range");
                    *v += sign * step;
                }
                central[s] = loss_at(&mut pm, &mut pq)?;
            }
            numeric.push((central[0] - central[1]) / (2.0 * step));
        }
        let (analytic_norm, numeric_norm, rel_error) = relative(a, &numeric);
        reports.push(GroupReport {
            name: name.clone(),
            analytic_norm,
            numeric_norm,
            rel_error,
        });
    }
    Ok(reports)
}
