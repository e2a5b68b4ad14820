//! Local full-batch training, aggregation, and the centralized reference runs.

use crate::error::{Error, Result};
use crate::estimator::norm;
use crate::types::{aggregation_weights, full_weights};

use super::data::Dataset;
use super::model::SoftmaxModel;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub theta: Vec<f64>,
    /// Loss at every iterate, `tau + 1` entries.
    pub losses: Vec<f64>,
    /// Gradient at every iterate, `tau + 1` entries.
    pub grads: Vec<Vec<f64>>,
}

impl LocalUpdate {
    pub fn loss_start(&self) -> f64 {
        self.losses[0]
    }

    pub fn loss_end(&self) -> f64 {
        *self.losses.last().unwrap()
    }
}

/// `tau` full-batch gradient steps on one client's data.
pub fn local_train(
    model: &SoftmaxModel,
    theta: &[f64],
    data: &Dataset,
    tau: u32,
    eta: f64,
    client: usize,
) -> Result<LocalUpdate> {
    let mut theta = theta.to_vec();
    let mut losses = Vec::with_capacity(tau as usize + 1);
    let mut grads = Vec::with_capacity(tau as usize + 1);
    for m in 0..=tau {
        let (l, g) = model.loss_and_grad(&theta, data);
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { client });
        }
        if m < tau {
            for (t, gi) in theta.iter_mut().zip(&g) {
                *t -= eta * gi;
            }
        }
        losses.push(l);
        grads.push(g);
    }
    Ok(LocalUpdate { theta, losses, grads })
}

/// Every iterate of `tau` local steps, starting point included.
pub fn local_trajectory(model: &SoftmaxModel, theta: &[f64], data: &Dataset, tau: u32, eta: f64) -> Vec<Vec<f64>> {
    let mut out = vec![theta.to_vec()];
    for _ in 0..tau {
        let cur = out.last().unwrap();
        let g = model.gradient(cur, data);
        out.push(cur.iter().zip(&g).map(|(t, gi)| t - eta * gi).collect());
    }
    out
}

/// `sum_i weights[i] models[i]`.
pub fn aggregate(models: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; models.first().map_or(0, |m| m.len())];
    for (m, &w) in models.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(m.iter()) {
            *o += w * v;
        }
    }
    out
}

pub fn weighted_loss(model: &SoftmaxModel, theta: &[f64], datasets: &[Dataset], weights: &[f64]) -> f64 {
    datasets
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(d, &w)| w * model.loss(theta, d))
        .sum()
}

pub fn weighted_gradient(model: &SoftmaxModel, theta: &[f64], datasets: &[Dataset], weights: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; model.param_len()];
    for (d, &w) in datasets.iter().zip(weights) {
        if w > 0.0 {
            for (gi, v) in g.iter_mut().zip(model.gradient(theta, d)) {
                *gi += w * v;
            }
        }
    }
    g
}

/// Size-weighted loss over all clients.
pub fn global_loss(model: &SoftmaxModel, theta: &[f64], datasets: &[Dataset]) -> f64 {
    let sizes: Vec<usize> = datasets.iter().map(Dataset::len).collect();
    weighted_loss(model, theta, datasets, &full_weights(&sizes))
}

/// Size-weighted loss over the participants only.
pub fn participation_loss(model: &SoftmaxModel, theta: &[f64], datasets: &[Dataset], a: &[bool]) -> Result<f64> {
    let sizes: Vec<usize> = datasets.iter().map(Dataset::len).collect();
    let w = aggregation_weights(&sizes, a)?;
    Ok(weighted_loss(model, theta, datasets, &w.w_tilde))
}

/// Centralized gradient descent on the participation loss from the round's
/// starting model; `tau + 1` iterates.
pub fn auxiliary_trajectory(
    model: &SoftmaxModel,
    theta: &[f64],
    datasets: &[Dataset],
    a: &[bool],
    tau: u32,
    eta: f64,
) -> Result<Vec<Vec<f64>>> {
    let sizes: Vec<usize> = datasets.iter().map(Dataset::len).collect();
    let w = aggregation_weights(&sizes, a)?;
    let mut out = vec![theta.to_vec()];
    for _ in 0..tau {
        let cur = out.last().unwrap();
        let g = weighted_gradient(model, cur, datasets, &w.w_tilde);
        let next: Vec<f64> = cur.iter().zip(&g).map(|(t, gi)| t - eta * gi).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { client: usize::MAX });
        }
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub theta: Vec<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Smoothness bound used for the step size.
    pub smoothness: f64,
}

/// Minimizes the global loss by accelerated gradient descent with
/// gradient-based restarts, stopping at `grad_tol` or `max_iters`.
pub fn solve_optimum(
    model: &SoftmaxModel,
    datasets: &[Dataset],
    theta0: &[f64],
    grad_tol: f64,
    max_iters: usize,
) -> Optimum {
    let sizes: Vec<usize> = datasets.iter().map(Dataset::len).collect();
    let w = full_weights(&sizes);
    let smooth = datasets
        .iter()
        .zip(&w)
        .map(|(d, wi)| wi * model.smoothness_bound(d))
        .sum::<f64>()
        .max(1e-12);
    let step = 1.0 / smooth;
    let eval = |t: &[f64]| -> (f64, Vec<f64>) {
        let mut g = vec![0.0; model.param_len()];
        let mut l = 0.0;
        for (d, &wi) in datasets.iter().zip(&w) {
            let (li, gi) = model.loss_and_grad(t, d);
            l += wi * li;
            for (a, b) in g.iter_mut().zip(gi) {
                *a += wi * b;
            }
        }
        (l, g)
    };

    let mut x = theta0.to_vec();
    let mut y = x.clone();
    let mut t = 1.0f64;
    let (mut fx, mut gx) = eval(&x);
    let mut iterations = 0;
    while iterations < max_iters && norm(&gx) > grad_tol {
        iterations += 1;
        let (fy, gy) = eval(&y);
        let x_next: Vec<f64> = y.iter().zip(&gy).map(|(a, b)| a - step * b).collect();
        // momentum pointing uphill: drop it
        let uphill: f64 = gy.iter().zip(x_next.iter().zip(&x)).map(|(g, (a, b))| g * (a - b)).sum();
        if uphill > 0.0 {
            t = 1.0;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = if uphill > 0.0 { 0.0 } else { (t - 1.0) / t_next };
        y = x_next.iter().zip(&x).map(|(a, b)| a + mom * (a - b)).collect();
        x = x_next;
        t = t_next;
        if y == x {
            // no momentum, so the next evaluation is at x itself
            fx = fy;
            gx = gy;
        }
        if iterations % 10 == 0 || mom == 0.0 {
            (fx, gx) = eval(&x);
        }
    }
    let (fx_final, gx_final) = if iterations == 0 { (fx, gx) } else { eval(&x) };
    Optimum {
        grad_norm: norm(&gx_final),
        theta: x,
        loss: fx_final,
        iterations,
        smoothness: smooth,
    }
}
