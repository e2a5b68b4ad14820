//! Multinomial logistic regression on flat parameter vectors.
//!
//! Layout: the `K x dim` weight matrix row by row, then the `K` biases.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::data::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SoftmaxModel {
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl SoftmaxModel {
    pub fn new(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            num_classes,
            feature_dim,
        }
    }

    pub fn param_len(&self) -> usize {
        self.num_classes * (self.feature_dim + 1)
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> Vec<f64> {
        if scale == 0.0 {
            return vec![0.0; self.param_len()];
        }
        let n = Normal::new(0.0, scale).expect("finite init scale");
        (0..self.param_len()).map(|_| n.sample(rng)).collect()
    }

    fn bias_offset(&self) -> usize {
        self.num_classes * self.feature_dim
    }

    /// Class probabilities for one sample, written into `p`; returns the log-normalizer.
    fn softmax(&self, theta: &[f64], x: &[f64], p: &mut [f64]) -> f64 {
        let d = self.feature_dim;
        let b = self.bias_offset();
        let mut max = f64::NEG_INFINITY;
        for k in 0..self.num_classes {
            let w = &theta[k * d..(k + 1) * d];
            let z = theta[b + k] + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            p[k] = z;
            max = max.max(z);
        }
        let mut sum = 0.0;
        for pk in p.iter_mut() {
            *pk = (*pk - max).exp();
            sum += *pk;
        }
        for pk in p.iter_mut() {
            *pk /= sum;
        }
        max + sum.ln()
    }

    /// Mean cross-entropy over `data`.
    pub fn loss(&self, theta: &[f64], data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let mut p = vec![0.0; self.num_classes];
        let mut total = 0.0;
        for s in 0..data.len() {
            let x = data.row(s);
            let lse = self.softmax(theta, x, &mut p);
            total += lse - self.logit(theta, x, data.labels[s]);
        }
        total / data.len() as f64
    }

    /// Mean cross-entropy and its gradient.
    pub fn loss_and_grad(&self, theta: &[f64], data: &Dataset) -> (f64, Vec<f64>) {
        let mut g = vec![0.0; self.param_len()];
        if data.is_empty() {
            return (0.0, g);
        }
        let d = self.feature_dim;
        let b = self.bias_offset();
        let mut p = vec![0.0; self.num_classes];
        let mut total = 0.0;
        for s in 0..data.len() {
            let x = data.row(s);
            let y = data.labels[s];
            let lse = self.softmax(theta, x, &mut p);
            total += lse - self.logit(theta, x, y);
            for k in 0..self.num_classes {
                let r = p[k] - if k == y { 1.0 } else { 0.0 };
                let gw = &mut g[k * d..(k + 1) * d];
                for (gi, xi) in gw.iter_mut().zip(x) {
                    *gi += r * xi;
                }
                g[b + k] += r;
            }
        }
        let n = data.len() as f64;
        for gi in &mut g {
            *gi /= n;
        }
        (total / n, g)
    }

    fn logit(&self, theta: &[f64], x: &[f64], k: usize) -> f64 {
        let d = self.feature_dim;
        theta[self.bias_offset() + k] + theta[k * d..(k + 1) * d].iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
    }

    pub fn gradient(&self, theta: &[f64], data: &Dataset) -> Vec<f64> {
        self.loss_and_grad(theta, data).1
    }

    pub fn predict(&self, theta: &[f64], x: &[f64]) -> usize {
        (0..self.num_classes)
            .map(|k| (k, self.logit(theta, x, k)))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
            .0
    }

    /// Fraction of correctly classified samples.
    pub fn accuracy(&self, theta: &[f64], data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = (0..data.len()).filter(|&s| self.predict(theta, data.row(s)) == data.labels[s]).count();
        hits as f64 / data.len() as f64
    }

    /// Upper bound on the smoothness constant of the mean loss over `data`:
    /// half the mean squared norm of the bias-augmented features.
    pub fn smoothness_bound(&self, data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let sq: f64 = (0..data.len()).map(|s| 1.0 + data.row(s).iter().map(|v| v * v).sum::<f64>()).sum();
        0.5 * sq / data.len() as f64
    }
}
