use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam over a fixed list of flat parameter slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub params: AdamParams,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: AdamParams, sizes: &[usize]) -> Self {
        Self { params, t: 0, m: sizes.iter().map(|&n| vec![0.0; n]).collect(), v: sizes.iter().map(|&n| vec![0.0; n]).collect() }
    }

    pub fn step(&mut self, weights: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<()> {
        ensure!(weights.len() == self.m.len() && grads.len() == self.m.len(), "optimizer slot count mismatch");
        self.t += 1;
        let AdamParams { learning_rate, beta1, beta2, eps } = self.params;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((w, g), m), v) in weights.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ensure!(w.len() == g.len() && w.len() == m.len(), "optimizer slot size mismatch");
            for i in 0..w.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                w[i] -= learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut a = Adam::new(AdamParams::default(), &[2]);
        let mut w = vec![1.0, -1.0];
        a.step(vec![&mut w], &[&[3.0, -0.5]]).unwrap();
        // bias-corrected first step is lr * sign(g)
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut a = Adam::new(AdamParams { learning_rate: 0.05, ..Default::default() }, &[1]);
        let mut w = vec![4.0];
        for _ in 0..2000 {
            let g = [2.0 * (w[0] - 1.5)];
            a.step(vec![&mut w], &[&g]).unwrap();
        }
        assert!((w[0] - 1.5).abs() < 1e-3);
    }
}
