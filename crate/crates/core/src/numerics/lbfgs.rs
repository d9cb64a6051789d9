use std::collections::VecDeque;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub history: usize,
    pub max_iter: usize,
    pub initial_step: f64,
    /// Stop once the objective drops below this value.
    pub tolerance: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 10,
            max_iter: 300,
            initial_step: 1.0,
            tolerance: 0.0,
        }
    }
}

/// Limited-memory quasi-Newton minimizer with a backtracking Armijo line search.
#[derive(Debug, Clone)]
pub struct Lbfgs {
    config: LbfgsConfig,
}

impl Lbfgs {
    pub fn new(config: LbfgsConfig) -> Self {
        Self { config }
    }

    /// Minimizes `f`, which returns the objective and its gradient. Each
    /// iteration counts one accepted step. Returns the best point seen and its
    /// objective.
    pub fn minimize<F>(&self, x0: Vec<f64>, mut f: F) -> Result<(Vec<f64>, f64)>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let cfg = self.config;
        let mut x = x0;
        let (mut fx, mut g) = f(&x)?;
        let mut best = (x.clone(), fx);
        let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();

        for _ in 0..cfg.max_iter {
            if fx <= cfg.tolerance {
                break;
            }
            // two-loop recursion
            let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
            let mut alphas = Vec::with_capacity(history.len());
            for (s, y, rho) in history.iter().rev() {
                let a = rho * dot(s, &d);
                axpy(&mut d, -a, y);
                alphas.push(a);
            }
            if let Some((s, y, _)) = history.back() {
                let gamma = dot(s, y) / dot(y, y);
                d.iter_mut().for_each(|v| *v *= gamma);
            }
            for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
                let b = rho * dot(y, &d);
                axpy(&mut d, a - b, s);
            }
            let mut slope = dot(&g, &d);
            if slope >= 0.0 {
                history.clear();
                d = g.iter().map(|v| -v).collect();
                slope = -dot(&g, &g);
            }
            if slope == 0.0 {
                break;
            }

            // without curvature history the direction is the raw gradient
            let mut step = if history.is_empty() {
                cfg.initial_step / dot(&g, &g).sqrt().max(1.0)
            } else {
                cfg.initial_step
            };
            let mut accepted = None;
            for _ in 0..40 {
                let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
                let (fn_, gn) = f(&xn)?;
                if fn_.is_finite() && fn_ <= fx + 1e-4 * step * slope {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
                step *= 0.5;
            }
            let Some((xn, fn_, gn)) = accepted else { break };

            let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 {
                if history.len() == cfg.history {
                    history.pop_front();
                }
                history.push_back((s, y, 1.0 / sy));
            }
            x = xn;
            fx = fn_;
            g = gn;
            if fx < best.1 {
                best = (x.clone(), fx);
            }
        }
        Ok(best)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
