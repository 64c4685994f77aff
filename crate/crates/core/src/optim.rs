//! Full-gradient descent with an adaptive line search.
//!
//! A trial step `x − t·g` is accepted when the objective has not increased
//! and the directional derivative at the trial point is still non-positive,
//! i.e. the step did not overshoot the minimum along the ray. Accepted steps
//! double `t` for the next iteration; rejected ones halve it. Using the
//! gradient sign keeps the search reliable when `‖g‖²` is far below the
//! rounding level of the objective value.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct DescentOptions {
    /// Stop once `‖∇F‖₂ < tol`.
    pub tol: f64,
    pub max_iters: usize,
    pub initial_step: f64,
    /// Abort with [`Error::Unbounded`] when any coordinate exceeds this.
    pub guard: f64,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 200_000,
            initial_step: 1.0,
            guard: 1e4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const MIN_STEP: f64 = 1e-30;
const MAX_STEP: f64 = 1e30;

/// Minimizes `objective`, which returns `(value, gradient)`.
pub fn descend<F>(mut objective: F, x0: Vec<f64>, opts: &DescentOptions) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let (mut value, mut grad) = objective(&x);
    let mut step = opts.initial_step;
    let mut trial = vec![0.0; x.len()];

    for iter in 0..=opts.max_iters {
        let gg = dot(&grad, &grad);
        let grad_norm = gg.sqrt();
        if !value.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Unbounded(format!(
                "non-finite objective at iteration {iter}"
            )));
        }
        if grad_norm < opts.tol {
            return Ok(Minimum {
                x,
                value,
                grad_norm,
                iterations: iter,
            });
        }
        if iter == opts.max_iters {
            return Err(Error::NotConverged {
                iterations: iter,
                grad_norm,
            });
        }

        let slack = 4.0 * f64::EPSILON * value.abs();
        loop {
            for ((t, xi), gi) in trial.iter_mut().zip(&x).zip(&grad) {
                *t = xi - step * gi;
            }
            let (tv, tg) = objective(&trial);
            if tv.is_finite() && tv <= value + slack && dot(&tg, &grad) >= 0.0 {
                std::mem::swap(&mut x, &mut trial);
                value = tv;
                grad = tg;
                step = (step * 2.0).min(MAX_STEP);
                break;
            }
            step *= 0.5;
            if step < MIN_STEP {
                return Err(Error::NotConverged {
                    iterations: iter,
                    grad_norm,
                });
            }
        }

        if x.iter().any(|v| v.abs() > opts.guard) {
            return Err(Error::Unbounded(format!(
                "iterate left the box |x| ≤ {} at iteration {iter}",
                opts.guard
            )));
        }
    }
    unreachable!("loop returns on its last iteration")
}
