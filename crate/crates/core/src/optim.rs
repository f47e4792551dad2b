//! Quasi-Newton minimization with finite-difference gradients.

use nalgebra::{DMatrix, DVector};

/// A function to minimize. `value` returns `None` outside the domain.
pub trait Objective {
    fn value(&mut self, x: &[f64]) -> Option<f64>;

    /// Called once the most recently evaluated point has been accepted as the
    /// new iterate.
    fn accept(&mut self, _x: &[f64]) {}
}

impl<F: FnMut(&[f64]) -> Option<f64>> Objective for F {
    fn value(&mut self, x: &[f64]) -> Option<f64> {
        self(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the gradient's ∞-norm falls below this.
    pub grad_tol: f64,
    /// Stop when the relative objective change falls below this.
    pub rel_tol: f64,
    /// Relative central-difference step.
    pub fd_step: f64,
    /// Largest ∞-norm of a single step.
    pub max_step: f64,
    /// When no descent step can be found, the run still counts as converged
    /// if the gradient's ∞-norm is below this.
    pub stall_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            rel_tol: 1e-10,
            fd_step: 1e-5,
            max_step: 3.0,
            stall_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Central-difference gradient with step `h·(1 + |x_k|)`. Falls back to a
/// one-sided difference when one side leaves the domain.
pub fn fd_gradient<O: Objective + ?Sized>(obj: &mut O, x: &[f64], f0: f64, h: f64) -> Option<Vec<f64>> {
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for k in 0..x.len() {
        let step = h * (1.0 + x[k].abs());
        xp[k] = x[k] + step;
        let up = obj.value(&xp);
        xp[k] = x[k] - step;
        let down = obj.value(&xp);
        xp[k] = x[k];
        g[k] = match (up, down) {
            (Some(u), Some(d)) => (u - d) / (2.0 * step),
            (Some(u), None) => (u - f0) / step,
            (None, Some(d)) => (f0 - d) / step,
            (None, None) => return None,
        };
        if !g[k].is_finite() {
            return None;
        }
    }
    Some(g)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// BFGS on the inverse Hessian with a backtracking Armijo line search.
/// Returns `None` if the objective is undefined at `x0`.
pub fn minimize<O: Objective + ?Sized>(obj: &mut O, x0: &[f64], opts: &BfgsOptions) -> Option<BfgsResult> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut f = obj.value(&x).filter(|v| v.is_finite())?;
    obj.accept(&x);
    if n == 0 {
        return Some(BfgsResult {
            x,
            f,
            grad: vec![],
            iterations: 0,
            converged: true,
        });
    }
    let mut g = fd_gradient(obj, &x, f, opts.fd_step)?;
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;
    let mut converged = false;
    let mut small_changes = 0;
    while iterations < opts.max_iter {
        if inf_norm(&g) < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let gv = DVector::from_column_slice(&g);
        let mut p = -(&hinv * &gv);
        let mut slope = p.dot(&gv);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(n, n);
            fresh = true;
            p = -gv.clone();
            slope = p.dot(&gv);
        }
        let pmax = p.amax();
        if pmax > opts.max_step {
            p *= opts.max_step / pmax;
            slope = p.dot(&gv);
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(p.iter()).map(|(a, b)| a + t * b).collect();
            if let Some(ft) = obj.value(&trial) {
                if ft.is_finite() && ft <= f + 1e-4 * t * slope {
                    next = Some((trial, ft));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fn_)) = next else {
            if fresh {
                // steepest descent also failed: no progress possible at this precision
                converged = inf_norm(&g) < opts.stall_tol;
                break;
            }
            hinv = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        obj.accept(&xn);
        let Some(gn) = fd_gradient(obj, &xn, fn_, opts.fd_step) else {
            x = xn;
            f = fn_;
            break;
        };
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, gn.iter().zip(&g).map(|(a, b)| a - b));
        let rel = (f - fn_).abs() / (1.0 + f.abs());
        x = xn;
        f = fn_;
        g = gn;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                hinv *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            fresh = false;
        }
        // a flat objective alone is weak evidence near a quadratic optimum
        small_changes = if rel < opts.rel_tol { small_changes + 1 } else { 0 };
        if small_changes >= 2 && inf_norm(&g) < opts.stall_tol {
            converged = true;
            break;
        }
    }
    if !converged && inf_norm(&g) < opts.grad_tol {
        converged = true;
    }
    Some(BfgsResult {
        x,
        f,
        grad: g,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let mut f = |x: &[f64]| Some(100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2));
        let r = minimize(&mut f, &[-1.2, 1.0], &BfgsOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
    }

    #[test]
    fn quadratic_with_domain() {
        // log-barrier style domain: x0 > 0
        let mut f = |x: &[f64]| {
            if x[0] <= 0.0 {
                None
            } else {
                Some(x[0] - x[0].ln() + (x[1] - 3.0).powi(2))
            }
        };
        let r = minimize(&mut f, &[5.0, 0.0], &BfgsOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn undefined_start() {
        let mut f = |_: &[f64]| None;
        assert!(minimize(&mut f, &[0.0], &BfgsOptions::default()).is_none());
    }
}
