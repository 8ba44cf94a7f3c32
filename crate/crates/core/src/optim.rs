//! Quasi-Newton minimisation and finite-difference helpers.
//!
//! Objectives report their value and fill in the gradient. A non-finite value
//! marks the point as infeasible; the line search backs away from it.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    /// Converged when the gradient max-norm drops below this.
    pub gtol: f64,
    /// Relative step size below which iteration stops.
    pub xtol: f64,
    pub max_iter: usize,
    /// Gradient max-norm accepted when iteration stops on a tiny step or a
    /// stalled line search (the objective is flat to working precision).
    pub stall_gtol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            gtol: 1e-6,
            xtol: 1e-8,
            max_iter: 500,
            stall_gtol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    Step,
    Stalled,
    MaxIterations,
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    stall_gtol: f64,
}

impl Minimum {
    pub fn grad_norm(&self) -> f64 {
        max_abs(&self.grad)
    }

    pub fn converged(&self) -> bool {
        match self.termination {
            Termination::Gradient => true,
            Termination::Step | Termination::Stalled => self.grad_norm() <= self.stall_gtol,
            Termination::MaxIterations | Termination::NonFinite => false,
        }
    }
}

pub(crate) fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Counted<'a, F> {
    f: &'a mut F,
    evaluations: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Counted<'_, F> {
    fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
        self.evaluations += 1;
        let v = (self.f)(x, g);
        if v.is_finite() && g.iter().all(|gi| gi.is_finite()) {
            v
        } else {
            f64::INFINITY
        }
    }
}

struct Trial {
    alpha: f64,
    f: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

/// Strong-Wolfe line search along `d` from `x`.
fn line_search<F: FnMut(&[f64], &mut [f64]) -> f64>(
    obj: &mut Counted<'_, F>,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    alpha0: f64,
) -> Option<Trial> {
    let n = x.len();
    let dphi0 = dot(g0, d);
    // Armijo slack at the level of rounding in the objective.
    let slack = 8.0 * f64::EPSILON * f0.abs();
    let armijo = |alpha: f64, phi: f64| phi <= f0 + C1 * alpha * dphi0 + slack;
    let eval = |obj: &mut Counted<'_, F>, alpha: f64| {
        let xt: Vec<f64> = (0..n).map(|i| x[i] + alpha * d[i]).collect();
        let mut gt = vec![0.0; n];
        let ft = obj.eval(&xt, &mut gt);
        let dphi = if ft.is_finite() {
            dot(&gt, d)
        } else {
            f64::NAN
        };
        (
            Trial {
                alpha,
                f: ft,
                x: xt,
                g: gt,
            },
            dphi,
        )
    };

    let mut prev = (0.0, f0, dphi0);
    let mut alpha = alpha0;
    let mut best: Option<Trial> = None;
    let mut bracket: Option<((f64, f64, f64), (f64, f64, f64))> = None;
    for i in 0..40 {
        let (trial, dphi) = eval(obj, alpha);
        if !trial.f.is_finite() || !armijo(alpha, trial.f) || (i > 0 && trial.f >= prev.1) {
            bracket = Some((prev, (alpha, trial.f, dphi)));
            break;
        }
        if dphi.abs() <= -C2 * dphi0 {
            return Some(trial);
        }
        if dphi >= 0.0 {
            let hi = prev;
            let lo = (alpha, trial.f, dphi);
            best = Some(trial);
            bracket = Some((lo, hi));
            break;
        }
        prev = (alpha, trial.f, dphi);
        best = Some(trial);
        alpha *= 2.0;
    }
    let Some((mut lo, mut hi)) = bracket else {
        return best;
    };

    for _ in 0..40 {
        let width = hi.0 - lo.0;
        if width.abs() <= 1e-14 * lo.0.abs().max(1e-300) {
            break;
        }
        let mut alpha = cubic_minimizer(lo, hi).unwrap_or(lo.0 + 0.5 * width);
        let (a, b) = if lo.0 < hi.0 {
            (lo.0, hi.0)
        } else {
            (hi.0, lo.0)
        };
        let margin = 0.1 * (b - a);
        if !(alpha > a + margin && alpha < b - margin) {
            alpha = lo.0 + 0.5 * width;
        }
        let (trial, dphi) = eval(obj, alpha);
        if !trial.f.is_finite() || !armijo(alpha, trial.f) || trial.f >= lo.1 {
            hi = (alpha, trial.f, dphi);
        } else {
            if dphi.abs() <= -C2 * dphi0 {
                return Some(trial);
            }
            if dphi * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (alpha, trial.f, dphi);
            best = Some(trial);
        }
    }
    // Sufficient decrease without the curvature condition.
    best.filter(|t| t.alpha > 0.0)
}

fn cubic_minimizer(a: (f64, f64, f64), b: (f64, f64, f64)) -> Option<f64> {
    let (x1, f1, d1) = a;
    let (x2, f2, d2) = b;
    if !(f1.is_finite() && f2.is_finite() && d1.is_finite() && d2.is_finite()) {
        return None;
    }
    let d_1 = d1 + d2 - 3.0 * (f1 - f2) / (x1 - x2);
    let disc = d_1 * d_1 - d1 * d2;
    if disc < 0.0 {
        return None;
    }
    let d_2 = (x2 - x1).signum() * disc.sqrt();
    let denom = d2 - d1 + 2.0 * d_2;
    if denom == 0.0 {
        return None;
    }
    let x = x2 - (x2 - x1) * (d2 + d_2 - d_1) / denom;
    x.is_finite().then_some(x)
}

/// Minimises `f` by BFGS starting from `x0`.
///
/// `inv_hessian` optionally seeds the inverse-Hessian approximation; without it
/// the first step is a scaled steepest-descent step.
pub fn minimize<F>(
    mut f: F,
    x0: &[f64],
    inv_hessian: Option<DMatrix<f64>>,
    opts: &BfgsOptions,
) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut obj = Counted {
        f: &mut f,
        evaluations: 0,
    };
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = obj.eval(&x, &mut g);
    let finish = |x, f, grad, iterations, evaluations, termination| Minimum {
        x,
        f,
        grad,
        iterations,
        evaluations,
        termination,
        stall_gtol: opts.stall_gtol,
    };
    if !fx.is_finite() {
        return finish(x, fx, g, 0, obj.evaluations, Termination::NonFinite);
    }
    let seeded = inv_hessian.is_some();
    let mut h = inv_hessian.unwrap_or_else(|| DMatrix::identity(n, n));
    let mut scaled = seeded;
    let mut reset_once = false;

    for iter in 0..opts.max_iter {
        if max_abs(&g) <= opts.gtol {
            return finish(x, fx, g, iter, obj.evaluations, Termination::Gradient);
        }
        let gv = DVector::from_column_slice(&g);
        let mut d: Vec<f64> = (-(&h * &gv)).iter().copied().collect();
        if dot(&d, &g) >= 0.0 {
            h = DMatrix::identity(n, n);
            scaled = false;
            d = g.iter().map(|v| -v).collect();
        }
        let alpha0 = if scaled {
            1.0
        } else {
            (1.0 / max_abs(&d)).min(1.0)
        };
        let Some(trial) = line_search(&mut obj, &x, fx, &g, &d, alpha0) else {
            if !reset_once && scaled {
                // Retry once along steepest descent with a fresh approximation.
                h = DMatrix::identity(n, n);
                scaled = false;
                reset_once = true;
                continue;
            }
            return finish(x, fx, g, iter, obj.evaluations, Termination::Stalled);
        };
        reset_once = false;
        let s: Vec<f64> = trial.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let small_step = max_abs(&s) <= opts.xtol * (1.0 + max_abs(&x));
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if !scaled {
                h = DMatrix::identity(n, n) * (sy / dot(&y, &y));
                scaled = true;
            }
            let rho = 1.0 / sy;
            let sv = DVector::from_column_slice(&s);
            let yv = DVector::from_column_slice(&y);
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 yHy + rho) s s'
            let coef = rho * rho * yhy + rho;
            h -= (&sv * hy.transpose() + &hy * sv.transpose()) * rho;
            h += (&sv * sv.transpose()) * coef;
        }
        x = trial.x;
        fx = trial.f;
        g = trial.g;
        if small_step {
            let term = if max_abs(&g) <= opts.gtol {
                Termination::Gradient
            } else {
                Termination::Step
            };
            return finish(x, fx, g, iter + 1, obj.evaluations, term);
        }
    }
    let term = if max_abs(&g) <= opts.gtol {
        Termination::Gradient
    } else {
        Termination::MaxIterations
    };
    finish(x, fx, g, opts.max_iter, obj.evaluations, term)
}

/// Hessian by central differences of an analytic gradient, symmetrised.
pub fn fd_hessian<G>(mut grad: G, x: &[f64], rel_step: f64) -> DMatrix<f64>
where
    G: FnMut(&[f64], &mut [f64]),
{
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut gp = vec![0.0; n];
    let mut gm = vec![0.0; n];
    let mut xt = x.to_vec();
    for k in 0..n {
        let h = rel_step * x[k].abs().max(1.0);
        xt[k] = x[k] + h;
        grad(&xt, &mut gp);
        xt[k] = x[k] - h;
        grad(&xt, &mut gm);
        xt[k] = x[k];
        for i in 0..n {
            hess[(i, k)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    (&hess + hess.transpose()) * 0.5
}

/// Inverse of a symmetric positive-definite matrix, or `None`.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let chol = m.clone().cholesky()?;
    let inv = chol.inverse();
    inv.iter().all(|v| v.is_finite()).then_some(inv)
}

/// Pairwise summation; the result depends only on the order of `values`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 16 {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}
