//! Box-constrained local optimizers: projected BFGS with backtracking for
//! criterion minimization and a Levenberg-Marquardt loop for least squares.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct OptimOptions {
    pub max_iters: usize,
    /// Convergence threshold on the projected gradient (infinity norm scale).
    pub grad_tol: f64,
    /// Relative decrease below which the loop stops early.
    pub f_tol: f64,
    pub max_backtracks: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-6,
            f_tol: 1e-12,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn project(x: &DVector<f64>, bounds: &[(f64, f64)]) -> DVector<f64> {
    DVector::from_iterator(
        x.len(),
        x.iter()
            .zip(bounds)
            .map(|(&v, &(lo, hi))| v.clamp(lo, hi)),
    )
}

/// Norm of the projected gradient step P(x - g) - x; zero exactly at a
/// box-constrained stationary point.
fn projected_grad_norm(x: &DVector<f64>, g: &DVector<f64>, bounds: &[(f64, f64)]) -> f64 {
    (project(&(x - g), bounds) - x).norm()
}

/// Minimizes f over a box from `x0` with BFGS curvature updates, projecting
/// trial points onto the box and backtracking on the Armijo condition.
///
/// Evaluation errors during a line search are treated as infinite cost so the
/// search retreats; an error at the starting point is fatal.
pub fn projected_bfgs<F>(
    mut fg: F,
    x0: &DVector<f64>,
    bounds: &[(f64, f64)],
    opts: &OptimOptions,
) -> Result<OptimResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let n = x0.len();
    if bounds.len() != n {
        return Err(Error::InvalidConfig(format!(
            "bounds dimension {} does not match x0 dimension {n}",
            bounds.len()
        )));
    }
    let mut x = project(x0, bounds);
    let (mut f, mut g) = fg(&x)?;
    if !f.is_finite() {
        return Err(Error::Divergence { node: 0, t: 0.0 });
    }
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let scale = 1.0 + x.amax();
    let mut iterations = 0;
    let mut converged = false;
    let mut alpha0 = 1.0f64;

    for _ in 0..opts.max_iters {
        iterations += 1;
        let pg = projected_grad_norm(&x, &g, bounds);
        if pg <= opts.grad_tol * scale {
            converged = true;
            break;
        }
        let mut dir = -(&h_inv * &g);
        if dir.dot(&g) >= 0.0 {
            // not a descent direction: reset curvature and fall back to steepest descent
            h_inv = DMatrix::identity(n, n);
            dir = -g.clone();
        }

        // warm-start the backtracking from the last accepted step length so a
        // persistently short direction does not pay the full ladder each time
        let mut alpha = (4.0 * alpha0).min(1.0);
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let trial = project(&(&x + &dir * alpha), bounds);
            let step = &trial - &x;
            if step.norm() < 1e-16 * (1.0 + x.norm()) {
                break;
            }
            match fg(&trial) {
                Ok((ft, gt)) if ft.is_finite() && ft <= f + 1e-4 * g.dot(&step) => {
                    accepted = Some((trial, ft, gt, step));
                    alpha0 = alpha;
                    break;
                }
                _ => alpha *= 0.5,
            }
        }
        let Some((x_new, f_new, g_new, s)) = accepted else {
            converged = pg <= 1e2 * opts.grad_tol * scale;
            break;
        };

        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            // BFGS inverse update
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let v = &i - &s * y.transpose() * rho;
            h_inv = &v * h_inv * v.transpose() + &s * s.transpose() * rho;
        } else {
            h_inv = DMatrix::identity(n, n);
        }

        let rel_drop = (f - f_new).abs() / (1.0 + f.abs());
        x = x_new;
        f = f_new;
        g = g_new;
        if rel_drop < opts.f_tol {
            converged = true;
            break;
        }
    }

    Ok(OptimResult {
        grad_norm: projected_grad_norm(&x, &g, bounds),
        x,
        f,
        iterations,
        converged,
    })
}

/// Central finite-difference Jacobian of a residual map, columns clamped to
/// the box so probes stay feasible.
pub fn fd_jacobian<F>(
    res: &mut F,
    x: &DVector<f64>,
    bounds: &[(f64, f64)],
    rel_step: f64,
) -> Result<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = x.len();
    let probe = res(x)?;
    let m = probe.len();
    let mut jac = DMatrix::zeros(m, n);
    for j in 0..n {
        let step = rel_step * (1.0 + x[j].abs());
        let (lo, hi) = bounds[j];
        let xp = (x[j] + step).min(hi);
        let xm = (x[j] - step).max(lo);
        let mut p = x.clone();
        p[j] = xp;
        let rp = res(&p)?;
        p[j] = xm;
        let rm = res(&p)?;
        jac.set_column(j, &((rp - rm) / (xp - xm)));
    }
    Ok(jac)
}

/// Levenberg-Marquardt on 0.5 ||res(x)||^2 over a box, with finite-difference
/// Jacobians and multiplicative damping adaptation.
pub fn levenberg_marquardt<F>(
    mut res: F,
    x0: &DVector<f64>,
    bounds: &[(f64, f64)],
    opts: &OptimOptions,
) -> Result<OptimResult>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = x0.len();
    if bounds.len() != n {
        return Err(Error::InvalidConfig(format!(
            "bounds dimension {} does not match x0 dimension {n}",
            bounds.len()
        )));
    }
    let mut x = project(x0, bounds);
    let mut r = res(&x)?;
    let mut f = 0.5 * r.norm_squared();
    let mut mu = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    let scale = 1.0 + x.amax();

    for _ in 0..opts.max_iters {
        iterations += 1;
        let jac = fd_jacobian(&mut res, &x, bounds, 1e-6)?;
        let g = jac.transpose() * &r;
        if projected_grad_norm(&x, &g, bounds) <= opts.grad_tol * scale {
            converged = true;
            break;
        }
        let jtj = jac.transpose() * &jac;
        let mut improved = false;
        for _ in 0..opts.max_backtracks {
            let mut damped = jtj.clone();
            for i in 0..n {
                damped[(i, i)] += mu * (1.0 + jtj[(i, i)]);
            }
            let Some(delta) = damped.lu().solve(&(-&g)) else {
                mu *= 10.0;
                continue;
            };
            let trial = project(&(&x + delta), bounds);
            if (&trial - &x).norm() < 1e-16 * (1.0 + x.norm()) {
                break;
            }
            match res(&trial) {
                Ok(rt) => {
                    let ft = 0.5 * rt.norm_squared();
                    if ft.is_finite() && ft < f {
                        let rel_drop = (f - ft) / (1.0 + f);
                        x = trial;
                        r = rt;
                        f = ft;
                        mu = (mu * 0.3).max(1e-12);
                        improved = true;
                        if rel_drop < opts.f_tol {
                            converged = true;
                        }
                        break;
                    }
                    mu *= 10.0;
                }
                Err(_) => mu *= 10.0,
            }
            if mu > 1e16 {
                break;
            }
        }
        if converged {
            break;
        }
        if !improved {
            converged = true; // no feasible decrease left at machine scale
            break;
        }
    }

    let jac = fd_jacobian(&mut res, &x, bounds, 1e-6)?;
    let g = jac.transpose() * &r;
    Ok(OptimResult {
        grad_norm: projected_grad_norm(&x, &g, bounds),
        x,
        f,
        iterations,
        converged,
    })
}
