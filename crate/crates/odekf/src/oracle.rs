//! Brute-force verifier for the smoothing criterion: restricts the control
//! to piecewise constants on N intervals, which turns the quadratic cost
//! x0' Q0 x0 + int { ||zeta - C X||^2 + lambda ||u||^2 } dt into a dense
//! linear least-squares problem whose global minimum is certifiable by
//! normal equations. Exists to certify the closed-form machinery, not to
//! compete with it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{check_theta, Model};
use crate::ode::rk4_step;
use crate::signal::OutputSignal;

/// The reduced least-squares problem: `design * z - target` stacks the
/// weighted data-misfit samples, the sqrt(lambda)-scaled control values and
/// the sqrt(Q0)-scaled initial state, with z = (x0, u_1, ..., u_N).
pub struct DiscretizedLQ {
    pub n: usize,
    pub d: usize,
    pub design: DMatrix<f64>,
    pub target: DVector<f64>,
    /// Control interval boundaries, length n + 1.
    pub control_nodes: Vec<f64>,
}

/// Certified global minimum of the discretized cost.
pub struct OracleSolution {
    pub cost: f64,
    pub x0: DVector<f64>,
    /// One constant control vector per interval.
    pub u: Vec<DVector<f64>>,
}

impl DiscretizedLQ {
    /// Builds the reduced problem on `n` uniform control intervals over
    /// [0, t_end], with `refine` RK4 steps per interval for the state
    /// propagation and trapezoid quadrature of the data misfit.
    pub fn build(
        model: &dyn Model,
        theta: &DVector<f64>,
        lambda: f64,
        q0: Option<&DMatrix<f64>>,
        zeta: &dyn OutputSignal,
        n: usize,
        t_end: f64,
        refine: usize,
    ) -> Result<Self> {
        check_theta(model, theta)?;
        if !(lambda > 0.0) {
            return Err(Error::Domain(format!("lambda must be > 0, got {lambda}")));
        }
        if n == 0 || refine == 0 || !(t_end > 0.0) {
            return Err(Error::InvalidConfig(
                "oracle needs n >= 1, refine >= 1, t_end > 0".into(),
            ));
        }
        let d = model.state_dim();
        let d_obs = model.obs_dim();
        if zeta.dim() != d_obs {
            return Err(Error::Domain(format!(
                "signal dimension {} does not match obs dimension {d_obs}",
                zeta.dim()
            )));
        }
        let cols = d * (n + 1);
        let dt_ctl = t_end / n as f64;
        let dt = dt_ctl / refine as f64;
        let n_quad = n * refine + 1;

        // Basis trajectories: column j of `basis` solves X' = A X (+ e_k on
        // its own control interval); `part` carries the forcing r alone.
        // Jointly propagated as one (cols + 1)-column matrix system.
        let mut y = DMatrix::<f64>::zeros(d, cols + 1);
        y.view_mut((0, 0), (d, d))
            .copy_from(&DMatrix::identity(d, d));

        let c = model.obs_matrix();
        let rows = n_quad * d_obs + n * d + if q0.is_some() { d } else { 0 };
        let mut design = DMatrix::<f64>::zeros(rows, cols);
        let mut target = DVector::<f64>::zeros(rows);

        let mut emit = |row0: usize, y: &DMatrix<f64>, t: f64, w: f64| {
            let sw = w.sqrt();
            let cy = &c * y;
            let z = zeta.eval(t);
            for i in 0..d_obs {
                for j in 0..cols {
                    design[(row0 + i, j)] = sw * cy[(i, j)];
                }
                // the r-driven part is not a decision variable; fold it into the target
                target[row0 + i] = sw * (z[i] - cy[(i, cols)]);
            }
        };

        emit(0, &y, 0.0, 0.5 * dt);
        let flat = |m: &DMatrix<f64>| DVector::from_column_slice(m.as_slice());
        let unflat = |v: &DVector<f64>| DMatrix::from_column_slice(d, cols + 1, v.as_slice());
        for k in 0..n {
            // forcing layout for interval k: unit vectors in the u_k block, r in the tail
            let mut rhs = |t: f64, yv: &DVector<f64>| {
                let ym = unflat(yv);
                let (a, r) = model.system(t, theta);
                let mut dy = &a * ym;
                for j in 0..d {
                    dy[(j, d * (1 + k) + j)] += 1.0;
                }
                for j in 0..d {
                    dy[(j, cols)] += r[j];
                }
                flat(&dy)
            };
            for s in 0..refine {
                let t = k as f64 * dt_ctl + s as f64 * dt;
                let yv = rk4_step(&mut rhs, t, &flat(&y), dt);
                if !yv.iter().all(|v| v.is_finite()) {
                    return Err(Error::Divergence {
                        node: k * refine + s + 1,
                        t: t + dt,
                    });
                }
                y = unflat(&yv);
                let idx = k * refine + s + 1;
                let w = if idx + 1 == n_quad { 0.5 * dt } else { dt };
                emit(idx * d_obs, &y, t + dt, w);
            }
        }

        // control energy rows: lambda * dt_ctl * ||u_k||^2
        let su = (lambda * dt_ctl).sqrt();
        for k in 0..n {
            for j in 0..d {
                design[(n_quad * d_obs + k * d + j, d * (1 + k) + j)] = su;
            }
        }

        // initial-state prior rows: sqrt(Q0) x0
        if let Some(q) = q0 {
            if q.nrows() != d || q.ncols() != d {
                return Err(Error::Domain("Q0 dimension mismatch".into()));
            }
            let eig = ((q + q.transpose()) * 0.5).symmetric_eigen();
            if eig.eigenvalues.iter().any(|&l| l < -1e-12) {
                return Err(Error::Domain("Q0 must be positive semidefinite".into()));
            }
            let sqrt_q = &eig.eigenvectors
                * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()))
                * eig.eigenvectors.transpose();
            let base = n_quad * d_obs + n * d;
            for i in 0..d {
                for j in 0..d {
                    design[(base + i, j)] = sqrt_q[(i, j)];
                }
            }
        }

        Ok(Self {
            n,
            d,
            design,
            target,
            control_nodes: (0..=n).map(|k| k as f64 * dt_ctl).collect(),
        })
    }

    /// Quadratic cost of a candidate (x0, u_1..u_N) under the discretization.
    pub fn cost_of(&self, x0: &DVector<f64>, u: &[DVector<f64>]) -> f64 {
        let mut z = DVector::zeros(self.d * (self.n + 1));
        z.rows_mut(0, self.d).copy_from(x0);
        for (k, uk) in u.iter().enumerate() {
            z.rows_mut(self.d * (1 + k), self.d).copy_from(uk);
        }
        (&self.design * z - &self.target).norm_squared()
    }

    /// Certified global minimum via normal equations; errors with
    /// [`Error::NonUnique`] when the quadratic form is rank deficient, which
    /// is exactly the degenerate case (Q0 = 0 with an unobservable initial
    /// direction) that the observability criterion rules out.
    pub fn minimize(&self) -> Result<OracleSolution> {
        let h = self.design.transpose() * &self.design;
        let b = self.design.transpose() * &self.target;
        let eig = h.clone().symmetric_eigen();
        let max = eig.eigenvalues.amax();
        let min = eig.eigenvalues.min();
        if !(min > 1e-10 * max) {
            return Err(Error::NonUnique(format!(
                "discretized quadratic form is rank deficient (eigenvalue ratio {:.3e})",
                min / max
            )));
        }
        let z = h.cholesky().ok_or_else(|| {
            Error::NonUnique("normal equations not positive definite".into())
        })?
        .solve(&b);
        Ok(OracleSolution {
            cost: (&self.design * &z - &self.target).norm_squared(),
            x0: DVector::from_column_slice(&z.as_slice()[0..self.d]),
            u: (0..self.n)
                .map(|k| {
                    DVector::from_column_slice(
                        &z.as_slice()[self.d * (1 + k)..self.d * (2 + k)],
                    )
                })
                .collect(),
        })
    }

    /// Minimum over the controls with x0 held fixed.
    pub fn minimize_fixed_x0(&self, x0: &DVector<f64>) -> Result<f64> {
        let d = self.d;
        let cols = self.design.ncols();
        let a_x0 = self.design.columns(0, d);
        let a_u = self.design.columns(d, cols - d).into_owned();
        let y = &self.target - a_x0 * x0;
        let h = a_u.transpose() * &a_u;
        let eig = h.clone().symmetric_eigen();
        if !(eig.eigenvalues.min() > 1e-12 * eig.eigenvalues.amax()) {
            return Err(Error::NonUnique(
                "control block of the quadratic form is rank deficient".into(),
            ));
        }
        let zu = h
            .cholesky()
            .ok_or_else(|| Error::NonUnique("control normal equations not PD".into()))?
            .solve(&(a_u.transpose() * &y));
        Ok((a_u * zu - y).norm_squared())
    }
}

/// Global minimum of the discretized cost over (x0, piecewise-constant u).
pub fn brute_force_min(
    model: &dyn Model,
    theta: &DVector<f64>,
    lambda: f64,
    q0: Option<&DMatrix<f64>>,
    zeta: &dyn OutputSignal,
    n: usize,
    t_end: f64,
) -> Result<OracleSolution> {
    DiscretizedLQ::build(model, theta, lambda, q0, zeta, n, t_end, default_refine(n))?
        .minimize()
}

/// Minimum over the controls only, realizing the inner infimum of the
/// profiled criterion at a fixed initial state.
pub fn brute_force_fixed_x0(
    model: &dyn Model,
    theta: &DVector<f64>,
    lambda: f64,
    x0: &DVector<f64>,
    zeta: &dyn OutputSignal,
    n: usize,
    t_end: f64,
) -> Result<f64> {
    DiscretizedLQ::build(model, theta, lambda, None, zeta, n, t_end, default_refine(n))?
        .minimize_fixed_x0(x0)
}

fn default_refine(n: usize) -> usize {
    // keep the quadrature grid around a thousand nodes regardless of n
    (1000 / n).clamp(2, 16)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dkf::{criterion_s, integrate_adjoint, smooth_trajectory};
    use crate::grid::TimeGrid;
    use crate::model::{ClosureModel, Model, ToyModel};
    use crate::ode::duhamel_solution;
    use crate::rng::Rng;
    use crate::signal::FnSignal;
    use approx::assert_relative_eq;

    fn scalar_decay() -> ClosureModel {
        ClosureModel {
            name: "decay".into(),
            d: 1,
            d_obs: 1,
            p: 1,
            domain: vec![(0.1, 3.0)],
            a: Box::new(|_, th| DMatrix::from_element(1, 1, -th[0])),
            r: Box::new(|_, _| DVector::zeros(1)),
            c: DMatrix::identity(1, 1),
            da: Box::new(|_, _| vec![DMatrix::from_element(1, 1, -1.0)]),
            dr: Box::new(|_, _| DMatrix::zeros(1, 1)),
            autonomous: true,
        }
    }

    fn smooth_probe(rng: &mut Rng, dim: usize) -> FnSignal<impl Fn(f64) -> DVector<f64> + Sync> {
        let a: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
        let b: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
        let w: Vec<f64> = (0..dim).map(|_| rng.uniform_in(0.3, 1.2)).collect();
        FnSignal {
            dim,
            f: move |t: f64| {
                DVector::from_iterator(
                    a.len(),
                    a.iter()
                        .zip(&b)
                        .zip(&w)
                        .map(|((ai, bi), wi)| ai * (wi * t).sin() + bi),
                )
            },
        }
    }

    #[test]
    fn exact_data_recovers_zero_cost_and_x0() {
        let m = ToyModel { perturbed: false };
        let theta = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let x0_star = DVector::from_row_slice(&[100.0, 0.0, 0.0]);
        // closed-form output of the triangular system from (100, 0, 0):
        // x2 = 100 k1/(k1+k2) (1 - e^{-(k1+k2)t}), x3 likewise with k2
        let (k1, k2) = (theta[0], theta[1]);
        let zeta = FnSignal {
            dim: 2,
            f: move |t: f64| {
                let decay = 1.0 - (-(k1 + k2) * t).exp();
                DVector::from_row_slice(&[
                    100.0 * k1 / (k1 + k2) * decay,
                    100.0 * k2 / (k1 + k2) * decay,
                ])
            },
        };
        let sol = brute_force_min(&m, &theta, 1.0, None, &zeta, 40, 20.0).unwrap();
        assert!(sol.cost.abs() < 1e-8, "cost {}", sol.cost);
        assert_relative_eq!(sol.x0, x0_star, epsilon = 1e-6, max_relative = 1e-6);
    }

    #[test]
    fn grid_convergence_of_the_minimum() {
        let m = scalar_decay();
        let theta = DVector::from_element(1, 1.0);
        let mut rng = Rng::new(7);
        let zeta = smooth_probe(&mut rng, 1);
        let lo = brute_force_min(&m, &theta, 1.0, None, &zeta, 100, 3.0)
            .unwrap()
            .cost;
        let hi = brute_force_min(&m, &theta, 1.0, None, &zeta, 200, 3.0)
            .unwrap()
            .cost;
        assert!((lo - hi).abs() <= 1e-4 * (1.0 + hi), "{lo} vs {hi}");
    }

    #[test]
    fn degenerate_toy_reports_non_uniqueness() {
        // k1 = k2 = 0 makes the first state invisible and unpriced
        let m = ToyModel { perturbed: false };
        let theta = DVector::from_row_slice(&[1e-4, 1e-4]);
        // exactly zero rates lie outside the domain; use a closure clone at 0
        let m0 = ClosureModel {
            name: "toy-degenerate".into(),
            d: 3,
            d_obs: 2,
            p: 2,
            domain: vec![(-1.0, 1.0); 2],
            a: Box::new(|_, _| DMatrix::zeros(3, 3)),
            r: Box::new(|_, _| DVector::zeros(3)),
            c: m.obs_matrix(),
            da: Box::new(|_, _| vec![DMatrix::zeros(3, 3); 2]),
            dr: Box::new(|_, _| DMatrix::zeros(3, 2)),
            autonomous: true,
        };
        let _ = theta;
        let zeta = FnSignal {
            dim: 2,
            f: |t: f64| DVector::from_row_slice(&[t.sin(), t.cos()]),
        };
        let out = brute_force_min(
            &m0,
            &DVector::zeros(2),
            1.0,
            None,
            &zeta,
            20,
            5.0,
        );
        match out {
            Err(Error::NonUnique(_)) => {}
            other => panic!("expected non-uniqueness, got {:?}", other.map(|s| s.cost)),
        }
    }

    #[test]
    fn fixed_x0_at_the_joint_minimizer_reproduces_the_joint_minimum() {
        let m = scalar_decay();
        let theta = DVector::from_element(1, 0.8);
        let mut rng = Rng::new(11);
        let zeta = smooth_probe(&mut rng, 1);
        let lq = DiscretizedLQ::build(&m, &theta, 0.5, None, &zeta, 80, 4.0, 8).unwrap();
        let sol = lq.minimize().unwrap();
        let fixed = lq.minimize_fixed_x0(&sol.x0).unwrap();
        assert_relative_eq!(fixed, sol.cost, epsilon = 1e-9 * (1.0 + sol.cost));
    }

    #[test]
    fn large_lambda_approaches_the_uncontrolled_residual() {
        let m = scalar_decay();
        let theta = DVector::from_element(1, 1.2);
        let x0 = DVector::from_element(1, 2.0);
        let mut rng = Rng::new(3);
        let zeta = smooth_probe(&mut rng, 1);
        let t_end = 3.0;
        let cost = brute_force_fixed_x0(&m, &theta, 1e6, &x0, &zeta, 60, t_end).unwrap();

        // u = 0 residual by fine quadrature
        let grid = TimeGrid::dense(t_end, 4001).unwrap();
        let tr = duhamel_solution(&m, &theta, &x0, None, &grid).unwrap();
        let nodes = grid.nodes();
        let mut resid = 0.0;
        for i in 1..nodes.len() {
            let f = |j: usize| (zeta.eval(nodes[j])[0] - tr.values[j][0]).powi(2);
            resid += 0.5 * (f(i - 1) + f(i)) * (nodes[i] - nodes[i - 1]);
        }
        assert!(
            (cost - resid).abs() <= 0.01 * resid,
            "cost {cost} vs residual {resid}"
        );
    }

    #[test]
    fn matches_hand_derived_euler_lagrange_solution() {
        // d=1, A=0, r=0, C=1, zeta = 1, x0 = 0, T=1: minimize
        // int (1-x)^2 + lambda x'^2 with x(0)=0. Euler-Lagrange gives
        // lambda x'' = x - 1 with natural condition x'(1) = 0, so
        // x(t) = 1 - cosh(wt) + tanh(w) sinh(wt), w = 1/sqrt(lambda).
        let lambda = 0.5f64;
        let w = 1.0 / lambda.sqrt();
        let y = |t: f64| -((w * t).cosh()) + w.tanh() * (w * t).sinh(); // x - 1
        let dy = |t: f64| w * (-(w * t).sinh() + w.tanh() * (w * t).cosh());
        // J = int y^2 + lambda y'^2 via Simpson on a fine grid
        let n = 20000;
        let h = 1.0 / n as f64;
        let f = |t: f64| y(t) * y(t) + lambda * dy(t) * dy(t);
        let mut j_star = f(0.0) + f(1.0);
        for i in 1..n {
            j_star += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        j_star *= h / 3.0;

        let m = ClosureModel {
            name: "integrator".into(),
            d: 1,
            d_obs: 1,
            p: 1,
            domain: vec![(-1.0, 1.0)],
            a: Box::new(|_, _| DMatrix::zeros(1, 1)),
            r: Box::new(|_, _| DVector::zeros(1)),
            c: DMatrix::identity(1, 1),
            da: Box::new(|_, _| vec![DMatrix::zeros(1, 1)]),
            dr: Box::new(|_, _| DMatrix::zeros(1, 1)),
            autonomous: true,
        };
        let one = FnSignal {
            dim: 1,
            f: |_t| DVector::from_element(1, 1.0),
        };
        let cost = brute_force_fixed_x0(
            &m,
            &DVector::zeros(1),
            lambda,
            &DVector::zeros(1),
            &one,
            200,
            1.0,
        )
        .unwrap();
        assert!(
            (cost - j_star).abs() <= 1e-4 * (1.0 + j_star),
            "oracle {cost} vs Euler-Lagrange {j_star}"
        );
    }

    #[test]
    fn cost_of_matches_direct_quadrature() {
        let m = scalar_decay();
        let theta = DVector::from_element(1, 1.0);
        let mut rng = Rng::new(21);
        let zeta = smooth_probe(&mut rng, 1);
        let q0 = DMatrix::from_element(1, 1, 0.7);
        let n = 50;
        let t_end = 2.0;
        let lambda = 0.8;
        let lq =
            DiscretizedLQ::build(&m, &theta, lambda, Some(&q0), &zeta, n, t_end, 16).unwrap();
        let x0 = DVector::from_element(1, 1.3);
        let u: Vec<DVector<f64>> = (0..n)
            .map(|k| DVector::from_element(1, (k as f64 * 0.3).sin()))
            .collect();

        // direct: integrate the controlled state on a fine grid and quadrate
        let grid = TimeGrid::dense(t_end, 8001).unwrap();
        let dt_ctl = t_end / n as f64;
        let u_fun = |t: f64| {
            let k = ((t / dt_ctl) as usize).min(n - 1);
            u[k].clone()
        };
        let tr = duhamel_solution(&m, &theta, &x0, Some(&u_fun), &grid).unwrap();
        let nodes = grid.nodes();
        let mut direct = (x0.transpose() * &q0 * &x0)[(0, 0)];
        let mut acc = 0.0;
        for i in 1..nodes.len() {
            let f = |j: usize| {
                let t = nodes[j];
                (zeta.eval(t)[0] - tr.values[j][0]).powi(2) + lambda * u_fun(t)[0].powi(2)
            };
            acc += 0.5 * (f(i - 1) + f(i)) * (nodes[i] - nodes[i - 1]);
        }
        direct += acc;
        let disc = lq.cost_of(&x0, &u);
        assert!(
            (disc - direct).abs() <= 1e-4 * (1.0 + direct),
            "discretized {disc} vs direct {direct}"
        );
    }

    #[test]
    fn closed_form_criterion_matches_oracle_on_random_instances() {
        // the main equivalence: S from the Riccati machinery equals the
        // certified quadratic minimum, and the minimizing x0 agrees
        let mut rng = Rng::new(99);
        for trial in 0..6 {
            let t_end = 4.0;
            let lambda = [0.1, 1.0, 10.0][trial % 3];
            let m = scalar_decay();
            let theta = DVector::from_element(1, rng.uniform_in(0.3, 2.0));
            let zeta = smooth_probe(&mut rng, 1);
            let q0 = DMatrix::identity(1, 1);
            let grid = TimeGrid::dense(t_end, 3001).unwrap();
            let cv = criterion_s(&m, &theta, lambda, &q0, &zeta, &grid).unwrap();
            let sol = brute_force_min(&m, &theta, lambda, Some(&q0), &zeta, 150, t_end).unwrap();
            assert!(
                (cv.s - sol.cost).abs() <= 1e-4 * (1.0 + sol.cost.abs()),
                "trial {trial}: S {} vs oracle {}",
                cv.s,
                sol.cost
            );
            let path = integrate_adjoint(&m, &theta, lambda, &q0, &zeta, &grid).unwrap();
            let x0_hat = smooth_trajectory(&m, &theta, &path).unwrap().x0_hat;
            assert!(
                (x0_hat[0] - sol.x0[0]).abs() <= 1e-3 * (1.0 + sol.x0[0].abs()),
                "trial {trial}: x0 {} vs oracle {}",
                x0_hat[0],
                sol.x0[0]
            );
        }
    }

    #[test]
    fn toy_model_closed_form_matches_oracle() {
        let m = ToyModel { perturbed: false };
        let theta = DVector::from_row_slice(&[0.08, 0.04]);
        let mut rng = Rng::new(42);
        let zeta = smooth_probe(&mut rng, 2);
        let q0 = DMatrix::identity(3, 3);
        let t_end = 5.0;
        let grid = TimeGrid::dense(t_end, 3001).unwrap();
        for lambda in [0.5, 5.0] {
            let cv = criterion_s(&m, &theta, lambda, &q0, &zeta, &grid).unwrap();
            let sol = brute_force_min(&m, &theta, lambda, Some(&q0), &zeta, 120, t_end).unwrap();
            assert!(
                (cv.s - sol.cost).abs() <= 1e-4 * (1.0 + sol.cost.abs()),
                "lambda {lambda}: S {} vs oracle {}",
                cv.s,
                sol.cost
            );
        }
    }

    #[test]
    fn oracle_control_matches_smoothed_optimal_control() {
        let m = scalar_decay();
        let theta = DVector::from_element(1, 1.0);
        let mut rng = Rng::new(5);
        let zeta = smooth_probe(&mut rng, 1);
        let q0 = DMatrix::identity(1, 1);
        let t_end = 3.0;
        let lambda = 1.0;
        let grid = TimeGrid::dense(t_end, 3001).unwrap();
        let path = integrate_adjoint(&m, &theta, lambda, &q0, &zeta, &grid).unwrap();
        let smooth = smooth_trajectory(&m, &theta, &path).unwrap();
        let sol = brute_force_min(&m, &theta, lambda, Some(&q0), &zeta, 150, t_end).unwrap();
        let dt = t_end / sol.u.len() as f64;
        let mut sq = 0.0;
        for (k, uk) in sol.u.iter().enumerate() {
            let mid = (k as f64 + 0.5) * dt;
            sq += (uk[0] - smooth.u_at(mid)[0]).powi(2);
        }
        let rms = (sq / sol.u.len() as f64).sqrt();
        assert!(rms < 5e-3, "control RMS gap {rms}");
    }
}
