//! Fixed-step classical Runge-Kutta integration, resolvants and Duhamel
//! superposition for the linear systems in this crate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{MatrixTrajectory, TimeGrid, Trajectory};
use crate::model::Model;

/// One classical RK4 step of size `dt` starting at `(t, y)`.
pub(crate) fn rk4_step<F>(rhs: &mut F, t: f64, y: &DVector<f64>, dt: f64) -> DVector<f64>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = rhs(t, y);
    let k2 = rhs(t + 0.5 * dt, &(y + &k1 * (0.5 * dt)));
    let k3 = rhs(t + 0.5 * dt, &(y + &k2 * (0.5 * dt)));
    let k4 = rhs(t + dt, &(y + &k3 * dt));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Integrates x' = rhs(t, x) with one RK4 step per grid interval.
///
/// Deterministic for fixed inputs; errors with the offending node index if
/// the state stops being finite.
pub fn solve_ivp<F>(mut rhs: F, x0: &DVector<f64>, grid: &TimeGrid) -> Result<Trajectory>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let nodes = grid.nodes();
    let mut values = Vec::with_capacity(nodes.len());
    values.push(x0.clone());
    for i in 1..nodes.len() {
        let t = nodes[i - 1];
        let dt = nodes[i] - t;
        let next = rk4_step(&mut rhs, t, &values[i - 1], dt);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { node: i, t: nodes[i] });
        }
        values.push(next);
    }
    Trajectory::new(grid.clone(), values)
}

/// Resolvant Phi_theta(t, 0): columns solve the homogeneous ODE from I_d.
pub fn resolvant(
    model: &dyn Model,
    theta: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<MatrixTrajectory> {
    let d = model.state_dim();
    let mut rhs = |t: f64, y: &DVector<f64>| {
        let (a, _) = model.system(t, theta);
        let phi = DMatrix::from_column_slice(d, d, y.as_slice());
        let dphi = a * phi;
        DVector::from_column_slice(dphi.as_slice())
    };
    let y0 = DVector::from_column_slice(DMatrix::<f64>::identity(d, d).as_slice());
    let nodes = grid.nodes();
    let mut values = Vec::with_capacity(nodes.len());
    let mut y = y0;
    values.push(DMatrix::identity(d, d));
    for i in 1..nodes.len() {
        let t = nodes[i - 1];
        y = rk4_step(&mut rhs, t, &y, nodes[i] - t);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { node: i, t: nodes[i] });
        }
        values.push(DMatrix::from_column_slice(d, d, y.as_slice()));
    }
    Ok(MatrixTrajectory {
        grid: grid.clone(),
        values,
    })
}

/// Solution of the perturbed system x' = A x + r + u from x0 (u optional).
pub fn duhamel_solution(
    model: &dyn Model,
    theta: &DVector<f64>,
    x0: &DVector<f64>,
    control: Option<&dyn Fn(f64) -> DVector<f64>>,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    solve_ivp(
        |t, x| {
            let (a, r) = model.system(t, theta);
            let mut dx = a * x + r;
            if let Some(u) = control {
                dx += u(t);
            }
            dx
        },
        x0,
        grid,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClosureModel, ToyModel};
    use approx::assert_relative_eq;

    #[test]
    fn constant_rhs_stays_constant() {
        let grid = TimeGrid::dense(1.0, 11).unwrap();
        let x0 = DVector::from_row_slice(&[3.0, -2.0]);
        let tr = solve_ivp(|_, x| DVector::zeros(x.len()), &x0, &grid).unwrap();
        for v in &tr.values {
            assert_eq!(v, &x0);
        }
    }

    #[test]
    fn exponential_decay_accuracy() {
        let grid = TimeGrid::dense(1.0, 101).unwrap();
        let tr = solve_ivp(|_, x| -x, &DVector::from_element(1, 1.0), &grid).unwrap();
        assert_relative_eq!(tr.last()[0], (-1.0f64).exp(), epsilon = 1e-8);
    }

    #[test]
    fn rk4_exact_on_cubic_polynomials() {
        // x' = (0 0; 1 0) x has polynomial solutions; RK4 is exact up to degree 4
        let grid = TimeGrid::dense(2.0, 5).unwrap();
        let tr = solve_ivp(
            |_, x| DVector::from_row_slice(&[0.0, x[0]]),
            &DVector::from_row_slice(&[1.0, 0.0]),
            &grid,
        )
        .unwrap();
        assert_relative_eq!(tr.last()[1], 2.0, epsilon = 1e-13);
    }

    #[test]
    fn divergence_names_the_node() {
        let grid = TimeGrid::dense(10.0, 21).unwrap();
        let res = solve_ivp(
            |_, x| x.map(|v| v * v),
            &DVector::from_element(1, 5.0),
            &grid,
        );
        match res {
            Err(Error::Divergence { node, .. }) => assert!(node > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn resolvant_identity_at_zero_and_diagonal_exponential() {
        let m = ClosureModel {
            name: "diag".into(),
            d: 2,
            d_obs: 2,
            p: 1,
            domain: vec![(-2.0, 2.0)],
            a: Box::new(|_t, th| DMatrix::from_diagonal(&DVector::from_row_slice(&[th[0], -th[0]]))),
            r: Box::new(|_, _| DVector::zeros(2)),
            c: DMatrix::identity(2, 2),
            da: Box::new(|_, _| vec![DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, -1.0]))]),
            dr: Box::new(|_, _| DMatrix::zeros(2, 1)),
            autonomous: true,
        };
        let theta = DVector::from_element(1, 0.7);
        let grid = TimeGrid::dense(1.0, 201).unwrap();
        let phi = resolvant(&m, &theta, &grid).unwrap();
        assert_eq!(phi.values[0], DMatrix::identity(2, 2));
        let end = phi.last();
        assert_relative_eq!(end[(0, 0)], 0.7f64.exp(), epsilon = 1e-8);
        assert_relative_eq!(end[(1, 1)], (-0.7f64).exp(), epsilon = 1e-8);
        assert!(end[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn toy_resolvant_columns_sum_to_one() {
        // columns of A sum to zero, so x1 + x2 + x3 is conserved
        let m = ToyModel { perturbed: false };
        let theta = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let grid = TimeGrid::dense(100.0, 2001).unwrap();
        let phi = resolvant(&m, &theta, &grid).unwrap();
        for mat in phi.values.iter().step_by(400) {
            for j in 0..3 {
                let s: f64 = mat.column(j).iter().sum();
                assert_relative_eq!(s, 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn toy_equilibrium_is_constant() {
        // A (0, 0, 100)^T = 0, so that initial point does not move
        let m = ToyModel { perturbed: false };
        let theta = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let grid = TimeGrid::dense(100.0, 2001).unwrap();
        let x0 = DVector::from_row_slice(&[0.0, 0.0, 100.0]);
        let tr = duhamel_solution(&m, &theta, &x0, None, &grid).unwrap();
        assert_relative_eq!(tr.last(), &x0, epsilon = 1e-10);
    }

    #[test]
    fn scalar_integrator_of_unit_control() {
        let m = ClosureModel::scalar_growth((-1.0, 1.0));
        let theta = DVector::from_element(1, 0.0);
        let grid = TimeGrid::dense(2.0, 101).unwrap();
        let one = |_t: f64| DVector::from_element(1, 1.0);
        let tr = duhamel_solution(&m, &theta, &DVector::zeros(1), Some(&one), &grid).unwrap();
        assert_relative_eq!(tr.at(1.37)[0], 1.37, epsilon = 1e-10);
        assert_relative_eq!(tr.last()[0], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn duhamel_superposition_matches_quadrature() {
        // X(t) = Phi(t,0) x0 + int Phi(t,s)(r + u) ds for a time-varying system
        let m = ClosureModel {
            name: "tv".into(),
            d: 2,
            d_obs: 2,
            p: 1,
            domain: vec![(0.0, 1.0)],
            a: Box::new(|t, th| {
                DMatrix::from_row_slice(2, 2, &[-0.3 * th[0], 0.2 * t, 0.0, -0.1])
            }),
            r: Box::new(|t, _| DVector::from_row_slice(&[0.1 * t.sin(), 0.05])),
            c: DMatrix::identity(2, 2),
            da: Box::new(|_, _| vec![DMatrix::from_row_slice(2, 2, &[-0.3, 0.0, 0.0, 0.0])]),
            dr: Box::new(|_, _| DMatrix::zeros(2, 1)),
            autonomous: false,
        };
        let theta = DVector::from_element(1, 0.8);
        let grid = TimeGrid::dense(2.0, 801).unwrap();
        let u = |t: f64| DVector::from_row_slice(&[0.5 * (1.3 * t).cos(), 0.1]);
        let x0 = DVector::from_row_slice(&[1.0, -0.5]);
        let direct = duhamel_solution(&m, &theta, &x0, Some(&u), &grid).unwrap();

        // superposition via Phi(t,s) = Phi(t,0) Phi(s,0)^-1, trapezoid quadrature
        let phi = resolvant(&m, &theta, &grid).unwrap();
        let t_probe = 2.0;
        let phi_t = phi.last().clone();
        let nodes = grid.nodes();
        let mut integral = DVector::zeros(2);
        let mut prev: Option<DVector<f64>> = None;
        for (i, &s) in nodes.iter().enumerate() {
            let (_, r) = m.system(s, &theta);
            let f = &phi_t
                * phi.values[i].clone().try_inverse().unwrap()
                * (r + u(s));
            if let Some(pf) = prev {
                integral += (pf + &f) * (0.5 * (s - nodes[i - 1]));
            }
            prev = Some(f);
        }
        let superposed = &phi_t * &x0 + integral;
        let err = (direct.at(t_probe) - &superposed).norm() / superposed.norm();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn linearity_under_initial_shift() {
        let m = ToyModel { perturbed: false };
        let theta = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let grid = TimeGrid::dense(50.0, 1001).unwrap();
        let x0 = DVector::from_row_slice(&[100.0, 5.0, -3.0]);
        let mu = DVector::from_row_slice(&[10.0, -2.0, 4.0]);
        let full = duhamel_solution(&m, &theta, &x0, None, &grid).unwrap();
        let shifted = duhamel_solution(&m, &theta, &(&x0 - &mu), None, &grid).unwrap();
        let phi = resolvant(&m, &theta, &grid).unwrap();
        for i in (0..grid.len()).step_by(200) {
            let expect = &full.values[i] - &phi.values[i] * &mu;
            assert_relative_eq!(&shifted.values[i], &expect, epsilon = 1e-8);
        }
    }
}
