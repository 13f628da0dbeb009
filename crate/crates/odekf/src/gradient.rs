//! Analytic gradient of the criterion S by integrating the sensitivity
//! equations of the stacked adjoint system (h; E by columns).

use nalgebra::{DMatrix, DVector};

use crate::dkf::AdjointPath;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{check_theta, Model};
use crate::ode::rk4_step;
use crate::signal::OutputSignal;

/// Stacked adjoint state Q = (h; E columns) sampled on a grid, together with
/// its parameter sensitivities dQ/dtheta.
#[derive(Debug, Clone)]
pub struct StackedAdjoint {
    pub grid: TimeGrid,
    /// Per-node D-vectors with D = d + d^2.
    pub q: Vec<DVector<f64>>,
    /// Per-node D x p sensitivity matrices.
    pub sensitivity: Vec<DMatrix<f64>>,
    pub lambda: f64,
}

/// The three summands of the gradient formula.
#[derive(Debug, Clone)]
pub struct GradientValue {
    pub grad: DVector<f64>,
    /// -2 int (dr^T h + dh^T r + dh^T h / lambda) dt, per parameter.
    pub integral_term: DVector<f64>,
    /// -2 dh(T)^T E(T)^-1 h(T), per parameter.
    pub final_state_term: DVector<f64>,
    /// h(T)^T E(T)^-1 dE(T) E(T)^-1 h(T) from the inverse derivative, per parameter.
    pub einv_term: DVector<f64>,
}

/// Stacks (h, E) column-major into a single D-vector.
pub fn stack_q(h: &DVector<f64>, e: &DMatrix<f64>) -> DVector<f64> {
    let d = h.len();
    let mut q = DVector::zeros(d + d * d);
    q.rows_mut(0, d).copy_from(h);
    q.rows_mut(d, d * d)
        .copy_from(&DVector::from_column_slice(e.as_slice()));
    q
}

/// Inverse of [`stack_q`].
pub fn unstack_q(q: &DVector<f64>, d: usize) -> (DVector<f64>, DMatrix<f64>) {
    (
        DVector::from_column_slice(&q.as_slice()[0..d]),
        DMatrix::from_column_slice(d, d, &q.as_slice()[d..d + d * d]),
    )
}

/// Vector field F(Q, theta, t) of the stacked adjoint ODE: the h-block is
/// -(A^T + E/lambda) h - (C^T zeta + E r) and the E-block stacks
/// C^T C - A^T E - E A - E^2/lambda by columns.
pub fn adjoint_vector_field(
    q: &DVector<f64>,
    t: f64,
    model: &dyn Model,
    theta: &DVector<f64>,
    lambda: f64,
    zeta: &dyn OutputSignal,
) -> DVector<f64> {
    let d = model.state_dim();
    let (h, e) = unstack_q(q, d);
    let (a, r) = model.system(t, theta);
    let c = model.obs_matrix();
    let z = zeta.eval(t);
    let dh = -(a.transpose() * &h) - (&e * &h) / lambda - c.transpose() * z - &e * r;
    let de = c.transpose() * &c - a.transpose() * &e - &e * &a - (&e * &e) / lambda;
    stack_q(&dh, &de)
}

/// Joint RK4 integration of (Q, dQ/dtheta) from (Q(0), 0) with the gradient
/// integrals accumulated along the way.
fn integrate_joint(
    model: &dyn Model,
    theta: &DVector<f64>,
    lambda: f64,
    q0: &DMatrix<f64>,
    zeta: &dyn OutputSignal,
    grid: &TimeGrid,
    keep_path: bool,
) -> Result<(StackedAdjoint, DVector<f64>, [f64; 3])> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be > 0, got {lambda}")));
    }
    check_theta(model, theta)?;
    let d = model.state_dim();
    let p = model.param_dim();
    let dq = d + d * d;
    // layout: Q, then p sensitivity columns, then p gradient accumulators,
    // then the three criterion accumulators (|zeta|^2, r.h, |h|^2)
    let dim = dq * (1 + p) + p + 3;
    let c = model.obs_matrix();
    let ctc = c.transpose() * &c;
    let ct = c.transpose();

    let mut rhs = |t: f64, y: &DVector<f64>| {
        let h = DVector::from_column_slice(&y.as_slice()[0..d]);
        let e = DMatrix::from_column_slice(d, d, &y.as_slice()[d..dq]);
        let (a, r) = model.system(t, theta);
        let (da, dr) = model.system_jacobians(t, theta);
        let z = zeta.eval(t);
        let at = a.transpose();

        let mut out = DVector::zeros(dim);
        let dh = -(&at * &h) - (&e * &h) / lambda - (&ct * &z) - (&e * &r);
        let de = &ctc - &at * &e - &e * &a - (&e * &e) / lambda;
        out.rows_mut(0, d).copy_from(&dh);
        out.rows_mut(d, d * d)
            .copy_from(&DVector::from_column_slice(de.as_slice()));

        for j in 0..p {
            let off = dq * (1 + j);
            let hj = DVector::from_column_slice(&y.as_slice()[off..off + d]);
            let ej = DMatrix::from_column_slice(d, d, &y.as_slice()[off + d..off + dq]);
            let daj = &da[j];
            let drj = dr.column(j);
            let dajt = daj.transpose();

            let dhj = -(&dajt * &h)
                - (&at * &hj)
                - (&e * &hj + &ej * &h) / lambda
                - (&ej * &r + &e * drj);
            let dej = -(&dajt * &e)
                - (&at * &ej)
                - (&ej * &a)
                - (&e * daj)
                - (&ej * &e + &e * &ej) / lambda;
            out.rows_mut(off, d).copy_from(&dhj);
            out.rows_mut(off + d, d * d)
                .copy_from(&DVector::from_column_slice(dej.as_slice()));

            // gradient accumulator: -2 (dr_j^T h + r^T h_j + h^T h_j / lambda)
            out[dq * (1 + p) + j] =
                -2.0 * (drj.dot(&h) + r.dot(&hj) + h.dot(&hj) / lambda);
        }
        let acc = dq * (1 + p) + p;
        out[acc] = z.norm_squared();
        out[acc + 1] = r.dot(&h);
        out[acc + 2] = h.norm_squared();
        out
    };

    let mut y = DVector::zeros(dim);
    y.rows_mut(d, d * d)
        .copy_from(&DVector::from_column_slice(q0.as_slice()));

    let nodes = grid.nodes();
    let mut q_path = Vec::new();
    let mut s_path = Vec::new();
    if keep_path {
        q_path.push(DVector::from_column_slice(&y.as_slice()[0..dq]));
        s_path.push(DMatrix::zeros(dq, p));
    }
    for i in 1..nodes.len() {
        let t = nodes[i - 1];
        y = rk4_step(&mut rhs, t, &y, nodes[i] - t);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { node: i, t: nodes[i] });
        }
        if keep_path || i == nodes.len() - 1 {
            q_path.push(DVector::from_column_slice(&y.as_slice()[0..dq]));
            let mut s = DMatrix::zeros(dq, p);
            for j in 0..p {
                let off = dq * (1 + j);
                s.column_mut(j)
                    .copy_from(&DVector::from_column_slice(&y.as_slice()[off..off + dq]));
            }
            s_path.push(s);
        }
    }
    let acc = DVector::from_column_slice(&y.as_slice()[dq * (1 + p)..dq * (1 + p) + p]);
    let crit = [y[dim - 3], y[dim - 2], y[dim - 1]];
    Ok((
        StackedAdjoint {
            grid: grid.clone(),
            q: q_path,
            sensitivity: s_path,
            lambda,
        },
        acc,
        crit,
    ))
}

/// Full-path sensitivities (Q, dQ/dtheta) at every grid node.
pub fn integrate_sensitivities(
    model: &dyn Model,
    theta: &DVector<f64>,
    lambda: f64,
    q0: &DMatrix<f64>,
    zeta: &dyn OutputSignal,
    grid: &TimeGrid,
) -> Result<StackedAdjoint> {
    integrate_joint(model, theta, lambda, q0, zeta, grid, true).map(|(p, _, _)| p)
}

/// Analytic gradient of S at theta, assembled from the sensitivity pass:
/// the running integral term plus the two final-time terms coming from
/// h(T)^T E(T)^-1 h(T).
pub fn grad_s(
    model: &dyn Model,
    theta: &DVector<f64>,
    lambda: f64,
    q0: &DMatrix<f64>,
    zeta: &dyn OutputSignal,
    grid: &TimeGrid,
) -> Result<GradientValue> {
    criterion_and_grad(model, theta, lambda, q0, zeta, grid).map(|(_, g)| g)
}

/// Criterion value and gradient from a single joint integration; the cheap
/// path for gradient-based minimization of S.
pub fn criterion_and_grad(
    model: &dyn Model,
    theta: &DVector<f64>,
    lambda: f64,
    q0: &DMatrix<f64>,
    zeta: &dyn OutputSignal,
    grid: &TimeGrid,
) -> Result<(f64, GradientValue)> {
    let d = model.state_dim();
    let p = model.param_dim();
    let (path, acc, crit) = integrate_joint(model, theta, lambda, q0, zeta, grid, false)?;
    let (h_t, e_t) = unstack_q(path.q.last().unwrap(), d);
    let e_sym = (&e_t + e_t.transpose()) * 0.5;
    let eig = e_sym.symmetric_eigen();
    let abs_max = eig.eigenvalues.iter().map(|l| l.abs()).fold(0.0f64, f64::max);
    let abs_min = eig
        .eigenvalues
        .iter()
        .map(|l| l.abs())
        .fold(f64::INFINITY, f64::min);
    if !(abs_min > 0.0 && abs_max / abs_min < crate::dkf::E_CONDITION_LIMIT) {
        return Err(Error::Observability(
            "E(T) singular while assembling the gradient".into(),
        ));
    }
    let solve = |v: &DVector<f64>| -> DVector<f64> {
        let proj = eig.eigenvectors.transpose() * v;
        let scaled = DVector::from_iterator(
            v.len(),
            proj.iter().zip(eig.eigenvalues.iter()).map(|(x, l)| x / l),
        );
        &eig.eigenvectors * scaled
    };
    let w = solve(&h_t); // E(T)^-1 h(T)

    let sens_t = path.sensitivity.last().unwrap();
    let mut final_state_term = DVector::zeros(p);
    let mut einv_term = DVector::zeros(p);
    for j in 0..p {
        let col = sens_t.column(j);
        let hj = DVector::from_column_slice(&col.as_slice()[0..d]);
        let ej = DMatrix::from_column_slice(d, d, &col.as_slice()[d..d + d * d]);
        final_state_term[j] = -2.0 * hj.dot(&w);
        einv_term[j] = w.dot(&(&ej * &w));
    }
    let s = crit[0] - 2.0 * crit[1] - crit[2] / lambda - h_t.dot(&w);
    Ok((
        s,
        GradientValue {
            grad: &acc + &final_state_term + &einv_term,
            integral_term: acc,
            final_state_term,
            einv_term,
        },
    ))
}

/// Central finite differences of [`crate::dkf::criterion_s`]; fallback for
/// models without analytic Jacobians and oracle for the analytic gradient.
pub fn grad_s_fd(
    model: &dyn Model,
    theta: &DVector<f64>,
    lambda: f64,
    q0: &DMatrix<f64>,
    zeta: &dyn OutputSignal,
    grid: &TimeGrid,
    rel_step: f64,
) -> Result<DVector<f64>> {
    let p = model.param_dim();
    let mut grad = DVector::zeros(p);
    let domain = model.theta_domain();
    for j in 0..p {
        let step = rel_step * (1.0 + theta[j].abs());
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[j] = (theta[j] + step).min(domain[j].1);
        tm[j] = (theta[j] - step).max(domain[j].0);
        let sp = crate::dkf::criterion_s(model, &tp, lambda, q0, zeta, grid)?.s;
        let sm = crate::dkf::criterion_s(model, &tm, lambda, q0, zeta, grid)?.s;
        grad[j] = (sp - sm) / (tp[j] - tm[j]);
    }
    Ok(grad)
}

/// Checks the sensitivity path against the plain adjoint integration; the
/// E/h parts must agree since they solve the same equations.
pub fn consistency_error(path: &StackedAdjoint, adjoint: &AdjointPath, d: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for (q, (e, h)) in path.q.iter().zip(adjoint.e.iter().zip(adjoint.h.iter())) {
        let (hq, eq) = unstack_q(q, d);
        worst = worst.max((&hq - h).amax());
        worst = worst.max((&eq - e).amax());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dkf::integrate_adjoint;
    use crate::model::{ClosureModel, MethanationModel, Model, ToyModel};
    use crate::rng::Rng;
    use crate::signal::{FnSignal, ZeroSignal};
    use approx::assert_relative_eq;

    #[test]
    fn stack_roundtrip_is_exact() {
        let h = DVector::from_row_slice(&[1.0, -2.0, 3.0]);
        let e = DMatrix::from_row_slice(3, 3, &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let (h2, e2) = unstack_q(&stack_q(&h, &e), 3);
        assert_eq!(h, h2);
        assert_eq!(e, e2);
    }

    #[test]
    fn vector_field_zero_state_leaves_only_ctc() {
        let m = ToyModel { perturbed: false };
        let theta = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let q = DVector::zeros(3 + 9);
        let f = adjoint_vector_field(&q, 0.0, &m, &theta, 1.0, &ZeroSignal(2));
        let (dh, de) = unstack_q(&f, 3);
        assert_eq!(dh, DVector::zeros(3));
        let c = m.obs_matrix();
        assert_relative_eq!(de, c.transpose() * c, epsilon = 1e-14);
    }

    #[test]
    fn scalar_vector_field_hand_expansion() {
        let m = ClosureModel::scalar_growth((-2.0, 2.0));
        let theta = DVector::from_element(1, 0.7);
        let lambda = 2.0;
        let zeta = FnSignal {
            dim: 1,
            f: |_t| DVector::from_element(1, 0.3),
        };
        let (h, e) = (1.5, 0.8);
        let q = DVector::from_row_slice(&[h, e]);
        let f = adjoint_vector_field(&q, 0.0, &m, &theta, lambda, &zeta);
        let a = 0.7;
        assert_relative_eq!(f[0], -(a + e / lambda) * h - 0.3, epsilon = 1e-14);
        assert_relative_eq!(f[1], 1.0 - 2.0 * a * e - e * e / lambda, epsilon = 1e-14);
    }

    #[test]
    fn sensitivity_path_consistent_with_adjoint() {
        let m = ToyModel { perturbed: false };
        let theta = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let grid = crate::grid::TimeGrid::dense(10.0, 401).unwrap();
        let zeta = FnSignal {
            dim: 2,
            f: |t: f64| DVector::from_row_slice(&[(0.2 * t).sin(), 1.0 + 0.1 * t]),
        };
        let q0 = DMatrix::identity(3, 3);
        let stacked = integrate_sensitivities(&m, &theta, 1.0, &q0, &zeta, &grid).unwrap();
        let adj = integrate_adjoint(&m, &theta, 1.0, &q0, &zeta, &grid).unwrap();
        // adjoint path symmetrizes E each step, the stacked pass does not;
        // agreement within RK4 tolerance is the contract
        assert!(consistency_error(&stacked, &adj, 3) < 1e-8);
    }

    #[test]
    fn theta_independent_model_has_zero_sensitivities() {
        let m = ClosureModel {
            name: "const".into(),
            d: 2,
            d_obs: 1,
            p: 1,
            domain: vec![(0.0, 1.0)],
            a: Box::new(|_, _| DMatrix::from_row_slice(2, 2, &[-0.5, 0.2, 0.0, -0.1])),
            r: Box::new(|_, _| DVector::from_row_slice(&[0.1, 0.0])),
            c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            da: Box::new(|_, _| vec![DMatrix::zeros(2, 2)]),
            dr: Box::new(|_, _| DMatrix::zeros(2, 1)),
            autonomous: true,
        };
        let theta = DVector::from_element(1, 0.5);
        let grid = crate::grid::TimeGrid::dense(2.0, 201).unwrap();
        let zeta = FnSignal {
            dim: 1,
            f: |t: f64| DVector::from_element(1, t.cos()),
        };
        let q0 = DMatrix::identity(2, 2);
        let st = integrate_sensitivities(&m, &theta, 1.0, &q0, &zeta, &grid).unwrap();
        for s in &st.sensitivity {
            assert!(s.amax() < 1e-14);
        }
        let g = grad_s(&m, &theta, 1.0, &q0, &zeta, &grid).unwrap();
        assert!(g.grad.amax() < 1e-14);
    }

    #[test]
    fn e_sensitivity_blocks_stay_symmetric() {
        let m = ToyModel { perturbed: false };
        let theta = DVector::from_row_slice(&[0.1, 0.05]);
        let grid = crate::grid::TimeGrid::dense(20.0, 801).unwrap();
        let zeta = FnSignal {
            dim: 2,
            f: |t: f64| DVector::from_row_slice(&[t.sin(), t.cos()]),
        };
        let q0 = DMatrix::zeros(3, 3);
        let st = integrate_sensitivities(&m, &theta, 5.0, &q0, &zeta, &grid).unwrap();
        let last = st.sensitivity.last().unwrap();
        for j in 0..2 {
            let col = last.column(j);
            let ej = DMatrix::from_column_slice(3, 3, &col.as_slice()[3..12]);
            assert!((&ej - ej.transpose()).amax() < 1e-8 * (1.0 + ej.amax()));
        }
    }

    #[test]
    fn e_sensitivity_matches_finite_difference_of_adjoint() {
        let m = ToyModel { perturbed: false };
        let theta = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let grid = crate::grid::TimeGrid::dense(20.0, 801).unwrap();
        let zeta = FnSignal {
            dim: 2,
            f: |t: f64| DVector::from_row_slice(&[(0.3 * t).sin(), 0.5]),
        };
        let q0 = DMatrix::zeros(3, 3);
        let st = integrate_sensitivities(&m, &theta, 1.0, &q0, &zeta, &grid).unwrap();
        let last = st.sensitivity.last().unwrap();
        let de_dk1 = DMatrix::from_column_slice(3, 3, &last.column(0).as_slice()[3..12]);

        let dk = 1e-5;
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[0] += dk;
        tm[0] -= dk;
        let ep = integrate_adjoint(&m, &tp, 1.0, &q0, &zeta, &grid).unwrap();
        let em = integrate_adjoint(&m, &tm, 1.0, &q0, &zeta, &grid).unwrap();
        let fd = (ep.e.last().unwrap() - em.e.last().unwrap()) / (2.0 * dk);
        let rel = (&de_dk1 - &fd).norm() / (1.0 + fd.norm());
        assert!(rel < 1e-4, "relative error {rel}");
    }

    fn random_signal(rng: &mut Rng, dim: usize) -> FnSignal<impl Fn(f64) -> DVector<f64> + Sync> {
        let amps: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
        let freqs: Vec<f64> = (0..dim).map(|_| rng.uniform_in(0.2, 1.5)).collect();
        let offs: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
        FnSignal {
            dim,
            f: move |t: f64| {
                DVector::from_iterator(
                    amps.len(),
                    amps.iter()
                        .zip(&freqs)
                        .zip(&offs)
                        .map(|((a, f), o)| a * (f * t).sin() + o),
                )
            },
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_all_models() {
        let models: Vec<Box<dyn Model>> = vec![
            Box::new(ClosureModel::scalar_growth((-1.0, 1.0))),
            Box::new(ToyModel { perturbed: false }),
            Box::new(MethanationModel),
        ];
        let mut rng = Rng::new(2024);
        for model in &models {
            let d = model.state_dim();
            let grid = crate::grid::TimeGrid::dense(8.0, 401).unwrap();
            let domain = model.theta_domain();
            for probe in 0..3 {
                let theta = DVector::from_iterator(
                    domain.len(),
                    domain
                        .iter()
                        .map(|(lo, hi)| lo + (hi - lo) * rng.uniform_in(0.2, 0.8)),
                );
                let lambda = 10f64.powf(rng.uniform_in(-0.5, 1.5));
                let zeta = random_signal(&mut rng, model.obs_dim());
                let q0 = DMatrix::identity(d, d);
                let g = grad_s(model.as_ref(), &theta, lambda, &q0, &zeta, &grid).unwrap();
                let fd = grad_s_fd(model.as_ref(), &theta, lambda, &q0, &zeta, &grid, 1e-5)
                    .unwrap();
                let rel = (&g.grad - &fd).norm() / (1.0 + fd.norm());
                assert!(
                    rel < 1e-4,
                    "{} probe {probe}: analytic {:?} vs fd {:?} (rel {rel})",
                    model.name(),
                    g.grad.as_slice(),
                    fd.as_slice()
                );
            }
        }
    }
}
