//! Estimation drivers: the smoothing-criterion estimator (minimize S over
//! theta), the NLS baseline (joint theta, x0 least squares on the raw
//! observations), lambda selection by predictive SSE, and a name-keyed
//! strategy registry used by the benchmark harness and the CLI.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dkf::{integrate_adjoint, observability_gramian, smooth_trajectory};
use crate::error::{Error, Result};
use crate::gradient::criterion_and_grad;
use crate::grid::TimeGrid;
use crate::model::{Model, ObservationSet};
use crate::ode::duhamel_solution;
use crate::optimize::{levenberg_marquardt, projected_bfgs, OptimOptions};
use crate::rng::Rng;
use crate::signal::OutputSignal;

#[derive(Debug, Clone)]
pub struct EstimatorOptions {
    pub max_iters: usize,
    /// Gradient-norm convergence tolerance.
    pub grad_tol: f64,
    /// Random restarts per estimation call.
    pub n_starts: usize,
    pub seed: u64,
    /// Initial-state weight for the criterion; `None` means the zero matrix
    /// (with the observability pre-check guarding well-posedness).
    pub q0: Option<DMatrix<f64>>,
    /// Criterion integration grid size; `None` picks max(20 n_obs, 2000) nodes.
    pub grid_nodes: Option<usize>,
    /// Box the random starts are drawn from; defaults to the model domain.
    pub theta_start_box: Option<Vec<(f64, f64)>>,
    /// Chain the lambda scan: each candidate is warm-started at the previous
    /// theta-hat and run with a reduced budget, and the winner is re-polished.
    /// When false every candidate restarts cold with the full multi-start
    /// budget, so candidates are judged independently.
    pub warm_scan: bool,
    /// Search box per initial-state coordinate for the NLS baseline.
    pub x0_bounds: (f64, f64),
    pub keep_trace: bool,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-6,
            n_starts: 5,
            seed: 0,
            q0: None,
            grid_nodes: None,
            theta_start_box: None,
            warm_scan: true,
            x0_bounds: (-1e9, 1e9),
            keep_trace: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimateResult {
    pub theta_hat: DVector<f64>,
    pub x0_hat: DVector<f64>,
    /// Smoothing weight the estimate was produced with (criterion path only).
    pub lambda_used: Option<f64>,
    /// Attained objective: S for the criterion estimator, RSS for NLS.
    pub objective: f64,
    pub n_evals: usize,
    pub converged: bool,
    /// Best objective per start, when tracing is on.
    pub trace: Option<Vec<f64>>,
}

fn criterion_grid(obs: &ObservationSet, opts: &EstimatorOptions) -> Result<TimeGrid> {
    match opts.grid_nodes {
        Some(n) => TimeGrid::dense(obs.t_end(), n),
        None => TimeGrid::default_for(obs.t_end(), obs.len()),
    }
}

fn start_points(
    model: &dyn Model,
    opts: &EstimatorOptions,
    extra: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let box_ = opts
        .theta_start_box
        .clone()
        .unwrap_or_else(|| model.theta_domain());
    let domain = model.theta_domain();
    let mut rng = Rng::new(opts.seed).substream(0x5741);
    let mut starts: Vec<DVector<f64>> = extra.to_vec();
    for _ in 0..opts.n_starts {
        starts.push(DVector::from_iterator(
            box_.len(),
            box_.iter()
                .zip(&domain)
                .map(|(&(lo, hi), &(dlo, dhi))| rng.uniform_in(lo, hi).clamp(dlo, dhi)),
        ));
    }
    starts
}

/// Minimizes theta -> S(zeta; theta, lambda) by projected quasi-Newton
/// descent with the analytic gradient, multi-started from seeded draws.
///
/// Starts whose observability Gramian is numerically singular are skipped;
/// if every start is unobservable or fails to converge the call errors.
pub fn estimate_dkf(
    model: &dyn Model,
    obs: &ObservationSet,
    zeta: &dyn OutputSignal,
    lambda: f64,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    estimate_dkf_from(model, obs, zeta, lambda, opts, &[])
}

/// [`estimate_dkf`] with extra deterministic starting points prepended
/// (used to warm-start lambda scans).
pub fn estimate_dkf_from(
    model: &dyn Model,
    obs: &ObservationSet,
    zeta: &dyn OutputSignal,
    lambda: f64,
    opts: &EstimatorOptions,
    extra_starts: &[DVector<f64>],
) -> Result<EstimateResult> {
    let grid = criterion_grid(obs, opts)?;
    let d = model.state_dim();
    let q0 = opts.q0.clone().unwrap_or_else(|| DMatrix::zeros(d, d));
    let domain = model.theta_domain();
    let optim = OptimOptions {
        max_iters: opts.max_iters,
        grad_tol: opts.grad_tol,
        // S carries the squared data scale; resolve it to 1e-9 relative
        f_tol: 1e-8,
        ..OptimOptions::default()
    };

    let mut best: Option<(f64, DVector<f64>, f64, bool)> = None; // (S, theta, S_at_start, converged)
    let mut trace = Vec::new();
    let mut n_evals = 0usize;
    let mut skipped = 0usize;
    let mut last_err: Option<Error> = None;

    for start in start_points(model, opts, extra_starts) {
        let report = observability_gramian(model, &start, &grid)?;
        if !report.passes && q0.amax() == 0.0 {
            skipped += 1;
            continue;
        }
        let mut evals_here = 0usize;
        let mut s_start = f64::INFINITY;
        let fg = |theta: &DVector<f64>| {
            evals_here += 1;
            let (s, g) = criterion_and_grad(model, theta, lambda, &q0, zeta, &grid)?;
            if evals_here == 1 {
                s_start = s;
            }
            Ok((s, g.grad))
        };
        let outcome = projected_bfgs(fg, &start, &domain, &optim);
        n_evals += evals_here;
        match outcome {
            Ok(r) => {
                trace.push(r.f);
                if best.as_ref().is_none_or(|(b, _, _, _)| r.f < *b) {
                    best = Some((r.f, r.x, s_start, r.converged));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }

    let Some((s, theta_hat, s_start, converged)) = best else {
        if skipped > 0 && trace.is_empty() && last_err.is_none() {
            return Err(Error::Observability(format!(
                "all {skipped} starting points have a numerically singular observability \
                 Gramian; the criterion minimum over x0 is not unique there"
            )));
        }
        return Err(Error::NonConvergence(format!(
            "no start produced an estimate (last error: {last_err:?})"
        )));
    };
    debug_assert!(s <= s_start + 1e-9 * (1.0 + s_start.abs()));

    let path = integrate_adjoint(model, &theta_hat, lambda, &q0, zeta, &grid)?;
    let x0_hat = smooth_trajectory(model, &theta_hat, &path)?.x0_hat;
    Ok(EstimateResult {
        theta_hat,
        x0_hat,
        lambda_used: Some(lambda),
        objective: s,
        n_evals,
        converged,
        trace: opts.keep_trace.then_some(trace),
    })
}

/// Nonlinear least squares on the raw observations, jointly in (theta, x0):
/// damped Gauss-Newton with finite-difference Jacobians. Non-convergence is
/// flagged on the result, not raised; the best iterate is always returned.
pub fn estimate_nls(
    model: &dyn Model,
    obs: &ObservationSet,
    theta_init: &DVector<f64>,
    x0_init: &DVector<f64>,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    let d = model.state_dim();
    let p = model.param_dim();
    let d_obs = model.obs_dim();
    let base = criterion_grid(obs, opts)?;
    // observation times become grid nodes so residuals never interpolate
    let grid = TimeGrid::dense_with(obs.t_end(), base.len(), &obs.times)?;
    let node_of: Vec<usize> = obs.times.iter().map(|&t| grid.bracket(t)).collect();

    let mut n_evals = 0usize;
    let residuals = |z: &DVector<f64>| {
        n_evals += 1;
        let theta = DVector::from_column_slice(&z.as_slice()[0..p]);
        let x0 = DVector::from_column_slice(&z.as_slice()[p..p + d]);
        let tr = duhamel_solution(model, &theta, &x0, None, &grid)?;
        let c = model.obs_matrix();
        let mut r = DVector::zeros(obs.len() * d_obs);
        for (i, &node) in node_of.iter().enumerate() {
            let misfit = &c * &tr.values[node] - &obs.values[i];
            r.rows_mut(i * d_obs, d_obs).copy_from(&misfit);
        }
        Ok(r)
    };

    let mut z0 = DVector::zeros(p + d);
    z0.rows_mut(0, p).copy_from(theta_init);
    z0.rows_mut(p, d).copy_from(x0_init);
    let mut bounds = model.theta_domain();
    bounds.extend(std::iter::repeat_n(opts.x0_bounds, d));
    let optim = OptimOptions {
        max_iters: opts.max_iters,
        grad_tol: opts.grad_tol,
        ..OptimOptions::default()
    };
    let r = levenberg_marquardt(residuals, &z0, &bounds, &optim)?;
    Ok(EstimateResult {
        theta_hat: DVector::from_column_slice(&r.x.as_slice()[0..p]),
        x0_hat: DVector::from_column_slice(&r.x.as_slice()[p..p + d]),
        lambda_used: None,
        objective: 2.0 * r.f, // LM minimizes half the RSS
        n_evals,
        converged: r.converged,
        trace: opts.keep_trace.then(|| vec![2.0 * r.f]),
    })
}

/// Sum of squared errors of the unperturbed (u = 0) trajectory from `x0`
/// against the raw observations; the lambda-selection score.
pub fn sse_unperturbed(
    model: &dyn Model,
    theta: &DVector<f64>,
    x0: &DVector<f64>,
    obs: &ObservationSet,
) -> Result<f64> {
    let base = TimeGrid::default_for(obs.t_end(), obs.len())?;
    let grid = TimeGrid::dense_with(obs.t_end(), base.len(), &obs.times)?;
    let tr = duhamel_solution(model, theta, x0, None, &grid)?;
    let c = model.obs_matrix();
    Ok(obs
        .times
        .iter()
        .zip(&obs.values)
        .map(|(&t, y)| (&c * tr.values[grid.bracket(t)].clone() - y).norm_squared())
        .sum())
}

#[derive(Debug, Clone)]
pub struct LambdaCandidate {
    pub lambda: f64,
    pub sse: f64,
    pub estimate: EstimateResult,
}

#[derive(Debug, Clone)]
pub struct LambdaSelection {
    /// Successfully estimated candidates, ascending in lambda.
    pub candidates: Vec<LambdaCandidate>,
    pub chosen: usize,
}

impl LambdaSelection {
    pub fn chosen_candidate(&self) -> &LambdaCandidate {
        &self.candidates[self.chosen]
    }

    pub fn chosen_lambda(&self) -> f64 {
        self.chosen_candidate().lambda
    }
}

/// Scans a lambda grid, estimating at each candidate and scoring it by the
/// predictive SSE of the unperturbed trajectory; near-ties go to the larger
/// lambda. The scan walks the grid in ascending order and warm-starts each
/// candidate at the previous theta-hat.
pub fn select_lambda(
    model: &dyn Model,
    obs: &ObservationSet,
    zeta: &dyn OutputSignal,
    lambda_grid: &[f64],
    opts: &EstimatorOptions,
) -> Result<LambdaSelection> {
    if lambda_grid.is_empty() {
        return Err(Error::InvalidConfig("empty lambda grid".into()));
    }
    if lambda_grid.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::InvalidConfig("lambda grid must be positive".into()));
    }
    let mut grid: Vec<f64> = lambda_grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();

    let mut candidates = Vec::new();
    let mut warm: Option<DVector<f64>> = None;
    let mut last_err: Option<Error> = None;
    for (i, &lambda) in grid.iter().enumerate() {
        let mut o = opts.clone();
        let extra: Vec<DVector<f64>> = if opts.warm_scan {
            warm.iter().cloned().collect()
        } else {
            Vec::new()
        };
        if opts.warm_scan && i > 0 {
            // the warm start carries the scan; later candidates only need a
            // short descent to rank their SSE, the winner is polished below
            o.n_starts = 0;
            o.max_iters = opts.max_iters.min(25);
        }
        match estimate_dkf_from(model, obs, zeta, lambda, &o, &extra) {
            Ok(est) => {
                let sse = sse_unperturbed(model, &est.theta_hat, &est.x0_hat, obs)?;
                if std::env::var("ODEKF_TRACE_SCAN").is_ok() {
                    eprintln!(
                        "scan lambda={lambda:.3e} evals={} converged={} sse={sse:.6e} theta={:?}",
                        est.n_evals,
                        est.converged,
                        est.theta_hat.as_slice()
                    );
                }
                warm = Some(est.theta_hat.clone());
                candidates.push(LambdaCandidate {
                    lambda,
                    sse,
                    estimate: est,
                });
            }
            Err(e) => last_err = Some(e),
        }
    }
    if candidates.is_empty() {
        return Err(Error::NonConvergence(format!(
            "every lambda candidate failed (last error: {last_err:?})"
        )));
    }
    // ties are judged on the data's own scale: SSE gaps below 1e-8 of the
    // total signal energy are noise, and near-ties go to the larger lambda
    let energy: f64 = obs.values.iter().map(|y| y.norm_squared()).sum();
    let tie_tol = 1e-8 * (1.0 + energy);
    let mut chosen = 0;
    for i in 1..candidates.len() {
        if candidates[i].sse <= candidates[chosen].sse + tie_tol {
            chosen = i;
        }
    }
    // finish the winner with the full iteration budget
    if opts.warm_scan && chosen > 0 {
        let cand = &mut candidates[chosen];
        let mut o = opts.clone();
        o.n_starts = 0;
        let warm = [cand.estimate.theta_hat.clone()];
        let polished = estimate_dkf_from(model, obs, zeta, cand.lambda, &o, &warm)?;
        cand.sse = sse_unperturbed(model, &polished.theta_hat, &polished.x0_hat, obs)?;
        cand.estimate = polished;
    }
    Ok(LambdaSelection { candidates, chosen })
}

/// A runnable estimation recipe; implementations are registered by name and
/// picked at runtime by the harness and the CLI.
pub trait EstimatorStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn estimate(
        &self,
        model: &dyn Model,
        obs: &ObservationSet,
        zeta: &dyn OutputSignal,
        lambda_grid: &[f64],
        opts: &EstimatorOptions,
    ) -> Result<EstimateResult>;
}

/// Criterion minimization with lambda chosen from the grid by predictive SSE.
pub struct DkfStrategy;

impl EstimatorStrategy for DkfStrategy {
    fn name(&self) -> &'static str {
        "dkf"
    }

    fn estimate(
        &self,
        model: &dyn Model,
        obs: &ObservationSet,
        zeta: &dyn OutputSignal,
        lambda_grid: &[f64],
        opts: &EstimatorOptions,
    ) -> Result<EstimateResult> {
        if lambda_grid.len() == 1 {
            return estimate_dkf(model, obs, zeta, lambda_grid[0], opts);
        }
        let sel = select_lambda(model, obs, zeta, lambda_grid, opts)?;
        Ok(sel.chosen_candidate().estimate.clone())
    }
}

/// Multi-started least squares on the raw observations; ignores the grid.
pub struct NlsStrategy;

impl EstimatorStrategy for NlsStrategy {
    fn name(&self) -> &'static str {
        "nls"
    }

    fn estimate(
        &self,
        model: &dyn Model,
        obs: &ObservationSet,
        zeta: &dyn OutputSignal,
        _lambda_grid: &[f64],
        opts: &EstimatorOptions,
    ) -> Result<EstimateResult> {
        // initial state consistent with the smoothed output at t = 0
        let c = model.obs_matrix();
        let x0_init = c
            .svd(true, true)
            .solve(&zeta.eval(0.0), 1e-10)
            .unwrap_or_else(|_| DVector::zeros(model.state_dim()));
        let mut best: Option<EstimateResult> = None;
        for start in start_points(model, opts, &[]) {
            let est = estimate_nls(model, obs, &start, &x0_init, opts)?;
            if best
                .as_ref()
                .is_none_or(|b| est.objective < b.objective)
            {
                best = Some(est);
            }
        }
        best.ok_or_else(|| Error::NonConvergence("no NLS start succeeded".into()))
    }
}

pub struct EstimatorRegistry {
    strategies: BTreeMap<String, Arc<dyn EstimatorStrategy>>,
}

impl EstimatorRegistry {
    pub fn builtin() -> Self {
        let mut r = Self {
            strategies: BTreeMap::new(),
        };
        r.register(Arc::new(DkfStrategy));
        r.register(Arc::new(NlsStrategy));
        r
    }

    pub fn register(&mut self, strategy: Arc<dyn EstimatorStrategy>) {
        self.strategies
            .insert(strategy.name().to_string(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn EstimatorStrategy>> {
        self.strategies
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownEstimator(name.to_string()))
    }

    pub fn names(&self) -> Vec<String> {
        self.strategies.keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ToyModel;
    use crate::signal::FnSignal;

    const X0_STAR: [f64; 3] = [100.0, 0.0, 0.0];

    fn toy_exact_signal(theta: &DVector<f64>) -> FnSignal<impl Fn(f64) -> DVector<f64> + Sync> {
        let (k1, k2) = (theta[0], theta[1]);
        FnSignal {
            dim: 2,
            f: move |t: f64| {
                let decay = 1.0 - (-(k1 + k2) * t).exp();
                DVector::from_row_slice(&[
                    100.0 * k1 / (k1 + k2) * decay,
                    100.0 * k2 / (k1 + k2) * decay,
                ])
            },
        }
    }

    fn toy_noiseless_obs(n: usize, t_end: f64) -> ObservationSet {
        let theta = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let zeta = toy_exact_signal(&theta);
        let times: Vec<f64> = (1..=n).map(|i| i as f64 * t_end / n as f64).collect();
        let values = times.iter().map(|&t| zeta.eval(t)).collect();
        ObservationSet::new(times, values, Some(0.0)).unwrap()
    }

    fn pinned(theta: &DVector<f64>, n_starts: usize) -> EstimatorOptions {
        EstimatorOptions {
            n_starts,
            theta_start_box: Some(theta.iter().map(|&v| (v, v)).collect()),
            grid_nodes: Some(1001),
            ..EstimatorOptions::default()
        }
    }

    #[test]
    fn dkf_noiseless_start_at_truth_stays() {
        let m = ToyModel { perturbed: false };
        let theta_star = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let obs = toy_noiseless_obs(50, 100.0);
        let zeta = toy_exact_signal(&theta_star);
        let est = estimate_dkf(&m, &obs, &zeta, 1e8, &pinned(&theta_star, 1)).unwrap();
        for j in 0..2 {
            let rel = (est.theta_hat[j] - theta_star[j]).abs() / theta_star[j];
            assert!(rel < 1e-4, "theta[{j}] rel {rel}");
        }
        // S vanishes up to quadrature cancellation on the ~5e5-scale integrals
        assert!(est.objective.abs() < 1e-2, "S {}", est.objective);
        assert!(est.lambda_used == Some(1e8));
    }

    #[test]
    fn dkf_noiseless_converges_from_doubled_start() {
        let m = ToyModel { perturbed: false };
        let theta_star = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let obs = toy_noiseless_obs(50, 100.0);
        let zeta = toy_exact_signal(&theta_star);
        let start = &theta_star * 2.0;
        let est = estimate_dkf(&m, &obs, &zeta, 1e8, &pinned(&start, 1)).unwrap();
        for j in 0..2 {
            let rel = (est.theta_hat[j] - theta_star[j]).abs() / theta_star[j];
            assert!(rel < 1e-3, "theta[{j}] rel {rel} ({})", est.theta_hat[j]);
        }
        // the recovered initial state follows from the smoothing pass
        let x0_star = DVector::from_row_slice(&X0_STAR);
        assert!((est.x0_hat - x0_star).amax() < 0.1);
    }

    #[test]
    fn nls_noiseless_start_at_truth_stays() {
        let m = ToyModel { perturbed: false };
        let theta_star = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let obs = toy_noiseless_obs(50, 100.0);
        let x0_star = DVector::from_row_slice(&X0_STAR);
        let est = estimate_nls(&m, &obs, &theta_star, &x0_star, &pinned(&theta_star, 1)).unwrap();
        // residual floor set by the fixed-step integration error, not zero
        assert!(est.objective < 1e-6, "RSS {}", est.objective);
        for j in 0..2 {
            let rel = (est.theta_hat[j] - theta_star[j]).abs() / theta_star[j];
            assert!(rel < 1e-5, "theta[{j}] rel {rel}");
        }
    }

    #[test]
    fn nls_noiseless_recovers_from_perturbed_start() {
        let m = ToyModel { perturbed: false };
        let theta_star = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let obs = toy_noiseless_obs(50, 100.0);
        let start = &theta_star * 1.7;
        let x0_start = DVector::from_row_slice(&[60.0, 5.0, -5.0]);
        let est = estimate_nls(&m, &obs, &start, &x0_start, &pinned(&start, 1)).unwrap();
        let x0_star = DVector::from_row_slice(&X0_STAR);
        for j in 0..2 {
            let rel = (est.theta_hat[j] - theta_star[j]).abs() / theta_star[j];
            assert!(rel < 1e-3, "theta[{j}] rel {rel}");
        }
        assert!((est.x0_hat - x0_star).amax() / 100.0 < 1e-3);
    }

    #[test]
    fn dkf_and_nls_agree_at_huge_lambda_on_clean_data() {
        let m = ToyModel { perturbed: false };
        let theta_star = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let obs = toy_noiseless_obs(50, 100.0);
        let zeta = toy_exact_signal(&theta_star);
        let start = &theta_star * 1.5;
        let dkf = estimate_dkf(&m, &obs, &zeta, 1e9, &pinned(&start, 1)).unwrap();
        let x0_start = DVector::from_row_slice(&[80.0, 0.0, 0.0]);
        let nls = estimate_nls(&m, &obs, &start, &x0_start, &pinned(&start, 1)).unwrap();
        for j in 0..2 {
            let rel = (dkf.theta_hat[j] - nls.theta_hat[j]).abs() / theta_star[j];
            assert!(rel < 1e-3, "theta[{j}] gap {rel}");
        }
    }

    #[test]
    fn singleton_lambda_grid_is_chosen() {
        let m = ToyModel { perturbed: false };
        let theta_star = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let obs = toy_noiseless_obs(30, 100.0);
        let zeta = toy_exact_signal(&theta_star);
        let sel = select_lambda(&m, &obs, &zeta, &[1e7], &pinned(&theta_star, 1)).unwrap();
        assert_eq!(sel.candidates.len(), 1);
        assert_eq!(sel.chosen_lambda(), 1e7);
    }

    #[test]
    fn clean_data_tie_breaks_to_the_largest_lambda() {
        let m = ToyModel { perturbed: false };
        let theta_star = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let obs = toy_noiseless_obs(30, 100.0);
        let zeta = toy_exact_signal(&theta_star);
        let grid = [1e7, 1e9, 1e11];
        let sel = select_lambda(&m, &obs, &zeta, &grid, &pinned(&theta_star, 1)).unwrap();
        assert_eq!(sel.chosen_lambda(), 1e11, "sse: {:?}", sel
            .candidates
            .iter()
            .map(|c| (c.lambda, c.sse))
            .collect::<Vec<_>>());
        let min = sel
            .candidates
            .iter()
            .map(|c| c.sse)
            .fold(f64::INFINITY, f64::min);
        let energy: f64 = obs.values.iter().map(|y| y.norm_squared()).sum();
        assert!(sel.chosen_candidate().sse <= min + 1e-8 * (1.0 + energy));
    }

    #[test]
    fn registry_resolves_builtin_names() {
        let r = EstimatorRegistry::builtin();
        assert_eq!(r.names(), vec!["dkf".to_string(), "nls".to_string()]);
        assert_eq!(r.get("dkf").unwrap().name(), "dkf");
        assert!(matches!(r.get("gibbs"), Err(Error::UnknownEstimator(_))));
    }

    #[test]
    fn invalid_lambda_grids_are_rejected() {
        let m = ToyModel { perturbed: false };
        let theta_star = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let obs = toy_noiseless_obs(10, 100.0);
        let zeta = toy_exact_signal(&theta_star);
        let opts = pinned(&theta_star, 1);
        assert!(select_lambda(&m, &obs, &zeta, &[], &opts).is_err());
        assert!(select_lambda(&m, &obs, &zeta, &[1.0, -2.0], &opts).is_err());
    }
}
