//! Monte-Carlo benchmark harness: simulate datasets from a config, smooth,
//! estimate with each configured strategy, score with the four benchmark
//! metrics and emit CSV/JSON reports plus the mean optimal-control series.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dkf::{integrate_adjoint, smooth_trajectory, SmoothedTrajectory};
use crate::error::{Error, Result};
use crate::estimators::{EstimateResult, EstimatorOptions, EstimatorRegistry};
use crate::grid::TimeGrid;
use crate::model::{
    sample_times, simulate_observations, simulate_truth, Model, ModelRegistry, ObservationSet,
    Sampling,
};
use crate::ode::duhamel_solution;
use crate::rng::Rng;
use crate::spline::{fit_regression_spline, gcv_select_knots, SmoothEstimate, SplineBasis};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotsConfig {
    /// Total uniform knot count, boundary knots included.
    Fixed { n_knots: usize },
    /// Candidate knot counts scored by generalized cross validation.
    Gcv { candidates: Vec<usize> },
}

fn default_degree() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothingConfig {
    #[serde(default = "default_degree")]
    pub degree: usize,
    pub knots: KnotsConfig,
}

fn default_max_iters() -> usize {
    200
}

fn default_grad_tol() -> f64 {
    1e-6
}

fn default_n_starts() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_n_starts")]
    pub n_starts: usize,
    /// Criterion integration grid size override (default max(20 n, 2000)).
    #[serde(default)]
    pub grid_nodes: Option<usize>,
    /// Warm-start the lambda scan candidates from the previous theta-hat
    /// (fast); disable to judge each candidate from independent cold starts.
    #[serde(default = "default_warm_scan")]
    pub warm_scan: bool,
}

fn default_warm_scan() -> bool {
    true
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            grad_tol: default_grad_tol(),
            n_starts: default_n_starts(),
            grid_nodes: None,
            warm_scan: default_warm_scan(),
        }
    }
}

fn default_sampling() -> Sampling {
    Sampling::Equispaced
}

fn default_trim() -> f64 {
    10.0
}

fn default_n_mc() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: String,
    pub theta_star: Vec<f64>,
    pub x0_star: Vec<f64>,
    /// Observations per replicate.
    pub n: usize,
    /// Observation noise standard deviation.
    pub sigma: f64,
    pub t_end: f64,
    #[serde(default = "default_sampling")]
    pub sampling: Sampling,
    pub smoothing: SmoothingConfig,
    pub lambda_grid: Vec<f64>,
    /// Strategy names, run in the listed order.
    pub estimators: Vec<String>,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default)]
    pub seed: u64,
    /// Runs with ARE above this multiple of the median are dropped from the
    /// trimmed rows.
    #[serde(default = "default_trim")]
    pub trim_are_factor: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Start box for theta draws; defaults to [theta_star/2, 2 theta_star].
    #[serde(default)]
    pub theta_start_box: Option<Vec<(f64, f64)>>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn validate(&self, models: &ModelRegistry, estimators: &EstimatorRegistry) -> Result<()> {
        let model = models.get(&self.model)?;
        if self.theta_star.len() != model.param_dim() {
            return Err(Error::InvalidConfig(format!(
                "theta_star has {} entries, model '{}' has {} parameters",
                self.theta_star.len(),
                self.model,
                model.param_dim()
            )));
        }
        if self.x0_star.len() != model.state_dim() {
            return Err(Error::InvalidConfig(format!(
                "x0_star has {} entries, model '{}' has {} states",
                self.x0_star.len(),
                self.model,
                model.state_dim()
            )));
        }
        if self.n_mc < 1 {
            return Err(Error::InvalidConfig("n_mc must be >= 1".into()));
        }
        if self.n < 4 {
            return Err(Error::InvalidConfig("need at least 4 observations".into()));
        }
        if !(self.t_end > 0.0) || self.sigma < 0.0 {
            return Err(Error::InvalidConfig("t_end > 0 and sigma >= 0 required".into()));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidConfig(
                "lambda_grid must be nonempty and positive".into(),
            ));
        }
        for name in &self.estimators {
            estimators.get(name)?;
        }
        Ok(())
    }

    fn start_box(&self) -> Vec<(f64, f64)> {
        self.theta_start_box.clone().unwrap_or_else(|| {
            self.theta_star
                .iter()
                .map(|&v| (0.5 * v, 2.0 * v))
                .collect()
        })
    }
}

/// Per-run benchmark metrics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    /// Squared Euclidean parameter error, summed over coordinates.
    pub mse: f64,
    /// Coordinate-wise absolute relative error, summed over coordinates.
    pub are: f64,
    /// RMS output prediction error of the parametric trajectory against a
    /// fresh noisy replicate.
    pub ep_param: f64,
    /// Same score for the control-corrected trajectory (equals ep_param when
    /// no correction exists).
    pub ep_corrected: f64,
    /// Discrete L2 distance of the unobserved components from the truth.
    pub delta_param: f64,
    pub delta_corrected: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub replicate: usize,
    pub estimator: String,
    pub theta_hat: Vec<f64>,
    pub x0_hat: Vec<f64>,
    pub lambda: Option<f64>,
    pub objective: f64,
    pub converged: bool,
    pub metrics: MetricRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: String,
    pub n_runs: usize,
    pub n_trimmed: usize,
    pub mse: f64,
    pub are: f64,
    pub ep_param: f64,
    pub ep_corrected: f64,
    pub delta_param: f64,
    pub delta_corrected: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsTable {
    pub n: usize,
    pub sigma: f64,
    pub rows: Vec<MetricsRow>,
}

/// Mean optimal control across replicates, per state component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanControl {
    pub times: Vec<f64>,
    /// `components[j][i]` is the mean of u_bar component j at `times[i]`.
    pub components: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub table: MetricsTable,
    pub runs: Vec<RunRecord>,
    pub mean_u: Option<MeanControl>,
    pub failures: Vec<String>,
}

/// State components with an all-zero column in C: invisible in the output.
pub fn unobserved_components(model: &dyn Model) -> Vec<usize> {
    let c = model.obs_matrix();
    (0..model.state_dim())
        .filter(|&j| c.column(j).amax() == 0.0)
        .collect()
}

fn rms_prediction_error(
    model: &dyn Model,
    traj: &dyn Fn(f64) -> DVector<f64>,
    fresh: &ObservationSet,
) -> f64 {
    let c = model.obs_matrix();
    let sum: f64 = fresh
        .times
        .iter()
        .zip(&fresh.values)
        .map(|(&t, y)| (y - &c * traj(t)).norm_squared())
        .sum();
    (sum / fresh.len() as f64).sqrt()
}

fn hidden_l2(
    truth: &[DVector<f64>],
    traj: &dyn Fn(f64) -> DVector<f64>,
    grid: &TimeGrid,
    hidden: &[usize],
) -> f64 {
    if hidden.is_empty() {
        return 0.0;
    }
    let nodes = grid.nodes();
    let sq = |i: usize| -> f64 {
        let x_hat = traj(nodes[i]);
        hidden
            .iter()
            .map(|&j| (truth[i][j] - x_hat[j]).powi(2))
            .sum()
    };
    let mut acc = 0.0;
    let mut prev = sq(0);
    for i in 1..nodes.len() {
        let cur = sq(i);
        acc += 0.5 * (prev + cur) * (nodes[i] - nodes[i - 1]);
        prev = cur;
    }
    acc.sqrt()
}

/// Scores one estimate: parameter errors against the truth, prediction error
/// against a fresh noisy replicate, and hidden-state reconstruction error on
/// the dense grid. `corrected` is the control-corrected trajectory when the
/// estimator provides one.
pub fn compute_metrics(
    model: &dyn Model,
    theta_star: &DVector<f64>,
    x0_star: &DVector<f64>,
    estimate: &EstimateResult,
    corrected: Option<&SmoothedTrajectory>,
    fresh: &ObservationSet,
    grid: &TimeGrid,
) -> Result<MetricRecord> {
    let p = theta_star.len();
    // parameter errors accumulate over coordinates (squared Euclidean error
    // and summed coordinate-wise relative error), matching the reference
    // benchmark tables these rows are compared against
    let mse = (0..p)
        .map(|j| (theta_star[j] - estimate.theta_hat[j]).powi(2))
        .sum::<f64>();
    let are = (0..p)
        .map(|j| (theta_star[j] - estimate.theta_hat[j]).abs() / theta_star[j].abs())
        .sum::<f64>();

    let parametric = duhamel_solution(model, &estimate.theta_hat, &estimate.x0_hat, None, grid)?;
    let param_at = |t: f64| parametric.at(t);
    let truth = simulate_truth(model, theta_star, x0_star, grid.nodes())?;
    let hidden = unobserved_components(model);

    let ep_param = rms_prediction_error(model, &param_at, fresh);
    let delta_param = hidden_l2(&truth, &param_at, grid, &hidden);
    let (ep_corrected, delta_corrected) = match corrected {
        Some(sm) => {
            let corr_at = |t: f64| sm.x_at(t);
            (
                rms_prediction_error(model, &corr_at, fresh),
                hidden_l2(&truth, &corr_at, grid, &hidden),
            )
        }
        None => (ep_param, delta_param),
    };
    Ok(MetricRecord {
        mse,
        are,
        ep_param,
        ep_corrected,
        delta_param,
        delta_corrected,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn aggregate(estimator: &str, records: &[&MetricRecord], n_trimmed: usize) -> MetricsRow {
    let n = records.len().max(1) as f64;
    let mean = |f: &dyn Fn(&MetricRecord) -> f64| records.iter().map(|r| f(r)).sum::<f64>() / n;
    MetricsRow {
        estimator: estimator.to_string(),
        n_runs: records.len(),
        n_trimmed,
        mse: mean(&|r| r.mse),
        are: mean(&|r| r.are),
        ep_param: mean(&|r| r.ep_param),
        ep_corrected: mean(&|r| r.ep_corrected),
        delta_param: mean(&|r| r.delta_param),
        delta_corrected: mean(&|r| r.delta_corrected),
    }
}

fn smooth_data(cfg: &ExperimentConfig, obs: &ObservationSet) -> Result<SmoothEstimate> {
    let basis = match &cfg.smoothing.knots {
        KnotsConfig::Fixed { n_knots } => {
            SplineBasis::uniform(0.0, cfg.t_end, *n_knots, cfg.smoothing.degree)?
        }
        KnotsConfig::Gcv { candidates } => {
            gcv_select_knots(obs, candidates, cfg.smoothing.degree)?
        }
    };
    fit_regression_spline(obs, &basis)
}

/// Full benchmark: n_mc replicates of simulate -> smooth -> estimate ->
/// score, aggregated into raw and trimmed rows per estimator.
///
/// Per-run estimator failures are recorded and excluded from the means; the
/// run aborts if an estimator fails on more than half of the replicates.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    models: &ModelRegistry,
    estimators: &EstimatorRegistry,
) -> Result<ExperimentOutput> {
    cfg.validate(models, estimators)?;
    let model = models.get(&cfg.model)?;
    let theta_star = DVector::from_column_slice(&cfg.theta_star);
    let x0_star = DVector::from_column_slice(&cfg.x0_star);
    let metric_grid = TimeGrid::default_for(cfg.t_end, cfg.n)?;
    let u_grid = TimeGrid::dense(cfg.t_end, 401)?;
    let base = Rng::new(cfg.seed);

    let mut runs: Vec<RunRecord> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    let mut u_sum: Vec<DVector<f64>> =
        vec![DVector::zeros(model.state_dim()); u_grid.len()];
    let mut u_count = 0usize;

    for replicate in 0..cfg.n_mc {
        let mut time_rng = base.substream(3 * replicate as u64 + 1);
        let times = sample_times(cfg.sampling, cfg.n, cfg.t_end, &mut time_rng);
        let obs_seed = base.substream(3 * replicate as u64 + 2).next_u64();
        let fresh_seed = base.substream(3 * replicate as u64 + 3).next_u64();
        let obs =
            simulate_observations(model.as_ref(), &theta_star, &x0_star, &times, cfg.sigma, obs_seed)?;
        let fresh = simulate_observations(
            model.as_ref(),
            &theta_star,
            &x0_star,
            &times,
            cfg.sigma,
            fresh_seed,
        )?;
        let zeta = match smooth_data(cfg, &obs) {
            Ok(z) => z,
            Err(e) => {
                failures.push(format!("replicate {replicate}: smoothing failed: {e}"));
                continue;
            }
        };

        for name in &cfg.estimators {
            let strategy = estimators.get(name)?;
            let opts = EstimatorOptions {
                max_iters: cfg.optimizer.max_iters,
                grad_tol: cfg.optimizer.grad_tol,
                n_starts: cfg.optimizer.n_starts,
                grid_nodes: cfg.optimizer.grid_nodes,
                warm_scan: cfg.optimizer.warm_scan,
                seed: base.substream(1000 + replicate as u64).next_u64(),
                theta_start_box: Some(cfg.start_box()),
                ..EstimatorOptions::default()
            };
            let est = match strategy.estimate(model.as_ref(), &obs, &zeta, &cfg.lambda_grid, &opts)
            {
                Ok(e) => e,
                Err(e) => {
                    failures.push(format!("replicate {replicate}, {name}: {e}"));
                    continue;
                }
            };
            // control-corrected trajectory, when the estimate carries a lambda
            let corrected = match est.lambda_used {
                Some(lambda) => {
                    let d = model.state_dim();
                    let q0 = DMatrix::zeros(d, d);
                    let grid = TimeGrid::default_for(obs.t_end(), obs.len())?;
                    let path =
                        integrate_adjoint(model.as_ref(), &est.theta_hat, lambda, &q0, &zeta, &grid)?;
                    Some(smooth_trajectory(model.as_ref(), &est.theta_hat, &path)?)
                }
                None => None,
            };
            if let Some(sm) = &corrected {
                for (i, &t) in u_grid.nodes().iter().enumerate() {
                    u_sum[i] += sm.u_at(t);
                }
                u_count += 1;
            }
            let metrics = compute_metrics(
                model.as_ref(),
                &theta_star,
                &x0_star,
                &est,
                corrected.as_ref(),
                &fresh,
                &metric_grid,
            )?;
            runs.push(RunRecord {
                replicate,
                estimator: name.clone(),
                theta_hat: est.theta_hat.as_slice().to_vec(),
                x0_hat: est.x0_hat.as_slice().to_vec(),
                lambda: est.lambda_used,
                objective: est.objective,
                converged: est.converged,
                metrics,
            });
        }
    }

    let mut rows = Vec::new();
    for name in &cfg.estimators {
        let recs: Vec<&MetricRecord> = runs
            .iter()
            .filter(|r| &r.estimator == name)
            .map(|r| &r.metrics)
            .collect();
        if recs.len() * 2 < cfg.n_mc {
            return Err(Error::NonConvergence(format!(
                "estimator '{name}' failed on {} of {} replicates",
                cfg.n_mc - recs.len(),
                cfg.n_mc
            )));
        }
        rows.push(aggregate(name, &recs, 0));
        let mut ares: Vec<f64> = recs.iter().map(|r| r.are).collect();
        let med = median(&mut ares);
        let kept: Vec<&MetricRecord> = recs
            .iter()
            .copied()
            .filter(|r| r.are <= cfg.trim_are_factor * med)
            .collect();
        rows.push(aggregate(
            &format!("{name}:trimmed"),
            &kept,
            recs.len() - kept.len(),
        ));
    }

    let mean_u = (u_count > 0).then(|| MeanControl {
        times: u_grid.nodes().to_vec(),
        components: (0..model.state_dim())
            .map(|j| u_sum.iter().map(|v| v[j] / u_count as f64).collect())
            .collect(),
    });

    Ok(ExperimentOutput {
        config: cfg.clone(),
        table: MetricsTable {
            n: cfg.n,
            sigma: cfg.sigma,
            rows,
        },
        runs,
        mean_u,
        failures,
    })
}

fn format_num(v: f64) -> String {
    // shortest round-trip representation: parses back to the same f64
    format!("{v}")
}

fn table_key(n: usize, sigma: f64) -> String {
    format!("({n},{})", format_num(sigma))
}

/// Writes metrics.csv (pinned header), metrics.json, runs.json and, when a
/// mean control series exists, mean_u.csv with rows `t,component,mean_u`.
pub fn emit_report(output: &ExperimentOutput, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    // written by hand: the pinned header has a comma inside the first column
    // name, which standard CSV quoting would mangle
    let csv_path = out_dir.join("metrics.csv");
    {
        let mut text = String::from(
            "(n,sigma),estimator,MSE,ARE,EP_param,EP_corrected,Delta_param,Delta_corrected\n",
        );
        let key = table_key(output.table.n, output.table.sigma);
        for row in &output.table.rows {
            text.push_str(&format!(
                "{key},{},{},{},{},{},{},{}\n",
                row.estimator,
                format_num(row.mse),
                format_num(row.are),
                format_num(row.ep_param),
                format_num(row.ep_corrected),
                format_num(row.delta_param),
                format_num(row.delta_corrected),
            ));
        }
        fs::write(&csv_path, text)?;
    }
    written.push(csv_path);

    let json_path = out_dir.join("metrics.json");
    fs::write(&json_path, serde_json::to_string_pretty(&output.table)?)?;
    written.push(json_path);

    let runs_path = out_dir.join("runs.json");
    fs::write(&runs_path, serde_json::to_string_pretty(&output.runs)?)?;
    written.push(runs_path);

    if let Some(mu) = &output.mean_u {
        let u_path = out_dir.join("mean_u.csv");
        let mut w = csv::Writer::from_path(&u_path)?;
        w.write_record(["t", "component", "mean_u"])?;
        for (j, series) in mu.components.iter().enumerate() {
            for (i, &t) in mu.times.iter().enumerate() {
                w.write_record([
                    format_num(t),
                    (j + 1).to_string(),
                    format_num(series[i]),
                ])?;
            }
        }
        w.flush()?;
        written.push(u_path);
    }
    Ok(written)
}

/// Reads back a metrics.csv produced by [`emit_report`]. The key column is
/// `(n,sigma)` with a literal comma, so rows split into nine tokens whose
/// first two form the key.
pub fn parse_metrics_csv(path: &Path) -> Result<MetricsTable> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut key: Option<(usize, f64)> = None;
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let tokens: Vec<&str> = line.split(',').collect();
        if tokens.len() != 9 {
            return Err(Error::InvalidConfig(format!(
                "expected 9 comma-separated tokens, got {}: '{line}'",
                tokens.len()
            )));
        }
        let n: usize = tokens[0]
            .strip_prefix('(')
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::InvalidConfig(format!("bad n '{}'", tokens[0])))?;
        let sigma: f64 = tokens[1]
            .strip_suffix(')')
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::InvalidConfig(format!("bad sigma '{}'", tokens[1])))?;
        key = Some((n, sigma));
        let parse = |i: usize| -> Result<f64> {
            tokens[i]
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad numeric field '{}'", tokens[i])))
        };
        rows.push(MetricsRow {
            estimator: tokens[2].to_string(),
            n_runs: 0,
            n_trimmed: 0,
            mse: parse(3)?,
            are: parse(4)?,
            ep_param: parse(5)?,
            ep_corrected: parse(6)?,
            delta_param: parse(7)?,
            delta_corrected: parse(8)?,
        });
    }
    let (n, sigma) = key.unwrap_or((0, 0.0));
    Ok(MetricsTable { n, sigma, rows })
}
