//! Command-line front end: dataset simulation, single-shot estimation, the
//! Monte-Carlo benchmark and the self-verification suite.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use odekf::dkf::{criterion_s, integrate_adjoint, observability_gramian};
use odekf::error::{Error, Result};
use odekf::estimators::EstimatorRegistry;
use odekf::gradient::{grad_s, grad_s_fd};
use odekf::grid::TimeGrid;
use odekf::harness::{emit_report, run_experiment, ExperimentConfig};
use odekf::model::{
    sample_times, simulate_observations, ClosureModel, Model, ModelRegistry, ToyModel,
};
use odekf::oracle::brute_force_min;
use odekf::rng::Rng;
use odekf::signal::FnSignal;

#[derive(Parser)]
#[command(
    name = "odekf",
    about = "Parameter and state estimation for partially observed linear ODE systems",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Override the lambda grid, comma separated (e.g. "1e5,1e6,1e7").
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one dataset from the config and write observations.csv.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run each configured estimator on one simulated dataset.
    Estimate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Monte-Carlo benchmark: metrics table, per-run records, mean control.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the replicate count.
        #[arg(long)]
        n_mc: Option<usize>,
        /// Exit nonzero unless every run succeeded and the table invariants hold.
        #[arg(long)]
        check: bool,
    },
    /// Self-verification: closed form vs brute force, gradients, invariants.
    Verify {
        #[arg(long, default_value_t = 20260824)]
        seed: u64,
    },
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(grid) = &common.lambda_grid {
        cfg.lambda_grid = grid.clone();
    }
    Ok(cfg)
}

fn cmd_simulate(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    let models = ModelRegistry::builtin();
    let estimators = EstimatorRegistry::builtin();
    cfg.validate(&models, &estimators)?;
    let model = models.get(&cfg.model)?;
    let mut rng = Rng::new(cfg.seed).substream(1);
    let times = sample_times(cfg.sampling, cfg.n, cfg.t_end, &mut rng);
    let obs_seed = Rng::new(cfg.seed).substream(2).next_u64();
    let obs = simulate_observations(
        model.as_ref(),
        &DVector::from_column_slice(&cfg.theta_star),
        &DVector::from_column_slice(&cfg.x0_star),
        &times,
        cfg.sigma,
        obs_seed,
    )?;
    std::fs::create_dir_all(&common.out_dir)?;
    let path = common.out_dir.join("observations.csv");
    let mut text = String::from("t");
    for k in 0..model.obs_dim() {
        text.push_str(&format!(",y{}", k + 1));
    }
    text.push('\n');
    for (t, y) in obs.times.iter().zip(&obs.values) {
        text.push_str(&format!("{t}"));
        for v in y.iter() {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    std::fs::write(&path, text)?;
    println!(
        "wrote {} observations from model '{}' to {}",
        obs.len(),
        cfg.model,
        path.display()
    );
    Ok(())
}

fn cmd_estimate(common: &CommonArgs) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.n_mc = 1;
    let models = ModelRegistry::builtin();
    let estimators = EstimatorRegistry::builtin();
    let output = run_experiment(&cfg, &models, &estimators)?;
    for run in &output.runs {
        println!(
            "{}: theta_hat = {:?}, x0_hat = {:?}, lambda = {:?}, objective = {:.6e}, converged = {}",
            run.estimator, run.theta_hat, run.x0_hat, run.lambda, run.objective, run.converged
        );
    }
    for f in &output.failures {
        eprintln!("failure: {f}");
    }
    std::fs::create_dir_all(&common.out_dir)?;
    let path = common.out_dir.join("estimate.json");
    std::fs::write(&path, serde_json::to_string_pretty(&output.runs)?)?;
    println!("wrote {}", path.display());
    if output.runs.is_empty() {
        return Err(Error::NonConvergence("no estimator produced a result".into()));
    }
    Ok(())
}

fn cmd_bench(common: &CommonArgs, n_mc: Option<usize>, check: bool) -> Result<bool> {
    let mut cfg = load_config(common)?;
    if let Some(n) = n_mc {
        cfg.n_mc = n;
    }
    let models = ModelRegistry::builtin();
    let estimators = EstimatorRegistry::builtin();
    let output = run_experiment(&cfg, &models, &estimators)?;
    let files = emit_report(&output, &common.out_dir)?;

    println!(
        "(n,sigma) = ({},{}), {} replicates",
        output.table.n, output.table.sigma, cfg.n_mc
    );
    println!(
        "{:<16} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "estimator", "runs", "MSE", "ARE", "EP_par", "EP_corr", "D_par", "D_corr"
    );
    for row in &output.table.rows {
        println!(
            "{:<16} {:>6} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}",
            row.estimator,
            row.n_runs,
            row.mse,
            row.are,
            row.ep_param,
            row.ep_corrected,
            row.delta_param,
            row.delta_corrected
        );
    }
    for f in &output.failures {
        eprintln!("failure: {f}");
    }
    for p in &files {
        println!("wrote {}", p.display());
    }

    if !check {
        return Ok(true);
    }
    let mut ok = output.failures.is_empty();
    if !ok {
        eprintln!("check: {} run(s) failed", output.failures.len());
    }
    for row in &output.table.rows {
        if !(row.mse >= 0.0 && row.are >= 0.0) {
            eprintln!("check: row '{}' has negative error metrics", row.estimator);
            ok = false;
        }
    }
    for run in output.runs.iter().filter(|r| r.lambda.is_none()) {
        if run.metrics.ep_param != run.metrics.ep_corrected
            || run.metrics.delta_param != run.metrics.delta_corrected
        {
            eprintln!(
                "check: uncorrected estimator '{}' has diverging corrected metrics",
                run.estimator
            );
            ok = false;
        }
    }
    Ok(ok)
}

struct VerifyReport {
    failures: usize,
}

impl VerifyReport {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures += 1;
        }
    }
}

fn scalar_decay_model() -> ClosureModel {
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

fn probe_signal(rng: &mut Rng, dim: usize) -> FnSignal<impl Fn(f64) -> DVector<f64> + Sync> {
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

fn cmd_verify(seed: u64) -> Result<bool> {
    let mut report = VerifyReport { failures: 0 };
    let mut rng = Rng::new(seed);

    // closed-form criterion against the certified brute-force minimum
    {
        let mut worst: f64 = 0.0;
        let mut count = 0;
        for trial in 0..6 {
            let lambda = [0.1, 1.0, 10.0][trial % 3];
            let toy = trial >= 3;
            let (model, theta): (Box<dyn Model>, DVector<f64>) = if toy {
                (
                    Box::new(ToyModel { perturbed: false }),
                    DVector::from_row_slice(&[
                        rng.uniform_in(0.02, 0.2),
                        rng.uniform_in(0.02, 0.2),
                    ]),
                )
            } else {
                (
                    Box::new(scalar_decay_model()),
                    DVector::from_element(1, rng.uniform_in(0.3, 2.0)),
                )
            };
            let d = model.state_dim();
            let zeta = probe_signal(&mut rng, model.obs_dim());
            let q0 = DMatrix::identity(d, d);
            let t_end = 4.0;
            let grid = TimeGrid::dense(t_end, 2001)?;
            let s = criterion_s(model.as_ref(), &theta, lambda, &q0, &zeta, &grid)?.s;
            let oracle =
                brute_force_min(model.as_ref(), &theta, lambda, Some(&q0), &zeta, 120, t_end)?;
            worst = worst.max((s - oracle.cost).abs() / (1.0 + oracle.cost.abs()));
            count += 1;
        }
        report.record(
            "criterion vs brute-force minimum",
            worst <= 1e-4,
            format!("{count} instances, worst relative gap {worst:.2e}"),
        );
    }

    // analytic gradient against central finite differences on all models
    {
        let models = ModelRegistry::builtin();
        let mut worst: f64 = 0.0;
        for name in models.names() {
            let model = models.get(&name)?;
            let domain = model.theta_domain();
            let grid = TimeGrid::dense(8.0, 401)?;
            for _ in 0..2 {
                let theta = DVector::from_iterator(
                    domain.len(),
                    domain
                        .iter()
                        .map(|(lo, hi)| lo + (hi - lo) * rng.uniform_in(0.2, 0.8)),
                );
                let zeta = probe_signal(&mut rng, model.obs_dim());
                let q0 = DMatrix::identity(model.state_dim(), model.state_dim());
                let g = grad_s(model.as_ref(), &theta, 1.0, &q0, &zeta, &grid)?.grad;
                let fd = grad_s_fd(model.as_ref(), &theta, 1.0, &q0, &zeta, &grid, 1e-5)?;
                worst = worst.max((&g - &fd).norm() / (1.0 + fd.norm()));
            }
        }
        report.record(
            "analytic gradient vs finite differences",
            worst <= 1e-4,
            format!("all registered models, worst relative gap {worst:.2e}"),
        );
    }

    // Riccati invariants: symmetry, initial conditions, nonnegative criterion
    {
        let model = ToyModel { perturbed: false };
        let theta = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let q0 = DMatrix::identity(3, 3);
        let grid = TimeGrid::dense(20.0, 801)?;
        let zeta = probe_signal(&mut rng, 2);
        let path = integrate_adjoint(&model, &theta, 1.0, &q0, &zeta, &grid)?;
        let mut sym: f64 = 0.0;
        for e in &path.e {
            sym = sym.max((e - e.transpose()).amax() / (1.0 + e.amax()));
        }
        let init_ok = path.e[0] == q0 && path.h[0].amax() == 0.0;
        let s = criterion_s(&model, &theta, 1.0, &q0, &zeta, &grid)?.s;
        report.record(
            "adjoint path invariants",
            sym <= 1e-10 && init_ok && s >= -1e-8,
            format!("symmetry {sym:.2e}, E(0)=Q0 and h(0)=0: {init_ok}, S = {s:.4e}"),
        );
    }

    // observability diagnostics on the toy model
    {
        let model = ToyModel { perturbed: false };
        let theta = DVector::from_row_slice(&ToyModel::THETA_STAR);
        let grid = TimeGrid::dense(20.0, 801)?;
        let good = observability_gramian(&model, &theta, &grid)?;
        let degenerate = observability_gramian(
            &model,
            &DVector::from_row_slice(&[1e-4, 1e-4]),
            &TimeGrid::dense(1.0, 101)?,
        )?;
        report.record(
            "observability diagnostics",
            good.passes,
            format!(
                "Gramian eigenvalue range [{:.2e}, {:.2e}], Kalman rank {:?}; \
                 near-degenerate min eigenvalue {:.2e}",
                good.min_eigenvalue,
                good.max_eigenvalue,
                good.kalman_rank,
                degenerate.min_eigenvalue
            ),
        );
    }

    println!(
        "{}",
        if report.failures == 0 {
            "all checks passed"
        } else {
            "some checks FAILED"
        }
    );
    Ok(report.failures == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate { common } => cmd_simulate(common).map(|()| true),
        Command::Estimate { common } => cmd_estimate(common).map(|()| true),
        Command::Bench { common, n_mc, check } => cmd_bench(common, *n_mc, *check),
        Command::Verify { seed } => cmd_verify(*seed),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
