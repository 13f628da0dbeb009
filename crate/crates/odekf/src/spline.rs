//! Regression splines: B-spline bases (Cox-de Boor), per-channel least
//! squares fits and GCV-driven knot-count selection.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::ObservationSet;
use crate::signal::OutputSignal;

/// B-spline family on [t0, t1] with clamped boundary knots.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    degree: usize,
    /// Full knot vector: degree+1 copies of t0, interior knots, degree+1 copies of t1.
    knots: Vec<f64>,
    t0: f64,
    t1: f64,
    k: usize,
}

impl SplineBasis {
    pub fn with_interior(t0: f64, t1: f64, interior: &[f64], degree: usize) -> Result<Self> {
        if !(t1 > t0) {
            return Err(Error::Domain("spline interval must be nondegenerate".into()));
        }
        if interior
            .windows(2)
            .any(|w| w[1] <= w[0])
            || interior.iter().any(|&x| x <= t0 || x >= t1)
        {
            return Err(Error::Domain(
                "interior knots must be strictly increasing inside (t0, t1)".into(),
            ));
        }
        let mut knots = vec![t0; degree + 1];
        knots.extend_from_slice(interior);
        knots.extend(std::iter::repeat(t1).take(degree + 1));
        let k = interior.len() + degree + 1;
        Ok(SplineBasis {
            degree,
            knots,
            t0,
            t1,
            k,
        })
    }

    /// `n_knots` uniform knots including both boundaries (so `n_knots - 2`
    /// interior knots); this is how manually placed equispaced knot lists
    /// are interpreted.
    pub fn uniform(t0: f64, t1: f64, n_knots: usize, degree: usize) -> Result<Self> {
        if n_knots < 2 {
            return Err(Error::Domain("need at least the two boundary knots".into()));
        }
        let h = (t1 - t0) / (n_knots - 1) as f64;
        let interior: Vec<f64> = (1..n_knots - 1).map(|i| t0 + i as f64 * h).collect();
        Self::with_interior(t0, t1, &interior, degree)
    }

    /// Basis dimension K.
    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn span(&self) -> (f64, f64) {
        (self.t0, self.t1)
    }

    /// All K basis values at t (Cox-de Boor; entries are >= 0 and sum to 1).
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        if !(t >= self.t0 && t <= self.t1) {
            return Err(Error::Domain(format!(
                "t = {t} outside spline support [{}, {}]",
                self.t0, self.t1
            )));
        }
        let g = self.degree;
        // span index mu: knots[mu] <= t < knots[mu+1], clamped at the right end
        let mut mu = g;
        while mu + 1 < self.k && t >= self.knots[mu + 1] {
            mu += 1;
        }
        // triangular de Boor recursion for the g+1 nonzero functions
        let mut n = vec![0.0; g + 1];
        n[0] = 1.0;
        for r in 1..=g {
            let mut saved = 0.0;
            for j in 0..r {
                let left = self.knots[mu + 1 + j - r];
                let right = self.knots[mu + 1 + j];
                let denom = right - left;
                let term = if denom > 0.0 { n[j] / denom } else { 0.0 };
                n[j] = saved + (right - t) * term;
                saved = (t - left) * term;
            }
            n[r] = saved;
        }
        let mut out = DVector::zeros(self.k);
        for (j, &v) in n.iter().enumerate() {
            out[mu - g + j] = v;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct FitDiagnostics {
    /// Residual sum of squares per output channel.
    pub rss: Vec<f64>,
    /// GCV score per output channel.
    pub gcv: Vec<f64>,
    /// Trace of the hat matrix.
    pub hat_trace: f64,
}

/// The nonparametric proxy: a fitted regression spline per output channel.
#[derive(Debug, Clone)]
pub struct SmoothEstimate {
    pub basis: SplineBasis,
    /// K x d_obs coefficients.
    pub coefficients: DMatrix<f64>,
    pub diagnostics: FitDiagnostics,
}

impl SmoothEstimate {
    pub fn obs_dim(&self) -> usize {
        self.coefficients.ncols()
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        let (t0, t1) = self.basis.span();
        let b = self.basis.eval(t.clamp(t0, t1)).expect("clamped t");
        self.coefficients.transpose() * b
    }
}

impl OutputSignal for SmoothEstimate {
    fn dim(&self) -> usize {
        self.obs_dim()
    }

    fn eval(&self, t: f64) -> DVector<f64> {
        SmoothEstimate::eval(self, t)
    }
}

/// Per-channel ordinary least squares in the given basis.
pub fn fit_regression_spline(obs: &ObservationSet, basis: &SplineBasis) -> Result<SmoothEstimate> {
    let n = obs.len();
    let k = basis.dim();
    if n < k {
        return Err(Error::IllPosedFit(format!(
            "{n} observations cannot support a {k}-dimensional basis; use fewer knots"
        )));
    }
    let d_obs = obs.values[0].len();
    let mut design = DMatrix::zeros(n, k);
    for (i, &t) in obs.times.iter().enumerate() {
        design.row_mut(i).copy_from(&basis.eval(t)?.transpose());
    }
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values[0];
    if svd.rank(1e-10 * smax.max(1.0)) < k {
        return Err(Error::IllPosedFit(
            "rank-deficient design matrix; use fewer knots".into(),
        ));
    }

    let mut coefficients = DMatrix::zeros(k, d_obs);
    let mut rss = Vec::with_capacity(d_obs);
    for ch in 0..d_obs {
        let y = DVector::from_iterator(n, obs.values.iter().map(|v| v[ch]));
        let beta = svd.solve(&y, 1e-12).map_err(|e| Error::IllPosedFit(e.to_string()))?;
        let resid = &y - &design * &beta;
        rss.push(resid.norm_squared());
        coefficients.set_column(ch, &beta);
    }

    // hat trace from the design matrix: sum_i x_i^T (X^T X)^-1 x_i
    let xtx = design.transpose() * &design;
    let xtx_inv = xtx
        .try_inverse()
        .ok_or_else(|| Error::IllPosedFit("singular normal equations".into()))?;
    let hat_trace: f64 = (0..n)
        .map(|i| {
            let xi = design.row(i).transpose();
            (xi.transpose() * &xtx_inv * &xi)[(0, 0)]
        })
        .sum();

    let nf = n as f64;
    let denom = (1.0 - hat_trace / nf).powi(2);
    let gcv = rss.iter().map(|&r| (r / nf) / denom).collect();

    Ok(SmoothEstimate {
        basis: basis.clone(),
        coefficients,
        diagnostics: FitDiagnostics {
            rss,
            gcv,
            hat_trace,
        },
    })
}

/// Picks the uniform knot count minimizing the summed GCV score; ties break
/// toward fewer knots. Candidates leaving n < K are skipped.
pub fn gcv_select_knots(
    obs: &ObservationSet,
    candidate_counts: &[usize],
    degree: usize,
) -> Result<SplineBasis> {
    if candidate_counts.is_empty() {
        return Err(Error::Domain("empty knot-count candidate list".into()));
    }
    let t_end = obs.t_end();
    let mut sorted = candidate_counts.to_vec();
    sorted.sort_unstable();
    let mut best: Option<(f64, SplineBasis)> = None;
    for &count in &sorted {
        let basis = SplineBasis::uniform(0.0, t_end, count, degree)?;
        if obs.len() < basis.dim() {
            continue;
        }
        let fit = fit_regression_spline(obs, &basis)?;
        let score: f64 = fit.diagnostics.gcv.iter().sum();
        if best.as_ref().map_or(true, |(b, _)| score < *b) {
            best = Some((score, basis));
        }
    }
    best.map(|(_, b)| b)
        .ok_or_else(|| Error::IllPosedFit("no knot candidate keeps n >= K".into()))
}
