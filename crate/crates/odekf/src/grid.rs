//! Discretization support: time grids on [0, T] and grid-sampled trajectories.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Strictly increasing nodes starting at 0 and ending at the horizon T.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Domain("time grid needs at least two nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::Domain("time grid must start at 0".into()));
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("time grid nodes must be strictly increasing".into()));
        }
        Ok(TimeGrid { nodes })
    }

    /// Equispaced grid with `n_nodes` nodes on [0, t_end].
    pub fn dense(t_end: f64, n_nodes: usize) -> Result<Self> {
        if !(t_end > 0.0) || n_nodes < 2 {
            return Err(Error::Domain(format!(
                "invalid dense grid: t_end = {t_end}, n_nodes = {n_nodes}"
            )));
        }
        let h = t_end / (n_nodes - 1) as f64;
        let mut nodes: Vec<f64> = (0..n_nodes).map(|i| i as f64 * h).collect();
        nodes[n_nodes - 1] = t_end;
        Ok(TimeGrid { nodes })
    }

    /// Default integration grid: max(20 * n_obs, 2000) nodes.
    pub fn default_for(t_end: f64, n_obs: usize) -> Result<Self> {
        Self::dense(t_end, (20 * n_obs).max(2000))
    }

    /// Equispaced grid refined so that `extra` times coincide with nodes.
    pub fn dense_with(t_end: f64, n_nodes: usize, extra: &[f64]) -> Result<Self> {
        let base = Self::dense(t_end, n_nodes)?;
        let mut nodes = base.nodes;
        nodes.extend(extra.iter().copied().filter(|t| *t > 0.0 && *t < t_end));
        nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        nodes.dedup_by(|a, b| (*a - *b).abs() < 1e-12 * t_end.max(1.0));
        Self::from_nodes(nodes)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn t_end(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    /// Index i with nodes[i] <= t <= nodes[i+1], clamped to the grid.
    pub fn bracket(&self, t: f64) -> usize {
        match self
            .nodes
            .binary_search_by(|x| x.partial_cmp(&t).unwrap())
        {
            Ok(i) => i.min(self.nodes.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.nodes.len() - 2),
        }
    }
}

/// Vector-valued function sampled on a grid, with linear interpolation between nodes.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub values: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Domain("trajectory length differs from grid".into()));
        }
        Ok(Trajectory { grid, values })
    }

    pub fn at(&self, t: f64) -> DVector<f64> {
        let i = self.grid.bracket(t);
        let (t0, t1) = (self.grid.nodes()[i], self.grid.nodes()[i + 1]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        &self.values[i] * (1.0 - w) + &self.values[i + 1] * w
    }

    pub fn last(&self) -> &DVector<f64> {
        self.values.last().unwrap()
    }
}

/// Matrix-valued analogue of [`Trajectory`] (resolvants, Riccati solutions).
#[derive(Debug, Clone)]
pub struct MatrixTrajectory {
    pub grid: TimeGrid,
    pub values: Vec<DMatrix<f64>>,
}

impl MatrixTrajectory {
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        let i = self.grid.bracket(t);
        let (t0, t1) = (self.grid.nodes()[i], self.grid.nodes()[i + 1]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        &self.values[i] * (1.0 - w) + &self.values[i + 1] * w
    }

    pub fn last(&self) -> &DMatrix<f64> {
        self.values.last().unwrap()
    }
}
