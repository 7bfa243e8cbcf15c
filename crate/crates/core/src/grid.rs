//! Uniform time grids and grid-sampled vector/matrix paths.
//!
//! Every path in the crate lives on one [`TimeGrid`]. A path may start at a
//! later node than the grid (`first`), which is how quantities defined only
//! on `[t0, T]` are represented without building a second grid whose nodes
//! could drift from the first one in the last bits.
//!
//! Two interpolation rules are used:
//! - [`VectorPath::eval`] / [`MatrixPath::eval`]: piecewise linear, exact at
//!   nodes. This is the public "value at an arbitrary time".
//! - [`VectorPath::stage`] / [`MatrixPath::stage`]: node values, or a
//!   four-point cubic estimate at the midpoint of a step. The Runge–Kutta
//!   stages use these so that coefficient paths do not cap the order of the
//!   integrator at two.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};

/// Uniform discretisation of `[t_start, t_end]` into `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Usage("grid needs at least one step".into()));
        }
        if !(t_start.is_finite() && t_end.is_finite()) || t_end <= t_start {
            return Err(Error::Usage(format!(
                "grid interval [{t_start}, {t_end}] is empty or not finite"
            )));
        }
        Ok(Self { t_start, t_end, steps })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes, `steps + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }

    /// Time of node `k`, computed as `t_start + k·dt` (never by accumulation).
    /// The last node is pinned to `t_end`.
    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            self.t_start + k as f64 * self.dt()
        }
    }

    pub fn mid(&self, k: usize) -> f64 {
        self.t_start + (k as f64 + 0.5) * self.dt()
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|k| self.node(k))
    }

    /// Index of the node at time `t`, if `t` sits on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let dt = self.dt();
        let x = (t - self.t_start) / dt;
        if !x.is_finite() || x < -1e-6 {
            return None;
        }
        let k = x.round();
        if k > self.steps as f64 {
            return None;
        }
        let k = k as usize;
        ((self.node(k) - t).abs() <= 1e-6 * dt).then_some(k)
    }

    pub fn require_node(&self, t: f64) -> Result<usize> {
        self.index_of(t).ok_or(Error::OffGrid { t })
    }

    /// Bracketing node and fractional position for linear interpolation.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let dt = self.dt();
        let tol = 1e-9 * dt;
        if t < self.t_start - tol || t > self.t_end + tol || !t.is_finite() {
            return Err(Error::OutOfDomain { t, from: self.t_start, to: self.t_end });
        }
        if let Some(k) = self.index_of(t) {
            return Ok((k, 0.0));
        }
        let x = (t - self.t_start) / dt;
        let k = (x.floor() as usize).min(self.steps - 1);
        Ok((k, x - k as f64))
    }
}

/// Position of a Runge–Kutta stage on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Node(usize),
    /// Halfway between node `k` and node `k + 1`.
    Mid(usize),
}

impl Stage {
    pub fn time(&self, grid: &TimeGrid) -> f64 {
        match *self {
            Stage::Node(k) => grid.node(k),
            Stage::Mid(k) => grid.mid(k),
        }
    }
}

/// Four-point weights for the value halfway between node `k` and `k + 1`,
/// given the indices of the usable node range `[first, last]`.
fn cubic_mid_stencil(k: usize, first: usize, last: usize) -> Vec<(usize, f64)> {
    let n = last - first + 1;
    if n < 4 {
        return vec![(k, 0.5), (k + 1, 0.5)];
    }
    if k > first && k + 2 <= last {
        vec![(k - 1, -1.0 / 16.0), (k, 9.0 / 16.0), (k + 1, 9.0 / 16.0), (k + 2, -1.0 / 16.0)]
    } else if k == first {
        vec![(k, 5.0 / 16.0), (k + 1, 15.0 / 16.0), (k + 2, -5.0 / 16.0), (k + 3, 1.0 / 16.0)]
    } else {
        vec![(k + 1, 5.0 / 16.0), (k, 15.0 / 16.0), (k - 1, -5.0 / 16.0), (k - 2, 1.0 / 16.0)]
    }
}

/// A vector-valued function sampled at grid nodes `first..=grid.steps()`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorPath {
    grid: TimeGrid,
    first: usize,
    data: DMatrix<f64>,
}

impl VectorPath {
    pub fn zeros(grid: TimeGrid, first: usize, dim: usize) -> Self {
        assert!(first <= grid.steps());
        Self { grid, first, data: DMatrix::zeros(dim, grid.steps() + 1 - first) }
    }

    pub fn constant(grid: TimeGrid, value: &DVector<f64>) -> Self {
        let mut p = Self::zeros(grid, 0, value.len());
        for k in 0..=grid.steps() {
            p.set(k, value);
        }
        p
    }

    pub fn from_fn(grid: TimeGrid, first: usize, dim: usize, mut f: impl FnMut(usize, f64) -> DVector<f64>) -> Self {
        let mut p = Self::zeros(grid, first, dim);
        for k in first..=grid.steps() {
            let v = f(k, grid.node(k));
            p.set(k, &v);
        }
        p
    }

    /// Builds a path from node values `first, first+1, ..., steps`.
    pub fn from_nodes(grid: TimeGrid, first: usize, values: &[DVector<f64>]) -> Result<Self> {
        if values.len() != grid.steps() + 1 - first {
            return Err(Error::Dimension(format!(
                "expected {} node values, got {}",
                grid.steps() + 1 - first,
                values.len()
            )));
        }
        let dim = values.first().map_or(0, |v| v.len());
        let mut p = Self::zeros(grid, first, dim);
        for (j, v) in values.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::Dimension("ragged node values".into()));
            }
            p.data.set_column(j, v);
        }
        Ok(p)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    /// First node index covered by the path.
    pub fn first(&self) -> usize {
        self.first
    }

    pub fn covers(&self, k: usize) -> bool {
        k >= self.first && k <= self.grid.steps()
    }

    pub fn col(&self, k: usize) -> DVectorView<'_, f64> {
        debug_assert!(self.covers(k), "node {k} outside path starting at {}", self.first);
        self.data.column(k - self.first)
    }

    pub fn node(&self, k: usize) -> DVector<f64> {
        self.col(k).into_owned()
    }

    pub fn set(&mut self, k: usize, v: &DVector<f64>) {
        let j = k - self.first;
        self.data.set_column(j, v);
    }

    /// Raw storage: one column per covered node.
    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Linear interpolation; exact at nodes.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        let (k, frac) = self.grid.locate(t)?;
        if frac == 0.0 {
            if !self.covers(k) {
                return Err(Error::OutOfDomain { t, from: self.grid.node(self.first), to: self.grid.t_end() });
            }
            return Ok(self.node(k));
        }
        if !self.covers(k) {
            return Err(Error::OutOfDomain { t, from: self.grid.node(self.first), to: self.grid.t_end() });
        }
        Ok(self.col(k) * (1.0 - frac) + self.col(k + 1) * frac)
    }

    pub fn stage(&self, s: Stage) -> DVector<f64> {
        match s {
            Stage::Node(k) => self.node(k),
            Stage::Mid(k) => {
                let mut out = DVector::zeros(self.dim());
                for (i, w) in cubic_mid_stencil(k, self.first, self.grid.steps()) {
                    out.axpy(w, &self.col(i), 1.0);
                }
                out
            }
        }
    }

    /// Node values and midpoint estimates, precomputed for repeated stage lookups.
    pub fn stages(&self) -> VectorStages {
        let last = self.grid.steps();
        let mids = (self.first..last).map(|k| self.stage(Stage::Mid(k))).collect();
        let nodes = (self.first..=last).map(|k| self.node(k)).collect();
        VectorStages { first: self.first, nodes, mids }
    }

    pub fn map_nodes(&self, mut f: impl FnMut(usize, DVectorView<'_, f64>) -> DVector<f64>) -> VectorPath {
        let mut values = Vec::with_capacity(self.data.ncols());
        for k in self.first..=self.grid.steps() {
            values.push(f(k, self.col(k)));
        }
        VectorPath::from_nodes(self.grid, self.first, &values).expect("consistent node count")
    }

    fn check_compatible(&self, other: &VectorPath) -> Result<usize> {
        if self.grid != other.grid || self.dim() != other.dim() {
            return Err(Error::Dimension("paths live on different grids or dimensions".into()));
        }
        Ok(self.first.max(other.first))
    }

    /// `self − other` over the common node range.
    pub fn sub(&self, other: &VectorPath) -> Result<VectorPath> {
        let first = self.check_compatible(other)?;
        Ok(VectorPath::from_fn(self.grid, first, self.dim(), |k, _| self.col(k) - other.col(k)))
    }

    pub fn add(&self, other: &VectorPath) -> Result<VectorPath> {
        let first = self.check_compatible(other)?;
        Ok(VectorPath::from_fn(self.grid, first, self.dim(), |k, _| self.col(k) + other.col(k)))
    }

    pub fn scale(&self, a: f64) -> VectorPath {
        VectorPath { grid: self.grid, first: self.first, data: &self.data * a }
    }

    /// Maximum absolute entry over all covered nodes.
    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Sup norm of the difference over the common nodes, optionally from node `from`.
    pub fn sup_dist(&self, other: &VectorPath) -> Result<f64> {
        Ok(self.sub(other)?.sup_norm())
    }

    pub fn sup_dist_from(&self, other: &VectorPath, from: usize) -> Result<f64> {
        let d = self.sub(other)?;
        let mut m = 0.0_f64;
        for k in from.max(d.first)..=self.grid.steps() {
            m = m.max(d.col(k).amax());
        }
        Ok(m)
    }

    /// Restriction to nodes `from..=steps`.
    pub fn tail(&self, from: usize) -> VectorPath {
        assert!(self.covers(from));
        let j = from - self.first;
        VectorPath {
            grid: self.grid,
            first: from,
            data: self.data.columns(j, self.data.ncols() - j).into_owned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Precomputed stage values for a [`VectorPath`].
#[derive(Debug, Clone)]
pub struct VectorStages {
    first: usize,
    nodes: Vec<DVector<f64>>,
    mids: Vec<DVector<f64>>,
}

impl VectorStages {
    pub fn get(&self, s: Stage) -> &DVector<f64> {
        match s {
            Stage::Node(k) => &self.nodes[k - self.first],
            Stage::Mid(k) => &self.mids[k - self.first],
        }
    }
}

/// A matrix-valued function sampled at grid nodes `first..=grid.steps()`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPath {
    grid: TimeGrid,
    first: usize,
    values: Vec<DMatrix<f64>>,
}

impl MatrixPath {
    pub fn from_nodes(grid: TimeGrid, first: usize, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if first > grid.steps() || values.len() != grid.steps() + 1 - first {
            return Err(Error::Dimension(format!(
                "expected {} node values, got {}",
                grid.steps() + 1 - first.min(grid.steps()),
                values.len()
            )));
        }
        let shape = values[0].shape();
        if values.iter().any(|m| m.shape() != shape) {
            return Err(Error::Dimension("ragged matrix path".into()));
        }
        Ok(Self { grid, first, values })
    }

    pub fn constant(grid: TimeGrid, value: &DMatrix<f64>) -> Self {
        Self { grid, first: 0, values: vec![value.clone(); grid.steps() + 1] }
    }

    pub fn from_fn(grid: TimeGrid, first: usize, mut f: impl FnMut(usize, f64) -> DMatrix<f64>) -> Self {
        let values = (first..=grid.steps()).map(|k| f(k, grid.node(k))).collect();
        Self::from_nodes(grid, first, values).expect("from_fn produces a consistent path")
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn first(&self) -> usize {
        self.first
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    pub fn covers(&self, k: usize) -> bool {
        k >= self.first && k <= self.grid.steps()
    }

    pub fn at(&self, k: usize) -> &DMatrix<f64> {
        debug_assert!(self.covers(k), "node {k} outside path starting at {}", self.first);
        &self.values[k - self.first]
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn eval(&self, t: f64) -> Result<DMatrix<f64>> {
        let (k, frac) = self.grid.locate(t)?;
        if !self.covers(k) {
            return Err(Error::OutOfDomain { t, from: self.grid.node(self.first), to: self.grid.t_end() });
        }
        if frac == 0.0 {
            return Ok(self.at(k).clone());
        }
        Ok(self.at(k) * (1.0 - frac) + self.at(k + 1) * frac)
    }

    pub fn stage(&self, s: Stage) -> DMatrix<f64> {
        match s {
            Stage::Node(k) => self.at(k).clone(),
            Stage::Mid(k) => {
                let (r, c) = self.shape();
                let mut out = DMatrix::zeros(r, c);
                for (i, w) in cubic_mid_stencil(k, self.first, self.grid.steps()) {
                    out += self.at(i) * w;
                }
                out
            }
        }
    }

    pub fn stages(&self) -> MatrixStages {
        let last = self.grid.steps();
        let mids = (self.first..last).map(|k| self.stage(Stage::Mid(k))).collect();
        MatrixStages { first: self.first, nodes: self.values.clone(), mids }
    }

    pub fn map_nodes(&self, mut f: impl FnMut(usize, &DMatrix<f64>) -> DMatrix<f64>) -> MatrixPath {
        let values = self.values.iter().enumerate().map(|(j, m)| f(j + self.first, m)).collect();
        MatrixPath { grid: self.grid, first: self.first, values }
    }

    /// Applies the path to a fixed vector: `t ↦ M(t)·v`.
    pub fn apply(&self, v: &DVector<f64>) -> VectorPath {
        VectorPath::from_fn(self.grid, self.first, self.shape().0, |k, _| self.at(k) * v)
    }

    pub fn sub(&self, other: &MatrixPath) -> Result<MatrixPath> {
        if self.grid != other.grid || self.shape() != other.shape() {
            return Err(Error::Dimension("matrix paths are not compatible".into()));
        }
        let first = self.first.max(other.first);
        Ok(MatrixPath::from_fn(self.grid, first, |k, _| self.at(k) - other.at(k)))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.amax()))
    }

    pub fn sup_dist(&self, other: &MatrixPath) -> Result<f64> {
        Ok(self.sub(other)?.sup_norm())
    }

    pub fn tail(&self, from: usize) -> MatrixPath {
        assert!(self.covers(from));
        MatrixPath { grid: self.grid, first: from, values: self.values[from - self.first..].to_vec() }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Precomputed stage values for a [`MatrixPath`].
#[derive(Debug, Clone)]
pub struct MatrixStages {
    first: usize,
    nodes: Vec<DMatrix<f64>>,
    mids: Vec<DMatrix<f64>>,
}

impl MatrixStages {
    pub fn get(&self, s: Stage) -> &DMatrix<f64> {
        match s {
            Stage::Node(k) => &self.nodes[k - self.first],
            Stage::Mid(k) => &self.mids[k - self.first],
        }
    }
}
