//! Finite populations: Gaussian sampling of initial states and errors,
//! coupled integration of the `N`-agent system and empirical mean fields.
//!
//! Agents are stored column-wise in an `n × N` matrix. Every agent draws
//! from its own RNG stream (`seed`, purpose, agent id), and empirical means
//! are pairwise sums in ascending agent order, so results do not depend on
//! how the work is split across threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{MatrixPath, Stage, TimeGrid, VectorPath};
use crate::params::SystemParams;

const PURPOSE_INIT: u64 = 0x9e37_79b9_7f4a_7c15;
const PURPOSE_ERROR: u64 = 0xc2b2_ae3d_27d4_eb4f;
const PURPOSE_NOISE: u64 = 0x1656_67b1_9e37_79f9;

/// Columns per parallel work item.
const CHUNK: usize = 64;

/// Tolerance below which negative covariance eigenvalues count as zero.
pub const PSD_TOL: f64 = 1e-12;

/// RNG for one agent and one purpose.
pub fn agent_rng(seed: u64, purpose: u64, agent: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose);
    rng.set_stream(agent as u64);
    rng
}

/// `L` with `LLᵀ = cov`: Cholesky when definite, clipped eigen-factor when
/// only semidefinite.
pub fn gaussian_factor(name: &str, cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !cov.is_square() {
        return Err(Error::Dimension(format!("{name} is not square")));
    }
    if cov.iter().any(|v| !v.is_finite()) || (cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
        return Err(Error::Usage(format!("{name} must be a finite symmetric matrix")));
    }
    if let Some(ch) = cov.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = cov.clone().symmetric_eigen();
    if let Some(min) = eig.eigenvalues.iter().copied().find(|&l| l < -PSD_TOL) {
        return Err(Error::Usage(format!("{name} is not positive semidefinite (eigenvalue {min:e})")));
    }
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

fn draw(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Initial states and errors of `N` agents, one column per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub x0: DMatrix<f64>,
    pub errors: DMatrix<f64>,
}

impl Population {
    pub fn size(&self) -> usize {
        self.x0.ncols()
    }

    pub fn dim(&self) -> usize {
        self.x0.nrows()
    }

    /// Every agent starts at `x0` with error `e`.
    pub fn uniform(n_agents: usize, x0: &DVector<f64>, e: &DVector<f64>) -> Self {
        Self {
            x0: DMatrix::from_fn(x0.len(), n_agents, |r, _| x0[r]),
            errors: DMatrix::from_fn(e.len(), n_agents, |r, _| e[r]),
        }
    }

    pub fn mean_x0(&self) -> DVector<f64> {
        pairwise_mean(&self.x0)
    }

    pub fn mean_error(&self) -> DVector<f64> {
        pairwise_mean(&self.errors)
    }

    /// Shifts the initial states so that their sample mean is exactly `mean`.
    pub fn center_initial(&mut self, mean: &DVector<f64>) {
        let shift = mean - self.mean_x0();
        for mut c in self.x0.column_iter_mut() {
            c += &shift;
        }
    }

    /// Shifts the errors so that their sample mean is exactly `mean`.
    pub fn center_errors(&mut self, mean: &DVector<f64>) {
        let shift = mean - self.mean_error();
        for mut c in self.errors.column_iter_mut() {
            c += &shift;
        }
    }
}

/// Draws `N` initial states `x₀ ~ 𝒩(init_mean, init_cov)` and errors
/// `E_i ~ 𝒩(error_mean, error_cov)`.
pub fn sample_population(
    n_agents: usize,
    init_mean: &DVector<f64>,
    init_cov: &DMatrix<f64>,
    error_mean: &DVector<f64>,
    error_cov: &DMatrix<f64>,
    seed: u64,
) -> Result<Population> {
    if n_agents == 0 {
        return Err(Error::Usage("population needs at least one agent".into()));
    }
    let n = init_mean.len();
    if error_mean.len() != n || init_cov.shape() != (n, n) || error_cov.shape() != (n, n) {
        return Err(Error::Dimension("sampling means and covariances disagree in dimension".into()));
    }
    let li = gaussian_factor("init_cov", init_cov)?;
    let le = gaussian_factor("error_cov", error_cov)?;
    let cols: Vec<(DVector<f64>, DVector<f64>)> = (0..n_agents)
        .into_par_iter()
        .map(|i| {
            let x = init_mean + &li * draw(&mut agent_rng(seed, PURPOSE_INIT, i), n);
            let e = error_mean + &le * draw(&mut agent_rng(seed, PURPOSE_ERROR, i), n);
            (x, e)
        })
        .collect();
    Ok(Population {
        x0: DMatrix::from_fn(n, n_agents, |r, c| cols[c].0[r]),
        errors: DMatrix::from_fn(n, n_agents, |r, c| cols[c].1[r]),
    })
}

/// Mean of the columns: pairwise summation over ascending column index with
/// a split that depends only on the column count.
pub fn pairwise_mean(m: &DMatrix<f64>) -> DVector<f64> {
    fn sum(m: &DMatrix<f64>, lo: usize, hi: usize) -> DVector<f64> {
        if hi - lo <= 8 {
            let mut s = DVector::zeros(m.nrows());
            for c in lo..hi {
                s += m.column(c);
            }
            return s;
        }
        let mid = lo + (hi - lo) / 2;
        sum(m, lo, mid) + sum(m, mid, hi)
    }
    if m.ncols() == 0 {
        return DVector::zeros(m.nrows());
    }
    sum(m, 0, m.ncols()) / m.ncols() as f64
}

/// What an assignment sees at a stage.
pub struct StageContext<'a> {
    pub stage: Stage,
    /// Current states, one column per agent.
    pub states: &'a DMatrix<f64>,
    /// Empirical mean of `states`.
    pub mean: &'a DVector<f64>,
    /// Empirical means of states and controls at the nodes before the
    /// current step.
    pub past_x: &'a [DVector<f64>],
    pub past_u: &'a [DVector<f64>],
}

/// Per-agent offsets `g_i` of the feedback laws `u_i = −R⁻¹Bᵀ(P₁x_i + g_i)`.
pub trait LawAssignment: Sync {
    /// First node where every law is defined.
    fn first(&self) -> usize;
    /// Number of agents the assignment is built for, if fixed.
    fn agents(&self) -> Option<usize> {
        None
    }
    /// Writes agent `i`'s offset at the stage into column `i` of `out`.
    fn offsets(&self, ctx: &StageContext<'_>, out: &mut DMatrix<f64>);
}

/// Everybody uses the same offset path.
pub struct Common(pub VectorPath);

impl LawAssignment for Common {
    fn first(&self) -> usize {
        self.0.first()
    }

    fn offsets(&self, ctx: &StageContext<'_>, out: &mut DMatrix<f64>) {
        let g = self.0.stage(ctx.stage);
        for mut c in out.column_iter_mut() {
            c.copy_from(&g);
        }
    }
}

/// `g_i = base + S·coef_i`: offsets affine in per-agent data.
pub struct Affine {
    pub base: VectorPath,
    pub sens: MatrixPath,
    /// One column per agent.
    pub coef: DMatrix<f64>,
}

impl LawAssignment for Affine {
    fn first(&self) -> usize {
        self.base.first().max(self.sens.first())
    }

    fn agents(&self) -> Option<usize> {
        Some(self.coef.ncols())
    }

    fn offsets(&self, ctx: &StageContext<'_>, out: &mut DMatrix<f64>) {
        let b = self.base.stage(ctx.stage);
        let s = self.sens.stage(ctx.stage);
        s.mul_to(&self.coef, out);
        for mut c in out.column_iter_mut() {
            c += &b;
        }
    }
}

/// Agent-specific offset paths.
pub struct PerAgent(pub Vec<VectorPath>);

impl LawAssignment for PerAgent {
    fn first(&self) -> usize {
        self.0.iter().map(|g| g.first()).max().unwrap_or(0)
    }

    fn agents(&self) -> Option<usize> {
        Some(self.0.len())
    }

    fn offsets(&self, ctx: &StageContext<'_>, out: &mut DMatrix<f64>) {
        for (i, g) in self.0.iter().enumerate() {
            out.set_column(i, &g.stage(ctx.stage));
        }
    }
}

/// Where the mean-field terms of the dynamics come from.
#[derive(Debug, Clone)]
pub enum Coupling {
    /// Population averages at the current stage.
    Empirical,
    /// Given paths, e.g. the limiting mean field.
    Prescribed { z: VectorPath, ubar: VectorPath },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    /// Runge–Kutta when `D = 0`, Euler–Maruyama otherwise.
    #[default]
    Auto,
    EulerMaruyama,
    Rk4,
}

/// Which agents keep full traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    All,
    None,
    First(usize),
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub coupling: Coupling,
    pub scheme: Scheme,
    pub record: Record,
    pub seed: u64,
    /// Multiplies `D`.
    pub noise_scale: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { coupling: Coupling::Empirical, scheme: Scheme::Auto, record: Record::None, seed: 0, noise_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrace {
    pub agent_id: usize,
    pub e_i: DVector<f64>,
    pub x: VectorPath,
    pub u: VectorPath,
    /// `ẋ` without the noise term, for exact-drift observables.
    pub drift: VectorPath,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationResult {
    pub traces: Vec<AgentTrace>,
    pub x_n: VectorPath,
    pub u_n: VectorPath,
}

struct Eval {
    u: DMatrix<f64>,
    drift: DMatrix<f64>,
    mean_x: DVector<f64>,
    mean_u: DVector<f64>,
}

/// Resumable `N`-agent integration. Laws can be swapped between calls to
/// [`Simulation::advance`], which is how a strategy change at `t₀` is run.
#[derive(Clone)]
pub struct Simulation<'a> {
    params: &'a SystemParams,
    p1: &'a MatrixPath,
    grid: TimeGrid,
    opts: SimOptions,
    stochastic: bool,
    noise: DMatrix<f64>,
    r_inv_bt: DMatrix<f64>,
    errors: DMatrix<f64>,
    x: DMatrix<f64>,
    rngs: Vec<ChaCha8Rng>,
    node: usize,
    recorded: usize,
    rec_x: Vec<DMatrix<f64>>,
    rec_u: Vec<DMatrix<f64>>,
    rec_drift: Vec<DMatrix<f64>>,
    mean_x: Vec<DVector<f64>>,
    mean_u: Vec<DVector<f64>>,
    window: Option<RecordWindow>,
}

/// States, controls and drifts of every agent over a run of nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordWindow {
    pub first: usize,
    /// One `n × N` matrix per node.
    pub x: Vec<DMatrix<f64>>,
    pub u: Vec<DMatrix<f64>>,
    pub drift: Vec<DMatrix<f64>>,
}

impl RecordWindow {
    /// Last node covered.
    pub fn last(&self) -> usize {
        self.first + self.x.len() - 1
    }

    fn column(rec: &[DMatrix<f64>], i: usize) -> Vec<DVector<f64>> {
        rec.iter().map(|m| m.column(i).into_owned()).collect()
    }

    /// Agent `i`'s states, controls and drifts, node by node.
    pub fn agent(&self, i: usize) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        (Self::column(&self.x, i), Self::column(&self.u, i), Self::column(&self.drift, i))
    }
}

impl<'a> Simulation<'a> {
    pub fn new(params: &'a SystemParams, p1: &'a MatrixPath, population: &Population, opts: SimOptions) -> Result<Self> {
        let n = params.n();
        let grid = *p1.grid();
        let size = population.size();
        if size == 0 {
            return Err(Error::Usage("population is empty".into()));
        }
        if population.dim() != n || population.errors.shape() != (n, size) {
            return Err(Error::Dimension("population does not match the state dimension".into()));
        }
        if p1.first() != 0 {
            return Err(Error::Usage("P1 must cover the whole grid".into()));
        }
        if let Coupling::Prescribed { z, ubar } = &opts.coupling {
            if z.grid() != &grid || ubar.grid() != &grid || z.first() != 0 || ubar.first() != 0 {
                return Err(Error::Usage("prescribed mean field must cover the simulation grid".into()));
            }
        }
        let noise = &params.d * opts.noise_scale;
        let stochastic = match opts.scheme {
            Scheme::Auto => noise.amax() > 0.0,
            Scheme::EulerMaruyama => true,
            Scheme::Rk4 => {
                if noise.amax() > 0.0 {
                    return Err(Error::Usage("the Runge–Kutta scheme needs D = 0".into()));
                }
                false
            }
        };
        let recorded = match opts.record {
            Record::All => size,
            Record::None => 0,
            Record::First(k) => k.min(size),
        };
        let rngs = if stochastic { (0..size).map(|i| agent_rng(opts.seed, PURPOSE_NOISE, i)).collect() } else { Vec::new() };
        Ok(Self {
            params,
            p1,
            grid,
            opts,
            stochastic,
            noise,
            r_inv_bt: params.coefficients().r_inv_bt,
            errors: population.errors.clone(),
            x: population.x0.clone(),
            rngs,
            node: 0,
            recorded,
            rec_x: Vec::new(),
            rec_u: Vec::new(),
            rec_drift: Vec::new(),
            mean_x: Vec::new(),
            mean_u: Vec::new(),
            window: None,
        })
    }

    /// Starts keeping every agent's state, control and drift from the
    /// current node on.
    pub fn start_capture(&mut self) {
        self.window = Some(RecordWindow { first: self.node, x: Vec::new(), u: Vec::new(), drift: Vec::new() });
    }

    /// Ends the capture. The current node is included, with controls and
    /// drifts evaluated under `laws` (the laws that were in force up to now).
    pub fn take_window(&mut self, laws: &dyn LawAssignment) -> Result<RecordWindow> {
        let mut w = self.window.take().ok_or_else(|| Error::Usage("no capture in progress".into()))?;
        let e = self.evaluate(Stage::Node(self.node), &self.x, laws);
        w.x.push(self.x.clone());
        w.u.push(e.u);
        w.drift.push(e.drift);
        Ok(w)
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    fn evaluate(&self, stage: Stage, x: &DMatrix<f64>, laws: &dyn LawAssignment) -> Eval {
        let p = self.params;
        let mean_x = pairwise_mean(x);
        let mut offsets = DMatrix::zeros(x.nrows(), x.ncols());
        laws.offsets(
            &StageContext { stage, states: x, mean: &mean_x, past_x: &self.mean_x, past_u: &self.mean_u },
            &mut offsets,
        );
        offsets += self.p1.stage(stage) * x;
        let u = -(&self.r_inv_bt * offsets);
        let mean_u = pairwise_mean(&u);
        let coupling = match &self.opts.coupling {
            Coupling::Empirical => &p.c * &mean_x + &p.f * &mean_u,
            Coupling::Prescribed { z, ubar } => &p.c * z.stage(stage) + &p.f * ubar.stage(stage),
        };
        let mut drift = &p.a * x + &p.b * &u;
        for mut c in drift.column_iter_mut() {
            c += &coupling;
        }
        Eval { u, drift, mean_x, mean_u }
    }

    fn record(&mut self, e: &Eval) {
        if let Some(w) = &mut self.window {
            w.x.push(self.x.clone());
            w.u.push(e.u.clone());
            w.drift.push(e.drift.clone());
        }
        self.mean_x.push(e.mean_x.clone());
        self.mean_u.push(e.mean_u.clone());
        if self.recorded > 0 {
            let r = self.recorded;
            self.rec_x.push(self.x.columns(0, r).into_owned());
            self.rec_u.push(e.u.columns(0, r).into_owned());
            self.rec_drift.push(e.drift.columns(0, r).into_owned());
        }
    }

    fn check(&self, x: &DMatrix<f64>, node: usize) -> Result<()> {
        for (i, c) in x.column_iter().enumerate() {
            if c.iter().any(|v| !v.is_finite() || v.abs() > 1e100) {
                return Err(Error::AgentBlowup { agent: i, node });
            }
        }
        Ok(())
    }

    /// Integrates from the current node to node `to` under `laws`.
    pub fn advance(&mut self, to: usize, laws: &dyn LawAssignment) -> Result<()> {
        if to > self.grid.steps() || to < self.node {
            return Err(Error::Usage(format!("cannot advance from node {} to node {to}", self.node)));
        }
        if laws.first() > self.node {
            return Err(Error::Usage(format!("laws start at node {}, simulation is at {}", laws.first(), self.node)));
        }
        if laws.agents().is_some_and(|a| a != self.x.ncols()) {
            return Err(Error::Dimension(format!("laws for {:?} agents, population has {}", laws.agents(), self.x.ncols())));
        }
        let dt = self.grid.dt();
        while self.node < to {
            let k = self.node;
            let e1 = self.evaluate(Stage::Node(k), &self.x, laws);
            let next = if self.stochastic {
                let mut next = &self.x + &e1.drift * dt;
                self.add_noise(&mut next, dt);
                next
            } else {
                let x2 = &self.x + &e1.drift * (0.5 * dt);
                let k2 = self.evaluate(Stage::Mid(k), &x2, laws).drift;
                let x3 = &self.x + &k2 * (0.5 * dt);
                let k3 = self.evaluate(Stage::Mid(k), &x3, laws).drift;
                let x4 = &self.x + &k3 * dt;
                let k4 = self.evaluate(Stage::Node(k + 1), &x4, laws).drift;
                &self.x + (&e1.drift + (k2 + k3) * 2.0 + k4) * (dt / 6.0)
            };
            self.check(&next, k + 1)?;
            self.record(&e1);
            self.x = next;
            self.node += 1;
        }
        Ok(())
    }

    fn add_noise(&mut self, next: &mut DMatrix<f64>, dt: f64) {
        let n = next.nrows();
        let scale = dt.sqrt();
        let d = &self.noise;
        next.as_mut_slice()
            .par_chunks_mut(n * CHUNK)
            .zip(self.rngs.par_chunks_mut(CHUNK))
            .for_each(|(cols, rngs)| {
                for (col, rng) in cols.chunks_mut(n).zip(rngs.iter_mut()) {
                    let xi = draw(rng, n);
                    let dw = d * xi * scale;
                    for (v, w) in col.iter_mut().zip(dw.iter()) {
                        *v += w;
                    }
                }
            });
    }

    /// Records the final node under `laws` and returns the traces. The
    /// simulation must have reached `T`.
    pub fn finish(mut self, laws: &dyn LawAssignment) -> Result<PopulationResult> {
        if self.node != self.grid.steps() {
            return Err(Error::Usage(format!("simulation stopped at node {}", self.node)));
        }
        let e = self.evaluate(Stage::Node(self.node), &self.x, laws);
        self.record(&e);
        let grid = self.grid;
        let x_n = VectorPath::from_nodes(grid, 0, &self.mean_x)?;
        let u_n = VectorPath::from_nodes(grid, 0, &self.mean_u)?;
        let traces = (0..self.recorded)
            .map(|i| {
                let col = |rec: &[DMatrix<f64>]| rec.iter().map(|m| m.column(i).into_owned()).collect::<Vec<_>>();
                Ok(AgentTrace {
                    agent_id: i,
                    e_i: self.errors.column(i).into_owned(),
                    x: VectorPath::from_nodes(grid, 0, &col(&self.rec_x))?,
                    u: VectorPath::from_nodes(grid, 0, &col(&self.rec_u))?,
                    drift: VectorPath::from_nodes(grid, 0, &col(&self.rec_drift))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PopulationResult { traces, x_n, u_n })
    }
}

/// Runs the population over the whole grid under one assignment.
pub fn simulate(
    params: &SystemParams,
    p1: &MatrixPath,
    population: &Population,
    laws: &dyn LawAssignment,
    opts: SimOptions,
) -> Result<PopulationResult> {
    let mut sim = Simulation::new(params, p1, population, opts)?;
    sim.advance(p1.grid().steps(), laws)?;
    sim.finish(laws)
}

/// Exact empirical means of the traces' states and controls.
pub fn empirical_mf(traces: &[AgentTrace]) -> Result<(VectorPath, VectorPath)> {
    let first = traces.first().ok_or_else(|| Error::Usage("no traces".into()))?;
    let grid = *first.x.grid();
    if traces.iter().any(|t| t.x.grid() != &grid || t.u.grid() != &grid || t.x.first() != first.x.first()) {
        return Err(Error::Usage("traces live on different grids".into()));
    }
    let mean = |pick: &dyn Fn(&AgentTrace) -> &VectorPath| -> Result<VectorPath> {
        let p0 = pick(first);
        let nodes: Vec<DVector<f64>> = (p0.first()..=grid.steps())
            .map(|k| {
                let m = DMatrix::from_fn(p0.dim(), traces.len(), |r, c| pick(&traces[c]).col(k)[r]);
                pairwise_mean(&m)
            })
            .collect();
        VectorPath::from_nodes(grid, p0.first(), &nodes)
    };
    Ok((mean(&|t| &t.x)?, mean(&|t| &t.u)?))
}
