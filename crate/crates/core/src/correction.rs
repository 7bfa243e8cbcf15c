//! One-time error correction.
//!
//! An agent observes its own drift on `[0, t₀]`. Removing what its own
//! prediction explains leaves the residual
//!
//! ```text
//! Ob¹ = Ob − (C − S_FP₁)z_i + S_Fg_i = 𝓚₁Ē + 𝓚₂E_i,
//! 𝓚₁ = (C − S_FP₁)𝓜_z − S_F𝓜_g,
//! 𝓚₂ = S_F𝓜_g − (C − S_FP₁)Φ₁Φ₁(0)⁻¹,
//! ```
//!
//! which is stacked at a few sample times and solved for `(Ē, E_i)`. The
//! true mean field at `t₀` is then `z_i(t₀) + 𝓜_z(t₀)Ē − Φ₁(t₀)Φ₁(0)⁻¹E_i`
//! and the agent restarts the equilibrium from there.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::deviation::DeviationMaps;
use crate::equilibrium::{best_response, equilibrium_mf, predict_mf, FeedbackLaw, MeanField};
use crate::error::{Error, Result};
use crate::grid::{MatrixPath, TimeGrid, VectorPath};
use crate::linalg;
use crate::params::SystemParams;
use crate::population::{Affine, AgentTrace, Population, PopulationResult, SimOptions, Simulation};
use crate::riccati::{self, RiccatiBundle};

/// Relative singular-value threshold for rank decisions.
pub const SV_TOL: f64 = 1e-8;

/// Default number of sample times in `(0, t₀]`.
pub const DEFAULT_SAMPLES: usize = 8;

/// How `ẋ` is obtained from an agent's record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ObservableMode {
    /// The simulator's stored drift. Validation only.
    ExactDrift,
    /// Fourth-order finite differences of the state path.
    #[default]
    FiniteDifference,
}

/// Derivative of node samples with spacing `h`: fourth-order stencils when
/// at least five nodes are available, lower order otherwise.
pub fn differentiate(f: &[DVector<f64>], h: f64) -> Result<Vec<DVector<f64>>> {
    let len = f.len();
    let d = |terms: &[(usize, f64)], scale: f64| -> DVector<f64> {
        let mut out = DVector::zeros(f[0].len());
        for &(i, w) in terms {
            out.axpy(w, &f[i], 1.0);
        }
        out / scale
    };
    match len {
        0 | 1 => Err(Error::InsufficientData("need at least two nodes to differentiate".into())),
        2 => {
            let s = d(&[(0, -1.0), (1, 1.0)], h);
            Ok(vec![s.clone(), s])
        }
        3 | 4 => Ok((0..len)
            .map(|k| match k {
                0 => d(&[(0, -3.0), (1, 4.0), (2, -1.0)], 2.0 * h),
                k if k == len - 1 => d(&[(k, 3.0), (k - 1, -4.0), (k - 2, 1.0)], 2.0 * h),
                k => d(&[(k + 1, 1.0), (k - 1, -1.0)], 2.0 * h),
            })
            .collect()),
        _ => Ok((0..len)
            .map(|k| {
                let l = len - 1;
                match k {
                    0 => d(&[(0, -25.0), (1, 48.0), (2, -36.0), (3, 16.0), (4, -3.0)], 12.0 * h),
                    1 => d(&[(0, -3.0), (1, -10.0), (2, 18.0), (3, -6.0), (4, 1.0)], 12.0 * h),
                    k if k == l => d(&[(l, 25.0), (l - 1, -48.0), (l - 2, 36.0), (l - 3, -16.0), (l - 4, 3.0)], 12.0 * h),
                    k if k == l - 1 => d(&[(l, 3.0), (l - 1, 10.0), (l - 2, -18.0), (l - 3, 6.0), (l - 4, -1.0)], 12.0 * h),
                    k => d(&[(k - 2, 1.0), (k - 1, -8.0), (k + 1, 8.0), (k + 2, -1.0)], 12.0 * h),
                }
            })
            .collect()),
    }
}

/// `Ob = ẋ − Ax − Bu` at nodes `0..x.len()`.
pub fn observable(
    params: &SystemParams,
    grid: &TimeGrid,
    x: &[DVector<f64>],
    u: &[DVector<f64>],
    drift: &[DVector<f64>],
    mode: ObservableMode,
) -> Result<Vec<DVector<f64>>> {
    if x.len() < 2 {
        return Err(Error::InsufficientData("t0 must lie at or after the second grid node".into()));
    }
    if u.len() != x.len() || (mode == ObservableMode::ExactDrift && drift.len() != x.len()) {
        return Err(Error::Dimension("record lengths disagree".into()));
    }
    let xdot = match mode {
        ObservableMode::ExactDrift => drift.to_vec(),
        ObservableMode::FiniteDifference => differentiate(x, grid.dt())?,
    };
    Ok(xdot
        .iter()
        .zip(x.iter().zip(u))
        .map(|(xd, (x, u))| xd - &params.a * x - &params.b * u)
        .collect())
}

/// Observable of a recorded agent on `[0, t₀]`.
pub fn observable_path(trace: &AgentTrace, params: &SystemParams, t0: f64, mode: ObservableMode) -> Result<Vec<DVector<f64>>> {
    let grid = *trace.x.grid();
    let k0 = grid.require_node(t0)?;
    if trace.x.first() != 0 {
        return Err(Error::Usage("trace must start at the first grid node".into()));
    }
    let cut = |p: &VectorPath| (0..=k0).map(|k| p.node(k)).collect::<Vec<_>>();
    observable(params, &grid, &cut(&trace.x), &cut(&trace.u), &cut(&trace.drift), mode)
}

/// `Ob¹ = Ob − (C − S_FP₁)z_i + S_Fg_i` at nodes `0..ob.len()`.
pub fn residual_path(
    params: &SystemParams,
    p1: &MatrixPath,
    ob: &[DVector<f64>],
    z_i: &VectorPath,
    g_i: &VectorPath,
) -> Vec<DVector<f64>> {
    let s_f = params.coefficients().s_f;
    ob.iter()
        .enumerate()
        .map(|(k, o)| o - (&params.c - &s_f * p1.at(k)) * z_i.col(k) + &s_f * g_i.col(k))
        .collect()
}

/// `(𝓚₁, 𝓚₂)` on the whole grid.
pub fn correction_matrices(bundle: &RiccatiBundle, maps: &DeviationMaps) -> (MatrixPath, MatrixPath) {
    let p = &bundle.params;
    let s_f = p.coefficients().s_f;
    let grid = bundle.grid;
    let k1 = MatrixPath::from_fn(grid, 0, |j, _| (&p.c - &s_f * bundle.p1.at(j)) * maps.mz.at(j) - &s_f * maps.mg.at(j));
    let k2 = MatrixPath::from_fn(grid, 0, |j, _| {
        &s_f * maps.mg.at(j) - (&p.c - &s_f * bundle.p1.at(j)) * maps.transition1(j, 0)
    });
    (k1, k2)
}

/// `m` nodes spread evenly over `(0, t₀]`: `round(j·k₀/m)`, `j = 1..m`.
pub fn default_sample_nodes(k0: usize, m: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (1..=m).map(|j| ((j * k0) as f64 / m as f64).round() as usize).filter(|&k| k > 0).collect();
    v.dedup();
    v
}

#[derive(Debug, Clone)]
pub struct CorrectionProblem {
    pub k1: MatrixPath,
    pub k2: MatrixPath,
    pub t0: f64,
    pub k0: usize,
    pub sample_nodes: Vec<usize>,
    /// `[𝓚₁(t_j) 𝓚₂(t_j)]` stacked over the samples, `(m·n) × 2n`.
    pub stacked_k: DMatrix<f64>,
}

pub fn build_problem(bundle: &RiccatiBundle, maps: &DeviationMaps, t0: f64, sample_nodes: Vec<usize>) -> Result<CorrectionProblem> {
    let k0 = bundle.grid.require_node(t0)?;
    if sample_nodes.is_empty() {
        return Err(Error::Usage("no sample times".into()));
    }
    if sample_nodes.windows(2).any(|w| w[0] >= w[1]) || *sample_nodes.last().unwrap() > k0 {
        return Err(Error::Usage("sample times must be increasing and lie in [0, t0]".into()));
    }
    let (k1, k2) = correction_matrices(bundle, maps);
    let n = bundle.params.n();
    let mut stacked_k = DMatrix::zeros(sample_nodes.len() * n, 2 * n);
    for (r, &k) in sample_nodes.iter().enumerate() {
        stacked_k.view_mut((r * n, 0), (n, n)).copy_from(k1.at(k));
        stacked_k.view_mut((r * n, n), (n, n)).copy_from(k2.at(k));
    }
    Ok(CorrectionProblem { k1, k2, t0, k0, sample_nodes, stacked_k })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identifiability {
    pub rank: usize,
    pub required: usize,
    pub identifiable: bool,
    pub singular_values: Vec<f64>,
}

pub fn identifiability(problem: &CorrectionProblem, sv_tol: f64) -> Identifiability {
    let required = problem.stacked_k.ncols();
    let rank = linalg::numerical_rank(&problem.stacked_k, sv_tol);
    Identifiability { rank, required, identifiable: rank == required, singular_values: linalg::singular_values(&problem.stacked_k) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionResult {
    pub e_bar: DVector<f64>,
    pub e_i: DVector<f64>,
    pub z_a_t0: DVector<f64>,
    pub identifiable: bool,
    pub rank: usize,
    /// `‖stacked 𝓚·(Ē, E_i) − stacked Ob¹‖`.
    pub residual: f64,
}

/// Least-squares recovery of `(Ē, E_i)` from an agent's residual `ob1`
/// (indexed by node from 0), then the mean field at `t₀`.
pub fn recover_errors(
    problem: &CorrectionProblem,
    maps: &DeviationMaps,
    ob1: &[DVector<f64>],
    z_i_t0: &DVector<f64>,
    sv_tol: f64,
) -> Result<CorrectionResult> {
    let id = identifiability(problem, sv_tol);
    if !id.identifiable {
        return Err(Error::NotIdentifiable { rank: id.rank, required: id.required });
    }
    let n = z_i_t0.len();
    if ob1.len() <= problem.k0 {
        return Err(Error::InsufficientData(format!("residual covers {} nodes, t0 is node {}", ob1.len(), problem.k0)));
    }
    let rhs = DVector::from_iterator(
        problem.sample_nodes.len() * n,
        problem.sample_nodes.iter().flat_map(|&k| ob1[k].iter().copied()),
    );
    let theta = linalg::lstsq(&problem.stacked_k, &rhs, sv_tol)?;
    let residual = (&problem.stacked_k * &theta - rhs).norm();
    let e_bar = theta.rows(0, n).into_owned();
    let e_i = theta.rows(n, n).into_owned();
    let k0 = problem.k0;
    let z_a_t0 = z_i_t0 + maps.mz.at(k0) * &e_bar - maps.transition1(k0, 0) * &e_i;
    Ok(CorrectionResult { e_bar, e_i, z_a_t0, identifiable: true, rank: id.rank, residual })
}

/// Equilibrium restarted at `t₀` from `z^A(t₀)`, with its feedback law on `[t₀, T]`.
pub fn modified_game(bundle: &RiccatiBundle, z_a_t0: &DVector<f64>, t0: f64) -> Result<(MeanField, FeedbackLaw)> {
    let mf = predict_mf(bundle, t0, z_a_t0)?;
    let law = best_response(bundle, &mf)?;
    Ok((mf, law))
}

/// Predicted mean field and offset as affine functions of the prediction's
/// starting point: `z = z_ref + S_z(ζ − ζ_ref)`, `g = g_ref + S_g(ζ − ζ_ref)`.
/// Built from `n + 1` solves, which is exact because every solver is affine
/// in its data.
#[derive(Debug, Clone)]
pub struct PredictionFamily {
    pub reference: DVector<f64>,
    pub z: VectorPath,
    pub z_sens: MatrixPath,
    pub g: VectorPath,
    pub g_sens: MatrixPath,
}

impl PredictionFamily {
    pub fn build(bundle: &RiccatiBundle, t_from: f64, reference: &DVector<f64>) -> Result<Self> {
        let n = reference.len();
        let solve = |z: &DVector<f64>| -> Result<(VectorPath, VectorPath)> {
            let mf = predict_mf(bundle, t_from, z)?;
            let g = riccati::solve_tracking_offset(&bundle.params, &bundle.p1, &mf.z, &mf.ubar)?;
            Ok((mf.z, g))
        };
        let runs = (0..=n)
            .into_par_iter()
            .map(|j| {
                let mut z = reference.clone();
                if j > 0 {
                    z[j - 1] += 1.0;
                }
                solve(&z)
            })
            .collect::<Result<Vec<_>>>()?;
        let (z, g) = runs[0].clone();
        let sens = |pick: &dyn Fn(&(VectorPath, VectorPath)) -> &VectorPath| {
            let base = pick(&runs[0]);
            MatrixPath::from_fn(*base.grid(), base.first(), |k, _| {
                DMatrix::from_fn(base.dim(), n, |r, c| pick(&runs[c + 1]).col(k)[r] - base.col(k)[r])
            })
        };
        let z_sens = sens(&|r| &r.0);
        let g_sens = sens(&|r| &r.1);
        Ok(Self { reference: reference.clone(), z, z_sens, g, g_sens })
    }

    pub fn first(&self) -> usize {
        self.z.first()
    }

    pub fn z_at(&self, k: usize, start: &DVector<f64>) -> DVector<f64> {
        self.z.node(k) + self.z_sens.at(k) * (start - &self.reference)
    }

    pub fn g_at(&self, k: usize, start: &DVector<f64>) -> DVector<f64> {
        self.g.node(k) + self.g_sens.at(k) * (start - &self.reference)
    }

    /// Offsets for agents whose predictions start at the columns of `starts`.
    pub fn assignment(&self, starts: &DMatrix<f64>) -> Affine {
        let mut coef = starts.clone();
        for mut c in coef.column_iter_mut() {
            c -= &self.reference;
        }
        Affine { base: self.g.clone(), sens: self.g_sens.clone(), coef }
    }
}

#[derive(Debug, Clone)]
pub struct CorrectionConfig {
    pub t0: f64,
    pub mode: ObservableMode,
    /// Sample nodes; `None` uses [`DEFAULT_SAMPLES`] evenly spread nodes.
    pub sample_nodes: Option<Vec<usize>>,
    pub sv_tol: f64,
}

impl CorrectionConfig {
    pub fn at(t0: f64) -> Self {
        Self { t0, mode: ObservableMode::default(), sample_nodes: None, sv_tol: SV_TOL }
    }
}

#[derive(Debug, Clone)]
pub struct CorrectionRun {
    pub k0: usize,
    /// Correct-information equilibrium from the population's true initial mean.
    pub z_c: MeanField,
    pub identifiability: Identifiability,
    pub uncorrected: PopulationResult,
    /// Present when the problem is identifiable.
    pub corrected: Option<PopulationResult>,
    /// Per agent, in agent order.
    pub results: Vec<CorrectionResult>,
    /// `sup_{[t₀,T]} ‖x⁽ᴺ⁾ − z^c‖` without and with correction.
    pub err_uncorrected: f64,
    pub err_corrected: Option<f64>,
}

/// Runs the population with erroneous predictions, lets every agent
/// correct at `t₀`, and runs the uncorrected population alongside.
pub fn run_correction(
    bundle: &RiccatiBundle,
    maps: &DeviationMaps,
    population: &Population,
    opts: SimOptions,
    cfg: &CorrectionConfig,
) -> Result<CorrectionRun> {
    let p = &bundle.params;
    let grid = bundle.grid;
    let k0 = grid.require_node(cfg.t0)?;
    let samples = cfg.sample_nodes.clone().unwrap_or_else(|| default_sample_nodes(k0, DEFAULT_SAMPLES));
    let problem = build_problem(bundle, maps, cfg.t0, samples)?;
    let id = identifiability(&problem, cfg.sv_tol);

    let z0 = population.mean_x0();
    let z_c = equilibrium_mf(bundle, &z0)?;
    let initial = PredictionFamily::build(bundle, grid.t_start(), &z0)?;
    let mut beliefs = population.errors.clone();
    for mut c in beliefs.column_iter_mut() {
        c += &z0;
    }
    let before = initial.assignment(&beliefs);

    let mut sim = Simulation::new(p, &bundle.p1, population, opts)?;
    sim.start_capture();
    sim.advance(k0, &before)?;
    let window = sim.take_window(&before)?;
    let mut plain = sim.clone();
    plain.advance(grid.steps(), &before)?;
    let uncorrected = plain.finish(&before)?;
    let err_uncorrected = uncorrected.x_n.sup_dist_from(&z_c.z, k0)?;
    if !id.identifiable {
        return Ok(CorrectionRun {
            k0,
            z_c,
            identifiability: id,
            uncorrected,
            corrected: None,
            results: Vec::new(),
            err_uncorrected,
            err_corrected: None,
        });
    }

    let n = p.n();
    let s_f = p.coefficients().s_f;
    let results = (0..population.size())
        .into_par_iter()
        .map(|i| {
            let (x, u, drift) = window.agent(i);
            let ob = observable(p, &grid, &x, &u, &drift, cfg.mode)?;
            let belief = beliefs.column(i).into_owned();
            let ob1: Vec<DVector<f64>> = ob
                .iter()
                .enumerate()
                .map(|(k, o)| {
                    o - (&p.c - &s_f * bundle.p1.at(k)) * initial.z_at(k, &belief) + &s_f * initial.g_at(k, &belief)
                })
                .collect();
            recover_errors(&problem, maps, &ob1, &initial.z_at(k0, &belief), cfg.sv_tol)
        })
        .collect::<Result<Vec<_>>>()?;

    let restart = PredictionFamily::build(bundle, cfg.t0, &z_c.z.node(k0))?;
    let starts = DMatrix::from_fn(n, results.len(), |r, c| results[c].z_a_t0[r]);
    let after = restart.assignment(&starts);
    sim.advance(grid.steps(), &after)?;
    let corrected = sim.finish(&after)?;
    let err_corrected = corrected.x_n.sup_dist_from(&z_c.z, k0)?;
    Ok(CorrectionRun {
        k0,
        z_c,
        identifiability: id,
        uncorrected,
        corrected: Some(corrected),
        results,
        err_uncorrected,
        err_corrected: Some(err_corrected),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deviation::build_maps;
    use crate::population::{simulate, Common, Record};

    fn z0() -> DVector<f64> {
        DVector::from_vec(vec![0.3, 0.5])
    }

    fn deterministic() -> SystemParams {
        let mut p = SystemParams::p6();
        p.d = DMatrix::zeros(2, 2);
        p
    }

    fn setup(p: &SystemParams) -> (RiccatiBundle, DeviationMaps) {
        let b = RiccatiBundle::solve(p, &TimeGrid::new(0.0, 2.0, 2000).unwrap()).unwrap();
        let m = build_maps(&b).unwrap();
        (b, m)
    }

    #[test]
    fn differentiation_orders() {
        let h = 1e-2;
        let f: Vec<DVector<f64>> = (0..40).map(|k| DVector::from_element(1, (k as f64 * h).sin())).collect();
        let d = differentiate(&f, h).unwrap();
        let err = d.iter().enumerate().map(|(k, v)| (v[0] - (k as f64 * h).cos()).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
        assert!(differentiate(&f[..1], h).is_err());
        let lin: Vec<DVector<f64>> = (0..3).map(|k| DVector::from_element(1, 2.0 * k as f64)).collect();
        assert!(differentiate(&lin, 1.0).unwrap().iter().all(|v| (v[0] - 2.0).abs() < 1e-12));
    }

    #[test]
    fn sample_nodes_and_problem_validation() {
        assert_eq!(default_sample_nodes(500, 8), vec![63, 125, 188, 250, 313, 375, 438, 500]);
        let (b, m) = setup(&deterministic());
        assert!(build_problem(&b, &m, 0.5, vec![]).is_err());
        assert!(build_problem(&b, &m, 0.5, vec![100, 600]).is_err());
    }

    #[test]
    fn identifiability_cases() {
        let (b, m) = setup(&deterministic());
        let pr = build_problem(&b, &m, 0.5, default_sample_nodes(500, 8)).unwrap();
        assert!(identifiability(&pr, SV_TOL).identifiable);
        let one = build_problem(&b, &m, 0.5, vec![500]).unwrap();
        let id = identifiability(&one, SV_TOL);
        assert!(id.rank <= 2 && !id.identifiable);
        // adding samples never lowers the rank
        let more = build_problem(&b, &m, 0.5, vec![250, 500]).unwrap();
        assert!(identifiability(&more, SV_TOL).rank >= id.rank);

        let mut p = deterministic();
        p.c = DMatrix::zeros(2, 2);
        p.f = DMatrix::zeros(2, 2);
        let (b, m) = setup(&p);
        let pr = build_problem(&b, &m, 0.5, default_sample_nodes(500, 8)).unwrap();
        assert_eq!(identifiability(&pr, SV_TOL).rank, 0);
        let zero = vec![DVector::zeros(2); 501];
        assert!(matches!(recover_errors(&pr, &m, &zero, &z0(), SV_TOL), Err(Error::NotIdentifiable { .. })));
    }

    /// One agent with its own error inside a population that shares `Ē`.
    fn single_agent_record(p: &SystemParams, b: &RiccatiBundle, e_bar: &DVector<f64>, e_i: &DVector<f64>) -> AgentTrace {
        let fam = PredictionFamily::build(b, 0.0, &z0()).unwrap();
        // Everybody else holds Ē; agent 0 holds E_i but has no weight in the mean
        // only in the limit, so use the prescribed actual mean field.
        let crowd = simulate(
            p,
            &b.p1,
            &Population::uniform(1, &z0(), e_bar),
            &fam.assignment(&DMatrix::from_fn(2, 1, |r, _| z0()[r] + e_bar[r])),
            SimOptions::default(),
        )
        .unwrap();
        let me = Population::uniform(1, &z0(), e_i);
        let opts = SimOptions {
            coupling: crate::population::Coupling::Prescribed { z: crowd.x_n, ubar: crowd.u_n },
            record: Record::All,
            ..Default::default()
        };
        let law = fam.assignment(&DMatrix::from_fn(2, 1, |r, _| z0()[r] + e_i[r]));
        simulate(p, &b.p1, &me, &law, opts).unwrap().traces.remove(0)
    }

    #[test]
    fn observable_identity_and_modes() {
        let p = deterministic();
        let (b, _) = setup(&p);
        let e = DVector::from_vec(vec![0.4, -0.4]);
        let tr = single_agent_record(&p, &b, &e, &e);
        let exact = observable_path(&tr, &p, 0.5, ObservableMode::ExactDrift).unwrap();
        let fd = observable_path(&tr, &p, 0.5, ObservableMode::FiniteDifference).unwrap();
        let dt = b.grid.dt();
        let worst = exact.iter().zip(&fd).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        assert!(worst < 5.0 * dt * dt, "{worst}");
        assert!(observable_path(&tr, &p, 0.0, ObservableMode::ExactDrift).is_err());
    }

    #[test]
    fn no_coupling_means_no_observable() {
        let mut p = deterministic();
        p.c = DMatrix::zeros(2, 2);
        p.f = DMatrix::zeros(2, 2);
        let (b, _) = setup(&p);
        let e = DVector::from_vec(vec![0.4, -0.4]);
        let tr = single_agent_record(&p, &b, &e, &e);
        let ob = observable_path(&tr, &p, 0.5, ObservableMode::ExactDrift).unwrap();
        assert!(ob.iter().all(|v| v.amax() < 1e-14));
    }

    #[test]
    fn residual_equals_k_combination() {
        let p = deterministic();
        let (b, m) = setup(&p);
        let e_bar = DVector::from_vec(vec![0.4, -0.4]);
        let e_i = DVector::from_vec(vec![0.2, 0.1]);
        let tr = single_agent_record(&p, &b, &e_bar, &e_i);
        let ob = observable_path(&tr, &p, 0.5, ObservableMode::ExactDrift).unwrap();
        let zi = equilibrium_mf(&b, &(z0() + &e_i)).unwrap();
        let gi = best_response(&b, &zi).unwrap().g;
        let ob1 = residual_path(&p, &b.p1, &ob, &zi.z, &gi);
        let (k1, k2) = correction_matrices(&b, &m);
        for (k, r) in ob1.iter().enumerate() {
            let expect = k1.at(k) * &e_bar + k2.at(k) * &e_i;
            assert!((r - expect).amax() < 1e-6, "node {k}");
        }
        let problem = build_problem(&b, &m, 0.5, default_sample_nodes(500, 8)).unwrap();
        let res = recover_errors(&problem, &m, &ob1, &zi.z.node(500), SV_TOL).unwrap();
        assert!((&res.e_bar - &e_bar).norm() <= 1e-6 * e_bar.norm());
        assert!((&res.e_i - &e_i).norm() <= 1e-6 * e_i.norm());
        let z_true = equilibrium_mf(&b, &z0()).unwrap().z.node(500) + m.mz.at(500) * &e_bar;
        assert!((&res.z_a_t0 - z_true).amax() < 1e-6);
    }

    #[test]
    fn zero_errors_recover_zero() {
        let p = deterministic();
        let (b, m) = setup(&p);
        let zero = DVector::zeros(2);
        let tr = single_agent_record(&p, &b, &zero, &zero);
        let ob = observable_path(&tr, &p, 0.5, ObservableMode::FiniteDifference).unwrap();
        let zi = equilibrium_mf(&b, &z0()).unwrap();
        let gi = best_response(&b, &zi).unwrap().g;
        let ob1 = residual_path(&p, &b.p1, &ob, &zi.z, &gi);
        assert!(ob1.iter().all(|v| v.amax() < 1e-9));
        let problem = build_problem(&b, &m, 0.5, default_sample_nodes(500, 8)).unwrap();
        let res = recover_errors(&problem, &m, &ob1, &zi.z.node(500), SV_TOL).unwrap();
        assert!(res.e_bar.amax() < 1e-8 && res.e_i.amax() < 1e-8);
        assert!(res.residual <= 1e-8);
    }

    #[test]
    fn modified_game_from_correct_state_is_equilibrium() {
        let (b, _) = setup(&deterministic());
        let zc = equilibrium_mf(&b, &z0()).unwrap();
        let (mf, law) = modified_game(&b, &zc.z.node(500), 0.5).unwrap();
        assert!(mf.z.sup_dist(&zc.z.tail(500)).unwrap() < 1e-8);
        let gc = best_response(&b, &zc).unwrap().g.tail(500);
        assert!(law.g.sup_dist(&gc).unwrap() < 1e-8);
    }

    #[test]
    fn prediction_family_is_exact() {
        let (b, _) = setup(&deterministic());
        let fam = PredictionFamily::build(&b, 0.0, &z0()).unwrap();
        let start = DVector::from_vec(vec![0.7, -0.2]);
        let mf = equilibrium_mf(&b, &start).unwrap();
        let g = best_response(&b, &mf).unwrap().g;
        for k in (0..=2000).step_by(97) {
            assert!((fam.z_at(k, &start) - mf.z.node(k)).amax() < 1e-12);
            assert!((fam.g_at(k, &start) - g.node(k)).amax() < 1e-12);
        }
        let law = fam.assignment(&DMatrix::from_fn(2, 4, |r, _| start[r]));
        let pop = Population::uniform(4, &start, &DVector::zeros(2));
        let a = simulate(&b.params, &b.p1, &pop, &law, SimOptions::default()).unwrap();
        let c = simulate(&b.params, &b.p1, &pop, &Common(g), SimOptions::default()).unwrap();
        assert!(a.x_n.sup_dist(&c.x_n).unwrap() < 1e-12);
    }

    #[test]
    fn pipeline_recovers_and_improves() {
        let p = deterministic();
        let (b, m) = setup(&p);
        let e_bar = DVector::from_vec(vec![0.4, -0.4]);
        let cov = DMatrix::identity(2, 2) * 0.1;
        let mut pop = crate::population::sample_population(40, &z0(), &(DMatrix::identity(2, 2) * 0.003), &e_bar, &cov, 7).unwrap();
        pop.center_errors(&e_bar);
        let run = run_correction(&b, &m, &pop, SimOptions::default(), &CorrectionConfig::at(0.5)).unwrap();
        assert!(run.identifiability.identifiable);
        for (i, r) in run.results.iter().enumerate() {
            assert!((&r.e_bar - &e_bar).norm() <= 1e-6 * e_bar.norm(), "agent {i}: {}", r.e_bar);
            let e_i = pop.errors.column(i).into_owned();
            assert!((&r.e_i - &e_i).norm() <= 1e-6 * e_i.norm());
        }
        let corrected = run.err_corrected.unwrap();
        assert!(corrected < run.err_uncorrected, "{corrected} vs {}", run.err_uncorrected);
        // after t₀ the corrected population follows Φ₁(t)Φ₁(t₀)⁻¹𝓜_z(t₀)Ē
        let dz = run.corrected.unwrap().x_n.tail(500).sub(&run.z_c.z.tail(500)).unwrap();
        let expect = m.corrected_mf_deviation(0.5, &e_bar).unwrap();
        assert!(dz.sup_dist(&expect).unwrap() < 1e-6);
        let before = run.uncorrected.x_n.sub(&run.z_c.z).unwrap();
        assert!(before.sup_dist(&m.mz.apply(&e_bar)).unwrap() < 1e-6);
    }

    #[test]
    fn non_identifiable_pipeline_skips_correction() {
        let p = deterministic();
        let (b, m) = setup(&p);
        let pop = Population::uniform(3, &z0(), &DVector::from_vec(vec![0.1, 0.1]));
        let cfg = CorrectionConfig { sample_nodes: Some(vec![500]), ..CorrectionConfig::at(0.5) };
        let run = run_correction(&b, &m, &pop, SimOptions::default(), &cfg).unwrap();
        assert!(run.corrected.is_none() && run.results.is_empty());
    }
}
