//! Real-time mode: every agent re-estimates the mean field at every instant
//! and re-plans from the estimate.
//!
//! At an anchor `t₀` agent `i` holds two estimates, its own `ẑ` of the mean
//! field and `z̄` of what the population believes on average. From them it
//! predicts
//!
//! ```text
//! z̄' = (A + C − 𝒞(P₁+P₂))z̄ − 𝒞𝒢₁,     ḡ = P₂z̄ + 𝒢₁,
//! ẑ' = (A + C − 𝒞P₁)ẑ − 𝒞ḡ,           ū = −R⁻¹Bᵀ(P₁ẑ + ḡ),
//! ```
//!
//! and tracks `(ẑ, ū)` with the offset `g_i`. Errors `E_i = ẑ − z^c(t₀)`,
//! `Ē¹ = z̄ − z^c(t₀)` move the offset by `𝓜_{i,g}E_i + 𝓜_{0,g}Ē¹`, with
//! `Φ_h` the fundamental solution of `−(Aᵀ − P₁S_B)`, `Φ_h(T) = I`:
//!
//! ```text
//! 𝓜_{i,z}(t) = Φ_z(t)Φ_z(t₀)⁻¹
//! 𝓜_{0,z}(t) = −Φ_z(t)∫_{t₀}^t Φ_z⁻¹𝒞P₂Φ₁Φ₁(t₀)⁻¹
//! 𝓜_{i,g}(t) = −Φ_h(t)Φ_h(T)⁻¹Q̄Γ̄𝓜_{i,z}(T) − Φ_h(t)∫_T^t Φ_h⁻¹K𝓜_{i,z}
//! 𝓜_{0,g}(t) = −Φ_h(t)Φ_h(T)⁻¹Q̄Γ̄𝓜_{0,z}(T) − Φ_h(t)∫_T^t Φ_h⁻¹(K𝓜_{0,z} − P₁S_FP₂Φ₁Φ₁(t₀)⁻¹)
//! ```
//!
//! Applying the plan only at its anchor, the realized mean field deviates by
//! `Δz^A(t) = −Φ_z(t)∫_0^t Φ_z⁻¹𝒞(𝓜_{i,g}^{(s)}(s)Ē(s) + 𝓜_{0,g}^{(s)}(s)Ē¹(s)) ds`.

use nalgebra::{DMatrix, DVector};

use crate::deviation::{build_maps, DeviationMaps, MAP_QUADRATURE};
use crate::equilibrium::{best_response, equilibrium_mf, predict_mf, FeedbackLaw, MeanField};
use crate::error::{Error, Result};
use crate::grid::{MatrixPath, Stage, TimeGrid, VectorPath};
use crate::linalg;
use crate::ode::{self, Direction};
use crate::population::{self, LawAssignment, Population, PopulationResult, SimOptions, StageContext};
use crate::registry::Registry;
use crate::riccati::{self, RiccatiBundle};

/// An agent's estimates at anchor `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub zbar_hat: DVector<f64>,
    pub z_hat: DVector<f64>,
    pub t0: f64,
}

#[derive(Debug, Clone)]
pub struct RestrictedPrediction {
    pub zbar: VectorPath,
    pub gbar: VectorPath,
    pub z_hat: VectorPath,
    pub ubar: VectorPath,
    pub g_i: VectorPath,
    pub law: FeedbackLaw,
}

/// Prediction from the estimates at `est.t0`, on `[t₀, T]`.
pub fn restricted_prediction(bundle: &RiccatiBundle, est: &EstimatorState) -> Result<RestrictedPrediction> {
    let p = &bundle.params;
    let n = p.n();
    if est.z_hat.len() != n || est.zbar_hat.len() != n {
        return Err(Error::Dimension("estimates do not match the state dimension".into()));
    }
    if !(est.z_hat.iter().chain(est.zbar_hat.iter()).all(|v| v.is_finite())) {
        return Err(Error::Usage("estimates must be finite".into()));
    }
    let grid = bundle.grid;
    let k0 = grid.require_node(est.t0)?;
    let c = p.coefficients();
    let a_c = &p.a + &p.c;
    let h_bar = MatrixPath::from_fn(grid, 0, |j, _| &a_c - &c.s_bf * (bundle.p1.at(j) + bundle.p2.at(j)));
    let f_bar = bundle.g1.map_nodes(|_, g| -(&c.s_bf * g));
    let zbar = ode::integrate_linear_ode(&h_bar, Some(&f_bar), est.t0, &est.zbar_hat, Direction::Forward)?;
    let gbar = VectorPath::from_fn(grid, k0, n, |j, _| bundle.p2.at(j) * zbar.col(j) + bundle.g1.col(j));
    let h_z = bundle.p1.map_nodes(|_, p1| &a_c - &c.s_bf * p1);
    let f_z = gbar.map_nodes(|_, g| -(&c.s_bf * g));
    let z_hat = ode::integrate_linear_ode(&h_z, Some(&f_z), est.t0, &est.z_hat, Direction::Forward)?;
    let ubar = VectorPath::from_fn(grid, k0, p.control_dim(), |j, _| {
        -(&c.r_inv_bt * (bundle.p1.at(j) * z_hat.col(j) + gbar.col(j)))
    });
    let g_i = riccati::solve_tracking_offset(p, &bundle.p1, &z_hat, &ubar)?;
    let law = FeedbackLaw::new(p, bundle.p1.clone(), g_i.clone())?;
    Ok(RestrictedPrediction { zbar, gbar, z_hat, ubar, g_i, law })
}

/// The same `(z̄, ḡ)` through the full-information representation:
/// `z̄` follows the equilibrium prediction and `ḡ = (P₀ − P₁)z̄ + 𝒢`.
pub fn p0_route(bundle: &RiccatiBundle, t0: f64, zbar_hat: &DVector<f64>) -> Result<(VectorPath, VectorPath)> {
    let mf = predict_mf(bundle, t0, zbar_hat)?;
    let gbar = mf.z.map_nodes(|j, z| (bundle.p0.at(j) - bundle.p1.at(j)) * z + bundle.g.col(j));
    Ok((mf.z, gbar))
}

/// Fundamental solutions and the offset maps evaluated on the diagonal
/// `t = t₀` for every anchor.
#[derive(Debug, Clone)]
pub struct RealtimeModel {
    pub bundle: RiccatiBundle,
    pub maps: DeviationMaps,
    pub phi_h: MatrixPath,
    pub phi_h_inv: MatrixPath,
    pub diagonal: DiagonalMaps,
}

/// `𝓜_{i,g}^{(s)}(s)` and `𝓜_{0,g}^{(s)}(s)` for every node `s`.
#[derive(Debug, Clone)]
pub struct DiagonalMaps {
    pub mig: MatrixPath,
    pub m0g: MatrixPath,
}

/// Maps of one anchor, on `[t₀, T]`.
#[derive(Debug, Clone)]
pub struct RealtimeMaps {
    pub k0: usize,
    pub miz: MatrixPath,
    pub m0z: MatrixPath,
    pub mig: MatrixPath,
    pub m0g: MatrixPath,
}

impl RealtimeModel {
    pub fn build(bundle: &RiccatiBundle) -> Result<Self> {
        let maps = build_maps(bundle)?;
        let p = &bundle.params;
        let c = p.coefficients();
        let at = p.a.transpose();
        let h = bundle.p1.map_nodes(|_, p1| -(&at - p1 * &c.s_b));
        let phi_h = ode::fundamental_solution(&h, bundle.grid.t_end())?;
        let phi_h_inv = ode::invert_path(&phi_h)?;
        let mut model = Self {
            bundle: bundle.clone(),
            maps,
            phi_h,
            phi_h_inv,
            diagonal: DiagonalMaps { mig: MatrixPath::constant(bundle.grid, &DMatrix::zeros(0, 0)), m0g: MatrixPath::constant(bundle.grid, &DMatrix::zeros(0, 0)) },
        };
        model.diagonal = model.diagonal_maps()?;
        Ok(model)
    }

    pub fn grid(&self) -> TimeGrid {
        self.bundle.grid
    }

    /// Diagonal maps from four cumulative integrals, `O(K)` overall:
    ///
    /// ```text
    /// I(s) = ∫_T^s Φ_h⁻¹KΦ_z,    J(r) = ∫_0^r Φ_z⁻¹𝒞P₂Φ₁,
    /// L₁(s) = ∫_T^s Φ_h⁻¹KΦ_zJ,  L₂(s) = ∫_T^s Φ_h⁻¹P₁S_FP₂Φ₁,
    /// 𝓜_{i,g}^{(s)}(s) = −Φ_h(s)[Φ_h(T)⁻¹Q̄Γ̄Φ_z(T) + I(s)]Φ_z(s)⁻¹,
    /// 𝓜_{0,g}^{(s)}(s) = Φ_h(s){Φ_h(T)⁻¹Q̄Γ̄Φ_z(T)[J(T) − J(s)] + L₁(s) − I(s)J(s) + L₂(s)}Φ₁(s)⁻¹.
    /// ```
    fn diagonal_maps(&self) -> Result<DiagonalMaps> {
        let b = &self.bundle;
        let c = b.params.coefficients();
        let grid = b.grid;
        let t_end = grid.t_end();
        let last = grid.steps();
        let m = &self.maps;
        let k = &m.k;
        let i_int = ode::cumulative_integral(
            &MatrixPath::from_fn(grid, 0, |j, _| self.phi_h_inv.at(j) * k.at(j) * m.phi_z.at(j)),
            t_end,
            MAP_QUADRATURE,
        )?;
        let j_int = ode::cumulative_integral(
            &MatrixPath::from_fn(grid, 0, |j, _| m.phi_z_inv.at(j) * &c.s_bf * b.p2.at(j) * m.phi1.at(j)),
            grid.t_start(),
            MAP_QUADRATURE,
        )?;
        let l1 = ode::cumulative_integral(
            &MatrixPath::from_fn(grid, 0, |j, _| self.phi_h_inv.at(j) * k.at(j) * m.phi_z.at(j) * j_int.at(j)),
            t_end,
            MAP_QUADRATURE,
        )?;
        let l2 = ode::cumulative_integral(
            &MatrixPath::from_fn(grid, 0, |j, _| self.phi_h_inv.at(j) * b.p1.at(j) * &c.s_f * b.p2.at(j) * m.phi1.at(j)),
            t_end,
            MAP_QUADRATURE,
        )?;
        let terminal = self.phi_h_inv.at(last) * &c.q_gamma_bar * m.phi_z.at(last);
        let mig = MatrixPath::from_fn(grid, 0, |s, _| {
            -(self.phi_h.at(s) * (&terminal + i_int.at(s)) * m.phi_z_inv.at(s))
        });
        let m0g = MatrixPath::from_fn(grid, 0, |s, _| {
            let inner = &terminal * (j_int.at(last) - j_int.at(s)) + l1.at(s) - i_int.at(s) * j_int.at(s) + l2.at(s);
            self.phi_h.at(s) * inner * m.phi1_inv.at(s)
        });
        Ok(DiagonalMaps { mig, m0g })
    }

    /// All four maps of the anchor `t0` by variation of constants on `[t₀, T]`.
    pub fn anchor_maps(&self, t0: f64) -> Result<RealtimeMaps> {
        let b = &self.bundle;
        let c = b.params.coefficients();
        let grid = b.grid;
        let k0 = grid.require_node(t0)?;
        let last = grid.steps();
        let n = b.params.n();
        let m = &self.maps;
        let miz = MatrixPath::from_fn(grid, k0, |j, _| m.transition_z(j, k0));
        let forcing_0z = MatrixPath::from_fn(grid, k0, |j, _| -(&c.s_bf * b.p2.at(j) * m.transition1(j, k0)));
        let m0z = ode::matrix_variation_of_constants(
            &m.phi_z.tail(k0),
            Some(&m.phi_z_inv.tail(k0)),
            Some(&forcing_0z),
            t0,
            &DMatrix::zeros(n, n),
            MAP_QUADRATURE,
        )?;
        let phi_h = self.phi_h.tail(k0);
        let phi_h_inv = self.phi_h_inv.tail(k0);
        let forcing_ig = MatrixPath::from_fn(grid, k0, |j, _| -(m.k.at(j) * miz.at(j)));
        let mig = ode::matrix_variation_of_constants(
            &phi_h,
            Some(&phi_h_inv),
            Some(&forcing_ig),
            grid.t_end(),
            &(-(&c.q_gamma_bar * miz.at(last))),
            MAP_QUADRATURE,
        )?;
        let forcing_0g = MatrixPath::from_fn(grid, k0, |j, _| {
            -(m.k.at(j) * m0z.at(j)) + b.p1.at(j) * &c.s_f * b.p2.at(j) * m.transition1(j, k0)
        });
        let m0g = ode::matrix_variation_of_constants(
            &phi_h,
            Some(&phi_h_inv),
            Some(&forcing_0g),
            grid.t_end(),
            &(-(&c.q_gamma_bar * m0z.at(last))),
            MAP_QUADRATURE,
        )?;
        Ok(RealtimeMaps { k0, miz, m0z, mig, m0g })
    }

    /// Diagonal maps by building every anchor's maps separately, `O(K²)`.
    /// Reference for [`RealtimeModel::diagonal`].
    pub fn diagonal_brute_force(&self, nodes: &[usize]) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
        nodes
            .iter()
            .map(|&k| {
                let maps = self.anchor_maps(self.grid().node(k))?;
                Ok((maps.mig.at(k).clone(), maps.m0g.at(k).clone()))
            })
            .collect()
    }

    /// `Δz^A` for realized average errors `Ē(s)`, `Ē¹(s)`.
    pub fn realized_deviation(&self, e_bar: &VectorPath, e_bar1: &VectorPath) -> Result<VectorPath> {
        let grid = self.grid();
        if e_bar.grid() != &grid || e_bar1.grid() != &grid || e_bar.first() != 0 || e_bar1.first() != 0 {
            return Err(Error::Usage("error paths must cover the whole grid".into()));
        }
        let s_bf = self.bundle.params.coefficients().s_bf;
        let d = &self.diagonal;
        let f = VectorPath::from_fn(grid, 0, e_bar.dim(), |k, _| {
            -(&s_bf * (d.mig.at(k) * e_bar.col(k) + d.m0g.at(k) * e_bar1.col(k)))
        });
        ode::variation_of_constants_with(
            &self.maps.phi_z,
            Some(&self.maps.phi_z_inv),
            Some(&f),
            grid.t_start(),
            &DVector::zeros(e_bar.dim()),
            MAP_QUADRATURE,
        )
    }
}

/// What a policy sees when asked for estimates.
pub struct PolicyContext<'a> {
    pub model: &'a RealtimeModel,
    pub stage: Stage,
    /// Correct-information mean field.
    pub z_c: &'a VectorPath,
    /// Current empirical mean state.
    pub mean: &'a DVector<f64>,
    /// Initial-information errors, one column per agent.
    pub errors: &'a DMatrix<f64>,
    /// Empirical means of states and controls at earlier nodes.
    pub past_x: &'a [DVector<f64>],
    pub past_u: &'a [DVector<f64>],
}

impl PolicyContext<'_> {
    pub fn time(&self) -> f64 {
        self.stage.time(&self.model.bundle.grid)
    }

    pub fn z_c_now(&self) -> DVector<f64> {
        self.z_c.stage(self.stage)
    }
}

/// How agents form `(ẑ, z̄)` at every instant.
pub trait EstimatorPolicy: Send + Sync {
    fn name(&self) -> &str;
    /// Writes agent `i`'s `ẑ` and `z̄` into column `i` of the outputs.
    fn estimate(&self, ctx: &PolicyContext<'_>, z_hat: &mut DMatrix<f64>, zbar_hat: &mut DMatrix<f64>);
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// `z̄ − z^c = λ(ẑ − z^c)`.
    pub lambda: f64,
    /// Decay time of `decay-to-truth`.
    pub tau: f64,
    /// Nodes used by `drift-inversion`.
    pub window: usize,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self { lambda: 1.0, tau: 0.5, window: 50 }
    }
}

fn fill(out: &mut DMatrix<f64>, v: &DVector<f64>) {
    for mut c in out.column_iter_mut() {
        c.copy_from(v);
    }
}

/// Everybody knows the current mean field.
pub struct Truth;

impl EstimatorPolicy for Truth {
    fn name(&self) -> &str {
        "truth"
    }

    fn estimate(&self, ctx: &PolicyContext<'_>, z_hat: &mut DMatrix<f64>, zbar_hat: &mut DMatrix<f64>) {
        fill(z_hat, ctx.mean);
        fill(zbar_hat, ctx.mean);
    }
}

/// `ẑ = z^c + w(t)E_i`, `z̄ = z^c + λw(t)E_i`.
pub struct ScaledError {
    name: &'static str,
    lambda: f64,
    tau: Option<f64>,
}

impl ScaledError {
    pub fn hold(lambda: f64) -> Self {
        Self { name: "hold-initial-error", lambda, tau: None }
    }

    pub fn decay(lambda: f64, tau: f64) -> Self {
        Self { name: "decay-to-truth", lambda, tau: Some(tau) }
    }
}

impl EstimatorPolicy for ScaledError {
    fn name(&self) -> &str {
        self.name
    }

    fn estimate(&self, ctx: &PolicyContext<'_>, z_hat: &mut DMatrix<f64>, zbar_hat: &mut DMatrix<f64>) {
        let w = self.tau.map_or(1.0, |tau| (-(ctx.time() - ctx.model.grid().t_start()) / tau).exp());
        let zc = ctx.z_c_now();
        for (i, e) in ctx.errors.column_iter().enumerate() {
            z_hat.set_column(i, &(&zc + e * w));
            zbar_hat.set_column(i, &(&zc + e * (w * self.lambda)));
        }
    }
}

/// Least-squares inversion of the observed mean-field drift over a sliding
/// window. The observation `Ob = Cx̄ + Fū` satisfies
/// `Ob = (C − S_F(P₁+P₂))z − S_F𝒢₁` when the population follows the
/// equilibrium representation, and `z − z^c` is transported by `Φ₁`.
/// Falls back to the agent's own initial prediction when the window is
/// empty or rank deficient.
pub struct DriftInversion {
    pub window: usize,
}

impl EstimatorPolicy for DriftInversion {
    fn name(&self) -> &str {
        "drift-inversion"
    }

    fn estimate(&self, ctx: &PolicyContext<'_>, z_hat: &mut DMatrix<f64>, zbar_hat: &mut DMatrix<f64>) {
        let b = &ctx.model.bundle;
        let m = &ctx.model.maps;
        let p = &b.params;
        let n = p.n();
        let zc = ctx.z_c_now();
        let k = ctx.past_x.len();
        let from = k.saturating_sub(self.window);
        let phi_stage_inv = linalg::inverse(&m.phi1.stage(ctx.stage)).ok();
        let solved = phi_stage_inv.and_then(|phi_inv| {
            if k == from {
                return None;
            }
            let s_f = p.coefficients().s_f;
            let rows = (k - from) * n;
            let mut a = DMatrix::zeros(rows, n);
            let mut y = DVector::zeros(rows);
            for (r, j) in (from..k).enumerate() {
                let mj = &p.c - &s_f * (b.p1.at(j) + b.p2.at(j));
                let ob = &p.c * &ctx.past_x[j] + &p.f * &ctx.past_u[j];
                let yj = ob + &s_f * b.g1.col(j) - &mj * ctx.z_c.col(j);
                a.view_mut((r * n, 0), (n, n)).copy_from(&(&mj * m.phi1.at(j) * &phi_inv));
                y.rows_mut(r * n, n).copy_from(&yj);
            }
            if linalg::numerical_rank(&a, 1e-8) < n {
                return None;
            }
            linalg::lstsq(&a, &y, 1e-8).ok()
        });
        match solved {
            Some(delta) => {
                let est = &zc + delta;
                fill(z_hat, &est);
                fill(zbar_hat, &est);
            }
            None => {
                let transport = m.phi1.stage(ctx.stage) * m.phi1_inv.at(0);
                for (i, e) in ctx.errors.column_iter().enumerate() {
                    let est = &zc + &transport * e;
                    z_hat.set_column(i, &est);
                    zbar_hat.set_column(i, &est);
                }
            }
        }
    }
}

pub type PolicyRegistry = Registry<dyn EstimatorPolicy, PolicyParams>;

/// The built-in policies: `truth`, `hold-initial-error`, `decay-to-truth`,
/// `drift-inversion`.
pub fn policy_registry() -> PolicyRegistry {
    let mut r = PolicyRegistry::new("estimator policy");
    r.register("truth", |_: &PolicyParams| Ok(Box::new(Truth) as Box<dyn EstimatorPolicy>));
    r.register("hold-initial-error", |a: &PolicyParams| {
        Ok(Box::new(ScaledError::hold(a.lambda)) as Box<dyn EstimatorPolicy>)
    });
    r.register("decay-to-truth", |a: &PolicyParams| {
        if !(a.tau > 0.0) {
            return Err(Error::Usage(format!("tau must be positive, got {}", a.tau)));
        }
        Ok(Box::new(ScaledError::decay(a.lambda, a.tau)) as Box<dyn EstimatorPolicy>)
    });
    r.register("drift-inversion", |a: &PolicyParams| {
        if a.window == 0 {
            return Err(Error::Usage("window must be at least one node".into()));
        }
        Ok(Box::new(DriftInversion { window: a.window }) as Box<dyn EstimatorPolicy>)
    });
    r
}

struct RealtimeLaws<'a> {
    model: &'a RealtimeModel,
    policy: &'a dyn EstimatorPolicy,
    z_c: &'a VectorPath,
    g_c: &'a VectorPath,
    errors: &'a DMatrix<f64>,
}

impl RealtimeLaws<'_> {
    /// Estimate errors relative to `z^c` at the stage.
    fn errors_at(&self, stage: Stage, mean: &DVector<f64>, past_x: &[DVector<f64>], past_u: &[DVector<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
        let shape = self.errors.shape();
        let mut z_hat = DMatrix::zeros(shape.0, shape.1);
        let mut zbar = DMatrix::zeros(shape.0, shape.1);
        let ctx = PolicyContext { model: self.model, stage, z_c: self.z_c, mean, errors: self.errors, past_x, past_u };
        self.policy.estimate(&ctx, &mut z_hat, &mut zbar);
        let zc = self.z_c.stage(stage);
        for mut c in z_hat.column_iter_mut().chain(zbar.column_iter_mut()) {
            c -= &zc;
        }
        (z_hat, zbar)
    }
}

impl LawAssignment for RealtimeLaws<'_> {
    fn first(&self) -> usize {
        0
    }

    fn agents(&self) -> Option<usize> {
        Some(self.errors.ncols())
    }

    fn offsets(&self, ctx: &StageContext<'_>, out: &mut DMatrix<f64>) {
        let (e, e1) = self.errors_at(ctx.stage, ctx.mean, ctx.past_x, ctx.past_u);
        let d = &self.model.diagonal;
        let s = ctx.stage;
        *out = d.mig.stage(s) * e + d.m0g.stage(s) * e1;
        let g = self.g_c.stage(s);
        for mut c in out.column_iter_mut() {
            c += &g;
        }
    }
}

#[derive(Debug, Clone)]
pub struct RealtimeRun {
    pub population: PopulationResult,
    /// Correct-information equilibrium from the population's initial mean.
    pub z_c: MeanField,
    /// Realized average estimate errors `Ē(t)`, `Ē¹(t)` at the nodes.
    pub e_bar: VectorPath,
    pub e_bar1: VectorPath,
    /// `x⁽ᴺ⁾ − z^c`.
    pub dz_realized: VectorPath,
    /// The integral formula evaluated with the realized `Ē`, `Ē¹`.
    pub dz_formula: VectorPath,
    /// `sup ‖dz_realized − dz_formula‖`.
    pub formula_gap: f64,
}

/// Runs the population with strategies re-planned at every stage from the
/// policy's estimates, applying each plan only at its anchor.
pub fn realtime_simulate(
    model: &RealtimeModel,
    population: &Population,
    policy: &dyn EstimatorPolicy,
    opts: SimOptions,
) -> Result<RealtimeRun> {
    let b = &model.bundle;
    let z0 = population.mean_x0();
    let z_c = equilibrium_mf(b, &z0)?;
    let g_c = best_response(b, &z_c)?.g;
    let laws = RealtimeLaws { model, policy, z_c: &z_c.z, g_c: &g_c, errors: &population.errors };
    let result = population::simulate(&b.params, &b.p1, population, &laws, opts)?;

    let grid = b.grid;
    let x_nodes: Vec<DVector<f64>> = (0..=grid.steps()).map(|k| result.x_n.node(k)).collect();
    let u_nodes: Vec<DVector<f64>> = (0..=grid.steps()).map(|k| result.u_n.node(k)).collect();
    let mut e_bar = Vec::with_capacity(x_nodes.len());
    let mut e_bar1 = Vec::with_capacity(x_nodes.len());
    for k in 0..=grid.steps() {
        let (e, e1) = laws.errors_at(Stage::Node(k), &x_nodes[k], &x_nodes[..k], &u_nodes[..k]);
        e_bar.push(population::pairwise_mean(&e));
        e_bar1.push(population::pairwise_mean(&e1));
    }
    let e_bar = VectorPath::from_nodes(grid, 0, &e_bar)?;
    let e_bar1 = VectorPath::from_nodes(grid, 0, &e_bar1)?;
    let dz_realized = result.x_n.sub(&z_c.z)?;
    let dz_formula = model.realized_deviation(&e_bar, &e_bar1)?;
    let formula_gap = dz_realized.sup_dist(&dz_formula)?;
    Ok(RealtimeRun { population: result, z_c, e_bar, e_bar1, dz_realized, dz_formula, formula_gap })
}
