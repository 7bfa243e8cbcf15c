//! Mean-field equilibrium, the closed-loop feedback law, realized costs and
//! the parameter-only existence condition.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{MatrixPath, Stage, TimeGrid, VectorPath};
use crate::linalg;
use crate::ode::{self, Direction};
use crate::params::SystemParams;
use crate::riccati::{self, RiccatiBundle};

/// Mean-field state `z` and mean-field control `ū`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanField {
    pub z: VectorPath,
    pub ubar: VectorPath,
}

/// `φ(x, t) = −R⁻¹Bᵀ(P₁(t)x + g(t))` on the range covered by `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackLaw {
    pub p1: MatrixPath,
    pub g: VectorPath,
    r_inv_bt: DMatrix<f64>,
}

impl FeedbackLaw {
    pub fn new(params: &SystemParams, p1: MatrixPath, g: VectorPath) -> Result<Self> {
        if p1.grid() != g.grid() || g.dim() != params.n() || p1.first() > g.first() {
            return Err(Error::Usage("feedback law needs P1 and g on one grid".into()));
        }
        Ok(Self { p1, g, r_inv_bt: params.coefficients().r_inv_bt })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.g.grid()
    }

    /// First node at which the law is defined.
    pub fn first(&self) -> usize {
        self.g.first()
    }

    pub fn r_inv_bt(&self) -> &DMatrix<f64> {
        &self.r_inv_bt
    }

    pub fn at_node(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        -(&self.r_inv_bt * (self.p1.at(k) * x + self.g.col(k)))
    }

    pub fn at_stage(&self, s: Stage, x: &DVector<f64>) -> DVector<f64> {
        -(&self.r_inv_bt * (self.p1.stage(s) * x + self.g.stage(s)))
    }
}

/// Evaluates the feedback law at an arbitrary time in its domain.
pub fn feedback(law: &FeedbackLaw, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    let grid = law.grid();
    let from = grid.node(law.first());
    if !(t >= from - 1e-12 && t <= grid.t_end() + 1e-12) {
        return Err(Error::Usage(format!("t = {t} lies outside the law's domain [{from}, {}]", grid.t_end())));
    }
    let p1 = law.p1.eval(t)?;
    let g = law.g.eval(t)?;
    Ok(-(&law.r_inv_bt * (p1 * x + g)))
}

/// `ū = −R⁻¹Bᵀ(P z + o)` node by node.
fn mean_control(params: &SystemParams, p: &MatrixPath, offset: &VectorPath, z: &VectorPath) -> VectorPath {
    let r = params.coefficients().r_inv_bt;
    VectorPath::from_fn(*z.grid(), z.first(), params.control_dim(), |k, _| {
        -(&r * (p.at(k) * z.col(k) + offset.col(k)))
    })
}

/// Mean field predicted from `z(t_from) = z_from` under the equilibrium
/// representation `p = P₀z + 𝒢`:
/// `z' = (A + C − 𝒞P₀)z − 𝒞𝒢`, `ū = −R⁻¹Bᵀ(P₀z + 𝒢)`.
pub fn predict_mf(bundle: &RiccatiBundle, t_from: f64, z_from: &DVector<f64>) -> Result<MeanField> {
    let params = &bundle.params;
    let k = params.coefficients();
    let a_c = &params.a + &params.c;
    let h = bundle.p0.map_nodes(|_, p| &a_c - &k.s_bf * p);
    let f = bundle.g.map_nodes(|_, g| -(&k.s_bf * g));
    let z = ode::integrate_linear_ode(&h, Some(&f), t_from, z_from, Direction::Forward)?;
    let ubar = mean_control(params, &bundle.p0, &bundle.g, &z);
    Ok(MeanField { z, ubar })
}

/// Equilibrium mean field from `z(0) = z⁰`.
pub fn equilibrium_mf(bundle: &RiccatiBundle, z0: &DVector<f64>) -> Result<MeanField> {
    predict_mf(bundle, bundle.grid.t_start(), z0)
}

/// Best-response feedback law against the mean field `mf`.
pub fn best_response(bundle: &RiccatiBundle, mf: &MeanField) -> Result<FeedbackLaw> {
    let g = riccati::solve_tracking_offset(&bundle.params, &bundle.p1, &mf.z, &mf.ubar)?;
    FeedbackLaw::new(&bundle.params, bundle.p1.clone(), g)
}

/// Realized cost of one path:
///
/// ```text
/// ½[∫ ‖x−s‖²_{Q_I} + ‖u‖²_R + ‖x−(Γz+η)‖²_Q dt + ‖x(T)−s̄‖²_{Q̄_I} + ‖x(T)−(Γ̄z(T)+η̄)‖²_{Q̄}]
/// ```
///
/// with the trapezoid rule on the nodes the three paths share.
pub fn cost(params: &SystemParams, x: &VectorPath, u: &VectorPath, z: &VectorPath) -> Result<f64> {
    let grid = *x.grid();
    if u.grid() != &grid || z.grid() != &grid {
        return Err(Error::Usage("cost paths live on different grids".into()));
    }
    let n = params.n();
    if x.dim() != n || z.dim() != n || u.dim() != params.control_dim() {
        return Err(Error::Dimension("cost paths do not match the parameters".into()));
    }
    let first = x.first().max(u.first()).max(z.first());
    let quad = |m: &DMatrix<f64>, v: &DVector<f64>| v.dot(&(m * v));
    let running = |k: usize| {
        let xk = x.node(k);
        let zk = z.node(k);
        let uk = u.node(k);
        quad(&params.q_i, &(&xk - &params.s))
            + quad(&params.r, &uk)
            + quad(&params.q, &(&xk - (&params.gamma * &zk + &params.eta)))
    };
    let dt = grid.dt();
    let last = grid.steps();
    let mut integral = 0.0;
    let mut prev = running(first);
    for k in first + 1..=last {
        let cur = running(k);
        integral += 0.5 * dt * (prev + cur);
        prev = cur;
    }
    let xt = x.node(last);
    let zt = z.node(last);
    let terminal = quad(&params.q_i_bar, &(&xt - &params.s_bar))
        + quad(&params.q_bar, &(&xt - (&params.gamma_bar * &zt + &params.eta_bar)));
    Ok(0.5 * (integral + terminal))
}

/// Splitting `Q_I + Q − QΓ = 𝒬_p + 𝒮` (and its terminal analogue) together
/// with the weights used in `‖φ‖_T`.
#[derive(Debug, Clone)]
pub struct ExistenceSplit {
    pub q_p: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub q_p_bar: DMatrix<f64>,
    pub s_bar: DMatrix<f64>,
    /// Weight multiplying `φ*(T, t)` inside `‖φ‖_T`.
    pub terminal_weight: DMatrix<f64>,
    /// Weight multiplying `φ*(s, t)` under the integral.
    pub running_weight: DMatrix<f64>,
}

impl ExistenceSplit {
    /// `𝒬_p = Q_I + Q`, `𝒮 = −sym(QΓ)`, barred analogues, and the weights
    /// `𝒬̄_p^{−1/2}` (terminal) and `𝒬̄_p^{1/2}` (running).
    pub fn default_for(params: &SystemParams) -> Self {
        let q_p = &params.q_i + &params.q;
        let q_p_bar = &params.q_i_bar + &params.q_bar;
        let s = -linalg::symmetrize(&(&params.q * &params.gamma));
        let s_bar = -linalg::symmetrize(&(&params.q_bar * &params.gamma_bar));
        Self {
            terminal_weight: linalg::spd_inv_sqrt(&q_p_bar),
            running_weight: linalg::spd_sqrt(&q_p_bar),
            q_p,
            s,
            q_p_bar,
            s_bar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExistenceReport {
    pub satisfied: bool,
    pub lhs: f64,
    /// `‖φ‖_T`
    pub phi_norm: f64,
    /// `N(S)`
    pub n_s: f64,
}

/// Evaluates `(1 + √T‖φ‖_T‖𝒞𝒬_p^{−1/2}‖)(1 + N(S))` and compares it with 2.
///
/// `φ(s, t) = e^{A(s−t)}` comes from the fundamental solution of `A`; the
/// supremum over `t` is taken on grid nodes and the integral uses the
/// trapezoid rule. Norms are spectral.
pub fn existence_check(params: &SystemParams, grid: &TimeGrid, split: &ExistenceSplit) -> Result<ExistenceReport> {
    linalg::require_spd("Q_p", &split.q_p)?;
    linalg::require_spd("Q_p_bar", &split.q_p_bar)?;
    let t_len = grid.t_end() - grid.t_start();
    let phi = ode::fundamental_solution(&MatrixPath::constant(*grid, &params.a), grid.t_start())?;
    // A is constant, so φ(s, t) = Φ(s − t) and the norms depend on the lag only.
    let steps = grid.steps();
    let lag = |j: usize, w: &DMatrix<f64>| {
        let v = linalg::spectral_norm(&(phi.at(j).transpose() * w));
        v * v
    };
    let running: Vec<f64> = (0..=steps).map(|j| lag(j, &split.running_weight)).collect();
    let dt = grid.dt();
    // tail[m] = ∫_0^{m·dt} running(lag) d(lag)
    let mut tail = vec![0.0; steps + 1];
    for m in 1..=steps {
        tail[m] = tail[m - 1] + 0.5 * dt * (running[m - 1] + running[m]);
    }
    let phi_norm = (0..=steps)
        .map(|k| {
            let m = steps - k;
            (lag(m, &split.terminal_weight) + tail[m]).sqrt()
        })
        .fold(0.0, f64::max);
    let coupling = params.coefficients().s_bf * linalg::spd_inv_sqrt(&split.q_p);
    let n_s = {
        let wb = linalg::spd_inv_sqrt(&split.q_p_bar);
        let w = linalg::spd_inv_sqrt(&split.q_p);
        linalg::spectral_norm(&(&wb * &split.s_bar * &wb)).max(linalg::spectral_norm(&(&w * &split.s * &w)))
    };
    let lhs = (1.0 + t_len.sqrt() * phi_norm * linalg::spectral_norm(&coupling)) * (1.0 + n_s);
    Ok(ExistenceReport { satisfied: lhs < 2.0, lhs, phi_norm, n_s })
}
