//! Riccati equations and backward offset equations of the game.
//!
//! Notation (`𝒞 = (B+F)R⁻¹Bᵀ`, `ν = Q_I s + Qη`, `S_B = BR⁻¹Bᵀ`):
//!
//! ```text
//! −P₁' = P₁A + AᵀP₁ + (Q_I+Q) − P₁S_BP₁,               P₁(T) = Q̄_I + Q̄
//! −P₀' = P₀(A+C) + AᵀP₀ + (Q_I+Q−QΓ) − P₀𝒞P₀,          P₀(T) = Q̄_I + Q̄ − Q̄Γ̄
//! −P₂' = P₂H_z + H_gᵀ'P₂ + K − P₂𝒞P₂,                   P₂(T) = −Q̄Γ̄
//!  𝒢'  = −(Aᵀ − P₀𝒞)𝒢 + ν,                            𝒢(T) = −Q̄_I s̄ − Q̄η̄
//!  𝒢₁' = −(Aᵀ − (P₁+P₂)𝒞)𝒢₁ + ν,                       𝒢₁(T) = 𝒢(T)
//! ```
//!
//! with `H_z = A + C − 𝒞P₁`, `H_gᵀ' = Aᵀ − P₁𝒞` and
//! `K = P₁C − P₁FR⁻¹BᵀP₁ − QΓ`. The mean-field representations are
//! `p = P₀z + 𝒢 = P₁z + g` and `ḡ = P₂z̄ + 𝒢₁`, so `P₂ = P₀ − P₁` and
//! `𝒢₁ = 𝒢` hold identically.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{MatrixPath, Stage, TimeGrid, VectorPath};
use crate::linalg;
use crate::ode::{self, Direction};
use crate::params::SystemParams;

fn escape(e: Error) -> Error {
    match e {
        Error::IntegrationBlowup { t, .. } => Error::FiniteEscape { t },
        other => other,
    }
}

fn check_grid(params: &SystemParams, grid: &TimeGrid) -> Result<()> {
    if (grid.t_end() - params.horizon).abs() > 1e-12 * params.horizon.max(1.0) {
        return Err(Error::Usage(format!(
            "grid ends at {} but the horizon is {}",
            grid.t_end(),
            params.horizon
        )));
    }
    Ok(())
}

fn backward_riccati(
    grid: &TimeGrid,
    terminal: DMatrix<f64>,
    stop: usize,
    rhs: impl FnMut(Stage, &DMatrix<f64>) -> DMatrix<f64>,
) -> Result<MatrixPath> {
    let values = ode::rk4(grid, grid.steps(), stop, terminal, rhs).map_err(escape)?;
    MatrixPath::from_nodes(*grid, stop, values)
}

/// Symmetric Riccati equation for the feedback gain `P₁`.
pub fn solve_p1(params: &SystemParams, grid: &TimeGrid) -> Result<MatrixPath> {
    check_grid(params, grid)?;
    let k = params.coefficients();
    let at = params.a.transpose();
    let q = &params.q_i + &params.q;
    let terminal = &params.q_i_bar + &params.q_bar;
    let p = backward_riccati(grid, terminal, 0, |_, p| {
        -(p * &params.a + &at * p + &q - p * &k.s_b * p)
    })?;
    Ok(p.map_nodes(|_, m| linalg::symmetrize(m)))
}

/// Non-symmetric Riccati equation for `P₀`.
pub fn solve_p0(params: &SystemParams, grid: &TimeGrid) -> Result<MatrixPath> {
    check_grid(params, grid)?;
    let k = params.coefficients();
    let a_c = &params.a + &params.c;
    let at = params.a.transpose();
    let state_cost = &params.q_i + &params.q - &k.q_gamma;
    let terminal = &params.q_i_bar + &params.q_bar - &k.q_gamma_bar;
    backward_riccati(grid, terminal, 0, |_, p| {
        -(p * &a_c + &at * p + &state_cost - p * &k.s_bf * p)
    })
}

/// `K = P₁C − P₁FR⁻¹BᵀP₁ − QΓ` at every node of `P₁`.
pub fn coupling_k(params: &SystemParams, p1: &MatrixPath) -> MatrixPath {
    let k = params.coefficients();
    p1.map_nodes(|_, p| p * &params.c - p * &k.s_f * p - &k.q_gamma)
}

/// Riccati equation for `P₂`, the restricted-information gain.
pub fn solve_p2(params: &SystemParams, p1: &MatrixPath, grid: &TimeGrid) -> Result<MatrixPath> {
    check_grid(params, grid)?;
    if p1.grid() != grid {
        return Err(Error::Usage("P1 lives on a different grid".into()));
    }
    let k = params.coefficients();
    let a_c = &params.a + &params.c;
    let at = params.a.transpose();
    let p1s = p1.stages();
    let terminal = -&k.q_gamma_bar;
    backward_riccati(grid, terminal, p1.first(), |s, p2| {
        let p1 = p1s.get(s);
        let hz = &a_c - &k.s_bf * p1;
        let hg = &at - p1 * &k.s_bf;
        let kk = p1 * &params.c - p1 * &k.s_f * p1 - &k.q_gamma;
        -(p2 * hz + hg * p2 + kk - p2 * &k.s_bf * p2)
    })
}

/// `x' = −(Aᵀ − M(t)𝒞)x + ν` backwards from `x(T) = −Q̄_I s̄ − Q̄η̄`.
fn solve_offset(params: &SystemParams, m: &MatrixPath) -> Result<VectorPath> {
    let k = params.coefficients();
    let at = params.a.transpose();
    let h = m.map_nodes(|_, m| -(&at - m * &k.s_bf));
    let nu = VectorPath::from_fn(*m.grid(), m.first(), params.n(), |_, _| k.nu.clone());
    ode::integrate_linear_ode(&h, Some(&nu), m.grid().t_end(), &k.offset_terminal, Direction::Backward)
        .map_err(escape)
}

/// Offset `𝒢` of the representation `p = P₀z + 𝒢`.
pub fn solve_g(params: &SystemParams, p0: &MatrixPath, grid: &TimeGrid) -> Result<VectorPath> {
    check_grid(params, grid)?;
    if p0.grid() != grid {
        return Err(Error::Usage("P0 lives on a different grid".into()));
    }
    solve_offset(params, p0)
}

/// Offset `𝒢₁` of the representation `ḡ = P₂z̄ + 𝒢₁`.
pub fn solve_g1(params: &SystemParams, p1: &MatrixPath, p2: &MatrixPath, grid: &TimeGrid) -> Result<VectorPath> {
    check_grid(params, grid)?;
    if p1.grid() != grid || p2.grid() != grid {
        return Err(Error::Usage("P1/P2 live on a different grid".into()));
    }
    let first = p1.first().max(p2.first());
    let sum = MatrixPath::from_fn(*grid, first, |k, _| p1.at(k) + p2.at(k));
    solve_offset(params, &sum)
}

/// Tracking offset `g` of the feedback law for given mean-field paths:
///
/// ```text
/// g' = −[(Aᵀ − P₁S_B)g + (P₁C − QΓ)z + P₁Fū − ν],
/// g(T) = −Q̄_I s̄ − Q̄(Γ̄z(T) + η̄)
/// ```
///
/// The result covers the common range of `z` and `ū`.
pub fn solve_tracking_offset(
    params: &SystemParams,
    p1: &MatrixPath,
    z: &VectorPath,
    ubar: &VectorPath,
) -> Result<VectorPath> {
    let grid = *p1.grid();
    check_grid(params, &grid)?;
    if z.grid() != &grid || ubar.grid() != &grid {
        return Err(Error::Usage("mean-field paths live on a different grid".into()));
    }
    let n = params.n();
    if z.dim() != n || ubar.dim() != params.control_dim() {
        return Err(Error::Dimension("mean-field paths do not match the parameters".into()));
    }
    let k = params.coefficients();
    let at = params.a.transpose();
    let first = p1.first().max(z.first()).max(ubar.first());
    let h = MatrixPath::from_fn(grid, first, |j, _| -(&at - p1.at(j) * &k.s_b));
    let forcing = VectorPath::from_fn(grid, first, n, |j, _| {
        let p = p1.at(j);
        -((p * &params.c - &k.q_gamma) * z.col(j) + p * &params.f * ubar.col(j) - &k.nu)
    });
    let terminal = &k.offset_terminal - &k.q_gamma_bar * z.node(grid.steps());
    ode::integrate_linear_ode(&h, Some(&forcing), grid.t_end(), &terminal, Direction::Backward).map_err(escape)
}

/// All Riccati solutions and offsets on one grid.
#[derive(Debug, Clone)]
pub struct RiccatiBundle {
    pub params: SystemParams,
    pub grid: TimeGrid,
    pub p0: MatrixPath,
    pub p1: MatrixPath,
    pub p2: MatrixPath,
    pub g: VectorPath,
    pub g1: VectorPath,
}

impl RiccatiBundle {
    pub fn solve(params: &SystemParams, grid: &TimeGrid) -> Result<Self> {
        let (p1, p0) = rayon::join(|| solve_p1(params, grid), || solve_p0(params, grid));
        let (p1, p0) = (p1?, p0?);
        let (g, p2) = rayon::join(|| solve_g(params, &p0, grid), || solve_p2(params, &p1, grid));
        let (g, p2) = (g?, p2?);
        let g1 = solve_g1(params, &p1, &p2, grid)?;
        Ok(Self { params: params.clone(), grid: *grid, p0, p1, p2, g, g1 })
    }

    /// `𝒬 = QΓ − Q_I − Q`.
    pub fn curly_q(&self) -> DMatrix<f64> {
        &self.params.q * &self.params.gamma - &self.params.q_i - &self.params.q
    }

    /// `ν = Q_I s + Qη`.
    pub fn nu(&self) -> DVector<f64> {
        self.params.coefficients().nu
    }
}

/// Closed-form `P(0)` of a Riccati equation through its linear Hamiltonian
/// system: with `[X; Y]' = M[X; Y]`, `X(T) = I`, `Y(T) = P(T)`, the
/// solution is `P(t) = Y(t)X(t)⁻¹`. Uses the matrix exponential, so it is
/// independent of the Runge–Kutta code.
pub fn hamiltonian_p0(m: &DMatrix<f64>, p_terminal: &DMatrix<f64>, horizon: f64) -> Result<DMatrix<f64>> {
    let n = p_terminal.nrows();
    if m.shape() != (2 * n, 2 * n) {
        return Err(Error::Dimension("Hamiltonian must be 2n x 2n".into()));
    }
    let flow = (m * -horizon).exp();
    let mut end = DMatrix::zeros(2 * n, n);
    end.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    end.view_mut((n, 0), (n, n)).copy_from(p_terminal);
    let start = flow * end;
    let x = start.view((0, 0), (n, n)).into_owned();
    let y = start.view((n, 0), (n, n)).into_owned();
    Ok(y * linalg::inverse(&x)?)
}

/// Hamiltonian matrix `[[A, −BR⁻¹Bᵀ], [−(Q_I+Q), −Aᵀ]]` of `P₁`.
pub fn p1_hamiltonian(params: &SystemParams) -> DMatrix<f64> {
    let k = params.coefficients();
    block(&params.a, &(-&k.s_b), &(-(&params.q_i + &params.q)), &(-params.a.transpose()))
}

/// Hamiltonian matrix `[[A+C, −𝒞], [𝒬, −Aᵀ]]` of the coupled mean-field system.
pub fn p0_hamiltonian(params: &SystemParams) -> DMatrix<f64> {
    let k = params.coefficients();
    let curly_q = &k.q_gamma - &params.q_i - &params.q;
    block(&(&params.a + &params.c), &(-&k.s_bf), &curly_q, &(-params.a.transpose()))
}

fn block(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(a);
    m.view_mut((0, n), (n, n)).copy_from(b);
    m.view_mut((n, 0), (n, n)).copy_from(c);
    m.view_mut((n, n), (n, n)).copy_from(d);
    m
}
