//! Fixed-step integration of time-varying linear and matrix ODEs.
//!
//! All integrators here are classical fourth-order Runge–Kutta on a
//! [`TimeGrid`]. Backward problems are stepped in reversed time with a
//! negated step, and every returned path is indexed forward in time.
//!
//! Alongside the integrators live the two closed-form building blocks used
//! throughout the crate: fundamental solutions `Φ' = H(t)Φ, Φ(t_ref) = I`,
//! and the variation-of-constants formula
//!
//! ```text
//! v(t) = Φ(t)Φ(t_b)⁻¹ v_b + Φ(t) ∫_{t_b}^{t} Φ(s)⁻¹ f(s) ds
//! ```
//!
//! whose integral is evaluated by quadrature on the grid nodes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{MatrixPath, Stage, TimeGrid, VectorPath};
use crate::linalg;

/// Magnitude beyond which a solution is considered to have diverged.
const BLOWUP: f64 = 1e100;

/// Integration direction relative to the boundary condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Initial value at the boundary node, integrate towards `T`.
    Forward,
    /// Terminal value at `T`, integrate towards the stop node.
    Backward,
}

/// State types the Runge–Kutta driver can advance.
pub trait OdeState: Clone {
    /// `self + h·k`
    fn plus_scaled(&self, h: f64, k: &Self) -> Self;
    /// `self + h/6·(k1 + 2k2 + 2k3 + k4)`
    fn rk4_update(&self, h: f64, k1: &Self, k2: &Self, k3: &Self, k4: &Self) -> Self;
    fn max_abs(&self) -> f64;
}

macro_rules! impl_ode_state {
    ($t:ty) => {
        impl OdeState for $t {
            fn plus_scaled(&self, h: f64, k: &Self) -> Self {
                let mut out = self.clone();
                out.zip_apply(k, |a, b| *a += h * b);
                out
            }

            fn rk4_update(&self, h: f64, k1: &Self, k2: &Self, k3: &Self, k4: &Self) -> Self {
                let mut out = self.clone();
                let w = h / 6.0;
                out.zip_zip_apply(k1, k4, |a, b, c| *a += w * (b + c));
                out.zip_zip_apply(k2, k3, |a, b, c| *a += 2.0 * w * (b + c));
                out
            }

            fn max_abs(&self) -> f64 {
                self.iter().fold(0.0_f64, |m, v| if v.is_nan() { f64::NAN } else { m.max(v.abs()) })
            }
        }
    };
}

impl_ode_state!(DVector<f64>);
impl_ode_state!(DMatrix<f64>);

/// Classical RK4 between two grid nodes.
///
/// Integrates `v' = rhs(stage, v)` from node `from` (where `v = boundary`)
/// to node `to`. Either direction is allowed. The result holds the node
/// values for `min(from, to)..=max(from, to)` in increasing time order.
pub fn rk4<S: OdeState>(
    grid: &TimeGrid,
    from: usize,
    to: usize,
    boundary: S,
    mut rhs: impl FnMut(Stage, &S) -> S,
) -> Result<Vec<S>> {
    if from > grid.steps() || to > grid.steps() {
        return Err(Error::Usage(format!("node range {from}..{to} exceeds grid")));
    }
    let dt = grid.dt();
    let mut out = Vec::with_capacity(from.abs_diff(to) + 1);
    let mut v = boundary;
    out.push(v.clone());
    if to >= from {
        for k in from..to {
            let k1 = rhs(Stage::Node(k), &v);
            let k2 = rhs(Stage::Mid(k), &v.plus_scaled(0.5 * dt, &k1));
            let k3 = rhs(Stage::Mid(k), &v.plus_scaled(0.5 * dt, &k2));
            let k4 = rhs(Stage::Node(k + 1), &v.plus_scaled(dt, &k3));
            v = v.rk4_update(dt, &k1, &k2, &k3, &k4);
            check_finite(&v, k + 1, grid)?;
            out.push(v.clone());
        }
    } else {
        let h = -dt;
        for k in (to..from).rev() {
            let k1 = rhs(Stage::Node(k + 1), &v);
            let k2 = rhs(Stage::Mid(k), &v.plus_scaled(0.5 * h, &k1));
            let k3 = rhs(Stage::Mid(k), &v.plus_scaled(0.5 * h, &k2));
            let k4 = rhs(Stage::Node(k), &v.plus_scaled(h, &k3));
            v = v.rk4_update(h, &k1, &k2, &k3, &k4);
            check_finite(&v, k, grid)?;
            out.push(v.clone());
        }
        out.reverse();
    }
    Ok(out)
}

fn check_finite<S: OdeState>(v: &S, node: usize, grid: &TimeGrid) -> Result<()> {
    let m = v.max_abs();
    if !(m <= BLOWUP) {
        return Err(Error::IntegrationBlowup { node, t: grid.node(node) });
    }
    Ok(())
}

fn node_range(grid: &TimeGrid, t_boundary: f64, direction: Direction, stop: usize) -> Result<(usize, usize)> {
    let k = grid.require_node(t_boundary)?;
    match direction {
        Direction::Forward => Ok((k, grid.steps())),
        Direction::Backward => {
            if k != grid.steps() {
                return Err(Error::Usage(format!(
                    "backward problems take their boundary at T = {}, got {t_boundary}",
                    grid.t_end()
                )));
            }
            Ok((k, stop))
        }
    }
}

/// Solves `v' = H(t)v + f(t)` with `v(t_b) = v_b`.
///
/// Forward problems run from `t_b` to `T`; backward problems need `t_b = T`
/// and run down to the first node covered by `H` (and `f`).
pub fn integrate_linear_ode(
    h: &MatrixPath,
    f: Option<&VectorPath>,
    t_boundary: f64,
    value: &DVector<f64>,
    direction: Direction,
) -> Result<VectorPath> {
    let grid = *h.grid();
    let (n, m) = h.shape();
    if n != m || n != value.len() {
        return Err(Error::Dimension(format!("H is {n}x{m}, boundary has length {}", value.len())));
    }
    if let Some(f) = f {
        if f.grid() != &grid || f.dim() != n {
            return Err(Error::Dimension("forcing term does not match H".into()));
        }
    }
    let lo = h.first().max(f.map_or(0, |f| f.first()));
    let (from, to) = node_range(&grid, t_boundary, direction, lo)?;
    if from < lo {
        return Err(Error::OutOfDomain { t: t_boundary, from: grid.node(lo), to: grid.t_end() });
    }
    let hs = h.stages();
    let fs = f.map(|f| f.stages());
    let values = rk4(&grid, from, to, value.clone(), |s, v| {
        let mut out = hs.get(s) * v;
        if let Some(fs) = &fs {
            out += fs.get(s);
        }
        out
    })?;
    VectorPath::from_nodes(grid, from.min(to), &values)
}

/// Matrix-valued counterpart of [`integrate_linear_ode`]: `V' = H(t)V + F(t)`.
pub fn integrate_linear_matrix_ode(
    h: &MatrixPath,
    f: Option<&MatrixPath>,
    t_boundary: f64,
    value: &DMatrix<f64>,
    direction: Direction,
) -> Result<MatrixPath> {
    let grid = *h.grid();
    let (n, m) = h.shape();
    if n != m || n != value.nrows() {
        return Err(Error::Dimension(format!("H is {n}x{m}, boundary is {}x{}", value.nrows(), value.ncols())));
    }
    if let Some(f) = f {
        if f.grid() != &grid || f.shape() != value.shape() {
            return Err(Error::Dimension("forcing term does not match boundary value".into()));
        }
    }
    let lo = h.first().max(f.map_or(0, |f| f.first()));
    let (from, to) = node_range(&grid, t_boundary, direction, lo)?;
    let hs = h.stages();
    let fs = f.map(|f| f.stages());
    let values = rk4(&grid, from, to, value.clone(), |s, v| {
        let mut out = hs.get(s) * v;
        if let Some(fs) = &fs {
            out += fs.get(s);
        }
        out
    })?;
    MatrixPath::from_nodes(grid, from.min(to), values)
}

/// Fundamental solution `Φ' = H(t)Φ`, `Φ(t_ref) = I`, over the whole range of `H`.
pub fn fundamental_solution(h: &MatrixPath, t_ref: f64) -> Result<MatrixPath> {
    let grid = *h.grid();
    let (n, m) = h.shape();
    if n != m {
        return Err(Error::Usage(format!("generator must be square, got {n}x{m}")));
    }
    let k_ref = grid.require_node(t_ref)?;
    if k_ref < h.first() {
        return Err(Error::OutOfDomain { t: t_ref, from: grid.node(h.first()), to: grid.t_end() });
    }
    let hs = h.stages();
    let eye = DMatrix::<f64>::identity(n, n);
    let rhs = |s: Stage, v: &DMatrix<f64>| hs.get(s) * v;
    let mut values = rk4(&grid, k_ref, h.first(), eye.clone(), rhs)?;
    let forward = rk4(&grid, k_ref, grid.steps(), eye, rhs)?;
    values.extend(forward.into_iter().skip(1));
    MatrixPath::from_nodes(grid, h.first(), values)
}

/// Quadrature rule for the variation-of-constants integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Quadrature {
    /// Composite trapezoid rule on the grid nodes.
    #[default]
    Trapezoid,
    /// Trapezoid rule plus the leading Euler–Maclaurin end correction
    /// `−h²/12·(f'(t) − f'(t_b))`, with derivatives from second-order
    /// differences. Fourth order for smooth integrands.
    EndCorrected,
}

/// Cumulative integral `I(t_k) = ∫_{t_b}^{t_k} f(s) ds` at every node of `f`.
pub fn cumulative_integral(f: &MatrixPath, t_b: f64, rule: Quadrature) -> Result<MatrixPath> {
    let grid = *f.grid();
    let kb = grid.require_node(t_b)?;
    let first = f.first();
    if kb < first {
        return Err(Error::OutOfDomain { t: t_b, from: grid.node(first), to: grid.t_end() });
    }
    let last = grid.steps();
    let dt = grid.dt();
    let (r, c) = f.shape();
    let mut acc = vec![DMatrix::<f64>::zeros(r, c); last + 1 - first];
    for k in kb..last {
        let step = (f.at(k) + f.at(k + 1)) * (0.5 * dt);
        acc[k + 1 - first] = &acc[k - first] + step;
    }
    for k in (first..kb).rev() {
        let step = (f.at(k) + f.at(k + 1)) * (0.5 * dt);
        acc[k - first] = &acc[k + 1 - first] - step;
    }
    if rule == Quadrature::EndCorrected && last - first >= 2 {
        let deriv = |k: usize| -> DMatrix<f64> {
            if k == first {
                (f.at(k) * -3.0 + f.at(k + 1) * 4.0 - f.at(k + 2)) / (2.0 * dt)
            } else if k == last {
                (f.at(k) * 3.0 - f.at(k - 1) * 4.0 + f.at(k - 2)) / (2.0 * dt)
            } else {
                (f.at(k + 1) - f.at(k - 1)) / (2.0 * dt)
            }
        };
        let db = deriv(kb);
        let w = dt * dt / 12.0;
        for k in first..=last {
            if k != kb {
                acc[k - first] -= (deriv(k) - &db) * w;
            }
        }
    }
    MatrixPath::from_nodes(grid, first, acc)
}

/// Inverts `Φ` at every node it covers.
pub fn invert_path(phi: &MatrixPath) -> Result<MatrixPath> {
    let values = (phi.first()..=phi.grid().steps())
        .map(|k| linalg::inverse_at(phi.at(k), k))
        .collect::<Result<Vec<_>>>()?;
    MatrixPath::from_nodes(*phi.grid(), phi.first(), values)
}

/// Matrix variation of constants:
/// `V(t) = Φ(t)Φ(t_b)⁻¹V_b + Φ(t)∫_{t_b}^{t} Φ(s)⁻¹F(s) ds`.
///
/// `forcing = None` gives the homogeneous transition. `phi_inv` may be
/// supplied when the caller already holds the node-wise inverses.
pub fn matrix_variation_of_constants(
    phi: &MatrixPath,
    phi_inv: Option<&MatrixPath>,
    forcing: Option<&MatrixPath>,
    t_b: f64,
    v_b: &DMatrix<f64>,
    rule: Quadrature,
) -> Result<MatrixPath> {
    let grid = *phi.grid();
    let kb = grid.require_node(t_b)?;
    let owned_inv;
    let inv = match phi_inv {
        Some(p) => p,
        None => {
            owned_inv = invert_path(phi)?;
            &owned_inv
        }
    };
    if !phi.covers(kb) {
        return Err(Error::OutOfDomain { t: t_b, from: grid.node(phi.first()), to: grid.t_end() });
    }
    let transported = inv.at(kb) * v_b;
    let first = phi.first().max(forcing.map_or(0, |f| f.first()));
    let integral = match forcing {
        Some(f) => {
            if f.grid() != &grid || f.shape().0 != phi.shape().0 || f.shape().1 != v_b.ncols() {
                return Err(Error::Dimension("forcing does not match Φ and boundary value".into()));
            }
            let integrand = MatrixPath::from_fn(grid, first, |k, _| inv.at(k) * f.at(k));
            Some(cumulative_integral(&integrand, t_b, rule)?)
        }
        None => None,
    };
    Ok(MatrixPath::from_fn(grid, first, |k, _| {
        let mut inner = transported.clone();
        if let Some(i) = &integral {
            inner += i.at(k);
        }
        phi.at(k) * inner
    }))
}

/// Vector variation of constants with the trapezoid rule.
pub fn variation_of_constants(
    phi: &MatrixPath,
    f: Option<&VectorPath>,
    t_b: f64,
    v_b: &DVector<f64>,
) -> Result<VectorPath> {
    variation_of_constants_with(phi, None, f, t_b, v_b, Quadrature::Trapezoid)
}

pub fn variation_of_constants_with(
    phi: &MatrixPath,
    phi_inv: Option<&MatrixPath>,
    f: Option<&VectorPath>,
    t_b: f64,
    v_b: &DVector<f64>,
    rule: Quadrature,
) -> Result<VectorPath> {
    let grid = *phi.grid();
    let forcing = f.map(|f| {
        MatrixPath::from_fn(grid, f.first(), |k, _| DMatrix::from_column_slice(f.dim(), 1, f.col(k).as_slice()))
    });
    let vb = DMatrix::from_column_slice(v_b.len(), 1, v_b.as_slice());
    let m = matrix_variation_of_constants(phi, phi_inv, forcing.as_ref(), t_b, &vb, rule)?;
    Ok(VectorPath::from_fn(grid, m.first(), v_b.len(), |k, _| m.at(k).column(0).into_owned()))
}
