//! Linear maps from initial-information errors to deviations of the
//! predicted mean field, the control offset, the actual mean field and the
//! expected trajectory.
//!
//! Generators (`𝒞 = (B+F)R⁻¹Bᵀ`, `S_B = BR⁻¹Bᵀ`, `S_F = FR⁻¹Bᵀ`):
//!
//! ```text
//! Φ₁: H₀ = A + C − 𝒞P₀          Φ_z: H_z = A + C − 𝒞P₁
//! Φ_g: −(Aᵀ − P₁𝒞)              Φ_x: H_x = A − S_BP₁
//! ```
//!
//! `Φ₁`, `Φ_z`, `Φ_x` are normalised at 0 and `Φ_g` at `T`. With
//! `K = P₁C − P₁S_FP₁ − QΓ`:
//!
//! ```text
//! 𝓜_g(t) = −Φ_g(t)Φ_g(T)⁻¹Q̄Γ̄Φ₁(T)Φ₁(0)⁻¹ − Φ_g(t)∫_T^t Φ_g⁻¹KΦ₁Φ₁(0)⁻¹ ds
//! 𝓜_z(t) = −Φ_z(t)∫_0^t Φ_z⁻¹𝒞𝓜_g ds
//! 𝓜_x¹(t) = Φ_x(t)∫_0^t Φ_x⁻¹(−S_B𝓜_g) ds
//! 𝓜_x²(t) = Φ_x(t)∫_0^t Φ_x⁻¹((C − S_FP₁)𝓜_z − S_F𝓜_g) ds
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{MatrixPath, TimeGrid, VectorPath};
use crate::linalg;
use crate::ode::{self, Quadrature};
use crate::riccati::{self, RiccatiBundle};

/// Quadrature used for every map integral. The end-corrected trapezoid
/// rule keeps the maps fourth-order accurate, matching the integrators.
pub const MAP_QUADRATURE: Quadrature = Quadrature::EndCorrected;

#[derive(Debug, Clone)]
pub struct DeviationMaps {
    pub grid: TimeGrid,
    pub phi1: MatrixPath,
    pub phi_g: MatrixPath,
    pub phi_z: MatrixPath,
    pub phi_x: MatrixPath,
    pub phi1_inv: MatrixPath,
    pub phi_z_inv: MatrixPath,
    pub mg: MatrixPath,
    pub mz: MatrixPath,
    pub mx1: MatrixPath,
    pub mx2: MatrixPath,
    /// `K = P₁C − P₁FR⁻¹BᵀP₁ − QΓ`
    pub k: MatrixPath,
    r_inv_bt: DMatrix<f64>,
    p0: MatrixPath,
    p1: MatrixPath,
}

/// The four generators `H₀`, `−(Aᵀ − P₁𝒞)`, `H_z`, `H_x`.
pub struct Generators {
    pub h0: MatrixPath,
    pub h_g: MatrixPath,
    pub h_z: MatrixPath,
    pub h_x: MatrixPath,
}

pub fn generators(bundle: &RiccatiBundle) -> Generators {
    let p = &bundle.params;
    let c = p.coefficients();
    let a_c = &p.a + &p.c;
    let at = p.a.transpose();
    Generators {
        h0: bundle.p0.map_nodes(|_, p0| &a_c - &c.s_bf * p0),
        h_g: bundle.p1.map_nodes(|_, p1| -(&at - p1 * &c.s_bf)),
        h_z: bundle.p1.map_nodes(|_, p1| &a_c - &c.s_bf * p1),
        h_x: bundle.p1.map_nodes(|_, p1| &p.a - &c.s_b * p1),
    }
}

pub fn build_maps(bundle: &RiccatiBundle) -> Result<DeviationMaps> {
    let p = &bundle.params;
    let c = p.coefficients();
    let grid = bundle.grid;
    let t0 = grid.t_start();
    let t_end = grid.t_end();
    let last = grid.steps();
    let gens = generators(bundle);

    let ((phi1, phi_g), (phi_z, phi_x)) = rayon::join(
        || (ode::fundamental_solution(&gens.h0, t0), ode::fundamental_solution(&gens.h_g, t_end)),
        || (ode::fundamental_solution(&gens.h_z, t0), ode::fundamental_solution(&gens.h_x, t0)),
    );
    let (phi1, phi_g, phi_z, phi_x) = (phi1?, phi_g?, phi_z?, phi_x?);
    let phi1_inv = ode::invert_path(&phi1)?;
    let phi_g_inv = ode::invert_path(&phi_g)?;
    let phi_z_inv = ode::invert_path(&phi_z)?;
    let phi_x_inv = ode::invert_path(&phi_x)?;

    let k = riccati::coupling_k(p, &bundle.p1);
    // Δz_i = Φ₁(t)Φ₁(0)⁻¹E_i
    let transition = phi1.map_nodes(|_, m| m * phi1_inv.at(0));
    let forcing_g = MatrixPath::from_fn(grid, 0, |j, _| -(k.at(j) * transition.at(j)));
    let mg = ode::matrix_variation_of_constants(
        &phi_g,
        Some(&phi_g_inv),
        Some(&forcing_g),
        t_end,
        &(-(&c.q_gamma_bar * transition.at(last))),
        MAP_QUADRATURE,
    )?;
    let zero = DMatrix::zeros(p.n(), p.n());
    let forcing_z = mg.map_nodes(|_, m| -(&c.s_bf * m));
    let mz = ode::matrix_variation_of_constants(&phi_z, Some(&phi_z_inv), Some(&forcing_z), t0, &zero, MAP_QUADRATURE)?;
    let l1 = mg.map_nodes(|_, m| -(&c.s_b * m));
    let l2 = MatrixPath::from_fn(grid, 0, |j, _| {
        (&p.c - &c.s_f * bundle.p1.at(j)) * mz.at(j) - &c.s_f * mg.at(j)
    });
    let mx1 = ode::matrix_variation_of_constants(&phi_x, Some(&phi_x_inv), Some(&l1), t0, &zero, MAP_QUADRATURE)?;
    let mx2 = ode::matrix_variation_of_constants(&phi_x, Some(&phi_x_inv), Some(&l2), t0, &zero, MAP_QUADRATURE)?;

    Ok(DeviationMaps {
        grid,
        phi1,
        phi_g,
        phi_z,
        phi_x,
        phi1_inv,
        phi_z_inv,
        mg,
        mz,
        mx1,
        mx2,
        k,
        r_inv_bt: c.r_inv_bt,
        p0: bundle.p0.clone(),
        p1: bundle.p1.clone(),
    })
}

/// A deviation of a state-like path and the matching control deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Deviation {
    pub dz: VectorPath,
    pub du: VectorPath,
}

impl DeviationMaps {
    /// `Φ₁(t)Φ₁(s)⁻¹` for nodes `t`, `s`.
    pub fn transition1(&self, t: usize, s: usize) -> DMatrix<f64> {
        self.phi1.at(t) * self.phi1_inv.at(s)
    }

    /// `Φ_z(t)Φ_z(s)⁻¹` for nodes `t`, `s`.
    pub fn transition_z(&self, t: usize, s: usize) -> DMatrix<f64> {
        self.phi_z.at(t) * self.phi_z_inv.at(s)
    }

    fn check(&self, e: &DVector<f64>) -> Result<()> {
        if e.len() != self.phi1.shape().0 {
            return Err(Error::Dimension(format!("error vector has length {}", e.len())));
        }
        Ok(())
    }

    /// `Δz_i = Φ₁(t)Φ₁(0)⁻¹E_i`, `Δū_i = −R⁻¹BᵀP₀Δz_i`.
    pub fn predicted_mf_deviation(&self, e_i: &DVector<f64>) -> Result<Deviation> {
        self.check(e_i)?;
        let start = self.phi1_inv.at(0) * e_i;
        let dz = self.phi1.apply(&start);
        let du = VectorPath::from_fn(self.grid, 0, self.r_inv_bt.nrows(), |j, _| {
            -(&self.r_inv_bt * (self.p0.at(j) * dz.col(j)))
        });
        Ok(Deviation { dz, du })
    }

    /// `Δg_i = 𝓜_g E_i`.
    pub fn offset_deviation(&self, e_i: &DVector<f64>) -> Result<VectorPath> {
        self.check(e_i)?;
        Ok(self.mg.apply(e_i))
    }

    /// `Δz^A = 𝓜_zĒ`, `Δū^A = −R⁻¹Bᵀ(P₁𝓜_z + 𝓜_g)Ē`.
    pub fn actual_mf_deviation(&self, e_bar: &DVector<f64>) -> Result<Deviation> {
        self.check(e_bar)?;
        let dz = self.mz.apply(e_bar);
        let du = VectorPath::from_fn(self.grid, 0, self.r_inv_bt.nrows(), |j, _| {
            -(&self.r_inv_bt * ((self.p1.at(j) * self.mz.at(j) + self.mg.at(j)) * e_bar))
        });
        Ok(Deviation { dz, du })
    }

    /// `x^E_i = 𝓜_x¹E_i + 𝓜_x²Ē`.
    pub fn expected_trajectory_deviation(&self, e_i: &DVector<f64>, e_bar: &DVector<f64>) -> Result<VectorPath> {
        self.check(e_i)?;
        self.check(e_bar)?;
        self.mx1.apply(e_i).add(&self.mx2.apply(e_bar))
    }

    /// Control deviation `−R⁻¹Bᵀ(P₁Δx + 𝓜_gE_i)` along a state deviation path.
    pub fn control_deviation(&self, dx: &VectorPath, e_i: &DVector<f64>) -> Result<VectorPath> {
        self.check(e_i)?;
        Ok(VectorPath::from_fn(self.grid, dx.first(), self.r_inv_bt.nrows(), |j, _| {
            -(&self.r_inv_bt * (self.p1.at(j) * dx.col(j) + self.mg.at(j) * e_i))
        }))
    }

    /// `Δz_new(t) = Φ₁(t)Φ₁(t₀)⁻¹𝓜_z(t₀)Ē` on `[t₀, T]`.
    pub fn corrected_mf_deviation(&self, t0: f64, e_bar: &DVector<f64>) -> Result<VectorPath> {
        self.check(e_bar)?;
        let k0 = self.grid.require_node(t0)?;
        let start = self.phi1_inv.at(k0) * self.mz.at(k0) * e_bar;
        Ok(self.phi1.apply(&start).tail(k0))
    }

    /// `𝓜_g^new` of the modified game: the offset deviation driven by
    /// `Δz_new`, on `[t₀, T]`.
    pub fn corrected_offset_map(&self, bundle: &RiccatiBundle, t0: f64) -> Result<MatrixPath> {
        let k0 = self.grid.require_node(t0)?;
        let c = bundle.params.coefficients();
        let last = self.grid.steps();
        let drive = MatrixPath::from_fn(self.grid, k0, |j, _| self.transition1(j, k0) * self.mz.at(k0));
        let forcing = MatrixPath::from_fn(self.grid, k0, |j, _| -(self.k.at(j) * drive.at(j)));
        let phi_g = self.phi_g.tail(k0);
        ode::matrix_variation_of_constants(
            &phi_g,
            None,
            Some(&forcing),
            self.grid.t_end(),
            &(-(&c.q_gamma_bar * drive.at(last))),
            MAP_QUADRATURE,
        )
    }

    /// `sup_t ‖Φ(t)‖ · ‖Φ(t)⁻¹‖` of `Φ₁`: large values flag near-singular transitions.
    pub fn phi1_condition(&self) -> f64 {
        (0..=self.grid.steps())
            .map(|j| linalg::spectral_norm(self.phi1.at(j)) * linalg::spectral_norm(self.phi1_inv.at(j)))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{best_response, equilibrium_mf, predict_mf};
    use crate::params::SystemParams;

    fn setup() -> (RiccatiBundle, DeviationMaps) {
        let p = SystemParams::p6();
        let b = RiccatiBundle::solve(&p, &TimeGrid::new(0.0, 2.0, 2000).unwrap()).unwrap();
        let m = build_maps(&b).unwrap();
        (b, m)
    }

    fn e() -> DVector<f64> {
        DVector::from_vec(vec![0.1, -0.1])
    }

    #[test]
    fn initial_and_terminal_conditions() {
        let (b, m) = setup();
        let id = DMatrix::identity(2, 2);
        assert_eq!(m.phi1.at(0), &id);
        assert_eq!(m.phi_z.at(0), &id);
        assert_eq!(m.phi_x.at(0), &id);
        assert_eq!(m.phi_g.at(2000), &id);
        assert_eq!(m.mz.at(0).amax(), 0.0);
        assert_eq!(m.mx1.at(0).amax(), 0.0);
        assert_eq!(m.mx2.at(0).amax(), 0.0);
        let c = b.params.coefficients();
        let expect = -(&c.q_gamma_bar * m.transition1(2000, 0));
        assert!((m.mg.at(2000) - expect).amax() < 1e-14);
    }

    #[test]
    fn semigroup_property() {
        let (_, m) = setup();
        for (t0, t1, t2) in [(0, 700, 2000), (300, 1200, 1900), (1500, 100, 900)] {
            let lhs = m.transition1(t2, t1) * m.transition1(t1, t0);
            assert!((lhs - m.transition1(t2, t0)).amax() < 1e-9);
        }
        assert!(m.phi1_condition() < 1e6);
    }

    #[test]
    fn predicted_deviation_two_ways() {
        let (b, m) = setup();
        let z0 = DVector::from_vec(vec![0.3, 0.5]);
        let zc = equilibrium_mf(&b, &z0).unwrap();
        let zi = equilibrium_mf(&b, &(&z0 + e())).unwrap();
        let dev = m.predicted_mf_deviation(&e()).unwrap();
        assert!(dev.dz.sup_dist(&zi.z.sub(&zc.z).unwrap()).unwrap() < 1e-8);
        assert!(dev.du.sup_dist(&zi.ubar.sub(&zc.ubar).unwrap()).unwrap() < 1e-8);
        let offset = best_response(&b, &zi).unwrap().g.sub(&best_response(&b, &zc).unwrap().g).unwrap();
        assert!(m.offset_deviation(&e()).unwrap().sup_dist(&offset).unwrap() < 1e-7);
    }

    #[test]
    fn offset_map_equals_p2_transport() {
        let (b, m) = setup();
        for j in (0..=2000).step_by(50) {
            let expect = b.p2.at(j) * m.transition1(j, 0);
            assert!((m.mg.at(j) - expect).amax() < 1e-6);
        }
    }

    #[test]
    fn zero_error_fixed_point_and_superposition() {
        let (_, m) = setup();
        let zero = DVector::zeros(2);
        assert_eq!(m.predicted_mf_deviation(&zero).unwrap().dz.sup_norm(), 0.0);
        assert_eq!(m.actual_mf_deviation(&zero).unwrap().dz.sup_norm(), 0.0);
        assert_eq!(m.expected_trajectory_deviation(&zero, &zero).unwrap().sup_norm(), 0.0);
        let e1 = DVector::from_vec(vec![0.3, 0.9]);
        let e2 = DVector::from_vec(vec![-0.4, 0.2]);
        let sum = m.predicted_mf_deviation(&(&e1 + &e2)).unwrap().dz;
        let parts = m.predicted_mf_deviation(&e1).unwrap().dz.add(&m.predicted_mf_deviation(&e2).unwrap().dz).unwrap();
        assert!(sum.sup_dist(&parts).unwrap() < 1e-12);
    }

    #[test]
    fn no_control_channel_means_no_actual_deviation() {
        let mut p = SystemParams::p6();
        p.b = DMatrix::zeros(2, 2);
        p.f = DMatrix::zeros(2, 2);
        let b = RiccatiBundle::solve(&p, &TimeGrid::new(0.0, 2.0, 200).unwrap()).unwrap();
        let m = build_maps(&b).unwrap();
        assert_eq!(m.mz.sup_norm(), 0.0);
        assert_eq!(m.mx1.sup_norm(), 0.0);
    }

    #[test]
    fn actual_deviation_scales_linearly() {
        let (_, m) = setup();
        let base = m.actual_mf_deviation(&e()).unwrap().dz;
        for k in 2..=4 {
            let dz = m.actual_mf_deviation(&(e() * k as f64)).unwrap().dz;
            assert!(dz.sup_dist(&base.scale(k as f64)).unwrap() <= 1e-10 * dz.sup_norm());
        }
    }

    #[test]
    fn corrected_deviation_matches_two_solves() {
        let (b, m) = setup();
        let z0 = DVector::from_vec(vec![0.3, 0.5]);
        let zc = equilibrium_mf(&b, &z0).unwrap();
        let e_bar = DVector::from_vec(vec![0.4, -0.4]);
        let za_t0 = zc.z.node(500) + m.mz.at(500) * &e_bar;
        let znew = predict_mf(&b, 0.5, &za_t0).unwrap();
        let direct = znew.z.sub(&zc.z.tail(500)).unwrap();
        let mapped = m.corrected_mf_deviation(0.5, &e_bar).unwrap();
        assert!(direct.sup_dist(&mapped).unwrap() < 1e-6);
        // modified offsets
        let gnew = best_response(&b, &znew).unwrap().g;
        let gc = best_response(&b, &zc).unwrap().g.tail(500);
        let mgnew = m.corrected_offset_map(&b, 0.5).unwrap();
        assert!(gnew.sub(&gc).unwrap().sup_dist(&mgnew.apply(&e_bar)).unwrap() < 1e-6);
    }
}
