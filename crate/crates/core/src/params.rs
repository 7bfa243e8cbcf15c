//! Model parameters `Θ` and the fixtures used across the test suites.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// All model matrices, vectors and the horizon.
///
/// State dimension `n` is `a.nrows()`; control dimension `d` is
/// `r.nrows()`. `b` and `f` are `n × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub q_i: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub q_i_bar: DMatrix<f64>,
    pub q_bar: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub gamma_bar: DMatrix<f64>,
    pub eta: DVector<f64>,
    pub eta_bar: DVector<f64>,
    pub s: DVector<f64>,
    pub s_bar: DVector<f64>,
    pub horizon: f64,
}

/// Products of `Θ` that the solvers use at every stage.
#[derive(Debug, Clone)]
pub struct Coefficients {
    pub r_inv: DMatrix<f64>,
    /// `R⁻¹Bᵀ`
    pub r_inv_bt: DMatrix<f64>,
    /// `BR⁻¹Bᵀ`
    pub s_b: DMatrix<f64>,
    /// `FR⁻¹Bᵀ`
    pub s_f: DMatrix<f64>,
    /// `(B+F)R⁻¹Bᵀ`
    pub s_bf: DMatrix<f64>,
    /// `QΓ`
    pub q_gamma: DMatrix<f64>,
    /// `Q̄Γ̄`
    pub q_gamma_bar: DMatrix<f64>,
    /// `ν = Q_I s + Qη`
    pub nu: DVector<f64>,
    /// Terminal offset `−Q̄_I s̄ − Q̄η̄`.
    pub offset_terminal: DVector<f64>,
}

impl SystemParams {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.r.nrows()
    }

    /// Validates dimensions, the horizon and positive definiteness.
    pub fn validated(self) -> Result<Self> {
        self.check_shapes()?;
        for (name, m) in [
            ("Q_I", &self.q_i),
            ("Q", &self.q),
            ("Q_I_bar", &self.q_i_bar),
            ("Q_bar", &self.q_bar),
            ("R", &self.r),
        ] {
            linalg::require_spd(name, m)?;
        }
        Ok(self)
    }

    /// Shape and horizon checks only; semidefinite or indefinite weights
    /// are accepted. `R` must still be invertible.
    pub fn relaxed(self) -> Result<Self> {
        self.check_shapes()?;
        linalg::inverse(&self.r).map_err(|_| Error::NotPositiveDefinite {
            name: "R".into(),
            reason: "singular".into(),
        })?;
        Ok(self)
    }

    fn check_shapes(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Usage(format!("horizon T must be positive, got {}", self.horizon)));
        }
        let n = self.a.nrows();
        let d = self.r.nrows();
        if n == 0 || d == 0 {
            return Err(Error::Dimension("empty state or control".into()));
        }
        let square = [
            ("A", &self.a),
            ("C", &self.c),
            ("D", &self.d),
            ("Q_I", &self.q_i),
            ("Q", &self.q),
            ("Q_I_bar", &self.q_i_bar),
            ("Q_bar", &self.q_bar),
            ("Gamma", &self.gamma),
            ("Gamma_bar", &self.gamma_bar),
        ];
        for (name, m) in square {
            if m.shape() != (n, n) {
                return Err(Error::Dimension(format!("{name} is {}x{}, expected {n}x{n}", m.nrows(), m.ncols())));
            }
        }
        for (name, m) in [("B", &self.b), ("F", &self.f)] {
            if m.shape() != (n, d) {
                return Err(Error::Dimension(format!("{name} is {}x{}, expected {n}x{d}", m.nrows(), m.ncols())));
            }
        }
        if self.r.shape() != (d, d) {
            return Err(Error::Dimension("R must be square".into()));
        }
        for (name, v) in [("eta", &self.eta), ("eta_bar", &self.eta_bar), ("s", &self.s), ("s_bar", &self.s_bar)] {
            if v.len() != n {
                return Err(Error::Dimension(format!("{name} has length {}, expected {n}", v.len())));
            }
        }
        let all_finite = [&self.a, &self.b, &self.c, &self.f, &self.d, &self.q_i, &self.q, &self.q_i_bar]
            .iter()
            .chain([&self.q_bar, &self.r, &self.gamma, &self.gamma_bar].iter())
            .all(|m| m.iter().all(|v| v.is_finite()))
            && [&self.eta, &self.eta_bar, &self.s, &self.s_bar].iter().all(|v| v.iter().all(|x| x.is_finite()));
        if !all_finite {
            return Err(Error::Usage("parameters contain non-finite entries".into()));
        }
        Ok(())
    }

    pub fn coefficients(&self) -> Coefficients {
        let r_inv = linalg::inverse(&self.r).expect("R invertible by construction");
        let r_inv_bt = &r_inv * self.b.transpose();
        let s_b = &self.b * &r_inv_bt;
        let s_f = &self.f * &r_inv_bt;
        let s_bf = &s_b + &s_f;
        Coefficients {
            r_inv,
            r_inv_bt,
            s_b,
            s_f,
            s_bf,
            q_gamma: &self.q * &self.gamma,
            q_gamma_bar: &self.q_bar * &self.gamma_bar,
            nu: &self.q_i * &self.s + &self.q * &self.eta,
            offset_terminal: -(&self.q_i_bar * &self.s_bar) - &self.q_bar * &self.eta_bar,
        }
    }

    /// Same parameters with the diffusion matrix scaled.
    pub fn with_noise(mut self, d: DMatrix<f64>) -> Self {
        self.d = d;
        self
    }

    /// Two-dimensional simulation setup: `A = −I`, `B = F = 0.5I`,
    /// `C = 0.5I`, `R = Q_I = Q = Q̄_I = Q̄ = Γ = Γ̄ = I`, `η = η̄ = 0`,
    /// `s = s̄ = (0.5, 0.3)`, `T = 2`, `D = 0.05I`.
    pub fn p6() -> Self {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let s = DVector::from_vec(vec![0.5, 0.3]);
        SystemParams {
            a: -&i2,
            b: &i2 * 0.5,
            c: &i2 * 0.5,
            f: &i2 * 0.5,
            d: &i2 * 0.05,
            q_i: i2.clone(),
            q: i2.clone(),
            q_i_bar: i2.clone(),
            q_bar: i2.clone(),
            r: i2.clone(),
            gamma: i2.clone(),
            gamma_bar: i2,
            eta: DVector::zeros(2),
            eta_bar: DVector::zeros(2),
            s: s.clone(),
            s_bar: s,
            horizon: 2.0,
        }
    }

    /// Scalar fixture whose `P₁` sits at the Riccati fixed point `P ≡ 1`.
    pub fn s1() -> Self {
        let one = DMatrix::from_element(1, 1, 1.0);
        let half = DMatrix::from_element(1, 1, 0.5);
        let zero = DMatrix::zeros(1, 1);
        SystemParams {
            a: zero.clone(),
            b: one.clone(),
            c: zero.clone(),
            f: zero.clone(),
            d: zero.clone(),
            q_i: half.clone(),
            q: half.clone(),
            q_i_bar: half.clone(),
            q_bar: half,
            r: one,
            gamma: zero.clone(),
            gamma_bar: zero,
            eta: DVector::zeros(1),
            eta_bar: DVector::zeros(1),
            s: DVector::zeros(1),
            s_bar: DVector::zeros(1),
            horizon: 2.0,
        }
    }

    /// `P6` with the mean-field coupling removed: `C = F = Γ = Γ̄ = 0`.
    pub fn p6_decoupled() -> Self {
        let mut p = Self::p6();
        let z = DMatrix::zeros(2, 2);
        p.c = z.clone();
        p.f = z.clone();
        p.gamma = z.clone();
        p.gamma_bar = z;
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_validate() {
        assert!(SystemParams::p6().validated().is_ok());
        assert!(SystemParams::s1().validated().is_ok());
        assert!(SystemParams::p6_decoupled().validated().is_ok());
    }

    #[test]
    fn rejects_bad_horizon_and_shapes() {
        let mut p = SystemParams::p6();
        p.horizon = -1.0;
        assert!(matches!(p.validated(), Err(Error::Usage(_))));
        let mut p = SystemParams::p6();
        p.s = DVector::zeros(3);
        assert!(matches!(p.validated(), Err(Error::Dimension(_))));
    }

    #[test]
    fn rejects_indefinite_weight_unless_relaxed() {
        let mut p = SystemParams::s1();
        p.q_i_bar = DMatrix::zeros(1, 1);
        p.q_bar = DMatrix::zeros(1, 1);
        assert!(matches!(p.clone().validated(), Err(Error::NotPositiveDefinite { .. })));
        assert!(p.relaxed().is_ok());
    }

    #[test]
    fn coefficients_of_p6() {
        let c = SystemParams::p6().coefficients();
        assert_eq!(c.s_bf, DMatrix::identity(2, 2) * 0.5);
        assert_eq!(c.nu, DVector::from_vec(vec![0.5, 0.3]));
        assert_eq!(c.offset_terminal, DVector::from_vec(vec![-0.5, -0.3]));
    }
}
