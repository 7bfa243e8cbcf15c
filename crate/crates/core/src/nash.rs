//! Empirical ε-Nash gap of the equilibrium feedback in a finite population.

use nalgebra::{DMatrix, DVector};

use crate::equilibrium::{cost, equilibrium_mf};
use crate::error::{Error, Result};
use crate::population::{self, Common, Coupling, Population, Record, SimOptions};
use crate::riccati::{self, RiccatiBundle};

/// Initial law of the population.
#[derive(Debug, Clone)]
pub struct NashSetup {
    pub z0: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    /// Multiplies `D`.
    pub noise_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NashReport {
    /// Player 1's cost under the equilibrium law.
    pub j_eq: f64,
    /// Player 1's cost under the best response to the frozen empirical
    /// mean field.
    pub j_br: f64,
    /// `j_eq − j_br`.
    pub gap: f64,
}

/// Simulates `N` agents under the equilibrium law, freezes the empirical
/// `(x⁽ᴺ⁾, u⁽ᴺ⁾)` and compares player 1's realized cost against the best
/// response to those paths. Player 1 keeps its noise stream in both runs.
pub fn epsilon_nash_gap(bundle: &RiccatiBundle, setup: &NashSetup, n_agents: usize, seed: u64) -> Result<NashReport> {
    if n_agents == 0 {
        return Err(Error::Usage("the ε-Nash gap needs at least one agent".into()));
    }
    let p = &bundle.params;
    let n = p.n();
    let law = crate::equilibrium::best_response(bundle, &equilibrium_mf(bundle, &setup.z0)?)?;
    let pop = population::sample_population(n_agents, &setup.z0, &setup.init_cov, &DVector::zeros(n), &DMatrix::zeros(n, n), seed)?;
    let opts = SimOptions { record: Record::First(1), seed, noise_scale: setup.noise_scale, ..Default::default() };
    let run = population::simulate(p, &bundle.p1, &pop, &Common(law.g), opts.clone())?;
    let me = &run.traces[0];
    let j_eq = cost(p, &me.x, &me.u, &run.x_n)?;

    let g_br = riccati::solve_tracking_offset(p, &bundle.p1, &run.x_n, &run.u_n)?;
    let alone = Population { x0: pop.x0.columns(0, 1).into_owned(), errors: DMatrix::zeros(n, 1) };
    let frozen = SimOptions {
        coupling: Coupling::Prescribed { z: run.x_n.clone(), ubar: run.u_n.clone() },
        ..opts
    };
    let br = population::simulate(p, &bundle.p1, &alone, &Common(g_br), frozen)?;
    let j_br = cost(p, &br.traces[0].x, &br.traces[0].u, &run.x_n)?;
    Ok(NashReport { j_eq, j_br, gap: j_eq - j_br })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::params::SystemParams;

    fn setup(noise: f64) -> NashSetup {
        NashSetup { z0: DVector::from_vec(vec![0.3, 0.5]), init_cov: DMatrix::identity(2, 2) * 0.003, noise_scale: noise }
    }

    fn bundle(p: &SystemParams) -> RiccatiBundle {
        RiccatiBundle::solve(p, &TimeGrid::new(0.0, p.horizon, 1000).unwrap()).unwrap()
    }

    #[test]
    fn decoupled_single_agent_has_no_gap() {
        let mut p = SystemParams::p6_decoupled();
        p.d = DMatrix::zeros(2, 2);
        let r = epsilon_nash_gap(&bundle(&p), &setup(0.0), 1, 3).unwrap();
        assert!(r.gap.abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn gap_is_nonnegative_and_shrinks_with_n() {
        let b = bundle(&SystemParams::p6());
        let mean_gap = |n| {
            (1..=4u64)
                .map(|s| {
                    let r = epsilon_nash_gap(&b, &setup(0.0), n, s).unwrap();
                    assert!(r.gap >= -1e-6, "{r:?}");
                    r.gap
                })
                .sum::<f64>()
                / 4.0
        };
        let small = mean_gap(50);
        let large = mean_gap(800);
        assert!(large < small, "{large} vs {small}");
    }

    #[test]
    fn rejects_empty_population() {
        let b = bundle(&SystemParams::p6());
        assert!(epsilon_nash_gap(&b, &setup(0.0), 0, 1).is_err());
    }
}
