//! Acceptance suite: one PASS/FAIL line per criterion, each with a
//! wall-clock budget. Exits non-zero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use mfg_core::deviation::{build_maps, DeviationMaps};
use mfg_core::equilibrium::{best_response, equilibrium_mf, predict_mf};
use mfg_core::nash::{epsilon_nash_gap, NashSetup};
use mfg_core::ode::{integrate_linear_ode, Direction};
use mfg_core::population::{self, Common, Record, SimOptions};
use mfg_core::realtime::{
    p0_route, realtime_simulate, restricted_prediction, EstimatorState, RealtimeModel, ScaledError, Truth,
};
use mfg_core::riccati::{self, hamiltonian_p0, p0_hamiltonian, p1_hamiltonian};
use mfg_core::{RiccatiBundle, SystemParams, TimeGrid, VectorPath};
use mfg_errsim::modes::PipelineOutput;
use mfg_errsim::output::{Cell, Table};
use mfg_errsim::{parse_config, run_pipeline, run_scenario, Overrides};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn z0() -> DVector<f64> {
    DVector::from_vec(vec![0.3, 0.5])
}

fn deterministic_p6() -> SystemParams {
    SystemParams::p6().with_noise(DMatrix::zeros(2, 2))
}

fn bundle(p: &SystemParams, steps: usize) -> RiccatiBundle {
    RiccatiBundle::solve(p, &TimeGrid::new(0.0, p.horizon, steps).unwrap()).unwrap()
}

fn pipeline(text: &str) -> PipelineOutput {
    run_pipeline(&parse_config(text, &Overrides::default()).unwrap()).unwrap()
}

fn num(t: &Table, row: &[Cell], col: &str) -> f64 {
    row[t.column(col).unwrap_or_else(|| panic!("column {col}"))].as_f64().unwrap()
}

fn text<'a>(t: &Table, row: &'a [Cell], col: &str) -> &'a str {
    match &row[t.column(col).unwrap()] {
        Cell::Text(s) => s,
        other => panic!("{col} is {other:?}"),
    }
}

fn riccati_correctness() -> Outcome {
    let s1 = SystemParams::s1();
    let g = TimeGrid::new(0.0, s1.horizon, 2000).unwrap();
    let p1 = riccati::solve_p1(&s1, &g).unwrap();
    let fixed = p1.values().iter().map(|m| (m[(0, 0)] - 1.0).abs()).fold(0.0, f64::max);
    ensure(fixed <= 1e-10, || format!("fixed point off by {fixed:e}"))?;

    // P' = P² − 1, P(T) = 0 has the solution tanh(T − t).
    let mut th = SystemParams::s1();
    th.q_i_bar = DMatrix::zeros(1, 1);
    th.q_bar = DMatrix::zeros(1, 1);
    let th = th.relaxed().unwrap();
    let p1 = riccati::solve_p1(&th, &g).unwrap();
    let tanh = (0..=g.steps()).map(|k| (p1.at(k)[(0, 0)] - (th.horizon - g.node(k)).tanh()).abs()).fold(0.0, f64::max);
    ensure(tanh <= 1e-8, || format!("tanh oracle off by {tanh:e}"))?;

    let p = SystemParams::p6();
    let b = bundle(&p, 2000);
    let o1 = hamiltonian_p0(&p1_hamiltonian(&p), &(&p.q_i_bar + &p.q_bar), p.horizon).unwrap();
    let t0 = &p.q_i_bar + &p.q_bar - p.coefficients().q_gamma_bar;
    let o0 = hamiltonian_p0(&p0_hamiltonian(&p), &t0, p.horizon).unwrap();
    let (e1, e0) = ((b.p1.at(0) - o1).amax(), (b.p0.at(0) - o0).amax());
    ensure(e1 <= 1e-7 && e0 <= 1e-7, || format!("Hamiltonian oracles off by {e1:e} / {e0:e}"))?;
    Ok(format!("fixed point {fixed:.1e}, tanh {tanh:.1e}, P1(0) {e1:.1e}, P0(0) {e0:.1e}"))
}

fn cross_representation() -> Outcome {
    let b = bundle(&SystemParams::p6(), 2000);
    let dp = b.p2.sup_dist(&b.p0.sub(&b.p1).unwrap()).unwrap();
    let dg = b.g1.sup_dist(&b.g).unwrap();
    ensure(dp <= 1e-6 && dg <= 1e-6, || format!("P2 gap {dp:e}, G1 gap {dg:e}"))?;
    Ok(format!("sup|P2-(P0-P1)| {dp:.1e}, sup|G1-G| {dg:.1e}"))
}

/// Mean field actually realized when every agent believes `z0 + e`:
/// `z' = (A + C − 𝒞P₁)z − 𝒞g_e` from the true `z0`.
fn realized_mf(b: &RiccatiBundle, e: &DVector<f64>) -> (VectorPath, VectorPath) {
    let p = &b.params;
    let c = p.coefficients();
    let g = best_response(b, &equilibrium_mf(b, &(z0() + e)).unwrap()).unwrap().g;
    let h = b.p1.map_nodes(|_, p1| &p.a + &p.c - &c.s_bf * p1);
    let f = g.map_nodes(|_, g| -(&c.s_bf * g));
    (integrate_linear_ode(&h, Some(&f), 0.0, &z0(), Direction::Forward).unwrap(), g)
}

/// Expected state of an agent believing `z0 + e_i` inside the population
/// believing `z0 + ē` on average.
fn expected_state(b: &RiccatiBundle, e_i: &DVector<f64>, e_bar: &DVector<f64>) -> VectorPath {
    let p = &b.params;
    let c = p.coefficients();
    let (z_a, g_bar) = realized_mf(b, e_bar);
    let g_i = best_response(b, &equilibrium_mf(b, &(z0() + e_i)).unwrap()).unwrap().g;
    let h = b.p1.map_nodes(|_, p1| &p.a - &c.s_b * p1);
    let f = VectorPath::from_fn(b.grid, 0, 2, |k, _| {
        -(&c.s_b * g_i.col(k)) + (&p.c - &c.s_f * b.p1.at(k)) * z_a.col(k) - &c.s_f * g_bar.col(k)
    });
    integrate_linear_ode(&h, Some(&f), 0.0, &z0(), Direction::Forward).unwrap()
}

fn unit_ball(rng: &mut ChaCha8Rng) -> DVector<f64> {
    let v = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
    let n = v.norm();
    if n > 1.0 {
        v / n
    } else {
        v
    }
}

fn linear_maps() -> Outcome {
    let b = bundle(&deterministic_p6(), 2000);
    let m: DeviationMaps = build_maps(&b).unwrap();
    let zc = equilibrium_mf(&b, &z0()).unwrap();
    let gc = best_response(&b, &zc).unwrap().g;
    let (za_c, _) = realized_mf(&b, &DVector::zeros(2));
    let x_c = expected_state(&b, &DVector::zeros(2), &DVector::zeros(2));
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 4];
    let mut draws = Vec::new();
    for _ in 0..10 {
        let (e_i, e_bar) = (unit_ball(&mut rng), unit_ball(&mut rng));
        let zi = predict_mf(&b, 0.0, &(z0() + &e_i)).unwrap();
        let gaps = [
            m.predicted_mf_deviation(&e_i).unwrap().dz.sup_dist(&zi.z.sub(&zc.z).unwrap()).unwrap(),
            m.offset_deviation(&e_i).unwrap().sup_dist(&best_response(&b, &zi).unwrap().g.sub(&gc).unwrap()).unwrap(),
            m.actual_mf_deviation(&e_bar).unwrap().dz.sup_dist(&realized_mf(&b, &e_bar).0.sub(&za_c).unwrap()).unwrap(),
            m.expected_trajectory_deviation(&e_i, &e_bar)
                .unwrap()
                .sup_dist(&expected_state(&b, &e_i, &e_bar).sub(&x_c).unwrap())
                .unwrap(),
        ];
        for (w, g) in worst.iter_mut().zip(gaps) {
            *w = w.max(g);
        }
        draws.push((e_i, e_bar));
    }
    ensure(worst.iter().all(|w| *w <= 1e-6), || format!("map vs two-solve gaps {worst:?}"))?;

    let ((a, abar), (c, cbar)) = (&draws[0], &draws[1]);
    let sum = |f: &dyn Fn(&DVector<f64>, &DVector<f64>) -> VectorPath| {
        f(&(a + c), &(abar + cbar)).sup_dist(&f(a, abar).add(&f(c, cbar)).unwrap()).unwrap()
    };
    let sup = [
        sum(&|e, _| m.predicted_mf_deviation(e).unwrap().dz),
        sum(&|e, _| m.offset_deviation(e).unwrap()),
        sum(&|_, e| m.actual_mf_deviation(e).unwrap().dz),
        sum(&|e, ebar| m.expected_trajectory_deviation(e, ebar).unwrap()),
    ];
    let sup_max = sup.iter().copied().fold(0.0, f64::max);
    ensure(sup_max <= 1e-12, || format!("superposition gaps {sup:?}"))?;
    Ok(format!("worst gaps dz {:.1e} dg {:.1e} dzA {:.1e} dx {:.1e}; superposition {sup_max:.1e}", worst[0], worst[1], worst[2], worst[3]))
}

fn linearity_rows(out: &PipelineOutput) -> Vec<(String, f64, f64)> {
    let t = out.table("linearity").expect("linearity table");
    t.rows.iter().map(|r| (text(t, r, "quantity").to_string(), num(t, r, "r2"), num(t, r, "intercept"))).collect()
}

fn linearity_reproduction() -> Outcome {
    let det = pipeline(
        r#"{"params": {"base": "P6", "D": [[0, 0], [0, 0]]}, "mode": "evolve", "N": 800,
            "error_model": {"E_bar": [0.1, -0.1]}, "k_sweep": [1, 2, 3, 4]}"#,
    );
    let rows = linearity_rows(&det);
    ensure(rows.len() == 12, || format!("{} regression rows", rows.len()))?;
    let min_r2 = rows.iter().map(|r| r.1).fold(1.0, f64::min);
    let max_icpt = rows.iter().map(|r| r.2.abs()).fold(0.0, f64::max);
    ensure(min_r2 >= 0.999 && max_icpt <= 1e-8, || format!("deterministic R² {min_r2}, |intercept| {max_icpt:e}"))?;

    let sto = pipeline(
        r#"{"params": "P6", "mode": "evolve", "N": 800, "replicates": 10,
            "error_model": {"E_bar": [0.1, -0.1]}, "k_sweep": [1, 2, 3, 4]}"#,
    );
    let rows = linearity_rows(&sto);
    let min_r2_sto = rows.iter().map(|r| r.1).fold(1.0, f64::min);
    ensure(min_r2_sto >= 0.98, || format!("stochastic R² {min_r2_sto}"))?;
    Ok(format!("deterministic min R² {min_r2:.8}, max |intercept| {max_icpt:.1e}; stochastic min R² {min_r2_sto:.6}"))
}

fn one_time_correction() -> Outcome {
    let out = pipeline(
        r#"{"params": {"base": "P6", "D": [[0, 0], [0, 0]]}, "mode": "correct", "N": 800, "t0": 0.5,
            "error_model": {"E_bar": [0.1, -0.1]}, "k_sweep": [1, 2, 3, 4], "correction": {"samples": 8}}"#,
    );
    let rep = out.table("correction_report").expect("report");
    ensure(rep.rows.len() == 4, || format!("{} report rows", rep.rows.len()))?;
    let mut worst_rel = 0.0f64;
    for row in &rep.rows {
        let k = num(rep, row, "k");
        ensure(row[rep.column("identifiable").unwrap()] == Cell::Bool(true), || format!("k = {k} not identifiable"))?;
        let rel = num(rep, row, "max_rel_err_E_bar").max(num(rep, row, "max_rel_err_E_i"));
        worst_rel = worst_rel.max(rel);
        let (unc, cor) = (num(rep, row, "err_uncorrected"), num(rep, row, "err_corrected"));
        ensure(cor < unc, || format!("k = {k}: corrected {cor:e} not below uncorrected {unc:e}"))?;
    }
    ensure(worst_rel <= 1e-6, || format!("recovery relative error {worst_rel:e}"))?;
    let new_gap = out.summary.iter().map(|s| s["sup_dz_corrected_minus_dz_new_after_t0"].as_f64().unwrap()).fold(0.0, f64::max);
    ensure(new_gap <= 1e-6, || format!("corrected deviation vs transported formula {new_gap:e}"))?;
    Ok(format!("identifiable for k = 1..4, recovery rel err {worst_rel:.1e}, dz_new gap {new_gap:.1e}"))
}

fn realtime_mode() -> Outcome {
    let b = bundle(&deterministic_p6(), 2000);
    let zbar = DVector::from_vec(vec![0.1, 0.9]);
    let mut route = 0.0f64;
    for t0 in [0.0, 0.4, 0.8, 1.2, 1.6] {
        let pr = restricted_prediction(&b, &EstimatorState { zbar_hat: zbar.clone(), z_hat: z0(), t0 }).unwrap();
        let (z, g) = p0_route(&b, t0, &zbar).unwrap();
        route = route.max(pr.zbar.sup_dist(&z).unwrap()).max(pr.gbar.sup_dist(&g).unwrap());
    }
    ensure(route <= 1e-6, || format!("two-route gap {route:e}"))?;

    let model = RealtimeModel::build(&b).unwrap();
    let opts = SimOptions { record: Record::None, seed: 11, ..Default::default() };
    let cov = DMatrix::identity(2, 2);
    let pop = |n, e: &DVector<f64>, center| {
        let mut p = population::sample_population(n, &z0(), &(&cov * 0.003), e, &(&cov * 0.1), 11).unwrap();
        if center {
            p.center_errors(e);
        }
        p
    };
    let truth = realtime_simulate(&model, &pop(800, &DVector::zeros(2), false), &Truth, opts.clone()).unwrap();
    let truth_dev = truth.dz_realized.sup_norm();
    ensure(truth_dev <= 2e-3, || format!("truth policy deviates by {truth_dev:e}"))?;

    // Zero-mean errors: the realized mean error is O(√(0.1/N)); bound the
    // deviation by four standard deviations through the linear response.
    let hold = ScaledError::hold(1.0);
    let zero = realtime_simulate(&model, &pop(800, &DVector::zeros(2), false), &hold, opts.clone()).unwrap();
    let unit_response: f64 = (0..2)
        .map(|j| {
            let e = VectorPath::constant(b.grid, &DVector::from_fn(2, |i, _| if i == j { 1.0 } else { 0.0 }));
            model.realized_deviation(&e, &e).unwrap().sup_norm()
        })
        .sum();
    let mc_bound = 4.0 * (0.1f64 / 800.0).sqrt() * unit_response;
    let zero_dev = zero.dz_realized.sup_norm();
    ensure(zero_dev <= mc_bound, || format!("zero-mean errors deviate by {zero_dev:e} > {mc_bound:e}"))?;

    let e = DVector::from_vec(vec![0.1, -0.1]);
    let run = realtime_simulate(&model, &pop(2000, &e, false), &hold, opts).unwrap();
    ensure(run.formula_gap <= 5e-3, || format!("integral formula gap {:e}", run.formula_gap))?;
    Ok(format!(
        "two-route {route:.1e}, truth {truth_dev:.1e}, zero-mean {zero_dev:.1e} (bound {mc_bound:.1e}), formula gap {:.1e} at |dz| {:.1e}",
        run.formula_gap,
        run.dz_realized.sup_norm()
    ))
}

fn epsilon_nash() -> Outcome {
    let b = bundle(&deterministic_p6(), 2000);
    let setup = NashSetup { z0: z0(), init_cov: DMatrix::identity(2, 2) * 0.003, noise_scale: 1.0 };
    let mean_gap = |n| -> Result<f64, String> {
        let mut sum = 0.0;
        for seed in 1..=4u64 {
            let r = epsilon_nash_gap(&b, &setup, n, seed).map_err(|e| e.to_string())?;
            ensure(r.gap >= -1e-6, || format!("N = {n}, seed {seed}: gap {:e}", r.gap))?;
            sum += r.gap;
        }
        Ok(sum / 4.0)
    };
    let (small, large) = (mean_gap(50)?, mean_gap(800)?);
    ensure(large < small, || format!("gap N=800 {large:e} not below N=50 {small:e}"))?;
    Ok(format!("mean gap N=50 {small:.3e}, N=800 {large:.3e}"))
}

fn finite_n_convergence() -> Outcome {
    let p = SystemParams::p6();
    let b = bundle(&p, 1000);
    let law = best_response(&b, &equilibrium_mf(&b, &z0()).unwrap()).unwrap().g;
    let seeds = 64u64;
    let mut scaled = Vec::new();
    for n in [50usize, 200, 800] {
        let finals: Vec<DVector<f64>> = (0..seeds)
            .map(|s| {
                let pop = population::sample_population(n, &z0(), &(DMatrix::identity(2, 2) * 0.003), &DVector::zeros(2), &DMatrix::zeros(2, 2), s).unwrap();
                let opts = SimOptions { seed: s, record: Record::None, ..Default::default() };
                population::simulate(&p, &b.p1, &pop, &Common(law.clone()), opts).unwrap().x_n.node(1000)
            })
            .collect();
        let mean = finals.iter().fold(DVector::zeros(2), |a, v| a + v) / seeds as f64;
        let var = finals.iter().map(|v| (v - &mean).norm_squared()).sum::<f64>() / (seeds - 1) as f64;
        scaled.push(n as f64 * var);
    }
    let (lo, hi) = scaled.iter().fold((f64::INFINITY, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
    ensure(hi / lo <= 2.0, || format!("N·Var spread {scaled:?}"))?;
    Ok(format!("N·Var(x_N(T)) = {:.3e}, {:.3e}, {:.3e} (max/min {:.2})", scaled[0], scaled[1], scaled[2], hi / lo))
}

fn determinism() -> Outcome {
    let mut compared = 0;
    for doc in [
        r#"{"params": "P6", "mode": "evolve", "N": 200, "steps": 500, "replicates": 2,
            "error_model": {"E_bar": [0.1, -0.1]}, "k_sweep": [1, 2]}"#,
        r#"{"params": "P6", "mode": "realtime", "N": 100, "steps": 400,
            "error_model": {"E_bar": [0.1, -0.1]}, "realtime": {"policy": "drift-inversion"}}"#,
        r#"{"params": {"base": "P6", "D": [[0, 0], [0, 0]]}, "mode": "correct", "N": 100, "steps": 400, "t0": 0.5,
            "error_model": {"E_bar": [0.4, -0.4]}}"#,
    ] {
        let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
        for (dir, threads) in dirs.iter().zip([1usize, 4, 4]) {
            let cfg = parse_config(doc, &Overrides { output_dir: Some(dir.path().into()), ..Default::default() }).unwrap();
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| run_scenario(&cfg)).map_err(|e| e.to_string())?;
        }
        let manifest = std::fs::read_to_string(dirs[0].path().join("manifest.json")).unwrap();
        let files: Vec<String> = serde_json::from_str::<serde_json::Value>(&manifest).unwrap()["files"]
            .as_array()
            .unwrap()
            .iter()
            .map(|f| f["name"].as_str().unwrap().to_string())
            .chain(["manifest.json".to_string()])
            .collect();
        for f in &files {
            let base = std::fs::read(dirs[0].path().join(f)).unwrap();
            for d in &dirs[1..] {
                ensure(std::fs::read(d.path().join(f)).unwrap() == base, || format!("{f} differs between runs"))?;
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} files byte-identical across thread counts 1, 4 and reruns"))
}

fn main() {
    let criteria: [(u32, &str, u64, fn() -> Outcome); 9] = [
        (1, "Riccati correctness", 5, riccati_correctness),
        (2, "cross-representation identities", 5, cross_representation),
        (3, "linear deviation maps", 30, linear_maps),
        (4, "linearity reproduction", 180, linearity_reproduction),
        (5, "one-time error correction", 60, one_time_correction),
        (6, "real-time mode", 300, realtime_mode),
        (7, "epsilon-Nash direction", 120, epsilon_nash),
        (8, "finite-N convergence", 180, finite_n_convergence),
        (9, "determinism", 180, determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > Duration::from_secs(budget) => Err(format!("{detail}; over the {budget} s budget")),
            other => other,
        };
        match result {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{:.1} s] {detail}", elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL [{:.1} s] {why}", elapsed.as_secs_f64());
            }
        }
    }
    let _ = panic::take_hook();
    if failed > 0 {
        println!("{failed} of 9 criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
