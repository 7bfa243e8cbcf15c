//! Scenario modes and the pipeline that turns their runs into tables.

use std::path::PathBuf;

use mfg_core::correction::{self, CorrectionConfig, PredictionFamily};
use mfg_core::deviation::{build_maps, DeviationMaps};
use mfg_core::equilibrium::equilibrium_mf;
use mfg_core::population::{self, Population, Record, SimOptions};
use mfg_core::realtime::{policy_registry, realtime_simulate, RealtimeModel};
use mfg_core::registry::Registry;
use mfg_core::{Error as CoreError, RiccatiBundle, TimeGrid, VectorPath};
use nalgebra::DVector;
use rayon::prelude::*;
use serde_json::json;

use crate::config::{FieldError, ScenarioConfig};
use crate::output::{self, Cell, GridInfo, RunManifest, Table};

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("mode '{mode}' failed: {source}")]
    Pipeline {
        mode: String,
        #[source]
        source: CoreError,
    },
    #[error("cannot write outputs to {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Shared solves for one scenario.
pub struct RunContext<'a> {
    pub cfg: &'a ScenarioConfig,
    pub grid: TimeGrid,
    pub bundle: RiccatiBundle,
    pub maps: DeviationMaps,
}

/// Named time series, one column group per entry.
pub type Series = Vec<(String, VectorPath)>;

/// One run of a mode at sweep value `k` with one seed.
#[derive(Debug, Clone)]
pub struct Sample {
    pub k: f64,
    pub seed: u64,
    pub predicted: Series,
    pub actual: Series,
    /// Deviation series; each is regressed on `k` in `linearity.csv`.
    pub deviations: Series,
    /// One `correction_report.csv` row, if the mode produces one.
    pub report: Vec<(String, Cell)>,
    pub summary: serde_json::Value,
}

pub trait ScenarioMode: Send + Sync {
    fn name(&self) -> &str;

    /// Mode-specific validation on top of the generic checks.
    fn check(&self, _cfg: &ScenarioConfig, _errors: &mut Vec<FieldError>) {}

    /// All samples, ordered by sweep value and then replicate.
    fn run(&self, ctx: &RunContext<'_>) -> Result<Vec<Sample>>;
}

pub fn mode_registry() -> Registry<dyn ScenarioMode, ()> {
    let mut r: Registry<dyn ScenarioMode, ()> = Registry::new("mode");
    r.register("predict", |_: &()| Ok(Box::new(Predict) as Box<dyn ScenarioMode>));
    r.register("evolve", |_: &()| Ok(Box::new(Evolve) as Box<dyn ScenarioMode>));
    r.register("correct", |_: &()| Ok(Box::new(Correct) as Box<dyn ScenarioMode>));
    r.register("realtime", |_: &()| Ok(Box::new(Realtime) as Box<dyn ScenarioMode>));
    r
}

impl RunContext<'_> {
    /// Population for sweep value `k`: errors around `k·E_bar`.
    pub fn population(&self, k: f64, seed: u64) -> Result<Population> {
        let c = self.cfg;
        let e_mean = &c.error_mean * k;
        let mut pop = population::sample_population(c.n_agents, &c.initial_mean, &c.initial_cov, &e_mean, &c.error_cov, seed)?;
        if c.center_initial {
            pop.center_initial(&c.initial_mean);
        }
        if c.center_errors {
            pop.center_errors(&e_mean);
        }
        for (i, e) in &c.overrides {
            pop.errors.set_column(*i, e);
        }
        Ok(pop)
    }

    /// Population-average error: `k·E_bar` exactly when the errors were
    /// centered on it, the sample mean otherwise.
    pub fn e_bar(&self, k: f64, pop: &Population) -> DVector<f64> {
        if self.cfg.center_errors && self.cfg.overrides.is_empty() {
            &self.cfg.error_mean * k
        } else {
            pop.mean_error()
        }
    }

    pub fn sim_options(&self, seed: u64) -> SimOptions {
        SimOptions { seed, scheme: self.cfg.scheme, record: Record::None, ..Default::default() }
    }

    /// Runs `f` for every sweep value and replicate. Runs are independent
    /// and may execute concurrently; the result order is fixed.
    pub fn for_each_sample<F>(&self, f: F) -> Result<Vec<Sample>>
    where
        F: Fn(f64, u64, Population) -> Result<Sample> + Sync,
    {
        let jobs: Vec<(f64, u64)> = self
            .cfg
            .k_sweep
            .iter()
            .flat_map(|&k| (0..self.cfg.replicates as u64).map(move |r| (k, r)))
            .map(|(k, r)| (k, self.cfg.seed.wrapping_add(r)))
            .collect();
        jobs.into_par_iter().map(|(k, seed)| f(k, seed, self.population(k, seed)?)).collect()
    }

    fn nan_path(&self) -> VectorPath {
        let n = self.bundle.params.n();
        VectorPath::constant(self.grid, &DVector::from_element(n, f64::NAN))
    }
}

fn named(name: &str, p: VectorPath) -> (String, VectorPath) {
    (name.to_string(), p)
}

fn vec_json(v: &DVector<f64>) -> serde_json::Value {
    json!(v.iter().copied().collect::<Vec<_>>())
}

/// Closed-form maps only; no simulation.
struct Predict;

impl ScenarioMode for Predict {
    fn name(&self) -> &str {
        "predict"
    }

    fn run(&self, ctx: &RunContext<'_>) -> Result<Vec<Sample>> {
        ctx.for_each_sample(|k, seed, pop| {
            let e_bar = ctx.e_bar(k, &pop);
            let z_c = equilibrium_mf(&ctx.bundle, &pop.mean_x0())?;
            let dz_pred = ctx.maps.predicted_mf_deviation(&e_bar)?.dz;
            let dz_a = ctx.maps.actual_mf_deviation(&e_bar)?.dz;
            Ok(Sample {
                k,
                seed,
                predicted: vec![named("z_c", z_c.z.clone()), named("z_pred", z_c.z.add(&dz_pred)?)],
                actual: vec![named("z_A", z_c.z.add(&dz_a)?)],
                deviations: vec![named("dz_pred", dz_pred), named("dg", ctx.maps.offset_deviation(&e_bar)?), named("dz_A", dz_a)],
                report: Vec::new(),
                summary: json!({"k": k, "seed": seed, "E_bar": vec_json(&e_bar)}),
            })
        })
    }
}

/// Finite population acting on erroneous initial predictions.
struct Evolve;

impl ScenarioMode for Evolve {
    fn name(&self) -> &str {
        "evolve"
    }

    fn run(&self, ctx: &RunContext<'_>) -> Result<Vec<Sample>> {
        let p = &ctx.bundle.params;
        ctx.for_each_sample(|k, seed, pop| {
            let z0 = pop.mean_x0();
            let e_bar = ctx.e_bar(k, &pop);
            let z_c = equilibrium_mf(&ctx.bundle, &z0)?;
            let family = PredictionFamily::build(&ctx.bundle, ctx.grid.t_start(), &z0)?;
            let mut beliefs = pop.errors.clone();
            for mut c in beliefs.column_iter_mut() {
                c += &z0;
            }
            let laws = family.assignment(&beliefs);
            let res = population::simulate(p, &ctx.bundle.p1, &pop, &laws, ctx.sim_options(seed))?;
            let dz_pred = ctx.maps.predicted_mf_deviation(&e_bar)?.dz;
            let dz_a = ctx.maps.actual_mf_deviation(&e_bar)?.dz;
            let dz_n = res.x_n.sub(&z_c.z)?;
            let summary = json!({
                "k": k, "seed": seed, "E_bar": vec_json(&e_bar),
                "sup_dz_N": dz_n.sup_norm(), "sup_dz_N_minus_dz_A": dz_n.sup_dist(&dz_a)?,
            });
            Ok(Sample {
                k,
                seed,
                predicted: vec![named("z_c", z_c.z.clone()), named("z_pred", z_c.z.add(&dz_pred)?)],
                actual: vec![named("x_N", res.x_n), named("z_A", z_c.z.add(&dz_a)?)],
                deviations: vec![named("dz_N", dz_n), named("dz_A", dz_a)],
                report: Vec::new(),
                summary,
            })
        })
    }
}

/// One-time error correction at `t0`.
struct Correct;

fn max_rel(pairs: impl Iterator<Item = (DVector<f64>, DVector<f64>)>) -> f64 {
    pairs
        .map(|(got, want)| (got - &want).norm() / want.norm().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

impl ScenarioMode for Correct {
    fn name(&self) -> &str {
        "correct"
    }

    fn check(&self, cfg: &ScenarioConfig, errors: &mut Vec<FieldError>) {
        if cfg.t0.is_none() {
            errors.push(FieldError { path: "t0".into(), reason: "required for mode 'correct'".into() });
        }
    }

    fn run(&self, ctx: &RunContext<'_>) -> Result<Vec<Sample>> {
        let cfg = ctx.cfg;
        let t0 = cfg.t0.ok_or_else(|| CoreError::Usage("t0 is required".into()))?;
        let k0 = ctx.grid.require_node(t0)?;
        let n = ctx.bundle.params.n();
        let ccfg = CorrectionConfig {
            t0,
            mode: cfg.correction.observable,
            sample_nodes: Some(correction::default_sample_nodes(k0, cfg.correction.samples)),
            sv_tol: cfg.correction.sv_tol,
        };
        ctx.for_each_sample(|k, seed, pop| {
            let e_bar = ctx.e_bar(k, &pop);
            let run = correction::run_correction(&ctx.bundle, &ctx.maps, &pop, ctx.sim_options(seed), &ccfg)?;
            let z_c = &run.z_c.z;
            let dz_pred = ctx.maps.predicted_mf_deviation(&e_bar)?.dz;
            let dz_a = ctx.maps.actual_mf_deviation(&e_bar)?.dz;
            let after = ctx.maps.corrected_mf_deviation(t0, &e_bar)?;
            let dz_new = VectorPath::from_fn(ctx.grid, 0, n, |j, _| if j < k0 { dz_a.node(j) } else { after.node(j) });
            let x_corr = run.corrected.as_ref().map_or_else(|| ctx.nan_path(), |r| r.x_n.clone());
            let dz_corr = x_corr.sub(z_c)?;

            let id = &run.identifiability;
            let agents = run.results.len();
            let rec_bar = if agents > 0 {
                run.results.iter().fold(DVector::zeros(n), |acc, r| acc + &r.e_bar) / agents as f64
            } else {
                DVector::from_element(n, f64::NAN)
            };
            let nan_if_empty = |v: f64| if agents > 0 { v } else { f64::NAN };
            let rel_bar = nan_if_empty(max_rel(run.results.iter().map(|r| (r.e_bar.clone(), e_bar.clone()))));
            let rel_i = nan_if_empty(max_rel(run.results.iter().enumerate().map(|(i, r)| (r.e_i.clone(), pop.errors.column(i).into_owned()))));
            let residual = nan_if_empty(run.results.iter().map(|r| r.residual).fold(0.0, f64::max));
            let mut report = vec![
                ("t".to_string(), Cell::Num(t0)),
                ("k".to_string(), Cell::Num(k)),
                ("seed".to_string(), Cell::Int(seed as i64)),
                ("identifiable".to_string(), Cell::Bool(id.identifiable)),
                ("rank".to_string(), Cell::Int(id.rank as i64)),
                ("required_rank".to_string(), Cell::Int(id.required as i64)),
                ("agents_recovered".to_string(), Cell::Int(agents as i64)),
            ];
            for i in 0..n {
                report.push((format!("E_bar_injected_{}", i + 1), Cell::Num(e_bar[i])));
            }
            for i in 0..n {
                report.push((format!("E_bar_recovered_{}", i + 1), Cell::Num(rec_bar[i])));
            }
            report.extend([
                ("max_rel_err_E_bar".to_string(), Cell::Num(rel_bar)),
                ("max_rel_err_E_i".to_string(), Cell::Num(rel_i)),
                ("max_residual".to_string(), Cell::Num(residual)),
                ("err_uncorrected".to_string(), Cell::Num(run.err_uncorrected)),
                ("err_corrected".to_string(), Cell::Num(run.err_corrected.unwrap_or(f64::NAN))),
            ]);
            let summary = json!({
                "k": k, "seed": seed, "identifiable": id.identifiable, "rank": id.rank,
                "singular_values": id.singular_values,
                "sup_dz_corrected_minus_dz_new_after_t0": dz_corr.sup_dist_from(&dz_new, k0)?,
            });
            Ok(Sample {
                k,
                seed,
                predicted: vec![named("z_c", z_c.clone()), named("z_pred", z_c.add(&dz_pred)?)],
                actual: vec![named("x_uncorrected", run.uncorrected.x_n.clone()), named("x_corrected", x_corr)],
                deviations: vec![
                    named("dz_uncorrected", run.uncorrected.x_n.sub(z_c)?),
                    named("dz_corrected", dz_corr),
                    named("dz_A", dz_a),
                    named("dz_new", dz_new),
                ],
                report,
                summary,
            })
        })
    }
}

/// Continuous re-estimation under the configured policy.
struct Realtime;

impl ScenarioMode for Realtime {
    fn name(&self) -> &str {
        "realtime"
    }

    fn run(&self, ctx: &RunContext<'_>) -> Result<Vec<Sample>> {
        let model = RealtimeModel::build(&ctx.bundle)?;
        let rt = &ctx.cfg.realtime;
        let policy = policy_registry().create(&rt.policy, &rt.params)?;
        ctx.for_each_sample(|k, seed, pop| {
            let run = realtime_simulate(&model, &pop, policy.as_ref(), ctx.sim_options(seed))?;
            let z_c = &run.z_c.z;
            let summary = json!({
                "k": k, "seed": seed, "policy": rt.policy,
                "formula_gap": run.formula_gap, "sup_dz_N": run.dz_realized.sup_norm(),
            });
            Ok(Sample {
                k,
                seed,
                predicted: vec![named("z_c", z_c.clone())],
                actual: vec![named("x_N", run.population.x_n.clone()), named("z_formula", z_c.add(&run.dz_formula)?)],
                deviations: vec![
                    named("dz_N", run.dz_realized),
                    named("dz_formula", run.dz_formula),
                    named("E_bar", run.e_bar),
                    named("E_bar1", run.e_bar1),
                ],
                report: Vec::new(),
                summary,
            })
        })
    }
}

/// Tables of a finished scenario.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub tables: Vec<Table>,
    pub summary: Vec<serde_json::Value>,
}

impl PipelineOutput {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

/// Average of the series of several replicates.
fn average(samples: &[&Sample], pick: fn(&Sample) -> &Series) -> Result<Series> {
    let first = pick(samples[0]);
    first
        .iter()
        .enumerate()
        .map(|(j, (name, path))| {
            let mut acc = path.clone();
            for s in &samples[1..] {
                acc = acc.add(&pick(s)[j].1)?;
            }
            Ok((name.clone(), acc.scale(1.0 / samples.len() as f64)))
        })
        .collect()
}

fn series_table(name: &str, grid: &TimeGrid, groups: &[(f64, Series)]) -> Table {
    let mut columns = vec!["t".to_string(), "k".to_string()];
    if let Some((_, series)) = groups.first() {
        for (s, p) in series {
            columns.extend((1..=p.dim()).map(|i| format!("{s}_{i}")));
        }
    }
    let mut table = Table::new(name, columns);
    for (k, series) in groups {
        for j in 0..=grid.steps() {
            let mut row = vec![Cell::Num(grid.node(j)), Cell::Num(*k)];
            for (_, p) in series {
                if p.covers(j) {
                    row.extend(p.col(j).iter().map(|v| Cell::Num(*v)));
                } else {
                    row.extend((0..p.dim()).map(|_| Cell::Num(f64::NAN)));
                }
            }
            table.push(row);
        }
    }
    table
}

/// Ordinary least squares `y = intercept + slope·x` with its `R²`. Constant
/// data give `R² = 1` when fitted exactly and 0 otherwise.
pub fn regress(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    (slope, intercept, r2)
}

fn linearity_table(cfg: &ScenarioConfig, groups: &[(f64, Series)]) -> Result<Table> {
    let columns = ["t", "quantity", "component", "slope", "intercept", "r2", "points"];
    let mut table = Table::new("linearity", columns.iter().map(|s| s.to_string()).collect());
    let ks: Vec<f64> = groups.iter().map(|g| g.0).collect();
    let quantities = &groups[0].1;
    for &t in &cfg.linearity_times {
        for (q, (name, path)) in quantities.iter().enumerate() {
            let values = groups.iter().map(|g| g.1[q].1.eval(t)).collect::<Result<Vec<_>>>()?;
            for c in 0..path.dim() {
                let y: Vec<f64> = values.iter().map(|v| v[c]).collect();
                let (slope, intercept, r2) = regress(&ks, &y);
                table.push(vec![
                    Cell::Num(t),
                    Cell::Text(name.clone()),
                    Cell::Int(c as i64 + 1),
                    Cell::Num(slope),
                    Cell::Num(intercept),
                    Cell::Num(r2),
                    Cell::Int(ks.len() as i64),
                ]);
            }
        }
    }
    Ok(table)
}

fn report_table(samples: &[Sample]) -> Option<Table> {
    let first = samples.iter().find(|s| !s.report.is_empty())?;
    let mut table = Table::new("correction_report", first.report.iter().map(|(c, _)| c.clone()).collect());
    for s in samples.iter().filter(|s| !s.report.is_empty()) {
        table.push(s.report.iter().map(|(_, v)| v.clone()).collect());
    }
    Some(table)
}

/// Solves, runs the mode and assembles the output tables without writing.
pub fn run_pipeline(cfg: &ScenarioConfig) -> std::result::Result<PipelineOutput, RunError> {
    let wrap = |source| RunError::Pipeline { mode: cfg.mode.clone(), source };
    let mode = mode_registry().create(&cfg.mode, &()).map_err(wrap)?;
    let grid = cfg.grid();
    let bundle = RiccatiBundle::solve(&cfg.params, &grid).map_err(wrap)?;
    let maps = build_maps(&bundle).map_err(wrap)?;
    let ctx = RunContext { cfg, grid, bundle, maps };
    let samples = mode.run(&ctx).map_err(wrap)?;
    assemble(cfg, &grid, &samples).map_err(wrap)
}

fn assemble(cfg: &ScenarioConfig, grid: &TimeGrid, samples: &[Sample]) -> Result<PipelineOutput> {
    let r = cfg.replicates;
    let chunks: Vec<&[Sample]> = samples.chunks(r).collect();
    let group = |pick: fn(&Sample) -> &Series| -> Result<Vec<(f64, Series)>> {
        chunks
            .iter()
            .map(|c| {
                let refs: Vec<&Sample> = c.iter().collect();
                Ok((c[0].k, average(&refs, pick)?))
            })
            .collect()
    };
    let predicted = group(|s| &s.predicted)?;
    let actual = group(|s| &s.actual)?;
    let deviations = group(|s| &s.deviations)?;
    let mut tables = vec![
        series_table("mf_predicted", grid, &predicted),
        series_table("mf_actual", grid, &actual),
        series_table("deviations", grid, &deviations),
    ];
    let mut distinct = cfg.k_sweep.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() >= 2 {
        tables.push(linearity_table(cfg, &deviations)?);
    }
    if let Some(t) = report_table(samples) {
        tables.push(t);
    }
    Ok(PipelineOutput { tables, summary: samples.iter().map(|s| s.summary.clone()).collect() })
}

/// Runs the scenario and writes every output into `cfg.output_dir`, the
/// manifest last.
pub fn run_scenario(cfg: &ScenarioConfig) -> std::result::Result<RunManifest, RunError> {
    let out = run_pipeline(cfg)?;
    let grid = cfg.grid();
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        mode: cfg.mode.clone(),
        seed: cfg.seed,
        replicates: cfg.replicates,
        n_agents: cfg.n_agents,
        grid: GridInfo { t_start: grid.t_start(), t_end: grid.t_end(), steps: grid.steps() },
        library: "mfg-core".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        files: Vec::new(),
        summary: out.summary,
    };
    let plot = output::plot_script(&out.tables, &cfg.k_sweep);
    output::write_outputs(&cfg.output_dir, &out.tables, &plot, manifest)
        .map_err(|source| RunError::Io { path: cfg.output_dir.clone(), source })
}
