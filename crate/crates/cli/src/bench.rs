//! Wall-clock timing of the evolve pipeline (Riccati solves, maps and the
//! N-agent run) over a set of sizes.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::config::{parse_config, Overrides, ScenarioConfig};
use crate::modes::{run_pipeline, RunError};
use crate::output::{Cell, Table};

pub const MIN_REPS: usize = 5;
pub const DEFAULT_SIZES: [BenchCase; 4] = [
    BenchCase { n_agents: 200, steps: 2000 },
    BenchCase { n_agents: 400, steps: 2000 },
    BenchCase { n_agents: 800, steps: 2000 },
    BenchCase { n_agents: 800, steps: 1000 },
];
/// Allowed excess over linear scaling.
pub const SCALING_SLACK: f64 = 1.1;
pub const BUDGET_SECONDS: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchCase {
    pub n_agents: usize,
    pub steps: usize,
}

impl fmt::Display for BenchCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.n_agents, self.steps)
    }
}

impl FromStr for BenchCase {
    type Err = String;

    /// `NxSTEPS`, e.g. `800x2000`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (n, k) = s.split_once('x').ok_or_else(|| format!("expected NxSTEPS, got '{s}'"))?;
        let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|v| *v > 0);
        match (parse(n), parse(k)) {
            (Some(n_agents), Some(steps)) => Ok(BenchCase { n_agents, steps }),
            _ => Err(format!("expected positive NxSTEPS, got '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub case: BenchCase,
    pub reps: usize,
    pub median_s: f64,
    pub p95_s: f64,
    /// Agent-steps per second at the median.
    pub throughput: f64,
}

/// Stochastic P6 evolve scenario at the given size.
pub fn bench_config(case: BenchCase, seed: u64) -> ScenarioConfig {
    let text = format!(
        r#"{{"params": "P6", "mode": "evolve", "N": {}, "steps": {}, "seed": {seed},
            "error_model": {{"E_bar": [0.1, -0.1]}}}}"#,
        case.n_agents, case.steps
    );
    parse_config(&text, &Overrides::default()).expect("bench scenario is valid")
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// One warm-up run, then `reps` (at least [`MIN_REPS`]) timed runs.
pub fn bench_case(case: BenchCase, reps: usize, seed: u64) -> Result<BenchReport, RunError> {
    let reps = reps.max(MIN_REPS);
    let cfg = bench_config(case, seed);
    run_pipeline(&cfg)?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run_pipeline(&cfg)?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median_s = median(&times);
    Ok(BenchReport {
        case,
        reps,
        median_s,
        p95_s: percentile(&times, 0.95),
        throughput: (case.n_agents * case.steps) as f64 / median_s,
    })
}

pub fn bench_suite(cases: &[BenchCase], reps: usize, seed: u64) -> Result<Vec<BenchReport>, RunError> {
    cases.iter().map(|&c| bench_case(c, reps, seed)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingCheck {
    pub description: String,
    pub ratio: f64,
    pub limit: f64,
}

impl ScalingCheck {
    pub fn ok(&self) -> bool {
        self.ratio <= self.limit
    }
}

/// Time ratios between cases that differ in one size only, against linear
/// scaling with [`SCALING_SLACK`], plus the wall-clock budget at 800x2000.
pub fn scaling_checks(reports: &[BenchReport]) -> Vec<ScalingCheck> {
    let mut checks = Vec::new();
    for a in reports {
        for b in reports {
            let (ca, cb) = (a.case, b.case);
            let size_ratio = if ca.steps == cb.steps && cb.n_agents > ca.n_agents {
                cb.n_agents as f64 / ca.n_agents as f64
            } else if ca.n_agents == cb.n_agents && cb.steps > ca.steps {
                cb.steps as f64 / ca.steps as f64
            } else {
                continue;
            };
            checks.push(ScalingCheck {
                description: format!("time({cb}) / time({ca})"),
                ratio: b.median_s / a.median_s,
                limit: SCALING_SLACK * size_ratio,
            });
        }
    }
    for r in reports.iter().filter(|r| r.case == BenchCase { n_agents: 800, steps: 2000 }) {
        checks.push(ScalingCheck { description: format!("time({}) in seconds", r.case), ratio: r.median_s, limit: BUDGET_SECONDS });
    }
    checks
}

pub fn report_table(reports: &[BenchReport]) -> Table {
    let cols = ["case", "N", "steps", "reps", "median_s", "p95_s", "agent_steps_per_s"];
    let mut t = Table::new("bench", cols.iter().map(|c| c.to_string()).collect());
    for r in reports {
        t.push(vec![
            Cell::Text(r.case.to_string()),
            Cell::Int(r.case.n_agents as i64),
            Cell::Int(r.case.steps as i64),
            Cell::Int(r.reps as i64),
            Cell::Num(r.median_s),
            Cell::Num(r.p95_s),
            Cell::Num(r.throughput),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_cases() {
        assert_eq!("800x2000".parse::<BenchCase>().unwrap(), BenchCase { n_agents: 800, steps: 2000 });
        assert!("800".parse::<BenchCase>().is_err());
        assert!("0x10".parse::<BenchCase>().is_err());
    }

    #[test]
    fn order_statistics() {
        let v = [1.0, 2.0, 3.0, 4.0, 10.0];
        assert_eq!(median(&v), 3.0);
        assert_eq!(percentile(&v, 0.95), 10.0);
        assert_eq!(median(&[1.0, 3.0]), 2.0);
    }

    #[test]
    fn checks_pair_cases_differing_in_one_size() {
        let r = |n, steps, t| BenchReport { case: BenchCase { n_agents: n, steps }, reps: 5, median_s: t, p95_s: t, throughput: 0.0 };
        let checks = scaling_checks(&[r(200, 100, 1.0), r(400, 100, 2.5), r(400, 200, 4.0)]);
        assert_eq!(checks.len(), 2);
        assert!(!checks[0].ok() && (checks[0].limit - 2.2).abs() < 1e-12);
        assert!(checks[1].ok());
    }

    #[test]
    fn small_case_runs_at_least_five_reps() {
        let r = bench_case(BenchCase { n_agents: 10, steps: 50 }, 1, 1).unwrap();
        assert_eq!(r.reps, MIN_REPS);
        assert!(r.median_s > 0.0 && r.p95_s >= r.median_s);
        assert_eq!(report_table(&[r]).rows.len(), 1);
    }
}
