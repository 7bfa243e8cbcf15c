//! Scenario documents: strict JSON in, a fully typed [`ScenarioConfig`] out.

use std::fmt;
use std::path::{Path, PathBuf};

use mfg_core::correction::{ObservableMode, DEFAULT_SAMPLES, SV_TOL};
use mfg_core::population::{gaussian_factor, Scheme};
use mfg_core::realtime::{policy_registry, PolicyParams};
use mfg_core::{Error as CoreError, SystemParams, TimeGrid};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::modes::mode_registry;

pub const DEFAULT_STEPS: usize = 2000;
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_AGENTS: usize = 800;

/// One rejected field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub reason: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.reason)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

impl ConfigError {
    pub fn fields(&self) -> &[FieldError] {
        match self {
            ConfigError::Invalid(v) => v,
            ConfigError::Io { .. } => &[],
        }
    }
}

type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    params: Value,
    steps: Option<usize>,
    #[serde(rename = "N")]
    n_agents: Option<usize>,
    seed: Option<u64>,
    replicates: Option<usize>,
    mode: String,
    scheme: Option<String>,
    initial: Option<RawInitial>,
    error_model: Option<RawErrorModel>,
    t0: Option<f64>,
    k_sweep: Option<Vec<f64>>,
    linearity_times: Option<Vec<f64>>,
    output_dir: Option<PathBuf>,
    correction: Option<RawCorrection>,
    realtime: Option<RawRealtime>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    mean: Option<Vec<f64>>,
    cov: Option<Matrix>,
    center: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawErrorModel {
    #[serde(rename = "E_bar")]
    e_bar: Option<Vec<f64>>,
    #[serde(rename = "E_cov")]
    e_cov: Option<Matrix>,
    per_agent_override: Option<Vec<RawOverride>>,
    center: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOverride {
    agent: usize,
    #[serde(rename = "E")]
    e: Vec<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCorrection {
    samples: Option<usize>,
    observable: Option<String>,
    sv_tol: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRealtime {
    policy: Option<String>,
    lambda: Option<f64>,
    tau: Option<f64>,
    window: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    base: Option<String>,
    #[serde(rename = "A")]
    a: Option<Matrix>,
    #[serde(rename = "B")]
    b: Option<Matrix>,
    #[serde(rename = "C")]
    c: Option<Matrix>,
    #[serde(rename = "F")]
    f: Option<Matrix>,
    #[serde(rename = "D")]
    d: Option<Matrix>,
    #[serde(rename = "Q_I")]
    q_i: Option<Matrix>,
    #[serde(rename = "Q")]
    q: Option<Matrix>,
    #[serde(rename = "Q_I_bar")]
    q_i_bar: Option<Matrix>,
    #[serde(rename = "Q_bar")]
    q_bar: Option<Matrix>,
    #[serde(rename = "R")]
    r: Option<Matrix>,
    #[serde(rename = "Gamma")]
    gamma: Option<Matrix>,
    #[serde(rename = "Gamma_bar")]
    gamma_bar: Option<Matrix>,
    eta: Option<Vec<f64>>,
    eta_bar: Option<Vec<f64>>,
    s: Option<Vec<f64>>,
    s_bar: Option<Vec<f64>>,
    #[serde(rename = "T")]
    horizon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionSettings {
    pub samples: usize,
    pub observable: ObservableMode,
    pub sv_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealtimeSettings {
    pub policy: String,
    pub params: PolicyParams,
}

/// A validated scenario with every default applied.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub params: SystemParams,
    pub steps: usize,
    pub n_agents: usize,
    pub seed: u64,
    /// Independent runs per sweep value, seeded `seed, seed + 1, …`.
    pub replicates: usize,
    pub mode: String,
    pub scheme: Scheme,
    pub initial_mean: DVector<f64>,
    pub initial_cov: DMatrix<f64>,
    /// Shift the sampled initial states so their mean is exactly `initial_mean`.
    pub center_initial: bool,
    pub error_mean: DVector<f64>,
    pub error_cov: DMatrix<f64>,
    /// Shift the sampled errors so their mean is exactly `k·E_bar`.
    pub center_errors: bool,
    /// Fixed errors for single agents, applied after sampling and centering.
    pub overrides: Vec<(usize, DVector<f64>)>,
    pub t0: Option<f64>,
    pub k_sweep: Vec<f64>,
    pub linearity_times: Vec<f64>,
    pub output_dir: PathBuf,
    pub correction: CorrectionSettings,
    pub realtime: RealtimeSettings,
}

/// Command-line overrides applied before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

fn preset(name: &str) -> Option<SystemParams> {
    match name {
        "P6" => Some(SystemParams::p6()),
        "P6-decoupled" => Some(SystemParams::p6_decoupled()),
        "S1" => Some(SystemParams::s1()),
        _ => None,
    }
}

const PRESETS: &str = "P6, P6-decoupled, S1";

fn matrix(path: &str, rows: &Matrix, errors: &mut Vec<FieldError>) -> Option<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        errors.push(FieldError { path: path.into(), reason: "matrix must be non-empty".into() });
        return None;
    }
    if rows.iter().any(|r| r.len() != ncols) {
        errors.push(FieldError { path: path.into(), reason: "rows have different lengths".into() });
        return None;
    }
    Some(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn field_err(errors: &mut Vec<FieldError>, path: impl Into<String>, reason: impl Into<String>) {
    errors.push(FieldError { path: path.into(), reason: reason.into() });
}

fn parse_params(value: &Value, errors: &mut Vec<FieldError>) -> Option<SystemParams> {
    if let Value::String(name) = value {
        return preset(name).or_else(|| {
            field_err(errors, "params", format!("unknown preset '{name}' (known: {PRESETS})"));
            None
        });
    }
    let raw: RawParams = match serde_path_to_error::deserialize(value) {
        Ok(r) => r,
        Err(e) => {
            let inner = e.path().to_string();
            let path = if inner == "." { "params".to_string() } else { format!("params.{inner}") };
            field_err(errors, path, e.into_inner().to_string());
            return None;
        }
    };
    let base = match &raw.base {
        Some(name) => match preset(name) {
            Some(p) => Some(p),
            None => {
                field_err(errors, "params.base", format!("unknown preset '{name}' (known: {PRESETS})"));
                return None;
            }
        },
        None => None,
    };
    let before = errors.len();
    let m = |key: &str, v: &Option<Matrix>, fallback: Option<&DMatrix<f64>>, errors: &mut Vec<FieldError>| {
        let path = format!("params.{key}");
        match (v, fallback) {
            (Some(rows), _) => matrix(&path, rows, errors),
            (None, Some(b)) => Some(b.clone()),
            (None, None) => {
                field_err(errors, path, "missing (no base preset given)");
                None
            }
        }
    };
    let b = base.as_ref();
    let a = m("A", &raw.a, b.map(|p| &p.a), errors);
    let bm = m("B", &raw.b, b.map(|p| &p.b), errors);
    let c = m("C", &raw.c, b.map(|p| &p.c), errors);
    let f = m("F", &raw.f, b.map(|p| &p.f), errors);
    let d = m("D", &raw.d, b.map(|p| &p.d), errors);
    let q_i = m("Q_I", &raw.q_i, b.map(|p| &p.q_i), errors);
    let q = m("Q", &raw.q, b.map(|p| &p.q), errors);
    let q_i_bar = m("Q_I_bar", &raw.q_i_bar, b.map(|p| &p.q_i_bar), errors);
    let q_bar = m("Q_bar", &raw.q_bar, b.map(|p| &p.q_bar), errors);
    let r = m("R", &raw.r, b.map(|p| &p.r), errors);
    let gamma = m("Gamma", &raw.gamma, b.map(|p| &p.gamma), errors);
    let gamma_bar = m("Gamma_bar", &raw.gamma_bar, b.map(|p| &p.gamma_bar), errors);
    let v = |key: &str, v: &Option<Vec<f64>>, fallback: Option<&DVector<f64>>, errors: &mut Vec<FieldError>| match (v, fallback) {
        (Some(x), _) => Some(DVector::from_column_slice(x)),
        (None, Some(b)) => Some(b.clone()),
        (None, None) => {
            field_err(errors, format!("params.{key}"), "missing (no base preset given)");
            None
        }
    };
    let eta = v("eta", &raw.eta, b.map(|p| &p.eta), errors);
    let eta_bar = v("eta_bar", &raw.eta_bar, b.map(|p| &p.eta_bar), errors);
    let s = v("s", &raw.s, b.map(|p| &p.s), errors);
    let s_bar = v("s_bar", &raw.s_bar, b.map(|p| &p.s_bar), errors);
    let horizon = match (raw.horizon, b) {
        (Some(t), _) => Some(t),
        (None, Some(p)) => Some(p.horizon),
        (None, None) => {
            field_err(errors, "params.T", "missing (no base preset given)");
            None
        }
    };
    if let Some(t) = horizon {
        if !(t.is_finite() && t > 0.0) {
            field_err(errors, "params.T", format!("horizon must be positive, got {t}"));
        }
    }
    if errors.len() > before {
        return None;
    }
    Some(SystemParams {
        a: a?,
        b: bm?,
        c: c?,
        f: f?,
        d: d?,
        q_i: q_i?,
        q: q?,
        q_i_bar: q_i_bar?,
        q_bar: q_bar?,
        r: r?,
        gamma: gamma?,
        gamma_bar: gamma_bar?,
        eta: eta?,
        eta_bar: eta_bar?,
        s: s?,
        s_bar: s_bar?,
        horizon: horizon?,
    })
}

fn check_params(p: SystemParams, errors: &mut Vec<FieldError>) -> Option<SystemParams> {
    match p.validated() {
        Ok(p) => Some(p),
        Err(CoreError::NotPositiveDefinite { name, reason }) => {
            field_err(errors, format!("params.{name}"), format!("{name} is not positive definite ({reason})"));
            None
        }
        Err(e) => {
            field_err(errors, "params", e.to_string());
            None
        }
    }
}

fn covariance(path: &str, rows: Option<&Matrix>, default: DMatrix<f64>, errors: &mut Vec<FieldError>) -> DMatrix<f64> {
    let Some(rows) = rows else { return default };
    let Some(m) = matrix(path, rows, errors) else { return default };
    if m.shape() != default.shape() {
        field_err(errors, path, format!("expected {}x{}, got {}x{}", default.nrows(), default.ncols(), m.nrows(), m.ncols()));
        return default;
    }
    if let Err(e) = gaussian_factor(path, &m) {
        field_err(errors, path, e.to_string());
    }
    m
}

fn vector(path: &str, v: Option<&Vec<f64>>, default: DVector<f64>, errors: &mut Vec<FieldError>) -> DVector<f64> {
    let Some(v) = v else { return default };
    if v.len() != default.len() {
        field_err(errors, path, format!("expected length {}, got {}", default.len(), v.len()));
        return default;
    }
    if v.iter().any(|x| !x.is_finite()) {
        field_err(errors, path, "entries must be finite");
    }
    DVector::from_column_slice(v)
}

fn parse_scheme(s: &str) -> Option<Scheme> {
    match s {
        "auto" => Some(Scheme::Auto),
        "euler-maruyama" => Some(Scheme::EulerMaruyama),
        "rk4" => Some(Scheme::Rk4),
        _ => None,
    }
}

fn scheme_name(s: Scheme) -> &'static str {
    match s {
        Scheme::Auto => "auto",
        Scheme::EulerMaruyama => "euler-maruyama",
        Scheme::Rk4 => "rk4",
    }
}

fn observable_name(m: ObservableMode) -> &'static str {
    match m {
        ObservableMode::ExactDrift => "exact-drift",
        ObservableMode::FiniteDifference => "finite-difference",
    }
}

/// Parses and validates a scenario document.
pub fn parse_config(text: &str, overrides: &Overrides) -> Result<ScenarioConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "<document>".to_string() } else { path };
        ConfigError::Invalid(vec![FieldError { path, reason: e.into_inner().to_string() }])
    })?;
    let mut errors = Vec::new();
    let params = parse_params(&raw.params, &mut errors).and_then(|p| check_params(p, &mut errors));
    let n = params.as_ref().map_or(2, SystemParams::n);

    let steps = overrides.steps.or(raw.steps).unwrap_or(DEFAULT_STEPS);
    if steps == 0 {
        field_err(&mut errors, "steps", "must be at least 1");
    }
    let n_agents = raw.n_agents.unwrap_or(DEFAULT_AGENTS);
    if n_agents == 0 {
        field_err(&mut errors, "N", "must be at least 1");
    }
    let replicates = raw.replicates.unwrap_or(1);
    if replicates == 0 {
        field_err(&mut errors, "replicates", "must be at least 1");
    }
    let scheme = match raw.scheme.as_deref() {
        None => Scheme::Auto,
        Some(s) => parse_scheme(s).unwrap_or_else(|| {
            field_err(&mut errors, "scheme", format!("unknown scheme '{s}' (known: auto, euler-maruyama, rk4)"));
            Scheme::Auto
        }),
    };

    let initial = raw.initial.unwrap_or_default();
    let initial_mean = vector("initial.mean", initial.mean.as_ref(), DVector::from_vec(default_mean(n)), &mut errors);
    let initial_cov = covariance("initial.cov", initial.cov.as_ref(), DMatrix::identity(n, n) * 0.003, &mut errors);
    let em = raw.error_model.unwrap_or_default();
    let error_mean = vector("error_model.E_bar", em.e_bar.as_ref(), DVector::zeros(n), &mut errors);
    let error_cov = covariance("error_model.E_cov", em.e_cov.as_ref(), DMatrix::identity(n, n) * 0.1, &mut errors);
    let mut overrides_e = Vec::new();
    for (j, o) in em.per_agent_override.unwrap_or_default().iter().enumerate() {
        let path = format!("error_model.per_agent_override[{j}]");
        if o.agent >= n_agents {
            field_err(&mut errors, format!("{path}.agent"), format!("agent {} outside 0..{n_agents}", o.agent));
        }
        let e = vector(&format!("{path}.E"), Some(&o.e), DVector::zeros(n), &mut errors);
        overrides_e.push((o.agent, e));
    }

    let k_sweep = raw.k_sweep.unwrap_or_else(|| vec![1.0]);
    if k_sweep.is_empty() {
        field_err(&mut errors, "k_sweep", "must not be empty");
    }
    if k_sweep.iter().any(|k| !k.is_finite()) {
        field_err(&mut errors, "k_sweep", "entries must be finite");
    }

    let horizon = params.as_ref().map_or(f64::INFINITY, |p| p.horizon);
    let grid = params.as_ref().and_then(|p| TimeGrid::new(0.0, p.horizon, steps.max(1)).ok());
    let linearity_times = raw
        .linearity_times
        .unwrap_or_else(|| [0.25, 1.0, 1.75].into_iter().filter(|t| *t <= horizon).collect());
    if linearity_times.iter().any(|t| !(0.0..=horizon).contains(t)) {
        field_err(&mut errors, "linearity_times", format!("times must lie in [0, {horizon}]"));
    }

    let mode = raw.mode.clone();
    if !mode_registry().contains(&mode) {
        field_err(&mut errors, "mode", format!("unknown mode '{mode}' (known: {})", mode_registry().names().join(", ")));
    }
    if let Some(t0) = raw.t0 {
        match grid {
            Some(g) if !(t0 > 0.0 && t0 < horizon) => {
                field_err(&mut errors, "t0", format!("must lie strictly inside (0, {})", g.t_end()));
            }
            Some(g) if g.index_of(t0).is_none() => {
                field_err(&mut errors, "t0", format!("{t0} is not a node of the {steps}-step grid"));
            }
            _ => {}
        }
    } else if matches!(mode.as_str(), "correct") {
        field_err(&mut errors, "t0", format!("required for mode '{mode}'"));
    }

    let rc = raw.correction.unwrap_or_default();
    let samples = rc.samples.unwrap_or(DEFAULT_SAMPLES);
    if samples == 0 {
        field_err(&mut errors, "correction.samples", "must be at least 1");
    }
    let observable = match rc.observable.as_deref() {
        None => ObservableMode::default(),
        Some("finite-difference") => ObservableMode::FiniteDifference,
        Some("exact-drift") => ObservableMode::ExactDrift,
        Some(o) => {
            field_err(&mut errors, "correction.observable", format!("unknown observable '{o}' (known: exact-drift, finite-difference)"));
            ObservableMode::default()
        }
    };
    let sv_tol = rc.sv_tol.unwrap_or(SV_TOL);
    if !(sv_tol > 0.0 && sv_tol < 1.0) {
        field_err(&mut errors, "correction.sv_tol", "must lie in (0, 1)");
    }

    let rr = raw.realtime.unwrap_or_default();
    let defaults = PolicyParams::default();
    let policy_params = PolicyParams {
        lambda: rr.lambda.unwrap_or(defaults.lambda),
        tau: rr.tau.unwrap_or(defaults.tau),
        window: rr.window.unwrap_or(defaults.window),
    };
    let policy = rr.policy.unwrap_or_else(|| "hold-initial-error".into());
    if let Err(e) = policy_registry().create(&policy, &policy_params) {
        field_err(&mut errors, "realtime", e.to_string());
    }

    if !errors.is_empty() {
        return Err(ConfigError::Invalid(errors));
    }
    let cfg = ScenarioConfig {
        params: params.expect("validated"),
        steps,
        n_agents,
        seed: overrides.seed.or(raw.seed).unwrap_or(DEFAULT_SEED),
        replicates,
        mode,
        scheme,
        initial_mean,
        initial_cov,
        center_initial: initial.center.unwrap_or(false),
        error_mean,
        error_cov,
        center_errors: em.center.unwrap_or(true),
        overrides: overrides_e,
        t0: raw.t0,
        k_sweep,
        linearity_times,
        output_dir: overrides.output_dir.clone().or(raw.output_dir).unwrap_or_else(|| PathBuf::from("out")),
        correction: CorrectionSettings { samples, observable, sv_tol },
        realtime: RealtimeSettings { policy, params: policy_params },
    };
    let mut mode_errors = Vec::new();
    mode_registry().create(&cfg.mode, &()).expect("checked above").check(&cfg, &mut mode_errors);
    if !mode_errors.is_empty() {
        return Err(ConfigError::Invalid(mode_errors));
    }
    Ok(cfg)
}

fn default_mean(n: usize) -> Vec<f64> {
    if n == 2 {
        vec![0.3, 0.5]
    } else {
        vec![0.0; n]
    }
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    parse_config(&text, overrides)
}

fn mat_json(m: &DMatrix<f64>) -> Value {
    Value::Array(m.row_iter().map(|r| json!(r.iter().copied().collect::<Vec<_>>())).collect())
}

fn vec_json(v: &DVector<f64>) -> Value {
    json!(v.iter().copied().collect::<Vec<_>>())
}

impl ScenarioConfig {
    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(0.0, self.params.horizon, self.steps).expect("validated grid")
    }

    /// Every setting that influences the outputs, with defaults resolved.
    /// The output directory is left out.
    pub fn canonical(&self) -> Value {
        let p = &self.params;
        json!({
            "params": {
                "A": mat_json(&p.a), "B": mat_json(&p.b), "C": mat_json(&p.c), "F": mat_json(&p.f),
                "D": mat_json(&p.d), "Q_I": mat_json(&p.q_i), "Q": mat_json(&p.q),
                "Q_I_bar": mat_json(&p.q_i_bar), "Q_bar": mat_json(&p.q_bar), "R": mat_json(&p.r),
                "Gamma": mat_json(&p.gamma), "Gamma_bar": mat_json(&p.gamma_bar),
                "eta": vec_json(&p.eta), "eta_bar": vec_json(&p.eta_bar),
                "s": vec_json(&p.s), "s_bar": vec_json(&p.s_bar), "T": p.horizon,
            },
            "steps": self.steps,
            "N": self.n_agents,
            "seed": self.seed,
            "replicates": self.replicates,
            "mode": self.mode,
            "scheme": scheme_name(self.scheme),
            "initial": { "mean": vec_json(&self.initial_mean), "cov": mat_json(&self.initial_cov), "center": self.center_initial },
            "error_model": {
                "E_bar": vec_json(&self.error_mean),
                "E_cov": mat_json(&self.error_cov),
                "center": self.center_errors,
                "per_agent_override": self.overrides.iter().map(|(i, e)| json!({"agent": i, "E": vec_json(e)})).collect::<Vec<_>>(),
            },
            "t0": self.t0,
            "k_sweep": self.k_sweep,
            "linearity_times": self.linearity_times,
            "correction": {
                "samples": self.correction.samples,
                "observable": observable_name(self.correction.observable),
                "sv_tol": self.correction.sv_tol,
            },
            "realtime": {
                "policy": self.realtime.policy,
                "lambda": self.realtime.params.lambda,
                "tau": self.realtime.params.tau,
                "window": self.realtime.params.window,
            },
        })
    }

    /// SHA-256 of the canonical settings.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.canonical()).expect("serializable");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
