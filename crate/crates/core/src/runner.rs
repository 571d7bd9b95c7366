//! Scenario files and the experiment runner behind the `stackelberg` binary.
//!
//! A scenario is a TOML document (`key = value` lines under `[section]`
//! headers). Unknown keys are rejected. Every experiment writes `report.txt`
//! plus columnar data files with `#` headers into
//! `<output root>/<output>`, where the output root comes from
//! [`OUTPUT_ROOT_ENV`] unless overridden.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::boundary::{solve_boundary_follower_cg, solve_boundary_leader, solve_boundary_optimality, write_u_hat, BoundaryFollowerProblem};
use crate::coupled::{CoupledSystem, FollowerAction, FollowerControl, PicardOptions};
use crate::error::{Error, Result};
use crate::follower::{solve_follower_cg, solve_optimality_system, FollowerProblem};
use crate::grid::{interior_norm, Grid, Interval, RegionMask, RegionName, Side, SpaceTimeField, TimeGrid};
use crate::kernel::{admissibility_constant, assemble, read_tabulated, KernelSpec};
use crate::leader::{epsilon_sweep, reduce_to_null, LeaderProblem};
use crate::parabolic::{BoundaryData, ParabolicOperator};
use crate::semilinear::{solve_semilinear_stackelberg, Nonlinearity, NonlinearityKind, Placement, SemilinearProblem};
use crate::weights::{build_eta0, check_prop_exp, probe_observability, random_terminal_data, CarlemanWeights};

/// Environment variable naming the directory that receives scenario outputs.
pub const OUTPUT_ROOT_ENV: &str = "STACKELBERG_OUTPUT_ROOT";
/// Output root used when [`OUTPUT_ROOT_ENV`] is unset.
pub const DEFAULT_OUTPUT_ROOT: &str = "stackelberg-output";
/// Default epsilon list for sweeps.
pub const DEFAULT_EPS_LIST: [f64; 5] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];

const SLOPE_BAND: (f64, f64) = (0.4, 0.6);
const CONTROL_RATIO_TOL: f64 = 10.0;
const DUALITY_TOL: f64 = 1e-8;
const CHARACTERIZATION_TOL: f64 = 1e-7;
const PROBE_GROWTH_TOL: f64 = 3.0;
const SEMILINEAR_TERMINAL_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    FollowerDemo,
    LeaderSweep,
    Semilinear,
    Boundary,
    Probe,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::FollowerDemo => "follower_demo",
            ExperimentKind::LeaderSweep => "leader_sweep",
            ExperimentKind::Semilinear => "semilinear",
            ExperimentKind::Boundary => "boundary",
            ExperimentKind::Probe => "probe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Interior nodes.
    pub n: usize,
    pub n_steps: usize,
    #[serde(default = "one")]
    pub length: f64,
    #[serde(default = "one")]
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionsConfig {
    /// Leader region.
    pub omega: [f64; 2],
    /// Inner region for the weight `eta0`; defaults to the middle half of omega.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_prime: Option<[f64; 2]>,
    /// Distributed follower region `O`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<[f64; 2]>,
    /// Tracking region `O_d`.
    pub target: [f64; 2],
    /// Endpoint acted on by a boundary follower.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_side: Option<Side>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Parameters {
    pub mu: f64,
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_list: Option<Vec<f64>>,
    pub s: f64,
    pub lambda: f64,
    /// Boundary profile value `1_Gamma`.
    pub gamma: f64,
    /// Relative tolerance of the conjugate gradient solvers.
    pub tol: f64,
    pub max_iter: usize,
    /// Iteration cap of the coupled Picard loops.
    pub picard_max_iter: usize,
    /// Outer fixed-point tolerance and cap for semilinear runs.
    pub outer_tol: f64,
    pub max_outer: usize,
    /// Random terminal data for observability probes.
    pub samples: usize,
    pub modes: usize,
}

impl Default for Parameters {
    fn default() -> Self {
        Self {
            mu: 1e2,
            epsilon: 1e-4,
            eps_list: None,
            s: 2.0,
            lambda: 1.0,
            gamma: 1.0,
            tol: 1e-8,
            max_iter: 5000,
            picard_max_iter: 200,
            outer_tol: 1e-8,
            max_outer: 50,
            samples: 50,
            modes: 8,
        }
    }
}

impl Parameters {
    pub fn eps_list(&self) -> Vec<f64> {
        self.eps_list.clone().unwrap_or_else(|| DEFAULT_EPS_LIST.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    #[default]
    Zero,
    /// `c sin(pi x/L) sin(pi s/L)`.
    Eigen { c: f64 },
    /// `amplitude exp(-(x-s)^2/width^2) exp(-decay/l(t)^4)`.
    GaussianDecay { amplitude: f64, width: f64, decay: f64 },
    /// `amplitude exp(-(x-s)^2/width^2)`, constant in time.
    Gaussian { amplitude: f64, width: f64 },
    /// Tabulated `k i j value` file.
    File { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearityConfig {
    /// `zero`, `linear`, `scaled_tanh` or `smoothed_clip`.
    #[serde(default = "zero_name")]
    pub name: String,
    /// Amplitude (the slope for `linear`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    /// Transition width of `smoothed_clip`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    /// `reaction` or `kernel`; defaults by follower action.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
}

impl Default for NonlinearityConfig {
    fn default() -> Self {
        Self {
            name: zero_name(),
            amplitude: None,
            width: None,
            placement: None,
        }
    }
}

impl NonlinearityConfig {
    pub fn build(&self) -> Result<Nonlinearity> {
        let amp = || {
            self.amplitude
                .ok_or_else(|| Error::Config(format!("nonlinearity `{}` needs an amplitude", self.name)))
        };
        let kind = match self.name.as_str() {
            "zero" => NonlinearityKind::Zero,
            "linear" => NonlinearityKind::Linear { slope: amp()? },
            "scaled_tanh" => NonlinearityKind::ScaledTanh { amplitude: amp()? },
            "smoothed_clip" => NonlinearityKind::SmoothedClip {
                amplitude: amp()?,
                width: self.width.unwrap_or(1.0),
            },
            other => return Err(Error::Config(format!("unknown nonlinearity `{other}`"))),
        };
        let g = Nonlinearity::new(kind)?;
        g.check_bound()?;
        Ok(g)
    }
}

/// Spatial data generators. Endpoint values are forced to zero.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    #[default]
    Zero,
    /// `amplitude sin(k pi x / L)`.
    Eigenmode {
        k: u32,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// `amplitude exp(-((x - center)/width)^2)`.
    GaussianBump {
        center: f64,
        width: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// Node values, one per line (last column used), `#` comments allowed.
    File { path: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Initial state `y0`.
    pub initial: DataSpec,
    /// Tracking target `y_d` (constant in time).
    pub target: DataSpec,
    /// Initial value of the uncontrolled trajectory to steer towards.
    pub trajectory: DataSpec,
    /// Fixed leader profile (constant in time) for follower demos.
    pub leader: DataSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// Output directory below the output root; defaults to the kind name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    pub grid: GridConfig,
    pub regions: RegionsConfig,
    #[serde(default)]
    pub parameters: Parameters,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub nonlinearity: NonlinearityConfig,
    #[serde(default)]
    pub data: DataConfig,
    /// Directory against which relative data and kernel paths are resolved.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

fn zero_name() -> String {
    "zero".into()
}

/// Reads and validates a scenario file.
pub fn parse_config(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = parse_config_str(&text)?;
    cfg.base_dir = path.parent().map(Path::to_path_buf);
    Ok(cfg)
}

/// Parses and validates scenario text.
pub fn parse_config_str(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical text of a configuration; reparsing it gives the same value.
pub fn emit_config(cfg: &ScenarioConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

fn interval(name: &str, v: [f64; 2], length: f64) -> Result<Interval> {
    let [a, b] = v;
    if !(a.is_finite() && b.is_finite() && 0.0 < a && a < b && b < length) {
        return Err(Error::InvalidRegion {
            name: name.into(),
            reason: format!("({a}, {b}) must satisfy 0 < a < b < {length}"),
        });
    }
    Ok(Interval::new(a, b))
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl ScenarioConfig {
    pub fn output_name(&self) -> String {
        self.output.clone().unwrap_or_else(|| self.kind.name().into())
    }

    pub fn is_boundary(&self) -> bool {
        self.regions.gamma_side.is_some()
    }

    pub fn omega_prime(&self) -> Interval {
        match self.regions.omega_prime {
            Some([a, b]) => Interval::new(a, b),
            None => {
                let [a, b] = self.regions.omega;
                let q = 0.25 * (b - a);
                Interval::new(a + q, b - q)
            }
        }
    }

    /// Checks ranges, region geometry and the controllability hypotheses.
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        positive("grid.length", g.length)?;
        positive("grid.horizon", g.horizon)?;
        if g.n < 2 || g.n_steps < 2 {
            return Err(Error::Config("grid.n and grid.n_steps must be at least 2".into()));
        }
        let len = g.length;
        let r = &self.regions;
        let omega = interval("omega", r.omega, len)?;
        let target = interval("O_d", r.target, len)?;
        let op = self.omega_prime();
        interval("omega_prime", [op.a, op.b], len)?;
        if !(omega.a <= op.a && op.b <= omega.b) {
            return Err(Error::InvalidRegion {
                name: "omega_prime".into(),
                reason: format!("({}, {}) is not contained in omega ({}, {})", op.a, op.b, omega.a, omega.b),
            });
        }
        match (r.observation, r.gamma_side) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "give either regions.observation (distributed follower) or regions.gamma_side (boundary follower), not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "missing follower: set regions.observation or regions.gamma_side".into(),
                ))
            }
            (Some(o), None) => {
                let o = interval("O", o, len)?;
                if omega.overlaps(&o) {
                    return Err(Error::Hypothesis(format!(
                        "the leader region omega ({}, {}) and the follower region O ({}, {}) must be disjoint",
                        omega.a, omega.b, o.a, o.b
                    )));
                }
            }
            (None, Some(_)) => {}
        }
        if !omega.overlaps(&target) {
            return Err(Error::Hypothesis(format!(
                "the controllability theorem assumes O_d ∩ omega ≠ ∅, but omega ({}, {}) and O_d ({}, {}) are disjoint",
                omega.a, omega.b, target.a, target.b
            )));
        }
        if self.kind == ExperimentKind::Boundary && !self.is_boundary() {
            return Err(Error::Config("kind = \"boundary\" needs regions.gamma_side".into()));
        }
        let p = &self.parameters;
        for (name, v) in [
            ("parameters.mu", p.mu),
            ("parameters.epsilon", p.epsilon),
            ("parameters.s", p.s),
            ("parameters.lambda", p.lambda),
            ("parameters.gamma", p.gamma),
            ("parameters.tol", p.tol),
            ("parameters.outer_tol", p.outer_tol),
        ] {
            positive(name, v)?;
        }
        if p.max_iter == 0 || p.picard_max_iter == 0 || p.max_outer == 0 || p.modes == 0 {
            return Err(Error::Config("iteration caps and parameters.modes must be positive".into()));
        }
        if self.kind == ExperimentKind::Probe && p.samples == 0 {
            return Err(Error::Config("parameters.samples must be positive".into()));
        }
        let eps = p.eps_list();
        if eps.len() < 4 || eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) || eps.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Config(
                "parameters.eps_list needs at least 4 positive, strictly decreasing values".into(),
            ));
        }
        self.nonlinearity.build()?;
        match &self.kernel {
            KernelConfig::Eigen { c } if !c.is_finite() => return Err(Error::Config("kernel.c must be finite".into())),
            KernelConfig::GaussianDecay { width, decay, .. } => {
                positive("kernel.width", *width)?;
                if !(*decay >= 0.0) {
                    return Err(Error::Config("kernel.decay must be nonnegative".into()));
                }
            }
            KernelConfig::Gaussian { width, .. } => positive("kernel.width", *width)?,
            _ => {}
        }
        for (name, d) in [
            ("data.initial", &self.data.initial),
            ("data.target", &self.data.target),
            ("data.trajectory", &self.data.trajectory),
            ("data.leader", &self.data.leader),
        ] {
            if let DataSpec::GaussianBump { width, .. } = d {
                positive(&format!("{name}.width"), *width)?;
            }
        }
        Ok(())
    }

    fn resolve(&self, path: &str) -> PathBuf {
        match &self.base_dir {
            Some(dir) => dir.join(path),
            None => PathBuf::from(path),
        }
    }

    fn kernel_spec(&self, grid: &Grid, tgrid: &TimeGrid) -> Result<KernelSpec> {
        Ok(match &self.kernel {
            KernelConfig::Zero => KernelSpec::Zero,
            KernelConfig::Eigen { c } => KernelSpec::eigen(*c),
            KernelConfig::GaussianDecay { amplitude, width, decay } => KernelSpec::GaussianDecay {
                amplitude: *amplitude,
                width: *width,
                decay: *decay,
            },
            KernelConfig::Gaussian { amplitude, width } => KernelSpec::GaussianDecay {
                amplitude: *amplitude,
                width: *width,
                decay: 0.0,
            },
            KernelConfig::File { path } => read_tabulated(&self.resolve(path), grid, tgrid)?,
        })
    }

    fn profile(&self, spec: &DataSpec, grid: &Grid) -> Result<Vec<f64>> {
        let len = grid.length();
        let mut v = match spec {
            DataSpec::Zero => vec![0.0; grid.n_nodes()],
            DataSpec::Eigenmode { k, amplitude } => {
                grid.sample(|x| amplitude * (*k as f64 * std::f64::consts::PI * x / len).sin())
            }
            DataSpec::GaussianBump { center, width, amplitude } => {
                grid.sample(|x| amplitude * (-((x - center) / width).powi(2)).exp())
            }
            DataSpec::File { path } => read_profile(&self.resolve(path), grid.n_nodes())?,
        };
        let last = v.len() - 1;
        v[0] = 0.0;
        v[last] = 0.0;
        Ok(v)
    }
}

fn read_profile(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let last = line.split_whitespace().last().unwrap_or_default();
        let v: f64 = last.parse().map_err(|_| {
            Error::Config(format!("{}:{}: malformed number `{last}`", path.display(), lineno + 1))
        })?;
        out.push(v);
    }
    if out.len() != expected {
        return Err(Error::Config(format!(
            "{} holds {} values, the grid has {expected} nodes",
            path.display(),
            out.len()
        )));
    }
    Ok(out)
}

/// Grids, operators and data assembled from a configuration.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub grid: Grid,
    pub tgrid: TimeGrid,
    pub kernel: KernelSpec,
    pub system: CoupledSystem,
    pub weights: CarlemanWeights,
    pub y0: Vec<f64>,
    pub ybar0: Vec<f64>,
    pub yd: SpaceTimeField,
    pub leader: SpaceTimeField,
}

impl Scenario {
    pub fn build(cfg: &ScenarioConfig) -> Result<Self> {
        let grid = Grid::new(cfg.grid.length, cfg.grid.n)?;
        let tgrid = TimeGrid::new(cfg.grid.horizon, cfg.grid.n_steps)?;
        Self::build_on(cfg, grid, tgrid)
    }

    /// Same scenario on explicit grids (used for refinement checks).
    pub fn build_on(cfg: &ScenarioConfig, grid: Grid, tgrid: TimeGrid) -> Result<Self> {
        let r = &cfg.regions;
        let p = &cfg.parameters;
        let kernel = cfg.kernel_spec(&grid, &tgrid)?;
        let op = Arc::new(ParabolicOperator::new(&grid, &tgrid, Arc::new(assemble(&kernel, &grid, &tgrid)?))?);
        let omega = RegionMask::interval(RegionName::Omega, &grid, r.omega[0], r.omega[1])?;
        let target = RegionMask::interval(RegionName::Target, &grid, r.target[0], r.target[1])?;
        let action = match (r.observation, r.gamma_side) {
            (Some([a, b]), _) => FollowerAction::Distributed(RegionMask::interval(RegionName::Observation, &grid, a, b)?),
            (None, Some(side)) => {
                RegionMask::boundary(&grid, side, p.gamma)?;
                FollowerAction::Boundary { side, gamma: p.gamma }
            }
            (None, None) => return Err(Error::Config("missing follower region".into())),
        };
        let system = CoupledSystem {
            omega,
            target,
            action,
            mu: p.mu,
            state_op: op.clone(),
            adjoint_op: op,
            picard: PicardOptions {
                tol: PicardOptions::default().tol,
                max_iter: p.picard_max_iter,
            },
        };
        let weights = CarlemanWeights::new(build_eta0(&grid, cfg.omega_prime())?, p.s, p.lambda, tgrid.horizon())?;
        let y0 = cfg.profile(&cfg.data.initial, &grid)?;
        let ybar0 = cfg.profile(&cfg.data.trajectory, &grid)?;
        let yd = SpaceTimeField::constant_in_time(&tgrid, &cfg.profile(&cfg.data.target, &grid)?);
        let leader = SpaceTimeField::constant_in_time(&tgrid, &cfg.profile(&cfg.data.leader, &grid)?);
        Ok(Self {
            grid,
            tgrid,
            kernel,
            system,
            weights,
            y0,
            ybar0,
            yd,
            leader,
        })
    }
}

/// Whether the experiment finished.
#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Success,
    /// An iteration failed to converge; the message carries the diagnostic.
    NonConvergence(String),
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub out_dir: PathBuf,
    /// Lines of `report.txt`.
    pub report: Vec<String>,
    /// Every file written, `report.txt` last.
    pub files: Vec<PathBuf>,
}

impl RunOutcome {
    /// 0 on success, 2 on non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self.status {
            RunStatus::Success => 0,
            RunStatus::NonConvergence(_) => 2,
        }
    }
}

/// Output root: the environment variable when set, else the default.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

struct Artifacts {
    report: Vec<String>,
    data: Vec<(String, String)>,
    status: RunStatus,
}

impl Artifacts {
    fn new(cfg: &ScenarioConfig) -> Self {
        let g = &cfg.grid;
        let report = vec![
            format!("# stackelberg scenario report: {}", cfg.kind.name()),
            format!(
                "grid: n = {}, n_steps = {}, L = {}, T = {}",
                g.n, g.n_steps, g.length, g.horizon
            ),
            format!(
                "follower: {}, mu = {:e}",
                match cfg.regions.gamma_side {
                    Some(Side::Left) => "boundary (left endpoint)",
                    Some(Side::Right) => "boundary (right endpoint)",
                    None => "distributed",
                },
                cfg.parameters.mu
            ),
            format!("seed: {}", cfg.seed),
        ];
        Self {
            report,
            data: Vec::new(),
            status: RunStatus::Success,
        }
    }

    fn line(&mut self, s: impl Into<String>) {
        self.report.push(s.into());
    }

    /// `check <name>: <value> (<relation> <tol>) PASS|FAIL`.
    fn check(&mut self, name: &str, value: f64, relation: &str, tol: f64, pass: bool) {
        self.report.push(format!(
            "check {name}: {value:.6e} ({relation} {tol:e}) {}",
            if pass { "PASS" } else { "FAIL" }
        ));
    }

    fn data(&mut self, file: &str, text: String) {
        self.data.push((file.into(), text));
    }

    fn fail(&mut self, diagnostic: String) {
        self.report.push(format!("non-convergence: {diagnostic}"));
        if self.status == RunStatus::Success {
            self.status = RunStatus::NonConvergence(diagnostic);
        }
    }
}

fn is_convergence_error(e: &Error) -> bool {
    matches!(
        e,
        Error::NonContraction { .. } | Error::NewtonFailure { .. } | Error::NonFinite { .. }
    )
}

fn text(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<String> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))
}

fn terminal_table(grid: &Grid, z: &SpaceTimeField) -> String {
    let mut s = String::from("# x z_T\n");
    let zt = z.row(z.n_times() - 1);
    for (i, x) in grid.nodes().iter().enumerate() {
        let _ = writeln!(s, "{x:.6e} {:.12e}", zt[i]);
    }
    s
}

/// Runs the configured experiment, writing artifacts below `root`.
pub fn run_scenario(cfg: &ScenarioConfig, root: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let sc = Scenario::build(cfg)?;
    let mut art = Artifacts::new(cfg);
    let result = match cfg.kind {
        ExperimentKind::FollowerDemo => follower_demo(cfg, &sc, &mut art),
        ExperimentKind::LeaderSweep => leader_sweep(cfg, &sc, &mut art),
        ExperimentKind::Semilinear => semilinear(cfg, &sc, &mut art),
        ExperimentKind::Boundary => boundary(cfg, &sc, &mut art),
        ExperimentKind::Probe => probe(cfg, &sc, &mut art),
    };
    match result {
        Ok(()) => {}
        Err(e) if is_convergence_error(&e) => art.fail(e.to_string()),
        Err(e) => return Err(e),
    }
    art.line(match &art.status {
        RunStatus::Success => "status: converged".to_string(),
        RunStatus::NonConvergence(_) => "status: non-convergence".to_string(),
    });
    let out_dir = root.join(cfg.output_name());
    fs::create_dir_all(&out_dir)?;
    let mut files = Vec::new();
    for (name, body) in &art.data {
        let path = out_dir.join(name);
        fs::write(&path, body)?;
        files.push(path);
    }
    let report_path = out_dir.join("report.txt");
    let mut f = fs::File::create(&report_path)?;
    for l in &art.report {
        writeln!(f, "{l}")?;
    }
    files.push(report_path);
    Ok(RunOutcome {
        status: art.status,
        out_dir,
        report: art.report,
        files,
    })
}

fn follower_demo(cfg: &ScenarioConfig, sc: &Scenario, art: &mut Artifacts) -> Result<()> {
    let p = &cfg.parameters;
    let sys = &sc.system;
    match sys.action {
        FollowerAction::Distributed(_) => {
            let problem = FollowerProblem::new(sys.clone(), sc.leader.clone(), sc.y0.clone(), sc.yd.clone())?;
            let sol = solve_follower_cg(&problem, p.tol, p.max_iter)?;
            let v_norm = sys.norm(&sol.v_hat);
            let rel = sol.residual / (1.0 + v_norm);
            art.line(format!("follower objective J: {:.12e}", sol.objective));
            art.line(format!("follower control norm: {v_norm:.12e}"));
            art.line(format!("cg iterations: {}", sol.iterations));
            art.check(
                "optimality residual |mu v + p|_O / (1 + |v|)",
                rel,
                "<=",
                CHARACTERIZATION_TOL,
                rel <= CHARACTERIZATION_TOL,
            );
            let mut table = String::from("# t x v_hat\n");
            let support = problem.observation().support();
            for k in 0..sc.tgrid.n_times() {
                for &i in &support {
                    let _ = writeln!(table, "{:.6e} {:.6e} {:.12e}", sc.tgrid.t(k), sc.grid.x(i), sol.v_hat.get(k, i));
                }
            }
            art.data("v_hat.dat", table);
            art.data("terminal.dat", terminal_table(&sc.grid, &sol.z));
            if !sol.converged {
                art.fail(format!("follower CG stopped after {} iterations", sol.iterations));
                return Ok(());
            }
            let st = solve_optimality_system(&problem, p.tol * 1e-2)?;
            let diff = sys.norm(&st.z.sub(&sol.z)) / (1.0 + sys.norm(&sol.z));
            art.line(format!(
                "picard iterations: {} (contraction {:.3e})",
                st.iterations, st.contraction
            ));
            art.check("picard vs cg state agreement", diff, "<=", 1e-6, diff <= 1e-6);
        }
        FollowerAction::Boundary { side, .. } => {
            let problem = BoundaryFollowerProblem::new(sys.clone(), sc.leader.clone(), sc.y0.clone(), sc.yd.clone())?;
            let sol = solve_boundary_follower_cg(&problem, p.tol, p.max_iter)?;
            art.line(format!("follower objective J: {:.12e}", sol.objective));
            art.line(format!("cg iterations: {}", sol.iterations));
            art.data(
                "u_hat.dat",
                text(|b| write_u_hat(&sc.tgrid, sc.grid.boundary_index(side), &sol.u_hat, b))?,
            );
            art.data("terminal.dat", terminal_table(&sc.grid, &sol.z));
            if !sol.converged {
                art.fail(format!("boundary follower CG stopped after {} iterations", sol.iterations));
                return Ok(());
            }
            let st = solve_boundary_optimality(&problem, p.tol * 1e-2)?;
            let diff = sys.norm(&st.z.sub(&sol.z)) / (1.0 + sys.norm(&sol.z));
            art.line(format!(
                "picard iterations: {} (contraction {:.3e})",
                st.iterations, st.contraction
            ));
            art.check("picard vs cg state agreement", diff, "<=", 1e-6, diff <= 1e-6);
        }
    }
    Ok(())
}

fn leader_problem(sc: &Scenario, epsilon: f64) -> Result<LeaderProblem> {
    reduce_to_null(sc.system.clone(), epsilon, &sc.y0, &sc.ybar0, &sc.yd)
}

fn kernel_lines(sc: &Scenario, art: &mut Artifacts) {
    let adm = admissibility_constant(&sc.kernel, &sc.weights, &sc.grid, &sc.tgrid);
    art.line(format!(
        "kernel admissibility constant: {:.6e} (refined {}){}",
        adm.value,
        adm.refined.map_or("n/a".to_string(), |r| format!("{r:.6e}")),
        if adm.diverging { ", diverging under refinement" } else { "" }
    ));
}

fn leader_sweep(cfg: &ScenarioConfig, sc: &Scenario, art: &mut Artifacts) -> Result<()> {
    let p = &cfg.parameters;
    let eps = p.eps_list();
    let problem = leader_problem(sc, eps[0])?;
    kernel_lines(sc, art);
    let report = epsilon_sweep(&problem, &eps, p.tol, p.max_iter, true)?;
    art.data("sweep.dat", text(|b| report.write(b))?);
    art.data("weights.dat", text(|b| sc.weights.write_table(&sc.tgrid, b))?);
    for r in &report.rows {
        art.line(format!(
            "eps = {:.1e}: |z(T)| = {:.6e}, |f|_omega = {:.6e}, cg iterations = {}",
            r.epsilon, r.terminal_norm, r.control_norm, r.cg_iters
        ));
    }
    match report.slope {
        Some(s) => art.line(format!(
            "check terminal-norm rate slope log|z(T)| vs log eps: {s:.6e} (in [{}, {}]) {}",
            SLOPE_BAND.0,
            SLOPE_BAND.1,
            if (SLOPE_BAND.0..=SLOPE_BAND.1).contains(&s) { "PASS" } else { "FAIL" }
        )),
        None => art.line("terminal-norm rate slope: undefined (zero terminal norms)"),
    }
    if report.control_ratio.is_finite() {
        art.check(
            "control bound max/min |f_eps|",
            report.control_ratio,
            "<=",
            CONTROL_RATIO_TOL,
            report.control_ratio <= CONTROL_RATIO_TOL,
        );
    } else {
        art.line("control bound max/min |f_eps|: undefined (zero controls)");
    }
    art.line(format!("terminal norms monotone: {}", report.terminal_monotone));
    art.line(format!("control norms monotone: {}", report.control_monotone));
    let gap = report.rows.iter().map(|r| r.duality_gap).fold(0.0, f64::max);
    art.check("duality identity gap (max over sweep)", gap, "<=", DUALITY_TOL, gap <= DUALITY_TOL);
    if let Some(e) = report.error {
        art.fail(e);
    } else if report.rows.iter().any(|r| !r.converged) {
        art.fail("leader CG hit the iteration cap".into());
    }
    Ok(())
}

fn semilinear(cfg: &ScenarioConfig, sc: &Scenario, art: &mut Artifacts) -> Result<()> {
    let p = &cfg.parameters;
    let g = cfg.nonlinearity.build()?;
    let placement = cfg
        .nonlinearity
        .placement
        .unwrap_or_else(|| Placement::for_action(&sc.system.action));
    art.line(format!("nonlinearity: {:?}, Lipschitz bound {:.6e}", g.kind(), g.bound()));
    art.line(format!("placement: {placement:?}"));
    art.line("validity: dimension 1 <= 12, embedding hypothesis of the fixed-point argument holds");
    let problem = SemilinearProblem {
        base: sc.system.clone(),
        nonlinearity: g,
        placement,
        epsilon: p.epsilon,
        y0: sc.y0.clone(),
        ybar0: sc.ybar0.clone(),
        yd: sc.yd.clone(),
    };
    let linear = SemilinearProblem {
        nonlinearity: Nonlinearity::zero(),
        ..problem.clone()
    };
    let leader_tol = p.tol;
    let lin = solve_semilinear_stackelberg(&linear, p.outer_tol, p.max_outer, leader_tol, p.max_iter)?;
    let run = solve_semilinear_stackelberg(&problem, p.outer_tol, p.max_outer, leader_tol, p.max_iter)?;
    art.data("trace.dat", text(|b| run.write_trace(b))?);
    art.data("terminal.dat", terminal_table(&sc.grid, &run.solution().z));
    art.line(format!("outer iterations: {}", run.trace.len()));
    art.line(format!("|z(T)| semilinear: {:.6e}", run.terminal_norm()));
    art.line(format!("|z(T)| linear: {:.6e}", lin.terminal_norm()));
    art.line(format!("max linearization coefficient: {:.6e}", run.coefficient_max));
    if let Some(c) = run.last_contraction() {
        art.check("outer contraction factor", c, "<", 1.0, c < 1.0);
    }
    let lt = lin.terminal_norm();
    if lt > 0.0 {
        let ratio = run.terminal_norm() / lt;
        art.check(
            "terminal norm ratio semilinear/linear",
            ratio,
            "<=",
            SEMILINEAR_TERMINAL_FACTOR,
            ratio <= SEMILINEAR_TERMINAL_FACTOR,
        );
    }
    if !run.converged {
        art.fail(format!(
            "outer fixed point not reached after {} iterations (last contraction {})",
            run.trace.len(),
            run.last_contraction().map_or("n/a".into(), |c| format!("{c:.3e}"))
        ));
    }
    Ok(())
}

fn boundary(cfg: &ScenarioConfig, sc: &Scenario, art: &mut Artifacts) -> Result<()> {
    let p = &cfg.parameters;
    let FollowerAction::Boundary { side, .. } = sc.system.action else {
        return Err(Error::Config("boundary experiment needs regions.gamma_side".into()));
    };
    let problem = leader_problem(sc, p.epsilon)?;
    let sol = solve_boundary_leader(&problem, p.tol, p.max_iter)?;
    let free = sc
        .system
        .state_op
        .forward(&problem.z0, None, &BoundaryData::homogeneous())?;
    let free_norm = interior_norm(free.row(free.n_times() - 1), &sc.grid);
    art.line(format!("epsilon: {:e}", p.epsilon));
    art.line(format!("|z(T)| controlled: {:.6e}", sol.terminal_norm));
    art.line(format!("|z(T)| uncontrolled: {free_norm:.6e}"));
    art.line(format!("|f|_omega: {:.6e}", sol.control_norm));
    art.line(format!("cg iterations: {}", sol.cg_iterations));
    art.check("duality identity gap", sol.duality_gap, "<=", DUALITY_TOL, sol.duality_gap <= DUALITY_TOL);
    let FollowerControl::Boundary(u) = sc.system.best_response(&sol.p) else {
        unreachable!("boundary action yields a boundary control")
    };
    art.data(
        "u_hat.dat",
        text(|b| write_u_hat(&sc.tgrid, sc.grid.boundary_index(side), &u, b))?,
    );
    art.data("terminal.dat", terminal_table(&sc.grid, &sol.z));
    if !sol.converged {
        art.fail(format!("leader CG stopped after {} iterations", sol.cg_iterations));
    }
    Ok(())
}

fn probe(cfg: &ScenarioConfig, sc: &Scenario, art: &mut Artifacts) -> Result<()> {
    let p = &cfg.parameters;
    let w = &sc.weights;
    let times: Vec<f64> = (1..sc.tgrid.n_steps()).map(|k| sc.tgrid.t(k)).collect();
    let pe = check_prop_exp(w, &times);
    art.line(format!(
        "weights: s = {}, lambda = {}, sigma+ = {:.6e}, sigma- = {:.6e}, s* = {:.6e}, s < s*: {}",
        w.s(),
        w.lambda(),
        w.sigma_plus(),
        w.sigma_minus(),
        pe.s_critical,
        pe.holds
    ));
    art.line(format!("samples: {}, modes: {}", p.samples, p.modes));
    let coarse = probe_observability(
        &sc.system,
        w,
        &random_terminal_data(&sc.grid, p.modes, p.samples, cfg.seed),
    )?;
    let fine_sc = Scenario::build_on(cfg, sc.grid.refined(), sc.tgrid.refined())?;
    let fine = probe_observability(
        &fine_sc.system,
        &fine_sc.weights,
        &random_terminal_data(&fine_sc.grid, p.modes, p.samples, cfg.seed),
    )?;
    let mut table = String::from("# sample ratio ratio_refined\n");
    for (i, (a, b)) in coarse.ratios.iter().zip(&fine.ratios).enumerate() {
        let _ = writeln!(table, "{i} {a:.12e} {b:.12e}");
    }
    art.data("probe.dat", table);
    art.data("weights.dat", text(|b| w.write_table(&sc.tgrid, b))?);
    art.line(format!(
        "ratio max: {:.6e}, median: {:.6e}, skipped: {}",
        coarse.max, coarse.median, coarse.skipped
    ));
    art.line(format!(
        "refined ratio max: {:.6e}, median: {:.6e}, skipped: {}",
        fine.max, fine.median, fine.skipped
    ));
    art.check(
        "observability ratio finite (max)",
        coarse.max,
        "<",
        f64::INFINITY,
        coarse.max.is_finite() && fine.max.is_finite(),
    );
    let growth = fine.max / coarse.max;
    art.check(
        "observability ratio growth under grid doubling",
        growth,
        "<=",
        PROBE_GROWTH_TOL,
        growth <= PROBE_GROWTH_TOL,
    );
    Ok(())
}

/// Parses `a..b` (decades from `a` down to `b`) or a comma-separated list.
pub fn parse_eps_list(spec: &str) -> Result<Vec<f64>> {
    let num = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("malformed number `{}` in epsilon list", s.trim())))
    };
    if let Some((a, b)) = spec.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        if !(a > 0.0 && b > 0.0 && b < a) {
            return Err(Error::Config(format!("epsilon range `{spec}` must run from a larger to a smaller positive value")));
        }
        let (ea, eb) = (a.log10(), b.log10());
        if (ea - ea.round()).abs() > 1e-9 || (eb - eb.round()).abs() > 1e-9 {
            return Err(Error::Config(format!("epsilon range `{spec}` must use powers of ten")));
        }
        let (ea, eb) = (ea.round() as i32, eb.round() as i32);
        return (eb..=ea)
            .rev()
            .map(|e| num(&format!("1e{e}")))
            .collect();
    }
    spec.split(',').map(num).collect()
}
