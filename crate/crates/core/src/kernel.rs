//! Integral kernels `K(t, x, s)` and their per-step quadrature matrices.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{Grid, TimeGrid};
use crate::weights::{CarlemanWeights, CutoffFunction};

/// One-variable profile used by separable kernels.
#[derive(Clone)]
pub enum Profile {
    Constant(f64),
    /// `amplitude * sin(mode * pi * x / L)`; as a time profile `L` is `T`.
    SineMode { mode: u32, amplitude: f64 },
    /// Node samples (space) or time-level samples (time).
    Samples(Vec<f64>),
    Function(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Profile::Constant(c) => write!(f, "Constant({c})"),
            Profile::SineMode { mode, amplitude } => {
                write!(f, "SineMode {{ mode: {mode}, amplitude: {amplitude} }}")
            }
            Profile::Samples(s) => write!(f, "Samples(len {})", s.len()),
            Profile::Function(_) => f.write_str("Function(..)"),
        }
    }
}

impl Profile {
    pub fn function(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Profile::Function(Arc::new(f))
    }

    /// Value at coordinate `x` of a domain of length `length`, sample index `idx`.
    fn eval(&self, x: f64, idx: usize, length: f64) -> f64 {
        match self {
            Profile::Constant(c) => *c,
            Profile::SineMode { mode, amplitude } => {
                amplitude * (*mode as f64 * std::f64::consts::PI * x / length).sin()
            }
            Profile::Samples(s) => s[idx],
            Profile::Function(f) => f(x),
        }
    }

    fn check_len(&self, expected: usize, context: &'static str) -> Result<()> {
        match self {
            Profile::Samples(s) if s.len() != expected => Err(Error::DimensionMismatch {
                context,
                expected,
                found: s.len(),
            }),
            _ => Ok(()),
        }
    }

    fn is_constant(&self) -> bool {
        match self {
            Profile::Constant(_) => true,
            Profile::Samples(s) => s.windows(2).all(|w| w[0] == w[1]),
            _ => false,
        }
    }

    fn is_sampled(&self) -> bool {
        matches!(self, Profile::Samples(_))
    }
}

/// Description of the integral kernel.
#[derive(Debug, Clone)]
pub enum KernelSpec {
    Zero,
    /// `K(t, x, s) = tau(t) a(x) b(s)`.
    Separable {
        time: Profile,
        left: Profile,
        right: Profile,
    },
    /// `K = amplitude * exp(-(x - s)^2 / width^2) * exp(-decay / l(t)^4)`.
    GaussianDecay {
        amplitude: f64,
        width: f64,
        decay: f64,
    },
    /// Samples `values[k][i][j]` on the full space-time grid.
    Tabulated(Vec<Vec<Vec<f64>>>),
}

impl KernelSpec {
    /// `c sin(pi x / L) sin(pi s / L)`, constant in time.
    pub fn eigen(c: f64) -> Self {
        KernelSpec::Separable {
            time: Profile::Constant(c),
            left: Profile::SineMode {
                mode: 1,
                amplitude: 1.0,
            },
            right: Profile::SineMode {
                mode: 1,
                amplitude: 1.0,
            },
        }
    }

    pub fn validate(&self, grid: &Grid, tgrid: &TimeGrid) -> Result<()> {
        match self {
            KernelSpec::Zero => Ok(()),
            KernelSpec::Separable { time, left, right } => {
                time.check_len(tgrid.n_times(), "kernel time profile")?;
                left.check_len(grid.n_nodes(), "kernel left profile")?;
                right.check_len(grid.n_nodes(), "kernel right profile")
            }
            KernelSpec::GaussianDecay {
                amplitude,
                width,
                decay,
            } => {
                if !(width.is_finite() && *width > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "gaussian kernel width must be positive, got {width}"
                    )));
                }
                if !(decay.is_finite() && *decay >= 0.0) || !amplitude.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "gaussian kernel needs finite amplitude and decay >= 0, got {amplitude}, {decay}"
                    )));
                }
                Ok(())
            }
            KernelSpec::Tabulated(v) => {
                if v.len() != tgrid.n_times() {
                    return Err(Error::DimensionMismatch {
                        context: "tabulated kernel time levels",
                        expected: tgrid.n_times(),
                        found: v.len(),
                    });
                }
                for slab in v {
                    if slab.len() != grid.n_nodes() {
                        return Err(Error::DimensionMismatch {
                            context: "tabulated kernel rows",
                            expected: grid.n_nodes(),
                            found: slab.len(),
                        });
                    }
                    for row in slab {
                        if row.len() != grid.n_nodes() {
                            return Err(Error::DimensionMismatch {
                                context: "tabulated kernel columns",
                                expected: grid.n_nodes(),
                                found: row.len(),
                            });
                        }
                        if row.iter().any(|x| !x.is_finite()) {
                            return Err(Error::InvalidParameter(
                                "tabulated kernel has non-finite samples".into(),
                            ));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, KernelSpec::Zero)
    }

    /// Whether the kernel is independent of time.
    pub fn is_time_constant(&self) -> bool {
        match self {
            KernelSpec::Zero => true,
            KernelSpec::Separable { time, .. } => time.is_constant(),
            KernelSpec::GaussianDecay { decay, .. } => *decay == 0.0,
            KernelSpec::Tabulated(v) => v.windows(2).all(|w| w[0] == w[1]),
        }
    }

    /// Whether values depend on the sample index in time (so the kernel cannot
    /// be evaluated on a refined time grid).
    fn is_time_sampled(&self) -> bool {
        match self {
            KernelSpec::Separable { time, .. } => time.is_sampled(),
            KernelSpec::Tabulated(_) => true,
            _ => false,
        }
    }

    /// Time factor at `(t, k)`; for Gaussian kernels this is `exp(-c / l^4)`.
    fn time_factor(&self, t: f64, k: usize, cutoff: &CutoffFunction) -> f64 {
        match self {
            KernelSpec::Zero | KernelSpec::Tabulated(_) => 1.0,
            KernelSpec::Separable { time, .. } => time.eval(t, k, cutoff.horizon()),
            KernelSpec::GaussianDecay { decay, .. } => {
                if *decay == 0.0 {
                    return 1.0;
                }
                let l = cutoff.eval(t);
                if l <= 0.0 {
                    0.0
                } else {
                    (-decay / l.powi(4)).exp()
                }
            }
        }
    }

    /// `K(t_k, x_i, x_j)` given the precomputed time factor.
    fn value(&self, grid: &Grid, k: usize, i: usize, j: usize, tf: f64) -> f64 {
        match self {
            KernelSpec::Zero => 0.0,
            KernelSpec::Separable { left, right, .. } => {
                let len = grid.length();
                tf * left.eval(grid.x(i), i, len) * right.eval(grid.x(j), j, len)
            }
            KernelSpec::GaussianDecay {
                amplitude, width, ..
            } => {
                let d = grid.x(i) - grid.x(j);
                tf * amplitude * (-(d * d) / (width * width)).exp()
            }
            KernelSpec::Tabulated(v) => v[k][i][j],
        }
    }

    /// Full-node kernel samples at one time level.
    pub fn samples_at(&self, grid: &Grid, tgrid: &TimeGrid, k: usize) -> DMatrix<f64> {
        let cutoff = CutoffFunction::new(tgrid.horizon());
        let tf = self.time_factor(tgrid.t(k), k, &cutoff);
        let m = grid.n_nodes();
        DMatrix::from_fn(m, m, |i, j| self.value(grid, k, i, j, tf))
    }
}

/// Per-step quadrature matrices `N_k[i][j] = K(t_k, x_i, x_j) w_j` on all
/// nodes, with trapezoidal weights `w_j`.
#[derive(Debug, Clone)]
pub struct KernelOperator {
    matrices: Vec<DMatrix<f64>>,
    time_constant: bool,
    zero: bool,
    symmetric: bool,
    weights: Vec<f64>,
}

impl KernelOperator {
    pub fn zero(grid: &Grid) -> Self {
        let m = grid.n_nodes();
        Self {
            matrices: vec![DMatrix::zeros(m, m)],
            time_constant: true,
            zero: true,
            symmetric: true,
            weights: grid.trapezoid_weights(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.weights.len()
    }

    pub fn is_time_constant(&self) -> bool {
        self.time_constant
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// True iff `K(t, x, s) = K(t, s, x)` at every sample.
    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// `N_k`; `k` indexes time levels `0..=n_steps`.
    pub fn matrix(&self, k: usize) -> &DMatrix<f64> {
        if self.time_constant {
            &self.matrices[0]
        } else {
            &self.matrices[k]
        }
    }

    /// `(N_k u)_i = sum_j K(t_k, x_i, x_j) w_j u_j`.
    pub fn apply(&self, k: usize, u: &[f64]) -> Vec<f64> {
        let m = self.matrix(k);
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * u[j]).sum())
            .collect()
    }

    /// Adjoint of [`apply`](Self::apply) in the trapezoidal inner product:
    /// `(N_k^* w)_j = sum_i K(t_k, x_i, x_j) w_i w_i'`, `w_i'` the weights.
    pub fn apply_transpose(&self, k: usize, w: &[f64]) -> Vec<f64> {
        let m = self.matrix(k);
        let q = &self.weights;
        (0..m.ncols())
            .map(|j| {
                let wj = q[j];
                (0..m.nrows())
                    .map(|i| m[(i, j)] / wj * q[i] * w[i])
                    .sum()
            })
            .collect()
    }
}

/// Builds `N_k` for every time level.
pub fn assemble(spec: &KernelSpec, grid: &Grid, tgrid: &TimeGrid) -> Result<KernelOperator> {
    spec.validate(grid, tgrid)?;
    if spec.is_zero() {
        return Ok(KernelOperator::zero(grid));
    }
    let weights = grid.trapezoid_weights();
    let time_constant = spec.is_time_constant();
    let levels = if time_constant { 1 } else { tgrid.n_times() };
    let mut matrices = Vec::with_capacity(levels);
    let mut symmetric = true;
    for k in 0..levels {
        let mut m = spec.samples_at(grid, tgrid, k);
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kernel produced non-finite samples at time level {k}"
            )));
        }
        symmetric &= m == m.transpose();
        for (j, w) in weights.iter().enumerate() {
            m.column_mut(j).scale_mut(*w);
        }
        matrices.push(m);
    }
    let zero = matrices.iter().all(|m| m.iter().all(|v| *v == 0.0));
    Ok(KernelOperator {
        matrices,
        time_constant,
        zero,
        symmetric,
        weights,
    })
}

/// Admissibility constant `sup exp(sigma^- / l^4) int |K| ds` over the sampled
/// times `t_k`, `1 <= k <= n_steps - 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Admissibility {
    /// Value on the supplied time grid (`inf` on overflow).
    pub value: f64,
    /// Value on the time grid with twice as many steps, when computable.
    pub refined: Option<f64>,
    pub diverging: bool,
}

fn log_admissibility(
    spec: &KernelSpec,
    sigma_minus: f64,
    grid: &Grid,
    tgrid: &TimeGrid,
) -> f64 {
    let cutoff = CutoffFunction::new(tgrid.horizon());
    let w = grid.trapezoid_weights();
    let mut best = f64::NEG_INFINITY;
    for k in 1..tgrid.n_steps() {
        let t = tgrid.t(k);
        let tf = spec.time_factor(t, k, &cutoff);
        let mut row_max = 0.0f64;
        for i in 0..grid.n_nodes() {
            let s: f64 = (0..grid.n_nodes())
                .map(|j| spec.value(grid, k, i, j, tf).abs() * w[j])
                .sum();
            row_max = row_max.max(s);
        }
        if row_max > 0.0 {
            let l = cutoff.eval(t);
            best = best.max(sigma_minus / l.powi(4) + row_max.ln());
        }
    }
    best
}

/// Grid approximation of the admissibility constant together with a
/// divergence flag from one time-grid doubling.
pub fn admissibility_constant(
    spec: &KernelSpec,
    weights: &CarlemanWeights,
    grid: &Grid,
    tgrid: &TimeGrid,
) -> Admissibility {
    let sm = weights.sigma_minus();
    let coarse = log_admissibility(spec, sm, grid, tgrid);
    let refined = (!spec.is_time_sampled()).then(|| log_admissibility(spec, sm, grid, &tgrid.refined()));
    let value = coarse.exp();
    let refined_value = refined.map(f64::exp);
    let diverging = if coarse == f64::NEG_INFINITY {
        false
    } else {
        !value.is_finite()
            || refined.is_some_and(|r| !r.exp().is_finite() || r - coarse > 10f64.ln())
    };
    Admissibility {
        value,
        refined: refined_value,
        diverging,
    }
}

/// Reads a tabulated kernel from whitespace-separated columns `k i j value`
/// (header line `k i j value`, `#` comments allowed). Missing entries are zero.
pub fn read_tabulated(path: &Path, grid: &Grid, tgrid: &TimeGrid) -> Result<KernelSpec> {
    let text = std::fs::read_to_string(path)?;
    parse_tabulated(&text, grid, tgrid)
}

pub fn parse_tabulated(text: &str, grid: &Grid, tgrid: &TimeGrid) -> Result<KernelSpec> {
    let m = grid.n_nodes();
    let mut values = vec![vec![vec![0.0; m]; m]; tgrid.n_times()];
    let mut saw_header = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if !saw_header {
            if cols != ["k", "i", "j", "value"] {
                return Err(Error::Config(format!(
                    "tabulated kernel: expected header `k i j value`, found `{line}`"
                )));
            }
            saw_header = true;
            continue;
        }
        let bad = || Error::Config(format!("tabulated kernel: malformed line {}", lineno + 1));
        if cols.len() != 4 {
            return Err(bad());
        }
        let k: usize = cols[0].parse().map_err(|_| bad())?;
        let i: usize = cols[1].parse().map_err(|_| bad())?;
        let j: usize = cols[2].parse().map_err(|_| bad())?;
        let v: f64 = cols[3].parse().map_err(|_| bad())?;
        if k >= tgrid.n_times() || i >= m || j >= m {
            return Err(Error::Config(format!(
                "tabulated kernel: index ({k}, {i}, {j}) out of range on line {}",
                lineno + 1
            )));
        }
        values[k][i][j] = v;
    }
    if !saw_header {
        return Err(Error::Config("tabulated kernel: empty file".into()));
    }
    Ok(KernelSpec::Tabulated(values))
}
