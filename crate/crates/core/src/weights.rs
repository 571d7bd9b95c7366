//! Carleman weight functions, the functionals built from them, and empirical
//! observability probes.
//!
//! With `eta0` vanishing on the boundary and `M0 = max eta0`,
//!
//! ```text
//! sigma(x)  = e^{4 lambda M0} - e^{lambda (2 M0 + eta0(x))}
//! eta       = sigma / l^4,        phi  = e^{lambda (2 M0 + eta0)} / l^4
//! alpha     = sigma / lbar^4,     zeta = e^{lambda (2 M0 + eta0)} / lbar^4
//! varpi1    = e^{s alpha*} zeta*^{-3/2},   varpi2 = e^{s alpha*} zeta*^{-1/2}
//! ```
//!
//! where `lbar` freezes `l` at its maximum on `[0, T/2]`. The weights overflow
//! `f64` for moderate parameters, so everything that can be large is also
//! available as a logarithm.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::coupled::{CoupledSystem, FollowerAction};
use crate::error::{Error, Result};
use crate::grid::{interior_inner, spacetime_inner, Grid, Interval, RegionMask, SpaceTimeField, TimeGrid, TimeSlots};

/// The cutoff `l(t)`: `t` on `[0, T/4]`, `T - t` on `[3T/4, T]`, and the
/// quartic `(T/4)(13/8 - 3u^2/4 + u^4/8)`, `u = (t - T/2)/(T/4)`, in between.
/// The joins are `C^2` and the maximum is `13T/32` at `T/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffFunction {
    horizon: f64,
}

impl CutoffFunction {
    pub fn new(horizon: f64) -> Self {
        Self { horizon }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn eval(&self, t: f64) -> f64 {
        let tt = self.horizon;
        if t <= 0.25 * tt {
            t
        } else if t >= 0.75 * tt {
            tt - t
        } else {
            let u = (t - 0.5 * tt) / (0.25 * tt);
            let u2 = u * u;
            0.25 * tt * (1.625 - 0.75 * u2 + 0.125 * u2 * u2)
        }
    }

    pub fn max(&self) -> f64 {
        13.0 * self.horizon / 32.0
    }

    /// `lbar`: the maximum of `l` on `[0, T/2]`, then `l` itself.
    pub fn eval_bar(&self, t: f64) -> f64 {
        if t <= 0.5 * self.horizon {
            self.max()
        } else {
            self.eval(t)
        }
    }
}

pub fn build_l(horizon: f64) -> CutoffFunction {
    CutoffFunction::new(horizon)
}

/// `eta0(x) = (x/L)^{2c} (1 - x/L)^{2(1-c)}` with `c` the relative midpoint of
/// `omega_prime`; its only critical point is that midpoint.
pub fn build_eta0(grid: &Grid, omega_prime: Interval) -> Result<Vec<f64>> {
    let len = grid.length();
    if !(omega_prime.a < omega_prime.b) {
        return Err(Error::InvalidRegion {
            name: "omega'".into(),
            reason: "empty interval".into(),
        });
    }
    if !(omega_prime.a > 0.0 && omega_prime.b < len) {
        return Err(Error::InvalidRegion {
            name: "omega'".into(),
            reason: format!(
                "({}, {}) touches the boundary of (0, {len})",
                omega_prime.a, omega_prime.b
            ),
        });
    }
    let c = omega_prime.center() / len;
    let mut v = grid.sample(|x| {
        let r = (x / len).clamp(0.0, 1.0);
        r.powf(2.0 * c) * (1.0 - r).powf(2.0 * (1.0 - c))
    });
    let last = v.len() - 1;
    v[0] = 0.0;
    v[last] = 0.0;
    Ok(v)
}

/// [`build_eta0`] rescaled so that its largest node value equals `max_value`.
pub fn build_eta0_scaled(grid: &Grid, omega_prime: Interval, max_value: f64) -> Result<Vec<f64>> {
    if !(max_value > 0.0 && max_value.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "eta0 maximum must be positive, got {max_value}"
        )));
    }
    let mut v = build_eta0(grid, omega_prime)?;
    let peak = v.iter().cloned().fold(0.0, f64::max);
    v.iter_mut().for_each(|x| *x *= max_value / peak);
    let top = v.iter().cloned().fold(0.0, f64::max);
    v.iter_mut().filter(|x| **x == top).for_each(|x| *x = max_value);
    Ok(v)
}

/// Which observability weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Varpi {
    /// `e^{s alpha*} zeta*^{-3/2}`, distributed follower.
    One,
    /// `e^{s alpha*} zeta*^{-1/2}`, boundary follower.
    Two,
}

/// Weight evaluators for fixed `(s, lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CarlemanWeights {
    s: f64,
    lambda: f64,
    eta0: Vec<f64>,
    m0: f64,
    cutoff: CutoffFunction,
}

impl CarlemanWeights {
    pub fn new(eta0: Vec<f64>, s: f64, lambda: f64, horizon: f64) -> Result<Self> {
        if !(s > 0.0 && lambda > 0.0 && s.is_finite() && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "weights need s > 0 and lambda > 0, got s = {s}, lambda = {lambda}"
            )));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        let m0 = eta0.iter().cloned().fold(0.0, f64::max);
        if !(m0 > 0.0) || eta0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("eta0 must be finite with a positive maximum".into()));
        }
        Ok(Self {
            s,
            lambda,
            eta0,
            m0,
            cutoff: CutoffFunction::new(horizon),
        })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn eta0(&self) -> &[f64] {
        &self.eta0
    }

    pub fn m0(&self) -> f64 {
        self.m0
    }

    pub fn cutoff(&self) -> &CutoffFunction {
        &self.cutoff
    }

    pub fn with_s(&self, s: f64) -> Self {
        Self { s, ..self.clone() }
    }

    pub fn l(&self, t: f64) -> f64 {
        self.cutoff.eval(t)
    }

    pub fn l_bar(&self, t: f64) -> f64 {
        self.cutoff.eval_bar(t)
    }

    /// `e^{lambda (2 M0 + eta0_i)}`.
    fn expo(&self, i: usize) -> f64 {
        (self.lambda * (2.0 * self.m0 + self.eta0[i])).exp()
    }

    fn top(&self) -> f64 {
        (4.0 * self.lambda * self.m0).exp()
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.top() - self.expo(i)
    }

    /// `max_x sigma = e^{4 lambda M0} - e^{2 lambda M0}`.
    pub fn sigma_plus(&self) -> f64 {
        self.top() - (2.0 * self.lambda * self.m0).exp()
    }

    /// `min_x sigma = e^{4 lambda M0} - e^{3 lambda M0}`.
    pub fn sigma_minus(&self) -> f64 {
        self.top() - (3.0 * self.lambda * self.m0).exp()
    }

    pub fn eta(&self, t: f64, i: usize) -> f64 {
        self.sigma(i) / self.l(t).powi(4)
    }

    pub fn phi(&self, t: f64, i: usize) -> f64 {
        self.expo(i) / self.l(t).powi(4)
    }

    pub fn alpha(&self, t: f64, i: usize) -> f64 {
        self.sigma(i) / self.l_bar(t).powi(4)
    }

    pub fn zeta(&self, t: f64, i: usize) -> f64 {
        self.expo(i) / self.l_bar(t).powi(4)
    }

    pub fn alpha_star(&self, t: f64) -> f64 {
        self.sigma_plus() / self.l_bar(t).powi(4)
    }

    pub fn zeta_star(&self, t: f64) -> f64 {
        (2.0 * self.lambda * self.m0).exp() / self.l_bar(t).powi(4)
    }

    pub fn eta_star(&self, t: f64) -> f64 {
        self.sigma_plus() / self.l(t).powi(4)
    }

    pub fn phi_star(&self, t: f64) -> f64 {
        (2.0 * self.lambda * self.m0).exp() / self.l(t).powi(4)
    }

    pub fn log_varpi(&self, which: Varpi, t: f64) -> f64 {
        let p = match which {
            Varpi::One => 1.5,
            Varpi::Two => 0.5,
        };
        self.s * self.alpha_star(t) - p * self.zeta_star(t).ln()
    }

    pub fn varpi1(&self, t: f64) -> f64 {
        self.log_varpi(Varpi::One, t).exp()
    }

    pub fn varpi2(&self, t: f64) -> f64 {
        self.log_varpi(Varpi::Two, t).exp()
    }

    /// Writes `t l alpha_star zeta_star varpi1 varpi2` at every time level
    /// except `T`, where the weights are infinite.
    pub fn write_table(&self, tgrid: &TimeGrid, out: &mut impl Write) -> Result<()> {
        writeln!(out, "# t l alpha_star zeta_star varpi1 varpi2")?;
        for k in 0..tgrid.n_steps() {
            let t = tgrid.t(k);
            writeln!(
                out,
                "{:.10e} {:.10e} {:.10e} {:.10e} {:.10e} {:.10e}",
                t,
                self.l(t),
                self.alpha_star(t),
                self.zeta_star(t),
                self.varpi1(t),
                self.varpi2(t)
            )?;
        }
        Ok(())
    }
}

/// Result of comparing `exp(-(1+s) sigma^- / l^4)` with `exp(-s sigma^+ / l^4)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropExpCheck {
    /// The strict inequality holds at every sample time.
    pub holds: bool,
    /// Closed-form criterion `(1 + s) sigma^- > s sigma^+`.
    pub closed_form: bool,
    /// `min_t [(1 + s) sigma^- - s sigma^+] / l(t)^4`.
    pub margin: f64,
    /// `s* = sigma^- / (sigma^+ - sigma^-)`.
    pub s_critical: f64,
}

pub fn check_prop_exp(weights: &CarlemanWeights, t_samples: &[f64]) -> PropExpCheck {
    let (sp, sm, s) = (weights.sigma_plus(), weights.sigma_minus(), weights.s());
    let gap = (1.0 + s) * sm - s * sp;
    let mut holds = true;
    let mut margin = f64::INFINITY;
    for &t in t_samples {
        let l4 = weights.l(t).powi(4);
        if !(l4 > 0.0) {
            continue;
        }
        // Compare logarithms: both exponentials underflow for small l.
        let lhs = -(1.0 + s) * sm / l4;
        let rhs = -s * sp / l4;
        holds &= lhs < rhs;
        margin = margin.min(gap / l4);
    }
    PropExpCheck {
        holds,
        closed_form: gap > 0.0,
        margin,
        s_critical: sm / (sp - sm),
    }
}

/// `int_0^{T-dt} int varpi^2 |field|^2` over `mask`, as a value and a logarithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedNorm {
    pub value: f64,
    pub log_value: f64,
}

pub fn weighted_target_norm(
    field: &SpaceTimeField,
    weights: &CarlemanWeights,
    which: Varpi,
    mask: Option<&RegionMask>,
    grid: &Grid,
    tgrid: &TimeGrid,
) -> Result<WeightedNorm> {
    field.check(tgrid, grid, "weighted_target_norm")?;
    let mut logs = Vec::with_capacity(tgrid.n_steps());
    for k in 0..tgrid.n_steps() {
        let sq: Vec<f64> = field.row(k).iter().map(|v| v * v).collect();
        let inner = crate::grid::integrate_space(&sq, grid, mask)?;
        if inner > 0.0 {
            let t = tgrid.t(k);
            logs.push(tgrid.dt().ln() + 2.0 * weights.log_varpi(which, t) + inner.ln());
        }
    }
    let log_value = log_sum_exp(&logs);
    Ok(WeightedNorm {
        value: log_value.exp(),
        log_value,
    })
}

/// Ratio of [`weighted_target_norm`] after one time-grid doubling, for a field
/// given as a function; large ratios indicate a divergent weighted norm.
pub fn weighted_norm_refinement_ratio(
    f: impl Fn(f64, f64) -> f64,
    weights: &CarlemanWeights,
    which: Varpi,
    mask: Option<&RegionMask>,
    grid: &Grid,
    tgrid: &TimeGrid,
) -> Result<f64> {
    let fine = tgrid.refined();
    let a = weighted_target_norm(&SpaceTimeField::from_fn(tgrid, grid, &f), weights, which, mask, grid, tgrid)?;
    let b = weighted_target_norm(&SpaceTimeField::from_fn(&fine, grid, &f), weights, which, mask, grid, &fine)?;
    if a.log_value == f64::NEG_INFINITY {
        return Ok(if b.log_value == f64::NEG_INFINITY { 1.0 } else { f64::INFINITY });
    }
    Ok((b.log_value - a.log_value).exp())
}

fn log_sum_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// Empirical observability ratios over random terminal data.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservabilityProbe {
    pub ratios: Vec<f64>,
    pub max: f64,
    pub median: f64,
    /// Samples with a vanishing denominator.
    pub skipped: usize,
}

/// `[|rho(0)|^2 + int varpi^{-2} |psi|^2] / int int_omega |rho|^2` for the
/// adjoint pair started from `rho_t`; `None` when the denominator vanishes.
/// `varpi_1` is used for distributed followers and `varpi_2` for boundary ones.
pub fn observability_ratio(
    system: &CoupledSystem,
    weights: &CarlemanWeights,
    rho_t: &[f64],
) -> Result<Option<f64>> {
    let (g, tg) = (system.grid(), system.tgrid());
    let which = match system.action {
        FollowerAction::Distributed(_) => Varpi::One,
        FollowerAction::Boundary { .. } => Varpi::Two,
    };
    let pair = system.solve_adjoint_pair(rho_t)?;
    let den = spacetime_inner(&pair.rho, &pair.rho, g, tg, Some(&system.omega), TimeSlots::Source);
    if !(den > 0.0) {
        return Ok(None);
    }
    let mut num = interior_inner(pair.rho.row(0), pair.rho.row(0), g);
    for k in 1..tg.n_steps() {
        let w = (-2.0 * weights.log_varpi(which, tg.t(k))).exp();
        num += tg.dt() * w * interior_inner(pair.psi.row(k), pair.psi.row(k), g);
    }
    Ok(Some(num / den))
}

/// Terminal data `sum_m xi_m sin(m pi x / L)`, `m = 1..=modes`, with standard
/// normal `xi_m` drawn from a ChaCha8 stream seeded by `seed`.
pub fn random_terminal_data(grid: &Grid, modes: usize, n_samples: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|_| {
            let xi: Vec<f64> = (0..modes).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut v = grid.sample(|x| {
                xi.iter()
                    .enumerate()
                    .map(|(m, c)| c * ((m + 1) as f64 * std::f64::consts::PI * x / grid.length()).sin())
                    .sum()
            });
            let last = v.len() - 1;
            v[0] = 0.0;
            v[last] = 0.0;
            v
        })
        .collect()
}

/// Ratio statistics over `samples`, evaluated on scoped threads.
pub fn probe_observability(
    system: &CoupledSystem,
    weights: &CarlemanWeights,
    samples: &[Vec<f64>],
) -> Result<ObservabilityProbe> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).max(1);
    let chunk = samples.len().div_ceil(threads).max(1);
    let results: Vec<Result<Option<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|c| {
                scope.spawn(move || {
                    c.iter()
                        .map(|r| observability_ratio(system, weights, r))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("probe worker panicked"))
            .collect()
    });
    let mut ratios = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r? {
            Some(v) => ratios.push(v),
            None => skipped += 1,
        }
    }
    let mut sorted = ratios.clone();
    sorted.sort_by(f64::total_cmp);
    let median = match sorted.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    Ok(ObservabilityProbe {
        max: sorted.last().copied().unwrap_or(f64::NAN),
        median,
        ratios,
        skipped,
    })
}

/// Values of the two weighted energies `M(z)` and `N(z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarlemanFunctionals {
    pub m: f64,
    pub n: f64,
}

/// Centered spatial differences at interior nodes, one-sided at the ends.
fn gradient(row: &[f64], h: f64) -> Vec<f64> {
    let last = row.len() - 1;
    (0..row.len())
        .map(|i| {
            if i == 0 {
                (row[1] - row[0]) / h
            } else if i == last {
                (row[last] - row[last - 1]) / h
            } else {
                (row[i + 1] - row[i - 1]) / (2.0 * h)
            }
        })
        .collect()
}

/// `M(z) = s l^2 int e^{-2s eta} phi |z_x|^2 + s^3 l^4 int e^{-2s eta} phi^3 |z|^2`
/// and `N(z) = s^{-1} int e^{-2s eta} phi^{-1} |z_x|^2 + s l^2 int e^{-2s eta} phi |z|^2`
/// (`l = lambda` here), trapezoidal in space and over the interior time levels.
pub fn carleman_functionals(
    field: &SpaceTimeField,
    weights: &CarlemanWeights,
    grid: &Grid,
    tgrid: &TimeGrid,
) -> Result<CarlemanFunctionals> {
    field.check(tgrid, grid, "carleman_functionals")?;
    let (s, lam) = (weights.s(), weights.lambda());
    let w = grid.trapezoid_weights();
    let (mut m1, mut m2, mut n1, mut n2) = (0.0, 0.0, 0.0, 0.0);
    for k in 1..tgrid.n_steps() {
        let t = tgrid.t(k);
        let row = field.row(k);
        let grad = gradient(row, grid.h());
        for i in 0..grid.n_nodes() {
            let eta = weights.eta(t, i);
            let lphi = weights.phi(t, i).ln();
            let base = -2.0 * s * eta;
            let g2 = grad[i] * grad[i];
            let z2 = row[i] * row[i];
            let wi = w[i] * tgrid.dt();
            m1 += wi * (base + lphi).exp() * g2;
            m2 += wi * (base + 3.0 * lphi).exp() * z2;
            n1 += wi * (base - lphi).exp() * g2;
            n2 += wi * (base + lphi).exp() * z2;
        }
    }
    Ok(CarlemanFunctionals {
        m: s * lam * lam * m1 + s.powi(3) * lam.powi(4) * m2,
        n: n1 / s + s * lam * lam * n2,
    })
}
