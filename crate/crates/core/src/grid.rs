//! Uniform space-time grids on `(0, T) x (0, L)`, region masks, the discrete
//! Dirichlet Laplacian and the quadratures used throughout the crate.
//!
//! Two quadratures coexist:
//!
//! * [`integrate_space`] and [`norm_l2_spacetime`] are composite trapezoidal
//!   rules over every node, boundary nodes included. They are the reporting
//!   quadratures.
//! * The control functionals use [`interior_inner`] in space (weight `h` per
//!   interior node) and a one-sided rule in time selected by [`TimeSlots`]. This
//!   pairing is the one under which the backward scheme is the exact adjoint of
//!   the forward scheme, so every gradient in the crate is exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform 1-D grid with `n_interior` unknowns and two Dirichlet nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    length: f64,
    n_interior: usize,
    h: f64,
}

impl Grid {
    pub fn new(length: f64, n_interior: usize) -> Result<Self> {
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "domain length must be positive, got {length}"
            )));
        }
        if n_interior < 1 {
            return Err(Error::GridTooSmall("need at least one interior node".into()));
        }
        Ok(Self {
            length,
            n_interior,
            h: length / (n_interior as f64 + 1.0),
        })
    }

    /// Unit interval with `n_interior` interior nodes.
    pub fn unit(n_interior: usize) -> Result<Self> {
        Self::new(1.0, n_interior)
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    /// Total node count, boundary nodes included.
    pub fn n_nodes(&self) -> usize {
        self.n_interior + 2
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn x(&self, i: usize) -> f64 {
        if i == self.n_interior + 1 {
            self.length
        } else {
            i as f64 * self.h
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|i| self.x(i)).collect()
    }

    /// Indices of the interior nodes.
    pub fn interior(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.n_interior
    }

    /// Node index of a boundary side.
    pub fn boundary_index(&self, side: Side) -> usize {
        match side {
            Side::Left => 0,
            Side::Right => self.n_interior + 1,
        }
    }

    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let mut w = vec![self.h; self.n_nodes()];
        w[0] = 0.5 * self.h;
        w[self.n_interior + 1] = 0.5 * self.h;
        w
    }

    /// Samples `f` at every node.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..self.n_nodes()).map(|i| f(self.x(i))).collect()
    }

    /// Same domain with `2n + 1` interior nodes, so every old node is a new node.
    pub fn refined(&self) -> Self {
        Self::new(self.length, 2 * self.n_interior + 1).expect("refinement of a valid grid")
    }
}

/// Uniform time grid `t_k = k dt`, `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "time horizon must be positive, got {horizon}"
            )));
        }
        if n_steps < 1 {
            return Err(Error::GridTooSmall("need at least one time step".into()));
        }
        Ok(Self {
            horizon,
            n_steps,
            dt: horizon / n_steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_times(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_times()).map(|k| self.t(k)).collect()
    }

    pub fn refined(&self) -> Self {
        Self::new(self.horizon, 2 * self.n_steps).expect("refinement of a valid time grid")
    }
}

/// One end of the interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

/// Closed interval `[a, b]` strictly inside the domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub a: f64,
    pub b: f64,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.a <= x && x <= self.b
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.a < other.b && other.a < self.b
    }

    pub fn intersection(&self, other: &Interval) -> Option<Interval> {
        let a = self.a.max(other.a);
        let b = self.b.min(other.b);
        (a < b).then_some(Interval { a, b })
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.a + self.b)
    }

    pub fn width(&self) -> f64 {
        self.b - self.a
    }
}

/// Names of the subregions that appear in the control problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionName {
    /// Leader control region.
    Omega,
    /// Follower control region.
    Observation,
    /// Follower tracking region.
    Target,
    /// Boundary piece acted on by a boundary follower.
    Gamma,
}

impl std::fmt::Display for RegionName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RegionName::Omega => "omega",
            RegionName::Observation => "O",
            RegionName::Target => "O_d",
            RegionName::Gamma => "Gamma",
        };
        f.write_str(s)
    }
}

/// Per-node weights realizing a characteristic function (or the boundary
/// profile `1_Gamma`).
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    name: RegionName,
    interval: Option<Interval>,
    weights: Vec<f64>,
}

impl RegionMask {
    /// Sharp 0/1 mask of `[a, b]`; requires `0 < a < b < L`.
    pub fn interval(name: RegionName, grid: &Grid, a: f64, b: f64) -> Result<Self> {
        if !(a < b) {
            return Err(Error::InvalidRegion {
                name: name.to_string(),
                reason: format!("empty interval ({a}, {b})"),
            });
        }
        if !(a > 0.0 && b < grid.length()) {
            return Err(Error::InvalidRegion {
                name: name.to_string(),
                reason: format!("({a}, {b}) is not inside (0, {})", grid.length()),
            });
        }
        let interval = Interval::new(a, b);
        let weights: Vec<f64> = grid
            .nodes()
            .into_iter()
            .map(|x| if interval.contains(x) { 1.0 } else { 0.0 })
            .collect();
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidRegion {
                name: name.to_string(),
                reason: format!("({a}, {b}) contains no grid node"),
            });
        }
        Ok(Self {
            name,
            interval: Some(interval),
            weights,
        })
    }

    /// Boundary mask: value `profile` at the chosen endpoint, zero elsewhere.
    pub fn boundary(grid: &Grid, side: Side, profile: f64) -> Result<Self> {
        if !(profile > 0.0 && profile.is_finite()) {
            return Err(Error::InvalidRegion {
                name: RegionName::Gamma.to_string(),
                reason: format!("profile value must be positive, got {profile}"),
            });
        }
        let mut weights = vec![0.0; grid.n_nodes()];
        weights[grid.boundary_index(side)] = profile;
        Ok(Self {
            name: RegionName::Gamma,
            interval: None,
            weights,
        })
    }

    pub fn name(&self) -> RegionName {
        self.name
    }

    pub fn span(&self) -> Option<Interval> {
        self.interval
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0)
    }

    /// Nodes where the mask is nonzero.
    pub fn support(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| v * w)
            .collect()
    }

    pub fn apply_field(&self, field: &SpaceTimeField) -> SpaceTimeField {
        let mut out = field.clone();
        for k in 0..out.n_times() {
            for (v, w) in out.row_mut(k).iter_mut().zip(&self.weights) {
                *v *= w;
            }
        }
        out
    }

    /// Whether the two masks share at least one node.
    pub fn intersects(&self, other: &RegionMask) -> bool {
        self.weights
            .iter()
            .zip(&other.weights)
            .any(|(a, b)| *a != 0.0 && *b != 0.0)
    }

    /// Mask restricted to a sub-interval, used to shrink observation regions.
    pub fn restricted(&self, grid: &Grid, a: f64, b: f64) -> Result<Self> {
        let inner = RegionMask::interval(self.name, grid, a, b)?;
        let weights = self
            .weights
            .iter()
            .zip(&inner.weights)
            .map(|(x, y)| x * y)
            .collect();
        Ok(Self {
            name: self.name,
            interval: self
                .interval
                .and_then(|iv| iv.intersection(&Interval::new(a, b))),
            weights,
        })
    }
}

/// Samples on the `(n_steps + 1) x (n_interior + 2)` space-time grid, stored
/// row-major by time step.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    n_times: usize,
    n_nodes: usize,
    values: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(tgrid: &TimeGrid, grid: &Grid) -> Self {
        Self {
            n_times: tgrid.n_times(),
            n_nodes: grid.n_nodes(),
            values: vec![0.0; tgrid.n_times() * grid.n_nodes()],
        }
    }

    pub fn from_fn(tgrid: &TimeGrid, grid: &Grid, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut out = Self::zeros(tgrid, grid);
        for k in 0..tgrid.n_times() {
            let t = tgrid.t(k);
            for (i, v) in out.row_mut(k).iter_mut().enumerate() {
                *v = f(t, grid.x(i));
            }
        }
        out
    }

    /// Same spatial profile at every time.
    pub fn constant_in_time(tgrid: &TimeGrid, profile: &[f64]) -> Self {
        let mut values = Vec::with_capacity(tgrid.n_times() * profile.len());
        for _ in 0..tgrid.n_times() {
            values.extend_from_slice(profile);
        }
        Self {
            n_times: tgrid.n_times(),
            n_nodes: profile.len(),
            values,
        }
    }

    pub fn from_values(n_times: usize, n_nodes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_times * n_nodes {
            return Err(Error::DimensionMismatch {
                context: "space-time field",
                expected: n_times * n_nodes,
                found: values.len(),
            });
        }
        Ok(Self {
            n_times,
            n_nodes,
            values,
        })
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.n_nodes + i]
    }

    pub fn set(&mut self, k: usize, i: usize, v: f64) {
        self.values[k * self.n_nodes + i] = v;
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_nodes..(k + 1) * self.n_nodes]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.n_nodes..(k + 1) * self.n_nodes]
    }

    /// Time series of one node.
    pub fn node_series(&self, i: usize) -> Vec<f64> {
        (0..self.n_times).map(|k| self.get(k, i)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn matches(&self, tgrid: &TimeGrid, grid: &Grid) -> bool {
        self.n_times == tgrid.n_times() && self.n_nodes == grid.n_nodes()
    }

    pub fn check(&self, tgrid: &TimeGrid, grid: &Grid, context: &'static str) -> Result<()> {
        if self.n_nodes != grid.n_nodes() {
            return Err(Error::DimensionMismatch {
                context,
                expected: grid.n_nodes(),
                found: self.n_nodes,
            });
        }
        if self.n_times != tgrid.n_times() {
            return Err(Error::DimensionMismatch {
                context,
                expected: tgrid.n_times(),
                found: self.n_times,
            });
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|v| *v *= a);
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &SpaceTimeField) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }

    pub fn sub(&self, other: &SpaceTimeField) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn add(&self, other: &SpaceTimeField) -> Self {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }
}

impl crate::cg::CgVector for SpaceTimeField {
    fn dot(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    fn axpy(&mut self, a: f64, other: &Self) {
        SpaceTimeField::axpy(self, a, other)
    }

    fn scale(&mut self, a: f64) {
        SpaceTimeField::scale(self, a)
    }

    fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            ..*self
        }
    }
}

/// Tridiagonal matrix acting on the interior unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagonalOperator {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl TridiagonalOperator {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(u.len(), n, "tridiagonal apply: length mismatch");
        (0..n)
            .map(|i| {
                let mut s = self.diag[i] * u[i];
                if i > 0 {
                    s += self.lower[i - 1] * u[i - 1];
                }
                if i + 1 < n {
                    s += self.upper[i] * u[i + 1];
                }
                s
            })
            .collect()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.dim();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            if i > 0 {
                m[(i, i - 1)] = self.lower[i - 1];
            }
            if i + 1 < n {
                m[(i, i + 1)] = self.upper[i];
            }
        }
        m
    }
}

/// Second-difference Laplacian on the interior nodes with homogeneous
/// Dirichlet closure.
pub fn build_laplacian(grid: &Grid) -> Result<TridiagonalOperator> {
    let n = grid.n_interior();
    if n < 2 {
        return Err(Error::GridTooSmall(format!(
            "the Laplacian needs at least 2 interior nodes, got {n}"
        )));
    }
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    Ok(TridiagonalOperator {
        lower: vec![inv_h2; n - 1],
        diag: vec![-2.0 * inv_h2; n],
        upper: vec![inv_h2; n - 1],
    })
}

/// Trapezoidal approximation of `int_Omega mask * values dx`.
pub fn integrate_space(values: &[f64], grid: &Grid, mask: Option<&RegionMask>) -> Result<f64> {
    if values.len() != grid.n_nodes() {
        return Err(Error::DimensionMismatch {
            context: "integrate_space",
            expected: grid.n_nodes(),
            found: values.len(),
        });
    }
    let w = grid.trapezoid_weights();
    Ok(match mask {
        Some(m) => values
            .iter()
            .zip(&w)
            .zip(m.weights())
            .map(|((v, w), m)| v * w * m)
            .sum(),
        None => values.iter().zip(&w).map(|(v, w)| v * w).sum(),
    })
}

/// Space-time `L^2` norm by the composite trapezoid rule in `t` and `x`.
pub fn norm_l2_spacetime(
    field: &SpaceTimeField,
    grid: &Grid,
    tgrid: &TimeGrid,
    mask: Option<&RegionMask>,
) -> Result<f64> {
    field.check(tgrid, grid, "norm_l2_spacetime")?;
    let mut total = 0.0;
    for k in 0..tgrid.n_times() {
        let tw = if k == 0 || k == tgrid.n_steps() {
            0.5 * tgrid.dt()
        } else {
            tgrid.dt()
        };
        let sq: Vec<f64> = field.row(k).iter().map(|v| v * v).collect();
        total += tw * integrate_space(&sq, grid, mask)?;
    }
    Ok(total.sqrt())
}

/// Spatial inner product over interior nodes, `h sum_i a_i b_i`.
pub fn interior_inner(a: &[f64], b: &[f64], grid: &Grid) -> f64 {
    grid.h() * grid.interior().map(|i| a[i] * b[i]).sum::<f64>()
}

pub fn interior_norm(a: &[f64], grid: &Grid) -> f64 {
    interior_inner(a, a, grid).sqrt()
}

/// Time slots carrying a space-time quantity.
///
/// Sources and controls live on `k = 0..n_steps-1` (the step from `t_k` to
/// `t_{k+1}` uses slot `k`); states are compared with targets on
/// `k = 1..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeSlots {
    Source,
    State,
}

impl TimeSlots {
    pub fn range(&self, tgrid: &TimeGrid) -> std::ops::Range<usize> {
        match self {
            TimeSlots::Source => 0..tgrid.n_steps(),
            TimeSlots::State => 1..tgrid.n_steps() + 1,
        }
    }
}

/// Discrete `L^2((0,T) x region)` inner product used by every control
/// functional.
pub fn spacetime_inner(
    a: &SpaceTimeField,
    b: &SpaceTimeField,
    grid: &Grid,
    tgrid: &TimeGrid,
    mask: Option<&RegionMask>,
    slots: TimeSlots,
) -> f64 {
    let scale = tgrid.dt() * grid.h();
    let mut s = 0.0;
    for k in slots.range(tgrid) {
        let (ra, rb) = (a.row(k), b.row(k));
        match mask {
            Some(m) => {
                for i in grid.interior() {
                    s += m.weights()[i] * ra[i] * rb[i];
                }
            }
            None => {
                for i in grid.interior() {
                    s += ra[i] * rb[i];
                }
            }
        }
    }
    scale * s
}

pub fn spacetime_norm(
    a: &SpaceTimeField,
    grid: &Grid,
    tgrid: &TimeGrid,
    mask: Option<&RegionMask>,
    slots: TimeSlots,
) -> f64 {
    spacetime_inner(a, a, grid, tgrid, mask, slots).sqrt()
}
