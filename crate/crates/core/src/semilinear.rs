//! Semilinear systems: nonlinearities, Newton time stepping, the outer
//! fixed-point loop over linearized leader problems, and the second-order
//! adjoint form of the follower Hessian.
//!
//! Two placements of the nonlinearity are supported. With
//! [`Placement::Reaction`] the state equation reads
//! `y_t - y_xx + int K y = G(y) + ...`; with [`Placement::Kernel`] it reads
//! `y_t - y_xx + int K G(y) = ...`. Linearizing around `ybar` gives
//! coefficients `a(w) = int_0^1 G'(ybar + s w) ds` for the state and
//! `b(w) = G'(ybar + w)` for the follower adjoint, entering as a reaction
//! `-a` or as a kernel column scale `a` respectively.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coupled::{field_norm, CoupledSystem, FollowerAction};
use crate::error::{Error, Result};
use crate::follower::FollowerProblem;
use crate::grid::{spacetime_inner, SpaceTimeField, TimeSlots};
use crate::leader::{solve_leader_cg, LeaderProblem, LeaderSolution};
use crate::parabolic::{BoundaryData, ParabolicOperator};

/// Built-in nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum NonlinearityKind {
    Zero,
    /// `G(s) = slope s`.
    Linear { slope: f64 },
    /// `G(s) = amplitude tanh(s)`.
    ScaledTanh { amplitude: f64 },
    /// `G(s) = amplitude s / sqrt(1 + (s/width)^2)`.
    SmoothedClip { amplitude: f64, width: f64 },
}

/// A `C^2` nonlinearity with a constant `L >= |G'| + |G''|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nonlinearity {
    kind: NonlinearityKind,
    bound: f64,
}

impl Nonlinearity {
    pub fn new(kind: NonlinearityKind) -> Result<Self> {
        let bound = match kind {
            NonlinearityKind::Zero => 0.0,
            NonlinearityKind::Linear { slope } => slope.abs(),
            // max |tanh''| = 4 / (3 sqrt 3)
            NonlinearityKind::ScaledTanh { amplitude } => amplitude.abs() * (1.0 + 4.0 / (3.0 * 3f64.sqrt())),
            NonlinearityKind::SmoothedClip { amplitude, width } => {
                if !(width > 0.0) {
                    return Err(Error::InvalidParameter(format!("clip width must be positive, got {width}")));
                }
                // |G''| peaks at s = width / 2.
                amplitude.abs() * (1.0 + 1.5 * 1.25f64.powf(-2.5) / width)
            }
        };
        let g = Self { kind, bound };
        if !bound.is_finite() {
            return Err(Error::InvalidParameter(format!("nonlinearity {kind:?} has no finite bound")));
        }
        g.check_bound()?;
        Ok(g)
    }

    pub fn zero() -> Self {
        Self {
            kind: NonlinearityKind::Zero,
            bound: 0.0,
        }
    }

    /// Replaces the bound, checking it on a wide sample grid.
    pub fn with_bound(self, bound: f64) -> Result<Self> {
        let g = Self { bound, ..self };
        g.check_bound()?;
        Ok(g)
    }

    /// Verifies `|G'(s)| + |G''(s)| <= L` on `[-100, 100]`.
    pub fn check_bound(&self) -> Result<()> {
        for i in 0..=20_000 {
            let s = -100.0 + i as f64 * 0.01;
            let v = self.derivative(s).abs() + self.second_derivative(s).abs();
            if v > self.bound * (1.0 + 1e-12) {
                return Err(Error::InvalidParameter(format!(
                    "|G'| + |G''| = {v} exceeds the bound {} at s = {s}",
                    self.bound
                )));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> NonlinearityKind {
        self.kind
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, NonlinearityKind::Zero)
    }

    pub fn value(&self, s: f64) -> f64 {
        match self.kind {
            NonlinearityKind::Zero => 0.0,
            NonlinearityKind::Linear { slope } => slope * s,
            NonlinearityKind::ScaledTanh { amplitude } => amplitude * s.tanh(),
            NonlinearityKind::SmoothedClip { amplitude, width } => {
                amplitude * s / (1.0 + (s / width).powi(2)).sqrt()
            }
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        match self.kind {
            NonlinearityKind::Zero => 0.0,
            NonlinearityKind::Linear { slope } => slope,
            NonlinearityKind::ScaledTanh { amplitude } => amplitude / s.cosh().powi(2),
            NonlinearityKind::SmoothedClip { amplitude, width } => {
                amplitude * (1.0 + (s / width).powi(2)).powf(-1.5)
            }
        }
    }

    pub fn second_derivative(&self, s: f64) -> f64 {
        match self.kind {
            NonlinearityKind::Zero | NonlinearityKind::Linear { .. } => 0.0,
            NonlinearityKind::ScaledTanh { amplitude } => -2.0 * amplitude * s.tanh() / s.cosh().powi(2),
            NonlinearityKind::SmoothedClip { amplitude, width } => {
                -3.0 * amplitude * s / (width * width) * (1.0 + (s / width).powi(2)).powf(-2.5)
            }
        }
    }
}

/// Where the nonlinearity enters the state equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// `G(y)` on the right side.
    Reaction,
    /// `int K G(y)` in place of the nonlocal term.
    Kernel,
}

impl Placement {
    /// Distributed followers use the reaction form, boundary followers the
    /// kernel form.
    pub fn for_action(action: &FollowerAction) -> Self {
        match action {
            FollowerAction::Distributed(_) => Placement::Reaction,
            FollowerAction::Boundary { .. } => Placement::Kernel,
        }
    }
}

const GAUSS_LEGENDRE_8: [(f64, f64); 4] = [
    (0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_3),
];

/// `a(w) = int_0^1 G'(ybar + s w) ds` (8-point Gauss-Legendre) and
/// `b(w) = G'(ybar + w)`, nodewise.
pub fn linearization_coeffs(
    w: &SpaceTimeField,
    ybar: &SpaceTimeField,
    g: &Nonlinearity,
) -> Result<(SpaceTimeField, SpaceTimeField)> {
    if w.n_times() != ybar.n_times() || w.n_nodes() != ybar.n_nodes() {
        return Err(Error::DimensionMismatch {
            context: "linearization coefficients",
            expected: ybar.values().len(),
            found: w.values().len(),
        });
    }
    let a: Vec<f64> = w
        .values()
        .iter()
        .zip(ybar.values())
        .map(|(&w, &y)| {
            GAUSS_LEGENDRE_8
                .iter()
                .map(|&(x, q)| {
                    0.5 * q * (g.derivative(y + 0.5 * (1.0 - x) * w) + g.derivative(y + 0.5 * (1.0 + x) * w))
                })
                .sum()
        })
        .collect();
    let b: Vec<f64> = w
        .values()
        .iter()
        .zip(ybar.values())
        .map(|(&w, &y)| g.derivative(y + w))
        .collect();
    Ok((
        SpaceTimeField::from_values(w.n_times(), w.n_nodes(), a)?,
        SpaceTimeField::from_values(w.n_times(), w.n_nodes(), b)?,
    ))
}

/// Operators of the linearized system: the state operator carries `a`, the
/// follower adjoint operator `b`.
pub fn linearized_system(
    base: &CoupledSystem,
    placement: Placement,
    a: &SpaceTimeField,
    b: &SpaceTimeField,
) -> Result<CoupledSystem> {
    let (g, tg) = (base.grid(), base.tgrid());
    let kernel = base.state_op.kernel().clone();
    let build = |c: &SpaceTimeField| match placement {
        Placement::Reaction => ParabolicOperator::with_coefficients(g, tg, kernel.clone(), None, Some(c.scaled(-1.0))),
        Placement::Kernel => ParabolicOperator::with_coefficients(g, tg, kernel.clone(), Some(c.clone()), None),
    };
    Ok(CoupledSystem {
        state_op: Arc::new(build(a)?),
        adjoint_op: Arc::new(build(b)?),
        ..base.clone()
    })
}

const NEWTON_MAX_ITER: usize = 50;

/// Implicit Euler for the semilinear state with Newton's method at each
/// step. `base` supplies the grid and kernel; its coefficients are ignored.
/// With `G = 0` this is exactly `base.forward`.
pub fn solve_state(
    base: &ParabolicOperator,
    g: &Nonlinearity,
    placement: Placement,
    y0: &[f64],
    source: Option<&SpaceTimeField>,
    boundary: &BoundaryData,
) -> Result<SpaceTimeField> {
    if g.is_zero() {
        return base.forward(y0, source, boundary);
    }
    let (grid, tgrid) = (base.grid(), base.tgrid());
    if y0.len() != grid.n_nodes() {
        return Err(Error::DimensionMismatch {
            context: "initial state",
            expected: grid.n_nodes(),
            found: y0.len(),
        });
    }
    if let Some(s) = source {
        s.check(tgrid, grid, "semilinear source")?;
    }
    let n = grid.n_interior();
    let m = grid.n_nodes();
    let h2 = grid.h() * grid.h();
    let inv_dt = 1.0 / tgrid.dt();
    let kernel = base.kernel();
    let mut out = SpaceTimeField::zeros(tgrid, grid);
    out.row_mut(0).copy_from_slice(y0);
    for k in 1..=tgrid.n_steps() {
        let mut y = out.row(k - 1).to_vec();
        y[0] = 0.0;
        y[m - 1] = 0.0;
        for (side, idx) in [(crate::grid::Side::Left, 0), (crate::grid::Side::Right, m - 1)] {
            if let Some(d) = boundary.get(side) {
                y[idx] = d[k];
            }
        }
        let rhs: Vec<f64> = (1..=n)
            .map(|i| out.get(k - 1, i) * inv_dt + source.map_or(0.0, |s| s.get(k - 1, i)))
            .collect();
        let nk = (!kernel.is_zero()).then(|| kernel.matrix(k));
        let mut converged = false;
        for _ in 0..NEWTON_MAX_ITER {
            let phi: Vec<f64> = match placement {
                Placement::Reaction => y.clone(),
                Placement::Kernel => y.iter().map(|&v| g.value(v)).collect(),
            };
            let mut res = DVector::zeros(n);
            let mut jac = DMatrix::zeros(n, n);
            for r in 0..n {
                let i = r + 1;
                let mut f = y[i] * inv_dt + (2.0 * y[i] - y[i - 1] - y[i + 1]) / h2 - rhs[r];
                jac[(r, r)] += inv_dt + 2.0 / h2;
                if r > 0 {
                    jac[(r, r - 1)] -= 1.0 / h2;
                }
                if r + 1 < n {
                    jac[(r, r + 1)] -= 1.0 / h2;
                }
                if let Some(nk) = nk {
                    for j in 0..m {
                        f += nk[(i, j)] * phi[j];
                    }
                    for c in 0..n {
                        let d = match placement {
                            Placement::Reaction => 1.0,
                            Placement::Kernel => g.derivative(y[c + 1]),
                        };
                        jac[(r, c)] += nk[(i, c + 1)] * d;
                    }
                }
                if placement == Placement::Reaction {
                    f -= g.value(y[i]);
                    jac[(r, r)] -= g.derivative(y[i]);
                }
                res[r] = f;
            }
            let delta = jac
                .lu()
                .solve(&res)
                .ok_or(Error::SingularStep { step: k })?;
            let mut size = 0.0f64;
            for r in 0..n {
                y[r + 1] -= delta[r];
                size = size.max(y[r + 1].abs());
            }
            if !delta.iter().all(|d| d.is_finite()) {
                return Err(Error::NonFinite { step: k });
            }
            if delta.amax() <= 1e-14 * (1.0 + size) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NewtonFailure {
                step: k,
                iterations: NEWTON_MAX_ITER,
            });
        }
        out.row_mut(k).copy_from_slice(&y);
    }
    Ok(out)
}

/// Semilinear Stackelberg problem in original variables.
#[derive(Debug, Clone)]
pub struct SemilinearProblem {
    /// Linear system supplying geometry, kernel, follower action and `mu`.
    pub base: CoupledSystem,
    pub nonlinearity: Nonlinearity,
    pub placement: Placement,
    pub epsilon: f64,
    pub y0: Vec<f64>,
    pub ybar0: Vec<f64>,
    pub yd: SpaceTimeField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub increment_norm: f64,
    pub terminal_norm: f64,
    /// `||w^{k+1} - w^k|| / ||w^k - w^{k-1}||`; `None` on the first iteration.
    pub contraction: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SemilinearRun {
    pub ybar: SpaceTimeField,
    /// Iterates `w^1, w^2, ...`.
    pub history: Vec<SpaceTimeField>,
    pub solutions: Vec<LeaderSolution>,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    /// Largest `|a|` or `|b|` over all iterates.
    pub coefficient_max: f64,
}

impl SemilinearRun {
    pub fn solution(&self) -> &LeaderSolution {
        self.solutions.last().expect("at least one outer iteration")
    }

    pub fn terminal_norm(&self) -> f64 {
        self.solution().terminal_norm
    }

    pub fn last_contraction(&self) -> Option<f64> {
        self.trace.iter().rev().find_map(|r| r.contraction)
    }

    /// Columnar text: `iter increment_norm terminal_norm contraction` (`nan`
    /// where undefined).
    pub fn write_trace(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "# iter increment_norm terminal_norm contraction")?;
        for r in &self.trace {
            writeln!(
                out,
                "{} {:.12e} {:.12e} {:.6e}",
                r.iter,
                r.increment_norm,
                r.terminal_norm,
                r.contraction.unwrap_or(f64::NAN)
            )?;
        }
        Ok(())
    }
}

fn uncontrolled(problem: &SemilinearProblem) -> Result<SpaceTimeField> {
    solve_state(
        &problem.base.state_op,
        &problem.nonlinearity,
        problem.placement,
        &problem.ybar0,
        None,
        &BoundaryData::homogeneous(),
    )
}

/// Picard loop over linearized leader problems, starting from `w = 0` and
/// stopping when `||w^{k+1} - w^k|| <= tol (1 + ||w^k||)` or when the next
/// linearization would coincide exactly with the current one.
pub fn solve_semilinear_stackelberg(
    problem: &SemilinearProblem,
    tol: f64,
    max_outer: usize,
    leader_tol: f64,
    leader_max_iter: usize,
) -> Result<SemilinearRun> {
    let base = &problem.base;
    let (grid, tgrid) = (*base.grid(), *base.tgrid());
    let g = &problem.nonlinearity;
    let ybar = uncontrolled(problem)?;
    let z0: Vec<f64> = problem.y0.iter().zip(&problem.ybar0).map(|(a, b)| a - b).collect();
    let zd = problem.yd.sub(&ybar);
    let mut w = SpaceTimeField::zeros(&tgrid, &grid);
    let mut coeffs = linearization_coeffs(&w, &ybar, g)?;
    let mut run = SemilinearRun {
        ybar: ybar.clone(),
        history: Vec::new(),
        solutions: Vec::new(),
        trace: Vec::new(),
        converged: false,
        coefficient_max: coeffs.0.max_abs().max(coeffs.1.max_abs()),
    };
    let mut prev_inc = None;
    for iter in 1..=max_outer {
        let sys = if g.is_zero() {
            base.clone()
        } else {
            linearized_system(base, problem.placement, &coeffs.0, &coeffs.1)?
        };
        let mut lp = LeaderProblem::new(sys, problem.epsilon, z0.clone(), zd.clone())?;
        lp.ybar = Some(ybar.clone());
        let sol = solve_leader_cg(&lp, leader_tol, leader_max_iter)?;
        let inc = field_norm(&sol.z.sub(&w), &grid, &tgrid);
        let contraction = prev_inc.and_then(|p: f64| (p > 0.0).then(|| inc / p));
        let next = linearization_coeffs(&sol.z, &ybar, g)?;
        run.coefficient_max = run.coefficient_max.max(next.0.max_abs()).max(next.1.max_abs());
        run.trace.push(TraceRow {
            iter,
            increment_norm: inc,
            terminal_norm: sol.terminal_norm,
            contraction,
        });
        let inner_ok = sol.converged;
        let small = inc <= tol * (1.0 + field_norm(&w, &grid, &tgrid));
        let exact = next.0 == coeffs.0 && next.1 == coeffs.1;
        w = sol.z.clone();
        run.history.push(sol.z.clone());
        run.solutions.push(sol);
        coeffs = next;
        if !inner_ok {
            return Ok(run);
        }
        if small || exact {
            run.converged = true;
            return Ok(run);
        }
        prev_inc = Some(inc);
    }
    Ok(run)
}

/// Distributed follower problem with the nonlinearity in reaction form.
/// `problem.z0` and `problem.zd` hold `y0` and `y_d`.
#[derive(Debug, Clone)]
pub struct SemilinearFollower {
    pub problem: FollowerProblem,
    pub nonlinearity: Nonlinearity,
}

#[derive(Debug, Clone)]
pub struct SemilinearFollowerState {
    pub y: SpaceTimeField,
    pub p: SpaceTimeField,
    pub v_hat: SpaceTimeField,
    pub iterations: usize,
}

impl SemilinearFollower {
    fn system(&self) -> &CoupledSystem {
        &self.problem.system
    }

    /// `y(v)`.
    pub fn state(&self, v: &SpaceTimeField) -> Result<SpaceTimeField> {
        let s = self.system();
        let mut src = s.omega.apply_field(&self.problem.f);
        src.axpy(1.0, &self.problem.observation().apply_field(v));
        solve_state(
            &s.state_op,
            &self.nonlinearity,
            Placement::Reaction,
            &self.problem.z0,
            Some(&src),
            &BoundaryData::homogeneous(),
        )
    }

    /// Step operator with reaction `-G'(y)`.
    fn tangent_operator(&self, y: &SpaceTimeField) -> Result<ParabolicOperator> {
        let s = self.system();
        let r = SpaceTimeField::from_values(
            y.n_times(),
            y.n_nodes(),
            y.values().iter().map(|&v| -self.nonlinearity.derivative(v)).collect(),
        )?;
        ParabolicOperator::with_coefficients(s.grid(), s.tgrid(), s.state_op.kernel().clone(), None, Some(r))
    }

    /// Adjoint `p` at the state `y`.
    pub fn adjoint(&self, y: &SpaceTimeField) -> Result<SpaceTimeField> {
        let s = self.system();
        let src = s.target.apply_field(&y.sub(&self.problem.zd));
        let zeros = vec![0.0; s.grid().n_nodes()];
        self.tangent_operator(y)?.backward(&zeros, Some(&src))
    }
}

/// `J(f; v)` for the semilinear state.
pub fn semilinear_follower_objective(sf: &SemilinearFollower, v: &SpaceTimeField) -> Result<f64> {
    let s = sf.system();
    let (g, tg) = (s.grid(), s.tgrid());
    let e = sf.state(v)?.sub(&sf.problem.zd);
    let track = spacetime_inner(&e, &e, g, tg, Some(&s.target), TimeSlots::State);
    let cost = spacetime_inner(v, v, g, tg, Some(sf.problem.observation()), TimeSlots::Source);
    Ok(0.5 * track + 0.5 * s.mu * cost)
}

/// `(mu v + p) 1_O` on the control slots.
pub fn semilinear_follower_gradient(sf: &SemilinearFollower, v: &SpaceTimeField) -> Result<SpaceTimeField> {
    let p = sf.adjoint(&sf.state(v)?)?;
    let mut g = v.scaled(sf.system().mu);
    g.axpy(1.0, &p);
    let mut g = sf.problem.observation().apply_field(&g);
    let last = g.n_times() - 1;
    g.row_mut(last).iter_mut().for_each(|x| *x = 0.0);
    Ok(g)
}

/// Picard iteration `v = -p/mu` on the semilinear optimality system.
pub fn solve_semilinear_follower(sf: &SemilinearFollower, tol: f64, max_iter: usize) -> Result<SemilinearFollowerState> {
    let s = sf.system();
    let (g, tg) = (s.grid(), s.tgrid());
    let o = sf.problem.observation();
    let mut p = s.zero_field();
    let mut first = None;
    let mut last_ratio = 0.0;
    let mut prev = 0.0;
    for it in 1..=max_iter {
        let v = o.apply_field(&p).scaled(-1.0 / s.mu);
        let y = sf.state(&v)?;
        let next = sf.adjoint(&y)?;
        let inc = field_norm(&next.sub(&p), g, tg);
        if !inc.is_finite() {
            return Err(Error::NonContraction {
                iterations: it,
                factor: f64::INFINITY,
            });
        }
        if prev > 0.0 {
            last_ratio = inc / prev;
        }
        let d1 = *first.get_or_insert(inc);
        if d1 > 0.0 && inc >= 1e3 * d1 {
            return Err(Error::NonContraction {
                iterations: it,
                factor: last_ratio,
            });
        }
        let size = field_norm(&next, g, tg);
        p = next;
        if inc <= tol * size || inc == 0.0 {
            let v_hat = o.apply_field(&p).scaled(-1.0 / s.mu);
            let y = sf.state(&v_hat)?;
            return Ok(SemilinearFollowerState {
                y,
                p,
                v_hat,
                iterations: it,
            });
        }
        prev = inc;
    }
    Err(Error::NonContraction {
        iterations: max_iter,
        factor: last_ratio,
    })
}

/// Bilinear form of the follower Hessian at `v`:
/// `B(w1, w2) = <eta, w2>_O + mu <w1, w2>_O`, where `phi` solves the tangent
/// equation driven by `w1 1_O` and `eta` the second-order adjoint with source
/// `G''(y) phi p + phi 1_Od`.
pub fn hessian_bilinear(
    sf: &SemilinearFollower,
    v: &SpaceTimeField,
    w1: &SpaceTimeField,
    w2: &SpaceTimeField,
) -> Result<f64> {
    let s = sf.system();
    let (g, tg) = (s.grid(), s.tgrid());
    let o = sf.problem.observation();
    let y = sf.state(v)?;
    let op = sf.tangent_operator(&y)?;
    let zeros = vec![0.0; g.n_nodes()];
    let p = op.backward(&zeros, Some(&s.target.apply_field(&y.sub(&sf.problem.zd))))?;
    let phi = op.forward(&zeros, Some(&o.apply_field(w1)), &BoundaryData::homogeneous())?;
    let mut src = s.target.apply_field(&phi);
    for k in 1..tg.n_times() {
        for i in g.interior() {
            let extra = sf.nonlinearity.second_derivative(y.get(k, i)) * phi.get(k, i) * p.get(k - 1, i);
            src.set(k, i, src.get(k, i) + extra);
        }
    }
    let eta = op.backward(&zeros, Some(&src))?;
    Ok(spacetime_inner(&eta, w2, g, tg, Some(o), TimeSlots::Source)
        + s.mu * spacetime_inner(w1, w2, g, tg, Some(o), TimeSlots::Source))
}

/// `D^2 J(f; v) (w1, w1)`.
pub fn hessian_quadratic_form(sf: &SemilinearFollower, v: &SpaceTimeField, w1: &SpaceTimeField) -> Result<f64> {
    hessian_bilinear(sf, v, w1, w1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupled::PicardOptions;
    use crate::grid::{Grid, RegionMask, RegionName, Side, TimeGrid};
    use crate::kernel::{assemble, KernelSpec};
    use crate::leader::reduce_to_null;
    use crate::verification::finite_difference_curvature;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tanh(c: f64) -> Nonlinearity {
        Nonlinearity::new(NonlinearityKind::ScaledTanh { amplitude: c }).unwrap()
    }

    fn base(boundary: bool, mu: f64) -> CoupledSystem {
        let g = Grid::unit(8).unwrap();
        let tg = TimeGrid::new(0.3, 8).unwrap();
        let k = Arc::new(assemble(&KernelSpec::eigen(1.0), &g, &tg).unwrap());
        let op = Arc::new(ParabolicOperator::new(&g, &tg, k).unwrap());
        let action = if boundary {
            FollowerAction::Boundary { side: Side::Right, gamma: 1.0 }
        } else {
            FollowerAction::Distributed(RegionMask::interval(RegionName::Observation, &g, 0.6, 0.9).unwrap())
        };
        CoupledSystem {
            omega: RegionMask::interval(RegionName::Omega, &g, 0.1, 0.5).unwrap(),
            target: RegionMask::interval(RegionName::Target, &g, 0.3, 0.8).unwrap(),
            action,
            mu,
            state_op: op.clone(),
            adjoint_op: op,
            picard: PicardOptions::default(),
        }
    }

    fn random_field(g: &Grid, tg: &TimeGrid, rng: &mut ChaCha8Rng, scale: f64) -> SpaceTimeField {
        let mut f = SpaceTimeField::from_fn(tg, g, |_, _| scale * rng.random_range(-1.0..1.0));
        for k in 0..f.n_times() {
            f.set(k, 0, 0.0);
            f.set(k, g.n_nodes() - 1, 0.0);
        }
        f
    }

    fn stackelberg(boundary: bool, g: Nonlinearity, eps: f64, zero_data: bool) -> SemilinearProblem {
        let b = base(boundary, 100.0);
        let grid = *b.grid();
        let y0 = if zero_data {
            vec![0.0; grid.n_nodes()]
        } else {
            grid.sample(|x| 2.0 * (std::f64::consts::PI * x).sin())
        };
        SemilinearProblem {
            placement: Placement::for_action(&b.action),
            yd: b.zero_field(),
            base: b,
            nonlinearity: g,
            epsilon: eps,
            y0,
            ybar0: vec![0.0; grid.n_nodes()],
        }
    }

    #[test]
    fn builtin_bounds_hold_and_bad_bounds_fail() {
        for kind in [
            NonlinearityKind::Zero,
            NonlinearityKind::Linear { slope: -0.7 },
            NonlinearityKind::ScaledTanh { amplitude: 0.3 },
            NonlinearityKind::SmoothedClip { amplitude: 2.0, width: 0.5 },
        ] {
            assert!(Nonlinearity::new(kind).is_ok(), "{kind:?}");
        }
        assert!(tanh(1.0).with_bound(1.5).is_err());
        assert!(Nonlinearity::new(NonlinearityKind::SmoothedClip { amplitude: 1.0, width: 0.0 }).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let clip = Nonlinearity::new(NonlinearityKind::SmoothedClip { amplitude: 1.5, width: 0.7 }).unwrap();
        for g in [tanh(0.4), clip] {
            for s in [-2.0, -0.3, 0.0, 0.8, 3.0] {
                let d = (g.value(s + 1e-6) - g.value(s - 1e-6)) / 2e-6;
                let dd = (g.derivative(s + 1e-6) - g.derivative(s - 1e-6)) / 2e-6;
                assert!((d - g.derivative(s)).abs() < 1e-8);
                assert!((dd - g.second_derivative(s)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn coefficients_of_linear_and_tanh() {
        let g = Grid::unit(6).unwrap();
        let tg = TimeGrid::new(1.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_field(&g, &tg, &mut rng, 2.0);
        let y = random_field(&g, &tg, &mut rng, 1.0);
        let lin = Nonlinearity::new(NonlinearityKind::Linear { slope: 0.6 }).unwrap();
        let (a, b) = linearization_coeffs(&w, &y, &lin).unwrap();
        assert!(a.values().iter().all(|v| (v - 0.6).abs() < 1e-15));
        assert!(b.values().iter().all(|v| *v == 0.6));
        let z = SpaceTimeField::zeros(&tg, &g);
        let (a, b) = linearization_coeffs(&z, &z, &tanh(1.0)).unwrap();
        assert!(a.values().iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!(b.values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn gauss_legendre_matches_fine_riemann_sum() {
        let g = Grid::unit(6).unwrap();
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_field(&g, &tg, &mut rng, 1.5);
        let y = random_field(&g, &tg, &mut rng, 0.5);
        let gt = tanh(0.8);
        let (a, _) = linearization_coeffs(&w, &y, &gt).unwrap();
        let m = 10_000;
        for (idx, (&wv, &yv)) in w.values().iter().zip(y.values()).enumerate() {
            let riemann: f64 = (0..m)
                .map(|j| gt.derivative(yv + (j as f64 + 0.5) / m as f64 * wv))
                .sum::<f64>()
                / m as f64;
            assert!((a.values()[idx] - riemann).abs() <= 1e-8, "{} vs {riemann}", a.values()[idx]);
        }
    }

    #[test]
    fn newton_state_reduces_to_linear_solves() {
        let b = base(false, 10.0);
        let (g, tg) = (*b.grid(), *b.tgrid());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = random_field(&g, &tg, &mut rng, 1.0);
        let y0 = g.sample(|x| x * (1.0 - x));
        let data = BoundaryData::on(Side::Right, (0..tg.n_times()).map(|k| 0.1 * k as f64).collect());
        let zero = solve_state(&b.state_op, &Nonlinearity::zero(), Placement::Reaction, &y0, Some(&src), &data).unwrap();
        assert_eq!(zero, b.state_op.forward(&y0, Some(&src), &data).unwrap());

        let kappa = 0.7;
        let lin = Nonlinearity::new(NonlinearityKind::Linear { slope: kappa }).unwrap();
        let newton = solve_state(&b.state_op, &lin, Placement::Reaction, &y0, Some(&src), &data).unwrap();
        let r = SpaceTimeField::from_fn(&tg, &g, |_, _| -kappa);
        let op = ParabolicOperator::with_coefficients(&g, &tg, b.state_op.kernel().clone(), None, Some(r)).unwrap();
        let direct = op.forward(&y0, Some(&src), &data).unwrap();
        assert!(newton.sub(&direct).max_abs() <= 1e-12);

        let newton = solve_state(&b.state_op, &lin, Placement::Kernel, &y0, Some(&src), &data).unwrap();
        let c = SpaceTimeField::from_fn(&tg, &g, |_, _| kappa);
        let op = ParabolicOperator::with_coefficients(&g, &tg, b.state_op.kernel().clone(), Some(c), None).unwrap();
        let direct = op.forward(&y0, Some(&src), &data).unwrap();
        assert!(newton.sub(&direct).max_abs() <= 1e-12);
    }

    #[test]
    fn zero_nonlinearity_reproduces_linear_leader_exactly() {
        for boundary in [false, true] {
            let p = stackelberg(boundary, Nonlinearity::zero(), 1e-3, false);
            let run = solve_semilinear_stackelberg(&p, 1e-8, 10, 1e-10, 500).unwrap();
            assert!(run.converged);
            assert_eq!(run.trace.len(), 1);
            let lp = reduce_to_null(p.base.clone(), p.epsilon, &p.y0, &p.ybar0, &p.yd).unwrap();
            let lin = solve_leader_cg(&lp, 1e-10, 500).unwrap();
            assert_eq!(run.solution().f_hat, lin.f_hat);
            assert_eq!(run.solution().z, lin.z);
        }
    }

    #[test]
    fn zero_data_is_an_immediate_fixed_point() {
        let p = stackelberg(false, tanh(0.5), 1e-3, true);
        let run = solve_semilinear_stackelberg(&p, 1e-8, 10, 1e-10, 500).unwrap();
        assert!(run.converged);
        assert_eq!(run.trace.len(), 1);
        assert_eq!(run.trace[0].increment_norm, 0.0);
        assert_eq!(run.terminal_norm(), 0.0);
    }

    #[test]
    fn tanh_run_contracts_and_stays_close_to_linear() {
        for boundary in [false, true] {
            let lin = solve_semilinear_stackelberg(&stackelberg(boundary, Nonlinearity::zero(), 1e-4, false), 1e-8, 10, 1e-10, 2000)
                .unwrap();
            let p = stackelberg(boundary, tanh(0.1), 1e-4, false);
            let run = solve_semilinear_stackelberg(&p, 1e-8, 30, 1e-10, 2000).unwrap();
            assert!(run.converged, "boundary={boundary}");
            assert!(run.last_contraction().unwrap() < 1.0);
            assert!(run.terminal_norm() <= 2.0 * lin.terminal_norm());
            assert!(run.coefficient_max <= p.nonlinearity.bound());
        }
    }

    #[test]
    fn trace_format() {
        let p = stackelberg(false, tanh(0.1), 1e-2, false);
        let run = solve_semilinear_stackelberg(&p, 1e-6, 30, 1e-9, 500).unwrap();
        let mut out = Vec::new();
        run.write_trace(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# iter increment_norm terminal_norm contraction");
        assert_eq!(lines.len(), run.trace.len() + 1);
        assert!(lines[1].starts_with("1 ") && lines[1].ends_with("NaN"));
    }

    fn follower(mu: f64, amplitude: f64, seed: u64) -> (SemilinearFollower, SpaceTimeField) {
        let b = base(false, mu);
        let (g, tg) = (*b.grid(), *b.tgrid());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = b.omega.apply_field(&random_field(&g, &tg, &mut rng, 1.0));
        let yd = random_field(&g, &tg, &mut rng, 1.0);
        let y0 = g.sample(|x| 1.5 * (std::f64::consts::PI * x).sin());
        let problem = FollowerProblem::new(b, f, y0, yd).unwrap();
        let sf = SemilinearFollower {
            problem,
            nonlinearity: tanh(amplitude),
        };
        let v_hat = solve_semilinear_follower(&sf, 1e-13, 200).unwrap().v_hat;
        (sf, v_hat)
    }

    #[test]
    fn follower_fixed_point_is_stationary() {
        let (sf, v_hat) = follower(10.0, 1.0, 4);
        let grad = semilinear_follower_gradient(&sf, &v_hat).unwrap();
        assert!(grad.max_abs() <= 1e-10);
    }

    #[test]
    fn hessian_matches_second_difference() {
        let (sf, v_hat) = follower(10.0, 1.0, 5);
        let s = &sf.problem.system;
        let (g, tg) = (*s.grid(), *s.tgrid());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = sf.problem.observation().apply_field(&random_field(&g, &tg, &mut rng, 1.0));
        let h = hessian_quadratic_form(&sf, &v_hat, &w).unwrap();
        let fd = finite_difference_curvature(|v: &SpaceTimeField| semilinear_follower_objective(&sf, v).unwrap(), &v_hat, &w, 1e-3);
        assert!((h - fd).abs() <= 1e-4 * h.abs(), "{h} vs {fd}");
        let zero = SpaceTimeField::zeros(&tg, &g);
        assert_eq!(hessian_quadratic_form(&sf, &v_hat, &zero).unwrap(), 0.0);
    }

    #[test]
    fn hessian_is_symmetric() {
        let (sf, v_hat) = follower(10.0, 1.0, 7);
        let s = &sf.problem.system;
        let (g, tg) = (*s.grid(), *s.tgrid());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let w1 = sf.problem.observation().apply_field(&random_field(&g, &tg, &mut rng, 1.0));
            let w2 = sf.problem.observation().apply_field(&random_field(&g, &tg, &mut rng, 1.0));
            let a = hessian_bilinear(&sf, &v_hat, &w1, &w2).unwrap();
            let b = hessian_bilinear(&sf, &v_hat, &w2, &w1).unwrap();
            assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()));
        }
    }

    #[test]
    fn hessian_is_positive_for_large_mu() {
        let (sf, v_hat) = follower(1e3, 1.0, 9);
        let s = &sf.problem.system;
        let (g, tg) = (*s.grid(), *s.tgrid());
        let o = sf.problem.observation();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dirs: Vec<SpaceTimeField> = (0..20)
            .map(|_| o.apply_field(&random_field(&g, &tg, &mut rng, 1.0)))
            .collect();
        let norm2 = |w: &SpaceTimeField| spacetime_inner(w, w, &g, &tg, Some(o), TimeSlots::Source);
        let c_emp = dirs
            .iter()
            .map(|w| (hessian_quadratic_form(&sf, &v_hat, w).unwrap() - 1e3 * norm2(w)).abs() / norm2(w))
            .fold(0.0, f64::max);
        assert!(1e3 >= 10.0 * c_emp, "C_emp = {c_emp}");
        for w in &dirs {
            let q = hessian_quadratic_form(&sf, &v_hat, w).unwrap();
            assert!(q >= (1e3 - c_emp) * norm2(w) * (1.0 - 1e-12));
            assert!(q > 0.0);
        }
    }
}
