//! The distributed follower: for a fixed leader `f`, minimize
//! `J(f; v) = 1/2 ||z - z_d||^2_{Od} + mu/2 ||v||^2_O`.
//!
//! Two independent routes are kept: conjugate gradients on `v` with adjoint
//! gradients, and Picard iteration on the optimality system. The best response
//! is `v = -p/mu` on `O`.

use crate::cg::{conjugate_gradient, CgVector};
use crate::coupled::control_space::{self, Weighted};
use crate::coupled::{CoupledSystem, FollowerAction, FollowerControl, OptimalityState, PicardOptions};
use crate::error::{Error, Result};
use crate::grid::{interior_norm, spacetime_inner, spacetime_norm, RegionMask, SpaceTimeField, TimeSlots};

#[derive(Debug, Clone)]
pub struct FollowerProblem {
    pub system: CoupledSystem,
    /// Leader control (only its restriction to `omega` matters).
    pub f: SpaceTimeField,
    pub z0: Vec<f64>,
    pub zd: SpaceTimeField,
}

#[derive(Debug, Clone)]
pub struct FollowerSolution {
    pub v_hat: SpaceTimeField,
    pub z: SpaceTimeField,
    pub p: SpaceTimeField,
    pub objective: f64,
    /// `||mu v + p||` on `(0,T) x O`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FollowerProblem {
    pub fn new(system: CoupledSystem, f: SpaceTimeField, z0: Vec<f64>, zd: SpaceTimeField) -> Result<Self> {
        if !(system.mu > 0.0) {
            return Err(Error::InvalidParameter(format!("mu must be positive, got {}", system.mu)));
        }
        let FollowerAction::Distributed(o) = &system.action else {
            return Err(Error::InvalidParameter("distributed follower problem needs a region O".into()));
        };
        if system.omega.intersects(o) {
            return Err(Error::Hypothesis("omega and O must be disjoint".into()));
        }
        Ok(Self { system, f, z0, zd })
    }

    pub fn observation(&self) -> &RegionMask {
        match &self.system.action {
            FollowerAction::Distributed(o) => o,
            FollowerAction::Boundary { .. } => unreachable!("checked in FollowerProblem::new"),
        }
    }

    fn weights(&self) -> std::sync::Arc<Vec<f64>> {
        let s = &self.system;
        control_space::field_weights(s.grid(), s.tgrid(), self.observation())
    }

    fn state(&self, v: &SpaceTimeField) -> Result<SpaceTimeField> {
        self.system
            .state(&self.z0, Some(&self.f), &FollowerControl::Distributed(v.clone()))
    }
}

/// `J(f; v)`.
pub fn objective(problem: &FollowerProblem, v: &SpaceTimeField) -> Result<f64> {
    let s = &problem.system;
    let (g, tg) = (s.grid(), s.tgrid());
    let z = problem.state(v)?;
    let e = z.sub(&problem.zd);
    let track = spacetime_inner(&e, &e, g, tg, Some(&s.target), TimeSlots::State);
    let cost = spacetime_inner(v, v, g, tg, Some(problem.observation()), TimeSlots::Source);
    Ok(0.5 * track + 0.5 * s.mu * cost)
}

/// `(mu v + p) 1_O` on the control slots.
pub fn gradient(problem: &FollowerProblem, v: &SpaceTimeField) -> Result<SpaceTimeField> {
    let z = problem.state(v)?;
    let p = problem.system.follower_adjoint(&z, Some(&problem.zd))?;
    Ok(masked_gradient(problem, v, &p))
}

fn masked_gradient(problem: &FollowerProblem, v: &SpaceTimeField, p: &SpaceTimeField) -> SpaceTimeField {
    let mut g = v.scaled(problem.system.mu);
    g.axpy(1.0, p);
    let mut g = problem.observation().apply_field(&g);
    let last = g.n_times() - 1;
    g.row_mut(last).iter_mut().for_each(|x| *x = 0.0);
    g
}

fn residual_norm(problem: &FollowerProblem, v: &SpaceTimeField, p: &SpaceTimeField) -> f64 {
    let s = &problem.system;
    spacetime_norm(
        &masked_gradient(problem, v, p),
        s.grid(),
        s.tgrid(),
        None,
        TimeSlots::Source,
    )
}

/// Minimizes `J(f; .)` by conjugate gradients. Stops when
/// `||grad J(v)|| <= tol ||grad J(0)||`; on `max_iter` returns the last
/// iterate with `converged = false`.
pub fn solve_follower_cg(problem: &FollowerProblem, tol: f64, max_iter: usize) -> Result<FollowerSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be positive, got {tol}")));
    }
    let s = &problem.system;
    let w = problem.weights();
    let zero = s.zero_field();
    let zeros = vec![0.0; s.grid().n_nodes()];
    // b = -grad J(0).
    let g0 = gradient(problem, &zero)?;
    let b = control_space::from_field(&g0.scaled(-1.0), &w);
    let apply = |d: &Weighted| -> Result<Weighted> {
        let v = control_space::to_field(d, &zero);
        let z = s.state(&zeros, None, &FollowerControl::Distributed(v.clone()))?;
        let p = s.follower_adjoint(&z, None)?;
        Ok(control_space::from_field(&masked_gradient(problem, &v, &p), &w))
    };
    let abs_tol = tol * b.norm();
    let out = conjugate_gradient(apply, &b, b.zeros_like(), abs_tol, max_iter)?;
    let v_hat = control_space::to_field(&out.solution, &zero);
    let z = problem.state(&v_hat)?;
    let p = s.follower_adjoint(&z, Some(&problem.zd))?;
    let residual = residual_norm(problem, &v_hat, &p);
    Ok(FollowerSolution {
        objective: objective(problem, &v_hat)?,
        v_hat,
        z,
        p,
        residual,
        iterations: out.iterations,
        converged: out.converged,
    })
}

/// Picard route: `v` eliminated through `v = -p/mu`.
pub fn solve_optimality_system(problem: &FollowerProblem, tol: f64) -> Result<OptimalityState> {
    let sys = problem.system.with_picard(PicardOptions {
        tol,
        max_iter: problem.system.picard.max_iter,
    });
    sys.solve_optimality(&problem.z0, Some(&problem.f), Some(&problem.zd))
}

/// Empirical `||v|| / (||f||_omega + ||z0||)`; `None` when the denominator
/// vanishes.
pub fn estimate_control_bound(problem: &FollowerProblem, tol: f64) -> Result<Option<f64>> {
    let s = &problem.system;
    let (g, tg) = (s.grid(), s.tgrid());
    let denom = spacetime_norm(&problem.f, g, tg, Some(&s.omega), TimeSlots::Source) + interior_norm(&problem.z0, g);
    if denom == 0.0 {
        return Ok(None);
    }
    let sol = solve_follower_cg(problem, tol, 500)?;
    let num = spacetime_norm(&sol.v_hat, g, tg, Some(problem.observation()), TimeSlots::Source);
    Ok(Some(num / denom))
}
