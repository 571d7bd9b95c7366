//! Follower acting through Dirichlet data `gamma u` at one endpoint, with
//! cost `1/2 ||z - z_d||^2_{Od} + mu/2 int |u|^2 dt`.
//!
//! The discrete normal derivative is the transpose of the boundary lift of
//! the step operator, so the gradient `mu u - gamma dp/dnu` is exact for the
//! discrete functional and the best response is `u = gamma dp/dnu / mu`.

use std::io::Write;

use crate::cg::{conjugate_gradient, CgVector};
use crate::coupled::control_space::{self, Weighted};
use crate::coupled::{CoupledSystem, FollowerAction, FollowerControl, PicardOptions};
use crate::error::{Error, Result};
use crate::grid::{spacetime_inner, Side, SpaceTimeField, TimeGrid, TimeSlots};
use crate::leader::{solve_leader_cg, LeaderProblem, LeaderSolution};

#[derive(Debug, Clone)]
pub struct BoundaryFollowerProblem {
    pub system: CoupledSystem,
    /// Leader control `g` (only its restriction to `omega` matters).
    pub g: SpaceTimeField,
    pub z0: Vec<f64>,
    pub zd: SpaceTimeField,
}

#[derive(Debug, Clone)]
pub struct BoundaryOptimality {
    pub z: SpaceTimeField,
    pub p: SpaceTimeField,
    /// `u` on levels `0..=K` (level 0 unused and zero).
    pub u_hat: Vec<f64>,
    pub iterations: usize,
    pub contraction: f64,
}

#[derive(Debug, Clone)]
pub struct BoundaryFollowerSolution {
    pub u_hat: Vec<f64>,
    pub z: SpaceTimeField,
    pub p: SpaceTimeField,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl BoundaryFollowerProblem {
    pub fn new(system: CoupledSystem, g: SpaceTimeField, z0: Vec<f64>, zd: SpaceTimeField) -> Result<Self> {
        if !(system.mu > 0.0) {
            return Err(Error::InvalidParameter(format!("mu must be positive, got {}", system.mu)));
        }
        if !matches!(system.action, FollowerAction::Boundary { .. }) {
            return Err(Error::InvalidParameter("boundary follower problem needs a boundary action".into()));
        }
        g.check(system.tgrid(), system.grid(), "leader control")?;
        zd.check(system.tgrid(), system.grid(), "follower target")?;
        Ok(Self { system, g, z0, zd })
    }

    pub fn side(&self) -> Side {
        side_of(&self.system)
    }

    fn gamma(&self) -> f64 {
        match self.system.action {
            FollowerAction::Boundary { gamma, .. } => gamma,
            FollowerAction::Distributed(_) => unreachable!("checked in BoundaryFollowerProblem::new"),
        }
    }
}

fn side_of(system: &CoupledSystem) -> Side {
    match system.action {
        FollowerAction::Boundary { side, .. } => side,
        FollowerAction::Distributed(_) => unreachable!("boundary action required"),
    }
}

fn series_norm(u: &[f64], tgrid: &TimeGrid) -> f64 {
    (tgrid.dt() * u.iter().skip(1).map(|v| v * v).sum::<f64>()).sqrt()
}

/// Picard iteration on the coupled system with `u = gamma dp/dnu / mu`.
pub fn solve_boundary_optimality(problem: &BoundaryFollowerProblem, tol: f64) -> Result<BoundaryOptimality> {
    let sys = problem.system.with_picard(PicardOptions {
        tol,
        max_iter: problem.system.picard.max_iter,
    });
    let st = sys.solve_optimality(&problem.z0, Some(&problem.g), Some(&problem.zd))?;
    let FollowerControl::Boundary(u_hat) = st.control else {
        unreachable!("boundary action yields a boundary control")
    };
    Ok(BoundaryOptimality {
        z: st.z,
        p: st.p,
        u_hat,
        iterations: st.iterations,
        contraction: st.contraction,
    })
}

fn adjoint_gradient(problem: &BoundaryFollowerProblem, u: &[f64], p: &SpaceTimeField) -> Vec<f64> {
    let s = &problem.system;
    let flux = s.adjoint_op.boundary_flux(problem.side(), p);
    let gamma = problem.gamma();
    let mut g: Vec<f64> = u.iter().zip(&flux).map(|(u, d)| s.mu * u - gamma * d).collect();
    g[0] = 0.0;
    g
}

/// `J(g; u)` and its gradient in `L^2(0,T)` on levels `1..=K`.
pub fn boundary_follower_objective_gradient(
    problem: &BoundaryFollowerProblem,
    u: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let s = &problem.system;
    let (g, tg) = (s.grid(), s.tgrid());
    if u.len() != tg.n_times() {
        return Err(Error::DimensionMismatch {
            context: "boundary control",
            expected: tg.n_times(),
            found: u.len(),
        });
    }
    let z = s.state(&problem.z0, Some(&problem.g), &FollowerControl::Boundary(u.to_vec()))?;
    let e = z.sub(&problem.zd);
    let value = 0.5 * spacetime_inner(&e, &e, g, tg, Some(&s.target), TimeSlots::State)
        + 0.5 * s.mu * series_norm(u, tg).powi(2);
    let p = s.follower_adjoint(&z, Some(&problem.zd))?;
    Ok((value, adjoint_gradient(problem, u, &p)))
}

/// CG route on `u`, with Hessian `mu u - gamma dP(gamma u)/dnu`.
pub fn solve_boundary_follower_cg(
    problem: &BoundaryFollowerProblem,
    tol: f64,
    max_iter: usize,
) -> Result<BoundaryFollowerSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be positive, got {tol}")));
    }
    let s = &problem.system;
    let tg = s.tgrid();
    let w = control_space::series_weights(tg);
    let zeros = vec![0.0; s.grid().n_nodes()];
    let (_, g0) = boundary_follower_objective_gradient(problem, &vec![0.0; tg.n_times()])?;
    let b = Weighted {
        values: g0.iter().map(|v| -v).collect(),
        weights: w.clone(),
    }
    .project();
    let apply = |d: &Weighted| -> Result<Weighted> {
        let z = s.state(&zeros, None, &FollowerControl::Boundary(d.values.clone()))?;
        let p = s.follower_adjoint(&z, None)?;
        Ok(d.with_values(adjoint_gradient(problem, &d.values, &p)).project())
    };
    let abs_tol = tol * b.norm();
    let out = conjugate_gradient(apply, &b, b.zeros_like(), abs_tol, max_iter)?;
    let u_hat = out.solution.values;
    let z = s.state(&problem.z0, Some(&problem.g), &FollowerControl::Boundary(u_hat.clone()))?;
    let p = s.follower_adjoint(&z, Some(&problem.zd))?;
    let (objective, grad) = boundary_follower_objective_gradient(problem, &u_hat)?;
    Ok(BoundaryFollowerSolution {
        gradient_norm: series_norm(&grad, tg),
        u_hat,
        z,
        p,
        objective,
        iterations: out.iterations,
        converged: out.converged,
    })
}

/// Penalized null control with a boundary follower.
pub fn solve_boundary_leader(problem: &LeaderProblem, tol: f64, max_iter: usize) -> Result<LeaderSolution> {
    if !matches!(problem.system.action, FollowerAction::Boundary { .. }) {
        return Err(Error::InvalidParameter("boundary leader problem needs a boundary action".into()));
    }
    solve_leader_cg(problem, tol, max_iter)
}

/// Writes `t u_value node` for levels `1..=K`.
pub fn write_u_hat(tgrid: &TimeGrid, node: usize, u: &[f64], out: &mut impl Write) -> Result<()> {
    writeln!(out, "# t u_value node")?;
    for (k, v) in u.iter().enumerate().skip(1) {
        writeln!(out, "{:.6e} {:.12e} {}", tgrid.t(k), v, node)?;
    }
    Ok(())
}
