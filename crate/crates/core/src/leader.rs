//! The leader: penalized null control of the follower optimality system,
//!
//! ```text
//! J_eps(f) = 1/(2 eps) ||z_f(T)||^2 + 1/2 ||f||^2_omega,
//! ```
//!
//! minimized by conjugate gradients. The gradient is `f + rho 1_omega` where
//! the adjoint pair starts from `rho(T) = z(T)/eps`; at the minimizer
//! `f = -rho` on `omega`, which is the usual characterization up to the sign
//! convention of `rho`. The same code serves distributed and boundary
//! followers.

use std::io::Write;

use crate::cg::{conjugate_gradient, CgVector};
use crate::coupled::control_space::{self, Weighted};
use crate::coupled::{AdjointPair, CoupledSystem, OptimalityState, PicardOptions};
use crate::error::{Error, Result};
use crate::grid::{interior_inner, interior_norm, spacetime_inner, spacetime_norm, SpaceTimeField, TimeSlots};
use crate::parabolic::BoundaryData;

/// Smallest admissible penalty.
pub const MIN_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct LeaderProblem {
    pub system: CoupledSystem,
    pub epsilon: f64,
    /// Initial deviation `z0 = y0 - ybar0`.
    pub z0: Vec<f64>,
    /// Target deviation `z_d = y_d - ybar`.
    pub zd: SpaceTimeField,
    /// Uncontrolled trajectory, when the problem came from original variables.
    pub ybar: Option<SpaceTimeField>,
}

#[derive(Debug, Clone)]
pub struct LeaderSolution {
    pub f_hat: SpaceTimeField,
    pub z: SpaceTimeField,
    pub p: SpaceTimeField,
    pub rho: SpaceTimeField,
    pub psi: SpaceTimeField,
    pub terminal_norm: f64,
    pub control_norm: f64,
    /// `||f + rho||_omega`.
    pub characterization_residual: f64,
    pub duality_gap: f64,
    pub objective: f64,
    pub cg_iterations: usize,
    pub converged: bool,
    /// CG residual stopped decreasing (expected for very small `eps`).
    pub stagnated: bool,
}

impl LeaderProblem {
    pub fn new(system: CoupledSystem, epsilon: f64, z0: Vec<f64>, zd: SpaceTimeField) -> Result<Self> {
        if !(epsilon >= MIN_EPSILON && epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be at least {MIN_EPSILON:e}, got {epsilon}"
            )));
        }
        if !(system.mu > 0.0) {
            return Err(Error::InvalidParameter(format!("mu must be positive, got {}", system.mu)));
        }
        zd.check(system.tgrid(), system.grid(), "leader target")?;
        if z0.len() != system.grid().n_nodes() {
            return Err(Error::DimensionMismatch {
                context: "leader initial state",
                expected: system.grid().n_nodes(),
                found: z0.len(),
            });
        }
        Ok(Self {
            system,
            epsilon,
            z0,
            zd,
            ybar: None,
        })
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        let mut p = Self::new(self.system.clone(), epsilon, self.z0.clone(), self.zd.clone())?;
        p.ybar = self.ybar.clone();
        Ok(p)
    }

    fn weights(&self) -> std::sync::Arc<Vec<f64>> {
        let s = &self.system;
        control_space::field_weights(s.grid(), s.tgrid(), &s.omega)
    }

    fn terminal(&self, z: &SpaceTimeField) -> Vec<f64> {
        z.row(z.n_times() - 1).to_vec()
    }

    fn control_norm(&self, f: &SpaceTimeField) -> f64 {
        let s = &self.system;
        spacetime_norm(f, s.grid(), s.tgrid(), Some(&s.omega), TimeSlots::Source)
    }
}

/// Builds the problem in deviation variables: `ybar` solves the uncontrolled
/// equation from `ybar0`, `z0 = y0 - ybar0` and `z_d = y_d - ybar`.
pub fn reduce_to_null(
    system: CoupledSystem,
    epsilon: f64,
    y0: &[f64],
    ybar0: &[f64],
    yd: &SpaceTimeField,
) -> Result<LeaderProblem> {
    let ybar = system
        .state_op
        .forward(ybar0, None, &BoundaryData::homogeneous())?;
    let z0: Vec<f64> = y0.iter().zip(ybar0).map(|(a, b)| a - b).collect();
    let zd = yd.sub(&ybar);
    let mut p = LeaderProblem::new(system, epsilon, z0, zd)?;
    p.ybar = Some(ybar);
    Ok(p)
}

fn optimality(problem: &LeaderProblem, sys: &CoupledSystem, f: &SpaceTimeField) -> Result<OptimalityState> {
    sys.solve_optimality(&problem.z0, Some(f), Some(&problem.zd))
}

/// `J_eps(f)`.
pub fn leader_objective(problem: &LeaderProblem, f: &SpaceTimeField) -> Result<f64> {
    let st = optimality(problem, &problem.system, f)?;
    let zt = problem.terminal(&st.z);
    let g = problem.system.grid();
    Ok(0.5 / problem.epsilon * interior_inner(&zt, &zt, g) + 0.5 * problem.control_norm(f).powi(2))
}

fn omega_gradient(problem: &LeaderProblem, f: &SpaceTimeField, rho: &SpaceTimeField) -> SpaceTimeField {
    let mut g = problem.system.omega.apply_field(&f.add(rho));
    let last = g.n_times() - 1;
    g.row_mut(last).iter_mut().for_each(|x| *x = 0.0);
    g
}

fn adjoint_pair(problem: &LeaderProblem, sys: &CoupledSystem, z: &SpaceTimeField) -> Result<AdjointPair> {
    let zt: Vec<f64> = problem.terminal(z).iter().map(|v| v / problem.epsilon).collect();
    sys.solve_adjoint_pair(&zt)
}

/// `(f + rho) 1_omega` on the control slots.
pub fn leader_gradient(problem: &LeaderProblem, f: &SpaceTimeField) -> Result<SpaceTimeField> {
    let st = optimality(problem, &problem.system, f)?;
    let pair = adjoint_pair(problem, &problem.system, &st.z)?;
    Ok(omega_gradient(problem, f, &pair.rho))
}

fn inner_system(problem: &LeaderProblem, tol: f64) -> CoupledSystem {
    let base = problem.system.picard;
    problem.system.with_picard(PicardOptions {
        tol: base.tol.min(tol / 100.0),
        max_iter: base.max_iter,
    })
}

/// Minimizes `J_eps` by CG, stopping when `||grad|| <= tol ||grad(0)||`.
pub fn solve_leader_cg(problem: &LeaderProblem, tol: f64, max_iter: usize) -> Result<LeaderSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be positive, got {tol}")));
    }
    let sys = inner_system(problem, tol);
    let w = problem.weights();
    let zero = sys.zero_field();
    let zeros = vec![0.0; sys.grid().n_nodes()];
    let g0 = {
        let st = optimality(problem, &sys, &zero)?;
        let pair = adjoint_pair(problem, &sys, &st.z)?;
        omega_gradient(problem, &zero, &pair.rho)
    };
    let b = control_space::from_field(&g0.scaled(-1.0), &w);
    let apply = |d: &Weighted| -> Result<Weighted> {
        let f = control_space::to_field(d, &zero);
        let st = sys.solve_optimality(&zeros, Some(&f), None)?;
        let pair = adjoint_pair(problem, &sys, &st.z)?;
        Ok(control_space::from_field(&omega_gradient(problem, &f, &pair.rho), &w))
    };
    let abs_tol = tol * b.norm();
    let out = conjugate_gradient(apply, &b, b.zeros_like(), abs_tol, max_iter)?;
    let f_hat = control_space::to_field(&out.solution, &zero);
    finish(problem, &sys, f_hat, out.iterations, out.converged, out.stagnated)
}

fn finish(
    problem: &LeaderProblem,
    sys: &CoupledSystem,
    f_hat: SpaceTimeField,
    iterations: usize,
    converged: bool,
    stagnated: bool,
) -> Result<LeaderSolution> {
    let st = optimality(problem, sys, &f_hat)?;
    let pair = adjoint_pair(problem, sys, &st.z)?;
    let g = sys.grid();
    let zt = problem.terminal(&st.z);
    let terminal_norm = interior_norm(&zt, g);
    let control_norm = problem.control_norm(&f_hat);
    let residual = spacetime_norm(
        &omega_gradient(problem, &f_hat, &pair.rho),
        g,
        sys.tgrid(),
        None,
        TimeSlots::Source,
    );
    let mut sol = LeaderSolution {
        objective: 0.5 / problem.epsilon * terminal_norm.powi(2) + 0.5 * control_norm.powi(2),
        f_hat,
        z: st.z,
        p: st.p,
        rho: pair.rho,
        psi: pair.psi,
        terminal_norm,
        control_norm,
        characterization_residual: residual,
        duality_gap: 0.0,
        cg_iterations: iterations,
        converged,
        stagnated,
    };
    sol.duality_gap = duality_identity_check(&sol, problem);
    Ok(sol)
}

/// Relative gap `|L - R| / (1 + |L|)` in
/// `||f||^2 + ||z(T)||^2 / eps = <rho(0), z0> - int int z_d 1_Od psi`.
pub fn duality_identity_check(solution: &LeaderSolution, problem: &LeaderProblem) -> f64 {
    let s = &problem.system;
    let (g, tg) = (s.grid(), s.tgrid());
    let lhs = solution.control_norm.powi(2) + solution.terminal_norm.powi(2) / problem.epsilon;
    let rhs = interior_inner(solution.rho.row(0), &problem.z0, g)
        - spacetime_inner(&problem.zd, &solution.psi, g, tg, Some(&s.target), TimeSlots::State);
    (lhs - rhs).abs() / (1.0 + lhs.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub terminal_norm: f64,
    pub control_norm: f64,
    pub cg_iters: usize,
    pub duality_gap: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of `log ||z_eps(T)||` against `log eps`; `None`
    /// when some terminal norm vanishes or fewer than two rows exist.
    pub slope: Option<f64>,
    /// `||z_eps(T)||` nonincreasing as `eps` decreases.
    pub terminal_monotone: bool,
    /// `||f_eps||` nondecreasing as `eps` decreases.
    pub control_monotone: bool,
    /// `max ||f_eps|| / min ||f_eps||`.
    pub control_ratio: f64,
    /// Message of the failure that cut the sweep short, if any.
    pub error: Option<String>,
}

impl SweepReport {
    pub fn from_rows(rows: Vec<SweepRow>, error: Option<String>) -> Self {
        let tn: Vec<f64> = rows.iter().map(|r| r.terminal_norm).collect();
        let cn: Vec<f64> = rows.iter().map(|r| r.control_norm).collect();
        let slope = if rows.len() >= 2 && tn.iter().all(|v| *v > 0.0) {
            let xs: Vec<f64> = rows.iter().map(|r| r.epsilon.ln()).collect();
            let ys: Vec<f64> = tn.iter().map(|v| v.ln()).collect();
            Some(least_squares_slope(&xs, &ys))
        } else {
            None
        };
        let max = cn.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = cn.iter().cloned().fold(f64::INFINITY, f64::min);
        Self {
            slope,
            terminal_monotone: tn.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)),
            control_monotone: cn.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-12)),
            control_ratio: if min > 0.0 { max / min } else { f64::NAN },
            rows,
            error,
        }
    }

    /// Columnar text: `epsilon terminal_norm control_norm cg_iters duality_gap`.
    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "# epsilon terminal_norm control_norm cg_iters duality_gap")?;
        for r in &self.rows {
            writeln!(
                out,
                "{:.6e} {:.12e} {:.12e} {} {:.6e}",
                r.epsilon, r.terminal_norm, r.control_norm, r.cg_iters, r.duality_gap
            )?;
        }
        Ok(())
    }
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Solves the leader problem for each `eps` (decreasing, at least four values).
/// With `parallel` the solves run on scoped threads; results do not depend on
/// it. The sweep stops at the first solve that fails or exhausts `max_iter`.
pub fn epsilon_sweep(
    problem: &LeaderProblem,
    eps_list: &[f64],
    tol: f64,
    max_iter: usize,
    parallel: bool,
) -> Result<SweepReport> {
    if eps_list.len() < 4 {
        return Err(Error::InvalidParameter("an epsilon sweep needs at least 4 values".into()));
    }
    if eps_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidParameter("epsilon values must be strictly decreasing".into()));
    }
    let problems = eps_list
        .iter()
        .map(|&e| problem.with_epsilon(e))
        .collect::<Result<Vec<_>>>()?;
    let run = |p: &LeaderProblem| solve_leader_cg(p, tol, max_iter);
    let results: Vec<Result<LeaderSolution>> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = problems.iter().map(|p| scope.spawn(move || run(p))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        })
    } else {
        let mut out = Vec::new();
        for p in &problems {
            let r = run(p);
            let stop = !matches!(&r, Ok(s) if s.converged);
            out.push(r);
            if stop {
                break;
            }
        }
        out
    };
    let mut rows = Vec::new();
    let mut error = None;
    for (p, r) in problems.iter().zip(results) {
        match r {
            Ok(s) => {
                rows.push(SweepRow {
                    epsilon: p.epsilon,
                    terminal_norm: s.terminal_norm,
                    control_norm: s.control_norm,
                    cg_iters: s.cg_iterations,
                    duality_gap: s.duality_gap,
                    converged: s.converged,
                });
                if !s.converged {
                    error = Some(format!("CG did not converge at epsilon = {:e}", p.epsilon));
                    break;
                }
            }
            Err(e) => {
                error = Some(format!("epsilon = {:e}: {e}", p.epsilon));
                break;
            }
        }
    }
    Ok(SweepReport::from_rows(rows, error))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupled::FollowerAction;
    use crate::grid::{Grid, RegionMask, RegionName, Side, TimeGrid};
    use crate::kernel::{assemble, KernelSpec};
    use crate::parabolic::ParabolicOperator;
    use crate::verification::finite_difference_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    pub(crate) fn instance(boundary: bool, mu: f64, eps: f64, seed: u64) -> LeaderProblem {
        let g = Grid::unit(8).unwrap();
        let tg = TimeGrid::new(0.3, 8).unwrap();
        let k = Arc::new(assemble(&KernelSpec::eigen(1.0), &g, &tg).unwrap());
        let op = Arc::new(ParabolicOperator::new(&g, &tg, k).unwrap());
        let action = if boundary {
            FollowerAction::Boundary { side: Side::Right, gamma: 1.0 }
        } else {
            FollowerAction::Distributed(RegionMask::interval(RegionName::Observation, &g, 0.6, 0.9).unwrap())
        };
        let sys = CoupledSystem {
            omega: RegionMask::interval(RegionName::Omega, &g, 0.1, 0.5).unwrap(),
            target: RegionMask::interval(RegionName::Target, &g, 0.3, 0.8).unwrap(),
            action,
            mu,
            state_op: op.clone(),
            adjoint_op: op,
            picard: PicardOptions::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zd = SpaceTimeField::from_fn(&tg, &g, |_, _| rng.random_range(-1.0..1.0));
        let mut z0 = vec![0.0; g.n_nodes()];
        for i in g.interior() {
            z0[i] = rng.random_range(-1.0..1.0);
        }
        LeaderProblem::new(sys, eps, z0, zd).unwrap()
    }

    #[test]
    fn zero_data_gives_zero_control() {
        let mut p = instance(false, 10.0, 1e-2, 1);
        p.z0 = vec![0.0; 10];
        p.zd = p.system.zero_field();
        let f = p.system.zero_field();
        assert_eq!(leader_objective(&p, &f).unwrap(), 0.0);
        assert!(leader_gradient(&p, &f).unwrap().values().iter().all(|v| *v == 0.0));
        let s = solve_leader_cg(&p, 1e-10, 50).unwrap();
        assert_eq!(s.cg_iterations, 0);
        assert_eq!(s.terminal_norm, 0.0);
        assert_eq!(s.duality_gap, 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for boundary in [false, true] {
            let p = instance(boundary, 20.0, 1e-2, 2);
            let (g, tg) = (*p.system.grid(), *p.system.tgrid());
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let om = p.system.omega.clone();
            let f = om.apply_field(&SpaceTimeField::from_fn(&tg, &g, |_, _| rng.random_range(-1.0..1.0)));
            let d = om.apply_field(&SpaceTimeField::from_fn(&tg, &g, |_, _| rng.random_range(-1.0..1.0)));
            let grad = leader_gradient(&p, &f).unwrap();
            let adj = spacetime_inner(&grad, &d, &g, &tg, None, TimeSlots::Source);
            let fd = finite_difference_gradient(|x: &SpaceTimeField| leader_objective(&p, x).unwrap(), &f, &d, 1e-5);
            assert!((adj - fd).abs() <= 1e-6 * adj.abs(), "boundary={boundary}: {adj} vs {fd}");
        }
    }

    #[test]
    fn objective_is_quadratic_along_lines() {
        let p = instance(false, 20.0, 1e-2, 4);
        let (g, tg) = (*p.system.grid(), *p.system.tgrid());
        let f = p.system.omega.apply_field(&SpaceTimeField::from_fn(&tg, &g, |t, x| t + x));
        let d = p.system.omega.apply_field(&SpaceTimeField::from_fn(&tg, &g, |t, x| (t * x).cos()));
        let j = |s: f64| {
            let mut x = f.clone();
            x.axpy(s, &d);
            leader_objective(&p, &x).unwrap()
        };
        let (a, b, c) = (j(-1.0), j(0.0), j(1.0));
        let second = a - 2.0 * b + c;
        // A parabola through the three points predicts the value at s = 2.
        let predicted = b + 2.0 * (c - a) / 2.0 + 2.0 * second;
        assert!((j(2.0) - predicted).abs() <= 1e-9 * j(2.0).abs());
    }

    #[test]
    fn solution_satisfies_characterization_and_duality() {
        for boundary in [false, true] {
            let p = instance(boundary, 20.0, 1e-2, 5);
            let s = solve_leader_cg(&p, 1e-10, 300).unwrap();
            assert!(s.converged);
            assert!(s.characterization_residual <= 1e-8 * (1.0 + s.control_norm));
            assert!(s.duality_gap <= 1e-8, "boundary={boundary}: gap {}", s.duality_gap);
        }
    }

    #[test]
    fn reduction_with_equal_initial_data() {
        let base = instance(false, 20.0, 1e-2, 6);
        let g = *base.system.grid();
        let y0 = g.sample(|x| x * (1.0 - x));
        let yd = base.zd.clone();
        let p = reduce_to_null(base.system.clone(), 1e-2, &y0, &y0, &yd).unwrap();
        assert!(p.z0.iter().all(|v| *v == 0.0));
        let zero = vec![0.0; g.n_nodes()];
        let p = reduce_to_null(base.system.clone(), 1e-2, &y0, &zero, &yd).unwrap();
        assert!(p.ybar.as_ref().unwrap().values().iter().all(|v| *v == 0.0));
        assert_eq!(p.zd, yd);
        assert_eq!(p.z0, y0);
    }

    #[test]
    fn sweep_rejects_bad_lists() {
        let p = instance(false, 20.0, 1e-2, 7);
        assert!(epsilon_sweep(&p, &[1e-1, 1e-2, 1e-3], 1e-8, 100, false).is_err());
        assert!(epsilon_sweep(&p, &[1e-1, 1e-2, 1e-2, 1e-3], 1e-8, 100, false).is_err());
        assert!(p.with_epsilon(1e-9).is_err());
    }

    #[test]
    fn sweep_zero_data_has_undefined_slope() {
        let mut p = instance(false, 20.0, 1e-2, 8);
        p.z0 = vec![0.0; 10];
        p.zd = p.system.zero_field();
        let r = epsilon_sweep(&p, &[1e-1, 1e-2, 1e-3, 1e-4], 1e-8, 100, true).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(r.rows.iter().all(|row| row.terminal_norm == 0.0));
        assert_eq!(r.slope, None);
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let xs: Vec<f64> = [1e-1f64, 1e-2, 1e-3].iter().map(|e| e.ln()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 * x + 2.0).collect();
        assert!((least_squares_slope(&xs, &ys) - 0.5).abs() < 1e-14);
    }
}
