//! The follower optimality system and the leader's adjoint pair, solved by
//! Picard iteration.
//!
//! For a distributed follower on `O` the optimality system is
//!
//! ```text
//! z forward:  source f 1_omega - p 1_O / mu,      z(0) = z0
//! p backward: source (z - z_d) 1_Od,              p(T) = 0
//! ```
//!
//! and for a boundary follower the `p` coupling is replaced by Dirichlet data
//! `gamma^2 dp/dnu / mu` on one endpoint. The adjoint pair used by the leader is
//!
//! ```text
//! rho backward: source psi 1_Od,                  rho(T) = rho_T
//! psi forward:  source -rho 1_O / mu  (or data gamma^2 drho/dnu / mu)
//! ```
//!
//! `z` and `rho` use the state operator, `p` and `psi` the follower adjoint
//! operator; the two differ only for semilinear linearizations.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{RegionMask, Side, SpaceTimeField, TimeGrid};
use crate::grid::Grid;
use crate::parabolic::{BoundaryData, ParabolicOperator};

/// How the follower acts on the state.
#[derive(Debug, Clone, PartialEq)]
pub enum FollowerAction {
    /// Source term `v 1_O`.
    Distributed(RegionMask),
    /// Dirichlet data `gamma u` at one endpoint.
    Boundary { side: Side, gamma: f64 },
}

/// Stopping rule for Picard loops: relative increment below `tol`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 200,
        }
    }
}

/// A follower control: a field on `O` or a time series on the boundary node.
#[derive(Debug, Clone, PartialEq)]
pub enum FollowerControl {
    Distributed(SpaceTimeField),
    Boundary(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct CoupledSystem {
    pub omega: RegionMask,
    pub target: RegionMask,
    pub action: FollowerAction,
    pub mu: f64,
    pub state_op: Arc<ParabolicOperator>,
    pub adjoint_op: Arc<ParabolicOperator>,
    pub picard: PicardOptions,
}

/// Solution of the optimality system.
#[derive(Debug, Clone)]
pub struct OptimalityState {
    pub z: SpaceTimeField,
    pub p: SpaceTimeField,
    /// The follower's best response computed from `p`.
    pub control: FollowerControl,
    pub iterations: usize,
    /// Last ratio of successive Picard increments (0 when one sweep sufficed).
    pub contraction: f64,
}

#[derive(Debug, Clone)]
pub struct AdjointPair {
    pub rho: SpaceTimeField,
    pub psi: SpaceTimeField,
    pub iterations: usize,
    pub contraction: f64,
}

/// `sqrt(dt h sum v^2)` over every stored value.
pub fn field_norm(f: &SpaceTimeField, grid: &Grid, tgrid: &TimeGrid) -> f64 {
    (tgrid.dt() * grid.h() * f.values().iter().map(|v| v * v).sum::<f64>()).sqrt()
}

/// Runs `x <- step(x)` from `x0` until the relative increment is below `tol`.
/// Returns the last iterate, the step output, iteration count and the final
/// contraction estimate.
fn picard<T>(
    x0: SpaceTimeField,
    opts: PicardOptions,
    norm: impl Fn(&SpaceTimeField) -> f64,
    mut step: impl FnMut(&SpaceTimeField) -> Result<(SpaceTimeField, T)>,
) -> Result<(SpaceTimeField, T, usize, f64)> {
    let mut x = x0;
    let mut first = None;
    let mut prev_inc = 0.0;
    let mut contraction = 0.0;
    for it in 1..=opts.max_iter {
        let (next, out) = step(&x)?;
        let inc = norm(&next.sub(&x));
        let size = norm(&next);
        if !inc.is_finite() || !size.is_finite() {
            return Err(Error::NonContraction {
                iterations: it,
                factor: f64::INFINITY,
            });
        }
        if it > 1 && prev_inc > 0.0 {
            contraction = inc / prev_inc;
        }
        let d1 = *first.get_or_insert(inc);
        if d1 > 0.0 && inc >= 1e3 * d1 {
            return Err(Error::NonContraction {
                iterations: it,
                factor: (inc / d1).powf(1.0 / (it - 1) as f64),
            });
        }
        x = next;
        if inc <= opts.tol * size || inc == 0.0 {
            return Ok((x, out, it, contraction));
        }
        prev_inc = inc;
    }
    Err(Error::NonContraction {
        iterations: opts.max_iter,
        factor: contraction,
    })
}

impl CoupledSystem {
    pub fn grid(&self) -> &Grid {
        self.state_op.grid()
    }

    pub fn tgrid(&self) -> &TimeGrid {
        self.state_op.tgrid()
    }

    pub fn norm(&self, f: &SpaceTimeField) -> f64 {
        field_norm(f, self.grid(), self.tgrid())
    }

    pub fn zero_field(&self) -> SpaceTimeField {
        SpaceTimeField::zeros(self.tgrid(), self.grid())
    }

    pub fn zero_control(&self) -> FollowerControl {
        match self.action {
            FollowerAction::Distributed(_) => FollowerControl::Distributed(self.zero_field()),
            FollowerAction::Boundary { .. } => {
                FollowerControl::Boundary(vec![0.0; self.tgrid().n_times()])
            }
        }
    }

    /// State driven by leader source `f 1_omega` and follower control.
    pub fn state(
        &self,
        z0: &[f64],
        leader: Option<&SpaceTimeField>,
        control: &FollowerControl,
    ) -> Result<SpaceTimeField> {
        let mut source = match leader {
            Some(f) => self.omega.apply_field(f),
            None => self.zero_field(),
        };
        let boundary = match (&self.action, control) {
            (FollowerAction::Distributed(o), FollowerControl::Distributed(v)) => {
                source.axpy(1.0, &o.apply_field(v));
                BoundaryData::homogeneous()
            }
            (FollowerAction::Boundary { side, gamma }, FollowerControl::Boundary(u)) => {
                BoundaryData::on(*side, u.iter().map(|x| gamma * x).collect())
            }
            _ => {
                return Err(Error::InvalidParameter(
                    "follower control does not match the follower action".into(),
                ))
            }
        };
        self.state_op.forward(z0, Some(&source), &boundary)
    }

    /// Follower adjoint `p`: backward, source `(z - z_d) 1_Od`, `p(T) = 0`.
    pub fn follower_adjoint(
        &self,
        z: &SpaceTimeField,
        zd: Option<&SpaceTimeField>,
    ) -> Result<SpaceTimeField> {
        let mut src = z.clone();
        if let Some(d) = zd {
            src.axpy(-1.0, d);
        }
        let src = self.target.apply_field(&src);
        let zeros = vec![0.0; self.grid().n_nodes()];
        self.adjoint_op.backward(&zeros, Some(&src))
    }

    /// Best response `v = -p/mu` on `O`, or `u = gamma dp/dnu / mu`.
    pub fn best_response(&self, p: &SpaceTimeField) -> FollowerControl {
        match &self.action {
            FollowerAction::Distributed(o) => {
                FollowerControl::Distributed(o.apply_field(p).scaled(-1.0 / self.mu))
            }
            FollowerAction::Boundary { side, gamma } => FollowerControl::Boundary(
                self.adjoint_op
                    .boundary_flux(*side, p)
                    .into_iter()
                    .map(|d| gamma * d / self.mu)
                    .collect(),
            ),
        }
    }

    /// Picard iteration for the optimality system from `p = 0`.
    pub fn solve_optimality(
        &self,
        z0: &[f64],
        leader: Option<&SpaceTimeField>,
        zd: Option<&SpaceTimeField>,
    ) -> Result<OptimalityState> {
        let (p, (z, control), iterations, contraction) =
            picard(self.zero_field(), self.picard, |f| self.norm(f), |p| {
                let control = self.best_response(p);
                let z = self.state(z0, leader, &control)?;
                let p_next = self.follower_adjoint(&z, zd)?;
                Ok((p_next, (z, control)))
            })?;
        Ok(OptimalityState {
            z,
            p,
            control,
            iterations,
            contraction,
        })
    }

    /// Picard iteration for the adjoint pair from `psi = 0`.
    pub fn solve_adjoint_pair(&self, rho_t: &[f64]) -> Result<AdjointPair> {
        let zeros = vec![0.0; self.grid().n_nodes()];
        let (psi, rho, iterations, contraction) =
            picard(self.zero_field(), self.picard, |f| self.norm(f), |psi| {
                let src = self.target.apply_field(psi);
                let rho = self.state_op.backward(rho_t, Some(&src))?;
                let psi_next = match &self.action {
                    FollowerAction::Distributed(o) => {
                        let s = o.apply_field(&rho).scaled(-1.0 / self.mu);
                        self.adjoint_op
                            .forward(&zeros, Some(&s), &BoundaryData::homogeneous())?
                    }
                    FollowerAction::Boundary { side, gamma } => {
                        let data = self
                            .state_op
                            .boundary_flux(*side, &rho)
                            .into_iter()
                            .map(|d| gamma * gamma * d / self.mu)
                            .collect();
                        self.adjoint_op
                            .forward(&zeros, None, &BoundaryData::on(*side, data))?
                    }
                };
                Ok((psi_next, rho))
            })?;
        Ok(AdjointPair {
            rho,
            psi,
            iterations,
            contraction,
        })
    }

    /// Tightened copy for inner solves.
    pub fn with_picard(&self, picard: PicardOptions) -> Self {
        Self {
            picard,
            ..self.clone()
        }
    }
}

/// Inner products for controls, matching the quadrature of the functionals:
/// `dt h sum` over source slots and interior nodes for fields, `dt sum` over
/// levels `1..=K` for boundary series.
pub mod control_space {
    use std::sync::Arc;

    use crate::cg::CgVector;
    use crate::grid::{Grid, RegionMask, SpaceTimeField, TimeGrid};

    /// Vector with a diagonal inner-product weight.
    #[derive(Debug, Clone, PartialEq)]
    pub struct Weighted {
        pub values: Vec<f64>,
        pub weights: Arc<Vec<f64>>,
    }

    impl Weighted {
        pub fn norm(&self) -> f64 {
            self.dot(self).sqrt()
        }

        pub fn with_values(&self, values: Vec<f64>) -> Self {
            Self {
                values,
                weights: self.weights.clone(),
            }
        }

        /// Zeroes entries outside the support of the weight.
        pub fn project(mut self) -> Self {
            for (v, w) in self.values.iter_mut().zip(self.weights.iter()) {
                if *w == 0.0 {
                    *v = 0.0;
                }
            }
            self
        }
    }

    impl CgVector for Weighted {
        fn dot(&self, other: &Self) -> f64 {
            self.values
                .iter()
                .zip(&other.values)
                .zip(self.weights.iter())
                .map(|((a, b), w)| a * b * w)
                .sum()
        }

        fn axpy(&mut self, a: f64, other: &Self) {
            for (x, y) in self.values.iter_mut().zip(&other.values) {
                *x += a * y;
            }
        }

        fn scale(&mut self, a: f64) {
            self.values.iter_mut().for_each(|x| *x *= a);
        }

        fn zeros_like(&self) -> Self {
            self.with_values(vec![0.0; self.values.len()])
        }
    }

    /// Weights of `L^2((0,T) x region)` for fields on source slots.
    pub fn field_weights(grid: &Grid, tgrid: &TimeGrid, mask: &RegionMask) -> Arc<Vec<f64>> {
        let m = grid.n_nodes();
        let mut w = vec![0.0; tgrid.n_times() * m];
        let c = tgrid.dt() * grid.h();
        for k in 0..tgrid.n_steps() {
            for i in grid.interior() {
                w[k * m + i] = c * mask.weights()[i];
            }
        }
        Arc::new(w)
    }

    /// Weights of `L^2(0,T)` for boundary series on levels `1..=K`.
    pub fn series_weights(tgrid: &TimeGrid) -> Arc<Vec<f64>> {
        let mut w = vec![tgrid.dt(); tgrid.n_times()];
        w[0] = 0.0;
        Arc::new(w)
    }

    pub fn from_field(f: &SpaceTimeField, weights: &Arc<Vec<f64>>) -> Weighted {
        Weighted {
            values: f.values().to_vec(),
            weights: weights.clone(),
        }
        .project()
    }

    pub fn to_field(v: &Weighted, like: &SpaceTimeField) -> SpaceTimeField {
        SpaceTimeField::from_values(like.n_times(), like.n_nodes(), v.values.clone())
            .expect("control layout matches the grid")
    }
}
