//! Reference computations for the iterative solvers: dense monolithic
//! assemblies of the coupled linear systems, central finite differences and
//! refinement studies.
//!
//! The dense assemblies rebuild every matrix entry from kernel samples and the
//! grid with their own loops; they share no stepping or factorization code
//! with [`crate::parabolic`] or [`crate::coupled`].

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::cg::CgVector;
use crate::coupled::{CoupledSystem, FollowerAction, PicardOptions};
use crate::error::{Error, Result};
use crate::grid::{Grid, RegionMask, SpaceTimeField, TimeGrid};
use crate::kernel::{assemble, KernelSpec};
use crate::parabolic::ParabolicOperator;

/// Largest dense system the oracles will assemble.
pub const DENSE_CAP: usize = 2000;

/// Central difference `(f(x + delta d) - f(x - delta d)) / (2 delta)`.
pub fn finite_difference_gradient<V: CgVector>(
    func: impl Fn(&V) -> f64,
    point: &V,
    direction: &V,
    delta: f64,
) -> f64 {
    assert!(delta > 0.0, "finite-difference step must be positive");
    let mut plus = point.clone();
    plus.axpy(delta, direction);
    let mut minus = point.clone();
    minus.axpy(-delta, direction);
    (func(&plus) - func(&minus)) / (2.0 * delta)
}

/// Second central difference `(f(x + delta d) - 2 f(x) + f(x - delta d)) / delta^2`.
pub fn finite_difference_curvature<V: CgVector>(
    func: impl Fn(&V) -> f64,
    point: &V,
    direction: &V,
    delta: f64,
) -> f64 {
    assert!(delta > 0.0, "finite-difference step must be positive");
    let mut plus = point.clone();
    plus.axpy(delta, direction);
    let mut minus = point.clone();
    minus.axpy(-delta, direction);
    (func(&plus) - 2.0 * func(point) + func(&minus)) / (delta * delta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementReport {
    pub resolutions: Vec<usize>,
    pub errors: Vec<f64>,
    /// Observed order between consecutive levels; `None` when an error vanishes.
    pub orders: Vec<Option<f64>>,
    /// Errors fail to decrease somewhere.
    pub non_monotone: bool,
}

impl RefinementReport {
    pub fn last_order(&self) -> Option<f64> {
        self.orders.last().copied().flatten()
    }
}

/// Runs `experiment` at each resolution (at least three, increasing) and
/// returns the observed orders `log(e_i / e_{i+1}) / log(r_{i+1} / r_i)`.
pub fn refinement_study(
    experiment: impl Fn(usize) -> Result<f64>,
    resolutions: &[usize],
) -> Result<RefinementReport> {
    if resolutions.len() < 3 {
        return Err(Error::InvalidParameter("a refinement study needs at least 3 levels".into()));
    }
    if resolutions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("refinement levels must increase".into()));
    }
    let errors = resolutions
        .iter()
        .map(|&r| experiment(r).map(f64::abs))
        .collect::<Result<Vec<_>>>()?;
    let orders = errors
        .windows(2)
        .zip(resolutions.windows(2))
        .map(|(e, r)| {
            if e[0] > 0.0 && e[1] > 0.0 {
                Some((e[0] / e[1]).ln() / (r[1] as f64 / r[0] as f64).ln())
            } else {
                None
            }
        })
        .collect();
    let non_monotone = errors.windows(2).any(|e| e[1] > e[0]);
    Ok(RefinementReport {
        resolutions: resolutions.to_vec(),
        errors,
        orders,
        non_monotone,
    })
}

/// One block of unknowns: a field on `levels` at the listed nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: &'static str,
    pub levels: Range<usize>,
    pub nodes: Vec<usize>,
    offset: usize,
}

impl Block {
    fn len(&self) -> usize {
        self.levels.len() * self.nodes.len()
    }

    pub fn index(&self, level: usize, node: usize) -> Option<usize> {
        if !self.levels.contains(&level) {
            return None;
        }
        let j = self.nodes.iter().position(|&x| x == node)?;
        Some(self.offset + (level - self.levels.start) * self.nodes.len() + j)
    }
}

/// `A x = b` with a layout mapping unknowns to (block, level, node).
#[derive(Debug, Clone)]
pub struct DenseSystem {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub blocks: Vec<Block>,
}

impl DenseSystem {
    fn with_blocks(specs: Vec<(&'static str, Range<usize>, Vec<usize>)>) -> Result<Self> {
        let mut offset = 0;
        let mut blocks = Vec::new();
        for (name, levels, nodes) in specs {
            let b = Block {
                name,
                levels,
                nodes,
                offset,
            };
            offset += b.len();
            blocks.push(b);
        }
        if offset > DENSE_CAP {
            return Err(Error::CapExceeded {
                unknowns: offset,
                cap: DENSE_CAP,
            });
        }
        Ok(Self {
            matrix: DMatrix::zeros(offset, offset),
            rhs: DVector::zeros(offset),
            blocks,
        })
    }

    pub fn n_unknowns(&self) -> usize {
        self.rhs.len()
    }

    pub fn block(&self, name: &str) -> &Block {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .unwrap_or_else(|| panic!("no block named {name}"))
    }

    pub fn solve(&self) -> Result<DVector<f64>> {
        let x = self
            .matrix
            .clone()
            .lu()
            .solve(&self.rhs)
            .ok_or(Error::SingularStep { step: 0 })?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: 0 });
        }
        Ok(x)
    }

    /// `||A x - b||_inf`.
    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        (&self.matrix * x - &self.rhs).amax()
    }

    /// Unpacks a block into a field, zero where the block has no unknown.
    pub fn field(&self, x: &DVector<f64>, name: &str, tgrid: &TimeGrid, grid: &Grid) -> SpaceTimeField {
        let b = self.block(name);
        let mut f = SpaceTimeField::zeros(tgrid, grid);
        for k in b.levels.clone() {
            for &i in &b.nodes {
                f.set(k, i, x[b.index(k, i).expect("node in block")]);
            }
        }
        f
    }
}

/// Description of a small linear coupled instance, from which both the dense
/// oracle and the production [`CoupledSystem`] are built.
#[derive(Debug, Clone)]
pub struct DenseSetup {
    pub grid: Grid,
    pub tgrid: TimeGrid,
    pub kernel: KernelSpec,
    pub omega: RegionMask,
    pub target: RegionMask,
    pub action: FollowerAction,
    pub mu: f64,
    /// Constant zeroth-order coefficient `r` added to every step operator.
    pub reaction: f64,
}

impl DenseSetup {
    /// The production system for the same instance.
    pub fn coupled_system(&self) -> Result<CoupledSystem> {
        let k = Arc::new(assemble(&self.kernel, &self.grid, &self.tgrid)?);
        let reaction = (self.reaction != 0.0)
            .then(|| SpaceTimeField::from_fn(&self.tgrid, &self.grid, |_, _| self.reaction));
        let op = Arc::new(ParabolicOperator::with_coefficients(
            &self.grid,
            &self.tgrid,
            k,
            None,
            reaction,
        )?);
        Ok(CoupledSystem {
            omega: self.omega.clone(),
            target: self.target.clone(),
            action: self.action.clone(),
            mu: self.mu,
            state_op: op.clone(),
            adjoint_op: op,
            picard: PicardOptions::default(),
        })
    }
}

/// Entry builder shared by the dense assemblies.
struct Stencil<'a> {
    setup: &'a DenseSetup,
    /// `K(t_k, x_i, x_j) w_j` per level, all nodes.
    nk: Vec<DMatrix<f64>>,
}

impl<'a> Stencil<'a> {
    fn new(setup: &'a DenseSetup) -> Self {
        let g = &setup.grid;
        let m = g.n_nodes();
        let h = g.h();
        let w: Vec<f64> = (0..m)
            .map(|j| if j == 0 || j == m - 1 { h / 2.0 } else { h })
            .collect();
        let nk = (0..setup.tgrid.n_times())
            .map(|k| {
                if setup.kernel.is_zero() {
                    DMatrix::zeros(m, m)
                } else {
                    let s = setup.kernel.samples_at(g, &setup.tgrid, k);
                    DMatrix::from_fn(m, m, |i, j| s[(i, j)] * w[j])
                }
            })
            .collect();
        Self { setup, nk }
    }

    /// Coefficient of node `j` in row `i` (interior) of the step-`k`
    /// operator `u/dt - u_xx + N_k u + r u`.
    fn entry(&self, k: usize, i: usize, j: usize) -> f64 {
        let h2 = self.setup.grid.h().powi(2);
        let mut v = self.nk[k][(i, j)];
        if i == j {
            v += 1.0 / self.setup.tgrid.dt() + 2.0 / h2 + self.setup.reaction;
        } else if i.abs_diff(j) == 1 {
            v -= 1.0 / h2;
        }
        v
    }

    fn dt(&self) -> f64 {
        self.setup.tgrid.dt()
    }

    /// Rows of a forward solve for block `u` at level `k` (1..=K):
    /// operator terms and `-u_{k-1}/dt`, with `u0` entering the rhs at `k = 1`.
    fn forward_rows(&self, sys: &mut DenseSystem, u: usize, k: usize, u0: &[f64]) {
        let g = &self.setup.grid;
        let blk = sys.blocks[u].clone();
        for i in g.interior() {
            let row = blk.index(k, i).expect("interior row");
            for j in 0..g.n_nodes() {
                if let Some(col) = blk.index(k, j) {
                    sys.matrix[(row, col)] += self.entry(k, i, j);
                }
            }
            match blk.index(k - 1, i) {
                Some(col) => sys.matrix[(row, col)] -= 1.0 / self.dt(),
                None => sys.rhs[row] += u0[i] / self.dt(),
            }
        }
    }

    /// Rows of a backward solve for block `p` at level `k - 1` (k in 1..=K):
    /// transposed operator terms and `-p_k/dt` when `p_k` is an unknown.
    fn backward_rows(&self, sys: &mut DenseSystem, p: usize, k: usize) {
        let g = &self.setup.grid;
        let blk = sys.blocks[p].clone();
        for i in g.interior() {
            let row = blk.index(k - 1, i).expect("interior row");
            for j in g.interior() {
                let col = blk.index(k - 1, j).expect("interior column");
                sys.matrix[(row, col)] += self.entry(k, j, i);
            }
            if let Some(col) = blk.index(k, i) {
                sys.matrix[(row, col)] -= 1.0 / self.dt();
            }
        }
    }

    /// Adds `c * flux_k(p)` to `row`, where the flux is the negated,
    /// `h`-scaled pairing of `p_{k-1}` with the coefficients that the boundary
    /// node carries in the forward rows.
    fn add_flux(&self, sys: &mut DenseSystem, row: usize, p: usize, k: usize, b: usize, c: f64) {
        let g = &self.setup.grid;
        let blk = sys.blocks[p].clone();
        for i in g.interior() {
            let col = blk.index(k - 1, i).expect("interior column");
            sys.matrix[(row, col)] += c * g.h() * self.entry(k, i, b);
        }
    }
}

fn unknown_nodes(setup: &DenseSetup) -> Vec<usize> {
    let g = &setup.grid;
    let mut nodes: Vec<usize> = g.interior().collect();
    if let FollowerAction::Boundary { side, .. } = setup.action {
        nodes.push(g.boundary_index(side));
    }
    nodes
}

/// Adds the forward rows of a state-like block driven by `-coupling * m_O / mu`
/// (distributed) or carrying the boundary unknown tied to the flux of `adj`.
fn coupled_forward(st: &Stencil, sys: &mut DenseSystem, u: usize, adj: usize, u0: &[f64], k: usize) {
    let s = st.setup;
    st.forward_rows(sys, u, k, u0);
    match &s.action {
        FollowerAction::Distributed(o) => {
            for i in s.grid.interior() {
                let row = sys.blocks[u].index(k, i).unwrap();
                let col = sys.blocks[adj].index(k - 1, i).unwrap();
                sys.matrix[(row, col)] += o.weights()[i] / s.mu;
            }
        }
        FollowerAction::Boundary { side, gamma } => {
            let b = s.grid.boundary_index(*side);
            let row = sys.blocks[u].index(k, b).unwrap();
            sys.matrix[(row, row)] += 1.0;
            st.add_flux(sys, row, adj, k, b, -gamma * gamma / s.mu);
        }
    }
}

/// Follower optimality system at a fixed leader `f`: unknowns `z` on levels
/// `1..=K` and `p` on levels `0..K-1` (plus the boundary node of `z` for a
/// boundary follower), with the control eliminated.
pub fn assemble_follower_kkt(
    setup: &DenseSetup,
    f: &SpaceTimeField,
    z0: &[f64],
    zd: &SpaceTimeField,
) -> Result<DenseSystem> {
    let kk = setup.tgrid.n_steps();
    let g = &setup.grid;
    let mut sys = DenseSystem::with_blocks(vec![
        ("z", 1..kk + 1, unknown_nodes(setup)),
        ("p", 0..kk, g.interior().collect()),
    ])?;
    let st = Stencil::new(setup);
    for k in 1..=kk {
        coupled_forward(&st, &mut sys, 0, 1, z0, k);
        for i in g.interior() {
            let row = sys.blocks[0].index(k, i).unwrap();
            sys.rhs[row] += setup.omega.weights()[i] * f.get(k - 1, i);
        }
        st.backward_rows(&mut sys, 1, k);
        for i in g.interior() {
            let row = sys.blocks[1].index(k - 1, i).unwrap();
            let col = sys.blocks[0].index(k, i).unwrap();
            let d = setup.target.weights()[i];
            sys.matrix[(row, col)] -= d;
            sys.rhs[row] -= d * zd.get(k, i);
        }
    }
    Ok(sys)
}

/// Leader optimality system: `z`, `p`, `rho` (levels `0..K-1`, with
/// `rho_K = z_K / eps` substituted) and `psi`, with `f = -rho` on `omega`.
pub fn assemble_leader_system(
    setup: &DenseSetup,
    epsilon: f64,
    z0: &[f64],
    zd: &SpaceTimeField,
) -> Result<DenseSystem> {
    let kk = setup.tgrid.n_steps();
    let g = &setup.grid;
    let interior: Vec<usize> = g.interior().collect();
    let mut sys = DenseSystem::with_blocks(vec![
        ("z", 1..kk + 1, unknown_nodes(setup)),
        ("p", 0..kk, interior.clone()),
        ("rho", 0..kk, interior),
        ("psi", 1..kk + 1, unknown_nodes(setup)),
    ])?;
    let st = Stencil::new(setup);
    let zeros = vec![0.0; g.n_nodes()];
    let (z, p, rho, psi) = (0, 1, 2, 3);
    for k in 1..=kk {
        coupled_forward(&st, &mut sys, z, p, z0, k);
        coupled_forward(&st, &mut sys, psi, rho, &zeros, k);
        st.backward_rows(&mut sys, p, k);
        st.backward_rows(&mut sys, rho, k);
        for i in g.interior() {
            let zr = sys.blocks[z].index(k, i).unwrap();
            let rc = sys.blocks[rho].index(k - 1, i).unwrap();
            sys.matrix[(zr, rc)] += setup.omega.weights()[i];

            let d = setup.target.weights()[i];
            let pr = sys.blocks[p].index(k - 1, i).unwrap();
            sys.matrix[(pr, zr)] -= d;
            sys.rhs[pr] -= d * zd.get(k, i);

            let rr = sys.blocks[rho].index(k - 1, i).unwrap();
            let sc = sys.blocks[psi].index(k, i).unwrap();
            sys.matrix[(rr, sc)] -= d;
            if k == kk {
                sys.matrix[(rr, zr)] -= 1.0 / (epsilon * st.dt());
            }
        }
    }
    Ok(sys)
}

/// Leader control recovered from a solved leader system.
pub fn leader_control_from(
    sys: &DenseSystem,
    x: &DVector<f64>,
    setup: &DenseSetup,
) -> SpaceTimeField {
    let rho = sys.field(x, "rho", &setup.tgrid, &setup.grid);
    setup.omega.apply_field(&rho).scaled(-1.0)
}

/// Names of the iterative routes and the integration test refereeing each
/// against a dense or brute-force oracle.
pub const ORACLE_REGISTRY: &[(&str, &str)] = &[
    ("cg::conjugate_gradient", "cg_matches_dense_lu"),
    ("follower::solve_follower_cg", "follower_cg_matches_dense_kkt"),
    ("follower::solve_optimality_system", "follower_picard_matches_dense_kkt"),
    ("leader::solve_leader_cg", "distributed_leader_matches_dense_system"),
    ("leader::solve_leader_cg (brute force)", "leader_cg_matches_brute_force_normal_equations"),
    ("boundary::solve_boundary_optimality", "boundary_picard_matches_dense_kkt"),
    ("boundary::solve_boundary_follower_cg", "boundary_cg_matches_dense_kkt"),
    ("boundary::solve_boundary_leader", "boundary_leader_matches_dense_system"),
    ("semilinear::solve_semilinear_stackelberg", "linear_nonlinearity_matches_dense_system"),
    ("semilinear::solve_state", "newton_state_matches_dense_linear_solve"),
];

/// Every iterative solver in the crate; each must appear in [`ORACLE_REGISTRY`].
pub const ITERATIVE_SOLVERS: &[&str] = &[
    "cg::conjugate_gradient",
    "follower::solve_follower_cg",
    "follower::solve_optimality_system",
    "leader::solve_leader_cg",
    "boundary::solve_boundary_optimality",
    "boundary::solve_boundary_follower_cg",
    "boundary::solve_boundary_leader",
    "semilinear::solve_semilinear_stackelberg",
    "semilinear::solve_state",
];
