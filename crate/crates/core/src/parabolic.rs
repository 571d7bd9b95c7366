//! Implicit Euler solvers for the forward nonlocal equation and its discrete
//! adjoint.
//!
//! Step `k = 1..=n_steps` of the forward scheme reads
//!
//! ```text
//! (I/dt - D_h + N_k C_k + R_k) u_k = u_{k-1}/dt + S_{k-1} + g_k lift_k
//! ```
//!
//! on the interior nodes, where `N_k` is the interior block of the kernel
//! matrix, `C_k` an optional diagonal column scaling, `R_k` an optional
//! reaction, and `lift_k` carries Dirichlet data `g_k` through both the stencil
//! and the kernel column of the boundary node. The backward scheme is
//!
//! ```text
//! (I/dt - D_h + N_k C_k + R_k)^T p_{k-1} = p_k/dt + G_k,
//! ```
//!
//! which makes the pair satisfy, for homogeneous Dirichlet data,
//!
//! ```text
//! <p_K, u_K> + sum_{k=1}^{K} dt <G_k, u_k> = <p_0, u_0> + sum_{k=0}^{K-1} dt <S_k, p_k>
//! ```
//!
//! exactly in the interior inner product. Sources therefore live on time slots
//! `0..K-1` and backward sources on `1..K`.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};
use crate::grid::{build_laplacian, Grid, Side, SpaceTimeField, TimeGrid, TridiagonalOperator};
use crate::kernel::KernelOperator;

type Factor = LU<f64, Dyn, Dyn>;

/// Dirichlet data per boundary node, indexed by time level `0..=n_steps`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundaryData {
    pub left: Option<Vec<f64>>,
    pub right: Option<Vec<f64>>,
}

impl BoundaryData {
    pub fn homogeneous() -> Self {
        Self::default()
    }

    pub fn on(side: Side, values: Vec<f64>) -> Self {
        match side {
            Side::Left => Self {
                left: Some(values),
                right: None,
            },
            Side::Right => Self {
                left: None,
                right: Some(values),
            },
        }
    }

    pub fn get(&self, side: Side) -> Option<&[f64]> {
        match side {
            Side::Left => self.left.as_deref(),
            Side::Right => self.right.as_deref(),
        }
    }
}

/// Time-stepping operator with cached per-step LU factorizations.
#[derive(Debug)]
pub struct ParabolicOperator {
    grid: Grid,
    tgrid: TimeGrid,
    kernel: Arc<KernelOperator>,
    column_scale: Option<SpaceTimeField>,
    reaction: Option<SpaceTimeField>,
    laplacian: TridiagonalOperator,
    shared: bool,
    forward_lu: Vec<OnceLock<std::result::Result<Factor, Error>>>,
    backward_lu: Vec<OnceLock<std::result::Result<Factor, Error>>>,
}

impl ParabolicOperator {
    pub fn new(grid: &Grid, tgrid: &TimeGrid, kernel: Arc<KernelOperator>) -> Result<Self> {
        Self::with_coefficients(grid, tgrid, kernel, None, None)
    }

    /// Operator with a kernel column scaling `C` (the kernel acts on `C u`)
    /// and a reaction `R` entering as `+R u` on the left side.
    pub fn with_coefficients(
        grid: &Grid,
        tgrid: &TimeGrid,
        kernel: Arc<KernelOperator>,
        column_scale: Option<SpaceTimeField>,
        reaction: Option<SpaceTimeField>,
    ) -> Result<Self> {
        let laplacian = build_laplacian(grid)?;
        if kernel.n_nodes() != grid.n_nodes() {
            return Err(Error::DimensionMismatch {
                context: "kernel operator",
                expected: grid.n_nodes(),
                found: kernel.n_nodes(),
            });
        }
        for (field, name) in [(&column_scale, "column scale"), (&reaction, "reaction")] {
            if let Some(f) = field {
                f.check(tgrid, grid, "parabolic coefficient")?;
                if !f.is_finite() {
                    return Err(Error::InvalidParameter(format!("{name} is not finite")));
                }
            }
        }
        let shared = kernel.is_time_constant() && column_scale.is_none() && reaction.is_none();
        let slots = if shared { 1 } else { tgrid.n_times() };
        Ok(Self {
            grid: *grid,
            tgrid: *tgrid,
            kernel,
            column_scale,
            reaction,
            laplacian,
            shared,
            forward_lu: (0..slots).map(|_| OnceLock::new()).collect(),
            backward_lu: (0..slots).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn tgrid(&self) -> &TimeGrid {
        &self.tgrid
    }

    pub fn kernel(&self) -> &Arc<KernelOperator> {
        &self.kernel
    }

    fn col_scale(&self, k: usize, j: usize) -> f64 {
        self.column_scale.as_ref().map_or(1.0, |c| c.get(k, j))
    }

    /// Interior step matrix `I/dt - D_h + N_k C_k + R_k` of step `k`.
    pub fn step_matrix(&self, k: usize) -> DMatrix<f64> {
        let n = self.grid.n_interior();
        let mut m = -self.laplacian.to_dense();
        let inv_dt = 1.0 / self.tgrid.dt();
        if !self.kernel.is_zero() {
            let nk = self.kernel.matrix(k);
            for j in 0..n {
                let c = self.col_scale(k, j + 1);
                for i in 0..n {
                    m[(i, j)] += nk[(i + 1, j + 1)] * c;
                }
            }
        }
        for i in 0..n {
            m[(i, i)] += inv_dt;
            if let Some(r) = &self.reaction {
                m[(i, i)] += r.get(k, i + 1);
            }
        }
        m
    }

    fn slot(&self, k: usize) -> usize {
        if self.shared {
            0
        } else {
            k
        }
    }

    fn factor(&self, k: usize, transpose: bool) -> Result<&Factor> {
        let cache = if transpose {
            &self.backward_lu
        } else {
            &self.forward_lu
        };
        cache[self.slot(k)]
            .get_or_init(|| {
                let m = self.step_matrix(k);
                let lu = if transpose { m.transpose().lu() } else { m.lu() };
                if lu.is_invertible() {
                    Ok(lu)
                } else {
                    Err(Error::SingularStep { step: k })
                }
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    /// Interior vector through which Dirichlet data on `side` enters step `k`.
    pub fn lift(&self, k: usize, side: Side) -> Vec<f64> {
        let n = self.grid.n_interior();
        let b = self.grid.boundary_index(side);
        let inv_h2 = 1.0 / (self.grid.h() * self.grid.h());
        let mut v = vec![0.0; n];
        match side {
            Side::Left => v[0] = inv_h2,
            Side::Right => v[n - 1] = inv_h2,
        }
        if !self.kernel.is_zero() {
            let nk = self.kernel.matrix(k);
            let c = self.col_scale(k, b);
            for (i, vi) in v.iter_mut().enumerate() {
                *vi -= nk[(i + 1, b)] * c;
            }
        }
        v
    }

    fn solve(&self, k: usize, transpose: bool, rhs: Vec<f64>) -> Result<Vec<f64>> {
        let lu = self.factor(k, transpose)?;
        let x = lu
            .solve(&DVector::from_vec(rhs))
            .ok_or(Error::SingularStep { step: k })?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: k });
        }
        Ok(x.data.into())
    }

    /// Forward solve from `u0` with source `S` (slots `0..K-1`) and Dirichlet
    /// data (levels `1..=K`).
    pub fn forward(
        &self,
        u0: &[f64],
        source: Option<&SpaceTimeField>,
        boundary: &BoundaryData,
    ) -> Result<SpaceTimeField> {
        let (grid, tgrid) = (&self.grid, &self.tgrid);
        check_len(u0, grid.n_nodes(), "initial state")?;
        if let Some(s) = source {
            s.check(tgrid, grid, "forward source")?;
        }
        for side in [Side::Left, Side::Right] {
            if let Some(g) = boundary.get(side) {
                check_len(g, tgrid.n_times(), "boundary data")?;
            }
        }
        let n = grid.n_interior();
        let inv_dt = 1.0 / tgrid.dt();
        let mut out = SpaceTimeField::zeros(tgrid, grid);
        out.row_mut(0).copy_from_slice(u0);
        for k in 1..=tgrid.n_steps() {
            let mut rhs: Vec<f64> = (1..=n).map(|i| out.get(k - 1, i) * inv_dt).collect();
            if let Some(s) = source {
                let row = s.row(k - 1);
                for (i, r) in rhs.iter_mut().enumerate() {
                    *r += row[i + 1];
                }
            }
            for side in [Side::Left, Side::Right] {
                if let Some(g) = boundary.get(side) {
                    let gk = g[k];
                    if gk != 0.0 {
                        for (r, l) in rhs.iter_mut().zip(self.lift(k, side)) {
                            *r += gk * l;
                        }
                    }
                    out.set(k, grid.boundary_index(side), gk);
                }
            }
            let x = self.solve(k, false, rhs)?;
            out.row_mut(k)[1..=n].copy_from_slice(&x);
        }
        Ok(out)
    }

    /// Backward solve from `terminal` with source `G` (slots `1..=K`);
    /// homogeneous Dirichlet data.
    pub fn backward(
        &self,
        terminal: &[f64],
        source: Option<&SpaceTimeField>,
    ) -> Result<SpaceTimeField> {
        let (grid, tgrid) = (&self.grid, &self.tgrid);
        check_len(terminal, grid.n_nodes(), "terminal state")?;
        if let Some(s) = source {
            s.check(tgrid, grid, "backward source")?;
        }
        let n = grid.n_interior();
        let kk = tgrid.n_steps();
        let inv_dt = 1.0 / tgrid.dt();
        let mut out = SpaceTimeField::zeros(tgrid, grid);
        out.row_mut(kk)[1..=n].copy_from_slice(&terminal[1..=n]);
        for k in (1..=kk).rev() {
            let mut rhs: Vec<f64> = (1..=n).map(|i| out.get(k, i) * inv_dt).collect();
            if let Some(s) = source {
                let row = s.row(k);
                for (i, r) in rhs.iter_mut().enumerate() {
                    *r += row[i + 1];
                }
            }
            let x = self.solve(k, true, rhs)?;
            out.row_mut(k - 1)[1..=n].copy_from_slice(&x);
        }
        Ok(out)
    }

    /// Discrete outward normal derivative of a backward solution `p` at level
    /// `k`, defined as the transpose of the boundary lift:
    /// `-h <lift_k, p_{k-1}>`. Returns levels `0..=K` with level 0 set to 0.
    ///
    /// For `p` produced by [`backward`](Self::backward) on this operator,
    /// `sum_k dt <G_k, u_k> = -sum_k dt g_k flux_k` for a forward solve `u`
    /// driven only by Dirichlet data `g`.
    pub fn boundary_flux(&self, side: Side, p: &SpaceTimeField) -> Vec<f64> {
        let h = self.grid.h();
        let n = self.grid.n_interior();
        let mut out = vec![0.0; self.tgrid.n_times()];
        for (k, o) in out.iter_mut().enumerate().skip(1) {
            let prev = &p.row(k - 1)[1..=n];
            let lift = self.lift(k, side);
            *o = -h * lift.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>();
        }
        out
    }
}

fn check_len(v: &[f64], expected: usize, context: &'static str) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            found: v.len(),
        });
    }
    Ok(())
}

/// Forward problem description for one-off solves.
#[derive(Debug, Clone)]
pub struct ForwardProblem {
    pub grid: Grid,
    pub tgrid: TimeGrid,
    pub kernel: Arc<KernelOperator>,
    pub source: Option<SpaceTimeField>,
    pub boundary: BoundaryData,
    pub initial: Vec<f64>,
    pub reaction: Option<SpaceTimeField>,
}

/// Backward problem description; the kernel is applied transposed.
#[derive(Debug, Clone)]
pub struct BackwardProblem {
    pub grid: Grid,
    pub tgrid: TimeGrid,
    pub kernel: Arc<KernelOperator>,
    pub source: Option<SpaceTimeField>,
    pub terminal: Vec<f64>,
    pub reaction: Option<SpaceTimeField>,
}

pub fn solve_forward(p: &ForwardProblem) -> Result<SpaceTimeField> {
    let op = ParabolicOperator::with_coefficients(
        &p.grid,
        &p.tgrid,
        p.kernel.clone(),
        None,
        p.reaction.clone(),
    )?;
    op.forward(&p.initial, p.source.as_ref(), &p.boundary)
}

pub fn solve_backward(p: &BackwardProblem) -> Result<SpaceTimeField> {
    let op = ParabolicOperator::with_coefficients(
        &p.grid,
        &p.tgrid,
        p.kernel.clone(),
        None,
        p.reaction.clone(),
    )?;
    op.backward(&p.terminal, p.source.as_ref())
}

/// Second-order one-sided outward normal derivative at every time level.
pub fn normal_derivative(field: &SpaceTimeField, grid: &Grid, side: Side) -> Vec<f64> {
    let h = grid.h();
    let last = grid.n_interior() + 1;
    (0..field.n_times())
        .map(|k| {
            let u = field.row(k);
            match side {
                Side::Left => -(-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h),
                Side::Right => (3.0 * u[last] - 4.0 * u[last - 1] + u[last - 2]) / (2.0 * h),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{assemble, KernelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn operator(spec: &KernelSpec, n: usize, steps: usize, horizon: f64) -> ParabolicOperator {
        let g = Grid::unit(n).unwrap();
        let tg = TimeGrid::new(horizon, steps).unwrap();
        let k = Arc::new(assemble(spec, &g, &tg).unwrap());
        ParabolicOperator::new(&g, &tg, k).unwrap()
    }

    fn max_err_sine(op: &ParabolicOperator, rate: f64) -> f64 {
        let g = *op.grid();
        let tg = *op.tgrid();
        let u0 = g.sample(|x| (PI * x).sin());
        let u = op.forward(&u0, None, &BoundaryData::homogeneous()).unwrap();
        let decay = (-rate * tg.horizon()).exp();
        (0..g.n_nodes())
            .map(|i| (u.get(tg.n_steps(), i) - decay * u0[i]).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn heat_eigenmode_decay() {
        let op = operator(&KernelSpec::Zero, 128, 256, 0.1);
        assert!(max_err_sine(&op, PI * PI) <= 2e-3);
    }

    #[test]
    fn eigen_kernel_decay() {
        let op = operator(&KernelSpec::eigen(2.0), 128, 256, 0.1);
        assert!(max_err_sine(&op, PI * PI + 1.0) <= 2e-3);
    }

    #[test]
    fn zero_data_zero_solution() {
        let op = operator(&KernelSpec::eigen(2.0), 10, 7, 0.5);
        let z = op
            .forward(&[0.0; 12], None, &BoundaryData::homogeneous())
            .unwrap();
        assert!(z.values().iter().all(|v| *v == 0.0));
        let p = op.backward(&[0.0; 12], None).unwrap();
        assert!(p.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn time_reversal_for_symmetric_constant_kernel() {
        let op = operator(
            &KernelSpec::GaussianDecay {
                amplitude: 1.5,
                width: 0.3,
                decay: 0.0,
            },
            12,
            10,
            0.4,
        );
        let g = *op.grid();
        let ut = g.sample(|x| x * (1.0 - x) * (3.0 * x).cos());
        let fwd = op.forward(&ut, None, &BoundaryData::homogeneous()).unwrap();
        let bwd = op.backward(&ut, None).unwrap();
        for k in 0..=10 {
            for i in 0..g.n_nodes() {
                assert!((bwd.get(k, i) - fwd.get(10 - k, i)).abs() < 1e-14);
            }
        }
    }

    fn random_field(tg: &TimeGrid, g: &Grid, rng: &mut ChaCha8Rng) -> SpaceTimeField {
        let mut f = SpaceTimeField::zeros(tg, g);
        for k in 0..tg.n_times() {
            for i in g.interior() {
                f.set(k, i, rng.random_range(-1.0..1.0));
            }
        }
        f
    }

    fn random_interior(g: &Grid, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut v = vec![0.0; g.n_nodes()];
        for i in g.interior() {
            v[i] = rng.random_range(-1.0..1.0);
        }
        v
    }

    /// Evaluates both sides of the summation-by-parts identity.
    fn duality_sides(op: &ParabolicOperator, seed: u64) -> (f64, f64) {
        let (g, tg) = (*op.grid(), *op.tgrid());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_field(&tg, &g, &mut rng);
        let gsrc = random_field(&tg, &g, &mut rng);
        let u0 = random_interior(&g, &mut rng);
        let pt = random_interior(&g, &mut rng);
        let u = op.forward(&u0, Some(&s), &BoundaryData::homogeneous()).unwrap();
        let p = op.backward(&pt, Some(&gsrc)).unwrap();
        let dot = |a: &[f64], b: &[f64]| g.h() * g.interior().map(|i| a[i] * b[i]).sum::<f64>();
        let k = tg.n_steps();
        let mut lhs = dot(&pt, u.row(k));
        for j in 1..=k {
            lhs += tg.dt() * dot(gsrc.row(j), u.row(j));
        }
        let mut rhs = dot(p.row(0), &u0);
        for j in 0..k {
            rhs += tg.dt() * dot(s.row(j), p.row(j));
        }
        (lhs, rhs)
    }

    #[test]
    fn discrete_duality_identity() {
        let g = Grid::unit(6).unwrap();
        let tg = TimeGrid::new(0.7, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tab: Vec<Vec<Vec<f64>>> = (0..9)
            .map(|_| (0..8).map(|_| (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).collect())
            .collect();
        let kern = Arc::new(assemble(&KernelSpec::Tabulated(tab), &g, &tg).unwrap());
        let op = ParabolicOperator::new(&g, &tg, kern).unwrap();
        let (lhs, rhs) = duality_sides(&op, 5);
        assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn boundary_flux_is_lift_transpose() {
        let g = Grid::unit(7).unwrap();
        let tg = TimeGrid::new(0.5, 6).unwrap();
        let kern = Arc::new(assemble(&KernelSpec::eigen(3.0), &g, &tg).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scale = random_field(&tg, &g, &mut rng);
        let mut scale = scale;
        for k in 0..tg.n_times() {
            for i in 0..g.n_nodes() {
                scale.set(k, i, 1.0 + 0.5 * (i as f64 + k as f64).sin());
            }
        }
        let op = ParabolicOperator::with_coefficients(&g, &tg, kern, Some(scale), None).unwrap();
        let data: Vec<f64> = (0..tg.n_times()).map(|k| (k as f64).cos()).collect();
        let gsrc = random_field(&tg, &g, &mut rng);
        for side in [Side::Left, Side::Right] {
            let u = op
                .forward(&vec![0.0; g.n_nodes()], None, &BoundaryData::on(side, data.clone()))
                .unwrap();
            let p = op.backward(&vec![0.0; g.n_nodes()], Some(&gsrc)).unwrap();
            let flux = op.boundary_flux(side, &p);
            let lhs: f64 = (1..=tg.n_steps())
                .map(|k| tg.dt() * g.h() * g.interior().map(|i| gsrc.get(k, i) * u.get(k, i)).sum::<f64>())
                .sum();
            let rhs: f64 = (1..=tg.n_steps()).map(|k| -tg.dt() * data[k] * flux[k]).sum();
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()), "{side:?}: {lhs} vs {rhs}");
            assert_eq!(u.get(3, g.boundary_index(side)), data[3]);
        }
    }

    #[test]
    fn boundary_flux_approximates_normal_derivative() {
        let g = Grid::unit(200).unwrap();
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let op = ParabolicOperator::new(&g, &tg, Arc::new(KernelOperator::zero(&g))).unwrap();
        let p = SpaceTimeField::from_fn(&tg, &g, |_, x| (PI * x).sin());
        let fl = op.boundary_flux(Side::Left, &p);
        let fr = op.boundary_flux(Side::Right, &p);
        assert!((fl[1] + PI).abs() < 1e-3);
        assert!((fr[2] + PI).abs() < 1e-3);
    }

    #[test]
    fn normal_derivative_examples() {
        let g = Grid::unit(10).unwrap();
        let tg = TimeGrid::new(1.0, 1).unwrap();
        let lin = SpaceTimeField::from_fn(&tg, &g, |_, x| x);
        let l = normal_derivative(&lin, &g, Side::Left);
        let r = normal_derivative(&lin, &g, Side::Right);
        assert!((l[0] + 1.0).abs() < 1e-12 && (r[1] - 1.0).abs() < 1e-12);
        let zero = SpaceTimeField::zeros(&tg, &g);
        assert_eq!(normal_derivative(&zero, &g, Side::Left), vec![0.0, 0.0]);
        let mut errs = Vec::new();
        for n in [16usize, 32] {
            let g = Grid::unit(n).unwrap();
            let s = SpaceTimeField::from_fn(&tg, &g, |_, x| (PI * x).sin());
            errs.push((normal_derivative(&s, &g, Side::Left)[0] + PI).abs());
        }
        assert!(errs[0] / errs[1] > 3.5, "{errs:?}");
    }

    #[test]
    fn first_order_in_time() {
        let mut terms = Vec::new();
        for steps in [20usize, 40, 80] {
            let op = operator(&KernelSpec::Zero, 31, steps, 0.1);
            let g = *op.grid();
            let u0 = g.sample(|x| (PI * x).sin());
            let u = op.forward(&u0, None, &BoundaryData::homogeneous()).unwrap();
            terms.push(u.get(steps, 16));
        }
        let order = ((terms[0] - terms[1]) / (terms[1] - terms[2])).abs().log2();
        assert!((order - 1.0).abs() <= 0.2, "order {order}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let op = operator(&KernelSpec::Zero, 5, 4, 1.0);
        assert!(matches!(
            op.forward(&[0.0; 3], None, &BoundaryData::homogeneous()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn singular_step_is_reported() {
        // h = dt = 1 and R = -2 give the exactly singular step matrix [[1, -1], [-1, 1]].
        let g = Grid::new(3.0, 2).unwrap();
        let tg = TimeGrid::new(1.0, 1).unwrap();
        let r = SpaceTimeField::from_fn(&tg, &g, |_, _| -2.0);
        let op = ParabolicOperator::with_coefficients(
            &g,
            &tg,
            Arc::new(KernelOperator::zero(&g)),
            None,
            Some(r),
        )
        .unwrap();
        let err = op
            .forward(&[0.0, 1.0, 0.5, 0.0], None, &BoundaryData::homogeneous())
            .unwrap_err();
        assert_eq!(err, Error::SingularStep { step: 1 });
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn duality_holds_for_random_instances(
                seed in 0u64..10_000,
                n in 2usize..=8,
                steps in 1usize..=8,
                amp in -3.0..3.0f64,
                react in -2.0..2.0f64,
            ) {
                let g = Grid::unit(n).unwrap();
                let tg = TimeGrid::new(0.6, steps).unwrap();
                let spec = KernelSpec::Separable {
                    time: crate::kernel::Profile::function(move |t| 1.0 + amp * t),
                    left: crate::kernel::Profile::function(|x| x * x),
                    right: crate::kernel::Profile::SineMode { mode: 2, amplitude: amp },
                };
                let kern = Arc::new(assemble(&spec, &g, &tg).unwrap());
                let reaction = SpaceTimeField::from_fn(&tg, &g, |t, x| react * (t + x));
                let op = ParabolicOperator::with_coefficients(&g, &tg, kern, None, Some(reaction)).unwrap();
                let (lhs, rhs) = duality_sides(&op, seed);
                prop_assert!((lhs - rhs).abs() <= 1e-11 * (1.0 + lhs.abs()));
            }
        }
    }
}
