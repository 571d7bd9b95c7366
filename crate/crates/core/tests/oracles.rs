//! Dense and brute-force referees for every iterative route. Each function
//! named in the oracle registry must be defined in this file.

mod common;

use common::{random_field, random_profile, rel_diff, setup};
use nalgebra::{DMatrix, DVector};
use nonlocal_stackelberg::boundary::{solve_boundary_follower_cg, solve_boundary_leader, solve_boundary_optimality, BoundaryFollowerProblem};
use nonlocal_stackelberg::cg::conjugate_gradient;
use nonlocal_stackelberg::follower::{solve_follower_cg, solve_optimality_system, FollowerProblem};
use nonlocal_stackelberg::grid::SpaceTimeField;
use nonlocal_stackelberg::leader::{leader_gradient, solve_leader_cg, LeaderProblem};
use nonlocal_stackelberg::parabolic::BoundaryData;
use nonlocal_stackelberg::semilinear::{solve_semilinear_stackelberg, solve_state, Nonlinearity, NonlinearityKind, Placement, SemilinearProblem};
use nonlocal_stackelberg::verification::{assemble_follower_kkt, assemble_leader_system, leader_control_from, ORACLE_REGISTRY};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const AGREE: f64 = 1e-7;

/// Dense `z` blocks start at level 1; level 0 is the initial datum.
fn with_initial(mut z: SpaceTimeField, z0: &[f64]) -> SpaceTimeField {
    z.row_mut(0).copy_from_slice(z0);
    z
}

#[test]
fn cg_matches_dense_lu() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 24;
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let a = b.transpose() * &b + DMatrix::identity(n, n);
    let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let out = conjugate_gradient(
        |x: &Vec<f64>| Ok((&a * DVector::from_column_slice(x)).as_slice().to_vec()),
        &rhs,
        vec![0.0; n],
        1e-13,
        500,
    )
    .unwrap();
    assert!(out.converged);
    let exact = a.clone().lu().solve(&DVector::from_column_slice(&rhs)).unwrap();
    let err = (DVector::from_column_slice(&out.solution) - &exact).amax() / exact.amax();
    assert!(err <= 1e-10, "{err}");
}

fn follower_instance(boundary: bool, seed: u64) -> (nonlocal_stackelberg::verification::DenseSetup, SpaceTimeField, Vec<f64>, SpaceTimeField) {
    let s = setup(boundary, 5.0, 0.0);
    let f = random_field(&s.grid, &s.tgrid, seed);
    let z0 = random_profile(&s.grid, seed + 1);
    let zd = random_field(&s.grid, &s.tgrid, seed + 2);
    (s, f, z0, zd)
}

#[test]
fn follower_cg_matches_dense_kkt() {
    for seed in [1, 2, 3] {
        let (s, f, z0, zd) = follower_instance(false, seed * 10);
        let dense = assemble_follower_kkt(&s, &f, &z0, &zd).unwrap();
        let x = dense.solve().unwrap();
        assert!(dense.residual(&x) <= 1e-10);
        let z = with_initial(dense.field(&x, "z", &s.tgrid, &s.grid), &z0);
        let problem = FollowerProblem::new(s.coupled_system().unwrap(), f, z0, zd).unwrap();
        let sol = solve_follower_cg(&problem, 1e-12, 500).unwrap();
        assert!(sol.converged);
        let p = dense.field(&x, "p", &s.tgrid, &s.grid);
        assert!(rel_diff(&sol.z, &z) <= AGREE, "z {}", rel_diff(&sol.z, &z));
        assert!(rel_diff(&sol.p, &p) <= AGREE, "p {}", rel_diff(&sol.p, &p));
    }
}

#[test]
fn follower_picard_matches_dense_kkt() {
    let (s, f, z0, zd) = follower_instance(false, 40);
    let dense = assemble_follower_kkt(&s, &f, &z0, &zd).unwrap();
    let x = dense.solve().unwrap();
    let z = with_initial(dense.field(&x, "z", &s.tgrid, &s.grid), &z0);
    let problem = FollowerProblem::new(s.coupled_system().unwrap(), f, z0, zd).unwrap();
    let st = solve_optimality_system(&problem, 1e-13).unwrap();
    let p = dense.field(&x, "p", &s.tgrid, &s.grid);
    assert!(rel_diff(&st.z, &z) <= AGREE);
    assert!(rel_diff(&st.p, &p) <= AGREE);
}

#[test]
fn distributed_leader_matches_dense_system() {
    let s = setup(false, 5.0, 0.0);
    let z0 = random_profile(&s.grid, 7);
    let zd = random_field(&s.grid, &s.tgrid, 8);
    let dense = assemble_leader_system(&s, 1e-2, &z0, &zd).unwrap();
    let x = dense.solve().unwrap();
    let z = with_initial(dense.field(&x, "z", &s.tgrid, &s.grid), &z0);
    let problem = LeaderProblem::new(s.coupled_system().unwrap(), 1e-2, z0, zd).unwrap();
    let sol = solve_leader_cg(&problem, 1e-12, 500).unwrap();
    assert!(sol.converged);
    let f = leader_control_from(&dense, &x, &s);
    assert!(rel_diff(&sol.f_hat, &f) <= AGREE, "f {}", rel_diff(&sol.f_hat, &f));
    assert!(rel_diff(&sol.z, &z) <= AGREE, "z {}", rel_diff(&sol.z, &z));
}

#[test]
fn leader_cg_matches_brute_force_normal_equations() {
    let s = setup(false, 5.0, 0.0);
    let z0 = random_profile(&s.grid, 17);
    let zd = random_field(&s.grid, &s.tgrid, 18);
    let problem = LeaderProblem::new(s.coupled_system().unwrap(), 1e-2, z0, zd).unwrap();
    let support = s.omega.support();
    let kk = s.tgrid.n_steps();
    let slots: Vec<(usize, usize)> = (0..kk).flat_map(|k| support.iter().map(move |&i| (k, i))).collect();
    let zero = SpaceTimeField::zeros(&s.tgrid, &s.grid);
    let g0 = leader_gradient(&problem, &zero).unwrap();
    let m = slots.len();
    let mut h = DMatrix::zeros(m, m);
    for (c, &(k, i)) in slots.iter().enumerate() {
        let mut e = zero.clone();
        e.set(k, i, 1.0);
        let g = leader_gradient(&problem, &e).unwrap();
        for (r, &(kr, ir)) in slots.iter().enumerate() {
            h[(r, c)] = g.get(kr, ir) - g0.get(kr, ir);
        }
    }
    let rhs = DVector::from_iterator(m, slots.iter().map(|&(k, i)| -g0.get(k, i)));
    let coords = h.lu().solve(&rhs).unwrap();
    let mut f = zero.clone();
    for (r, &(k, i)) in slots.iter().enumerate() {
        f.set(k, i, coords[r]);
    }
    let sol = solve_leader_cg(&problem, 1e-12, 500).unwrap();
    assert!(rel_diff(&sol.f_hat, &f) <= AGREE, "{}", rel_diff(&sol.f_hat, &f));
}

#[test]
fn boundary_picard_matches_dense_kkt() {
    let (s, f, z0, zd) = follower_instance(true, 50);
    let dense = assemble_follower_kkt(&s, &f, &z0, &zd).unwrap();
    let x = dense.solve().unwrap();
    let z = with_initial(dense.field(&x, "z", &s.tgrid, &s.grid), &z0);
    let problem = BoundaryFollowerProblem::new(s.coupled_system().unwrap(), f, z0, zd).unwrap();
    let st = solve_boundary_optimality(&problem, 1e-13).unwrap();
    let p = dense.field(&x, "p", &s.tgrid, &s.grid);
    assert!(rel_diff(&st.z, &z) <= AGREE, "{}", rel_diff(&st.z, &z));
    assert!(rel_diff(&st.p, &p) <= AGREE);
}

#[test]
fn boundary_cg_matches_dense_kkt() {
    for seed in [60, 70] {
        let (s, f, z0, zd) = follower_instance(true, seed);
        let dense = assemble_follower_kkt(&s, &f, &z0, &zd).unwrap();
        let x = dense.solve().unwrap();
        let z = with_initial(dense.field(&x, "z", &s.tgrid, &s.grid), &z0);
        let problem = BoundaryFollowerProblem::new(s.coupled_system().unwrap(), f, z0, zd).unwrap();
        let sol = solve_boundary_follower_cg(&problem, 1e-12, 500).unwrap();
        assert!(sol.converged);
        assert!(rel_diff(&sol.z, &z) <= AGREE, "{}", rel_diff(&sol.z, &z));
        let b = s.grid.boundary_index(nonlocal_stackelberg::Side::Right);
        for k in 1..=s.tgrid.n_steps() {
            assert!((sol.u_hat[k] - z.get(k, b)).abs() <= AGREE * z.max_abs());
        }
    }
}

#[test]
fn boundary_leader_matches_dense_system() {
    let s = setup(true, 5.0, 0.0);
    let z0 = random_profile(&s.grid, 27);
    let zd = random_field(&s.grid, &s.tgrid, 28);
    let dense = assemble_leader_system(&s, 1e-2, &z0, &zd).unwrap();
    let x = dense.solve().unwrap();
    let z = with_initial(dense.field(&x, "z", &s.tgrid, &s.grid), &z0);
    let problem = LeaderProblem::new(s.coupled_system().unwrap(), 1e-2, z0, zd).unwrap();
    let sol = solve_boundary_leader(&problem, 1e-12, 500).unwrap();
    let f = leader_control_from(&dense, &x, &s);
    assert!(rel_diff(&sol.f_hat, &f) <= AGREE, "{}", rel_diff(&sol.f_hat, &f));
    assert!(rel_diff(&sol.z, &z) <= AGREE);
}

#[test]
fn linear_nonlinearity_matches_dense_system() {
    let slope = 0.7;
    let base = setup(false, 5.0, 0.0);
    let shifted = setup(false, 5.0, -slope);
    let y0 = random_profile(&base.grid, 37);
    let yd = random_field(&base.grid, &base.tgrid, 38);
    let problem = SemilinearProblem {
        base: base.coupled_system().unwrap(),
        nonlinearity: Nonlinearity::new(NonlinearityKind::Linear { slope }).unwrap(),
        placement: Placement::Reaction,
        epsilon: 1e-2,
        y0: y0.clone(),
        ybar0: vec![0.0; base.grid.n_nodes()],
        yd: yd.clone(),
    };
    let run = solve_semilinear_stackelberg(&problem, 1e-10, 10, 1e-12, 500).unwrap();
    assert!(run.converged);
    let dense = assemble_leader_system(&shifted, 1e-2, &y0, &yd).unwrap();
    let x = dense.solve().unwrap();
    let f = leader_control_from(&dense, &x, &shifted);
    let z = with_initial(dense.field(&x, "z", &shifted.tgrid, &shifted.grid), &y0);
    assert!(rel_diff(&run.solution().f_hat, &f) <= AGREE);
    assert!(rel_diff(&run.solution().z, &z) <= AGREE);
}

#[test]
fn newton_state_matches_dense_linear_solve() {
    let slope = -1.3;
    let s = setup(false, 1.0, 0.0);
    let (g, tg) = (s.grid, s.tgrid);
    let sys = s.coupled_system().unwrap();
    let y0 = random_profile(&g, 47);
    let src = random_field(&g, &tg, 48);
    let gl = Nonlinearity::new(NonlinearityKind::Linear { slope }).unwrap();
    let y = solve_state(&sys.state_op, &gl, Placement::Reaction, &y0, Some(&src), &BoundaryData::homogeneous()).unwrap();

    // Monolithic implicit Euler on interior nodes, all levels at once.
    let interior: Vec<usize> = g.interior().collect();
    let (m, kk, dt, h) = (interior.len(), tg.n_steps(), tg.dt(), g.h());
    let idx = |k: usize, a: usize| (k - 1) * m + a;
    let mut a = DMatrix::<f64>::zeros(m * kk, m * kk);
    let mut b = DVector::<f64>::zeros(m * kk);
    for k in 1..=kk {
        let kern = s.kernel.samples_at(&g, &tg, k);
        for (r, &i) in interior.iter().enumerate() {
            let row = idx(k, r);
            a[(row, row)] += 1.0 / dt + 2.0 / (h * h) - slope;
            if r > 0 {
                a[(row, idx(k, r - 1))] -= 1.0 / (h * h);
            }
            if r + 1 < m {
                a[(row, idx(k, r + 1))] -= 1.0 / (h * h);
            }
            for (c, &j) in interior.iter().enumerate() {
                a[(row, idx(k, c))] += kern[(i, j)] * h;
            }
            if k > 1 {
                a[(row, idx(k - 1, r))] -= 1.0 / dt;
            } else {
                b[row] += y0[i] / dt;
            }
            b[row] += src.get(k - 1, i);
        }
    }
    let x = a.lu().solve(&b).unwrap();
    let mut worst: f64 = 0.0;
    for k in 1..=kk {
        for (r, &i) in interior.iter().enumerate() {
            worst = worst.max((y.get(k, i) - x[idx(k, r)]).abs());
        }
    }
    assert!(worst <= 1e-10 * x.amax(), "{worst}");
}

#[test]
fn registry_is_complete() {
    let source = include_str!("oracles.rs");
    for (solver, test) in ORACLE_REGISTRY {
        assert!(
            source.contains(&format!("fn {test}()")),
            "{solver} is registered with `{test}`, which is not defined here"
        );
    }
}
