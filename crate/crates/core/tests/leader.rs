mod common;

use std::path::Path;

use common::{random_field, random_profile, setup, setup_sized};
use nonlocal_stackelberg::grid::{interior_norm, SpaceTimeField};
use nonlocal_stackelberg::leader::{duality_identity_check, leader_objective, reduce_to_null, solve_leader_cg, LeaderProblem};
use nonlocal_stackelberg::runner::{parse_config, Scenario};

#[test]
fn uncontrolled_trajectory_matches_eigen_kernel_decay() {
    let s = setup_sized(128, 256, false, 10.0, 0.0);
    let g = s.grid;
    let pi = std::f64::consts::PI;
    let ybar0 = g.sample(|x| (pi * x).sin());
    let yd = SpaceTimeField::zeros(&s.tgrid, &g);
    let p = reduce_to_null(s.coupled_system().unwrap(), 1e-2, &ybar0, &ybar0, &yd).unwrap();
    let ybar = p.ybar.as_ref().unwrap();
    // eigen(1) kernel: sin(pi x) decays at pi^2 + 1/2
    let rate = pi * pi + 0.5;
    let horizon = s.tgrid.horizon();
    let err = g
        .interior()
        .map(|i| (ybar.get(s.tgrid.n_steps(), i) - (-rate * horizon).exp() * (pi * g.x(i)).sin()).abs())
        .fold(0.0, f64::max);
    assert!(err <= 2e-3, "{err}");
}

#[test]
fn objective_matches_brute_force_quadratic_form() {
    let s = setup(false, 10.0, 0.0);
    let (g, tg) = (s.grid, s.tgrid);
    let lp = LeaderProblem::new(s.coupled_system().unwrap(), 1e-1, random_profile(&g, 1), random_field(&g, &tg, 2)).unwrap();
    let dofs: Vec<(usize, usize)> = (0..tg.n_steps()).flat_map(|k| s.omega.support().into_iter().map(move |i| (k, i))).collect();
    let unit = |idx: &[(usize, f64)]| {
        let mut f = SpaceTimeField::zeros(&tg, &g);
        for &(j, a) in idx {
            let (k, i) = dofs[j];
            f.set(k, i, f.get(k, i) + a);
        }
        f
    };
    let j = |f: &SpaceTimeField| leader_objective(&lp, f).unwrap();
    let c = j(&unit(&[]));
    let m = dofs.len();
    let plus: Vec<f64> = (0..m).map(|a| j(&unit(&[(a, 1.0)]))).collect();
    let minus: Vec<f64> = (0..m).map(|a| j(&unit(&[(a, -1.0)]))).collect();
    let b: Vec<f64> = (0..m).map(|a| 0.5 * (plus[a] - minus[a])).collect();
    let mut h = vec![vec![0.0; m]; m];
    for a in 0..m {
        h[a][a] = plus[a] + minus[a] - 2.0 * c;
        for bb in a + 1..m {
            let v = j(&unit(&[(a, 1.0), (bb, 1.0)])) - plus[a] - plus[bb] + c;
            h[a][bb] = v;
            h[bb][a] = v;
        }
    }
    let coeffs: Vec<f64> = (0..m).map(|a| ((a * 7 % 11) as f64 - 5.0) / 3.0).collect();
    let f = unit(&coeffs.iter().cloned().enumerate().collect::<Vec<_>>());
    let quad: f64 = (0..m).map(|a| (0..m).map(|bb| coeffs[a] * h[a][bb] * coeffs[bb]).sum::<f64>()).sum();
    let model = 0.5 * quad + b.iter().zip(&coeffs).map(|(x, y)| x * y).sum::<f64>() + c;
    let direct = j(&f);
    assert!((model - direct).abs() <= 1e-9 * direct.abs(), "{model} vs {direct}");
}

#[test]
fn leader_beats_uncontrolled_by_factor_ten() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/leader_sweep.toml");
    let cfg = parse_config(&path).unwrap();
    let sc = Scenario::build(&cfg).unwrap();
    let lp = reduce_to_null(sc.system.clone(), 1e-4, &sc.y0, &sc.ybar0, &sc.yd).unwrap();
    let free = lp.system.solve_optimality(&lp.z0, None, Some(&lp.zd)).unwrap();
    let free_norm = interior_norm(free.z.row(sc.tgrid.n_steps()), &sc.grid);
    let sol = solve_leader_cg(&lp, cfg.parameters.tol, cfg.parameters.max_iter).unwrap();
    assert!(sol.converged);
    assert!(free_norm >= 10.0 * sol.terminal_norm, "{free_norm} vs {}", sol.terminal_norm);
}

#[test]
fn zero_data_has_zero_gap() {
    for boundary in [false, true] {
        let s = setup(boundary, 10.0, 0.0);
        let lp = LeaderProblem::new(
            s.coupled_system().unwrap(),
            1e-2,
            vec![0.0; s.grid.n_nodes()],
            SpaceTimeField::zeros(&s.tgrid, &s.grid),
        )
        .unwrap();
        let sol = solve_leader_cg(&lp, 1e-10, 100).unwrap();
        assert_eq!(sol.f_hat.max_abs(), 0.0);
        assert_eq!(duality_identity_check(&sol, &lp), 0.0);
    }
}

#[test]
fn gap_tracks_solver_tolerance() {
    let s = setup(false, 10.0, 0.0);
    let lp = LeaderProblem::new(s.coupled_system().unwrap(), 1e-3, random_profile(&s.grid, 3), random_field(&s.grid, &s.tgrid, 4)).unwrap();
    let tight = duality_identity_check(&solve_leader_cg(&lp, 1e-12, 1000).unwrap(), &lp);
    assert!(tight <= 1e-9, "{tight}");
    for tol in [1e-3, 1e-5, 1e-7] {
        let gap = duality_identity_check(&solve_leader_cg(&lp, tol, 1000).unwrap(), &lp);
        eprintln!("tol {tol:e}: duality gap {gap:.2e}");
    }
}
