#![allow(dead_code)]

use nonlocal_stackelberg::coupled::FollowerAction;
use nonlocal_stackelberg::grid::{Grid, RegionMask, RegionName, Side, SpaceTimeField, TimeGrid};
use nonlocal_stackelberg::kernel::KernelSpec;
use nonlocal_stackelberg::verification::DenseSetup;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// n = 8, K = 8, T = 0.3, eigen kernel, omega = (0.1, 0.5), O = (0.6, 0.9)
/// or the right endpoint, O_d = (0.3, 0.8).
pub fn setup(boundary: bool, mu: f64, reaction: f64) -> DenseSetup {
    setup_sized(8, 8, boundary, mu, reaction)
}

pub fn setup_sized(n: usize, steps: usize, boundary: bool, mu: f64, reaction: f64) -> DenseSetup {
    let grid = Grid::unit(n).unwrap();
    let tgrid = TimeGrid::new(0.3, steps).unwrap();
    let action = if boundary {
        FollowerAction::Boundary { side: Side::Right, gamma: 1.0 }
    } else {
        FollowerAction::Distributed(RegionMask::interval(RegionName::Observation, &grid, 0.6, 0.9).unwrap())
    };
    DenseSetup {
        omega: RegionMask::interval(RegionName::Omega, &grid, 0.1, 0.5).unwrap(),
        target: RegionMask::interval(RegionName::Target, &grid, 0.3, 0.8).unwrap(),
        kernel: KernelSpec::eigen(1.0),
        grid,
        tgrid,
        action,
        mu,
        reaction,
    }
}

pub fn random_field(grid: &Grid, tgrid: &TimeGrid, seed: u64) -> SpaceTimeField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SpaceTimeField::from_fn(tgrid, grid, |_, _| rng.random_range(-1.0..1.0))
}

/// Random interior values, zero at both endpoints.
pub fn random_profile(grid: &Grid, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![0.0; grid.n_nodes()];
    for i in grid.interior() {
        v[i] = rng.random_range(-1.0..1.0);
    }
    v
}

/// `max |a - b| / max(max |b|, tiny)`.
pub fn rel_diff(a: &SpaceTimeField, b: &SpaceTimeField) -> f64 {
    a.sub(b).max_abs() / b.max_abs().max(1e-300)
}
