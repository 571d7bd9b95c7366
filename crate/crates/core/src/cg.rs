//! Conjugate gradients for symmetric positive definite operators given as
//! closures over an arbitrary vector type.

use crate::error::Result;

/// Vector operations CG needs.
pub trait CgVector: Clone {
    fn dot(&self, other: &Self) -> f64;
    /// `self += a * other`.
    fn axpy(&mut self, a: f64, other: &Self);
    fn scale(&mut self, a: f64);
    fn zeros_like(&self) -> Self;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome<V> {
    pub solution: V,
    pub iterations: usize,
    /// `||b - A x||` at exit, as tracked by the recurrence.
    pub residual_norm: f64,
    pub converged: bool,
    /// Set when the residual stopped decreasing for many iterations.
    pub stagnated: bool,
}

/// Solves `A x = b` from `x0`, stopping when `||r|| <= abs_tol`.
pub fn conjugate_gradient<V: CgVector>(
    apply: impl Fn(&V) -> Result<V>,
    b: &V,
    x0: V,
    abs_tol: f64,
    max_iter: usize,
) -> Result<CgOutcome<V>> {
    let mut x = x0;
    let mut r = b.clone();
    r.axpy(-1.0, &apply(&x)?);
    let mut rr = r.dot(&r);
    let mut best = rr.sqrt();
    let mut since_best = 0usize;
    if rr.sqrt() <= abs_tol {
        return Ok(CgOutcome {
            solution: x,
            iterations: 0,
            residual_norm: rr.sqrt(),
            converged: true,
            stagnated: false,
        });
    }
    let mut d = r.clone();
    for it in 1..=max_iter {
        let ad = apply(&d)?;
        let dad = d.dot(&ad);
        if !(dad > 0.0) {
            return Ok(CgOutcome {
                solution: x,
                iterations: it - 1,
                residual_norm: rr.sqrt(),
                converged: false,
                stagnated: true,
            });
        }
        let a = rr / dad;
        x.axpy(a, &d);
        r.axpy(-a, &ad);
        let rr_new = r.dot(&r);
        let norm = rr_new.sqrt();
        if norm <= abs_tol {
            return Ok(CgOutcome {
                solution: x,
                iterations: it,
                residual_norm: norm,
                converged: true,
                stagnated: false,
            });
        }
        if norm < best {
            best = norm;
            since_best = 0;
        } else {
            since_best += 1;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        d.scale(beta);
        d.axpy(1.0, &r);
    }
    Ok(CgOutcome {
        solution: x,
        iterations: max_iter,
        residual_norm: rr.sqrt(),
        converged: false,
        stagnated: since_best >= 20,
    })
}

impl CgVector for Vec<f64> {
    fn dot(&self, other: &Self) -> f64 {
        self.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    fn axpy(&mut self, a: f64, other: &Self) {
        for (x, y) in self.iter_mut().zip(other) {
            *x += a * y;
        }
    }

    fn scale(&mut self, a: f64) {
        self.iter_mut().for_each(|x| *x *= a);
    }

    fn zeros_like(&self) -> Self {
        vec![0.0; self.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn solves_spd_system() {
        let n = 12;
        let m = DMatrix::from_fn(n, n, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let a = &m * m.transpose() + DMatrix::identity(n, n);
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let apply = |x: &Vec<f64>| Ok((&a * DVector::from_column_slice(x)).data.into());
        let out = conjugate_gradient(apply, &b, vec![0.0; n], 1e-12, 100).unwrap();
        assert!(out.converged);
        let exact = a.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
        for (x, y) in out.solution.iter().zip(exact.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_rhs_takes_no_iterations() {
        let out = conjugate_gradient(|x: &Vec<f64>| Ok(x.clone()), &vec![0.0; 4], vec![0.0; 4], 1e-12, 10)
            .unwrap();
        assert_eq!(out.iterations, 0);
        assert!(out.converged);
    }
}
