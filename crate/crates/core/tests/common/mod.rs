//! Shared test oracles: central finite differences against tape gradients.
#![allow(dead_code)] // each test target uses a different subset

use bevplan_core::{ParamStore, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Relative error between an analytic and a finite-difference gradient entry.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central finite difference of a scalar function of one tensor, coordinate
/// by coordinate.
pub fn fd_grad_tensor(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor) -> Vec<f64> {
    let mut g = vec![0.0; x.data.len()];
    let mut xp = x.clone();
    for i in 0..x.data.len() {
        xp.data[i] = x.data[i] + FD_STEP;
        let up = f(&xp);
        xp.data[i] = x.data[i] - FD_STEP;
        let dn = f(&xp);
        xp.data[i] = x.data[i];
        g[i] = (up - dn) / (2.0 * FD_STEP);
    }
    g
}

/// Central finite difference of a scalar loss over selected coordinates of a
/// named parameter in a store.
pub fn fd_grad_param(
    f: &mut dyn FnMut(&mut ParamStore) -> f64,
    store: &mut ParamStore,
    path: &str,
    indices: &[usize],
) -> Vec<f64> {
    let mut g = Vec::with_capacity(indices.len());
    for &i in indices {
        store.nudge(path, i, FD_STEP);
        let up = f(store);
        store.nudge(path, i, -2.0 * FD_STEP);
        let dn = f(store);
        store.nudge(path, i, FD_STEP);
        g.push((up - dn) / (2.0 * FD_STEP));
    }
    g
}

/// Assert every coordinate of an analytic gradient against the FD oracle.
pub fn assert_grad_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_err(*a, *n);
        assert!(e < tol, "{what}[{i}]: analytic {a}, fd {n}, rel err {e}");
    }
}
