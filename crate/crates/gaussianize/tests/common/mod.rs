//! Oracles shared by the integration suites: numerical Jacobians, LU
//! determinants, and composite Simpson quadrature. Everything here is
//! deliberately naive so it can serve as an independent check on the
//! library's analytic paths.
#![allow(dead_code)]

use ndarray::{Array1, Array2};

/// Central-difference Jacobian of `f` at `x`, step `h` per coordinate.
pub fn numerical_jacobian<F>(f: F, x: &Array1<f64>, h: f64) -> Array2<f64>
where
    F: Fn(&Array1<f64>) -> Array1<f64>,
{
    let d = x.len();
    let mut jac = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[j] += h;
        lo[j] -= h;
        let up = f(&hi);
        let dn = f(&lo);
        for i in 0..d {
            jac[[i, j]] = (up[i] - dn[i]) / (2.0 * h);
        }
    }
    jac
}

/// log |det A| by Gaussian elimination with partial pivoting.
pub fn log_abs_det(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "determinant needs a square matrix");
    let mut m = a.clone();
    let mut acc = 0.0;
    for k in 0..n {
        let mut pivot = k;
        for r in k + 1..n {
            if m[[r, k]].abs() > m[[pivot, k]].abs() {
                pivot = r;
            }
        }
        if pivot != k {
            for c in 0..n {
                let t = m[[k, c]];
                m[[k, c]] = m[[pivot, c]];
                m[[pivot, c]] = t;
            }
        }
        let diag = m[[k, k]];
        assert!(diag != 0.0, "singular matrix in oracle determinant");
        acc += diag.abs().ln();
        for r in k + 1..n {
            let factor = m[[r, k]] / diag;
            for c in k..n {
                m[[r, c]] -= factor * m[[k, c]];
            }
        }
    }
    acc
}

/// Composite Simpson weights for `nodes` equally spaced points (odd count).
pub fn simpson_weights(nodes: usize, step: f64) -> Vec<f64> {
    assert!(nodes >= 3 && nodes % 2 == 1, "Simpson needs an odd node count");
    let mut w = vec![0.0; nodes];
    for (i, wi) in w.iter_mut().enumerate() {
        *wi = if i == 0 || i == nodes - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        } * step
            / 3.0;
    }
    w
}

/// Integrates `exp(log_density)` over the rectangle `xr × yr` on a
/// Simpson grid with `nodes` points per axis. The callback receives
/// whole batches of (x, y) rows so callers can push them through a
/// model in one pass.
pub fn simpson_mass_2d<F>(log_density: F, xr: (f64, f64), yr: (f64, f64), nodes: usize) -> f64
where
    F: Fn(&Array2<f64>) -> Array1<f64>,
{
    let x_step = (xr.1 - xr.0) / (nodes - 1) as f64;
    let y_step = (yr.1 - yr.0) / (nodes - 1) as f64;
    let wx = simpson_weights(nodes, x_step);
    let wy = simpson_weights(nodes, y_step);
    let mut mass = 0.0;
    // One grid row per call keeps peak memory at O(nodes).
    for i in 0..nodes {
        let x = xr.0 + x_step * i as f64;
        let mut rows = Array2::<f64>::zeros((nodes, 2));
        for j in 0..nodes {
            rows[[j, 0]] = x;
            rows[[j, 1]] = yr.0 + y_step * j as f64;
        }
        let ll = log_density(&rows);
        assert_eq!(ll.len(), nodes);
        for j in 0..nodes {
            mass += wx[i] * wy[j] * ll[j].exp();
        }
    }
    mass
}
