//! Built-in generating-function families with analytic gradients.
//!
//! These cover the bundled benchmark scenarios; arbitrary closures can be
//! supplied through [`Hamiltonian::new`] directly.

use crate::phase::{Hamiltonian, PhaseGradient, PhasePoint};

/// `H = wp_1 * (k y^1) - offset` (n = 1): linear advection by the velocity
/// profile `v(y) = k y`. With `offset = 1` the flow is the stochastic Reeb
/// field with constraint identically 1, and the flux contracts as
/// `wp(t) = wp(0) exp(-k t)`.
pub fn reeb(k: f64, offset: f64) -> Hamiltonian {
    Hamiltonian::new(1, move |p: &PhasePoint| p.wp[0] * k * p.y[0] - offset).with_grad(
        move |p: &PhasePoint| PhaseGradient {
            t: 0.0,
            y: vec![k * p.wp[0]],
            wp: vec![k * p.y[0]],
        },
    )
}

/// `H = sum_i c_i wp_i - offset`: constant velocity field, divergence-free.
pub fn constant_velocity(c: Vec<f64>, offset: f64) -> Hamiltonian {
    let n = c.len();
    let c_grad = c.clone();
    Hamiltonian::new(n, move |p: &PhasePoint| {
        c.iter().zip(&p.wp).map(|(ci, wi)| ci * wi).sum::<f64>() - offset
    })
    .with_grad(move |_p: &PhasePoint| PhaseGradient {
        t: 0.0,
        y: vec![0.0; n],
        wp: c_grad.clone(),
    })
}

/// `H = sum_i wp_i^2 / 2`: free flow, quadratic in the flux.
pub fn free_quadratic(n: usize) -> Hamiltonian {
    Hamiltonian::new(n, |p: &PhasePoint| {
        p.wp.iter().map(|w| w * w).sum::<f64>() / 2.0
    })
    .with_grad(|p: &PhasePoint| PhaseGradient {
        t: 0.0,
        y: vec![0.0; p.n()],
        wp: p.wp.clone(),
    })
}

/// `H = wp_1^2 (1 + a sin y^1) / 2` (n = 1): quadratic in the flux with a
/// state-dependent profile. H is homogeneous of degree 2 in `wp`, so the
/// constraint equals H and is conserved along the exact flow while both
/// state and flux evolve nonlinearly; the benchmark for integrator order.
pub fn quadratic_profile(a: f64) -> Hamiltonian {
    assert!(
        a.abs() < 1.0,
        "profile amplitude must keep 1 + a sin y positive"
    );
    Hamiltonian::new(1, move |p: &PhasePoint| {
        p.wp[0] * p.wp[0] * (1.0 + a * p.y[0].sin()) / 2.0
    })
    .with_grad(move |p: &PhasePoint| PhaseGradient {
        t: 0.0,
        y: vec![p.wp[0] * p.wp[0] * a * p.y[0].cos() / 2.0],
        wp: vec![p.wp[0] * (1.0 + a * p.y[0].sin())],
    })
}

/// The coordinate function with the given flat index, as a phase-space
/// observable with exact gradient. Index 0 is `t`, `1..=n` are `y`,
/// `n+1..=2n` are `wp`.
pub fn coordinate(index: usize, n: usize) -> Hamiltonian {
    Hamiltonian::new(n, move |p: &PhasePoint| p.coord(index)).with_grad(move |_p: &PhasePoint| {
        let mut g = PhaseGradient::zeros(n);
        if index == 0 {
            g.t = 1.0;
        } else if index <= n {
            g.y[index - 1] = 1.0;
        } else {
            g.wp[index - n - 1] = 1.0;
        }
        g
    })
}
