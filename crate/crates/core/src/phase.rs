//! Extended phase-space points, tangent vectors, and Hamiltonian-like
//! generating functions.
//!
//! Coordinates are ordered `(t, y^1..y^n, wp_1..wp_n)`: index 0 is time,
//! indices `1..=n` are state components, indices `n+1..=2n` are flux
//! components. The full dimension is `2n + 1`.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// What a phase-space coordinate index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordinateKind {
    /// The shared time coordinate `t` (index 0).
    Time,
    /// A state component `y^i` (indices `1..=n`).
    Base(usize),
    /// A flux component `wp_i` (indices `n+1..=2n`).
    Flux(usize),
}

/// A coordinate of the `(2n+1)`-dimensional extended phase space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coordinate {
    index: usize,
    n: usize,
}

impl Coordinate {
    pub fn new(index: usize, n: usize) -> Result<Self> {
        if n == 0 || index > 2 * n {
            return Err(Error::DimensionMismatch {
                expected: 2 * n,
                actual: index,
            });
        }
        Ok(Self { index, n })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn kind(&self) -> CoordinateKind {
        if self.index == 0 {
            CoordinateKind::Time
        } else if self.index <= self.n {
            CoordinateKind::Base(self.index)
        } else {
            CoordinateKind::Flux(self.index - self.n)
        }
    }

    /// Inverse of [`kind`](Self::kind): build the coordinate from its role.
    pub fn from_kind(kind: CoordinateKind, n: usize) -> Result<Self> {
        let index = match kind {
            CoordinateKind::Time => 0,
            CoordinateKind::Base(i) => {
                if i == 0 || i > n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        actual: i,
                    });
                }
                i
            }
            CoordinateKind::Flux(i) => {
                if i == 0 || i > n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        actual: i,
                    });
                }
                n + i
            }
        };
        Coordinate::new(index, n)
    }
}

/// A point `(t, y, wp)` of the extended phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub t: f64,
    pub y: Vec<f64>,
    pub wp: Vec<f64>,
}

impl PhasePoint {
    pub fn new(t: f64, y: Vec<f64>, wp: Vec<f64>) -> Result<Self> {
        if y.len() != wp.len() || y.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: y.len(),
                actual: wp.len(),
            });
        }
        let p = Self { t, y, wp };
        if !p.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{p}"),
            });
        }
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Full phase-space dimension `2n + 1`.
    pub fn dim(&self) -> usize {
        2 * self.y.len() + 1
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.y.iter().all(|v| v.is_finite())
            && self.wp.iter().all(|v| v.is_finite())
    }

    /// Value of the coordinate with the given flat index.
    pub fn coord(&self, index: usize) -> f64 {
        let n = self.n();
        if index == 0 {
            self.t
        } else if index <= n {
            self.y[index - 1]
        } else {
            self.wp[index - n - 1]
        }
    }

    /// Copy with the coordinate at `index` shifted by `delta`.
    pub fn shifted(&self, index: usize, delta: f64) -> Self {
        let mut p = self.clone();
        let n = self.n();
        if index == 0 {
            p.t += delta;
        } else if index <= n {
            p.y[index - 1] += delta;
        } else {
            p.wp[index - n - 1] += delta;
        }
        p
    }
}

impl fmt::Display for PhasePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(t={}, y={:?}, wp={:?})", self.t, self.y, self.wp)
    }
}

/// A tangent vector with components ordered `(d/dt, d/dy^1.., d/dwp_1..)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub components: Vec<f64>,
}

impl TangentVector {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "tangent vector components".into(),
            });
        }
        Ok(Self { components })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            components: vec![0.0; dim],
        }
    }

    /// Basis vector along coordinate `index`.
    pub fn basis(index: usize, dim: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.components[index] = 1.0;
        v
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn norm(&self) -> f64 {
        self.components.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

/// Gradient of a scalar phase-space function, split by coordinate role.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGradient {
    pub t: f64,
    pub y: Vec<f64>,
    pub wp: Vec<f64>,
}

impl PhaseGradient {
    pub fn zeros(n: usize) -> Self {
        Self {
            t: 0.0,
            y: vec![0.0; n],
            wp: vec![0.0; n],
        }
    }

    /// Flat component along coordinate `index`.
    pub fn coord(&self, index: usize) -> f64 {
        let n = self.y.len();
        if index == 0 {
            self.t
        } else if index <= n {
            self.y[index - 1]
        } else {
            self.wp[index - n - 1]
        }
    }
}

type ValueFn = dyn Fn(&PhasePoint) -> f64 + Send + Sync;
type GradFn = dyn Fn(&PhasePoint) -> PhaseGradient + Send + Sync;

/// Relative tolerance for the one-time analytic-vs-difference gradient check.
const GRAD_CHECK_REL_TOL: f64 = 1e-4;

/// A scalar generating function on extended phase space, with optional
/// analytic gradient.
///
/// Gradients default to central differences with step [`fd_step`]
/// (`Self::fd_step`). When an analytic gradient is supplied it wins, and a
/// consistency check against central differences runs once on first use.
#[derive(Clone)]
pub struct Hamiltonian {
    n: usize,
    value: Arc<ValueFn>,
    grad: Option<Arc<GradFn>>,
    fd_step: f64,
    grad_checked: Arc<AtomicBool>,
}

impl fmt::Debug for Hamiltonian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Hamiltonian")
            .field("n", &self.n)
            .field("analytic_grad", &self.grad.is_some())
            .field("fd_step", &self.fd_step)
            .finish()
    }
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

impl Hamiltonian {
    pub fn new<F>(n: usize, value: F) -> Self
    where
        F: Fn(&PhasePoint) -> f64 + Send + Sync + 'static,
    {
        Self {
            n,
            value: Arc::new(value),
            grad: None,
            fd_step: DEFAULT_FD_STEP,
            grad_checked: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn with_grad<G>(mut self, grad: G) -> Self
    where
        G: Fn(&PhasePoint) -> PhaseGradient + Send + Sync + 'static,
    {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn with_fd_step(mut self, fd_step: f64) -> Self {
        assert!(fd_step > 0.0, "fd_step must be positive");
        self.fd_step = fd_step;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn fd_step(&self) -> f64 {
        self.fd_step
    }

    pub fn value(&self, p: &PhasePoint) -> f64 {
        (self.value)(p)
    }

    /// Central-difference gradient, ignoring any analytic gradient.
    pub fn fd_grad(&self, p: &PhasePoint) -> Result<PhaseGradient> {
        let h = self.fd_step;
        let mut g = PhaseGradient::zeros(self.n);
        for index in 0..p.dim() {
            let plus = self.value(&p.shifted(index, h));
            let minus = self.value(&p.shifted(index, -h));
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient at coordinate {index} of {p}"),
                });
            }
            let d = (plus - minus) / (2.0 * h);
            if index == 0 {
                g.t = d;
            } else if index <= self.n {
                g.y[index - 1] = d;
            } else {
                g.wp[index - self.n - 1] = d;
            }
        }
        Ok(g)
    }

    /// Gradient at `p`: analytic when supplied, central differences otherwise.
    pub fn grad(&self, p: &PhasePoint) -> Result<PhaseGradient> {
        match &self.grad {
            None => self.fd_grad(p),
            Some(g) => {
                let analytic = g(p);
                if !self.grad_checked.swap(true, Ordering::Relaxed) {
                    let fd = self.fd_grad(p)?;
                    for index in 0..p.dim() {
                        let a = analytic.coord(index);
                        let d = fd.coord(index);
                        let scale = a.abs().max(d.abs()).max(1.0);
                        if (a - d).abs() > GRAD_CHECK_REL_TOL * scale {
                            return Err(Error::GradientMismatch {
                                coordinate: index,
                                analytic: a,
                                finite_difference: d,
                            });
                        }
                    }
                }
                Ok(analytic)
            }
        }
    }
}
