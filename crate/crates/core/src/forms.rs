//! Sparse exterior algebra over extended phase-space coordinates and
//! numerical certification of the contact structure.
//!
//! A [`KForm`] stores coefficients on strictly increasing index tuples;
//! insertion with an unsorted tuple picks up the permutation sign. The
//! contact form on the `(2n+1)`-dimensional phase space is
//! `Theta = H dt - wp_i dy^i`, and [`certify_contact`] checks numerically
//! that `Theta ^ (dTheta)^n` is bounded away from zero and that the joint
//! kernel of `Theta` and `dTheta` is trivial.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::phase::{Hamiltonian, PhasePoint, TangentVector};
use crate::rng::Stream;

/// Antisymmetric k-form at a point, with sparse coefficients.
///
/// Keys are strictly increasing tuples of coordinate indices in
/// `0..dimension`. A 0-form holds its single value on the empty tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct KForm {
    degree: usize,
    dimension: usize,
    coeffs: BTreeMap<Vec<usize>, f64>,
}

/// Sort `indices`, returning the permutation sign, or `None` on a repeat.
fn sort_with_sign(indices: &mut [usize]) -> Option<f64> {
    // Insertion sort; counts swaps. Tuples have at most a handful of entries.
    let mut sign = 1.0;
    for i in 1..indices.len() {
        let mut j = i;
        while j > 0 && indices[j - 1] > indices[j] {
            indices.swap(j - 1, j);
            sign = -sign;
            j -= 1;
        }
    }
    for w in indices.windows(2) {
        if w[0] == w[1] {
            return None;
        }
    }
    Some(sign)
}

impl KForm {
    pub fn zero(degree: usize, dimension: usize) -> Self {
        Self {
            degree,
            dimension,
            coeffs: BTreeMap::new(),
        }
    }

    pub fn scalar(dimension: usize, value: f64) -> Self {
        let mut f = Self::zero(0, dimension);
        f.coeffs.insert(Vec::new(), value);
        f
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Add `value` on the tuple `indices` (any order); the permutation sign
    /// is applied on insertion and repeated indices contribute nothing.
    pub fn add_term(&mut self, indices: &[usize], value: f64) -> Result<()> {
        if indices.len() != self.degree {
            return Err(Error::Degree {
                op: "add_term",
                degree: indices.len(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.dimension) {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: bad,
            });
        }
        let mut key = indices.to_vec();
        let Some(sign) = sort_with_sign(&mut key) else {
            return Ok(());
        };
        let updated = {
            let entry = self.coeffs.entry(key.clone()).or_insert(0.0);
            *entry += sign * value;
            *entry
        };
        if updated == 0.0 {
            self.coeffs.remove(&key);
        }
        Ok(())
    }

    /// Coefficient on `indices` (any order, sign-adjusted); 0 when absent.
    pub fn coeff(&self, indices: &[usize]) -> f64 {
        let mut key = indices.to_vec();
        match sort_with_sign(&mut key) {
            None => 0.0,
            Some(sign) => sign * self.coeffs.get(&key).copied().unwrap_or(0.0),
        }
    }

    /// Iterate over stored (strictly increasing tuple, coefficient) pairs.
    pub fn terms(&self) -> impl Iterator<Item = (&[usize], f64)> {
        self.coeffs.iter().map(|(k, &v)| (k.as_slice(), v))
    }

    pub fn sup_norm(&self) -> f64 {
        self.coeffs.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for v in out.coeffs.values_mut() {
            *v *= factor;
        }
        out
    }

    pub fn add(&self, other: &KForm) -> Result<KForm> {
        if self.dimension != other.dimension || self.degree != other.degree {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: other.dimension,
            });
        }
        let mut out = self.clone();
        for (k, &v) in &other.coeffs {
            let e = out.coeffs.entry(k.clone()).or_insert(0.0);
            *e += v;
            if *e == 0.0 {
                out.coeffs.remove(k);
            }
        }
        Ok(out)
    }

    /// Wedge product. Degrees add; the result is empty past the dimension.
    pub fn wedge(&self, other: &KForm) -> Result<KForm> {
        if self.dimension != other.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: other.dimension,
            });
        }
        let degree = self.degree + other.degree;
        let mut out = KForm::zero(degree, self.dimension);
        if degree > self.dimension {
            return Ok(out);
        }
        let mut scratch = Vec::with_capacity(degree);
        for (ka, va) in self.terms() {
            for (kb, vb) in other.terms() {
                scratch.clear();
                scratch.extend_from_slice(ka);
                scratch.extend_from_slice(kb);
                out.add_term(&scratch, va * vb)?;
            }
        }
        Ok(out)
    }

    /// Interior product (contraction with a tangent vector in the first slot).
    pub fn interior_product(&self, x: &TangentVector) -> Result<KForm> {
        if self.degree == 0 {
            return Err(Error::Degree {
                op: "interior_product",
                degree: 0,
            });
        }
        if x.dim() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: x.dim(),
            });
        }
        let mut out = KForm::zero(self.degree - 1, self.dimension);
        for (key, value) in self.terms() {
            for (slot, &idx) in key.iter().enumerate() {
                let xi = x.components[idx];
                if xi == 0.0 {
                    continue;
                }
                let sign = if slot.is_multiple_of(2) { 1.0 } else { -1.0 };
                let rest: Vec<usize> = key
                    .iter()
                    .enumerate()
                    .filter(|&(s, _)| s != slot)
                    .map(|(_, &i)| i)
                    .collect();
                out.add_term(&rest, sign * xi * value)?;
            }
        }
        Ok(out)
    }

    /// Repeated wedge `self ^ self ^ ... ^ self` (`power` factors).
    pub fn wedge_power(&self, power: usize) -> Result<KForm> {
        let mut out = KForm::scalar(self.dimension, 1.0);
        for _ in 0..power {
            out = out.wedge(self)?;
        }
        Ok(out)
    }
}

type FormEvaluator = dyn Fn(&PhasePoint) -> KForm + Send + Sync;

/// A k-form field: a form-valued function of phase points, differentiated
/// by central finite differences of its coefficients.
#[derive(Clone)]
pub struct FormField {
    degree: usize,
    dimension: usize,
    evaluator: std::sync::Arc<FormEvaluator>,
    fd_step: f64,
}

impl FormField {
    pub fn new<F>(degree: usize, dimension: usize, evaluator: F) -> Self
    where
        F: Fn(&PhasePoint) -> KForm + Send + Sync + 'static,
    {
        Self {
            degree,
            dimension,
            evaluator: std::sync::Arc::new(evaluator),
            fd_step: crate::phase::DEFAULT_FD_STEP,
        }
    }

    pub fn with_fd_step(mut self, fd_step: f64) -> Self {
        assert!(fd_step > 0.0, "fd_step must be positive");
        self.fd_step = fd_step;
        self
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn eval(&self, p: &PhasePoint) -> Result<KForm> {
        let form = (self.evaluator)(p);
        if form.degree() != self.degree || form.dimension() != self.dimension {
            return Err(Error::Degree {
                op: "form field evaluator",
                degree: form.degree(),
            });
        }
        if form.coeffs.values().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("form field at {p}"),
            });
        }
        Ok(form)
    }

    /// The exterior derivative as a field, for nested differentiation.
    pub fn derivative_field(&self) -> FormField {
        let inner = self.clone();
        FormField {
            degree: self.degree + 1,
            dimension: self.dimension,
            evaluator: std::sync::Arc::new(move |p: &PhasePoint| {
                inner.exterior_derivative(p).unwrap_or_else(|_| {
                    let mut f = KForm::zero(inner.degree + 1, inner.dimension);
                    let tuple: Vec<usize> = (0..inner.degree + 1).collect();
                    let _ = f.add_term(&tuple, f64::NAN);
                    f
                })
            }),
            fd_step: self.fd_step,
        }
    }

    /// Exterior derivative at `p` by central differences of each stored
    /// coefficient along every coordinate.
    pub fn exterior_derivative(&self, p: &PhasePoint) -> Result<KForm> {
        let h = self.fd_step;
        let mut out = KForm::zero(self.degree + 1, self.dimension);
        if self.degree + 1 > self.dimension {
            return Ok(out);
        }
        let mut scratch = Vec::with_capacity(self.degree + 1);
        for mu in 0..self.dimension {
            let plus = self.eval(&p.shifted(mu, h))?;
            let minus = self.eval(&p.shifted(mu, -h))?;
            let diff = plus.add(&minus.scale(-1.0))?;
            for (key, v) in diff.terms() {
                scratch.clear();
                scratch.push(mu);
                scratch.extend_from_slice(key);
                out.add_term(&scratch, v / (2.0 * h))?;
            }
        }
        Ok(out)
    }
}

/// Contact form `Theta = H dt - wp_i dy^i` at a point.
pub fn contact_form_at(hamiltonian: &Hamiltonian, p: &PhasePoint) -> Result<KForm> {
    let n = p.n();
    let value = hamiltonian.value(p);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: format!("H at {p}"),
        });
    }
    let mut theta = KForm::zero(1, p.dim());
    theta.add_term(&[0], value)?;
    for i in 0..n {
        theta.add_term(&[1 + i], -p.wp[i])?;
    }
    Ok(theta)
}

/// Form field wrapping [`contact_form_at`] for a fixed Hamiltonian.
pub fn contact_form_field(hamiltonian: &Hamiltonian) -> FormField {
    let h = hamiltonian.clone();
    let dim = 2 * hamiltonian.n() + 1;
    FormField::new(1, dim, move |p| {
        contact_form_at(&h, p).unwrap_or_else(|_| {
            // surface evaluation failures through the field's finiteness check
            let mut f = KForm::zero(1, p.dim());
            let _ = f.add_term(&[0], f64::NAN);
            f
        })
    })
}

/// Per-sample outcome of the contact certification.
#[derive(Debug, Clone, Serialize)]
pub struct ContactSample {
    /// Coefficient of the top-degree form `Theta ^ (dTheta)^n`.
    pub volume_coefficient: f64,
    /// Smallest contraction residual found among kernel probes; a unit
    /// vector annihilating both forms would drive this to zero.
    pub kernel_residual: f64,
    /// Whether the forms could be evaluated at the sample.
    pub evaluated: bool,
}

/// Report produced by [`certify_contact`].
#[derive(Debug, Clone, Serialize)]
pub struct ContactReport {
    pub samples: Vec<ContactSample>,
    pub min_abs_volume: f64,
    pub min_kernel_residual: f64,
    pub volume_threshold: f64,
    pub kernel_threshold: f64,
    pub passed: bool,
}

/// Options for [`certify_contact`].
#[derive(Debug, Clone)]
pub struct CertifyOptions {
    /// Minimum admissible `|volume coefficient|`.
    pub volume_threshold: f64,
    /// A probe that annihilates both forms while keeping norm above this
    /// threshold disproves the trivial-kernel property.
    pub kernel_threshold: f64,
    /// Random probes per sample point.
    pub probes_per_sample: usize,
    pub seed: u64,
    pub fd_step: f64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            volume_threshold: 1e-6,
            kernel_threshold: 1e-6,
            probes_per_sample: 64,
            seed: 0x5eed,
            fd_step: crate::phase::DEFAULT_FD_STEP,
        }
    }
}

/// Stack `Theta` and the contraction matrix of `dTheta` into rows:
/// row 0 is `Theta`, row `1 + nu` maps `X` to `(iota_X dTheta)_nu`.
fn kernel_matrix(theta: &KForm, dtheta: &KForm, dim: usize) -> Vec<Vec<f64>> {
    let mut rows = vec![vec![0.0; dim]; dim + 1];
    for mu in 0..dim {
        rows[0][mu] = theta.coeff(&[mu]);
    }
    for (key, v) in dtheta.terms() {
        let (a, b) = (key[0], key[1]);
        // (iota_X dTheta)_nu = sum_mu X^mu dTheta_{mu nu}
        rows[1 + b][a] += v;
        rows[1 + a][b] -= v;
    }
    rows
}

fn mat_vec(rows: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    rows.iter()
        .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Smallest-residual unit vector found by inverse iteration on `M^T M`,
/// started from random probes. Returns `min ||M x|| / ||x||`.
fn min_kernel_residual(rows: &[Vec<f64>], dim: usize, probes: usize, rng: &mut Stream) -> f64 {
    // Gram matrix G = M^T M, shifted only by zero; if G is singular the
    // Cholesky factorization fails and the residual is reported as zero.
    let mut gram = vec![vec![0.0; dim]; dim];
    for row in rows {
        for i in 0..dim {
            for j in 0..dim {
                gram[i][j] += row[i] * row[j];
            }
        }
    }
    let chol = match cholesky(&gram) {
        Some(c) => c,
        None => return 0.0,
    };
    let mut best = f64::INFINITY;
    for _ in 0..probes {
        let mut x: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        normalize(&mut x);
        for _ in 0..8 {
            let mut z = chol_solve(&chol, &x);
            normalize(&mut z);
            x = z;
        }
        let residual = norm(&mat_vec(rows, &x));
        best = best.min(residual);
    }
    best
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn normalize(x: &mut [f64]) {
    let n = norm(x);
    if n > 0.0 {
        for v in x.iter_mut() {
            *v /= n;
        }
    }
}

fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

fn chol_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    x
}

/// Certify the contact structure induced by `hamiltonian` at the samples.
///
/// At each point the `(2n+1)`-form `Theta ^ (dTheta)^n` is evaluated and its
/// single coefficient recorded; certification requires the minimum absolute
/// coefficient to clear `volume_threshold`. Random probes then search for a
/// unit vector annihilating both `Theta` and `dTheta`; finding one (residual
/// below `kernel_threshold`) disproves the direct-sum split of the tangent
/// space and fails the certification. Samples where the forms cannot be
/// evaluated are recorded as failures, never an abort.
pub fn certify_contact(
    hamiltonian: &Hamiltonian,
    samples: &[PhasePoint],
    options: &CertifyOptions,
) -> Result<ContactReport> {
    if samples.is_empty() {
        return Err(Error::Contract("certify_contact requires samples".into()));
    }
    let mut rng = Stream::new(options.seed, 0);
    let mut report_samples = Vec::with_capacity(samples.len());
    let mut min_abs_volume = f64::INFINITY;
    let mut min_kernel = f64::INFINITY;
    let mut all_evaluated = true;
    for p in samples {
        let n = p.n();
        let dim = p.dim();
        let field = contact_form_field(hamiltonian).with_fd_step(options.fd_step);
        let theta = contact_form_at(hamiltonian, p);
        let dtheta = field.exterior_derivative(p);
        let (theta, dtheta) = match (theta, dtheta) {
            (Ok(t), Ok(dt)) => (t, dt),
            _ => {
                all_evaluated = false;
                report_samples.push(ContactSample {
                    volume_coefficient: f64::NAN,
                    kernel_residual: f64::NAN,
                    evaluated: false,
                });
                min_abs_volume = 0.0;
                min_kernel = 0.0;
                continue;
            }
        };
        let volume = theta.wedge(&dtheta.wedge_power(n)?)?;
        let vol_coeff = {
            let top: Vec<usize> = (0..dim).collect();
            volume.coeff(&top)
        };
        let rows = kernel_matrix(&theta, &dtheta, dim);
        let kernel_residual = min_kernel_residual(&rows, dim, options.probes_per_sample, &mut rng);
        min_abs_volume = min_abs_volume.min(vol_coeff.abs());
        min_kernel = min_kernel.min(kernel_residual);
        report_samples.push(ContactSample {
            volume_coefficient: vol_coeff,
            kernel_residual,
            evaluated: true,
        });
    }
    let passed = all_evaluated
        && min_abs_volume >= options.volume_threshold
        && min_kernel > options.kernel_threshold;
    Ok(ContactReport {
        samples: report_samples,
        min_abs_volume,
        min_kernel_residual: min_kernel,
        volume_threshold: options.volume_threshold,
        kernel_threshold: options.kernel_threshold,
        passed,
    })
}
