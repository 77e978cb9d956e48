//! Monte Carlo estimation of generator and flux coefficients from path
//! ensembles.
//!
//! An ensemble holds N realizations of the accumulated transition path
//! `S(t)` on a shared time grid, generated from counter-based streams keyed
//! by `(seed, sample index)`: results are bit-identical for a fixed seed
//! regardless of worker count. Joint cumulants come from the
//! moment-cumulant recursion over set partitions, with leave-one-out
//! jackknife standard errors.
//!
//! Generator coefficients are `D^alpha = (1/k!) d/dt <<S^alpha>>`, the time
//! derivative taken as the least-squares slope across the whole grid (a
//! two-point difference would be noise-dominated at Monte Carlo error
//! levels). Flux coefficients `B_i^alpha` reuse the same cumulant slopes
//! with the alternating `(-1)^k / k!` prefactor, the path factor acting in
//! the lower-index direction weighted by the connection (identity for a
//! flat bundle).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kinetic::{factorial, CoefficientSet, Normalization};
use crate::multi_index::MultiIndex;
use crate::rng::Stream;

pub const MAX_CUMULANT_ORDER: usize = 4;

/// Increment model for [`sample_paths`].
#[derive(Debug, Clone, PartialEq)]
pub enum IncrementModel {
    /// Independent Gaussian increments: over `dt` the path gains
    /// `N(mean_rate dt, variance_rate dt)`. A zero variance rate gives the
    /// deterministic drift path.
    Gaussian { mean_rate: f64, variance_rate: f64 },
    /// Unit jumps at the given rate; every cumulant grows as `rate * t`.
    Poisson { rate: f64 },
}

impl IncrementModel {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            IncrementModel::Gaussian {
                mean_rate,
                variance_rate,
            } => mean_rate.is_finite() && variance_rate.is_finite() && *variance_rate >= 0.0,
            IncrementModel::Poisson { rate } => rate.is_finite() && *rate >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidModel {
                reason: format!("{self:?}"),
            })
        }
    }

    fn label(&self) -> String {
        match self {
            IncrementModel::Gaussian {
                mean_rate,
                variance_rate,
            } => format!("gaussian({mean_rate},{variance_rate})"),
            IncrementModel::Poisson { rate } => format!("poisson({rate})"),
        }
    }
}

/// N sampled paths of `components` scalar processes on a shared time grid.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    times: Vec<f64>,
    components: usize,
    samples: usize,
    /// `values[(s * J + j) * C + c]`
    values: Vec<f64>,
    pub seed: u64,
    pub model: String,
}

impl PathEnsemble {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Value of component `c` (0-based) of sample `s` at time index `j`.
    pub fn value(&self, s: usize, j: usize, c: usize) -> f64 {
        self.values[(s * self.times.len() + j) * self.components + c]
    }

    fn from_values(
        times: Vec<f64>,
        components: usize,
        samples: usize,
        values: Vec<f64>,
        seed: u64,
        model: String,
    ) -> Result<Self> {
        if samples < 2 {
            return Err(Error::Contract("ensemble needs at least 2 samples".into()));
        }
        if times.len() < 2 || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Contract("time grid must strictly increase".into()));
        }
        if values.len() != samples * times.len() * components {
            return Err(Error::DimensionMismatch {
                expected: samples * times.len() * components,
                actual: values.len(),
            });
        }
        Ok(Self {
            times,
            components,
            samples,
            values,
            seed,
            model,
        })
    }

    /// Sample-wise sum of two ensembles on the same grid (independence is
    /// the caller's promise; cumulants then add).
    pub fn sum(&self, other: &PathEnsemble) -> Result<PathEnsemble> {
        if self.times != other.times
            || self.components != other.components
            || self.samples != other.samples
        {
            return Err(Error::Contract(
                "ensembles must share grid and shape".into(),
            ));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        PathEnsemble::from_values(
            self.times.clone(),
            self.components,
            self.samples,
            values,
            self.seed,
            format!("{}+{}", self.model, other.model),
        )
    }

    /// Ensemble CSV with columns `sample_id,t,S1..Sn`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = String::from("sample_id,t");
        for c in 1..=self.components {
            header.push_str(&format!(",S{c}"));
        }
        writeln!(w, "{header}")?;
        for s in 0..self.samples {
            for (j, t) in self.times.iter().enumerate() {
                let mut line = format!("{s},{t}");
                for c in 0..self.components {
                    line.push_str(&format!(",{}", self.value(s, j, c)));
                }
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }

    /// Parse the CSV layout written by [`write_csv`].
    pub fn read_csv<R: BufRead>(reader: R) -> Result<PathEnsemble> {
        let parse_err = |line: usize, reason: &str| Error::Parse {
            what: format!("ensemble CSV line {line}"),
            reason: reason.to_string(),
        };
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty file"))?
            .1
            .map_err(|e| Error::Parse {
                what: "ensemble CSV".into(),
                reason: e.to_string(),
            })
            .map(|h| (0usize, h))?;
        let columns: Vec<&str> = header.split(',').collect();
        if columns.len() < 3 || columns[0] != "sample_id" || columns[1] != "t" {
            return Err(parse_err(1, "expected header sample_id,t,S1.."));
        }
        let components = columns.len() - 2;
        let mut times: Vec<f64> = Vec::new();
        let mut rows: Vec<(usize, f64, Vec<f64>)> = Vec::new();
        for (lineno, line) in lines {
            let line = line.map_err(|e| Error::Parse {
                what: format!("ensemble CSV line {}", lineno + 1),
                reason: e.to_string(),
            })?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns.len() {
                return Err(parse_err(lineno + 1, "wrong number of fields"));
            }
            let sample: usize = fields[0]
                .parse()
                .map_err(|_| parse_err(lineno + 1, "bad sample id"))?;
            let t: f64 = fields[1]
                .parse()
                .map_err(|_| parse_err(lineno + 1, "bad time"))?;
            let mut comps = Vec::with_capacity(components);
            for f in &fields[2..] {
                comps.push(f.parse().map_err(|_| parse_err(lineno + 1, "bad value"))?);
            }
            if sample == 0 {
                times.push(t);
            }
            rows.push((sample, t, comps));
        }
        let j_count = times.len();
        if j_count < 2 {
            return Err(Error::Contract(
                "ensemble needs at least 2 time points".into(),
            ));
        }
        let samples = rows.len() / j_count;
        if samples * j_count != rows.len() {
            return Err(Error::Contract("ensemble rows do not tile the grid".into()));
        }
        let mut values = vec![0.0; samples * j_count * components];
        for (k, (sample, t, comps)) in rows.iter().enumerate() {
            let (expected_s, expected_j) = (k / j_count, k % j_count);
            if *sample != expected_s || (t - times[expected_j]).abs() > 1e-12 {
                return Err(Error::Contract(
                    "ensemble rows must be grouped by sample with identical grids".into(),
                ));
            }
            let base = (expected_s * j_count + expected_j) * components;
            values[base..base + components].copy_from_slice(comps);
        }
        PathEnsemble::from_values(times, components, samples, values, 0, "user-table".into())
    }
}

/// Generate an ensemble of accumulated paths: `S(t_0) = 0` and independent
/// per-step increments from the model. Per-sample streams are derived from
/// `(seed, sample index)`, so output is independent of worker count.
pub fn sample_paths(
    model: &IncrementModel,
    samples: usize,
    grid: &[f64],
    seed: u64,
) -> Result<PathEnsemble> {
    model.validate()?;
    if samples < 2 {
        return Err(Error::Contract("need at least 2 samples".into()));
    }
    if grid.len() < 2 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Contract("time grid must strictly increase".into()));
    }
    let j_count = grid.len();
    let components = 1usize;
    let mut values = vec![0.0; samples * j_count * components];
    let chunk = j_count * components;
    values
        .par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(s, out)| {
            let mut stream = Stream::new(seed, s as u64);
            let mut current = 0.0;
            out[0] = current;
            for j in 1..j_count {
                let dt = grid[j] - grid[j - 1];
                let increment = match model {
                    IncrementModel::Gaussian {
                        mean_rate,
                        variance_rate,
                    } => mean_rate * dt + (variance_rate * dt).sqrt() * stream.normal(),
                    IncrementModel::Poisson { rate } => stream.poisson(rate * dt) as f64,
                };
                current += increment;
                out[j] = current;
            }
        });
    PathEnsemble::from_values(
        grid.to_vec(),
        components,
        samples,
        values,
        seed,
        model.label(),
    )
}

/// All partitions of `{0..k-1}` as lists of blocks.
fn set_partitions(k: usize) -> &'static [Vec<Vec<usize>>] {
    static TABLES: OnceLock<Vec<Vec<Vec<Vec<usize>>>>> = OnceLock::new();
    let tables = TABLES.get_or_init(|| {
        let mut per_k = Vec::with_capacity(MAX_CUMULANT_ORDER + 1);
        for k in 0..=MAX_CUMULANT_ORDER {
            let mut partitions: Vec<Vec<Vec<usize>>> = vec![Vec::new()];
            for element in 0..k {
                let mut next = Vec::new();
                for p in &partitions {
                    for b in 0..p.len() {
                        let mut q = p.clone();
                        q[b].push(element);
                        next.push(q);
                    }
                    let mut q = p.clone();
                    q.push(vec![element]);
                    next.push(q);
                }
                partitions = next;
            }
            per_k.push(partitions);
        }
        per_k
    });
    &tables[k]
}

/// One cumulant's time series with jackknife standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct CumulantSeries {
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Joint cumulants of an ensemble, per multi-index and time point.
#[derive(Debug, Clone, Serialize)]
pub struct CumulantTable {
    pub times: Vec<f64>,
    pub samples: usize,
    pub entries: BTreeMap<MultiIndex, CumulantSeries>,
}

/// Precomputed evaluation plan for one joint cumulant: the distinct raw
/// moments it needs and the partition terms over them. Keeps the
/// per-sample jackknife loop free of lookups and allocation.
struct CumulantPlan {
    /// Distinct sub-multisets, as lists of component slot offsets.
    keys: Vec<Vec<usize>>,
    /// `(weight, key index per block)` for every partition.
    terms: Vec<(f64, Vec<usize>)>,
}

impl CumulantPlan {
    fn new(component_list: &[usize]) -> Self {
        let mut keys: Vec<Vec<usize>> = Vec::new();
        let mut terms = Vec::new();
        for partition in set_partitions(component_list.len()) {
            let blocks = partition.len();
            let sign = if (blocks - 1).is_multiple_of(2) {
                1.0
            } else {
                -1.0
            };
            let weight = sign * factorial(blocks - 1) as f64;
            let mut block_keys = Vec::with_capacity(blocks);
            for block in partition {
                let mut key: Vec<usize> = block.iter().map(|&pos| component_list[pos]).collect();
                key.sort_unstable();
                let idx = match keys.iter().position(|k| k == &key) {
                    Some(i) => i,
                    None => {
                        keys.push(key);
                        keys.len() - 1
                    }
                };
                block_keys.push(idx);
            }
            terms.push((weight, block_keys));
        }
        Self { keys, terms }
    }

    fn evaluate(&self, moments: &[f64]) -> f64 {
        let mut total = 0.0;
        for (weight, blocks) in &self.terms {
            let mut product = *weight;
            for &idx in blocks {
                product *= moments[idx];
            }
            total += product;
        }
        total
    }
}

/// One joint cumulant with its leave-one-out jackknife standard error.
///
/// Component `c` of sample `s` is read at
/// `values[s * sample_stride + slot_base + c]`.
fn cumulant_with_jackknife(
    plan: &CumulantPlan,
    values: &[f64],
    samples: usize,
    sample_stride: usize,
    slot_base: usize,
) -> (f64, f64) {
    let n = samples as f64;
    let key_count = plan.keys.len();
    let mut sums = vec![0.0; key_count];
    let mut prods = vec![0.0; key_count];
    for s in 0..samples {
        let base = s * sample_stride + slot_base;
        for (k, key) in plan.keys.iter().enumerate() {
            let mut prod = 1.0;
            for &c in key {
                prod *= values[base + c];
            }
            sums[k] += prod;
        }
    }
    let moments: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let value = plan.evaluate(&moments);

    // second pass: leave-one-out estimates from the shared sums
    let mut loo_sum = 0.0;
    let mut loo_sq = 0.0;
    let mut loo = vec![0.0; key_count];
    for s in 0..samples {
        let base = s * sample_stride + slot_base;
        for (k, key) in plan.keys.iter().enumerate() {
            let mut prod = 1.0;
            for &c in key {
                prod *= values[base + c];
            }
            prods[k] = prod;
        }
        for k in 0..key_count {
            loo[k] = (sums[k] - prods[k]) / (n - 1.0);
        }
        let estimate = plan.evaluate(&loo);
        loo_sum += estimate;
        loo_sq += estimate * estimate;
    }
    let mean = loo_sum / n;
    let var = ((loo_sq / n) - mean * mean).max(0.0) * (n - 1.0);
    (value, var.sqrt())
}

/// Joint cumulants of the ensemble for every multi-index up to `max_order`,
/// at every grid time, with jackknife standard errors.
pub fn moments_to_cumulants(ensemble: &PathEnsemble, max_order: usize) -> Result<CumulantTable> {
    if max_order == 0 || max_order > MAX_CUMULANT_ORDER {
        return Err(Error::UnsupportedOrder {
            order: max_order,
            max: MAX_CUMULANT_ORDER,
        });
    }
    let indices = MultiIndex::all_up_to(ensemble.components(), max_order);
    let j_count = ensemble.times().len();
    // soft sample-size check
    if ensemble.samples() < 10 * (1 << max_order) {
        eprintln!(
            "note: {} samples is thin for order-{} cumulants",
            ensemble.samples(),
            max_order
        );
    }
    let comps = ensemble.components();
    let stride = j_count * comps;
    let mut entries = BTreeMap::new();
    for alpha in indices {
        let local: Vec<usize> = alpha.axes().iter().map(|a| a - 1).collect();
        let plan = CumulantPlan::new(&local);
        let mut values = Vec::with_capacity(j_count);
        let mut stderr = Vec::with_capacity(j_count);
        for j in 0..j_count {
            let (v, se) = cumulant_with_jackknife(
                &plan,
                &ensemble.values,
                ensemble.samples(),
                stride,
                j * comps,
            );
            values.push(v);
            stderr.push(se);
        }
        entries.insert(alpha, CumulantSeries { values, stderr });
    }
    Ok(CumulantTable {
        times: ensemble.times().to_vec(),
        samples: ensemble.samples(),
        entries,
    })
}

/// Least-squares slope of `values` against `times`, with the standard
/// error propagated from per-point errors (independence assumed, which
/// overstates the error for positively correlated path estimates).
fn ls_slope(times: &[f64], values: &[f64], stderr: &[f64]) -> (f64, f64) {
    let n = times.len() as f64;
    let t_mean = times.iter().sum::<f64>() / n;
    let s_tt: f64 = times.iter().map(|t| (t - t_mean) * (t - t_mean)).sum();
    let mut slope = 0.0;
    let mut var = 0.0;
    for ((t, v), sd) in times.iter().zip(values).zip(stderr) {
        let w = (t - t_mean) / s_tt;
        slope += w * v;
        var += w * w * sd * sd;
    }
    (slope, var.sqrt())
}

/// Coefficient estimates with their standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct CoefficientEstimate {
    pub set: CoefficientSet,
    pub stderr: BTreeMap<MultiIndex, f64>,
}

/// Estimate generator coefficients `D^alpha = (1/k!) d/dt <<S^alpha>>`
/// from a cumulant table. The normalization tag records which generator
/// weight convention the values are destined for; the numbers themselves
/// are identical.
pub fn estimate_d(
    table: &CumulantTable,
    normalization: Normalization,
) -> Result<CoefficientEstimate> {
    if table.times.len() < 3 {
        return Err(Error::Contract(
            "coefficient estimation needs at least 3 time points".into(),
        ));
    }
    if table.times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Contract("time grid must strictly increase".into()));
    }
    let mut set = CoefficientSet::new(normalization);
    let mut stderr = BTreeMap::new();
    for (alpha, series) in &table.entries {
        let (slope, slope_se) = ls_slope(&table.times, &series.values, &series.stderr);
        let weight = 1.0 / factorial(alpha.order()) as f64;
        set.entries.insert(alpha.clone(), weight * slope);
        stderr.insert(alpha.clone(), weight * slope_se);
    }
    Ok(CoefficientEstimate { set, stderr })
}

/// Connection coefficients `A^i_{mu nu}` of the underlying bundle; all
/// zeros is the flat bundle.
#[derive(Debug, Clone)]
pub struct ConnectionCoefficients {
    n: usize,
    /// `a[((i-1) n + (mu-1)) n + (nu-1)]`
    a: Vec<f64>,
}

impl ConnectionCoefficients {
    pub fn flat(n: usize) -> Self {
        Self {
            n,
            a: vec![0.0; n * n * n],
        }
    }

    pub fn new(n: usize, a: Vec<f64>) -> Result<Self> {
        if a.len() != n * n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n * n,
                actual: a.len(),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "connection coefficients".into(),
            });
        }
        Ok(Self { n, a })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_flat(&self) -> bool {
        self.a.iter().all(|&v| v == 0.0)
    }

    /// `A^i_{mu nu}` with 1-based indices.
    pub fn get(&self, i: usize, mu: usize, nu: usize) -> f64 {
        self.a[((i - 1) * self.n + (mu - 1)) * self.n + (nu - 1)]
    }
}

/// Flux coefficients keyed by `(multi-index, lower index)`.
#[derive(Debug, Clone, Default)]
pub struct BCoefficients {
    entries: BTreeMap<(MultiIndex, usize), f64>,
}

impl BCoefficients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, axes: Vec<usize>, lower: usize, value: f64) {
        self.entries.insert((MultiIndex::new(axes), lower), value);
    }

    pub fn get(&self, axes: Vec<usize>, lower: usize) -> f64 {
        self.entries
            .get(&(MultiIndex::new(axes), lower))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(MultiIndex, usize), &f64)> {
        self.entries.iter()
    }

    pub fn max_order(&self) -> usize {
        self.entries
            .keys()
            .map(|(a, _)| a.order())
            .max()
            .unwrap_or(0)
    }
}

/// Flux coefficient estimates with standard errors.
#[derive(Debug, Clone)]
pub struct BCoefficientEstimate {
    pub b: BCoefficients,
    pub stderr: BTreeMap<(MultiIndex, usize), f64>,
}

/// Estimate flux coefficients `B_i^alpha` from a path ensemble.
///
/// For `|alpha| = k` the estimate carries the prefactor `(-1)^k / k!` on
/// top of the order-k generator coefficient: the flat-bundle order-1 value
/// is `-D^(mu)` and order 2 is `+D^(mu nu)/2`, matching the contraction
/// between the generator expansion and the flux expansion. The final path
/// factor runs through connection-weighted increments
/// `dW^j_i = (delta^j_i + A^j_{mu i} S-bar^mu) dS^i` accumulated by
/// trapezoid quadrature (for the flat bundle these reduce to `S` itself),
/// and the choice of which factor acts as the rate is symmetrized.
pub fn estimate_b(
    ensemble: &PathEnsemble,
    connection: &ConnectionCoefficients,
    max_order: usize,
) -> Result<BCoefficientEstimate> {
    if max_order == 0 || max_order > MAX_CUMULANT_ORDER {
        return Err(Error::UnsupportedOrder {
            order: max_order,
            max: MAX_CUMULANT_ORDER,
        });
    }
    let comps = ensemble.components();
    if connection.n() != comps {
        return Err(Error::DimensionMismatch {
            expected: comps,
            actual: connection.n(),
        });
    }
    let j_count = ensemble.times().len();
    if j_count < 3 {
        return Err(Error::Contract(
            "coefficient estimation needs at least 3 time points".into(),
        ));
    }
    let samples = ensemble.samples();

    // connection-weighted increment paths W^(j)_i, flattened after the
    // raw components: component index comps + (j-1)*comps + (i-1)
    let weighted = comps * comps;
    let mut aug = vec![0.0; samples * j_count * (comps + weighted)];
    let aug_stride = comps + weighted;
    for s in 0..samples {
        for j in 0..j_count {
            let base = (s * j_count + j) * aug_stride;
            for c in 0..comps {
                aug[base + c] = ensemble.value(s, j, c);
            }
            if j > 0 {
                let prev = (s * j_count + j - 1) * aug_stride;
                for upper in 1..=comps {
                    for lower in 1..=comps {
                        let slot = comps + (upper - 1) * comps + (lower - 1);
                        let ds =
                            ensemble.value(s, j, lower - 1) - ensemble.value(s, j - 1, lower - 1);
                        let mut weight = if upper == lower { 1.0 } else { 0.0 };
                        for mu in 1..=comps {
                            let mid = 0.5
                                * (ensemble.value(s, j, mu - 1) + ensemble.value(s, j - 1, mu - 1));
                            weight += connection.get(upper, mu, lower) * mid;
                        }
                        aug[base + slot] = aug[prev + slot] + weight * ds;
                    }
                }
            }
        }
    }
    let mut b = BCoefficients::new();
    let mut stderr = BTreeMap::new();
    for alpha in MultiIndex::all_up_to(comps, max_order) {
        let k = alpha.order();
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let prefactor = sign / (factorial(k) as f64 * factorial(k) as f64);
        for lower in 1..=comps {
            // symmetrize over which position is the connection-weighted
            // rate factor
            let axes = alpha.axes();
            let mut slope_acc = 0.0;
            let mut var_acc = 0.0;
            for r in 0..k {
                let mut component_list: Vec<usize> = Vec::with_capacity(k);
                for (pos, &a) in axes.iter().enumerate() {
                    if pos == r {
                        component_list.push(comps + (a - 1) * comps + (lower - 1));
                    } else {
                        component_list.push(a - 1);
                    }
                }
                let plan = CumulantPlan::new(&component_list);
                let mut values = Vec::with_capacity(j_count);
                let mut errs = Vec::with_capacity(j_count);
                for j in 0..j_count {
                    let (v, se) = cumulant_with_jackknife(
                        &plan,
                        &aug,
                        samples,
                        j_count * aug_stride,
                        j * aug_stride,
                    );
                    values.push(v);
                    errs.push(se);
                }
                let (slope, slope_se) = ls_slope(ensemble.times(), &values, &errs);
                slope_acc += slope / k as f64;
                var_acc += (slope_se / k as f64) * (slope_se / k as f64);
            }
            b.insert(axes.to_vec(), lower, prefactor * slope_acc);
            stderr.insert((alpha.clone(), lower), prefactor.abs() * var_acc.sqrt());
        }
    }
    Ok(BCoefficientEstimate { b, stderr })
}
