//! Contact dynamics: Poisson brackets, the contact vector field, fixed-step
//! RK4 integration, and conservation diagnostics.
//!
//! The flow is generated by `X_H = d/dt + (dH/dwp_i) d/dy^i - (dH/dy^i) d/dwp_i`,
//! so state and flux evolve by `ydot = dH/dwp`, `wpdot = -dH/dy` while `t`
//! advances uniformly. The constraint `eps = wp_i ydot^i - H` (with `ydot`
//! taken on-shell as `dH/dwp`) is the conserved residual of the flow and the
//! quantity every diagnostic here watches.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::phase::{Hamiltonian, PhasePoint, TangentVector};

/// Poisson bracket `{F, G} = sum_i dF/dy^i dG/dwp_i - dF/dwp_i dG/dy^i`.
///
/// Antisymmetry is exact: each gradient is evaluated once and the two
/// products are subtracted, so `{F, G}` and `{G, F}` are bitwise negatives.
pub fn poisson_bracket(f: &Hamiltonian, g: &Hamiltonian, p: &PhasePoint) -> Result<f64> {
    let gf = f.grad(p)?;
    let gg = g.grad(p)?;
    let mut sum = 0.0;
    for i in 0..p.n() {
        sum += gf.y[i] * gg.wp[i] - gf.wp[i] * gg.y[i];
    }
    Ok(sum)
}

/// The contact vector field `X_H` at `p`: components
/// `(1, dH/dwp_1.., -dH/dy_1..)`. It contracts `dTheta` to zero and pairs
/// with `dt` to one, so the flow runs on a unified clock.
pub fn contact_vector_field(h: &Hamiltonian, p: &PhasePoint) -> Result<TangentVector> {
    let grad = h.grad(p)?;
    let n = p.n();
    let mut components = Vec::with_capacity(2 * n + 1);
    components.push(1.0);
    components.extend_from_slice(&grad.wp);
    components.extend(grad.y.iter().map(|v| -v));
    TangentVector::new(components)
}

/// A fixed-step trajectory of the contact flow.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub nodes: Vec<PhasePoint>,
    pub step: f64,
    pub meta: String,
    /// Set when integration hit a non-finite state and was truncated.
    pub diverged: bool,
}

impl Trajectory {
    pub fn n(&self) -> usize {
        self.nodes[0].n()
    }

    /// Trajectory CSV with columns `t,y1..yn,wp1..wpn,eps`.
    pub fn write_csv<W: Write>(&self, eps: &ConstraintSeries, mut w: W) -> std::io::Result<()> {
        let n = self.n();
        let mut header = String::from("t");
        for i in 1..=n {
            header.push_str(&format!(",y{i}"));
        }
        for i in 1..=n {
            header.push_str(&format!(",wp{i}"));
        }
        header.push_str(",eps");
        writeln!(w, "{header}")?;
        for (node, e) in self.nodes.iter().zip(&eps.values) {
            let mut line = format!("{}", node.t);
            for v in &node.y {
                line.push_str(&format!(",{v}"));
            }
            for v in &node.wp {
                line.push_str(&format!(",{v}"));
            }
            line.push_str(&format!(",{e}"));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

impl Trajectory {
    /// Parse the CSV layout written by [`write_csv`](Self::write_csv). The
    /// trailing `eps` column is returned alongside the nodes.
    pub fn read_csv<R: BufRead>(reader: R) -> Result<(Trajectory, Vec<f64>)> {
        let parse_err = |line: usize, reason: &str| Error::Parse {
            what: format!("trajectory CSV line {line}"),
            reason: reason.to_string(),
        };
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty file"))?
            .map_err(|e| parse_err(1, &e.to_string()))?;
        let columns: Vec<&str> = header.split(',').collect();
        if columns.len() < 4 || columns[0] != "t" || columns.last() != Some(&"eps") {
            return Err(parse_err(1, "expected header t,y1..,wp1..,eps"));
        }
        let n = (columns.len() - 2) / 2;
        if columns.len() != 2 * n + 2 {
            return Err(parse_err(1, "y and wp column counts differ"));
        }
        let mut nodes = Vec::new();
        let mut eps = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line.map_err(|e| parse_err(k + 2, &e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(k + 2, "bad number"))?;
            if fields.len() != columns.len() {
                return Err(parse_err(k + 2, "wrong number of fields"));
            }
            nodes.push(PhasePoint::new(
                fields[0],
                fields[1..1 + n].to_vec(),
                fields[1 + n..1 + 2 * n].to_vec(),
            )?);
            eps.push(fields[1 + 2 * n]);
        }
        if nodes.len() < 2 {
            return Err(Error::Contract("trajectory needs at least 2 nodes".into()));
        }
        let step = nodes[1].t - nodes[0].t;
        Ok((
            Trajectory {
                nodes,
                step,
                meta: String::new(),
                diverged: false,
            },
            eps,
        ))
    }
}

fn rk4_derivative(h: &Hamiltonian, p: &PhasePoint) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = h.grad(p)?;
    Ok((g.wp, g.y.iter().map(|v| -v).collect()))
}

fn advance(p: &PhasePoint, dt: f64, dy: &[f64], dwp: &[f64]) -> PhasePoint {
    PhasePoint {
        t: p.t + dt,
        y: p.y.iter().zip(dy).map(|(a, b)| a + dt * b).collect(),
        wp: p.wp.iter().zip(dwp).map(|(a, b)| a + dt * b).collect(),
    }
}

/// Classical fourth-order Runge-Kutta on the contact dynamical equations.
///
/// Deterministic for fixed inputs. A non-finite state truncates the
/// trajectory and sets the divergence flag instead of aborting, so batch
/// runs survive bad scenarios.
pub fn integrate(h: &Hamiltonian, p0: &PhasePoint, step: f64, steps: usize) -> Result<Trajectory> {
    if step <= 0.0 {
        return Err(Error::Contract("integration step must be positive".into()));
    }
    if steps == 0 {
        return Err(Error::Contract("need at least one integration step".into()));
    }
    let t0 = p0.t;
    let mut nodes = Vec::with_capacity(steps + 1);
    nodes.push(p0.clone());
    let mut current = p0.clone();
    let mut diverged = false;
    for k in 0..steps {
        let step_result = (|| -> Result<PhasePoint> {
            let (k1y, k1w) = rk4_derivative(h, &current)?;
            let (k2y, k2w) = rk4_derivative(h, &advance(&current, step / 2.0, &k1y, &k1w))?;
            let (k3y, k3w) = rk4_derivative(h, &advance(&current, step / 2.0, &k2y, &k2w))?;
            let (k4y, k4w) = rk4_derivative(h, &advance(&current, step, &k3y, &k3w))?;
            let n = current.n();
            let mut y = Vec::with_capacity(n);
            let mut wp = Vec::with_capacity(n);
            for i in 0..n {
                y.push(current.y[i] + step / 6.0 * (k1y[i] + 2.0 * k2y[i] + 2.0 * k3y[i] + k4y[i]));
                wp.push(
                    current.wp[i] + step / 6.0 * (k1w[i] + 2.0 * k2w[i] + 2.0 * k3w[i] + k4w[i]),
                );
            }
            // t from the step index, not accumulation, so spacing is exact.
            Ok(PhasePoint {
                t: t0 + (k + 1) as f64 * step,
                y,
                wp,
            })
        })();
        match step_result {
            Ok(next) if next.is_finite() => {
                nodes.push(next.clone());
                current = next;
            }
            _ => {
                diverged = true;
                break;
            }
        }
    }
    Ok(Trajectory {
        nodes,
        step,
        meta: String::new(),
        diverged,
    })
}

/// The constraint sampled along a trajectory.
#[derive(Debug, Clone)]
pub struct ConstraintSeries {
    pub values: Vec<f64>,
    /// `max_k |eps(t_k) - eps(t_0)|`.
    pub drift: f64,
}

/// Constraint value `eps = sum_i wp_i dH/dwp_i - H` at a single point.
///
/// `ydot` is the on-shell value `dH/dwp`, not a difference quotient of the
/// trajectory.
pub fn constraint_at(h: &Hamiltonian, p: &PhasePoint) -> Result<f64> {
    let g = h.grad(p)?;
    let work: f64 = p.wp.iter().zip(&g.wp).map(|(w, v)| w * v).sum();
    Ok(work - h.value(p))
}

/// Evaluate the constraint at every trajectory node and report the drift.
pub fn constraint_series(h: &Hamiltonian, trajectory: &Trajectory) -> Result<ConstraintSeries> {
    let mut values = Vec::with_capacity(trajectory.nodes.len());
    for node in &trajectory.nodes {
        values.push(constraint_at(h, node)?);
    }
    let first = values[0];
    let drift = values.iter().fold(0.0f64, |m, v| m.max((v - first).abs()));
    Ok(ConstraintSeries { values, drift })
}

/// Transport-law residual for an observable `F` along a trajectory:
/// `max_k | dF/dt - (dF/dt_partial + {F, H}) |`, with the total derivative
/// by centered differences over the nodes. Near zero for any smooth `F`
/// carried by the flow, conserved or not.
pub fn conservation_check(
    f: &Hamiltonian,
    h: &Hamiltonian,
    trajectory: &Trajectory,
) -> Result<f64> {
    if trajectory.nodes.len() < 3 {
        return Err(Error::Contract(
            "conservation_check needs at least 3 trajectory nodes".into(),
        ));
    }
    let dt = trajectory.step;
    let mut worst = 0.0f64;
    for k in 1..trajectory.nodes.len() - 1 {
        let prev = f.value(&trajectory.nodes[k - 1]);
        let next = f.value(&trajectory.nodes[k + 1]);
        let total = (next - prev) / (2.0 * dt);
        let p = &trajectory.nodes[k];
        let partial_t = f.grad(p)?.t;
        let bracket = poisson_bracket(f, h, p)?;
        worst = worst.max((total - (partial_t + bracket)).abs());
    }
    Ok(worst)
}
