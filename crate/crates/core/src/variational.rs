//! The discrete constraint action and its stationarity machinery.
//!
//! The action of a phase-space path is `S = sum_k [wp-bar . dy - H(mid) dt]`,
//! the midpoint-rule discretization of `integral (wp_i dy^i - H dt)`, i.e.
//! minus the integral of the contact form along the path. Contact-flow
//! solutions are stationary points of `S` under endpoint-fixed variations;
//! [`first_variation`] assembles the gradient with respect to the interior
//! degrees of freedom analytically, and [`descend`] drives a path to
//! stationarity by minimizing the squared gradient norm (the action itself
//! can be unbounded below, so the stationarity residual is the objective).

use serde::Serialize;

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::phase::{Hamiltonian, PhasePoint};

/// A phase-space path with optimizable interior nodes.
#[derive(Debug, Clone)]
pub struct DiscretePath {
    nodes: Vec<PhasePoint>,
    fixed_endpoints: bool,
    optimize_time: bool,
}

impl DiscretePath {
    pub fn new(nodes: Vec<PhasePoint>, fixed_endpoints: bool) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Contract("path needs at least 2 nodes".into()));
        }
        let n = nodes[0].n();
        if nodes.iter().any(|p| p.n() != n) {
            return Err(Error::Contract("path nodes must share a dimension".into()));
        }
        if nodes.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(Error::Contract("node times must strictly increase".into()));
        }
        Ok(Self {
            nodes,
            fixed_endpoints,
            optimize_time: false,
        })
    }

    pub fn from_trajectory(trajectory: &Trajectory) -> Result<Self> {
        Self::new(trajectory.nodes.clone(), true)
    }

    /// Allow the interior time nodes to vary in [`first_variation`] and
    /// [`descend`]. Off by default.
    pub fn with_optimizable_time(mut self) -> Self {
        self.optimize_time = true;
        self
    }

    pub fn nodes(&self) -> &[PhasePoint] {
        &self.nodes
    }

    pub fn fixed_endpoints(&self) -> bool {
        self.fixed_endpoints
    }

    pub fn n(&self) -> usize {
        self.nodes[0].n()
    }

    /// Degrees of freedom per interior node.
    fn dof_per_node(&self) -> usize {
        2 * self.n() + usize::from(self.optimize_time)
    }

    /// Flatten the interior degrees of freedom.
    fn pack(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity((self.nodes.len() - 2) * self.dof_per_node());
        for node in &self.nodes[1..self.nodes.len() - 1] {
            x.extend_from_slice(&node.y);
            x.extend_from_slice(&node.wp);
            if self.optimize_time {
                x.push(node.t);
            }
        }
        x
    }

    /// Rebuild a path from packed interior degrees of freedom.
    fn unpack(&self, x: &[f64]) -> Result<DiscretePath> {
        let n = self.n();
        let per = self.dof_per_node();
        let mut nodes = self.nodes.clone();
        for (j, chunk) in x.chunks(per).enumerate() {
            let node = &mut nodes[j + 1];
            node.y.copy_from_slice(&chunk[..n]);
            node.wp.copy_from_slice(&chunk[n..2 * n]);
            if self.optimize_time {
                node.t = chunk[2 * n];
            }
        }
        let mut path = DiscretePath::new(nodes, self.fixed_endpoints)?;
        path.optimize_time = self.optimize_time;
        Ok(path)
    }
}

fn midpoint(a: &PhasePoint, b: &PhasePoint) -> PhasePoint {
    PhasePoint {
        t: 0.5 * (a.t + b.t),
        y: a.y.iter().zip(&b.y).map(|(x, y)| 0.5 * (x + y)).collect(),
        wp: a.wp.iter().zip(&b.wp).map(|(x, y)| 0.5 * (x + y)).collect(),
    }
}

/// Midpoint-rule action `S = sum_k [wp-bar . dy - H(mid) dt]`.
pub fn action(h: &Hamiltonian, path: &DiscretePath) -> Result<f64> {
    let mut total = 0.0;
    for (k, pair) in path.nodes().windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        let mid = midpoint(a, b);
        let value = h.value(&mid);
        if !value.is_finite() {
            return Err(Error::Node {
                node: k,
                reason: "H not finite at segment midpoint".into(),
            });
        }
        let mut segment = -value * (b.t - a.t);
        for i in 0..path.n() {
            segment += 0.5 * (a.wp[i] + b.wp[i]) * (b.y[i] - a.y[i]);
        }
        total += segment;
    }
    Ok(total)
}

/// Stationarity report: the action, the gradient with respect to interior
/// degrees of freedom, and its norm.
#[derive(Debug, Clone, Serialize)]
pub struct ActionReport {
    pub action: f64,
    pub grad_norm: f64,
    /// Packed gradient, `[dS/dy, dS/dwp(, dS/dt)]` per interior node. These
    /// are the discrete transport residuals: stationarity in `wp` recovers
    /// `dy = dH/dwp dt`, stationarity in `y` recovers `dwp = -dH/dy dt`,
    /// and stationarity in `t` recovers `dH = dH/dt dt`.
    pub residuals: Vec<f64>,
}

/// Analytic gradient of the discrete action over interior `(y, wp[, t])`.
pub fn first_variation(h: &Hamiltonian, path: &DiscretePath) -> Result<ActionReport> {
    if !path.fixed_endpoints() {
        return Err(Error::Contract(
            "first variation requires fixed endpoints".into(),
        ));
    }
    if path.nodes().len() < 3 {
        return Err(Error::Contract(
            "first variation needs at least 3 nodes".into(),
        ));
    }
    let n = path.n();
    let nodes = path.nodes();
    // per-segment midpoint values and gradients, evaluated once
    let mut mid_values = Vec::with_capacity(nodes.len() - 1);
    let mut mid_grads = Vec::with_capacity(nodes.len() - 1);
    for pair in nodes.windows(2) {
        let mid = midpoint(&pair[0], &pair[1]);
        mid_values.push(h.value(&mid));
        mid_grads.push(h.grad(&mid)?);
    }
    let per = path.dof_per_node();
    let mut residuals = vec![0.0; (nodes.len() - 2) * per];
    for j in 1..nodes.len() - 1 {
        let base = (j - 1) * per;
        let dt_prev = nodes[j].t - nodes[j - 1].t;
        let dt_next = nodes[j + 1].t - nodes[j].t;
        let (g_prev, g_next) = (&mid_grads[j - 1], &mid_grads[j]);
        for i in 0..n {
            // d/dy_j: average-flux difference minus the midpoint H_y pulls
            residuals[base + i] = 0.5
                * ((nodes[j - 1].wp[i] - nodes[j + 1].wp[i])
                    - (g_prev.y[i] * dt_prev + g_next.y[i] * dt_next));
            // d/dwp_j
            residuals[base + n + i] = 0.5
                * ((nodes[j + 1].y[i] - nodes[j - 1].y[i])
                    - (g_prev.wp[i] * dt_prev + g_next.wp[i] * dt_next));
        }
        if path.optimize_time {
            residuals[base + 2 * n] = (mid_values[j] - mid_values[j - 1])
                - 0.5 * (g_prev.t * dt_prev + g_next.t * dt_next);
        }
    }
    let grad_norm = residuals.iter().map(|r| r * r).sum::<f64>().sqrt();
    Ok(ActionReport {
        action: action(h, path)?,
        grad_norm,
        residuals,
    })
}

/// Options for [`descend`].
#[derive(Debug, Clone)]
pub struct DescentOptions {
    pub max_iterations: usize,
    /// Initial line-search step scale.
    pub rate: f64,
    /// Stop when the action-gradient norm falls below this.
    pub grad_tol: f64,
    /// Quasi-Newton memory; 0 falls back to steepest descent.
    pub memory: usize,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            rate: 1.0,
            grad_tol: 1e-5,
            memory: 15,
        }
    }
}

/// Outcome of stationarity descent.
#[derive(Debug, Clone)]
pub struct DescentResult {
    pub path: DiscretePath,
    pub iterations: usize,
    pub accepted_steps: usize,
    /// Final action-gradient norm `||grad S||`.
    pub grad_norm: f64,
    pub converged: bool,
    /// Set when the line search ran out of backtracks; the best iterate is
    /// still returned.
    pub stalled: bool,
}

/// Drive a path toward stationarity of the action by minimizing
/// `phi = ||grad S||^2` with a limited-memory quasi-Newton direction and
/// Armijo backtracking. The objective is monotone non-increasing over
/// accepted steps; an already-stationary path returns immediately with
/// zero accepted steps.
pub fn descend(
    h: &Hamiltonian,
    init: &DiscretePath,
    options: &DescentOptions,
) -> Result<DescentResult> {
    if !init.fixed_endpoints() {
        return Err(Error::Contract("descent requires fixed endpoints".into()));
    }
    if options.rate <= 0.0 {
        return Err(Error::Contract("descent rate must be positive".into()));
    }
    let grad_s = |x: &[f64]| -> Result<Vec<f64>> {
        let path = init.unpack(x)?;
        Ok(first_variation(h, &path)?.residuals)
    };
    let mut x = init.pack();
    let g = grad_s(&x)?;
    let phi = |g: &[f64]| -> f64 { g.iter().map(|v| v * v).sum() };
    let mut objective = phi(&g);
    let grad_norm = objective.sqrt();
    if grad_norm <= options.grad_tol {
        return Ok(DescentResult {
            path: init.clone(),
            iterations: 0,
            accepted_steps: 0,
            grad_norm,
            converged: true,
            stalled: false,
        });
    }

    // gradient of phi: 2 (Hessian of S) g, by a directional difference of
    // the analytic action gradient
    let grad_phi = |x: &[f64], g: &[f64]| -> Result<Vec<f64>> {
        let norm = phi(g).sqrt();
        if norm == 0.0 {
            return Ok(vec![0.0; x.len()]);
        }
        let eps = 1e-6 / norm.max(1e-12);
        let plus: Vec<f64> = x.iter().zip(g).map(|(xi, gi)| xi + eps * gi).collect();
        let minus: Vec<f64> = x.iter().zip(g).map(|(xi, gi)| xi - eps * gi).collect();
        let gp = grad_s(&plus)?;
        let gm = grad_s(&minus)?;
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / eps).collect())
    };

    let mut dphi = grad_phi(&x, &g)?;
    let mut history: Vec<(Vec<f64>, Vec<f64>)> = Vec::new(); // (dx, d grad-phi)
    let mut iterations = 0;
    let mut accepted_steps = 0;
    let mut stalled = false;
    while iterations < options.max_iterations {
        iterations += 1;
        // two-loop recursion for the search direction
        let mut direction: Vec<f64> = dphi.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y) in history.iter().rev() {
            let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
            if sy <= 1e-300 {
                alphas.push(0.0);
                continue;
            }
            let a: f64 = s
                .iter()
                .zip(&direction)
                .map(|(si, qi)| si * qi)
                .sum::<f64>()
                / sy;
            for (qi, yi) in direction.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y)) = history.last() {
            let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
            let yy: f64 = y.iter().map(|v| v * v).sum();
            if sy > 1e-300 && yy > 1e-300 {
                let scale = sy / yy;
                for qi in direction.iter_mut() {
                    *qi *= scale;
                }
            }
        }
        for ((s, y), a) in history.iter().zip(alphas.into_iter().rev()) {
            let sy: f64 = s.iter().zip(y).map(|(x, z)| x * z).sum();
            if sy <= 1e-300 {
                continue;
            }
            let b: f64 = y
                .iter()
                .zip(&direction)
                .map(|(yi, qi)| yi * qi)
                .sum::<f64>()
                / sy;
            for (qi, si) in direction.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        // descent direction is downhill on phi
        let slope: f64 = -direction.iter().zip(&dphi).map(|(d, g)| d * g).sum::<f64>();
        let direction = if slope < 0.0 {
            direction
        } else {
            history.clear();
            dphi.clone()
        };
        let slope: f64 = -direction.iter().zip(&dphi).map(|(d, g)| d * g).sum::<f64>();

        // Armijo backtracking
        let mut step = options.rate;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate: Vec<f64> = x
                .iter()
                .zip(&direction)
                .map(|(xi, di)| xi - step * di)
                .collect();
            let g_candidate = grad_s(&candidate)?;
            let value = phi(&g_candidate);
            if value <= objective + 1e-4 * step * slope {
                let dx: Vec<f64> = candidate.iter().zip(&x).map(|(a, b)| a - b).collect();
                let dphi_next = grad_phi(&candidate, &g_candidate)?;
                let dg: Vec<f64> = dphi_next.iter().zip(&dphi).map(|(a, b)| a - b).collect();
                history.push((dx, dg));
                if history.len() > options.memory.max(1) {
                    history.remove(0);
                }
                x = candidate;
                objective = value;
                dphi = dphi_next;
                accepted = true;
                accepted_steps += 1;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            stalled = true;
            break;
        }
        if objective.sqrt() <= options.grad_tol {
            break;
        }
    }
    let grad_norm = objective.sqrt();
    Ok(DescentResult {
        path: init.unpack(&x)?,
        iterations,
        accepted_steps,
        grad_norm,
        converged: grad_norm <= options.grad_tol,
        stalled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::integrate;
    use crate::hamiltonians;
    use crate::rng::Stream;

    fn reeb_solution_path(steps: usize) -> (Hamiltonian, DiscretePath) {
        let h = hamiltonians::reeb(0.5, 1.0);
        let p0 = PhasePoint::new(0.0, vec![1.0], vec![2.0]).unwrap();
        let traj = integrate(&h, &p0, 1.0 / steps as f64, steps).unwrap();
        let path = DiscretePath::from_trajectory(&traj).unwrap();
        (h, path)
    }

    #[test]
    fn action_examples() {
        // wp = 0, H = 0: zero action.
        let h0 = Hamiltonian::new(1, |_: &PhasePoint| 0.0);
        let nodes: Vec<PhasePoint> = (0..=10)
            .map(|k| PhasePoint::new(k as f64 * 0.1, vec![k as f64 * 0.1], vec![0.0]).unwrap())
            .collect();
        let path = DiscretePath::new(nodes, true).unwrap();
        assert_eq!(action(&h0, &path).unwrap(), 0.0);

        // straight y from 0 to 1 with wp = 2, H = 0: action 2.
        let nodes: Vec<PhasePoint> = (0..=100)
            .map(|k| PhasePoint::new(k as f64 * 0.01, vec![k as f64 * 0.01], vec![2.0]).unwrap())
            .collect();
        let path = DiscretePath::new(nodes, true).unwrap();
        assert!((action(&h0, &path).unwrap() - 2.0).abs() <= 1e-9);

        // Reeb solution over [0, 1]: constraint is identically 1, so the
        // action integrates to 1.
        let (h, path) = reeb_solution_path(1000);
        assert!((action(&h, &path).unwrap() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn action_is_minus_the_contact_form_line_integral() {
        // contraction of the pointwise contact form with each segment,
        // evaluated at segment midpoints: identical arithmetic up to
        // summation, so the identity holds to high precision
        let h = Hamiltonian::new(1, |p: &PhasePoint| {
            (p.y[0]).sin() * p.wp[0] - 0.2 * p.wp[0] * p.wp[0]
        });
        let mut rng = Stream::new(41, 0);
        let nodes: Vec<PhasePoint> = (0..=60)
            .map(|k| {
                PhasePoint::new(k as f64 * 0.02, vec![rng.normal()], vec![rng.normal()]).unwrap()
            })
            .collect();
        let path = DiscretePath::new(nodes, true).unwrap();
        let s = action(&h, &path).unwrap();
        let mut line_integral = 0.0;
        for pair in path.nodes().windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let mid = crate::variational::midpoint(a, b);
            let theta = crate::forms::contact_form_at(&h, &mid).unwrap();
            line_integral += theta.coeff(&[0]) * (b.t - a.t);
            for i in 0..path.n() {
                line_integral += theta.coeff(&[1 + i]) * (b.y[i] - a.y[i]);
            }
        }
        assert!(
            (s + line_integral).abs() <= 1e-10,
            "gap {}",
            (s + line_integral).abs()
        );
    }

    #[test]
    fn solution_path_is_nearly_stationary() {
        let (h, path) = reeb_solution_path(1000);
        let report = first_variation(&h, &path).unwrap();
        let path_norm = path
            .nodes()
            .iter()
            .map(|p| p.y[0] * p.y[0] + p.wp[0] * p.wp[0])
            .sum::<f64>()
            .sqrt();
        assert!(
            report.grad_norm <= 1e-4 * path_norm,
            "grad {} vs path {}",
            report.grad_norm,
            path_norm
        );
        // grad_norm is exactly the norm of the reported residual vector
        let check = report.residuals.iter().map(|r| r * r).sum::<f64>().sqrt();
        assert_eq!(report.grad_norm, check);
    }

    #[test]
    fn random_path_is_not_stationary() {
        let h = hamiltonians::reeb(0.5, 1.0);
        let mut rng = Stream::new(77, 0);
        let nodes: Vec<PhasePoint> = (0..=50)
            .map(|k| {
                PhasePoint::new(
                    k as f64 * 0.02,
                    vec![rng.uniform_in(0.5, 2.0)],
                    vec![rng.uniform_in(0.5, 2.0)],
                )
                .unwrap()
            })
            .collect();
        let path = DiscretePath::new(nodes, true).unwrap();
        let report = first_variation(&h, &path).unwrap();
        assert!(report.grad_norm >= 1e-2, "grad {}", report.grad_norm);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        // random smooth H and a random path
        let h = Hamiltonian::new(1, |p: &PhasePoint| {
            (p.y[0] * 0.7).sin() * p.wp[0] + 0.3 * p.wp[0] * p.wp[0] + 0.1 * p.t * p.y[0]
        });
        let mut rng = Stream::new(5, 0);
        let nodes: Vec<PhasePoint> = (0..=30)
            .map(|k| {
                PhasePoint::new(k as f64 * 0.05, vec![rng.normal()], vec![rng.normal()]).unwrap()
            })
            .collect();
        let path = DiscretePath::new(nodes, true)
            .unwrap()
            .with_optimizable_time();
        let report = first_variation(&h, &path).unwrap();
        // central differences of the action over packed DOFs
        let x = path.pack();
        let mut fd = vec![0.0; x.len()];
        let step = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += step;
            let mut xm = x.clone();
            xm[i] -= step;
            let sp = action(&h, &path.unpack(&xp).unwrap()).unwrap();
            let sm = action(&h, &path.unpack(&xm).unwrap()).unwrap();
            fd[i] = (sp - sm) / (2.0 * step);
        }
        let diff: f64 = report
            .residuals
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff <= 1e-6 * scale.max(1.0), "diff {diff} scale {scale}");
    }

    /// Endpoint-pinned smooth perturbation of the interior.
    fn perturbed(path: &DiscretePath, eta: f64) -> DiscretePath {
        let count = path.nodes().len();
        let mut nodes = path.nodes().to_vec();
        for (k, node) in nodes.iter_mut().enumerate() {
            let s = k as f64 / (count - 1) as f64;
            let bump = (std::f64::consts::PI * s).sin();
            let bump2 = (2.0 * std::f64::consts::PI * s).sin();
            node.y[0] += eta * bump;
            node.wp[0] += eta * 0.7 * bump2;
        }
        DiscretePath::new(nodes, true).unwrap()
    }

    #[test]
    fn action_gap_scales_quadratically_in_perturbation() {
        let (h, path) = reeb_solution_path(1000);
        let base = action(&h, &path).unwrap();
        let mut logs: Vec<(f64, f64)> = Vec::new();
        for eta in [1e-1, 1e-2, 1e-3, 1e-4] {
            let gap = (action(&h, &perturbed(&path, eta)).unwrap() - base).abs();
            logs.push((eta.ln(), gap.ln()));
        }
        // log-log slope over the sweep
        let n = logs.len() as f64;
        let mx = logs.iter().map(|(x, _)| x).sum::<f64>() / n;
        let my = logs.iter().map(|(_, y)| y).sum::<f64>() / n;
        let slope = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / logs.iter().map(|(x, _)| (x - mx) * (x - mx)).sum::<f64>();
        assert!((slope - 2.0).abs() <= 0.1, "log-log slope {slope}");
    }

    #[test]
    fn descend_returns_immediately_on_solutions() {
        let (h, path) = reeb_solution_path(200);
        let result = descend(&h, &path, &DescentOptions::default()).unwrap();
        assert_eq!(result.accepted_steps, 0);
        assert!(result.converged);
    }

    #[test]
    fn descend_recovers_stationarity_from_perturbation() {
        let (h, path) = reeb_solution_path(100);
        let start = perturbed(&path, 1e-2);
        let before = first_variation(&h, &start).unwrap().grad_norm;
        assert!(before > 1e-3);
        let result = descend(&h, &start, &DescentOptions::default()).unwrap();
        assert!(
            result.converged && result.grad_norm <= 1e-5,
            "grad {} after {} iterations",
            result.grad_norm,
            result.iterations
        );
        assert!(result.iterations <= 500);
    }
}
