//! Scenario dispatch: run one scenario, write artifacts, evaluate the
//! embedded assertions.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use serde_json::json;

use svb_core::cumulants::{
    estimate_b, estimate_d, moments_to_cumulants, sample_paths, ConnectionCoefficients,
    IncrementModel, PathEnsemble,
};
use svb_core::dynamics::{constraint_series, integrate, poisson_bracket, Trajectory};
use svb_core::forms::{certify_contact, CertifyOptions, KForm};
use svb_core::hamiltonians;
use svb_core::kinetic::{
    apply_generator, evolve, stable_dt, stationary_second_order, CoefficientSet, GridDensity,
    GridSpec,
};
use svb_core::multi_index::MultiIndex;
use svb_core::phase::{Hamiltonian, PhasePoint};
use svb_core::rng::Stream;
use svb_core::transport::{loop_holonomy, path_dependence_experiment, transport, BasePath};
use svb_core::variational::{action, descend, first_variation, DescentOptions, DiscretePath};
use svb_core::Error as CoreError;

use crate::config::{Assertions, InitialProfile, Kind, ModelSpec, Scenario, ValueCheck};
use crate::report::{AssertionResult, RunReport};

pub enum ExitKind {
    Success,
    Validation,
    AssertionFailure,
    RuntimeFailure,
}

impl ExitKind {
    pub fn code(&self) -> i32 {
        match self {
            ExitKind::Success => 0,
            ExitKind::Validation => 2,
            ExitKind::AssertionFailure => 3,
            ExitKind::RuntimeFailure => 4,
        }
    }
}

pub struct RunOutcome {
    pub exit: ExitKind,
}

/// Run a loaded scenario, writing all artifacts under `out_dir`.
pub fn run(
    scenario: &Scenario,
    config_text: &str,
    config_dir: &Path,
    out_dir: &Path,
    quiet: bool,
) -> anyhow::Result<RunOutcome> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
    let hash = crate::config::config_hash(config_text)?;
    let mut report = RunReport::new(&scenario.name, scenario.kind.as_str(), &hash, scenario.seed);
    let started = Instant::now();
    let result = dispatch(scenario, config_dir, out_dir, &mut report);
    report.wall_time_s = started.elapsed().as_secs_f64();
    let exit = match result {
        Ok(()) => {
            if report.all_passed() {
                ExitKind::Success
            } else {
                ExitKind::AssertionFailure
            }
        }
        Err(e) => {
            report.failure = Some(format!("{e:#}"));
            if is_validation_error(&e) {
                ExitKind::Validation
            } else {
                ExitKind::RuntimeFailure
            }
        }
    };
    let report_path = out_dir.join("report.json");
    report.write(&report_path)?;
    if !quiet {
        for a in &report.assertions {
            println!(
                "[{}] {}: observed {:.6e} (bound {:.3e})",
                if a.passed { "pass" } else { "FAIL" },
                a.name,
                a.observed,
                a.bound
            );
        }
        if let Some(f) = &report.failure {
            eprintln!("run failed: {f}");
        }
        println!("report: {}", report_path.display());
    }
    Ok(RunOutcome { exit })
}

/// Configuration-level problems are distinguished from runtime failures so
/// the process can exit with the right status.
fn is_validation_error(e: &anyhow::Error) -> bool {
    if let Some(core) = e.downcast_ref::<CoreError>() {
        matches!(
            core,
            CoreError::CflViolation { .. }
                | CoreError::IndefiniteDiffusion { .. }
                | CoreError::InvalidModel { .. }
                | CoreError::UnsupportedOrder { .. }
                | CoreError::GridTooCoarse { .. }
                | CoreError::DimensionMismatch { .. }
        )
    } else {
        false
    }
}

fn dispatch(
    scenario: &Scenario,
    config_dir: &Path,
    out_dir: &Path,
    report: &mut RunReport,
) -> anyhow::Result<()> {
    let assertions = scenario.assertions.clone().unwrap_or_default();
    match scenario.kind {
        Kind::Flow => run_flow(scenario, out_dir, report, &assertions),
        Kind::Kinetic => run_kinetic(scenario, out_dir, report, &assertions),
        Kind::Stationary => run_stationary(scenario, out_dir, report, &assertions),
        Kind::Estimate => run_estimate(scenario, config_dir, out_dir, report, &assertions),
        Kind::Holonomy => run_holonomy(scenario, out_dir, report, &assertions),
        Kind::Action => run_action(scenario, config_dir, out_dir, report, &assertions),
        Kind::Invariants => run_invariants(scenario, report, &assertions),
    }?;
    write_plot_stub(scenario, out_dir, report)?;
    Ok(())
}

/// Emit a ready-to-run plotting script next to the data; plotting itself
/// stays out of process.
fn write_plot_stub(
    scenario: &Scenario,
    out_dir: &Path,
    report: &mut RunReport,
) -> anyhow::Result<()> {
    let csvs: Vec<&String> = report
        .produced_files
        .iter()
        .filter(|f| f.ends_with(".csv"))
        .collect();
    if csvs.is_empty() {
        return Ok(());
    }
    let mut script = String::from(
        "#!/usr/bin/env python3\n\
         # Generated alongside the data; edit freely.\n\
         import csv\n\n\
         import matplotlib.pyplot as plt\n\n\n\
         def read(name):\n\
         \x20   with open(name) as fh:\n\
         \x20       rows = list(csv.DictReader(fh))\n\
         \x20   return {k: [float(r[k]) for r in rows] for k in rows[0]}\n\n\n",
    );
    for csv in &csvs {
        let stem = csv.trim_end_matches(".csv");
        script.push_str(&format!("{stem} = read({csv:?})\n"));
    }
    script.push('\n');
    match scenario.kind {
        Kind::Flow | Kind::Action => {
            let stem = csvs[0].trim_end_matches(".csv");
            script.push_str(&format!(
                "fig, (top, bottom) = plt.subplots(2, 1, sharex=True)\n\
                 top.plot({stem}[\"t\"], {stem}[\"y1\"], label=\"y1\")\n\
                 top.plot({stem}[\"t\"], {stem}[\"wp1\"], label=\"wp1\")\n\
                 bottom.plot({stem}[\"t\"], {stem}[\"eps\"], label=\"eps\")\n\
                 top.legend(); bottom.legend(); bottom.set_xlabel(\"t\")\n"
            ));
        }
        Kind::Kinetic | Kind::Stationary => {
            script.push_str("fig, ax = plt.subplots()\n");
            for csv in &csvs {
                let stem = csv.trim_end_matches(".csv");
                script.push_str(&format!(
                    "ax.plot({stem}[\"y1\"], {stem}[\"p\"], label={stem:?})\n"
                ));
            }
            script.push_str("ax.legend(); ax.set_xlabel(\"y1\"); ax.set_ylabel(\"p\")\n");
        }
        Kind::Holonomy => {
            let stem = csvs[0].trim_end_matches(".csv");
            script.push_str(&format!(
                "fig, ax = plt.subplots()\n\
                 ax.plot({stem}[\"s\"], {stem}[\"dP_cum\"])\n\
                 ax.set_xlabel(\"s\"); ax.set_ylabel(\"accumulated dP\")\n"
            ));
        }
        Kind::Estimate => {
            let stem = csvs[0].trim_end_matches(".csv");
            script.push_str(&format!(
                "fig, ax = plt.subplots()\n\
                 ax.scatter({stem}[\"t\"], {stem}[\"S1\"], s=2)\n\
                 ax.set_xlabel(\"t\"); ax.set_ylabel(\"S1\")\n"
            ));
        }
        Kind::Invariants => {}
    }
    script.push_str("\nplt.savefig(\"plot.png\", dpi=150)\n");
    std::fs::write(out_dir.join("plot.py"), script)?;
    report.produced_files.push("plot.py".into());
    Ok(())
}

fn write_trajectory(
    path: &Path,
    trajectory: &Trajectory,
    eps: &svb_core::dynamics::ConstraintSeries,
) -> anyhow::Result<()> {
    let file = File::create(path)?;
    trajectory.write_csv(eps, BufWriter::new(file))?;
    Ok(())
}

fn check_component(
    results: &mut Vec<AssertionResult>,
    name: &str,
    check: &ValueCheck,
    values: &[f64],
) {
    let component = check.component.unwrap_or(1);
    let observed = values.get(component - 1).copied().unwrap_or(f64::NAN);
    results.push(AssertionResult::close(
        name,
        observed,
        check.value,
        check.tolerance(),
    ));
}

fn run_flow(
    scenario: &Scenario,
    out_dir: &Path,
    report: &mut RunReport,
    assertions: &Assertions,
) -> anyhow::Result<()> {
    let block = scenario.flow.as_ref().expect("validated");
    let h = block.hamiltonian.build();
    let p0 = PhasePoint::new(block.t0, block.y0.clone(), block.wp0.clone())?;
    let trajectory = integrate(&h, &p0, block.step, block.steps)?;
    let eps = constraint_series(&h, &trajectory)?;
    write_trajectory(&out_dir.join("trajectory.csv"), &trajectory, &eps)?;
    report.produced_files.push("trajectory.csv".into());

    let last = trajectory.nodes.last().expect("nonempty");
    report.metrics.insert("eps_drift".into(), eps.drift);
    report
        .metrics
        .insert("nodes".into(), trajectory.nodes.len() as f64);
    for (i, v) in last.y.iter().enumerate() {
        report.metrics.insert(format!("final_y{}", i + 1), *v);
    }
    for (i, v) in last.wp.iter().enumerate() {
        report.metrics.insert(format!("final_wp{}", i + 1), *v);
    }
    report.payload = json!({
        "diverged": trajectory.diverged,
        "eps_first": eps.values.first(),
        "eps_last": eps.values.last(),
    });

    if let Some(bound) = assertions.eps_drift_max {
        report
            .assertions
            .push(AssertionResult::below("eps_drift_max", eps.drift, bound));
    }
    if let Some(check) = &assertions.final_y {
        check_component(&mut report.assertions, "final_y", check, &last.y);
    }
    if let Some(check) = &assertions.final_wp {
        check_component(&mut report.assertions, "final_wp", check, &last.wp);
    }
    if trajectory.diverged {
        bail!("trajectory diverged after {} nodes", trajectory.nodes.len());
    }
    Ok(())
}

fn build_initial(profile: &InitialProfile, spec: GridSpec) -> anyhow::Result<GridDensity> {
    let density = match profile {
        InitialProfile::Uniform => GridDensity::uniform(spec)?,
        InitialProfile::Gaussian { mean, variance } => {
            if mean.len() != spec.dim() || variance.len() != spec.dim() {
                bail!("initial profile dimensions do not match the grid");
            }
            let (mean, variance) = (mean.clone(), variance.clone());
            GridDensity::from_fn(spec, move |y| {
                let mut exponent = 0.0;
                for a in 0..y.len() {
                    exponent -= (y[a] - mean[a]) * (y[a] - mean[a]) / (2.0 * variance[a]);
                }
                exponent.exp()
            })?
        }
    };
    Ok(density)
}

fn run_kinetic(
    scenario: &Scenario,
    out_dir: &Path,
    report: &mut RunReport,
    assertions: &Assertions,
) -> anyhow::Result<()> {
    let block = scenario.kinetic.as_ref().expect("validated");
    let spec = block.grid.build()?;
    let mut coeffs = CoefficientSet::new(block.normalization.build());
    for entry in &block.coefficients {
        coeffs = coeffs.with_entry(entry.axes.clone(), entry.value);
    }
    let initial = build_initial(&block.initial, spec.clone())?;

    let bound = stable_dt(&coeffs, &spec);
    let dt_target = block.dt.unwrap_or(bound).min(bound);
    let steps = (block.t_final / dt_target).ceil().max(1.0) as usize;
    let dt = block.t_final / steps as f64;

    let initial_path = out_dir.join("initial.csv");
    initial.write_csv(BufWriter::new(File::create(&initial_path)?))?;
    report.produced_files.push("initial.csv".into());

    let mean_before = initial.mean(0);
    let result = evolve(&coeffs, &initial, dt, steps)?;
    let final_path = out_dir.join("final.csv");
    result
        .density
        .write_csv(BufWriter::new(File::create(&final_path)?))?;
    report.produced_files.push("final.csv".into());

    let mass_drift = (result.density.mass() - initial.mass()).abs();
    report.metrics.insert("dt".into(), dt);
    report.metrics.insert("steps".into(), steps as f64);
    report.metrics.insert("mass_drift".into(), mass_drift);
    report
        .metrics
        .insert("clipped_mass".into(), result.clipped_mass);
    report
        .metrics
        .insert("clip_events".into(), result.clip_events as f64);
    report
        .metrics
        .insert("variance_initial".into(), initial.variance(0));
    report
        .metrics
        .insert("variance_final".into(), result.density.variance(0));
    report
        .metrics
        .insert("mean_shift".into(), result.density.mean(0) - mean_before);
    report.payload = json!({
        "normalization": coeffs.normalization,
        "stable_dt": bound,
    });

    if let Some(bound) = assertions.mass_drift_max {
        report
            .assertions
            .push(AssertionResult::below("mass_drift_max", mass_drift, bound));
    }
    if let Some(check) = &assertions.final_variance {
        report.assertions.push(AssertionResult::close(
            "final_variance",
            result.density.variance(0),
            check.value,
            check.tolerance(),
        ));
    }
    if let Some(check) = &assertions.mean_shift {
        report.assertions.push(AssertionResult::close(
            "mean_shift",
            result.density.mean(0) - mean_before,
            check.value,
            check.tolerance(),
        ));
    }
    Ok(())
}

fn run_stationary(
    scenario: &Scenario,
    out_dir: &Path,
    report: &mut RunReport,
    assertions: &Assertions,
) -> anyhow::Result<()> {
    let block = scenario.stationary.as_ref().expect("validated");
    let spec = block.grid.build()?;
    let density = stationary_second_order(&block.d1, &block.d2, &spec)?;
    let csv_path = out_dir.join("stationary.csv");
    density.write_csv(BufWriter::new(File::create(&csv_path)?))?;
    report.produced_files.push("stationary.csv".into());

    let coeffs = svb_core::kinetic::second_order_coefficients(&block.d1, &block.d2)?;
    let residual = apply_generator(&coeffs, &density)?;
    let residual_sup = residual.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    report.metrics.insert("residual_sup".into(), residual_sup);
    report.metrics.insert("mass".into(), density.mass());

    // n = 1: distance to the continuum zero-flux profile exp(a y / D)
    if spec.dim() == 1 {
        let a = block.d1[0];
        let d = block.d2[0][0];
        let m = spec.points[0];
        let mut reference: Vec<f64> = (0..m).map(|i| (a / d * spec.coord(0, i)).exp()).collect();
        let mass: f64 = reference.iter().sum::<f64>() * spec.cell_volume();
        for v in reference.iter_mut() {
            *v /= mass;
        }
        let sup_error = density
            .values()
            .iter()
            .zip(&reference)
            .fold(0.0f64, |acc, (p, r)| acc.max((p - r).abs()));
        report
            .metrics
            .insert("exp_profile_sup_error".into(), sup_error);
        if let Some(bound) = assertions.exp_profile_sup_error_max {
            report.assertions.push(AssertionResult::below(
                "exp_profile_sup_error_max",
                sup_error,
                bound,
            ));
        }
    }
    if let Some(bound) = assertions.residual_max {
        report
            .assertions
            .push(AssertionResult::below("residual_max", residual_sup, bound));
    }
    report.payload = json!({ "dim": spec.dim() });
    Ok(())
}

fn run_estimate(
    scenario: &Scenario,
    config_dir: &Path,
    out_dir: &Path,
    report: &mut RunReport,
    assertions: &Assertions,
) -> anyhow::Result<()> {
    let block = scenario.estimate.as_ref().expect("validated");
    let grid = block.time_grid.build()?;
    let ensemble: PathEnsemble = match &block.model {
        ModelSpec::Gaussian {
            mean_rate,
            variance_rate,
        } => sample_paths(
            &IncrementModel::Gaussian {
                mean_rate: *mean_rate,
                variance_rate: *variance_rate,
            },
            block.samples,
            &grid,
            scenario.seed,
        )?,
        ModelSpec::Poisson { rate } => sample_paths(
            &IncrementModel::Poisson { rate: *rate },
            block.samples,
            &grid,
            scenario.seed,
        )?,
        ModelSpec::Table { path } => {
            let full = config_dir.join(path);
            let file = File::open(&full)
                .with_context(|| format!("cannot open ensemble table {}", full.display()))?;
            PathEnsemble::read_csv(std::io::BufReader::new(file))?
        }
    };
    if block.export_ensemble {
        let path = out_dir.join("ensemble.csv");
        ensemble.write_csv(BufWriter::new(File::create(&path)?))?;
        report.produced_files.push("ensemble.csv".into());
    }

    let table = moments_to_cumulants(&ensemble, block.max_order)?;
    let estimate = estimate_d(&table, block.normalization.build())?;
    let flux = if block.estimate_flux {
        let flat = ConnectionCoefficients::flat(ensemble.components());
        let b = estimate_b(&ensemble, &flat, block.max_order)?;
        let rows: Vec<serde_json::Value> =
            b.b.entries()
                .map(|((alpha, lower), value)| {
                    let se = b
                        .stderr
                        .get(&(alpha.clone(), *lower))
                        .copied()
                        .unwrap_or(0.0);
                    json!({
                        "axes": alpha.axes(),
                        "lower": lower,
                        "value": value,
                        "stderr": se,
                    })
                })
                .collect();
        Some(rows)
    } else {
        None
    };

    report
        .metrics
        .insert("samples".into(), ensemble.samples() as f64);
    for (alpha, value) in &estimate.set.entries {
        report.metrics.insert(format!("D[{alpha}]"), *value);
        report
            .metrics
            .insert(format!("D_se[{alpha}]"), estimate.stderr[alpha]);
    }
    report.payload = json!({
        "cumulants": table,
        "coefficients": estimate,
        "flux": flux,
    });

    if let Some(checks) = &assertions.coefficients {
        for check in checks {
            let idx = MultiIndex::new(check.axes.clone());
            let observed = estimate.set.entries.get(&idx).copied();
            let se = estimate.stderr.get(&idx).copied().unwrap_or(0.0);
            match observed {
                Some(value) => {
                    report.assertions.push(AssertionResult::close(
                        &format!("coefficient[{idx}]"),
                        value,
                        check.value,
                        check.max_se_multiple * se,
                    ));
                }
                None => {
                    report
                        .assertions
                        .push(AssertionResult::flag(&format!("coefficient[{idx}]"), false));
                }
            }
        }
    }
    Ok(())
}

fn run_holonomy(
    scenario: &Scenario,
    out_dir: &Path,
    report: &mut RunReport,
    assertions: &Assertions,
) -> anyhow::Result<()> {
    let block = scenario.holonomy.as_ref().expect("validated");
    let field = block.field.build();

    if let Some(corners) = &block.loop_corners {
        let mut corners = corners.clone();
        if corners.first() != corners.last() {
            corners.push(corners[0].clone());
        }
        let looped = BasePath::polyline(&corners, block.segments_per_edge)?;
        let value = loop_holonomy(&field, &looped)?;
        let result = transport(&field, &looped)?;
        let path_csv = out_dir.join("loop.csv");
        result.write_csv(&looped, BufWriter::new(File::create(&path_csv)?))?;
        report.produced_files.push("loop.csv".into());
        report.metrics.insert("loop_value".into(), value);
        if let Some(check) = &assertions.loop_value {
            report.assertions.push(AssertionResult::close(
                "loop_value",
                value,
                check.value,
                check.tolerance(),
            ));
        }
    }

    if let Some(two) = &block.two_path {
        let experiment = path_dependence_experiment(
            &field,
            &two.a,
            &two.b,
            &two.b_alt,
            &two.c,
            block.segments_per_edge,
        )?;
        report
            .metrics
            .insert("two_path_difference".into(), experiment.difference);
        report
            .metrics
            .insert("two_path_loop".into(), experiment.loop_value);
        report
            .metrics
            .insert("consistency_gap".into(), experiment.consistency_gap);
        report.payload = json!({ "two_path": experiment });
        if let Some(check) = &assertions.difference_abs {
            report.assertions.push(AssertionResult::close(
                "difference_abs",
                experiment.difference.abs(),
                check.value,
                check.tolerance(),
            ));
        }
        if let Some(bound) = assertions.consistency_max {
            report.assertions.push(AssertionResult::below(
                "consistency_max",
                experiment.consistency_gap,
                bound,
            ));
        }
    }
    Ok(())
}

/// Endpoint-pinned sinusoidal perturbation of a path's interior.
fn perturb_path(path: &DiscretePath, eta: f64) -> anyhow::Result<DiscretePath> {
    let count = path.nodes().len();
    let mut nodes = path.nodes().to_vec();
    for (k, node) in nodes.iter_mut().enumerate() {
        let s = k as f64 / (count - 1) as f64;
        for i in 0..node.y.len() {
            node.y[i] += eta * (std::f64::consts::PI * s).sin();
            node.wp[i] += eta * 0.7 * (2.0 * std::f64::consts::PI * s).sin();
        }
    }
    Ok(DiscretePath::new(nodes, true)?)
}

fn run_action(
    scenario: &Scenario,
    config_dir: &Path,
    out_dir: &Path,
    report: &mut RunReport,
    assertions: &Assertions,
) -> anyhow::Result<()> {
    let block = scenario.action.as_ref().expect("validated");
    let h = block.hamiltonian.build();
    let p0 = PhasePoint::new(0.0, block.y0.clone(), block.wp0.clone())?;
    let trajectory = integrate(&h, &p0, block.step, block.steps)?;
    if trajectory.diverged {
        bail!("reference trajectory diverged");
    }
    let eps = constraint_series(&h, &trajectory)?;
    write_trajectory(&out_dir.join("solution.csv"), &trajectory, &eps)?;
    report.produced_files.push("solution.csv".into());

    let solution = DiscretePath::from_trajectory(&trajectory)?;
    let value = action(&h, &solution)?;
    let solution_report = first_variation(&h, &solution)?;
    report.metrics.insert("action".into(), value);
    report
        .metrics
        .insert("solution_grad_norm".into(), solution_report.grad_norm);

    let mut descent_payload = serde_json::Value::Null;
    if block.perturbation > 0.0 || block.initial_path_csv.is_some() {
        let start = match &block.initial_path_csv {
            Some(path) => {
                let full = config_dir.join(path);
                let file = File::open(&full)
                    .with_context(|| format!("cannot open initial path {}", full.display()))?;
                let (imported, _) = Trajectory::read_csv(std::io::BufReader::new(file))?;
                DiscretePath::new(imported.nodes, true)?
            }
            None => perturb_path(&solution, block.perturbation)?,
        };
        let start_report = first_variation(&h, &start)?;
        let options = DescentOptions {
            max_iterations: block.descent.max_iterations,
            rate: block.descent.rate,
            grad_tol: block.descent.grad_tol,
            memory: 15,
        };
        let result = descend(&h, &start, &options)?;
        report
            .metrics
            .insert("perturbed_grad_norm".into(), start_report.grad_norm);
        report
            .metrics
            .insert("descent_iterations".into(), result.iterations as f64);
        report
            .metrics
            .insert("descent_grad_norm".into(), result.grad_norm);
        descent_payload = json!({
            "accepted_steps": result.accepted_steps,
            "converged": result.converged,
            "stalled": result.stalled,
        });
        // export the descended path in the trajectory layout
        let descended = Trajectory {
            nodes: result.path.nodes().to_vec(),
            step: block.step,
            meta: "descended".into(),
            diverged: false,
        };
        let eps_descended = constraint_series(&h, &descended)?;
        write_trajectory(&out_dir.join("descended.csv"), &descended, &eps_descended)?;
        report.produced_files.push("descended.csv".into());

        if let Some(bound) = assertions.descent_grad_norm_max {
            report.assertions.push(AssertionResult::below(
                "descent_grad_norm_max",
                result.grad_norm,
                bound,
            ));
        }
        if let Some(expected) = assertions.descent_converged {
            report.assertions.push(AssertionResult::flag(
                "descent_converged",
                result.converged == expected,
            ));
        }
    }
    report.payload = json!({
        "first_variation": solution_report,
        "descent": descent_payload,
    });

    if let Some(check) = &assertions.action_value {
        report.assertions.push(AssertionResult::close(
            "action_value",
            value,
            check.value,
            check.tolerance(),
        ));
    }
    if let Some(bound) = assertions.solution_grad_norm_max {
        report.assertions.push(AssertionResult::below(
            "solution_grad_norm_max",
            solution_report.grad_norm,
            bound,
        ));
    }
    Ok(())
}

fn run_invariants(
    scenario: &Scenario,
    report: &mut RunReport,
    assertions: &Assertions,
) -> anyhow::Result<()> {
    let defaults = crate::config::InvariantsBlock {
        points: 1000,
        dims: vec![1, 2, 3],
    };
    let block = scenario.invariants.as_ref().unwrap_or(&defaults);
    let mut rng = Stream::new(scenario.seed, 0);

    // canonical relations at random points
    for &n in &block.dims {
        let mut worst = 0.0f64;
        for _ in 0..block.points {
            let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let wp: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let p = PhasePoint::new(rng.normal(), y, wp)?;
            for i in 1..=n {
                for j in 1..=n {
                    let yi = hamiltonians::coordinate(i, n);
                    let yj = hamiltonians::coordinate(j, n);
                    let wi = hamiltonians::coordinate(n + i, n);
                    let wj = hamiltonians::coordinate(n + j, n);
                    let delta = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max(poisson_bracket(&yi, &yj, &p)?.abs());
                    worst = worst.max(poisson_bracket(&wi, &wj, &p)?.abs());
                    worst = worst.max((poisson_bracket(&yi, &wj, &p)? - delta).abs());
                }
            }
        }
        report
            .metrics
            .insert(format!("canonical_residual_n{n}"), worst);
        report.assertions.push(AssertionResult::below(
            &format!("canonical_relations_n{n}"),
            worst,
            1e-8,
        ));
    }

    // contact certification: the standard form passes with unit volume
    let standard = Hamiltonian::new(1, |_: &PhasePoint| 1.0);
    let samples: Vec<PhasePoint> = (0..100)
        .map(|_| {
            PhasePoint::new(
                rng.uniform_in(-1.0, 1.0),
                vec![rng.uniform_in(-2.0, 2.0)],
                vec![rng.uniform_in(-2.0, 2.0)],
            )
            .expect("finite")
        })
        .collect();
    let options = CertifyOptions {
        seed: scenario.seed ^ 0xc0ffee,
        ..Default::default()
    };
    let darboux = certify_contact(&standard, &samples, &options)?;
    report
        .metrics
        .insert("darboux_min_volume".into(), darboux.min_abs_volume);
    report.assertions.push(AssertionResult::flag(
        "darboux_certification_passes",
        darboux.passed && (darboux.min_abs_volume - 1.0).abs() <= 1e-6,
    ));

    // the zero form must fail certification
    let zero = Hamiltonian::new(1, |_: &PhasePoint| 0.0);
    let flat_samples: Vec<PhasePoint> = (0..20)
        .map(|_| PhasePoint::new(rng.normal(), vec![rng.normal()], vec![0.0]).expect("finite"))
        .collect();
    let degenerate = certify_contact(&zero, &flat_samples, &options)?;
    report.assertions.push(AssertionResult::flag(
        "zero_form_certification_fails",
        !degenerate.passed,
    ));

    // wedge antisymmetry and contraction nilpotency on random forms
    let mut wedge_worst = 0.0f64;
    let mut nilpotent_worst = 0.0f64;
    for _ in 0..64 {
        let dim = 5;
        let mut a = KForm::zero(1, dim);
        let mut b = KForm::zero(1, dim);
        for i in 0..dim {
            a.add_term(&[i], rng.normal())?;
            b.add_term(&[i], rng.normal())?;
        }
        let ab = a.wedge(&b)?;
        let ba = b.wedge(&a)?;
        wedge_worst = wedge_worst.max(ab.add(&ba)?.sup_norm());
        let x = svb_core::phase::TangentVector::new((0..dim).map(|_| rng.normal()).collect())?;
        let twice = ab.interior_product(&x)?.interior_product(&x)?;
        nilpotent_worst = nilpotent_worst.max(twice.sup_norm());
    }
    report
        .metrics
        .insert("wedge_antisymmetry".into(), wedge_worst);
    report
        .metrics
        .insert("contraction_nilpotency".into(), nilpotent_worst);
    report.assertions.push(AssertionResult::below(
        "wedge_antisymmetry",
        wedge_worst,
        1e-12,
    ));
    report.assertions.push(AssertionResult::below(
        "contraction_nilpotency",
        nilpotent_worst,
        1e-12,
    ));

    report.payload = json!({
        "darboux": darboux,
        "degenerate": degenerate,
    });

    if let Some(true) = assertions.all_pass {
        let all = report.assertions.iter().all(|a| a.passed);
        report
            .assertions
            .push(AssertionResult::flag("all_pass", all));
    }
    Ok(())
}

/// Summaries for `svb list`.
pub struct ScenarioSummary {
    pub name: String,
    pub kind: Option<Kind>,
    pub path: PathBuf,
    pub error: Option<String>,
}

pub fn list_scenarios(dir: &Path) -> anyhow::Result<Vec<ScenarioSummary>> {
    let entries = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read scenario directory {}", dir.display()))?;
    let mut summaries = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        match crate::config::load(&path) {
            Ok((scenario, _)) => summaries.push(ScenarioSummary {
                name: scenario.name,
                kind: Some(scenario.kind),
                path,
                error: None,
            }),
            Err(e) => summaries.push(ScenarioSummary {
                name: path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                kind: None,
                path,
                error: Some(format!("{e:#}")),
            }),
        }
    }
    summaries.sort_by(|a, b| (&a.name, &a.path).cmp(&(&b.name, &b.path)));
    Ok(summaries)
}

/// Resolve the output directory: flag, then environment override, then a
/// per-scenario default.
pub fn resolve_out_dir(flag: Option<PathBuf>, scenario_name: &str) -> PathBuf {
    if let Some(path) = flag {
        return path;
    }
    if let Ok(env_dir) = std::env::var("SVB_OUT_DIR") {
        if !env_dir.is_empty() {
            return PathBuf::from(env_dir).join(scenario_name);
        }
    }
    PathBuf::from("runs").join(scenario_name)
}

/// Map a subcommand name to the scenario kind it must match.
pub fn expect_kind(command: &str) -> anyhow::Result<Kind> {
    Ok(match command {
        "flow" => Kind::Flow,
        "kinetic" => Kind::Kinetic,
        "stationary" => Kind::Stationary,
        "estimate" => Kind::Estimate,
        "holonomy" => Kind::Holonomy,
        "action" => Kind::Action,
        "invariants" => Kind::Invariants,
        other => return Err(anyhow!("unknown command {other}")),
    })
}
