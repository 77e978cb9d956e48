//! Scenario configuration: TOML schema, validation, canonical hashing.
//!
//! Every table rejects unknown keys so typos surface as validation errors
//! naming the offending field. The config hash is a SHA-256 digest of the
//! canonicalized text (comments stripped, keys sorted, whitespace
//! normalized), so formatting-only edits do not change run identity.

use std::path::Path;

use anyhow::{bail, Context};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use svb_core::hamiltonians;
use svb_core::kinetic::{BoundaryCondition, GridSpec, Normalization};
use svb_core::phase::Hamiltonian;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Flow,
    Kinetic,
    Stationary,
    Estimate,
    Holonomy,
    Action,
    Invariants,
}

impl Kind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Kind::Flow => "flow",
            Kind::Kinetic => "kinetic",
            Kind::Stationary => "stationary",
            Kind::Estimate => "estimate",
            Kind::Holonomy => "holonomy",
            Kind::Action => "action",
            Kind::Invariants => "invariants",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub kind: Kind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub flow: Option<FlowBlock>,
    #[serde(default)]
    pub kinetic: Option<KineticBlock>,
    #[serde(default)]
    pub stationary: Option<StationaryBlock>,
    #[serde(default)]
    pub estimate: Option<EstimateBlock>,
    #[serde(default)]
    pub holonomy: Option<HolonomyBlock>,
    #[serde(default)]
    pub action: Option<ActionBlock>,
    #[serde(default)]
    pub invariants: Option<InvariantsBlock>,
    #[serde(default)]
    pub assertions: Option<Assertions>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "family", rename_all = "snake_case")]
pub enum HamiltonianSpec {
    /// `H = wp_1 k y^1 - offset`
    Reeb {
        k: f64,
        #[serde(default = "one")]
        offset: f64,
    },
    /// `H = sum c_i wp_i - offset`
    ConstantVelocity {
        c: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    /// `H = sum wp_i^2 / 2`
    FreeQuadratic { n: usize },
    /// `H = wp_1^2 (1 + a sin y^1) / 2`
    QuadraticProfile { a: f64 },
}

fn one() -> f64 {
    1.0
}

impl HamiltonianSpec {
    pub fn build(&self) -> Hamiltonian {
        match self {
            HamiltonianSpec::Reeb { k, offset } => hamiltonians::reeb(*k, *offset),
            HamiltonianSpec::ConstantVelocity { c, offset } => {
                hamiltonians::constant_velocity(c.clone(), *offset)
            }
            HamiltonianSpec::FreeQuadratic { n } => hamiltonians::free_quadratic(*n),
            HamiltonianSpec::QuadraticProfile { a } => hamiltonians::quadratic_profile(*a),
        }
    }

    pub fn n(&self) -> usize {
        match self {
            HamiltonianSpec::Reeb { .. } | HamiltonianSpec::QuadraticProfile { .. } => 1,
            HamiltonianSpec::ConstantVelocity { c, .. } => c.len(),
            HamiltonianSpec::FreeQuadratic { n } => *n,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowBlock {
    pub hamiltonian: HamiltonianSpec,
    pub y0: Vec<f64>,
    pub wp0: Vec<f64>,
    #[serde(default)]
    pub t0: f64,
    pub step: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub extents: Vec<(f64, f64)>,
    pub points: Vec<usize>,
    pub bc: BcSpec,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BcSpec {
    Periodic,
    Reflecting,
}

impl GridBlock {
    pub fn build(&self) -> anyhow::Result<GridSpec> {
        let bc = match self.bc {
            BcSpec::Periodic => BoundaryCondition::Periodic,
            BcSpec::Reflecting => BoundaryCondition::Reflecting,
        };
        GridSpec::new(self.extents.clone(), self.points.clone(), bc).context("invalid grid block")
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientEntry {
    pub axes: Vec<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationSpec {
    Literal,
    Standard,
}

impl NormalizationSpec {
    pub fn build(&self) -> Normalization {
        match self {
            NormalizationSpec::Literal => Normalization::Literal,
            NormalizationSpec::Standard => Normalization::Standard,
        }
    }
}

fn default_standard() -> NormalizationSpec {
    NormalizationSpec::Standard
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "profile", rename_all = "snake_case")]
pub enum InitialProfile {
    Uniform,
    Gaussian { mean: Vec<f64>, variance: Vec<f64> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KineticBlock {
    pub coefficients: Vec<CoefficientEntry>,
    #[serde(default = "default_standard")]
    pub normalization: NormalizationSpec,
    pub grid: GridBlock,
    pub initial: InitialProfile,
    pub t_final: f64,
    /// Time step; defaults to the stability bound.
    #[serde(default)]
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationaryBlock {
    pub d1: Vec<f64>,
    pub d2: Vec<Vec<f64>>,
    pub grid: GridBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Gaussian {
        mean_rate: f64,
        variance_rate: f64,
    },
    Poisson {
        rate: f64,
    },
    /// Import an ensemble from CSV instead of sampling.
    Table {
        path: String,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGridBlock {
    pub start: f64,
    pub end: f64,
    pub points: usize,
}

impl TimeGridBlock {
    pub fn build(&self) -> anyhow::Result<Vec<f64>> {
        if self.points < 3
            || self.end <= self.start
            || !self.end.is_finite()
            || !self.start.is_finite()
        {
            bail!("time grid needs at least 3 increasing points");
        }
        let span = self.end - self.start;
        Ok((0..self.points)
            .map(|j| self.start + span * j as f64 / (self.points - 1) as f64)
            .collect())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateBlock {
    pub model: ModelSpec,
    #[serde(default)]
    pub samples: usize,
    pub time_grid: TimeGridBlock,
    pub max_order: usize,
    #[serde(default = "default_standard")]
    pub normalization: NormalizationSpec,
    /// Also estimate flux coefficients on the flat bundle.
    #[serde(default)]
    pub estimate_flux: bool,
    /// Write the sampled ensemble as CSV.
    #[serde(default)]
    pub export_ensemble: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "family", rename_all = "snake_case")]
pub enum FieldSpec {
    /// `wp = (0, y1)`: unit curl.
    Shear,
    /// `wp = (0, y1^2)`: curl `2 y1`.
    QuadraticShear,
    /// `wp = d(y1 y2)`: exact.
    Gradient,
    /// constant covector
    Constant { c: Vec<f64> },
}

impl FieldSpec {
    pub fn build(&self) -> svb_core::transport::FluxField {
        use svb_core::transport::FluxField;
        match self {
            FieldSpec::Shear => FluxField::new(2, |y: &[f64]| vec![0.0, y[0]]),
            FieldSpec::QuadraticShear => FluxField::new(2, |y: &[f64]| vec![0.0, y[0] * y[0]]),
            FieldSpec::Gradient => {
                FluxField::new(2, |y: &[f64]| vec![y[1], y[0]]).with_exact_hint()
            }
            FieldSpec::Constant { c } => {
                let c = c.clone();
                FluxField::new(c.len(), move |_y: &[f64]| c.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoPathBlock {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub b_alt: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HolonomyBlock {
    pub field: FieldSpec,
    #[serde(default)]
    pub loop_corners: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub two_path: Option<TwoPathBlock>,
    #[serde(default = "default_segments")]
    pub segments_per_edge: usize,
}

fn default_segments() -> usize {
    100
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescentBlock {
    #[serde(default = "default_descent_iterations")]
    pub max_iterations: usize,
    #[serde(default = "one")]
    pub rate: f64,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
}

fn default_descent_iterations() -> usize {
    500
}

fn default_grad_tol() -> f64 {
    1e-5
}

impl Default for DescentBlock {
    fn default() -> Self {
        Self {
            max_iterations: default_descent_iterations(),
            rate: 1.0,
            grad_tol: default_grad_tol(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionBlock {
    pub hamiltonian: HamiltonianSpec,
    pub y0: Vec<f64>,
    pub wp0: Vec<f64>,
    pub step: f64,
    pub steps: usize,
    /// Interior perturbation amplitude before descent.
    #[serde(default)]
    pub perturbation: f64,
    /// Start descent from a path imported in the trajectory CSV layout
    /// instead of the perturbed reference solution.
    #[serde(default)]
    pub initial_path_csv: Option<String>,
    #[serde(default)]
    pub descent: DescentBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantsBlock {
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_dims")]
    pub dims: Vec<usize>,
}

fn default_points() -> usize {
    1000
}

fn default_dims() -> Vec<usize> {
    vec![1, 2, 3]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueCheck {
    pub value: f64,
    #[serde(default)]
    pub rel_tol: Option<f64>,
    #[serde(default)]
    pub abs_tol: Option<f64>,
    #[serde(default)]
    pub component: Option<usize>,
}

impl ValueCheck {
    pub fn tolerance(&self) -> f64 {
        match (self.abs_tol, self.rel_tol) {
            (Some(a), None) => a,
            (None, Some(r)) => r * self.value.abs(),
            (Some(a), Some(r)) => a.max(r * self.value.abs()),
            (None, None) => 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientCheck {
    pub axes: Vec<usize>,
    pub value: f64,
    #[serde(default = "default_se_multiple")]
    pub max_se_multiple: f64,
}

fn default_se_multiple() -> f64 {
    4.0
}

/// Embedded acceptance checks; unknown names are rejected at parse time.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assertions {
    #[serde(default)]
    pub eps_drift_max: Option<f64>,
    #[serde(default)]
    pub final_y: Option<ValueCheck>,
    #[serde(default)]
    pub final_wp: Option<ValueCheck>,
    #[serde(default)]
    pub mass_drift_max: Option<f64>,
    #[serde(default)]
    pub final_variance: Option<ValueCheck>,
    #[serde(default)]
    pub mean_shift: Option<ValueCheck>,
    #[serde(default)]
    pub residual_max: Option<f64>,
    #[serde(default)]
    pub exp_profile_sup_error_max: Option<f64>,
    #[serde(default)]
    pub coefficients: Option<Vec<CoefficientCheck>>,
    #[serde(default)]
    pub loop_value: Option<ValueCheck>,
    #[serde(default)]
    pub difference_abs: Option<ValueCheck>,
    #[serde(default)]
    pub consistency_max: Option<f64>,
    #[serde(default)]
    pub action_value: Option<ValueCheck>,
    #[serde(default)]
    pub solution_grad_norm_max: Option<f64>,
    #[serde(default)]
    pub descent_grad_norm_max: Option<f64>,
    #[serde(default)]
    pub descent_converged: Option<bool>,
    #[serde(default)]
    pub all_pass: Option<bool>,
}

/// Parse and validate a scenario file.
pub fn load(path: &Path) -> anyhow::Result<(Scenario, String)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let scenario: Scenario = toml::from_str(&text)
        .map_err(|e| anyhow::anyhow!("config parse error in {}: {e}", path.display()))?;
    validate(&scenario)?;
    Ok((scenario, text))
}

fn validate(s: &Scenario) -> anyhow::Result<()> {
    let block_missing = |kind: &str| anyhow::anyhow!("kind \"{kind}\" requires a [{kind}] block");
    match s.kind {
        Kind::Flow => {
            let block = s.flow.as_ref().ok_or_else(|| block_missing("flow"))?;
            let n = block.hamiltonian.n();
            if block.y0.len() != n || block.wp0.len() != n {
                bail!("flow.y0 and flow.wp0 must have {n} components");
            }
            if block.step <= 0.0 || block.steps == 0 {
                bail!("flow.step must be positive and flow.steps nonzero");
            }
        }
        Kind::Kinetic => {
            let block = s.kinetic.as_ref().ok_or_else(|| block_missing("kinetic"))?;
            block.grid.build()?;
            if block.t_final <= 0.0 {
                bail!("kinetic.t_final must be positive");
            }
            if block.coefficients.is_empty() {
                bail!("kinetic.coefficients must be nonempty");
            }
        }
        Kind::Stationary => {
            let block = s
                .stationary
                .as_ref()
                .ok_or_else(|| block_missing("stationary"))?;
            block.grid.build()?;
            if block.d1.len() != block.grid.extents.len() {
                bail!("stationary.d1 length must match the grid dimension");
            }
        }
        Kind::Estimate => {
            let block = s
                .estimate
                .as_ref()
                .ok_or_else(|| block_missing("estimate"))?;
            block.time_grid.build()?;
            if !matches!(block.model, ModelSpec::Table { .. }) && block.samples < 2 {
                bail!("estimate.samples must be at least 2");
            }
            if block.max_order == 0 || block.max_order > 4 {
                bail!("estimate.max_order must be 1..=4");
            }
        }
        Kind::Holonomy => {
            let block = s
                .holonomy
                .as_ref()
                .ok_or_else(|| block_missing("holonomy"))?;
            if block.loop_corners.is_none() && block.two_path.is_none() {
                bail!("holonomy needs loop_corners or two_path");
            }
            if block.segments_per_edge == 0 {
                bail!("holonomy.segments_per_edge must be nonzero");
            }
        }
        Kind::Action => {
            let block = s.action.as_ref().ok_or_else(|| block_missing("action"))?;
            let n = block.hamiltonian.n();
            if block.y0.len() != n || block.wp0.len() != n {
                bail!("action.y0 and action.wp0 must have {n} components");
            }
        }
        Kind::Invariants => {
            // defaults suffice; the block itself is optional
            if let Some(block) = &s.invariants {
                if block.points == 0 || block.dims.is_empty() {
                    bail!("invariants needs points > 0 and at least one dimension");
                }
                if block.dims.iter().any(|&d| d == 0 || d > 3) {
                    bail!("invariants.dims entries must be 1..=3");
                }
            }
        }
    }
    Ok(())
}

/// Canonicalize config text: strip comments, normalize whitespace, sort
/// keys at every level, then digest.
pub fn config_hash(text: &str) -> anyhow::Result<String> {
    let value: toml::Value = toml::from_str(text)?;
    let mut canonical = String::new();
    write_canonical(&value, &mut canonical);
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_canonical(value: &toml::Value, out: &mut String) {
    match value {
        toml::Value::Table(table) => {
            let mut keys: Vec<&String> = table.keys().collect();
            keys.sort();
            out.push('{');
            for key in keys {
                out.push_str(key);
                out.push('=');
                write_canonical(&table[key], out);
                out.push(';');
            }
            out.push('}');
        }
        toml::Value::Array(items) => {
            out.push('[');
            for item in items {
                write_canonical(item, out);
                out.push(',');
            }
            out.push(']');
        }
        toml::Value::String(s) => out.push_str(&format!("{s:?}")),
        toml::Value::Integer(i) => out.push_str(&i.to_string()),
        toml::Value::Float(f) => out.push_str(&format!("{f:e}")),
        toml::Value::Boolean(b) => out.push_str(&b.to_string()),
        toml::Value::Datetime(d) => out.push_str(&d.to_string()),
    }
}
