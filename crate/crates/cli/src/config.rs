//! Configuration loading: strict TOML with typo suggestions, then a
//! validation pass that reports every failure at once.

use pkcal_core::calibrate::LambdaPolicy;
use pkcal_core::domain::{DomainSpec, QuadratureKind};
use pkcal_core::kernel::{KernelFamily, KernelSpec};
use pkcal_core::model::{BuiltinConfig, ExternalModelSpec, BUILTIN_NAMES};
use pkcal_core::optim::OptimizerSettings;
use pkcal_core::study::SCENARIO_NAMES;
use pkcal_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainConfig {
    pub bounds: Vec<(f64, f64)>,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            bounds: vec![(0.0, 1.0)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct QuadratureConfig {
    /// Defaults by dimension when absent: tensor-gauss up to d = 3, sobol
    /// above.
    pub kind: Option<QuadratureKind>,
    pub level: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub lengthscales: Vec<f64>,
    pub variance: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            family: KernelFamily::Matern52,
            lengthscales: vec![0.25],
            variance: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// "builtin" or "external".
    pub kind: String,
    pub name: String,
    pub degree: u32,
    pub theta_bounds: Option<Vec<(f64, f64)>>,
    /// External-model fields.
    pub command: Option<String>,
    pub timeout_ms: u64,
    pub protocol_version: u32,
    /// Parameter dimension for external models.
    pub q: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: "builtin".into(),
            name: "linear-features".into(),
            degree: 1,
            theta_bounds: None,
            command: None,
            timeout_ms: 10_000,
            protocol_version: 1,
            q: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LambdaConfig {
    /// "gcv" or "fixed".
    pub policy: String,
    pub value: f64,
    /// Empty means the built-in default grid.
    pub grid: Vec<f64>,
    /// Fixed smoothing parameter for KO-mode fits and sweeps.
    pub ko_lambda: f64,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        LambdaConfig {
            policy: "gcv".into(),
            value: 1e-2,
            grid: Vec::new(),
            ko_lambda: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub starts: usize,
    pub max_iters: usize,
    pub x_tol: f64,
    pub f_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let s = OptimizerSettings::default();
        OptimizerConfig {
            starts: s.starts,
            max_iters: s.max_iters,
            x_tol: s.x_tol,
            f_tol: s.f_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub chains: usize,
    pub burn_in: usize,
    pub samples: usize,
    pub target_accept: f64,
    pub adapt_window: usize,
    pub ogp_literal: bool,
    pub credible_level: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            chains: 4,
            burn_in: 1000,
            samples: 2000,
            target_accept: 0.3,
            adapt_window: 50,
            ogp_literal: false,
            credible_level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub scenario: String,
    pub n: Option<usize>,
    pub replications: Option<usize>,
    pub sigma: Option<f64>,
    pub methods: Vec<String>,
    pub ko_sweep: Vec<f64>,
    pub n_grid: Vec<usize>,
    pub rate_replications: usize,
    /// "gcv" or "schedule".
    pub rate_lambda: String,
    pub rate_schedule_c: f64,
    pub rate_schedule_m: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            scenario: "s2".into(),
            n: None,
            replications: None,
            sigma: None,
            methods: vec!["pk".into(), "l2".into(), "ko-mode".into()],
            ko_sweep: vec![1e-4, 1e-2, 1.0],
            n_grid: vec![50, 100, 200, 400],
            rate_replications: 50,
            rate_lambda: "gcv".into(),
            rate_schedule_c: 1.0,
            rate_schedule_m: 2.5,
        }
    }
}

/// The full run configuration; every field has a documented default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub jitter_rel: Option<f64>,
    /// Default method for `fit` when the flag is absent: pk | l2 | ko.
    pub method: Option<String>,
    pub domain: DomainConfig,
    pub quadrature: QuadratureConfig,
    pub kernel: KernelConfig,
    pub model: ModelConfig,
    pub lambda: LambdaConfig,
    pub optimizer: OptimizerConfig,
    pub mcmc: McmcConfig,
    pub study: StudyConfig,
}

/// Allowed keys per table, for unknown-field detection with suggestions.
const SCHEMA: &[(&str, &[&str])] = &[
    (
        "",
        &[
            "seed",
            "jitter_rel",
            "method",
            "domain",
            "quadrature",
            "kernel",
            "model",
            "lambda",
            "optimizer",
            "mcmc",
            "study",
        ],
    ),
    ("domain", &["bounds"]),
    ("quadrature", &["kind", "level"]),
    ("kernel", &["family", "lengthscales", "variance"]),
    (
        "model",
        &[
            "kind",
            "name",
            "degree",
            "theta_bounds",
            "command",
            "timeout_ms",
            "protocol_version",
            "q",
        ],
    ),
    ("lambda", &["policy", "value", "grid", "ko_lambda"]),
    ("optimizer", &["starts", "max_iters", "x_tol", "f_tol"]),
    (
        "mcmc",
        &[
            "chains",
            "burn_in",
            "samples",
            "target_accept",
            "adapt_window",
            "ogp_literal",
            "credible_level",
        ],
    ),
    (
        "study",
        &[
            "scenario",
            "n",
            "replications",
            "sigma",
            "methods",
            "ko_sweep",
            "n_grid",
            "rate_replications",
            "rate_lambda",
            "rate_schedule_c",
            "rate_schedule_m",
        ],
    ),
];

fn check_unknown_keys(table: &toml::Table) -> Result<()> {
    let mut errors = Vec::new();
    for (section, allowed) in SCHEMA {
        let entries: Vec<(&String, &toml::Value)> = if section.is_empty() {
            table.iter().collect()
        } else {
            match table.get(*section).and_then(|v| v.as_table()) {
                Some(t) => t.iter().collect(),
                None => continue,
            }
        };
        for (key, _) in entries {
            if !allowed.contains(&key.as_str()) {
                let best = allowed
                    .iter()
                    .max_by(|a, b| {
                        strsim::jaro_winkler(key, a)
                            .total_cmp(&strsim::jaro_winkler(key, b))
                    })
                    .unwrap();
                let loc = if section.is_empty() {
                    key.to_string()
                } else {
                    format!("{section}.{key}")
                };
                errors.push(format!("unknown field '{loc}'; did you mean '{best}'?"));
            }
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(errors.join("\n  - ")))
    }
}

/// Loads and fully validates a configuration file. Validation failures are
/// collected and reported together.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Validation(format!("cannot read config '{}': {e}", path.display()))
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    // toml reports line/column positions for syntax errors.
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::Validation(format!("config parse error: {e}")))?;
    check_unknown_keys(&table)?;
    let config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Validation(format!("config type error: {e}")))?;
    let failures = validate(&config);
    if failures.is_empty() {
        Ok(config)
    } else {
        Err(Error::Validation(format!(
            "invalid configuration:\n  - {}",
            failures.join("\n  - ")
        )))
    }
}

/// Every validation failure, not just the first.
fn validate(c: &RunConfig) -> Vec<String> {
    let mut out = Vec::new();
    if c.domain.bounds.is_empty() {
        out.push("domain.bounds must contain at least one interval".into());
    }
    for (j, &(a, b)) in c.domain.bounds.iter().enumerate() {
        if !(a.is_finite() && b.is_finite() && a < b) {
            out.push(format!("domain.bounds[{j}] must satisfy a < b, got [{a}, {b}]"));
        }
    }
    let d = c.domain.bounds.len();
    if let Some(level) = c.quadrature.level {
        if level < 1 {
            out.push("quadrature.level must be >= 1".into());
        }
    }
    if c.kernel.lengthscales.len() != d {
        out.push(format!(
            "kernel.lengthscales has length {}, domain dimension is {d}",
            c.kernel.lengthscales.len()
        ));
    }
    if c.kernel.lengthscales.iter().any(|&l| !(l > 0.0)) {
        out.push("kernel.lengthscales must be positive".into());
    }
    if !(c.kernel.variance > 0.0) {
        out.push(format!(
            "kernel.variance must be positive, got {}",
            c.kernel.variance
        ));
    }
    match c.model.kind.as_str() {
        "builtin" => {
            if !BUILTIN_NAMES.contains(&c.model.name.as_str()) {
                out.push(format!(
                    "model.name '{}' is not a built-in; registry: {BUILTIN_NAMES:?}",
                    c.model.name
                ));
            }
        }
        "external" => {
            if c.model.command.as_deref().unwrap_or("").is_empty() {
                out.push("model.command is required for external models".into());
            }
            if c.model.q.is_none() {
                out.push("model.q is required for external models".into());
            }
            if c.model.theta_bounds.is_none() {
                out.push("model.theta_bounds is required for external models".into());
            }
            if c.model.timeout_ms == 0 {
                out.push("model.timeout_ms must be positive".into());
            }
        }
        other => out.push(format!("model.kind must be 'builtin' or 'external', got '{other}'")),
    }
    if let Some(bounds) = &c.model.theta_bounds {
        for (j, &(a, b)) in bounds.iter().enumerate() {
            if !(a.is_finite() && b.is_finite() && a < b) {
                out.push(format!(
                    "model.theta_bounds[{j}] must satisfy a < b, got [{a}, {b}]"
                ));
            }
        }
    }
    match c.lambda.policy.as_str() {
        "fixed" => {
            if !(c.lambda.value > 0.0) {
                out.push(format!(
                    "lambda.value must be positive when policy is fixed, got {}",
                    c.lambda.value
                ));
            }
        }
        "gcv" => {
            if c.lambda.grid.iter().any(|&l| !(l > 0.0)) {
                out.push("lambda.grid entries must be positive".into());
            }
        }
        other => out.push(format!("lambda.policy must be 'gcv' or 'fixed', got '{other}'")),
    }
    if !(c.lambda.ko_lambda > 0.0) {
        out.push(format!(
            "lambda.ko_lambda must be positive, got {}",
            c.lambda.ko_lambda
        ));
    }
    if let Some(j) = c.jitter_rel {
        if !(j >= 0.0) {
            out.push(format!("jitter_rel must be nonnegative, got {j}"));
        }
    }
    if let Some(m) = &c.method {
        if !["pk", "l2", "ko"].contains(&m.as_str()) {
            out.push(format!("method must be pk, l2, or ko, got '{m}'"));
        }
    }
    if c.optimizer.max_iters == 0 {
        out.push("optimizer.max_iters must be >= 1".into());
    }
    if !(c.optimizer.x_tol > 0.0) || !(c.optimizer.f_tol > 0.0) {
        out.push("optimizer tolerances must be positive".into());
    }
    if c.mcmc.chains == 0 || c.mcmc.samples == 0 {
        out.push("mcmc.chains and mcmc.samples must be >= 1".into());
    }
    if !(c.mcmc.target_accept > 0.0 && c.mcmc.target_accept < 1.0) {
        out.push(format!(
            "mcmc.target_accept must lie in (0,1), got {}",
            c.mcmc.target_accept
        ));
    }
    if c.mcmc.adapt_window == 0 {
        out.push("mcmc.adapt_window must be >= 1".into());
    }
    if !(c.mcmc.credible_level > 0.0 && c.mcmc.credible_level < 1.0) {
        out.push(format!(
            "mcmc.credible_level must lie in (0,1), got {}",
            c.mcmc.credible_level
        ));
    }
    if !SCENARIO_NAMES.contains(&c.study.scenario.as_str()) {
        out.push(format!(
            "study.scenario '{}' unknown; shipped: {SCENARIO_NAMES:?}",
            c.study.scenario
        ));
    }
    for m in &c.study.methods {
        if !["pk", "l2", "ko-mode", "pk-bayes", "ogp-bayes"].contains(&m.as_str()) {
            out.push(format!("study.methods entry '{m}' unknown"));
        }
    }
    if c.study.ko_sweep.iter().any(|&l| !(l > 0.0)) {
        out.push("study.ko_sweep entries must be positive".into());
    }
    if c.study.n_grid.len() >= 2 && c.study.n_grid.windows(2).any(|w| w[0] >= w[1]) {
        out.push("study.n_grid must be strictly increasing".into());
    }
    if !["gcv", "schedule"].contains(&c.study.rate_lambda.as_str()) {
        out.push(format!(
            "study.rate_lambda must be 'gcv' or 'schedule', got '{}'",
            c.study.rate_lambda
        ));
    }
    if let Some(sigma) = c.study.sigma {
        if !(sigma >= 0.0) {
            out.push(format!("study.sigma must be nonnegative, got {sigma}"));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Assembly into core types.

impl RunConfig {
    pub fn domain_spec(&self) -> Result<DomainSpec> {
        DomainSpec::new(self.domain.bounds.clone())
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        KernelSpec::new(
            self.kernel.family,
            self.kernel.lengthscales.clone(),
            self.kernel.variance,
        )
    }

    pub fn quadrature_kind(&self) -> QuadratureKind {
        self.quadrature
            .kind
            .unwrap_or_else(|| QuadratureKind::default_for_dim(self.domain.bounds.len()))
    }

    pub fn quadrature_level(&self) -> usize {
        self.quadrature.level.unwrap_or_else(|| {
            match self.quadrature_kind() {
                QuadratureKind::TensorGauss => match self.domain.bounds.len() {
                    1 => 32,
                    2 => 16,
                    _ => 10,
                },
                QuadratureKind::SobolQmc => 10,
            }
        })
    }

    pub fn lambda_policy(&self) -> LambdaPolicy {
        match self.lambda.policy.as_str() {
            "fixed" => LambdaPolicy::Fixed {
                value: self.lambda.value,
            },
            _ => LambdaPolicy::Gcv {
                grid: if self.lambda.grid.is_empty() {
                    LambdaPolicy::default_grid()
                } else {
                    self.lambda.grid.clone()
                },
            },
        }
    }

    pub fn optimizer_settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            starts: self.optimizer.starts,
            max_iters: self.optimizer.max_iters,
            x_tol: self.optimizer.x_tol,
            f_tol: self.optimizer.f_tol,
        }
    }

    pub fn mcmc_settings(&self) -> pkcal_core::bayes::McmcSettings {
        pkcal_core::bayes::McmcSettings {
            chains: self.mcmc.chains,
            burn_in: self.mcmc.burn_in,
            samples: self.mcmc.samples,
            target_accept: self.mcmc.target_accept,
            adapt_window: self.mcmc.adapt_window,
        }
    }

    pub fn build_model(&self) -> Result<std::sync::Arc<dyn pkcal_core::model::ComputerModel>> {
        match self.model.kind.as_str() {
            "builtin" => pkcal_core::model::builtin(
                &self.model.name,
                &BuiltinConfig {
                    dim: self.domain.bounds.len(),
                    degree: self.model.degree,
                    theta_bounds: self.model.theta_bounds.clone(),
                },
            ),
            "external" => {
                let spec = ExternalModelSpec {
                    command: self.model.command.clone().unwrap_or_default(),
                    timeout: Duration::from_millis(self.model.timeout_ms),
                    protocol_version: self.model.protocol_version,
                };
                pkcal_core::model::external_model(
                    &spec,
                    self.model.q.unwrap_or(0),
                    self.model.theta_bounds.clone().unwrap_or_default(),
                )
            }
            other => Err(Error::Validation(format!("unknown model kind '{other}'"))),
        }
    }
}
