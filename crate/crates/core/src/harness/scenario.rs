//! Scenario files: which system and functional to use and which checks to
//! run on them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::certify::{EnvelopeSpec, Form, SampleSpec};
use crate::converse::{ConverseConfig, FamilySpec, FitSpec, WeightMode};
use crate::error::{Error, Result};
use crate::functionals::{builtin_functional, Functional};
use crate::history::grid_multiple;
use crate::integrator::IntegratorConfig;
use crate::system::{builtin_system, RfdeSystem};

/// A built-in system or functional with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub name: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub system: Reference,
    #[serde(default)]
    pub functional: Option<Reference>,
    /// Replaces the seed of every check when set.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Replaces the grid step of every check when set.
    #[serde(default)]
    pub grid_step: Option<f64>,
    /// Number of sample trajectories written as CSV.
    #[serde(default)]
    pub trajectories: usize,
    #[serde(default = "default_trajectory_horizon")]
    pub trajectory_horizon: f64,
    #[serde(default)]
    pub checks: Vec<CheckSpec>,
}

fn default_trajectory_horizon() -> f64 {
    10.0
}

fn default_stride() -> usize {
    1
}

fn default_injected() -> f64 {
    0.1
}

fn default_gronwall_rel() -> f64 {
    1e-3
}

fn default_periodic_tol() -> f64 {
    1e-12
}

fn default_decay() -> f64 {
    1e-3
}

fn default_decrease_tol() -> f64 {
    1e-9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckSpec {
    /// Inequality suite of a theorem form.
    Conditions {
        form: Form,
        #[serde(default)]
        sample: SampleSpec,
    },
    /// Empirical decay envelope; every row must fall below `decay·s`.
    Envelope {
        #[serde(default)]
        spec: EnvelopeSpec,
        #[serde(default = "default_decay")]
        decay: f64,
    },
    /// `D⁺V <= -rate·V` along trajectories; `rate` defaults to `ρ(1)`.
    DplusDecay {
        #[serde(default)]
        sample: SampleSpec,
        trajectories: usize,
        horizon: f64,
        #[serde(default)]
        rate: Option<f64>,
        /// Offset from `t₀`; defaults to `r`.
        #[serde(default)]
        from: Option<f64>,
        #[serde(default = "default_stride")]
        stride: usize,
    },
    DiniLemma {
        #[serde(default)]
        sample: SampleSpec,
        samples: usize,
        horizon: f64,
    },
    DiniOracle {
        #[serde(default)]
        sample: SampleSpec,
        samples: usize,
    },
    /// Comparison with `ẇ = -rate·w`; `rate` defaults to `ρ(1)`.
    Comparison {
        #[serde(default)]
        sample: SampleSpec,
        trajectories: usize,
        horizon: f64,
        #[serde(default)]
        rate: Option<f64>,
        #[serde(default = "default_injected")]
        injected: f64,
    },
    Gronwall {
        #[serde(default)]
        sample: SampleSpec,
        pairs: usize,
        horizon: f64,
        #[serde(default = "default_gronwall_rel")]
        rel: f64,
    },
    Extinction {
        #[serde(default)]
        sample: SampleSpec,
        #[serde(default)]
        component: usize,
        after: f64,
        horizon: f64,
        tol: f64,
    },
    PeriodicReduction {
        #[serde(default)]
        sample: SampleSpec,
        ks: Vec<usize>,
        #[serde(default)]
        offset: f64,
        horizon: f64,
        #[serde(default = "default_periodic_tol")]
        tol: f64,
    },
    SampledMap {
        #[serde(default)]
        sample: SampleSpec,
        periods: usize,
        tol: f64,
    },
    Converse {
        #[serde(default)]
        sample: SampleSpec,
        states: usize,
        #[serde(default)]
        decay_oracle: bool,
        #[serde(default = "default_decrease_tol")]
        decrease_tol: f64,
        #[serde(default)]
        converse: ConverseSpec,
    },
}

impl CheckSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            CheckSpec::Conditions { .. } => "conditions",
            CheckSpec::Envelope { .. } => "envelope",
            CheckSpec::DplusDecay { .. } => "dplus_decay",
            CheckSpec::DiniLemma { .. } => "dini_lemma",
            CheckSpec::DiniOracle { .. } => "dini_oracle",
            CheckSpec::Comparison { .. } => "comparison",
            CheckSpec::Gronwall { .. } => "gronwall",
            CheckSpec::Extinction { .. } => "extinction",
            CheckSpec::PeriodicReduction { .. } => "periodic_reduction",
            CheckSpec::SampledMap { .. } => "sampled_map",
            CheckSpec::Converse { .. } => "converse",
        }
    }

    pub fn needs_functional(&self) -> bool {
        matches!(
            self,
            CheckSpec::Conditions { .. }
                | CheckSpec::DplusDecay { .. }
                | CheckSpec::DiniLemma { .. }
                | CheckSpec::DiniOracle { .. }
                | CheckSpec::Comparison { .. }
        )
    }

    fn sample_mut(&mut self) -> Option<&mut SampleSpec> {
        match self {
            CheckSpec::Envelope { .. } => None,
            CheckSpec::Conditions { sample, .. }
            | CheckSpec::DplusDecay { sample, .. }
            | CheckSpec::DiniLemma { sample, .. }
            | CheckSpec::DiniOracle { sample, .. }
            | CheckSpec::Comparison { sample, .. }
            | CheckSpec::Gronwall { sample, .. }
            | CheckSpec::Extinction { sample, .. }
            | CheckSpec::PeriodicReduction { sample, .. }
            | CheckSpec::SampledMap { sample, .. }
            | CheckSpec::Converse { sample, .. } => Some(sample),
        }
    }

    /// Applies seed and grid-step overrides.
    pub fn apply_overrides(&mut self, seed: Option<u64>, grid_step: Option<f64>) {
        if let Some(s) = self.sample_mut() {
            if let Some(seed) = seed {
                s.seed = seed;
            }
            if grid_step.is_some() {
                s.grid_step = grid_step;
            }
        }
        match self {
            CheckSpec::Envelope { spec, .. } => {
                if let Some(seed) = seed {
                    spec.seed = seed;
                }
                if grid_step.is_some() {
                    spec.grid_step = grid_step;
                }
            }
            CheckSpec::Converse { converse, .. } => {
                if grid_step.is_some() {
                    converse.grid_step = grid_step;
                }
            }
            _ => {}
        }
    }

    /// Grid steps this check will integrate with.
    fn grid_steps(&self) -> Vec<Option<f64>> {
        let mut out = Vec::new();
        match self {
            CheckSpec::Envelope { spec, .. } => out.push(spec.grid_step),
            CheckSpec::Converse {
                sample, converse, ..
            } => {
                out.push(sample.grid_step);
                out.push(converse.grid_step);
            }
            other => {
                let mut c = other.clone();
                if let Some(s) = c.sample_mut() {
                    out.push(s.grid_step);
                }
            }
        }
        out
    }
}

/// Serializable part of [`ConverseConfig`]; `ã₁` is the identity and `ã₂`,
/// `β` are fitted unless `a2_quadratic` gives `ã₂(s) = c₁s + c₂s²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConverseSpec {
    pub q_max: usize,
    pub family: FamilySpec,
    pub fit: FitSpec,
    pub weights: WeightMode,
    pub max_horizon: f64,
    pub grid_step: Option<f64>,
    pub a2_quadratic: Option<(f64, f64)>,
}

impl Default for ConverseSpec {
    fn default() -> Self {
        let c = ConverseConfig::default();
        Self {
            q_max: c.q_max,
            family: c.family,
            fit: c.fit,
            weights: c.weights,
            max_horizon: c.max_horizon,
            grid_step: None,
            a2_quadratic: None,
        }
    }
}

impl ConverseSpec {
    pub fn config(&self) -> ConverseConfig {
        let mut c = ConverseConfig {
            q_max: self.q_max,
            family: self.family.clone(),
            fit: self.fit.clone(),
            weights: self.weights.clone(),
            max_horizon: self.max_horizon,
            integrator: IntegratorConfig {
                grid_step: self.grid_step,
                ..IntegratorConfig::default()
            },
            ..ConverseConfig::default()
        };
        if let Some((c1, c2)) = self.a2_quadratic {
            c.a2 = Some(std::sync::Arc::new(move |s| c1 * s + c2 * s * s));
        }
        c
    }
}

/// Formats a JSON error as `source:line:column: message`.
pub(crate) fn parse_error(source: &str, e: &serde_json::Error) -> Error {
    let msg = e.to_string();
    let msg = msg.rfind(" at line ").map_or(msg.as_str(), |i| &msg[..i]);
    Error::Config(format!("{source}:{}:{}: {msg}", e.line(), e.column()))
}

pub fn parse_scenario(text: &str, source: &str) -> Result<Scenario> {
    serde_json::from_str(text).map_err(|e| parse_error(source, &e))
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_scenario(&text, &path.display().to_string())
}

/// A scenario resolved against the built-in registries.
#[derive(Clone)]
pub struct Resolved {
    pub scenario: Scenario,
    pub system: RfdeSystem,
    pub functional: Option<Functional>,
}

impl Scenario {
    /// Applies overrides (command line first, then the scenario's own).
    pub fn with_overrides(mut self, seed: Option<u64>, grid_step: Option<f64>) -> Self {
        let seed = seed.or(self.seed);
        let grid_step = grid_step.or(self.grid_step);
        self.seed = seed;
        self.grid_step = grid_step;
        for c in &mut self.checks {
            c.apply_overrides(seed, grid_step);
        }
        self
    }

    /// Builds the system and functional and validates grid alignment.
    pub fn resolve(&self) -> Result<Resolved> {
        let system = builtin_system(&self.system.name, &self.system.params)?;
        let functional = match &self.functional {
            Some(f) => Some(builtin_functional(&f.name, &f.params)?),
            None => None,
        };
        let r = system.delay_span();
        for (i, c) in self.checks.iter().enumerate() {
            if c.needs_functional() && functional.is_none() {
                return Err(Error::Config(format!(
                    "check {i} ({}) needs a functional",
                    c.kind()
                )));
            }
            for g in c.grid_steps().into_iter().chain([self.grid_step]).flatten() {
                if !(g > 0.0) || !g.is_finite() {
                    return Err(Error::Config(format!("check {i}: grid step {g} must be positive")));
                }
                if r > 0.0 && grid_multiple(r, g).is_none() {
                    return Err(Error::Config(format!(
                        "check {i}: grid step {g} does not divide the delay span {r}"
                    )));
                }
            }
        }
        Ok(Resolved {
            scenario: self.clone(),
            system,
            functional,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_minimal() {
        let s = parse_scenario(
            r#"{"name": "x", "system": {"name": "scalar_decay"}, "checks": [
                {"kind": "gronwall", "pairs": 3, "horizon": 1.0}
            ]}"#,
            "inline",
        )
        .unwrap();
        assert_eq!(s.checks.len(), 1);
        assert_eq!(s.checks[0].kind(), "gronwall");
    }

    #[test]
    fn unknown_field_reports_line() {
        let text = "{\n  \"name\": \"x\",\n  \"system\": {\"name\": \"scalar_decay\"},\n  \"bogus\": 1\n}";
        let e = parse_scenario(text, "s.json").unwrap_err();
        let Error::Config(msg) = e else { panic!() };
        assert!(msg.starts_with("s.json:4:"), "{msg}");
        let text = r#"{"name": "x", "system": {"name": "scalar_decay"}, "checks": [
            {"kind": "gronwall", "pairs": 3, "horizon": 1.0, "typo": 2}]}"#;
        assert!(parse_scenario(text, "s").is_err());
    }

    #[test]
    fn grid_must_divide_delay() {
        let s = parse_scenario(
            r#"{"name": "x", "system": {"name": "example212"}, "grid_step": 0.003,
                "checks": [{"kind": "gronwall", "pairs": 1, "horizon": 1.0}]}"#,
            "s",
        )
        .unwrap()
        .with_overrides(None, None);
        assert!(matches!(s.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn functional_required() {
        let s = parse_scenario(
            r#"{"name": "x", "system": {"name": "scalar_decay"},
                "checks": [{"kind": "dini_oracle", "samples": 1}]}"#,
            "s",
        )
        .unwrap();
        assert!(matches!(s.resolve(), Err(Error::Config(_))));
    }
}
