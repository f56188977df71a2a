//! Run configuration, read from TOML and overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adjoint::AdjointMethod;
use crate::conditions::ConditionId;
use crate::error::{Error, Result};
use crate::problem::{CandidateControl, ControlLaw};
use crate::sde;
use crate::variational::VariationDirection;

pub const SCHEMA_VERSION: u32 = 1;

/// A constant vector, or a piecewise-constant law `{ breaks, values }`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LawSpec {
    Constant(Vec<f64>),
    Step { breaks: Vec<f64>, values: Vec<Vec<f64>> },
}

impl LawSpec {
    pub fn to_law(&self, dim: usize, what: &str) -> Result<ControlLaw> {
        let check = |v: &[f64]| -> Result<()> {
            if v.len() != dim {
                return Err(Error::Config(format!("{what}: expected {dim} components, got {}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("{what}: non-finite value")));
            }
            Ok(())
        };
        match self {
            LawSpec::Constant(v) => {
                check(v)?;
                Ok(ControlLaw::Constant(v.clone()))
            }
            LawSpec::Step { breaks, values } => {
                if values.len() != breaks.len() + 1 {
                    return Err(Error::Config(format!("{what}: a step law needs one more value than breaks")));
                }
                if breaks.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::Config(format!("{what}: breaks must increase strictly")));
                }
                for v in values {
                    check(v)?;
                }
                Ok(ControlLaw::Step {
                    breaks: breaks.clone(),
                    values: values.clone(),
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    pub name: String,
    pub law: LawSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionSpec {
    #[serde(default)]
    pub label: Option<String>,
    pub v: LawSpec,
    #[serde(default)]
    pub h: Option<LawSpec>,
    #[serde(default)]
    pub nu0: Option<Vec<f64>>,
    #[serde(default)]
    pub varpi0: Option<Vec<f64>>,
}

impl DirectionSpec {
    pub fn to_direction(&self, n: usize, m: usize) -> Result<VariationDirection> {
        let mut d = VariationDirection::new(self.v.to_law(m, "direction v")?, n);
        if let Some(h) = &self.h {
            d = d.with_h_law(h.to_law(m, "direction h")?);
        }
        for (name, val) in [("nu0", &self.nu0), ("varpi0", &self.varpi0)] {
            if let Some(x) = val {
                if x.len() != n {
                    return Err(Error::Config(format!("{name}: expected {n} components")));
                }
            }
        }
        if let Some(x) = &self.nu0 {
            d = d.with_nu0(x);
        }
        if let Some(x) = &self.varpi0 {
            d = d.with_varpi0(x);
        }
        let label = match &self.label {
            Some(l) => l.clone(),
            None => default_label(&self.v, self.h.as_ref()),
        };
        Ok(d.with_label(&label))
    }

    /// Rebuilds a spec from a report's `direction` entry (`VariationDirection::describe`).
    pub fn from_report(value: &serde_json::Value) -> Result<Self> {
        let bad = || Error::Config("direction entry is not a constant or step law".into());
        let law = |v: &serde_json::Value| -> Result<LawSpec> {
            if let Some(c) = v.get("constant") {
                return Ok(LawSpec::Constant(serde_json::from_value(c.clone())?));
            }
            if let Some(s) = v.get("step") {
                return Ok(LawSpec::Step {
                    breaks: serde_json::from_value(s["breaks"].clone())?,
                    values: serde_json::from_value(s["values"].clone())?,
                });
            }
            Err(bad())
        };
        let opt_vec = |k: &str| -> Result<Option<Vec<f64>>> {
            match value.get(k) {
                None | Some(serde_json::Value::Null) => Ok(None),
                Some(v) => Ok(Some(serde_json::from_value(v.clone())?)),
            }
        };
        Ok(DirectionSpec {
            label: value.get("label").and_then(|l| l.as_str()).map(String::from),
            v: law(value.get("v").ok_or_else(bad)?)?,
            h: match value.get("h") {
                None | Some(serde_json::Value::Null) => None,
                Some(h) => Some(law(h)?),
            },
            nu0: opt_vec("nu0")?,
            varpi0: opt_vec("varpi0")?,
        })
    }
}

fn default_label(v: &LawSpec, h: Option<&LawSpec>) -> String {
    let one = |l: &LawSpec| match l {
        LawSpec::Constant(c) => crate::conditions::fmt_vec(c),
        LawSpec::Step { .. } => "step".into(),
    };
    match h {
        Some(h) => format!("v={} h={}", one(v), one(h)),
        None => format!("v={}", one(v)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceConfig {
    pub sigma_multiplier: f64,
    pub allowance_factor: f64,
    pub absolute: f64,
    pub node_fraction: f64,
    /// Estimate the discretization allowance from a run on the refined grid.
    pub refine: bool,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        ToleranceConfig {
            sigma_multiplier: 3.0,
            allowance_factor: 4.0,
            absolute: 1e-10,
            node_fraction: 0.01,
            refine: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    /// Builtin problem name.
    pub example: String,
    /// Candidate of the example; the first one when absent.
    #[serde(default)]
    pub candidate: Option<String>,
    /// Custom candidate law, replacing the named one.
    #[serde(default)]
    pub control: Option<ControlSpec>,
    #[serde(default = "default_order")]
    pub order: u8,
    /// Checks to run; all applicable checks of the order when absent.
    #[serde(default)]
    pub checks: Option<Vec<ConditionId>>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub method: AdjointMethod,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
    /// User directions; the automatic battery when empty.
    #[serde(default)]
    pub directions: Vec<DirectionSpec>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "yes")]
    pub plot_data: bool,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}
fn default_order() -> u8 {
    2
}
fn default_steps() -> usize {
    sde::DEFAULT_STEPS
}
fn default_paths() -> usize {
    sde::DEFAULT_PATHS
}
fn default_seed() -> u64 {
    sde::DEFAULT_SEED
}
fn yes() -> bool {
    true
}

impl RunConfig {
    pub fn for_example(example: &str) -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            example: example.to_string(),
            candidate: None,
            control: None,
            order: default_order(),
            checks: None,
            steps: default_steps(),
            paths: default_paths(),
            seed: default_seed(),
            method: AdjointMethod::Auto,
            tolerances: ToleranceConfig::default(),
            directions: Vec::new(),
            out: None,
            plot_data: true,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !matches!(self.order, 1 | 2) {
            return fail("order must be 1 or 2");
        }
        if self.steps < 2 {
            return fail("steps must be at least 2");
        }
        if self.paths == 0 {
            return fail("paths must be positive");
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("sigma_multiplier", t.sigma_multiplier),
            ("allowance_factor", t.allowance_factor),
            ("absolute", t.absolute),
            ("node_fraction", t.node_fraction),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("tolerances.{name} must be positive")));
            }
        }
        if t.node_fraction >= 1.0 {
            return fail("tolerances.node_fraction must be below 1");
        }
        Ok(())
    }

    /// The candidate this configuration selects from the example's list.
    pub fn resolve_candidate(&self, candidates: &[CandidateControl], m: usize) -> Result<CandidateControl> {
        if let Some(c) = &self.control {
            return Ok(CandidateControl {
                name: c.name.clone(),
                law: c.law.to_law(m, "control")?,
            });
        }
        match &self.candidate {
            Some(name) => candidates
                .iter()
                .find(|c| &c.name == name)
                .cloned()
                .ok_or_else(|| {
                    let known: Vec<&str> = candidates.iter().map(|c| c.name.as_str()).collect();
                    Error::Config(format!("unknown candidate `{name}` (known: {})", known.join(", ")))
                }),
            None => candidates
                .first()
                .cloned()
                .ok_or_else(|| Error::Config("the example has no candidates".into())),
        }
    }
}
