//! Run configuration: a strict TOML document with `model`, `domain`,
//! `solver`, `simulate`, `verify`, `sweep` and `outputs` tables.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use mfgc::domain::{Delta, GridDomain, Stretching};
use mfgc::mfgc::{EquilibriumOptions, FRule};
use mfgc::model::{Family, HamiltonianModel, PhiRule, PsiRule};
use mfgc::sde::SimulationConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid model: {0}")]
    Model(#[from] mfgc::model::ModelError),
    #[error("invalid domain: {0}")]
    Domain(#[from] mfgc::domain::DomainError),
    #[error("invalid simulation settings: {0}")]
    Simulate(#[from] mfgc::sde::SdeError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Shifted,
    Scaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub family: FamilyKind,
    pub q: f64,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default)]
    pub v: f64,
    /// Shift rule for the `shifted` family; zero coupling when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<PhiRule>,
    /// Scale rule for the `scaled` family; unit scale when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<PsiRule>,
    /// Structural constant; sampled when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<f64>,
    #[serde(default)]
    pub source: FRule,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

/// Truncation margin: `"auto"` or an absolute value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeltaSpec {
    Auto(AutoTag),
    Value(f64),
}

impl Default for DeltaSpec {
    fn default() -> Self {
        Self::Auto(AutoTag::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBlock {
    #[serde(default)]
    pub a: f64,
    #[serde(default = "one")]
    pub b: f64,
    pub n_nodes: usize,
    #[serde(default)]
    pub delta: DeltaSpec,
    #[serde(default = "clustered")]
    pub stretching: Stretching,
}

fn clustered() -> Stretching {
    Stretching::BoundaryClustered
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Svg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsBlock {
    #[serde(default = "default_dir")]
    pub directory: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("mfgc-out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Svg]
}

impl Default for OutputsBlock {
    fn default() -> Self {
        Self { directory: default_dir(), formats: default_formats() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyBlock {
    /// Coarsening factors of the refinement sequence used for the gradient-bound check.
    pub coarsening: Vec<usize>,
    /// Re-solve the HJB without singular subtraction for the rate fits.
    pub plain_hjb: bool,
    /// Distance below which the weak-form residual ignores nodes.
    pub weak_exclude_below: f64,
    pub weak_tolerance: f64,
}

impl Default for VerifyBlock {
    fn default() -> Self {
        Self { coarsening: vec![4, 2], plain_hjb: true, weak_exclude_below: 0.0, weak_tolerance: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Q,
    NNodes,
    Coupling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelBlock,
    pub domain: DomainBlock,
    #[serde(default)]
    pub solver: EquilibriumOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulationConfig>,
    #[serde(default)]
    pub verify: VerifyBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepBlock>,
    #[serde(default)]
    pub outputs: OutputsBlock,
    /// Written into manifests; ignored when a manifest is read back as a config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results: Option<toml::Table>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let cfg: Self = toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        cfg.model()?;
        cfg.grid()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn model(&self) -> Result<HamiltonianModel, ConfigError> {
        let m = &self.model;
        if !(m.q > 1.0 && m.q <= 2.0) {
            return Err(ConfigError::Invalid(format!("model.q = {} must satisfy q in (1, 2]", m.q)));
        }
        let family = match m.family {
            FamilyKind::Shifted => {
                if m.psi.is_some() {
                    return Err(ConfigError::Invalid("model.psi applies only to the scaled family".into()));
                }
                Family::Shifted(m.phi.clone().unwrap_or(PhiRule::Linear { coeff: 0.0 }))
            }
            FamilyKind::Scaled => {
                if m.phi.is_some() {
                    return Err(ConfigError::Invalid("model.phi applies only to the shifted family".into()));
                }
                Family::Scaled(m.psi.clone().unwrap_or(PsiRule::Constant { value: 1.0 }))
            }
        };
        let mut model = HamiltonianModel::new(family, m.q, m.sigma, m.v)?;
        if let Some(c0) = m.c0 {
            model = model.with_c0(c0)?;
        }
        Ok(model)
    }

    pub fn grid(&self) -> Result<Arc<GridDomain>, ConfigError> {
        let d = &self.domain;
        let delta = match d.delta {
            DeltaSpec::Auto(_) => Delta::Auto,
            DeltaSpec::Value(v) => Delta::Fixed(v),
        };
        Ok(Arc::new(GridDomain::new(d.a, d.b, d.n_nodes, delta, d.stretching)?))
    }

    pub fn simulation(&self) -> Result<SimulationConfig, ConfigError> {
        let cfg = self
            .simulate
            .clone()
            .ok_or_else(|| ConfigError::Invalid("the simulate command needs a [simulate] table".into()))?;
        if cfg.n_paths < 2 {
            return Err(ConfigError::Invalid(format!(
                "simulate.n_paths = {} is too small: a standard error needs at least 2 paths",
                cfg.n_paths
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sweep_block(&self) -> Result<&SweepBlock, ConfigError> {
        let s = self.sweep.as_ref().ok_or_else(|| ConfigError::Invalid("the sweep command needs a [sweep] table".into()))?;
        if s.values.is_empty() {
            return Err(ConfigError::Invalid("sweep.values is empty".into()));
        }
        if s.values.iter().any(|v| !v.is_finite()) {
            return Err(ConfigError::Invalid("sweep.values must be finite".into()));
        }
        Ok(s)
    }

    /// Configuration for one point of a sweep.
    pub fn at_sweep_point(&self, axis: SweepAxis, value: f64) -> Result<Self, ConfigError> {
        let mut cfg = self.clone();
        cfg.sweep = None;
        cfg.results = None;
        match axis {
            SweepAxis::Q => cfg.model.q = value,
            SweepAxis::NNodes => {
                if value.fract() != 0.0 || value < 16.0 {
                    return Err(ConfigError::Invalid(format!("sweep node count {value} is not an integer >= 16")));
                }
                cfg.domain.n_nodes = value as usize;
            }
            SweepAxis::Coupling => match cfg.model.family {
                FamilyKind::Shifted => cfg.model.phi = Some(PhiRule::Linear { coeff: value }),
                FamilyKind::Scaled => cfg.model.psi = Some(PsiRule::Constant { value }),
            },
        }
        cfg.model()?;
        cfg.grid()?;
        Ok(cfg)
    }
}
