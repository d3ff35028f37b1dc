//! Single JSON config with one section per pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::controller::ControllerConfig;
use crate::dynamics::PlantParams;
use crate::funnel::{FunnelOptions, VerifyOptions};
use crate::harness::{standard_conditions, Condition, HarnessConfig};
use crate::trajopt::TrajOptSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}:{column}: {message}")]
    Syntax {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FunnelSection {
    pub synthesis: FunnelOptions,
    pub verify: VerifyOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessSection {
    pub sim: HarnessConfig,
    pub conditions: Vec<Condition>,
    /// Trial `k` of every condition uses `seeds[k]`.
    pub seeds: Vec<u64>,
}

impl Default for HarnessSection {
    fn default() -> Self {
        Self {
            sim: HarnessConfig::default(),
            conditions: standard_conditions(10),
            seeds: (0..10).collect(),
        }
    }
}

/// Artifact locations, relative to the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub trajectory: PathBuf,
    pub pwa: PathBuf,
    pub policy: PathBuf,
    pub traces: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            trajectory: "artifacts/trajectory.json".into(),
            pwa: "artifacts/pwa.json".into(),
            policy: "artifacts/policy.json".into(),
            traces: "artifacts/traces".into(),
            report: "artifacts/report.csv".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.trajectory,
            &mut self.pwa,
            &mut self.policy,
            &mut self.traces,
            &mut self.report,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolkitConfig {
    pub plant: PlantParams,
    pub trajopt: TrajOptSpec,
    pub funnel: FunnelSection,
    pub controller: ControllerConfig,
    pub harness: HarnessSection,
    pub paths: Paths,
}

impl ToolkitConfig {
    /// Parses `text`; `origin` names the source in error messages.
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Syntax {
            path: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, validates and resolves artifact paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_json(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.plant.validate() {
            return bad(format!("plant: {e}"));
        }
        if let Err(e) = self.trajopt.validate(&self.plant) {
            return bad(format!("trajopt: {e}"));
        }
        if self.trajopt.dt != self.plant.dt {
            return bad(format!(
                "trajopt.dt {} differs from plant.dt {}",
                self.trajopt.dt, self.plant.dt
            ));
        }
        if let Err(e) = self.funnel.synthesis.validate() {
            return bad(format!("funnel: {e}"));
        }
        let v = &self.funnel.verify;
        if v.samples == 0 || !(v.bisection_tol > 0.0) || !(v.a_floor > 0.0 && v.a_floor <= 1.0) {
            return bad(
                "funnel.verify: samples, bisection_tol and a_floor must be positive".into(),
            );
        }
        if let Err(e) = self.controller.validate() {
            return bad(format!("controller: {e}"));
        }
        if let Err(e) = self.harness.sim.validate() {
            return bad(format!("harness: {e}"));
        }
        self.validate_conditions(&self.harness.conditions)
    }

    /// Checks a condition list against the horizon and seed list.
    pub fn validate_conditions(&self, conditions: &[Condition]) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let mut seeds = self.harness.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.harness.seeds.len() {
            return bad("harness.seeds must be distinct".into());
        }
        for c in conditions {
            if c.trials == 0 {
                return bad(format!("condition {}: trials must be at least 1", c.name));
            }
            if c.trials > seeds.len() {
                return bad(format!(
                    "condition {}: {} trials but only {} seeds",
                    c.name,
                    c.trials,
                    seeds.len()
                ));
            }
            if let Some(d) = &c.disturbance {
                if let Err(e) = d.validate(self.trajopt.horizon) {
                    return bad(format!("condition {}: {e}", c.name));
                }
            }
        }
        Ok(())
    }

    /// Hash of everything that determines the trajectory and the PWA table:
    /// SHA-256 over the serialized plant and trajopt sections.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(&(&self.plant, &self.trajopt))
            .expect("config sections serialize");
        format!("{:x}", Sha256::digest(text.as_bytes()))
    }
}
