use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of one CLI command.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub config_digest: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<CheckResult>,
    /// Command-specific payload (trace, loss curve, table).
    pub data: serde_json::Value,
    pub wall_time_s: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl PartialEq for RunReport {
    /// Wall time is excluded so repeated runs compare equal.
    fn eq(&self, other: &Self) -> bool {
        self.command == other.command
            && self.config_digest == other.config_digest
            && self.metrics == other.metrics
            && self.checks == other.checks
            && self.data == other.data
    }
}

/// SHA-256 of the config's canonical JSON.
pub fn config_digest(cfg: &BackboneConfig) -> Result<String> {
    let text = serde_json::to_string(cfg)?;
    Ok(format!("{:x}", Sha256::digest(text.as_bytes())))
}

impl RunReport {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config_digest: None,
            metrics: BTreeMap::new(),
            checks: Vec::new(),
            data: serde_json::Value::Null,
            wall_time_s: 0.0,
            started: Some(Instant::now()),
        }
    }

    pub fn with_config(mut self, cfg: &BackboneConfig) -> Result<Self> {
        self.config_digest = Some(config_digest(cfg)?);
        Ok(self)
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    /// Records a check; each name may appear only once.
    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) -> Result<()> {
        if self.checks.iter().any(|c| c.name == name) {
            return Err(Error::param("check", format!("`{name}` recorded twice")));
        }
        self.checks.push(CheckResult {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        });
        Ok(())
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn finish(mut self) -> Self {
        if let Some(t) = self.started.take() {
            self.wall_time_s = t.elapsed().as_secs_f64();
        }
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Human-readable summary lines.
    pub fn summary(&self) -> String {
        let mut out = format!("command: {}\n", self.command);
        if let Some(d) = &self.config_digest {
            out.push_str(&format!("config digest: {d}\n"));
        }
        for (k, v) in &self.metrics {
            out.push_str(&format!("{k}: {v:.12}\n"));
        }
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("[{tag}] {}: {}\n", c.name, c.detail));
        }
        out.push_str(&format!("wall time: {:.3}s\n", self.wall_time_s));
        out
    }
}
