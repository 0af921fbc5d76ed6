//! Run configuration: defaults, config-file parsing, and precedence.
//!
//! Precedence is config file < command-line flags < environment, where the
//! environment covers only `UQ_API_BASE` / `UQ_API_KEY` (applied by the
//! HTTP backend itself).

use std::collections::BTreeMap;
use std::path::Path;

use crate::clustering::JudgeKind;
use crate::entropy::EstimatorKind;
use crate::error::{Result, UqError};
use crate::gateway::SamplingConfig;
use crate::report::ReliabilityThresholds;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: String,
    /// HTTP backend base URL; `None` means the mock fixture must be used.
    pub backend: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub m: u32,
    pub parallelism: usize,
    pub seed: u64,
    pub thresholds: ReliabilityThresholds,
    pub estimator: EstimatorKind,
    pub judge: JudgeKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sampling = SamplingConfig::default();
        RunConfig {
            model: "default".into(),
            backend: None,
            temperature: sampling.temperature,
            top_p: sampling.top_p,
            max_tokens: sampling.max_tokens,
            m: sampling.m,
            parallelism: 8,
            seed: 0,
            thresholds: ReliabilityThresholds::default(),
            estimator: EstimatorKind::Combined,
            judge: JudgeKind::BinaryRule,
        }
    }
}

impl RunConfig {
    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
            m: self.m,
        }
    }

    /// Apply one `key = value` setting.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_err = |what: &str| {
            UqError::InvalidConfig(format!("config key {key:?}: invalid {what}: {value:?}"))
        };
        match key {
            "model" => self.model = value.to_string(),
            "backend" => self.backend = Some(value.to_string()),
            "temperature" => {
                self.temperature = value.parse().map_err(|_| parse_err("number"))?
            }
            "top_p" => self.top_p = value.parse().map_err(|_| parse_err("number"))?,
            "max_tokens" => self.max_tokens = value.parse().map_err(|_| parse_err("integer"))?,
            "m" => self.m = value.parse().map_err(|_| parse_err("integer"))?,
            "parallelism" => {
                self.parallelism = value.parse().map_err(|_| parse_err("integer"))?
            }
            "seed" => self.seed = value.parse().map_err(|_| parse_err("integer"))?,
            "theta_high" => {
                self.thresholds.theta_high = value.parse().map_err(|_| parse_err("number"))?
            }
            "theta_low" => {
                self.thresholds.theta_low = value.parse().map_err(|_| parse_err("number"))?
            }
            "estimator" => self.estimator = EstimatorKind::parse(value)?,
            "judge" => self.judge = parse_judge(value)?,
            other => {
                return Err(UqError::InvalidConfig(format!(
                    "unknown config key {other:?}"
                )))
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        for (key, value) in parse_config_file(path)? {
            self.apply(&key, &value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.sampling().validate()?;
        self.thresholds.validate()?;
        if self.parallelism == 0 {
            return Err(UqError::InvalidConfig("parallelism must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn parse_judge(value: &str) -> Result<JudgeKind> {
    match value {
        "binary_rule" => Ok(JudgeKind::BinaryRule),
        "normalized_exact" => Ok(JudgeKind::NormalizedExact),
        "remote_nli" => Ok(JudgeKind::RemoteNli),
        other => Err(UqError::InvalidConfig(format!(
            "unknown judge {other:?} (expected binary_rule|normalized_exact|remote_nli)"
        ))),
    }
}

/// `key = value` lines; `#` starts a comment; blank lines ignored.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let data = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, raw) in data.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(UqError::InvalidConfig(format!(
                "config line {}: expected key = value, got {raw:?}",
                i + 1
            )));
        };
        out.insert(
            key.trim().to_string(),
            value.trim().trim_matches('"').to_string(),
        );
    }
    Ok(out)
}
