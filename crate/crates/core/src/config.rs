//! `key = value` configuration files. Blank lines and `#` comments are
//! ignored; later keys override earlier ones.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

use crate::control::{ControlConfig, LogitStats, Method};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("`{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        self.get(key)
            .map(|v| {
                v.parse().map_err(|_| ConfigError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                })
            })
            .transpose()
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(ConfigError::UnknownKey(k.to_string())),
            None => Ok(()),
        }
    }

    /// Control settings in the file, applied over `base`. Setting `method`
    /// or `total_steps` resets the other fields to that method's defaults
    /// first, so the order of keys in the file does not matter.
    pub fn control(&self, base: ControlConfig) -> Result<ControlConfig, ConfigError> {
        let method = self.parsed::<Method>("method")?.unwrap_or(base.method);
        let total = self
            .parsed::<u32>("total_steps")?
            .unwrap_or(base.total_steps);
        let mut cfg = if method != base.method || total != base.total_steps {
            ControlConfig::new(method, total)
        } else {
            base
        };
        let w_m = self.parsed("w_m")?.unwrap_or(cfg.w_m);
        let w_a = self.parsed("w_a")?.unwrap_or(cfg.w_a);
        if (w_m, w_a) != (cfg.w_m, cfg.w_a) {
            cfg = cfg.with_boost(w_m, w_a);
        }
        cfg.w_prime = self.parsed("w_prime")?.unwrap_or(cfg.w_prime);
        cfg.t_thr = self.parsed("t_thr")?.unwrap_or(cfg.t_thr);
        cfg.softness = self.parsed("softness")?.unwrap_or(cfg.softness);
        if let Some(v) = self.get("logit_stats") {
            cfg.logit_stats = match v {
                "unscaled" => LogitStats::Unscaled,
                "scaled" => LogitStats::Scaled,
                _ => {
                    return Err(ConfigError::Value {
                        key: "logit_stats".into(),
                        value: v.into(),
                    })
                }
            };
        }
        Ok(cfg)
    }
}

pub const CONTROL_KEYS: &[&str] = &[
    "method",
    "total_steps",
    "w_prime",
    "w_m",
    "w_a",
    "t_thr",
    "softness",
    "logit_stats",
];
