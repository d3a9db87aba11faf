//! Service configuration: a JSON file naming the vocabulary, model,
//! keysets, noise policy, and rate limits. The config path comes from the
//! `WMLAB_SERVICE_CONFIG` environment variable when set, else the first
//! command-line argument, else `service.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wmlab::error::{Error, Result};

pub const CONFIG_ENV_VAR: &str = "WMLAB_SERVICE_CONFIG";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub vocab_path: PathBuf,
    pub model: ModelConfig,
    /// Keyset files by scheme name: "kgw", "unigram", or "exp".
    pub keysets: BTreeMap<String, PathBuf>,
    /// Which hosted scheme serves /v1/generate.
    pub generation_scheme: String,
    #[serde(default)]
    pub dp: DpConfig,
    #[serde(default)]
    pub rate_limit: RateLimitConfig,
    #[serde(default = "default_max_text_tokens")]
    pub max_text_tokens: usize,
    #[serde(default = "default_max_generate_tokens")]
    pub max_generate_tokens: usize,
    /// Hardened mode: detection responses carry the verdict only, no raw
    /// score.
    #[serde(default)]
    pub binary_verdict_only: bool,
    /// Append-only request log (endpoint, client, status per line).
    #[serde(default)]
    pub audit_path: Option<PathBuf>,
    /// 32-byte hex seed for generation randomness. The fixed default keeps
    /// desk experiments reproducible; production deployments should set it.
    #[serde(default)]
    pub generation_seed_hex: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub path: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Markov,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpPolicy {
    /// Raw scores always.
    Off,
    /// Every detection is noised; the request flag is ignored.
    On,
    /// The request's `dp` flag decides (experiments only).
    ClientChoice,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    #[serde(default = "default_policy")]
    pub policy: DpPolicy,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Detection-service secret, independent of watermark keys. Required
    /// unless the policy is "off".
    #[serde(default)]
    pub noise_key_hex: Option<String>,
    /// Calibrated single-edit |Δ ln p| bound; required when a p-value
    /// keyset is hosted and the policy is not "off".
    #[serde(default)]
    pub log_p_sensitivity: Option<f64>,
    /// Multi-edit sensitivity multiplier (≥ 1).
    #[serde(default = "default_multiplier")]
    pub sensitivity_multiplier: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            policy: DpPolicy::Off,
            sigma: default_sigma(),
            noise_key_hex: None,
            log_p_sensitivity: None,
            sensitivity_multiplier: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateLimitConfig {
    #[serde(default = "default_capacity")]
    pub capacity: u32,
    #[serde(default = "default_refill")]
    pub refill_per_second: f64,
}

impl Default for RateLimitConfig {
    fn default() -> Self {
        Self { capacity: default_capacity(), refill_per_second: default_refill() }
    }
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}
fn default_max_text_tokens() -> usize {
    4096
}
fn default_max_generate_tokens() -> usize {
    512
}
fn default_policy() -> DpPolicy {
    DpPolicy::Off
}
fn default_sigma() -> f64 {
    4.0
}
fn default_multiplier() -> f64 {
    1.0
}
fn default_capacity() -> u32 {
    10
}
fn default_refill() -> f64 {
    2.0
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidParameter(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: ServiceConfig = serde_json::from_str(&raw)
            .map_err(|e| Error::InvalidParameter(format!("malformed config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.keysets.is_empty() {
            return Err(Error::InvalidParameter("at least one keyset is required".into()));
        }
        for name in self.keysets.keys() {
            parse_scheme_name(name).ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "unknown scheme {name:?} in keysets (expected kgw, unigram, or exp)"
                ))
            })?;
        }
        if !self.keysets.contains_key(&self.generation_scheme) {
            return Err(Error::InvalidParameter(format!(
                "generation scheme {:?} has no configured keyset",
                self.generation_scheme
            )));
        }
        if !(self.dp.sigma >= 0.0 && self.dp.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise multiplier must be finite and ≥ 0, got {}",
                self.dp.sigma
            )));
        }
        if !(self.dp.sensitivity_multiplier >= 1.0 && self.dp.sensitivity_multiplier.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sensitivity multiplier must be finite and ≥ 1, got {}",
                self.dp.sensitivity_multiplier
            )));
        }
        if self.dp.policy != DpPolicy::Off {
            if self.dp.noise_key_hex.is_none() {
                return Err(Error::InvalidParameter(
                    "noise_key_hex is required when the noise policy is not off".into(),
                ));
            }
            if self.keysets.contains_key("exp") {
                match self.dp.log_p_sensitivity {
                    Some(s) if s > 0.0 && s.is_finite() => {}
                    _ => {
                        return Err(Error::InvalidParameter(
                            "log_p_sensitivity (positive, finite) is required to noise a \
                             p-value keyset"
                                .into(),
                        ))
                    }
                }
            }
        }
        if self.max_text_tokens < 1 || self.max_generate_tokens < 1 {
            return Err(Error::InvalidParameter("token limits must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn parse_scheme_name(name: &str) -> Option<wmlab::keyring::SchemeKind> {
    use wmlab::keyring::SchemeKind;
    match name {
        "kgw" => Some(SchemeKind::Kgw),
        "unigram" => Some(SchemeKind::Unigram),
        "exp" => Some(SchemeKind::Exp),
        _ => None,
    }
}

/// Env var beats the command-line argument, which beats the default.
pub fn resolve_config_path(arg: Option<String>) -> PathBuf {
    if let Ok(p) = std::env::var(CONFIG_ENV_VAR) {
        return PathBuf::from(p);
    }
    arg.map(PathBuf::from).unwrap_or_else(|| PathBuf::from("service.json"))
}
