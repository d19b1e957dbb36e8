//! Gateway configuration file (JSON). Unknown keys are rejected.
//!
//! Environment overrides applied after parsing:
//!
//! | variable | effect |
//! |---|---|
//! | `PROVGATE_HTTP_PORT` | HTTP listen port |
//! | `PROVGATE_COAP_PORT` | UDP port of the device endpoint |
//! | `PROVGATE_TOKEN_<ID>` | bearer token of principal `<ID>` (upper-cased, `-` as `_`) |

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use provgate_core::device::DeviceSpec;
use provgate_core::evaluator::{Catalog, CatalogError, SeedRuleConfig};
use provgate_core::ledger::DEFAULT_DIFFICULTY;
use provgate_core::pipeline::TemplateSpec;
use provgate_core::verifier::TrustedPrincipal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningMode {
    /// A background ticker mines and evaluates every queued transaction.
    #[default]
    Auto,
    /// Ticks run only on `POST /mine`.
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewayConfig {
    pub difficulty: u32,
    pub window: usize,
    pub group_size: usize,
    pub max_snapshot_age_ms: u64,
    pub max_physical_age_ms: u64,
    pub provenance_threshold: usize,
    /// `null` holds suspicious transactions until decided.
    pub pending_ttl_ms: Option<u64>,
    /// Rule/policy catalog file; the seed rules are used when absent.
    pub catalog_path: Option<PathBuf>,
    pub seed_rules: SeedRuleConfig,
    pub principals: Vec<TrustedPrincipal>,
    pub devices: Vec<DeviceSpec>,
    pub bootstrap: Vec<TemplateSpec>,
    pub miners: Vec<String>,
    pub http_host: String,
    pub http_port: u16,
    /// UDP port for the device endpoint; `null` keeps devices in-process.
    pub coap_port: Option<u16>,
    pub mining_mode: MiningMode,
    pub tick_interval_ms: u64,
    pub seed: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            difficulty: DEFAULT_DIFFICULTY,
            window: 100,
            group_size: 10,
            max_snapshot_age_ms: 10_000,
            max_physical_age_ms: 5_000,
            provenance_threshold: 1,
            pending_ttl_ms: None,
            catalog_path: None,
            seed_rules: SeedRuleConfig::default(),
            principals: Vec::new(),
            devices: vec![DeviceSpec::new("sensor-1")],
            bootstrap: Vec::new(),
            miners: vec!["miner-a".into(), "miner-b".into(), "miner-c".into()],
            http_host: "127.0.0.1".into(),
            http_port: 8080,
            coap_port: None,
            mining_mode: MiningMode::Auto,
            tick_interval_ms: 1_000,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("catalog {path}: {source}")]
    Catalog { path: PathBuf, source: CatalogError },
}

impl GatewayConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: GatewayConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    /// Applies overrides from `lookup` (normally the process environment).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let port = |name: &str| -> Result<Option<u16>, ConfigError> {
            lookup(name)
                .map(|v| v.parse().map_err(|_| ConfigError::Invalid(format!("{name}={v} is not a port"))))
                .transpose()
        };
        if let Some(p) = port("PROVGATE_HTTP_PORT")? {
            self.http_port = p;
        }
        if let Some(p) = port("PROVGATE_COAP_PORT")? {
            self.coap_port = Some(p);
        }
        for p in &mut self.principals {
            let var = format!("PROVGATE_TOKEN_{}", p.principal_id.to_ascii_uppercase().replace('-', "_"));
            if let Some(tok) = lookup(&var) {
                p.bearer_token = tok;
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.difficulty > 64 {
            return bad(format!("difficulty {} is out of range", self.difficulty));
        }
        if self.window == 0 || self.group_size == 0 {
            return bad("window and group_size must be positive".into());
        }
        if self.tick_interval_ms == 0 {
            return bad("tick_interval_ms must be positive".into());
        }
        if self.miners.is_empty() {
            return bad("at least one miner identity is required".into());
        }
        let mut ids = HashSet::new();
        let mut tokens = HashSet::new();
        for p in &self.principals {
            if p.bearer_token.is_empty() {
                return bad(format!("principal {} has an empty token", p.principal_id));
            }
            if !ids.insert(&p.principal_id) {
                return bad(format!("duplicate principal {}", p.principal_id));
            }
            if !tokens.insert(&p.bearer_token) {
                return bad("bearer tokens must be unique".into());
            }
        }
        let mut devices = HashSet::new();
        for d in &self.devices {
            if d.device_id.is_empty() || !devices.insert(&d.device_id) {
                return bad(format!("device id {:?} is empty or repeated", d.device_id));
            }
        }
        Ok(())
    }

    /// The active catalog: the file at `catalog_path`, or the seed rules
    /// with the configured fleet as the registered devices.
    pub fn catalog(&self) -> Result<Catalog, ConfigError> {
        if let Some(path) = &self.catalog_path {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.clone(),
                source,
            })?;
            return Catalog::from_json(&text).map_err(|source| ConfigError::Catalog {
                path: path.clone(),
                source,
            });
        }
        let mut seed = self.seed_rules.clone();
        if seed.registered_devices.is_empty() {
            seed.registered_devices = self.devices.iter().map(|d| d.device_id.clone()).collect();
        }
        Ok(Catalog::seeded(&seed))
    }
}
