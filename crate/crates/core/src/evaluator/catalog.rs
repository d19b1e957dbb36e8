//! Rule and policy catalog: JSON schema, the built-in seed rules, and the
//! hot-swappable handle evaluators read from.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::condition::{Condition, Scalar};
use crate::ledger::TxKind;

pub const RULE_UNKNOWN_PROTOCOL: &str = "unknown-protocol";
pub const RULE_DELAYED_STREAMING: &str = "delayed-streaming";
pub const RULE_UNREGISTERED_DEVICE: &str = "unregistered-device";
pub const RULE_UNAUTHORIZED_KIND: &str = "unauthorized-kind";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub rule_id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
    /// Holds for acceptable transactions; the rule fails when it is false.
    pub predicate: Condition,
    pub on_fail_reason: String,
}

fn enabled_default() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    OnSuspicious,
    OnApproved,
    OnRejected,
    OnExpired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Quarantine,
    Notify,
    Log,
    EscalateToVerifier,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    pub policy_id: String,
    pub trigger: Trigger,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Catalog {
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub policies: Vec<Policy>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CatalogError {
    #[error("catalog parse error: {0}")]
    ConfigParse(String),
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("rule {rule}: unknown field path {field}")]
    UnknownField { rule: String, field: String },
    #[error("rule {0} has an empty failure reason")]
    EmptyReason(String),
    #[error("empty identifier")]
    EmptyId,
}

impl Catalog {
    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        let catalog: Catalog =
            serde_json::from_str(text).map_err(|e| CatalogError::ConfigParse(e.to_string()))?;
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes")
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        let mut seen = HashSet::new();
        for rule in &self.rules {
            if rule.rule_id.is_empty() {
                return Err(CatalogError::EmptyId);
            }
            if !seen.insert(rule.rule_id.as_str()) {
                return Err(CatalogError::DuplicateId(rule.rule_id.clone()));
            }
            if rule.on_fail_reason.trim().is_empty() {
                return Err(CatalogError::EmptyReason(rule.rule_id.clone()));
            }
            if let Some(field) = rule.predicate.unknown_field() {
                return Err(CatalogError::UnknownField {
                    rule: rule.rule_id.clone(),
                    field: field.to_string(),
                });
            }
        }
        let mut seen = HashSet::new();
        for p in &self.policies {
            if p.policy_id.is_empty() {
                return Err(CatalogError::EmptyId);
            }
            if !seen.insert(p.policy_id.as_str()) {
                return Err(CatalogError::DuplicateId(p.policy_id.clone()));
            }
        }
        Ok(())
    }

    pub fn seeded(config: &SeedRuleConfig) -> Self {
        Catalog {
            rules: load_rule_catalog(config),
            policies: default_policies(),
        }
    }
}

pub fn default_policies() -> Vec<Policy> {
    let p = |id: &str, trigger, action| Policy {
        policy_id: id.to_string(),
        trigger,
        action,
    };
    vec![
        p("escalate-suspicious", Trigger::OnSuspicious, Action::EscalateToVerifier),
        p("log-suspicious", Trigger::OnSuspicious, Action::Log),
        p("log-approved", Trigger::OnApproved, Action::Log),
        p("log-rejected", Trigger::OnRejected, Action::Log),
        p("log-expired", Trigger::OnExpired, Action::Log),
    ]
}

/// Parameters of the built-in rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedRuleConfig {
    pub protocol_allowlist: Vec<String>,
    pub max_stream_delay_ms: u64,
    pub registered_devices: Vec<String>,
    /// Issuer to permitted kinds; `"*"` applies to every issuer.
    pub issuer_kinds: BTreeMap<String, Vec<TxKind>>,
    pub disabled: Vec<String>,
}

impl Default for SeedRuleConfig {
    fn default() -> Self {
        Self {
            protocol_allowlist: vec!["coap".into(), "http".into()],
            max_stream_delay_ms: 3_000,
            registered_devices: Vec::new(),
            issuer_kinds: BTreeMap::from([("*".to_string(), TxKind::ALL.to_vec())]),
            disabled: Vec::new(),
        }
    }
}

impl SeedRuleConfig {
    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        serde_json::from_str(text).map_err(|e| CatalogError::ConfigParse(e.to_string()))
    }
}

fn field(s: &str) -> String {
    s.to_string()
}

/// The built-in suspicious-transaction rules, expressed in the predicate
/// grammar so they can be inspected and replaced like any other rule.
pub fn load_rule_catalog(config: &SeedRuleConfig) -> Vec<Rule> {
    let kinds_in = |kinds: &[TxKind]| Condition::In {
        field: field("tx.kind"),
        values: kinds.iter().map(|k| k.as_str().to_string()).collect(),
    };
    let issuer_clauses = config
        .issuer_kinds
        .iter()
        .map(|(issuer, kinds)| {
            if issuer == "*" {
                kinds_in(kinds)
            } else {
                Condition::All(vec![
                    Condition::Eq {
                        field: field("tx.issuer"),
                        value: Scalar::Str(issuer.clone()),
                    },
                    kinds_in(kinds),
                ])
            }
        })
        .collect();

    let rules = vec![
        Rule {
            rule_id: RULE_UNKNOWN_PROTOCOL.into(),
            description: "execution over a communication protocol that is not registered".into(),
            enabled: true,
            predicate: Condition::Any(vec![
                Condition::Not(Box::new(Condition::Exists(field("tx.params.proto")))),
                Condition::In {
                    field: field("tx.params.proto"),
                    values: config.protocol_allowlist.clone(),
                },
            ]),
            on_fail_reason: RULE_UNKNOWN_PROTOCOL.into(),
        },
        Rule {
            rule_id: RULE_DELAYED_STREAMING.into(),
            description: "newest sensor reading is older than the streaming threshold".into(),
            enabled: true,
            predicate: Condition::Any(vec![
                Condition::Not(Box::new(Condition::Exists(field("physical.sensor_age_ms")))),
                Condition::Le {
                    field: field("physical.sensor_age_ms"),
                    value: config.max_stream_delay_ms as f64,
                },
            ]),
            on_fail_reason: RULE_DELAYED_STREAMING.into(),
        },
        Rule {
            rule_id: RULE_UNREGISTERED_DEVICE.into(),
            description: "target device is not part of the registered fleet".into(),
            enabled: true,
            predicate: Condition::In {
                field: field("tx.device_id"),
                values: config.registered_devices.clone(),
            },
            on_fail_reason: RULE_UNREGISTERED_DEVICE.into(),
        },
        Rule {
            rule_id: RULE_UNAUTHORIZED_KIND.into(),
            description: "issuer is not authorized for this kind of operation".into(),
            enabled: true,
            predicate: Condition::Any(issuer_clauses),
            on_fail_reason: RULE_UNAUTHORIZED_KIND.into(),
        },
    ];
    rules
        .into_iter()
        .map(|mut r| {
            r.enabled = !config.disabled.contains(&r.rule_id);
            r
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveCatalog {
    pub version: u64,
    pub catalog: Catalog,
}

/// Shared, atomically replaceable catalog. Readers take an `Arc` to one
/// version and keep it for the whole evaluation.
#[derive(Debug, Clone)]
pub struct CatalogHandle {
    inner: Arc<RwLock<Arc<ActiveCatalog>>>,
}

impl CatalogHandle {
    pub fn new(catalog: Catalog) -> Self {
        Self {
            inner: Arc::new(RwLock::new(Arc::new(ActiveCatalog {
                version: 1,
                catalog,
            }))),
        }
    }

    pub fn current(&self) -> Arc<ActiveCatalog> {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Installs `catalog` as the next version and returns that version.
    pub fn swap(&self, catalog: Catalog) -> u64 {
        let mut guard = self.inner.write().unwrap_or_else(|e| e.into_inner());
        let version = guard.version + 1;
        *guard = Arc::new(ActiveCatalog { version, catalog });
        version
    }
}
