use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxKind {
    Read,
    ConfigUpdate,
    FirmwareUpdate,
    ActuatorCommand,
}

impl TxKind {
    pub const ALL: [TxKind; 4] = [
        TxKind::Read,
        TxKind::ConfigUpdate,
        TxKind::FirmwareUpdate,
        TxKind::ActuatorCommand,
    ];

    /// Tag byte used by the canonical serialization.
    pub fn tag(self) -> u8 {
        match self {
            TxKind::Read => 0,
            TxKind::ConfigUpdate => 1,
            TxKind::FirmwareUpdate => 2,
            TxKind::ActuatorCommand => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TxKind::Read => "read",
            TxKind::ConfigUpdate => "config_update",
            TxKind::FirmwareUpdate => "firmware_update",
            TxKind::ActuatorCommand => "actuator_command",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for TxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Lifecycle of a transaction from submission to its terminal state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxStatus {
    Submitted,
    Mined,
    Approved,
    Suspicious,
    Executed,
    Rejected,
    Expired,
}

impl TxStatus {
    pub const ALL: [TxStatus; 7] = [
        TxStatus::Submitted,
        TxStatus::Mined,
        TxStatus::Approved,
        TxStatus::Suspicious,
        TxStatus::Executed,
        TxStatus::Rejected,
        TxStatus::Expired,
    ];

    pub fn can_transition_to(self, next: TxStatus) -> bool {
        use TxStatus::*;
        matches!(
            (self, next),
            (Submitted, Mined)
                | (Mined, Approved)
                | (Mined, Suspicious)
                | (Suspicious, Approved)
                | (Suspicious, Rejected)
                | (Suspicious, Expired)
                | (Approved, Executed)
        )
    }

    /// Statuses that make a template count as previously executed provenance.
    pub fn legitimizes(self) -> bool {
        matches!(self, TxStatus::Approved | TxStatus::Executed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TxStatus::Submitted => "submitted",
            TxStatus::Mined => "mined",
            TxStatus::Approved => "approved",
            TxStatus::Suspicious => "suspicious",
            TxStatus::Executed => "executed",
            TxStatus::Rejected => "rejected",
            TxStatus::Expired => "expired",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for TxStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub tx_id: String,
    pub device_id: String,
    pub kind: TxKind,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
    pub issuer: String,
    pub submitted_at: u64,
    pub status: TxStatus,
}

impl Transaction {
    pub fn new(
        tx_id: impl Into<String>,
        device_id: impl Into<String>,
        kind: TxKind,
        issuer: impl Into<String>,
        submitted_at: u64,
    ) -> Self {
        Self {
            tx_id: tx_id.into(),
            device_id: device_id.into(),
            kind,
            params: BTreeMap::new(),
            issuer: issuer.into(),
            submitted_at,
            status: TxStatus::Submitted,
        }
    }

    pub fn with_param(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.params.insert(key.into(), value.into());
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_documented_edges_are_allowed() {
        use TxStatus::*;
        let allowed = [
            (Submitted, Mined),
            (Mined, Approved),
            (Mined, Suspicious),
            (Suspicious, Approved),
            (Suspicious, Rejected),
            (Suspicious, Expired),
            (Approved, Executed),
        ];
        for from in TxStatus::ALL {
            for to in TxStatus::ALL {
                assert_eq!(
                    from.can_transition_to(to),
                    allowed.contains(&(from, to)),
                    "{from} -> {to}"
                );
            }
        }
    }

    #[test]
    fn kind_tags_round_trip() {
        for k in TxKind::ALL {
            assert_eq!(TxKind::from_tag(k.tag()), Some(k));
            assert_eq!(TxKind::parse(k.as_str()), Some(k));
        }
        assert_eq!(TxKind::from_tag(9), None);
    }
}
