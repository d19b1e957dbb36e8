//! Evaluator: proof-of-provenance, context staleness and rule checks that
//! mark each mined transaction approved or suspicious.

mod catalog;
mod condition;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use catalog::{
    default_policies, load_rule_catalog, Action, ActiveCatalog, Catalog, CatalogError,
    CatalogHandle, Policy, Rule, SeedRuleConfig, Trigger, RULE_DELAYED_STREAMING,
    RULE_UNAUTHORIZED_KIND, RULE_UNKNOWN_PROTOCOL, RULE_UNREGISTERED_DEVICE,
};
pub use condition::{Condition, Scalar, Scope};

use crate::clock::CpuStopwatch;
use crate::context::{template_signature, ContextSnapshot};
use crate::ledger::{Ledger, LedgerError, Transaction, TxStatus};

pub const REASON_UNSEEN_TEMPLATE: &str = "unseen-template";
pub const REASON_STALE_CONTEXT: &str = "stale-context";
pub const DEFAULT_MAX_SNAPSHOT_AGE_MS: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub max_snapshot_age_ms: u64,
    /// Minimum number of legitimizing provenance entries for a template.
    pub provenance_threshold: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            max_snapshot_age_ms: DEFAULT_MAX_SNAPSHOT_AGE_MS,
            provenance_threshold: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Approved,
    Suspicious,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub tx_id: String,
    pub outcome: Outcome,
    /// Empty iff approved.
    pub reasons: Vec<String>,
    pub evaluated_at: u64,
    pub read_micros: u64,
    /// Thread CPU time of the rule analysis.
    pub analysis_micros: u64,
    #[serde(default)]
    pub analysis_wall_micros: u64,
}

impl Verdict {
    pub fn is_suspicious(&self) -> bool {
        self.outcome == Outcome::Suspicious
    }
}

/// Number of legitimizing provenance entries for `tx`'s template, reading
/// the snapshot entry by entry. Seeded templates count as fully proven.
pub fn provenance_count(tx: &Transaction, snapshot: &ContextSnapshot, threshold: usize) -> usize {
    let sig = template_signature(tx);
    let seen = snapshot
        .entries()
        .filter(|e| e.tx_id != tx.tx_id && e.status.legitimizes() && e.signature == sig)
        .count();
    if snapshot.seeded.contains(&sig) {
        seen.max(threshold)
    } else {
        seen
    }
}

pub fn evaluate(
    tx: &Transaction,
    snapshot: &ContextSnapshot,
    rules: &[Rule],
    settings: &EvalSettings,
    now: u64,
) -> Verdict {
    let read_start = Instant::now();
    let proven = provenance_count(tx, snapshot, settings.provenance_threshold);
    let read_micros = read_start.elapsed().as_micros() as u64;

    let analysis_start = CpuStopwatch::start();
    let mut reasons = Vec::new();
    if proven < settings.provenance_threshold.max(1) {
        reasons.push(REASON_UNSEEN_TEMPLATE.to_string());
    }
    if now.saturating_sub(snapshot.built_at) > settings.max_snapshot_age_ms {
        reasons.push(REASON_STALE_CONTEXT.to_string());
    }
    let scope = Scope { tx, snapshot, now };
    for rule in rules.iter().filter(|r| r.enabled) {
        if !rule.predicate.eval(&scope) {
            reasons.push(rule.on_fail_reason.clone());
        }
    }
    let outcome = if reasons.is_empty() {
        Outcome::Approved
    } else {
        Outcome::Suspicious
    };
    Verdict {
        tx_id: tx.tx_id.clone(),
        outcome,
        reasons,
        evaluated_at: now,
        read_micros,
        analysis_micros: analysis_start.elapsed_us(),
        analysis_wall_micros: analysis_start.wall_us(),
    }
}

/// Actions of every policy registered for `trigger`, in registration order.
pub fn enacted_for(trigger: Trigger, policies: &[Policy]) -> Vec<Action> {
    let mut actions: Vec<Action> = policies
        .iter()
        .filter(|p| p.trigger == trigger)
        .map(|p| p.action)
        .collect();
    if trigger == Trigger::OnSuspicious && !actions.contains(&Action::EscalateToVerifier) {
        actions.insert(0, Action::EscalateToVerifier);
    }
    actions
}

pub fn apply_policies(verdict: &Verdict, policies: &[Policy]) -> Vec<Action> {
    let trigger = match verdict.outcome {
        Outcome::Approved => Trigger::OnApproved,
        Outcome::Suspicious => Trigger::OnSuspicious,
    };
    enacted_for(trigger, policies)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Destination {
    Executor,
    Verifier,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RouteError {
    #[error("verdict for {verdict} does not belong to transaction {tx}")]
    TxMismatch { verdict: String, tx: String },
    #[error("transaction {tx_id} already routed or not mined (status {status:?})")]
    StatusConflict {
        tx_id: String,
        status: Option<TxStatus>,
    },
    #[error(transparent)]
    Ledger(LedgerError),
}

/// Applies the verdict's lifecycle edge (Mined -> Approved | Suspicious)
/// and names where the transaction goes next.
pub fn route(verdict: &Verdict, tx: &Transaction, ledger: &Ledger) -> Result<Destination, RouteError> {
    if verdict.tx_id != tx.tx_id {
        return Err(RouteError::TxMismatch {
            verdict: verdict.tx_id.clone(),
            tx: tx.tx_id.clone(),
        });
    }
    let (to, dest) = match verdict.outcome {
        Outcome::Approved => (TxStatus::Approved, Destination::Executor),
        Outcome::Suspicious => (TxStatus::Suspicious, Destination::Verifier),
    };
    match ledger.transition(&tx.tx_id, to) {
        Ok(_) => Ok(dest),
        Err(LedgerError::StatusConflict { from, .. }) => Err(RouteError::StatusConflict {
            tx_id: tx.tx_id.clone(),
            status: Some(from),
        }),
        Err(LedgerError::UnknownTransaction(_)) => Err(RouteError::StatusConflict {
            tx_id: tx.tx_id.clone(),
            status: None,
        }),
        Err(e) => Err(RouteError::Ledger(e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::context::{signature_of, PhysicalReading, ProvenanceEntry, ProvenanceGroup, Quantity};
    use crate::ledger::TxKind;
    use std::sync::Arc;

    fn read(id: &str) -> Transaction {
        let mut tx = Transaction::new(id, "sensor-1", TxKind::Read, "op", 1).with_param("unit", "celsius");
        tx.status = TxStatus::Mined;
        tx
    }

    fn config_update(id: &str) -> Transaction {
        let mut tx = Transaction::new(id, "sensor-1", TxKind::ConfigUpdate, "op", 1)
            .with_param("unit", "fahrenheit");
        tx.status = TxStatus::Mined;
        tx
    }

    fn snapshot_of(history: &[(Transaction, TxStatus)], built_at: u64) -> ContextSnapshot {
        let entries: Vec<ProvenanceEntry> = history
            .iter()
            .enumerate()
            .map(|(i, (tx, status))| ProvenanceEntry {
                signature: template_signature(tx),
                tx_id: tx.tx_id.clone(),
                status: *status,
                block_index: 1 + i as u64 / 10,
            })
            .collect();
        ContextSnapshot {
            groups: entries
                .chunks(10)
                .enumerate()
                .map(|(group_index, c)| ProvenanceGroup {
                    group_index,
                    entries: c.to_vec(),
                })
                .collect(),
            physical: vec![PhysicalReading {
                source: "sensor-1".into(),
                quantity: Quantity::Temperature,
                value: "20.0 C".into(),
                observed_at: built_at,
            }],
            built_at,
            window: 100,
            seeded: vec![],
            build_micros: 0,
        }
    }

    fn hundred_reads() -> Vec<(Transaction, TxStatus)> {
        (0..100).map(|i| (read(&format!("r{i}")), TxStatus::Executed)).collect()
    }

    fn rules() -> Vec<Rule> {
        load_rule_catalog(&SeedRuleConfig {
            registered_devices: vec!["sensor-1".into()],
            ..Default::default()
        })
    }

    #[test]
    fn config_update_after_reads_is_unseen() {
        let snap = snapshot_of(&hundred_reads(), 1_000);
        let v = evaluate(&config_update("c"), &snap, &rules(), &EvalSettings::default(), 1_000);
        assert_eq!(v.outcome, Outcome::Suspicious);
        assert_eq!(v.reasons, [REASON_UNSEEN_TEMPLATE]);
    }

    #[test]
    fn matching_read_is_approved() {
        let snap = snapshot_of(&hundred_reads(), 1_000);
        let v = evaluate(&read("r100"), &snap, &rules(), &EvalSettings::default(), 1_500);
        assert_eq!(v.outcome, Outcome::Approved);
        assert!(v.reasons.is_empty());
    }

    #[test]
    fn empty_provenance_is_suspicious() {
        let snap = snapshot_of(&[], 0);
        let v = evaluate(&read("r"), &snap, &[], &EvalSettings::default(), 0);
        assert_eq!(v.reasons, [REASON_UNSEEN_TEMPLATE]);
    }

    #[test]
    fn stale_snapshot_is_suspicious() {
        let snap = snapshot_of(&hundred_reads(), 1_000);
        // built_at 1000 + max age 10000 = 11000 is the last fresh instant
        let s = EvalSettings::default();
        assert_eq!(evaluate(&read("x"), &snap, &[], &s, 11_000).outcome, Outcome::Approved);
        let v = evaluate(&read("x"), &snap, &[], &s, 11_001);
        assert_eq!(v.reasons, [REASON_STALE_CONTEXT]);
    }

    #[test]
    fn rejected_only_template_stays_unseen() {
        let mut history = hundred_reads();
        history.push((config_update("c0"), TxStatus::Rejected));
        history.push((config_update("c1"), TxStatus::Expired));
        history.push((config_update("c2"), TxStatus::Suspicious));
        let snap = snapshot_of(&history, 0);
        let v = evaluate(&config_update("c3"), &snap, &[], &EvalSettings::default(), 0);
        assert_eq!(v.reasons, [REASON_UNSEEN_TEMPLATE]);
        history.push((config_update("c4"), TxStatus::Approved));
        let snap = snapshot_of(&history, 0);
        assert!(!evaluate(&config_update("c5"), &snap, &[], &EvalSettings::default(), 0).is_suspicious());
    }

    #[test]
    fn own_entry_does_not_prove_itself() {
        let tx = read("self");
        let snap = snapshot_of(&[(tx.clone(), TxStatus::Executed)], 0);
        assert!(evaluate(&tx, &snap, &[], &EvalSettings::default(), 0).is_suspicious());
    }

    #[test]
    fn seeded_templates_and_threshold() {
        let mut snap = snapshot_of(&[], 0);
        snap.seeded = vec![signature_of("sensor-1", TxKind::Read, ["unit"])];
        let s = EvalSettings {
            provenance_threshold: 3,
            ..Default::default()
        };
        assert!(!evaluate(&read("a"), &snap, &[], &s, 0).is_suspicious());
        let two = snapshot_of(&[(read("x"), TxStatus::Executed), (read("y"), TxStatus::Executed)], 0);
        assert!(evaluate(&read("a"), &two, &[], &s, 0).is_suspicious());
    }

    #[test]
    fn unknown_protocol_rule_fires() {
        let snap = snapshot_of(&hundred_reads(), 0);
        let tx = read("t").with_param("proto", "telnet");
        let mut history = hundred_reads();
        history.push((tx.clone(), TxStatus::Executed));
        let snap2 = snapshot_of(&history, 0);
        let v = evaluate(&read("t2").with_param("proto", "telnet"), &snap2, &rules(), &EvalSettings::default(), 0);
        assert_eq!(v.reasons, [RULE_UNKNOWN_PROTOCOL]);
        let v = evaluate(&tx, &snap, &rules(), &EvalSettings::default(), 0);
        assert!(v.reasons.contains(&RULE_UNKNOWN_PROTOCOL.to_string()));
    }

    #[test]
    fn other_seed_rules_fire() {
        let snap = snapshot_of(&hundred_reads(), 0);
        let s = EvalSettings::default();
        // sensor reading observed at 0, evaluated at 3001 > 3000 ms threshold
        let v = evaluate(&read("a"), &snap, &rules(), &s, 3_001);
        assert_eq!(v.reasons, [RULE_DELAYED_STREAMING]);

        let mut other = read("b");
        other.device_id = "sensor-9".into();
        let v = evaluate(&other, &snap, &rules(), &s, 0);
        assert!(v.reasons.contains(&RULE_UNREGISTERED_DEVICE.to_string()));

        let cfg = SeedRuleConfig {
            registered_devices: vec!["sensor-1".into()],
            issuer_kinds: [("op".to_string(), vec![TxKind::Read])].into(),
            ..Default::default()
        };
        let strict = load_rule_catalog(&cfg);
        assert!(!evaluate(&read("c"), &snap, &strict, &s, 0).is_suspicious());
        let mut stranger = read("d");
        stranger.issuer = "mallory".into();
        assert_eq!(evaluate(&stranger, &snap, &strict, &s, 0).reasons, [RULE_UNAUTHORIZED_KIND]);
    }

    #[test]
    fn all_rules_disabled_and_seen_is_approved() {
        let cfg = SeedRuleConfig {
            disabled: vec![
                RULE_UNKNOWN_PROTOCOL.into(),
                RULE_DELAYED_STREAMING.into(),
                RULE_UNREGISTERED_DEVICE.into(),
                RULE_UNAUTHORIZED_KIND.into(),
            ],
            ..Default::default()
        };
        let snap = snapshot_of(&hundred_reads(), 0);
        let mut tx = read("x").with_param("proto", "telnet");
        tx.params.remove("proto");
        assert!(!evaluate(&tx, &snap, &load_rule_catalog(&cfg), &EvalSettings::default(), 0).is_suspicious());
    }

    #[test]
    fn reasons_enumerate_every_failed_clause() {
        let snap = snapshot_of(&[], 0);
        let mut tx = config_update("z").with_param("proto", "telnet");
        tx.device_id = "ghost".into();
        let v = evaluate(&tx, &snap, &rules(), &EvalSettings::default(), 20_000);
        assert_eq!(
            v.reasons,
            [
                REASON_UNSEEN_TEMPLATE,
                REASON_STALE_CONTEXT,
                RULE_UNKNOWN_PROTOCOL,
                RULE_DELAYED_STREAMING,
                RULE_UNREGISTERED_DEVICE
            ]
        );
    }

    #[test]
    fn policies() {
        let mut v = evaluate(&config_update("c"), &snapshot_of(&[], 0), &[], &EvalSettings::default(), 0);
        assert_eq!(
            apply_policies(&v, &default_policies()),
            [Action::EscalateToVerifier, Action::Log]
        );
        assert_eq!(apply_policies(&v, &[]), [Action::EscalateToVerifier]);
        v.outcome = Outcome::Approved;
        assert_eq!(apply_policies(&v, &default_policies()), [Action::Log]);
        assert!(apply_policies(&v, &[]).is_empty());
    }

    #[test]
    fn routing_applies_lifecycle_once() {
        let ledger = Ledger::new(Arc::new(ManualClock::new(0)));
        let mut r = read("r");
        r.status = TxStatus::Submitted;
        let mut c = config_update("c");
        c.status = TxStatus::Submitted;
        ledger.submit_transaction(r).unwrap();
        ledger.submit_transaction(c).unwrap();
        ledger.mine_block("m", 2).unwrap();
        let snap = snapshot_of(&hundred_reads(), 0);
        let (r, _) = ledger.get("r").unwrap();
        let (c, _) = ledger.get("c").unwrap();
        let vr = evaluate(&r, &snap, &[], &EvalSettings::default(), 0);
        let vc = evaluate(&c, &snap, &[], &EvalSettings::default(), 0);
        assert_eq!(route(&vr, &r, &ledger), Ok(Destination::Executor));
        assert_eq!(route(&vc, &c, &ledger), Ok(Destination::Verifier));
        assert_eq!(ledger.status_of("r"), Some(TxStatus::Approved));
        assert_eq!(ledger.status_of("c"), Some(TxStatus::Suspicious));
        assert!(matches!(route(&vr, &r, &ledger), Err(RouteError::StatusConflict { .. })));
        assert!(matches!(route(&vr, &c, &ledger), Err(RouteError::TxMismatch { .. })));
    }
}
