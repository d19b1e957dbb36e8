//! Context factory: assembles on-chain provenance and physical sensor
//! readings into an immutable snapshot for the evaluator.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ledger::canonical::CanonicalWriter;
use crate::ledger::{Digest, Ledger, LedgerError, Transaction, TxKind, TxStatus};

pub const DEFAULT_WINDOW: usize = 100;
pub const DEFAULT_GROUP_SIZE: usize = 10;
pub const DEFAULT_MAX_PHYSICAL_AGE_MS: u64 = 5_000;

/// Fingerprint of "what kind of transaction on which device": device id,
/// kind and the sorted parameter keys. Ids, issuers, timestamps and
/// parameter values do not contribute.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TemplateSignature(pub Digest);

impl fmt::Debug for TemplateSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TemplateSignature({})", &self.0.to_hex()[..16])
    }
}

impl Serialize for TemplateSignature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TemplateSignature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Digest::deserialize(d).map(TemplateSignature)
    }
}

pub fn template_signature(tx: &Transaction) -> TemplateSignature {
    signature_of(&tx.device_id, tx.kind, tx.params.keys().map(String::as_str))
}

/// Signature from its parts; `param_keys` may be given in any order.
pub fn signature_of<'a>(
    device_id: &str,
    kind: TxKind,
    param_keys: impl IntoIterator<Item = &'a str>,
) -> TemplateSignature {
    let mut keys: Vec<&str> = param_keys.into_iter().collect();
    keys.sort_unstable();
    keys.dedup();
    let mut w = CanonicalWriter::new();
    w.str("template/v1").str(device_id).u8(kind.tag()).u32(keys.len() as u32);
    for k in keys {
        w.str(k);
    }
    TemplateSignature(Digest::of(&w.into_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Temperature,
    Datetime,
    Location,
}

impl Quantity {
    pub fn as_str(self) -> &'static str {
        match self {
            Quantity::Temperature => "temperature",
            Quantity::Datetime => "datetime",
            Quantity::Location => "location",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalReading {
    pub source: String,
    pub quantity: Quantity,
    /// Scalar followed by a unit tag, e.g. `21.5 C`.
    pub value: String,
    pub observed_at: u64,
}

impl PhysicalReading {
    /// Leading numeric part of `value`, if any.
    pub fn numeric(&self) -> Option<f64> {
        self.value.split_whitespace().next()?.parse().ok()
    }
}

/// Source of the latest physical readings, one or more per sensor.
pub trait SensorFeed {
    fn latest_readings(&self) -> Vec<PhysicalReading>;
}

impl SensorFeed for Vec<PhysicalReading> {
    fn latest_readings(&self) -> Vec<PhysicalReading> {
        self.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub signature: TemplateSignature,
    pub tx_id: String,
    pub status: TxStatus,
    pub block_index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceGroup {
    pub group_index: usize,
    pub entries: Vec<ProvenanceEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSettings {
    pub window: usize,
    pub group_size: usize,
    pub max_physical_age_ms: u64,
}

impl Default for ContextSettings {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            group_size: DEFAULT_GROUP_SIZE,
            max_physical_age_ms: DEFAULT_MAX_PHYSICAL_AGE_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSnapshot {
    pub groups: Vec<ProvenanceGroup>,
    pub physical: Vec<PhysicalReading>,
    pub built_at: u64,
    pub window: usize,
    /// Templates legitimized by configuration rather than by chain history.
    #[serde(default)]
    pub seeded: Vec<TemplateSignature>,
    /// Wall time spent building this snapshot.
    #[serde(default)]
    pub build_micros: u64,
}

impl ContextSnapshot {
    pub fn entries(&self) -> impl Iterator<Item = &ProvenanceEntry> {
        self.groups.iter().flat_map(|g| g.entries.iter())
    }

    pub fn entry_count(&self) -> usize {
        self.groups.iter().map(|g| g.entries.len()).sum()
    }

    pub fn summary(&self) -> SnapshotSummary {
        SnapshotSummary {
            groups: self.groups.len(),
            entries: self.entry_count(),
            physical: self.physical.clone(),
            built_at: self.built_at,
        }
    }
}

/// What a human reviewer sees of the snapshot that flagged a transaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub groups: usize,
    pub entries: usize,
    pub physical: Vec<PhysicalReading>,
    pub built_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContextError {
    #[error("ledger unavailable: {0}")]
    LedgerUnavailable(#[from] LedgerError),
}

/// The most recent `window` mined transactions (any status, including
/// fed-back rejections) in chain order, chunked into groups.
pub fn collect_provenance(
    ledger: &Ledger,
    window: usize,
    group_size: usize,
) -> Result<Vec<ProvenanceGroup>, ContextError> {
    debug_assert!(window >= 1 && group_size >= 1);
    let entries: Vec<ProvenanceEntry> = ledger
        .recent(window.max(1))?
        .into_iter()
        .map(|e| ProvenanceEntry {
            signature: template_signature(&e.tx),
            tx_id: e.tx.tx_id,
            status: e.tx.status,
            block_index: e.block_index,
        })
        .collect();
    Ok(entries
        .chunks(group_size.max(1))
        .enumerate()
        .map(|(group_index, chunk)| ProvenanceGroup {
            group_index,
            entries: chunk.to_vec(),
        })
        .collect())
}

/// Latest non-stale reading per sensor and quantity, plus the current
/// datetime.
pub fn collect_physical(
    feed: &dyn SensorFeed,
    now: u64,
    max_age_ms: u64,
) -> Vec<PhysicalReading> {
    let mut latest: Vec<PhysicalReading> = Vec::new();
    for r in feed.latest_readings() {
        if r.observed_at > now || now - r.observed_at > max_age_ms {
            continue;
        }
        match latest
            .iter_mut()
            .find(|l| l.source == r.source && l.quantity == r.quantity)
        {
            Some(l) if l.observed_at < r.observed_at => *l = r,
            Some(_) => {}
            None => latest.push(r),
        }
    }
    latest.push(PhysicalReading {
        source: "clock".to_string(),
        quantity: Quantity::Datetime,
        value: format!("{now} ms"),
        observed_at: now,
    });
    latest
}

pub fn build_context(
    ledger: &Ledger,
    feed: &dyn SensorFeed,
    settings: &ContextSettings,
    seeded: &[TemplateSignature],
    now: u64,
) -> Result<ContextSnapshot, ContextError> {
    let started = Instant::now();
    let groups = collect_provenance(ledger, settings.window, settings.group_size)?;
    let physical = collect_physical(feed, now, settings.max_physical_age_ms);
    Ok(ContextSnapshot {
        groups,
        physical,
        built_at: now,
        window: settings.window,
        seeded: seeded.to_vec(),
        build_micros: started.elapsed().as_micros() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use std::sync::Arc;

    fn read(id: &str, device: &str, at: u64) -> Transaction {
        Transaction::new(id, device, TxKind::Read, "op", at).with_param("unit", "celsius")
    }

    fn ledger_with(n: usize) -> Ledger {
        let l = Ledger::new(Arc::new(ManualClock::new(10)));
        for i in 0..n {
            l.submit_transaction(read(&format!("r{i}"), "sensor-1", i as u64)).unwrap();
            // several blocks so chunking crosses block boundaries
            if i % 7 == 6 {
                l.mine_block("m", 2).unwrap();
            }
        }
        if l.pool_len() > 0 {
            l.mine_block("m", 2).unwrap();
        }
        l
    }

    #[test]
    fn signature_ignores_volatile_fields() {
        let a = read("a", "sensor-1", 1);
        let mut b = read("b", "sensor-1", 999);
        b.issuer = "someone".into();
        b.params.insert("unit".into(), "fahrenheit".into());
        assert_eq!(template_signature(&a), template_signature(&b));
    }

    #[test]
    fn signature_distinguishes_kind_and_device() {
        let a = read("a", "sensor-1", 1);
        let mut cfg = a.clone();
        cfg.kind = TxKind::ConfigUpdate;
        // field-by-field: only the kind tag differs in the canonical form
        assert_ne!(template_signature(&a), template_signature(&cfg));
        assert_ne!(template_signature(&a), template_signature(&read("a", "sensor-2", 1)));
        let mut extra = a.clone();
        extra.params.insert("proto".into(), "coap".into());
        assert_ne!(template_signature(&a), template_signature(&extra));
    }

    #[test]
    fn hundred_transactions_make_ten_groups() {
        let groups = collect_provenance(&ledger_with(100), 100, 10).unwrap();
        assert_eq!(groups.len(), 10);
        assert!(groups.iter().all(|g| g.entries.len() == 10));
        assert_eq!(groups[0].entries[0].tx_id, "r0");
        assert_eq!(groups[9].entries[9].tx_id, "r99");
    }

    #[test]
    fn short_final_group() {
        // ceil(105 / 10) = 11 groups, 105 - 10 * 10 = 5 in the last
        let groups = collect_provenance(&ledger_with(105), 200, 10).unwrap();
        assert_eq!(groups.len(), 11);
        assert_eq!(groups[10].entries.len(), 5);
        assert_eq!(groups[10].group_index, 10);
    }

    #[test]
    fn empty_chain_has_no_groups() {
        assert!(collect_provenance(&ledger_with(0), 100, 10).unwrap().is_empty());
    }

    #[test]
    fn window_keeps_most_recent() {
        let groups = collect_provenance(&ledger_with(30), 12, 5).unwrap();
        let ids: Vec<_> = groups.iter().flat_map(|g| &g.entries).map(|e| e.tx_id.as_str()).collect();
        assert_eq!(ids.len(), 12);
        assert_eq!(ids[0], "r18");
        assert_eq!(ids[11], "r29");
    }

    fn temp(source: &str, value: &str, at: u64) -> PhysicalReading {
        PhysicalReading {
            source: source.into(),
            quantity: Quantity::Temperature,
            value: value.into(),
            observed_at: at,
        }
    }

    #[test]
    fn physical_passthrough_with_datetime() {
        let feed = vec![temp("sensor-1", "21.5 C", 9_000)];
        let p = collect_physical(&feed, 10_000, 5_000);
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].value, "21.5 C");
        assert_eq!(p[0].numeric(), Some(21.5));
        assert_eq!(p[1].quantity, Quantity::Datetime);
    }

    #[test]
    fn no_sensors_gives_datetime_only() {
        let p = collect_physical(&Vec::new(), 10_000, 5_000);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].quantity, Quantity::Datetime);
    }

    #[test]
    fn stale_and_future_readings_are_dropped() {
        let feed = vec![
            temp("old", "1.0 C", 0),
            temp("fresh", "2.0 C", 6_000),
            temp("future", "3.0 C", 10_001),
            temp("fresh", "2.5 C", 7_000),
        ];
        let p = collect_physical(&feed, 10_000, 5_000);
        let sources: Vec<_> = p.iter().map(|r| r.source.as_str()).collect();
        assert_eq!(sources, ["fresh", "clock"]);
        assert_eq!(p[0].value, "2.5 C");
    }

    #[test]
    fn rebuilding_without_chain_change_keeps_groups() {
        let l = ledger_with(23);
        let before = l.chain().unwrap();
        let s = ContextSettings::default();
        let a = build_context(&l, &Vec::new(), &s, &[], 100).unwrap();
        let b = build_context(&l, &vec![temp("x", "1.0 C", 150)], &s, &[], 200).unwrap();
        assert_eq!(a.groups, b.groups);
        assert_ne!(a.built_at, b.built_at);
        assert_eq!(l.chain().unwrap(), before);
        assert_eq!(a.entry_count(), 23);
    }

    #[test]
    fn empty_snapshot() {
        let l = ledger_with(0);
        let s = build_context(&l, &Vec::new(), &ContextSettings::default(), &[], 5).unwrap();
        assert!(s.groups.is_empty());
        assert_eq!(s.physical.len(), 1);
        let json = serde_json::to_value(&s).unwrap();
        assert_eq!(json["window"], 100);
    }
}
