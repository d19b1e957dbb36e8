//! Declarative rule predicates: comparisons and set membership over
//! transaction fields, parameters and physical readings, combined with
//! `all` / `any` / `not`.
//!
//! Field paths:
//!
//! | path                          | value                                         |
//! |-------------------------------|-----------------------------------------------|
//! | `tx.tx_id`, `tx.device_id`, `tx.kind`, `tx.issuer` | string                   |
//! | `tx.submitted_at`             | number (ms)                                   |
//! | `tx.params.<key>`             | string, absent if the key is missing          |
//! | `physical.<quantity>`         | newest reading value, e.g. `"21.5 C"`         |
//! | `physical.<quantity>.number`  | numeric part of the newest reading            |
//! | `physical.sensor_age_ms`      | age of the newest non-datetime reading        |
//! | `context.age_ms`              | evaluation time minus snapshot build time     |
//! | `context.groups`, `context.entries` | provenance sizes                        |
//!
//! Comparisons against an absent field are false.

use serde::{Deserialize, Serialize};

use crate::context::{ContextSnapshot, PhysicalReading, Quantity};
use crate::ledger::Transaction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Num(f64),
    Str(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Const(bool),
    All(Vec<Condition>),
    Any(Vec<Condition>),
    Not(Box<Condition>),
    Exists(String),
    Eq { field: String, value: Scalar },
    Ne { field: String, value: Scalar },
    In { field: String, values: Vec<String> },
    Lt { field: String, value: f64 },
    Le { field: String, value: f64 },
    Gt { field: String, value: f64 },
    Ge { field: String, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Field {
    TxId,
    DeviceId,
    Kind,
    Issuer,
    SubmittedAt,
    Param(String),
    Physical(Quantity),
    PhysicalNumber(Quantity),
    SensorAgeMs,
    ContextAgeMs,
    ContextGroups,
    ContextEntries,
}

fn parse_quantity(s: &str) -> Option<Quantity> {
    match s {
        "temperature" => Some(Quantity::Temperature),
        "datetime" => Some(Quantity::Datetime),
        "location" => Some(Quantity::Location),
        _ => None,
    }
}

impl Field {
    fn parse(path: &str) -> Option<Field> {
        if let Some(key) = path.strip_prefix("tx.params.") {
            return (!key.is_empty()).then(|| Field::Param(key.to_string()));
        }
        if let Some(rest) = path.strip_prefix("physical.") {
            if rest == "sensor_age_ms" {
                return Some(Field::SensorAgeMs);
            }
            return match rest.split_once('.') {
                Some((q, "number")) => parse_quantity(q).map(Field::PhysicalNumber),
                Some(_) => None,
                None => parse_quantity(rest).map(Field::Physical),
            };
        }
        Some(match path {
            "tx.tx_id" => Field::TxId,
            "tx.device_id" => Field::DeviceId,
            "tx.kind" => Field::Kind,
            "tx.issuer" => Field::Issuer,
            "tx.submitted_at" => Field::SubmittedAt,
            "context.age_ms" => Field::ContextAgeMs,
            "context.groups" => Field::ContextGroups,
            "context.entries" => Field::ContextEntries,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Str(String),
    Num(f64),
}

impl Value {
    fn as_number(&self) -> Option<f64> {
        match self {
            Value::Num(n) => Some(*n),
            Value::Str(s) => s.trim().parse().ok(),
        }
    }

    fn as_text(&self) -> String {
        match self {
            Value::Str(s) => s.clone(),
            Value::Num(n) => n.to_string(),
        }
    }
}

/// Everything a predicate may look at.
#[derive(Clone, Copy)]
pub struct Scope<'a> {
    pub tx: &'a Transaction,
    pub snapshot: &'a ContextSnapshot,
    pub now: u64,
}

fn newest(readings: &[PhysicalReading], q: Quantity) -> Option<&PhysicalReading> {
    readings
        .iter()
        .filter(|r| r.quantity == q)
        .max_by_key(|r| r.observed_at)
}

impl Scope<'_> {
    fn resolve(&self, path: &str) -> Option<Value> {
        let tx = self.tx;
        Some(match Field::parse(path)? {
            Field::TxId => Value::Str(tx.tx_id.clone()),
            Field::DeviceId => Value::Str(tx.device_id.clone()),
            Field::Kind => Value::Str(tx.kind.as_str().to_string()),
            Field::Issuer => Value::Str(tx.issuer.clone()),
            Field::SubmittedAt => Value::Num(tx.submitted_at as f64),
            Field::Param(k) => Value::Str(tx.params.get(&k)?.clone()),
            Field::Physical(q) => Value::Str(newest(&self.snapshot.physical, q)?.value.clone()),
            Field::PhysicalNumber(q) => Value::Num(newest(&self.snapshot.physical, q)?.numeric()?),
            Field::SensorAgeMs => {
                let newest = self
                    .snapshot
                    .physical
                    .iter()
                    .filter(|r| r.quantity != Quantity::Datetime)
                    .map(|r| r.observed_at)
                    .max()?;
                Value::Num(self.now.saturating_sub(newest) as f64)
            }
            Field::ContextAgeMs => Value::Num(self.now.saturating_sub(self.snapshot.built_at) as f64),
            Field::ContextGroups => Value::Num(self.snapshot.groups.len() as f64),
            Field::ContextEntries => Value::Num(self.snapshot.entry_count() as f64),
        })
    }
}

fn scalar_eq(v: &Value, s: &Scalar) -> bool {
    match (v, s) {
        (Value::Str(a), Scalar::Str(b)) => a == b,
        (v, Scalar::Num(b)) => v.as_number() == Some(*b),
        (Value::Num(a), Scalar::Str(b)) => b.trim().parse::<f64>().ok() == Some(*a),
    }
}

impl Condition {
    pub fn eval(&self, scope: &Scope<'_>) -> bool {
        let num = |field: &str| scope.resolve(field).and_then(|v| v.as_number());
        match self {
            Condition::Const(b) => *b,
            Condition::All(cs) => cs.iter().all(|c| c.eval(scope)),
            Condition::Any(cs) => cs.iter().any(|c| c.eval(scope)),
            Condition::Not(c) => !c.eval(scope),
            Condition::Exists(field) => scope.resolve(field).is_some(),
            Condition::Eq { field, value } => {
                scope.resolve(field).is_some_and(|v| scalar_eq(&v, value))
            }
            Condition::Ne { field, value } => {
                scope.resolve(field).is_some_and(|v| !scalar_eq(&v, value))
            }
            Condition::In { field, values } => scope
                .resolve(field)
                .is_some_and(|v| values.contains(&v.as_text())),
            Condition::Lt { field, value } => num(field).is_some_and(|n| n < *value),
            Condition::Le { field, value } => num(field).is_some_and(|n| n <= *value),
            Condition::Gt { field, value } => num(field).is_some_and(|n| n > *value),
            Condition::Ge { field, value } => num(field).is_some_and(|n| n >= *value),
        }
    }

    /// Every field path referenced by this predicate, in tree order.
    pub fn fields(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_fields(&mut out);
        out
    }

    fn collect_fields<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Condition::Const(_) => {}
            Condition::All(cs) | Condition::Any(cs) => {
                cs.iter().for_each(|c| c.collect_fields(out))
            }
            Condition::Not(c) => c.collect_fields(out),
            Condition::Exists(f)
            | Condition::Eq { field: f, .. }
            | Condition::Ne { field: f, .. }
            | Condition::In { field: f, .. }
            | Condition::Lt { field: f, .. }
            | Condition::Le { field: f, .. }
            | Condition::Gt { field: f, .. }
            | Condition::Ge { field: f, .. } => out.push(f),
        }
    }

    /// First field path that does not name a known field.
    pub fn unknown_field(&self) -> Option<&str> {
        self.fields().into_iter().find(|f| Field::parse(f).is_none())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::TxKind;

    fn snapshot() -> ContextSnapshot {
        ContextSnapshot {
            groups: vec![],
            physical: vec![
                PhysicalReading {
                    source: "s1".into(),
                    quantity: Quantity::Temperature,
                    value: "21.5 C".into(),
                    observed_at: 900,
                },
                PhysicalReading {
                    source: "clock".into(),
                    quantity: Quantity::Datetime,
                    value: "1000 ms".into(),
                    observed_at: 1000,
                },
            ],
            built_at: 950,
            window: 100,
            seeded: vec![],
            build_micros: 0,
        }
    }

    fn tx() -> Transaction {
        Transaction::new("t1", "sensor-1", TxKind::Read, "alice", 5).with_param("proto", "coap")
    }

    fn check(json: &str) -> bool {
        let c: Condition = serde_json::from_str(json).unwrap();
        assert_eq!(c.unknown_field(), None, "{json}");
        let (tx, snap) = (tx(), snapshot());
        c.eval(&Scope {
            tx: &tx,
            snapshot: &snap,
            now: 1000,
        })
    }

    #[test]
    fn comparisons() {
        assert!(check(r#"{"eq": {"field": "tx.kind", "value": "read"}}"#));
        assert!(check(r#"{"ne": {"field": "tx.issuer", "value": "bob"}}"#));
        assert!(check(r#"{"in": {"field": "tx.params.proto", "values": ["coap", "http"]}}"#));
        assert!(check(r#"{"gt": {"field": "physical.temperature.number", "value": 21.0}}"#));
        assert!(check(r#"{"eq": {"field": "physical.temperature", "value": "21.5 C"}}"#));
        assert!(check(r#"{"eq": {"field": "physical.sensor_age_ms", "value": 100}}"#));
        assert!(check(r#"{"le": {"field": "context.age_ms", "value": 50}}"#));
        assert!(check(r#"{"eq": {"field": "tx.submitted_at", "value": 5}}"#));
        assert!(!check(r#"{"lt": {"field": "context.groups", "value": 0}}"#));
    }

    #[test]
    fn absent_fields_compare_false() {
        assert!(!check(r#"{"eq": {"field": "tx.params.unit", "value": "x"}}"#));
        assert!(!check(r#"{"ne": {"field": "tx.params.unit", "value": "x"}}"#));
        assert!(!check(r#"{"exists": "physical.location"}"#));
        assert!(check(r#"{"not": {"exists": "tx.params.unit"}}"#));
    }

    #[test]
    fn combinators() {
        assert!(check(r#"{"all": [{"const": true}, {"exists": "tx.params.proto"}]}"#));
        assert!(!check(r#"{"all": [{"const": true}, {"const": false}]}"#));
        assert!(check(r#"{"any": [{"const": false}, {"eq": {"field": "tx.device_id", "value": "sensor-1"}}]}"#));
        assert!(!check(r#"{"any": []}"#));
        assert!(check(r#"{"all": []}"#));
    }

    #[test]
    fn unknown_fields_are_reported() {
        let c: Condition =
            serde_json::from_str(r#"{"all": [{"exists": "tx.kind"}, {"exists": "tx.colour"}]}"#).unwrap();
        assert_eq!(c.unknown_field(), Some("tx.colour"));
        for bad in ["physical.humidity", "physical.temperature.raw", "tx.params."] {
            assert!(Field::parse(bad).is_none(), "{bad}");
        }
    }
}
