//! Emulated temperature sensor fleet and the executor that is the only path
//! from an approved transaction to a device.
//!
//! Devices are addressed over CoAP as `device/{id}` (GET, current reading)
//! and `device/{id}/config` (PUT, canonical param payload). A request is
//! only honoured if its token matches a single-use ticket the executor
//! issued for an Approved transaction on that device and kind.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::coap::{CoapLink, TransportError};
use crate::coap::{decode, encode, Code, CoapMessage, MessageType};
use crate::context::{PhysicalReading, Quantity, SensorFeed};
use crate::ledger::canonical::{decode_params, encode_params};
use crate::ledger::{Ledger, LedgerError, Transaction, TxKind, TxStatus};

pub const WALK_START_C: f64 = 20.0;
pub const WALK_STEP_C: f64 = 0.1;
pub const WALK_MIN_C: f64 = -20.0;
pub const WALK_MAX_C: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    #[default]
    Celsius,
    Fahrenheit,
}

impl Unit {
    pub fn parse(s: &str) -> Option<Unit> {
        match s.to_ascii_lowercase().as_str() {
            "celsius" | "c" => Some(Unit::Celsius),
            "fahrenheit" | "f" => Some(Unit::Fahrenheit),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Unit::Celsius => "C",
            Unit::Fahrenheit => "F",
        }
    }

    pub fn from_celsius(self, c: f64) -> f64 {
        match self {
            Unit::Celsius => c,
            Unit::Fahrenheit => celsius_to_fahrenheit(c),
        }
    }
}

pub fn celsius_to_fahrenheit(c: f64) -> f64 {
    c * 9.0 / 5.0 + 32.0
}

pub fn fahrenheit_to_celsius(f: f64) -> f64 {
    (f - 32.0) * 5.0 / 9.0
}

/// One decimal place, then the unit tag: `25.0 C`, `77.0 F`.
pub fn format_reading(celsius: f64, unit: Unit) -> String {
    format!("{:.1} {}", unit.from_celsius(celsius), unit.tag())
}

fn default_protocols() -> Vec<String> {
    vec!["coap".to_string()]
}

/// Fleet entry as written in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub device_id: String,
    #[serde(default)]
    pub unit: Unit,
    #[serde(default = "default_protocols")]
    pub protocols: Vec<String>,
}

impl DeviceSpec {
    pub fn new(device_id: impl Into<String>) -> Self {
        Self {
            device_id: device_id.into(),
            unit: Unit::Celsius,
            protocols: default_protocols(),
        }
    }
}

pub struct EmulatedDevice {
    device_id: String,
    unit: Unit,
    truth_c: f64,
    protocols: BTreeSet<String>,
    sampled_at: u64,
    rng: ChaCha8Rng,
}

impl EmulatedDevice {
    pub fn new(spec: &DeviceSpec, seed: u64) -> Self {
        Self {
            device_id: spec.device_id.clone(),
            unit: spec.unit,
            truth_c: WALK_START_C,
            protocols: spec.protocols.iter().cloned().collect(),
            sampled_at: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn physical_truth(&self) -> f64 {
        self.truth_c
    }

    pub fn set_physical_truth(&mut self, celsius: f64) {
        self.truth_c = celsius;
    }

    /// Advances the random walk by one step.
    pub fn step(&mut self, now: u64) -> f64 {
        let delta = self.rng.gen_range(-WALK_STEP_C..=WALK_STEP_C);
        self.truth_c = (self.truth_c + delta).clamp(WALK_MIN_C, WALK_MAX_C);
        self.sampled_at = now;
        self.truth_c
    }

    pub fn reading(&self) -> String {
        format_reading(self.truth_c, self.unit)
    }

    /// Applies config params; only `unit` is understood.
    pub fn configure(&mut self, params: &BTreeMap<String, String>) -> Result<String, DeviceError> {
        let mut applied = Vec::new();
        for (k, v) in params {
            match k.as_str() {
                "unit" => {
                    self.unit = Unit::parse(v).ok_or_else(|| DeviceError::BadParam {
                        key: k.clone(),
                        value: v.clone(),
                    })?;
                    applied.push(format!("unit={}", self.unit.tag()));
                }
                "proto" | "protocol" => {}
                _ => {
                    return Err(DeviceError::BadParam {
                        key: k.clone(),
                        value: v.clone(),
                    })
                }
            }
        }
        Ok(format!("ok {}", applied.join(",")).trim_end().to_string())
    }

    pub fn view(&self) -> DeviceView {
        DeviceView {
            device_id: self.device_id.clone(),
            unit: self.unit,
            physical_truth_c: self.truth_c,
            reading: self.reading(),
            protocols: self.protocols.iter().cloned().collect(),
            sampled_at: self.sampled_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceView {
    pub device_id: String,
    pub unit: Unit,
    pub physical_truth_c: f64,
    pub reading: String,
    pub protocols: Vec<String>,
    pub sampled_at: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DeviceError {
    #[error("device {0} already registered")]
    DuplicateDevice(String),
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("unsupported config {key}={value}")]
    BadParam { key: String, value: String },
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Registry of emulated devices. Each device owns its own lock so state
/// changes are serialized per device.
pub struct Fleet {
    seed: u64,
    devices: RwLock<BTreeMap<String, Arc<Mutex<EmulatedDevice>>>>,
}

impl Fleet {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            devices: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn from_specs(seed: u64, specs: &[DeviceSpec]) -> Result<Self, DeviceError> {
        let fleet = Fleet::new(seed);
        for spec in specs {
            fleet.register(spec)?;
        }
        Ok(fleet)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Device walks are seeded by fleet seed and registration order.
    pub fn register(&self, spec: &DeviceSpec) -> Result<(), DeviceError> {
        let mut devices = self.devices.write().unwrap_or_else(|e| e.into_inner());
        if devices.contains_key(&spec.device_id) {
            return Err(DeviceError::DuplicateDevice(spec.device_id.clone()));
        }
        let seed = self.seed.wrapping_add(devices.len() as u64);
        devices.insert(
            spec.device_id.clone(),
            Arc::new(Mutex::new(EmulatedDevice::new(spec, seed))),
        );
        Ok(())
    }

    pub fn device(&self, device_id: &str) -> Option<Arc<Mutex<EmulatedDevice>>> {
        self.devices
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(device_id)
            .cloned()
    }

    pub fn contains(&self, device_id: &str) -> bool {
        self.device(device_id).is_some()
    }

    pub fn device_ids(&self) -> Vec<String> {
        self.devices
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .keys()
            .cloned()
            .collect()
    }

    pub fn list(&self) -> Vec<DeviceView> {
        self.all().iter().map(|d| lock(d).view()).collect()
    }

    fn all(&self) -> Vec<Arc<Mutex<EmulatedDevice>>> {
        self.devices
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .cloned()
            .collect()
    }

    /// Steps every device's walk once.
    pub fn sample(&self, now: u64) {
        for d in self.all() {
            lock(&d).step(now);
        }
    }
}

impl SensorFeed for Fleet {
    fn latest_readings(&self) -> Vec<PhysicalReading> {
        self.all()
            .iter()
            .map(|d| {
                let d = lock(d);
                PhysicalReading {
                    source: d.device_id.clone(),
                    quantity: Quantity::Temperature,
                    value: d.reading(),
                    observed_at: d.sampled_at,
                }
            })
            .collect()
    }
}

/// Single-use authorizations for device requests, keyed by CoAP token.
#[derive(Default)]
pub struct TicketBook {
    live: Mutex<HashMap<[u8; 8], (String, TxKind)>>,
    issued: AtomicU64,
    salt: u64,
}

impl TicketBook {
    pub fn new() -> Self {
        Self {
            salt: rand::thread_rng().next_u64(),
            ..Self::default()
        }
    }

    fn issue(&self, device_id: &str, kind: TxKind) -> [u8; 8] {
        let n = self.issued.fetch_add(1, Ordering::Relaxed);
        let token = (n ^ self.salt.rotate_left(17)).wrapping_mul(0x9E37_79B9_7F4A_7C15).to_be_bytes();
        lock(&self.live).insert(token, (device_id.to_string(), kind));
        token
    }

    /// Consumes the ticket if it grants `kind` on `device_id`.
    pub fn redeem(&self, token: &[u8], device_id: &str, kind: TxKind) -> bool {
        let Ok(key) = <[u8; 8]>::try_from(token) else {
            return false;
        };
        let mut live = lock(&self.live);
        match live.get(&key) {
            Some((d, k)) if d == device_id && *k == kind => {
                live.remove(&key);
                true
            }
            _ => false,
        }
    }

    pub fn outstanding(&self) -> usize {
        lock(&self.live).len()
    }
}

const DEDUP_CAPACITY: usize = 64;

/// Device-side CoAP endpoint.
pub struct DeviceServer {
    fleet: Arc<Fleet>,
    tickets: Arc<TicketBook>,
    // Replies to recent confirmable requests, so a retransmission does not
    // try to redeem an already consumed ticket.
    recent: Mutex<VecDeque<((u16, Vec<u8>), Vec<u8>)>>,
}

impl DeviceServer {
    pub fn new(fleet: Arc<Fleet>, tickets: Arc<TicketBook>) -> Self {
        Self {
            fleet,
            tickets,
            recent: Mutex::new(VecDeque::new()),
        }
    }

    pub fn handle(&self, req: &CoapMessage) -> CoapMessage {
        let reply = |code: Code| {
            let mut m = req.ack(code);
            if req.mtype == MessageType::NonConfirmable {
                m.mtype = MessageType::NonConfirmable;
            }
            m
        };
        if !matches!(req.mtype, MessageType::Confirmable | MessageType::NonConfirmable) || req.code.class() != 0 {
            return CoapMessage::reset(req.message_id);
        }
        let Some(path) = req.uri_path() else {
            return reply(Code::BAD_REQUEST);
        };
        let segs: Vec<&str> = path.iter().map(String::as_str).collect();
        let (device_id, kind, want) = match segs.as_slice() {
            ["device", id] => (*id, TxKind::Read, Code::GET),
            ["device", id, "config"] => (*id, TxKind::ConfigUpdate, Code::PUT),
            _ => return reply(Code::NOT_FOUND),
        };
        let Some(device) = self.fleet.device(device_id) else {
            return reply(Code::NOT_FOUND);
        };
        if req.code != want {
            return reply(Code::METHOD_NOT_ALLOWED);
        }
        if !self.tickets.redeem(&req.token, device_id, kind) {
            return reply(Code::FORBIDDEN);
        }
        let mut device = lock(&device);
        match kind {
            TxKind::Read => reply(Code::CONTENT).with_payload(device.reading()),
            _ => {
                let Ok(params) = decode_params(&req.payload) else {
                    return reply(Code::BAD_REQUEST);
                };
                match device.configure(&params) {
                    Ok(ack) => reply(Code::CHANGED).with_payload(ack),
                    Err(_) => reply(Code::BAD_REQUEST),
                }
            }
        }
    }

    /// Byte-level entry point for transports. Undecodable input gets a
    /// reset when a message id can be recovered, otherwise silence.
    pub fn handle_datagram(&self, bytes: &[u8]) -> Option<Vec<u8>> {
        let req = match decode(bytes) {
            Ok(req) => req,
            Err(_) if bytes.len() >= 4 => {
                let id = u16::from_be_bytes([bytes[2], bytes[3]]);
                return encode(&CoapMessage::reset(id)).ok();
            }
            Err(_) => return None,
        };
        let key = (req.message_id, req.token.clone());
        if req.mtype == MessageType::Confirmable {
            if let Some((_, cached)) = lock(&self.recent).iter().find(|(k, _)| *k == key) {
                return Some(cached.clone());
            }
        }
        let out = encode(&self.handle(&req)).ok()?;
        if req.mtype == MessageType::Confirmable {
            let mut recent = lock(&self.recent);
            if recent.len() == DEDUP_CAPACITY {
                recent.pop_front();
            }
            recent.push_back((key, out.clone()));
        }
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum ExecOutcome {
    Value(String),
    Ack(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub tx_id: String,
    pub device_id: String,
    pub outcome: ExecOutcome,
    pub executed_at: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("transaction {tx_id} is {status:?}, not approved")]
    NotApproved {
        tx_id: String,
        status: Option<TxStatus>,
    },
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("kind {0:?} cannot be executed")]
    UnsupportedKind(TxKind),
    #[error("device refused with {0}")]
    Refused(Code),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Issues device requests for approved transactions and marks them
/// Executed once the device acknowledges.
pub struct Executor {
    link: Arc<dyn CoapLink>,
    tickets: Arc<TicketBook>,
    ledger: Arc<Ledger>,
    clock: Arc<dyn Clock>,
    executed: AtomicU64,
    refused: AtomicU64,
}

impl Executor {
    pub fn new(
        link: Arc<dyn CoapLink>,
        tickets: Arc<TicketBook>,
        ledger: Arc<Ledger>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            link,
            tickets,
            ledger,
            clock,
            executed: AtomicU64::new(0),
            refused: AtomicU64::new(0),
        }
    }

    /// Executor wired straight to an in-process device server.
    pub fn in_process(fleet: Arc<Fleet>, ledger: Arc<Ledger>, clock: Arc<dyn Clock>) -> Self {
        let tickets = Arc::new(TicketBook::new());
        let server = Arc::new(DeviceServer::new(fleet, tickets.clone()));
        let link = crate::coap::InProcessLink::new(Arc::new(move |b: &[u8]| server.handle_datagram(b)));
        Executor::new(Arc::new(link), tickets, ledger, clock)
    }

    pub fn tickets(&self) -> Arc<TicketBook> {
        self.tickets.clone()
    }

    pub fn executed_count(&self) -> u64 {
        self.executed.load(Ordering::Relaxed)
    }

    /// Attempts turned away by the approval gate.
    pub fn refused_count(&self) -> u64 {
        self.refused.load(Ordering::Relaxed)
    }

    pub fn execute(&self, tx: &Transaction) -> Result<ExecutionResult, ExecError> {
        // The ledger's lifecycle store is authoritative; the caller's copy
        // must agree with it.
        let stored = self.ledger.status_of(&tx.tx_id);
        if tx.status != TxStatus::Approved || stored != Some(TxStatus::Approved) {
            self.refused.fetch_add(1, Ordering::Relaxed);
            tracing::warn!(tx_id = %tx.tx_id, ?stored, "execution refused: not approved");
            return Err(ExecError::NotApproved {
                tx_id: tx.tx_id.clone(),
                status: stored.or(Some(tx.status)),
            });
        }
        let (code, path, payload): (Code, Vec<&str>, Vec<u8>) = match tx.kind {
            TxKind::Read => (Code::GET, vec!["device", &tx.device_id], Vec::new()),
            TxKind::ConfigUpdate => (
                Code::PUT,
                vec!["device", &tx.device_id, "config"],
                encode_params(&tx.params),
            ),
            other => return Err(ExecError::UnsupportedKind(other)),
        };
        let token = self.tickets.issue(&tx.device_id, tx.kind);
        let req = CoapMessage::new(MessageType::Confirmable, code, self.link.next_message_id())
            .with_token(token.to_vec())
            .with_uri_path(&path)
            .with_payload(payload);
        let resp = self.link.exchange(&req)?;
        let text = String::from_utf8_lossy(&resp.payload).into_owned();
        let outcome = match resp.code {
            Code::CONTENT => ExecOutcome::Value(text),
            Code::CHANGED => ExecOutcome::Ack(text),
            Code::NOT_FOUND => return Err(ExecError::UnknownDevice(tx.device_id.clone())),
            other => return Err(ExecError::Refused(other)),
        };
        self.ledger.transition(&tx.tx_id, TxStatus::Executed)?;
        self.executed.fetch_add(1, Ordering::Relaxed);
        Ok(ExecutionResult {
            tx_id: tx.tx_id.clone(),
            device_id: tx.device_id.clone(),
            outcome,
            executed_at: self.clock.now_ms(),
        })
    }
}
