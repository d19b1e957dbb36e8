//! One gateway instance: submit, mine, build context, evaluate, then hold
//! or execute. `run_tick` is the unit of work and runs exclusively.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clock::{Clock, CpuStopwatch};
use crate::context::{
    build_context, collect_provenance, signature_of, template_signature, ContextError, ContextSettings,
    ContextSnapshot, TemplateSignature,
};
use crate::device::{ExecError, ExecutionResult, Executor, Fleet};
use crate::evaluator::{
    apply_policies, evaluate, route, Action, CatalogHandle, Destination, EvalSettings, Outcome, Verdict,
};
use crate::ledger::{Ledger, LedgerError, Transaction, TxKind, TxStatus, DEFAULT_DIFFICULTY};
use crate::verifier::{Decision, DecisionOutcome, Verifier, VerifierError};

pub const REASON_LEDGER_INTEGRITY: &str = "ledger-integrity";
const STAGE_LOG_CAPACITY: usize = 20_000;

/// A template treated as legitimate before any history exists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    pub device_id: String,
    pub kind: TxKind,
    #[serde(default)]
    pub param_keys: Vec<String>,
}

impl TemplateSpec {
    pub fn signature(&self) -> TemplateSignature {
        signature_of(&self.device_id, self.kind, self.param_keys.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub difficulty: u32,
    pub context: ContextSettings,
    pub eval: EvalSettings,
    pub miners: Vec<String>,
    pub bootstrap: Vec<TemplateSpec>,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            difficulty: DEFAULT_DIFFICULTY,
            context: ContextSettings::default(),
            eval: EvalSettings::default(),
            miners: vec!["miner-a".into(), "miner-b".into(), "miner-c".into()],
            bootstrap: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Submitted,
    Mined,
    Evaluated,
    Held,
    Decided,
    Executed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEvent {
    pub seq: u64,
    pub tx_id: String,
    pub stage: Stage,
    pub at_ms: u64,
}

/// Timings of one transaction's evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub tx_id: String,
    pub block_index: u64,
    pub outcome: Outcome,
    pub reasons: Vec<String>,
    pub read_us: u64,
    /// Rule analysis plus, for suspicious transactions, the second-phase
    /// context check and the hold. Thread CPU time.
    pub analysis_us: u64,
    /// The same span in wall time, including any time spent descheduled.
    #[serde(default)]
    pub analysis_wall_us: u64,
    pub detection_to_hold_us: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildRecord {
    pub block_index: u64,
    pub entries: usize,
    pub build_us: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub mined: usize,
    pub approved: usize,
    pub suspicious: usize,
    pub executed: usize,
    pub block_index: Option<u64>,
    pub build: Option<BuildRecord>,
    pub evaluations: Vec<EvalRecord>,
    pub expired: Vec<String>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub ticks: u64,
    pub submitted: u64,
    pub mined: u64,
    pub approved: u64,
    pub suspicious: u64,
    pub executed: u64,
    pub rejected: u64,
    pub expired: u64,
    pub execution_refused: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub counters: Counters,
    pub factory_builds: Vec<BuildRecord>,
    pub evaluations: Vec<EvalRecord>,
    pub stages: Vec<StageEvent>,
}

#[derive(Default)]
struct Metrics {
    counters: Counters,
    builds: Vec<BuildRecord>,
    evaluations: Vec<EvalRecord>,
    stages: VecDeque<StageEvent>,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
}

#[derive(Debug, Serialize)]
pub struct DecisionReport {
    pub decision: DecisionOutcome,
    pub execution: Option<ExecutionResult>,
    pub execution_error: Option<String>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

pub struct Pipeline {
    clock: Arc<dyn Clock>,
    ledger: Arc<Ledger>,
    fleet: Arc<Fleet>,
    executor: Arc<Executor>,
    verifier: Arc<Verifier>,
    catalog: CatalogHandle,
    settings: PipelineSettings,
    seeded: Vec<TemplateSignature>,
    tick: Mutex<()>,
    miner_turn: AtomicUsize,
    stage_seq: AtomicU64,
    metrics: Mutex<Metrics>,
}

impl Pipeline {
    pub fn new(
        clock: Arc<dyn Clock>,
        ledger: Arc<Ledger>,
        fleet: Arc<Fleet>,
        executor: Arc<Executor>,
        verifier: Arc<Verifier>,
        catalog: CatalogHandle,
        settings: PipelineSettings,
    ) -> Self {
        let seeded = settings.bootstrap.iter().map(TemplateSpec::signature).collect();
        Self {
            clock,
            ledger,
            fleet,
            executor,
            verifier,
            catalog,
            settings,
            seeded,
            tick: Mutex::new(()),
            miner_turn: AtomicUsize::new(0),
            stage_seq: AtomicU64::new(0),
            metrics: Mutex::new(Metrics::default()),
        }
    }

    pub fn ledger(&self) -> &Arc<Ledger> {
        &self.ledger
    }

    pub fn fleet(&self) -> &Arc<Fleet> {
        &self.fleet
    }

    pub fn executor(&self) -> &Arc<Executor> {
        &self.executor
    }

    pub fn verifier(&self) -> &Arc<Verifier> {
        &self.verifier
    }

    pub fn catalog(&self) -> &CatalogHandle {
        &self.catalog
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn settings(&self) -> &PipelineSettings {
        &self.settings
    }

    fn stage(&self, m: &mut Metrics, tx_id: &str, stage: Stage) {
        if m.stages.len() == STAGE_LOG_CAPACITY {
            m.stages.pop_front();
        }
        m.stages.push_back(StageEvent {
            seq: self.stage_seq.fetch_add(1, Ordering::Relaxed),
            tx_id: tx_id.to_string(),
            stage,
            at_ms: self.clock.now_ms(),
        });
    }

    fn record_stage(&self, tx_id: &str, stage: Stage) {
        let mut m = lock(&self.metrics);
        self.stage(&mut m, tx_id, stage);
    }

    pub fn submit(&self, tx: Transaction) -> Result<String, PipelineError> {
        let id = self.ledger.submit_transaction(tx)?;
        let mut m = lock(&self.metrics);
        m.counters.submitted += 1;
        self.stage(&mut m, &id, Stage::Submitted);
        Ok(id)
    }

    /// Snapshot as the next tick would see it. Reads only.
    pub fn current_context(&self) -> Result<ContextSnapshot, PipelineError> {
        Ok(build_context(
            &self.ledger,
            self.fleet.as_ref(),
            &self.settings.context,
            &self.seeded,
            self.clock.now_ms(),
        )?)
    }

    fn next_miner(&self) -> String {
        let miners = &self.settings.miners;
        if miners.is_empty() {
            return "miner".to_string();
        }
        let turn = self.miner_turn.fetch_add(1, Ordering::Relaxed);
        miners[turn % miners.len()].clone()
    }

    pub fn run_tick(&self) -> Result<PipelineReport, PipelineError> {
        let _exclusive = lock(&self.tick);
        let mut report = PipelineReport::default();
        let now = self.clock.now_ms();
        self.fleet.sample(now);
        report.expired = self.verifier.expire_pending(now);
        {
            let mut m = lock(&self.metrics);
            m.counters.ticks += 1;
            m.counters.expired += report.expired.len() as u64;
        }

        let block = match self.ledger.mine_block(&self.next_miner(), self.settings.difficulty) {
            Ok(b) => b,
            Err(LedgerError::EmptyPool) => return Ok(report),
            Err(e) => return Err(e.into()),
        };
        report.mined = block.transactions.len();
        report.block_index = Some(block.index);
        {
            let mut m = lock(&self.metrics);
            m.counters.mined += report.mined as u64;
            for tx in &block.transactions {
                self.stage(&mut m, &tx.tx_id, Stage::Mined);
            }
        }

        let snapshot = build_context(
            &self.ledger,
            self.fleet.as_ref(),
            &self.settings.context,
            &self.seeded,
            self.clock.now_ms(),
        )?;
        let build = BuildRecord {
            block_index: block.index,
            entries: snapshot.entry_count(),
            build_us: snapshot.build_micros,
        };
        lock(&self.metrics).builds.push(build.clone());
        report.build = Some(build);

        // One catalog version for the whole batch.
        let active = self.catalog.current();
        for tx in &block.transactions {
            let started = Instant::now();
            let verdict = evaluate(
                tx,
                &snapshot,
                &active.catalog.rules,
                &self.settings.eval,
                self.clock.now_ms(),
            );
            self.record_stage(&tx.tx_id, Stage::Evaluated);
            match self.dispatch(tx, verdict, &snapshot, &active.catalog.policies, started, block.index) {
                Ok((record, executed)) => {
                    match record.outcome {
                        Outcome::Approved => report.approved += 1,
                        Outcome::Suspicious => report.suspicious += 1,
                    }
                    report.executed += executed as usize;
                    lock(&self.metrics).evaluations.push(record.clone());
                    report.evaluations.push(record);
                }
                Err(e) => {
                    tracing::warn!(tx_id = %tx.tx_id, error = %e, "transaction aborted in tick");
                    report.errors.push(format!("{}: {e}", tx.tx_id));
                }
            }
        }
        {
            let mut m = lock(&self.metrics);
            m.counters.approved += report.approved as u64;
            m.counters.suspicious += report.suspicious as u64;
            m.counters.executed += report.executed as u64;
        }
        tracing::info!(
            block = block.index,
            mined = report.mined,
            approved = report.approved,
            suspicious = report.suspicious,
            executed = report.executed,
            "pipeline tick"
        );
        Ok(report)
    }

    /// Routes one verdict. Returns the timing record and whether the
    /// transaction was executed.
    fn dispatch(
        &self,
        tx: &Transaction,
        mut verdict: Verdict,
        snapshot: &ContextSnapshot,
        policies: &[crate::evaluator::Policy],
        started: Instant,
        block_index: u64,
    ) -> Result<(EvalRecord, bool), String> {
        let routing = CpuStopwatch::start();
        let actions = apply_policies(&verdict, policies);
        let dest = route(&verdict, tx, &self.ledger).map_err(|e| e.to_string())?;
        let mut record = EvalRecord {
            tx_id: tx.tx_id.clone(),
            block_index,
            outcome: verdict.outcome,
            reasons: verdict.reasons.clone(),
            read_us: verdict.read_micros,
            analysis_us: 0,
            analysis_wall_us: 0,
            detection_to_hold_us: None,
        };
        match dest {
            Destination::Executor => {
                record.analysis_us = verdict.analysis_micros + routing.elapsed_us();
                record.analysis_wall_us = verdict.analysis_wall_micros + routing.wall_us();
                let mut approved = tx.clone();
                approved.status = TxStatus::Approved;
                match self.executor.execute(&approved) {
                    Ok(_) => {
                        self.record_stage(&tx.tx_id, Stage::Executed);
                        Ok((record, true))
                    }
                    Err(e) => {
                        tracing::warn!(tx_id = %tx.tx_id, error = %e, "execution failed");
                        Ok((record, false))
                    }
                }
            }
            Destination::Verifier => {
                if actions.contains(&Action::EscalateToVerifier) {
                    self.second_phase_check(tx, &mut verdict);
                }
                let mut suspicious = tx.clone();
                suspicious.status = TxStatus::Suspicious;
                self.verifier
                    .enqueue(&suspicious, &verdict, snapshot.summary())
                    .map_err(|e| e.to_string())?;
                self.record_stage(&tx.tx_id, Stage::Held);
                record.reasons = verdict.reasons.clone();
                record.analysis_us = verdict.analysis_micros + routing.elapsed_us();
                record.analysis_wall_us = verdict.analysis_wall_micros + routing.wall_us();
                record.detection_to_hold_us = Some(started.elapsed().as_micros() as u64);
                Ok((record, false))
            }
        }
    }

    /// Before a hold, re-reads provenance straight from the ledger and
    /// checks chain integrity, so the reviewer sees a confirmed suspicion.
    fn second_phase_check(&self, tx: &Transaction, verdict: &mut Verdict) {
        let sig = template_signature(tx);
        let window = self.settings.context.window;
        let fresh = collect_provenance(&self.ledger, window, self.settings.context.group_size)
            .map(|groups| {
                groups
                    .iter()
                    .flat_map(|g| &g.entries)
                    .filter(|e| e.tx_id != tx.tx_id && e.status.legitimizes() && e.signature == sig)
                    .count()
            })
            .unwrap_or(0);
        let intact = self.ledger.validate().map(|r| r.valid).unwrap_or(false);
        if !intact && !verdict.reasons.iter().any(|r| r == REASON_LEDGER_INTEGRITY) {
            verdict.reasons.push(REASON_LEDGER_INTEGRITY.to_string());
        }
        tracing::debug!(tx_id = %tx.tx_id, fresh, intact, "second-phase context check");
    }

    /// Applies a human decision; an approval is executed right away.
    pub fn decide(
        &self,
        pending_id: &str,
        token: Option<&str>,
        decision: Decision,
    ) -> Result<DecisionReport, PipelineError> {
        let outcome = self.verifier.decide(pending_id, token, decision)?;
        self.record_stage(&outcome.tx.tx_id, Stage::Decided);
        let mut report = DecisionReport {
            decision: outcome,
            execution: None,
            execution_error: None,
        };
        match decision {
            Decision::Approve => match self.executor.execute(&report.decision.tx) {
                Ok(res) => {
                    let mut m = lock(&self.metrics);
                    m.counters.executed += 1;
                    self.stage(&mut m, &res.tx_id, Stage::Executed);
                    if let Some(tx) = self.ledger.get(&res.tx_id) {
                        report.decision.tx = tx.0;
                    }
                    report.execution = Some(res);
                }
                Err(e) => report.execution_error = Some(e.to_string()),
            },
            Decision::Revoke => lock(&self.metrics).counters.rejected += 1,
        }
        Ok(report)
    }

    /// Direct execution request, used to probe the approval gate.
    pub fn execute(&self, tx: &Transaction) -> Result<ExecutionResult, ExecError> {
        let r = self.executor.execute(tx);
        if r.is_err() {
            lock(&self.metrics).counters.execution_refused = self.executor.refused_count();
        }
        r
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        let m = lock(&self.metrics);
        let mut counters = m.counters.clone();
        counters.execution_refused = self.executor.refused_count();
        MetricsSnapshot {
            counters,
            factory_builds: m.builds.clone(),
            evaluations: m.evaluations.clone(),
            stages: m.stages.iter().cloned().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::device::DeviceSpec;
    use crate::evaluator::{Catalog, SeedRuleConfig, REASON_UNSEEN_TEMPLATE};
    use crate::verifier::TrustedPrincipal;

    pub(crate) fn build(bootstrap: bool) -> Pipeline {
        let clock = ManualClock::new(1_000_000);
        let clock: Arc<dyn Clock> = Arc::new(clock);
        let ledger = Arc::new(Ledger::new(clock.clone()));
        let fleet = Arc::new(Fleet::from_specs(5, &[DeviceSpec::new("sensor-1")]).unwrap());
        let executor = Arc::new(Executor::in_process(fleet.clone(), ledger.clone(), clock.clone()));
        let seed = SeedRuleConfig {
            registered_devices: vec!["sensor-1".into()],
            ..SeedRuleConfig::default()
        };
        let catalog = CatalogHandle::new(Catalog::seeded(&seed));
        let verifier = Arc::new(Verifier::new(
            vec![TrustedPrincipal {
                principal_id: "alice".into(),
                bearer_token: "tok".into(),
                can_update_icontracts: true,
            }],
            None,
            ledger.clone(),
            catalog.clone(),
            clock.clone(),
        ));
        let settings = PipelineSettings {
            difficulty: 4,
            bootstrap: if bootstrap {
                vec![TemplateSpec {
                    device_id: "sensor-1".into(),
                    kind: TxKind::Read,
                    param_keys: vec![],
                }]
            } else {
                vec![]
            },
            ..PipelineSettings::default()
        };
        Pipeline::new(clock, ledger, fleet, executor, verifier, catalog, settings)
    }

    fn read(i: usize) -> Transaction {
        Transaction::new(format!("r{i}"), "sensor-1", TxKind::Read, "op", i as u64)
    }

    fn config(id: &str) -> Transaction {
        Transaction::new(id, "sensor-1", TxKind::ConfigUpdate, "op", 0).with_param("unit", "fahrenheit")
    }

    fn counts(r: &PipelineReport) -> (usize, usize, usize, usize) {
        (r.mined, r.approved, r.suspicious, r.executed)
    }

    #[test]
    fn empty_tick() {
        let p = build(true);
        assert_eq!(counts(&p.run_tick().unwrap()), (0, 0, 0, 0));
    }

    #[test]
    fn hundred_reads_then_config_update() {
        let p = build(true);
        for i in 0..100 {
            p.submit(read(i)).unwrap();
        }
        let r = p.run_tick().unwrap();
        assert_eq!(counts(&r), (100, 100, 0, 100));
        assert_eq!(r.build.unwrap().entries, 100);

        p.submit(config("c")).unwrap();
        let r = p.run_tick().unwrap();
        assert_eq!(counts(&r), (1, 0, 1, 0));
        assert_eq!(r.evaluations[0].reasons, [REASON_UNSEEN_TEMPLATE]);
        assert!(r.evaluations[0].detection_to_hold_us.is_some());
        assert_eq!(p.ledger().status_of("c"), Some(TxStatus::Suspicious));
        let pending = p.verifier().list();
        assert_eq!(pending.len(), 1);
        assert_eq!(pending[0].tx_id, "c");
    }

    #[test]
    fn cold_start_holds_everything() {
        let p = build(false);
        for i in 0..3 {
            p.submit(read(i)).unwrap();
        }
        assert_eq!(counts(&p.run_tick().unwrap()), (3, 0, 3, 0));
    }

    #[test]
    fn approval_executes_and_revoke_feeds_back() {
        let p = build(true);
        p.submit(config("c1")).unwrap();
        p.submit(config("c2")).unwrap();
        p.run_tick().unwrap();
        let ids: Vec<_> = p.verifier().list().into_iter().map(|v| v.pending_id).collect();

        let rep = p.decide(&ids[0], Some("tok"), Decision::Approve).unwrap();
        assert!(rep.execution.is_some());
        assert_eq!(p.ledger().status_of("c1"), Some(TxStatus::Executed));
        assert_eq!(p.fleet().list()[0].unit, crate::device::Unit::Fahrenheit);

        p.decide(&ids[1], Some("tok"), Decision::Revoke).unwrap();
        let ctx = p.current_context().unwrap();
        assert!(ctx.entries().any(|e| e.tx_id == "c2" && e.status == TxStatus::Rejected));
    }

    #[test]
    fn stage_order_and_read_only_context() {
        let p = build(true);
        p.submit(read(0)).unwrap();
        p.run_tick().unwrap();
        let before = p.metrics();
        let _ = p.current_context().unwrap();
        assert_eq!(p.metrics(), before);
        let stages: Vec<_> = before.stages.iter().map(|s| s.stage).collect();
        assert_eq!(stages, [Stage::Submitted, Stage::Mined, Stage::Evaluated, Stage::Executed]);
        assert_eq!(before.counters.executed, 1);
    }

    #[test]
    fn miners_take_turns() {
        let p = build(true);
        let mut miners = Vec::new();
        for i in 0..4 {
            p.submit(read(i)).unwrap();
            let idx = p.run_tick().unwrap().block_index.unwrap();
            miners.push(p.ledger().chain().unwrap().blocks[idx as usize].miner_id.clone());
        }
        assert_eq!(miners, ["miner-a", "miner-b", "miner-c", "miner-a"]);
    }
}
