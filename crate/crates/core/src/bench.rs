//! Scripted latency experiment: a paced stream of reads with one config
//! update injected at a seeded random position, recorded as CSV rows.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, SystemClock};
use crate::device::{DeviceSpec, Executor, Fleet};
use crate::evaluator::{Catalog, CatalogHandle, Outcome, SeedRuleConfig, REASON_UNSEEN_TEMPLATE};
use crate::ledger::{Ledger, Transaction, TxKind, TxStatus};
use crate::pipeline::{Pipeline, PipelineError, PipelineSettings, TemplateSpec};
use crate::verifier::{PendingState, TrustedPrincipal, Verifier};

pub const DEFAULT_DELAYS_MS: [u64; 3] = [50, 100, 200];
pub const DEFAULT_READS: usize = 100;
pub const DEFAULT_GROUP_SIZE: usize = 10;

/// Timings measured on an Ethereum-backed deployment, shown next to ours in
/// summaries.
pub const REFERENCE_FACTORY_BUILD_US: f64 = 2_000_000.0;
pub const REFERENCE_EVALUATOR_READ_US: f64 = 330.0;
pub const REFERENCE_ANALYSIS_CEILING_US: f64 = 1_000_000.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchScenario {
    pub delay_ms: u64,
    pub n_reads: usize,
    pub group_size: usize,
    pub seed: u64,
    pub devices: usize,
}

impl BenchScenario {
    pub fn new(delay_ms: u64, seed: u64) -> Self {
        Self {
            delay_ms,
            n_reads: DEFAULT_READS,
            group_size: DEFAULT_GROUP_SIZE,
            seed,
            devices: 1,
        }
    }

    /// Position of the config update in the input stream: it is submitted
    /// just before read number `k`, so it lands inside one of the groups.
    pub fn injection_index(&self) -> usize {
        ChaCha8Rng::seed_from_u64(self.seed).gen_range(0..self.n_reads.max(1))
    }

    pub fn device_ids(&self) -> Vec<String> {
        (1..=self.devices.max(1)).map(|i| format!("sensor-{i}")).collect()
    }

    /// Reads round-robin over the devices, with the config update at the
    /// injection index.
    pub fn inputs(&self) -> Vec<Transaction> {
        let devices = self.device_ids();
        let k = self.injection_index();
        let mut out = Vec::with_capacity(self.n_reads + 1);
        for i in 0..self.n_reads {
            if i == k {
                out.push(
                    Transaction::new("cfg", devices[0].clone(), TxKind::ConfigUpdate, "operator", 0)
                        .with_param("unit", "fahrenheit"),
                );
            }
            out.push(Transaction::new(
                format!("r{i:03}"),
                devices[i % devices.len()].clone(),
                TxKind::Read,
                "operator",
                0,
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    FactoryBuildMs,
    EvaluatorReadUs,
    EvaluatorAnalysisUs,
    DetectionToHoldMs,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::FactoryBuildMs,
        Metric::EvaluatorReadUs,
        Metric::EvaluatorAnalysisUs,
        Metric::DetectionToHoldMs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::FactoryBuildMs => "factory_build_ms",
            Metric::EvaluatorReadUs => "evaluator_read_us",
            Metric::EvaluatorAnalysisUs => "evaluator_analysis_us",
            Metric::DetectionToHoldMs => "detection_to_hold_ms",
        }
    }

    fn reference_us(self) -> Option<f64> {
        match self {
            Metric::FactoryBuildMs => Some(REFERENCE_FACTORY_BUILD_US),
            Metric::EvaluatorReadUs => Some(REFERENCE_EVALUATOR_READ_US),
            Metric::EvaluatorAnalysisUs => Some(REFERENCE_ANALYSIS_CEILING_US),
            Metric::DetectionToHoldMs => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One measurement. `index` is the group index for factory builds and the
/// input index otherwise. Values are always microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub scenario_delay_ms: u64,
    pub metric: Metric,
    pub index: usize,
    pub value_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRun {
    pub scenario: BenchScenario,
    pub injection_index: usize,
    pub records: Vec<BenchRecord>,
    /// Outcomes in input order.
    pub verdicts: Vec<Outcome>,
    pub pending_id: String,
    pub elapsed_ms: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("scenario assertion failed: {0}")]
    ScenarioAssertionFailed(String),
    #[error("no records to summarize")]
    EmptyRecords,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A gateway pipeline with the read template pre-legitimized for every
/// device in the scenario.
pub fn fresh_pipeline(scenario: &BenchScenario, principals: Vec<TrustedPrincipal>) -> Pipeline {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let devices = scenario.device_ids();
    let specs: Vec<DeviceSpec> = devices.iter().map(DeviceSpec::new).collect();
    let ledger = Arc::new(Ledger::new(clock.clone()));
    let fleet = Arc::new(Fleet::from_specs(scenario.seed, &specs).expect("device ids are distinct"));
    let executor = Arc::new(Executor::in_process(fleet.clone(), ledger.clone(), clock.clone()));
    let catalog = CatalogHandle::new(Catalog::seeded(&SeedRuleConfig {
        registered_devices: devices.clone(),
        ..SeedRuleConfig::default()
    }));
    let verifier = Arc::new(Verifier::new(principals, None, ledger.clone(), catalog.clone(), clock.clone()));
    let mut settings = PipelineSettings::default();
    settings.context.group_size = scenario.group_size;
    settings.bootstrap = devices
        .iter()
        .map(|d| TemplateSpec {
            device_id: d.clone(),
            kind: TxKind::Read,
            param_keys: vec![],
        })
        .collect();
    Pipeline::new(clock, ledger, fleet, executor, verifier, catalog, settings)
}

fn fail(msg: impl Into<String>) -> BenchError {
    BenchError::ScenarioAssertionFailed(msg.into())
}

/// Drives one scenario against `pipeline`, which must be fresh.
///
/// Inputs are paced `delay_ms` apart on a monotonic schedule; a tick runs
/// after every `group_size` reads.
pub fn run_scenario(pipeline: &Pipeline, scenario: &BenchScenario) -> Result<BenchRun, BenchError> {
    let inputs = scenario.inputs();
    let injection_index = scenario.injection_index();
    let delay = Duration::from_millis(scenario.delay_ms);
    let group = scenario.group_size.max(1);
    let started = Instant::now();
    let mut next = started;
    let mut reads = 0usize;
    let mut evaluations = Vec::with_capacity(inputs.len());
    let mut builds = Vec::new();

    for tx in &inputs {
        if let Some(wait) = next.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        next += delay;
        let is_read = tx.kind == TxKind::Read;
        pipeline.submit(tx.clone())?;
        if is_read {
            reads += 1;
        }
        if is_read && (reads % group == 0 || reads == scenario.n_reads) {
            let report = pipeline.run_tick()?;
            if let Some(e) = report.errors.first() {
                return Err(fail(format!("tick error: {e}")));
            }
            builds.extend(report.build);
            evaluations.extend(report.evaluations);
        }
    }

    let position = |tx_id: &str| inputs.iter().position(|t| t.tx_id == tx_id);
    if evaluations.len() != inputs.len() {
        return Err(fail(format!("{} inputs but {} evaluations", inputs.len(), evaluations.len())));
    }
    let mut verdicts = vec![Outcome::Approved; inputs.len()];
    let mut records = Vec::new();
    for (g, b) in builds.iter().enumerate() {
        records.push(BenchRecord {
            scenario_delay_ms: scenario.delay_ms,
            metric: Metric::FactoryBuildMs,
            index: g,
            value_us: b.build_us,
        });
    }
    let mut indexed: Vec<_> = evaluations
        .iter()
        .map(|e| (position(&e.tx_id).expect("evaluated an input"), e))
        .collect();
    indexed.sort_by_key(|(i, _)| *i);
    for (i, e) in &indexed {
        verdicts[*i] = e.outcome;
        records.push(BenchRecord {
            scenario_delay_ms: scenario.delay_ms,
            metric: Metric::EvaluatorReadUs,
            index: *i,
            value_us: e.read_us,
        });
    }
    for (i, e) in &indexed {
        records.push(BenchRecord {
            scenario_delay_ms: scenario.delay_ms,
            metric: Metric::EvaluatorAnalysisUs,
            index: *i,
            value_us: e.analysis_us,
        });
    }
    for (i, e) in &indexed {
        if let Some(us) = e.detection_to_hold_us {
            records.push(BenchRecord {
                scenario_delay_ms: scenario.delay_ms,
                metric: Metric::DetectionToHoldMs,
                index: *i,
                value_us: us,
            });
        }
    }

    // Correctness of the scripted scenario.
    let flagged: Vec<usize> = (0..verdicts.len()).filter(|&i| verdicts[i] == Outcome::Suspicious).collect();
    if flagged != [injection_index] {
        return Err(fail(format!("expected only input {injection_index} flagged, got {flagged:?}")));
    }
    let cfg = &indexed[injection_index].1;
    if !cfg.reasons.iter().any(|r| r == REASON_UNSEEN_TEMPLATE) {
        return Err(fail(format!("config update reasons {:?}", cfg.reasons)));
    }
    let pending = pipeline
        .verifier()
        .pending_for_tx(&cfg.tx_id)
        .filter(|p| p.state == PendingState::Awaiting)
        .ok_or_else(|| fail("config update is not held"))?;
    if pipeline.ledger().status_of(&cfg.tx_id) != Some(TxStatus::Suspicious) {
        return Err(fail("config update left the suspicious state"));
    }
    for tx in inputs.iter().filter(|t| t.kind == TxKind::Read) {
        if pipeline.ledger().status_of(&tx.tx_id) != Some(TxStatus::Executed) {
            return Err(fail(format!("read {} was not executed", tx.tx_id)));
        }
    }

    Ok(BenchRun {
        scenario: scenario.clone(),
        injection_index,
        records,
        verdicts,
        pending_id: pending.pending_id,
        elapsed_ms: started.elapsed().as_millis() as u64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario_delay_ms: u64,
    pub metric: Metric,
    pub count: usize,
    pub mean_us: f64,
    pub p95_us: u64,
    pub max_us: u64,
    /// Index at which the maximum occurred (first one on ties).
    pub max_index: usize,
    pub reference_us: Option<f64>,
}

/// Mean, nearest-rank p95 and argmax per scenario and metric.
pub fn summarize(records: &[BenchRecord]) -> Result<Vec<SummaryRow>, BenchError> {
    if records.is_empty() {
        return Err(BenchError::EmptyRecords);
    }
    let mut keys: Vec<(u64, Metric)> = records.iter().map(|r| (r.scenario_delay_ms, r.metric)).collect();
    keys.sort();
    keys.dedup();
    Ok(keys
        .into_iter()
        .map(|(delay, metric)| {
            let rows: Vec<&BenchRecord> = records
                .iter()
                .filter(|r| r.scenario_delay_ms == delay && r.metric == metric)
                .collect();
            let mut values: Vec<u64> = rows.iter().map(|r| r.value_us).collect();
            let mean = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
            let max_row = rows
                .iter()
                .fold(rows[0], |best, r| if r.value_us > best.value_us { r } else { best });
            values.sort_unstable();
            let rank = ((values.len() as f64 * 0.95).ceil() as usize).clamp(1, values.len());
            SummaryRow {
                scenario_delay_ms: delay,
                metric,
                count: values.len(),
                mean_us: mean,
                p95_us: values[rank - 1],
                max_us: max_row.value_us,
                max_index: max_row.index,
                reference_us: metric.reference_us(),
            }
        })
        .collect())
}

pub fn write_records_csv(path: &Path, records: &[BenchRecord]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scenario_delay_ms", "metric", "index", "value_us"])?;
    for r in records {
        w.write_record([
            r.scenario_delay_ms.to_string(),
            r.metric.to_string(),
            r.index.to_string(),
            r.value_us.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "scenario_delay_ms",
        "metric",
        "count",
        "mean_us",
        "p95_us",
        "max_us",
        "max_index",
        "reference_us",
    ])?;
    for r in rows {
        w.write_record([
            r.scenario_delay_ms.to_string(),
            r.metric.to_string(),
            r.count.to_string(),
            format!("{:.3}", r.mean_us),
            r.p95_us.to_string(),
            r.max_us.to_string(),
            r.max_index.to_string(),
            r.reference_us.map(|v| format!("{v:.0}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchOutput {
    pub runs: Vec<BenchRun>,
    pub summary: Vec<SummaryRow>,
    pub files: Vec<PathBuf>,
}

/// Runs each scenario on its own fresh pipeline and writes
/// `scenario_{delay}.csv` per run plus `summary.csv` into `out_dir`.
pub fn run_bench(scenarios: &[BenchScenario], out_dir: &Path) -> Result<BenchOutput, BenchError> {
    std::fs::create_dir_all(out_dir)?;
    let mut runs = Vec::new();
    let mut files = Vec::new();
    for s in scenarios {
        let pipeline = fresh_pipeline(s, Vec::new());
        let run = run_scenario(&pipeline, s)?;
        let path = out_dir.join(format!("scenario_{}.csv", s.delay_ms));
        write_records_csv(&path, &run.records)?;
        files.push(path);
        tracing::info!(delay_ms = s.delay_ms, injection = run.injection_index, elapsed_ms = run.elapsed_ms, "scenario done");
        runs.push(run);
    }
    let all: Vec<BenchRecord> = runs.iter().flat_map(|r| r.records.iter().cloned()).collect();
    let summary = summarize(&all)?;
    let path = out_dir.join("summary.csv");
    write_summary_csv(&path, &summary)?;
    files.push(path);
    Ok(BenchOutput { runs, summary, files })
}
