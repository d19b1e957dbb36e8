use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context as _;
use clap::{Parser, Subcommand};
use provgate::config::GatewayConfig;
use provgate_core::bench::{run_bench, BenchScenario, DEFAULT_DELAYS_MS};
use provgate_core::ledger::TxKind;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "provgate", version, about = "Provenance-checked IoT transaction gateway")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Remote {
    /// Gateway base URL.
    #[arg(long, env = "PROVGATE_URL", default_value = "http://127.0.0.1:8080")]
    url: String,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP gateway.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Submit a transaction.
    Submit {
        #[command(flatten)]
        remote: Remote,
        #[arg(long)]
        device: String,
        /// read, config_update, firmware_update or actuator_command
        #[arg(long, default_value = "read")]
        kind: String,
        /// Repeatable `key=value`.
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, String)>,
        #[arg(long)]
        tx_id: Option<String>,
        #[arg(long)]
        issuer: Option<String>,
    },
    /// Mine and evaluate the pending pool (manual mining mode).
    Mine {
        #[command(flatten)]
        remote: Remote,
    },
    /// List transactions held for verification.
    Pending {
        #[command(flatten)]
        remote: Remote,
        /// awaiting, decided or expired
        #[arg(long)]
        state: Option<String>,
    },
    /// Approve or revoke a held transaction.
    Decide {
        #[command(flatten)]
        remote: Remote,
        #[arg(long, env = "PROVGATE_TOKEN", hide_env_values = true)]
        token: String,
        pending_id: String,
        /// approve or revoke
        decision: String,
    },
    /// Run the latency experiment locally and write CSV files.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_DELAYS_MS.to_vec())]
        delays: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        devices: usize,
    },
    /// Check chain integrity.
    ValidateChain {
        #[command(flatten)]
        remote: Remote,
    },
}

fn parse_param(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn call(req: reqwest::blocking::RequestBuilder) -> anyhow::Result<Value> {
    let resp = req.send().context("gateway unreachable")?;
    let status = resp.status();
    let body: Value = resp.json().unwrap_or(Value::Null);
    if !status.is_success() {
        anyhow::bail!("{status}: {}", serde_json::to_string(&body)?);
    }
    Ok(body)
}

fn run(cli: Cli) -> anyhow::Result<Option<Value>> {
    let http = reqwest::blocking::Client::new();
    let out = match cli.command {
        Command::Serve { config } => {
            let cfg = match config {
                Some(path) => GatewayConfig::load(&path)?,
                None => {
                    let mut cfg = GatewayConfig::default();
                    cfg.apply_env(|k| std::env::var(k).ok())?;
                    cfg
                }
            };
            serve(cfg)?;
            None
        }
        Command::Submit {
            remote,
            device,
            kind,
            params,
            tx_id,
            issuer,
        } => {
            let kind = TxKind::parse(&kind).with_context(|| format!("unknown kind {kind}"))?;
            let params: serde_json::Map<String, Value> =
                params.into_iter().map(|(k, v)| (k, Value::String(v))).collect();
            let mut body = json!({ "device_id": device, "kind": kind, "params": params });
            if let Some(id) = tx_id {
                body["tx_id"] = json!(id);
            }
            if let Some(i) = issuer {
                body["issuer"] = json!(i);
            }
            Some(call(http.post(format!("{}/transactions", remote.url)).json(&body))?)
        }
        Command::Mine { remote } => Some(call(http.post(format!("{}/mine", remote.url)))?),
        Command::Pending { remote, state } => {
            let url = match state {
                Some(s) => format!("{}/pending?state={s}", remote.url),
                None => format!("{}/pending", remote.url),
            };
            Some(call(http.get(url))?)
        }
        Command::Decide {
            remote,
            token,
            pending_id,
            decision,
        } => Some(call(
            http.post(format!("{}/pending/{pending_id}/decision", remote.url))
                .bearer_auth(token)
                .json(&json!({ "decision": decision })),
        )?),
        Command::Bench {
            delays,
            seed,
            out,
            devices,
        } => {
            let scenarios: Vec<BenchScenario> = delays
                .iter()
                .map(|&d| BenchScenario {
                    devices,
                    ..BenchScenario::new(d, seed)
                })
                .collect();
            let result = run_bench(&scenarios, &out)?;
            println!("{:>9} {:<22} {:>6} {:>12} {:>10} {:>10} {:>9}", "delay_ms", "metric", "count", "mean_us", "p95_us", "max_us", "max_idx");
            for r in &result.summary {
                println!(
                    "{:>9} {:<22} {:>6} {:>12.1} {:>10} {:>10} {:>9}",
                    r.scenario_delay_ms, r.metric, r.count, r.mean_us, r.p95_us, r.max_us, r.max_index
                );
            }
            for run in &result.runs {
                println!("delay {} ms: config update injected at input {}", run.scenario.delay_ms, run.injection_index);
            }
            for f in &result.files {
                println!("wrote {}", f.display());
            }
            None
        }
        Command::ValidateChain { remote } => Some(call(http.get(format!("{}/chain/validate", remote.url)))?),
    };
    Ok(out)
}

fn serve(cfg: GatewayConfig) -> anyhow::Result<()> {
    let gateway = provgate::app::build(&cfg)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((cfg.http_host.as_str(), cfg.http_port))
            .await
            .with_context(|| format!("binding {}:{}", cfg.http_host, cfg.http_port))?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        provgate::server::serve(
            listener,
            gateway.pipeline.clone(),
            cfg.mining_mode,
            Duration::from_millis(cfg.tick_interval_ms),
            shutdown,
        )
        .await?;
        drop(gateway);
        Ok(())
    })
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(Some(v)) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
