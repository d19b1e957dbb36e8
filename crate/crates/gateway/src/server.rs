//! HTTP serving and the auto-mining ticker.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use provgate_core::pipeline::Pipeline;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::api::{router, AppState};
use crate::config::MiningMode;

/// Runs one pipeline tick every `interval` until the task is aborted.
pub fn spawn_ticker(pipeline: Arc<Pipeline>, interval: Duration) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut every = tokio::time::interval(interval);
        every.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            every.tick().await;
            let p = pipeline.clone();
            match tokio::task::spawn_blocking(move || p.run_tick()).await {
                Ok(Ok(_)) => {}
                Ok(Err(e)) => tracing::error!(error = %e, "pipeline tick failed"),
                Err(e) => tracing::error!(error = %e, "pipeline tick panicked"),
            }
        }
    })
}

pub async fn serve(
    listener: TcpListener,
    pipeline: Arc<Pipeline>,
    mode: MiningMode,
    tick_interval: Duration,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let ticker = (mode == MiningMode::Auto).then(|| spawn_ticker(pipeline.clone(), tick_interval));
    tracing::info!(addr = ?listener.local_addr().ok(), ?mode, "gateway listening");
    let result = axum::serve(listener, router(AppState::new(pipeline, mode)))
        .with_graceful_shutdown(shutdown)
        .await;
    if let Some(t) = ticker {
        t.abort();
    }
    result
}

/// A gateway served from its own runtime thread, for tests and embedding
/// in synchronous code. Stops when dropped.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    stop: tokio::sync::watch::Sender<bool>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn start(pipeline: Arc<Pipeline>, mode: MiningMode, tick_interval: Duration) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = runtime.block_on(TcpListener::bind("127.0.0.1:0"))?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = tokio::sync::watch::channel(false);
        let mut graceful = stopped.clone();
        let mut hard = stopped;
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let shutdown = async move {
                    let _ = graceful.wait_for(|s| *s).await;
                };
                // Idle keep-alive connections can hold a graceful shutdown
                // open; give them a moment, then stop regardless.
                let deadline = async move {
                    let _ = hard.wait_for(|s| *s).await;
                    tokio::time::sleep(Duration::from_millis(500)).await;
                };
                tokio::select! {
                    r = serve(listener, pipeline, mode, tick_interval, shutdown) => {
                        if let Err(e) = r {
                            tracing::error!(error = %e, "background server failed");
                        }
                    }
                    _ = deadline => {}
                }
            });
        });
        Ok(Self {
            addr,
            stop,
            thread: Some(thread),
        })
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        let _ = self.stop.send(true);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
