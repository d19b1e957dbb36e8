use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

/// Wall-clock source in milliseconds since the Unix epoch.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Manually driven clock for tests and reproducible runs.
#[derive(Debug, Clone, Default)]
pub struct ManualClock {
    now: Arc<AtomicU64>,
}

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self {
            now: Arc::new(AtomicU64::new(start_ms)),
        }
    }

    pub fn set(&self, ms: u64) {
        self.now.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }
}

/// Measures CPU time consumed by the calling thread, so that time spent
/// descheduled does not count. Falls back to wall time where the platform
/// has no per-thread clock.
#[derive(Debug, Clone, Copy)]
pub struct CpuStopwatch {
    cpu: Option<cpu_time::ThreadTime>,
    wall: Instant,
}

impl CpuStopwatch {
    pub fn start() -> Self {
        Self {
            cpu: cpu_time::ThreadTime::try_now().ok(),
            wall: Instant::now(),
        }
    }

    pub fn elapsed_us(&self) -> u64 {
        match self.cpu {
            Some(t) => t.try_elapsed().map(|d| d.as_micros() as u64).unwrap_or_else(|_| self.wall_us()),
            None => self.wall_us(),
        }
    }

    pub fn wall_us(&self) -> u64 {
        self.wall.elapsed().as_micros() as u64
    }
}
