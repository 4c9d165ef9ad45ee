//! Injectable clocks. Everything time-dependent reads `now()` from one of
//! these, so tests and simulations run on virtual time.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use deployr_core::time;
use deployr_core::Timestamp;

pub trait Clock: Send + Sync + std::fmt::Debug {
    fn now(&self) -> Timestamp;
}

/// Second-resolution clock that only moves when told to.
#[derive(Debug, Clone)]
pub struct VirtualClock(Arc<AtomicI64>);

impl VirtualClock {
    pub fn new(start: Timestamp) -> Self {
        Self(Arc::new(AtomicI64::new(start.timestamp())))
    }

    pub fn set(&self, t: Timestamp) {
        self.0.store(t.timestamp(), Ordering::SeqCst);
    }

    pub fn advance(&self, by: chrono::TimeDelta) {
        self.0.fetch_add(by.num_seconds(), Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Timestamp {
        time::from_unix(self.0.load(Ordering::SeqCst))
    }
}

/// Wall time shifted so that it starts at `origin`.
#[derive(Debug, Clone)]
pub struct WallClock {
    origin: Timestamp,
    started: std::time::Instant,
}

impl WallClock {
    pub fn starting_at(origin: Timestamp) -> Self {
        Self { origin, started: std::time::Instant::now() }
    }
}

impl Clock for WallClock {
    fn now(&self) -> Timestamp {
        let secs = self.started.elapsed().as_secs() as i64;
        self.origin + chrono::TimeDelta::seconds(secs)
    }
}

pub type SharedClock = Arc<dyn Clock>;
