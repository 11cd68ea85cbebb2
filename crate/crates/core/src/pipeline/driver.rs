use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::{
    Backends, Carrier, Clerk, Conductor, DaemonConfig, Marshaller, PipelineError, PipelineStats,
    Transformer, Transport,
};
use crate::clock::{Millis, VirtualClock};
use crate::store::{Request, Store, StoreError, StoreResult};

/// One daemon's unit of work.
pub trait Daemon: Send {
    fn name(&self) -> &'static str;
    fn step(&mut self) -> StoreResult<usize>;
}

macro_rules! daemon {
    ($ty:ty, $name:literal) => {
        impl Daemon for $ty {
            fn name(&self) -> &'static str {
                $name
            }
            fn step(&mut self) -> StoreResult<usize> {
                <$ty>::step(self)
            }
        }
    };
}

daemon!(Clerk, "clerk");
daemon!(Marshaller, "marshaller");
daemon!(Transformer, "transformer");
daemon!(Carrier, "carrier");
daemon!(Conductor, "conductor");

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DriverStats {
    pub rounds: u64,
    /// Entity images written while the driver ran.
    pub writes: u64,
    pub end_time: Millis,
}

fn daemons(
    store: &Store,
    backends: &Backends,
    transport: Arc<dyn Transport>,
    cfg: &DaemonConfig,
    stats: &Arc<PipelineStats>,
    suffix: bool,
) -> Vec<Box<dyn Daemon>> {
    let c = |name: &str| {
        let mut c = cfg.clone();
        if suffix {
            c.worker_id = format!("{}/{name}", cfg.worker_id);
        }
        c
    };
    vec![
        Box::new(Clerk::new(store.clone(), c("clerk"), stats.clone())),
        Box::new(Marshaller::new(store.clone(), c("marshaller"), stats.clone())),
        Box::new(Transformer::new(store.clone(), c("transformer"), stats.clone(), backends.clone())),
        Box::new(Carrier::new(store.clone(), c("carrier"), stats.clone(), backends.clone())),
        Box::new(Conductor::new(store.clone(), c("conductor"), stats.clone(), transport)),
    ]
}

/// Consecutive unproductive poll intervals a virtual run waits out before
/// declaring the remaining requests stuck.
pub const IDLE_POLLS: u32 = 10;

/// All five daemons stepped in order on the caller's thread.
pub struct Pipeline {
    store: Store,
    poll_interval: Millis,
    backends: Backends,
    daemons: Vec<Box<dyn Daemon>>,
    stats: Arc<PipelineStats>,
    rounds: u64,
}

impl Pipeline {
    pub fn new(store: Store, backends: Backends, transport: Arc<dyn Transport>, cfg: DaemonConfig) -> Self {
        let stats = Arc::new(PipelineStats::default());
        let daemons = daemons(&store, &backends, transport, &cfg, &stats, false);
        Self {
            poll_interval: cfg.poll_interval,
            store,
            backends,
            daemons,
            stats,
            rounds: 0,
        }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn stats(&self) -> Arc<PipelineStats> {
        self.stats.clone()
    }

    /// One step of every daemon. Returns the entity images written.
    pub fn round(&mut self) -> Result<u64, PipelineError> {
        let before = self.store.write_seq();
        for d in &mut self.daemons {
            d.step()?;
        }
        self.rounds += 1;
        Ok(self.store.write_seq() - before)
    }

    /// Rounds until one writes nothing.
    pub fn run_until_quiescent(&mut self, max_rounds: u64) -> Result<u64, PipelineError> {
        for i in 0..max_rounds {
            if self.round()? == 0 {
                return Ok(i + 1);
            }
        }
        Err(PipelineError::Stalled(max_rounds))
    }

    /// Earliest future instant at which some backend or lease changes state.
    pub fn next_event_time(&self) -> Option<Millis> {
        let now = self.store.now();
        let ddm = self.backends.ddm.lock().next_event_time(now);
        let wfm = self.backends.wfm.lock().next_event_time(now);
        let lease = self.store.next_lease_expiry();
        [ddm, wfm, lease]
            .into_iter()
            .flatten()
            .filter(|&t| t > now)
            .min()
    }

    fn open_requests(&self) -> StoreResult<usize> {
        Ok(self.store.count_by::<Request>("status:New")?
            + self.store.count_by::<Request>("status:Transforming")?)
    }

    /// Discrete-event run: settle, jump the clock to the next backend event,
    /// repeat until nothing is scheduled. While requests are still open and
    /// nothing is scheduled (a backend call failed and must be retried) the
    /// clock moves one poll interval at a time, at most [`IDLE_POLLS`] times
    /// in a row.
    pub fn run_virtual(&mut self, clock: &VirtualClock, max_rounds: u64) -> Result<DriverStats, PipelineError> {
        let start_rounds = self.rounds;
        let start_writes = self.store.write_seq();
        let mut idle = 0;
        loop {
            let budget = max_rounds.saturating_sub(self.rounds - start_rounds);
            if budget == 0 {
                return Err(PipelineError::Stalled(max_rounds));
            }
            let before = self.store.write_seq();
            self.run_until_quiescent(budget)?;
            if self.store.write_seq() != before {
                idle = 0;
            }
            match self.next_event_time() {
                Some(t) => {
                    clock.advance_to(t);
                }
                None if idle < IDLE_POLLS && self.open_requests()? > 0 => {
                    idle += 1;
                    clock.advance(self.poll_interval);
                }
                None => break,
            }
        }
        Ok(DriverStats {
            rounds: self.rounds - start_rounds,
            writes: self.store.write_seq() - start_writes,
            end_time: self.store.now(),
        })
    }

    /// Fixed-step run: one round per tick until `done` holds.
    pub fn run_ticks(
        &mut self,
        clock: &VirtualClock,
        tick: Millis,
        mut done: impl FnMut(&Store) -> bool,
        max_ticks: u64,
    ) -> Result<DriverStats, PipelineError> {
        if tick == 0 {
            return Err(PipelineError::Config("tick must be positive".into()));
        }
        let start_rounds = self.rounds;
        let start_writes = self.store.write_seq();
        let mut ticks = 0;
        while !done(&self.store) {
            if ticks >= max_ticks {
                return Err(PipelineError::Stalled(max_ticks));
            }
            self.round()?;
            clock.advance(tick);
            ticks += 1;
        }
        Ok(DriverStats {
            rounds: self.rounds - start_rounds,
            writes: self.store.write_seq() - start_writes,
            end_time: self.store.now(),
        })
    }
}

/// Daemon threads running against the wall clock.
pub struct PipelineHandle {
    shutdown: Arc<AtomicBool>,
    threads: Vec<JoinHandle<u64>>,
    stats: Arc<PipelineStats>,
    store: Store,
}

impl PipelineHandle {
    pub fn stats(&self) -> Arc<PipelineStats> {
        self.stats.clone()
    }

    /// Signals every daemon, waits for each to finish its current step and
    /// drop its leases.
    pub fn stop(mut self) -> DriverStats {
        self.shutdown.store(true, Ordering::SeqCst);
        let rounds = self
            .threads
            .drain(..)
            .map(|t| t.join().unwrap_or(0))
            .sum();
        DriverStats {
            rounds,
            writes: self.store.write_seq(),
            end_time: self.store.now(),
        }
    }
}

impl Drop for PipelineHandle {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// Starts one thread per daemon. A panicking step is counted and retried
/// on the next poll; a crashed store stops the daemon.
pub fn run_pipeline(
    store: Store,
    backends: Backends,
    transport: Arc<dyn Transport>,
    cfg: DaemonConfig,
) -> Result<PipelineHandle, PipelineError> {
    cfg.validate().map_err(PipelineError::Config)?;
    let stats = Arc::new(PipelineStats::default());
    let shutdown = Arc::new(AtomicBool::new(false));
    let mut threads = Vec::new();
    for (d, worker) in daemons(&store, &backends, transport, &cfg, &stats, true)
        .into_iter()
        .zip(["clerk", "marshaller", "transformer", "carrier", "conductor"])
    {
        let worker = format!("{}/{worker}", cfg.worker_id);
        let store = store.clone();
        let stats = stats.clone();
        let shutdown = shutdown.clone();
        let interval = cfg.poll_interval;
        let t = std::thread::Builder::new()
            .name(d.name().to_string())
            .spawn(move || daemon_loop(d, store, worker, stats, shutdown, interval))
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        threads.push(t);
    }
    Ok(PipelineHandle {
        shutdown,
        threads,
        stats,
        store,
    })
}

fn daemon_loop(
    mut d: Box<dyn Daemon>,
    store: Store,
    worker: String,
    stats: Arc<PipelineStats>,
    shutdown: Arc<AtomicBool>,
    interval: Millis,
) -> u64 {
    let mut steps = 0;
    while !shutdown.load(Ordering::SeqCst) {
        let started = std::time::Instant::now();
        match catch_unwind(AssertUnwindSafe(|| d.step())) {
            Ok(Ok(_)) => {}
            Ok(Err(StoreError::Crashed)) => {
                tracing::error!(daemon = d.name(), "store crashed, daemon stopping");
                return steps;
            }
            Ok(Err(e)) => {
                stats.step_errors.fetch_add(1, Ordering::Relaxed);
                tracing::warn!(daemon = d.name(), error = %e, "step failed");
            }
            Err(_) => {
                stats.step_panics.fetch_add(1, Ordering::Relaxed);
                tracing::error!(daemon = d.name(), "step panicked");
            }
        }
        steps += 1;
        tracing::trace!(daemon = d.name(), duration_ms = started.elapsed().as_millis() as u64);
        // Sleep in short slices so shutdown is prompt.
        let mut left = interval;
        while left > 0 && !shutdown.load(Ordering::SeqCst) {
            let slice = left.min(10);
            std::thread::sleep(Duration::from_millis(slice));
            left -= slice;
        }
    }
    let _ = store.release_all(&worker);
    steps
}
