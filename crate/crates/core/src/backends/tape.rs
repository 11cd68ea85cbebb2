//! Tape stage-in model with disk footprint accounting.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BackendError, DdmBackend, FileEntry, ResolveContext, StageState};
use crate::clock::{secs, Millis};
use crate::model::CollectionSpec;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapeFile {
    pub name: String,
    pub size_bytes: u64,
}

/// Stage-completion times, in seconds from t0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StageSchedule {
    Explicit(BTreeMap<String, f64>),
    /// The file in tape slot `k` (a seeded shuffle of the file list) lands
    /// at `(k + 1) / files_per_second`.
    Rate { files_per_second: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapeSimConfig {
    pub scope: String,
    pub dataset: String,
    pub files: Vec<TapeFile>,
    pub schedule: StageSchedule,
    #[serde(default)]
    pub seed: u64,
}

impl TapeSimConfig {
    /// `n` files of `size_bytes` each, named `f00000`, `f00001`, ...
    pub fn uniform(scope: &str, dataset: &str, n: usize, size_bytes: u64, files_per_second: f64, seed: u64) -> Self {
        Self {
            scope: scope.to_string(),
            dataset: dataset.to_string(),
            files: (0..n)
                .map(|i| TapeFile {
                    name: format!("f{i:05}"),
                    size_bytes,
                })
                .collect(),
            schedule: StageSchedule::Rate { files_per_second },
            seed,
        }
    }

    pub fn explicit(scope: &str, dataset: &str, files: &[(&str, u64, f64)]) -> Self {
        Self {
            scope: scope.to_string(),
            dataset: dataset.to_string(),
            files: files
                .iter()
                .map(|(n, s, _)| TapeFile {
                    name: n.to_string(),
                    size_bytes: *s,
                })
                .collect(),
            schedule: StageSchedule::Explicit(
                files.iter().map(|(n, _, t)| (n.to_string(), *t)).collect(),
            ),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match &self.schedule {
            StageSchedule::Explicit(m) => {
                for f in &self.files {
                    match m.get(&f.name) {
                        Some(t) if t.is_finite() && *t >= 0.0 => {}
                        Some(t) => return Err(format!("stage time {t} of `{}` is invalid", f.name)),
                        None => return Err(format!("no stage time for `{}`", f.name)),
                    }
                }
            }
            StageSchedule::Rate { files_per_second } => {
                if !(files_per_second.is_finite() && *files_per_second > 0.0) {
                    return Err(format!("files_per_second {files_per_second} must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Stage-completion time of every file, in file order.
    pub fn stage_times(&self) -> Vec<Millis> {
        match &self.schedule {
            StageSchedule::Explicit(m) => self
                .files
                .iter()
                .map(|f| secs(m.get(&f.name).copied().unwrap_or(f64::INFINITY)))
                .collect(),
            StageSchedule::Rate { files_per_second } => {
                let mut slots: Vec<usize> = (0..self.files.len()).collect();
                slots.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
                let mut times = vec![0; self.files.len()];
                for (slot, &file) in slots.iter().enumerate() {
                    times[file] = rate_time(slot, *files_per_second);
                }
                times
            }
        }
    }
}

/// Landing time of tape slot `slot` under a uniform rate, in ms.
fn rate_time(slot: usize, files_per_second: f64) -> Millis {
    ((slot as f64 + 1.0) * 1000.0 / files_per_second).round() as Millis
}

/// Disk occupancy summary.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub peak_bytes: u64,
    pub byte_seconds: u64,
    /// Occupancy after all changes at each instant, in time order.
    pub series: Vec<(Millis, u64)>,
}

#[derive(Debug, Clone)]
struct FileState {
    size_bytes: u64,
    staged_at: Millis,
    released_at: Option<Millis>,
}

/// One tape-resident dataset staged to disk on a fixed schedule.
#[derive(Debug, Clone)]
pub struct TapeSim {
    config: TapeSimConfig,
    files: BTreeMap<String, FileState>,
    by_did: HashMap<String, String>,
    /// Stage times, sorted.
    times: Vec<Millis>,
    requested: bool,
}

impl TapeSim {
    pub fn new(config: TapeSimConfig) -> Result<Self, String> {
        config.validate()?;
        let times = config.stage_times();
        let mut files = BTreeMap::new();
        let mut by_did = HashMap::new();
        for (f, t) in config.files.iter().zip(&times) {
            files.insert(
                f.name.clone(),
                FileState {
                    size_bytes: f.size_bytes,
                    staged_at: *t,
                    released_at: None,
                },
            );
            by_did.insert(
                CollectionSpec::did(&config.scope, &config.dataset, &f.name),
                f.name.clone(),
            );
        }
        let mut sorted = times;
        sorted.sort_unstable();
        Ok(Self {
            config,
            files,
            by_did,
            times: sorted,
            requested: false,
        })
    }

    pub fn config(&self) -> &TapeSimConfig {
        &self.config
    }

    pub fn staged_at(&self, file: &str) -> Option<Millis> {
        self.files.get(file).map(|f| f.staged_at)
    }

    pub fn released_at(&self, file: &str) -> Option<Millis> {
        self.files.get(file).and_then(|f| f.released_at)
    }

    pub fn total_bytes(&self) -> u64 {
        self.files.values().map(|f| f.size_bytes).sum()
    }

    /// Time the last file lands.
    pub fn last_stage_time(&self) -> Millis {
        self.times.last().copied().unwrap_or(0)
    }

    /// Occupancy over `[0, end]`: a file holds its bytes from its stage time
    /// until its release (or `end`). At an instant where one file leaves and
    /// another lands, the departure counts first.
    pub fn footprint(&self, end: Millis) -> Footprint {
        let mut deltas: BTreeMap<Millis, i128> = BTreeMap::new();
        let mut byte_ms: u128 = 0;
        for f in self.files.values() {
            if f.staged_at > end {
                continue;
            }
            let gone = f.released_at.unwrap_or(end).clamp(f.staged_at, end);
            if gone == f.staged_at {
                continue;
            }
            *deltas.entry(f.staged_at).or_default() += f.size_bytes as i128;
            *deltas.entry(gone).or_default() -= f.size_bytes as i128;
            byte_ms += f.size_bytes as u128 * (gone - f.staged_at) as u128;
        }
        let mut level: i128 = 0;
        let mut peak = 0u64;
        let mut series = Vec::with_capacity(deltas.len());
        for (t, d) in deltas {
            level += d;
            debug_assert!(level >= 0);
            peak = peak.max(level as u64);
            series.push((t, level as u64));
        }
        Footprint {
            peak_bytes: peak,
            byte_seconds: (byte_ms / 1000) as u64,
            series,
        }
    }

    fn check(&self, scope: &str, name: &str) -> Result<(), BackendError> {
        if scope == self.config.scope && name == self.config.dataset {
            Ok(())
        } else {
            Err(BackendError::UnknownDataset {
                scope: scope.to_string(),
                name: name.to_string(),
            })
        }
    }
}

impl DdmBackend for TapeSim {
    fn resolve_collection(&mut self, scope: &str, name: &str, _ctx: &ResolveContext) -> Result<Vec<FileEntry>, BackendError> {
        self.check(scope, name)?;
        self.requested = true;
        Ok(self
            .config
            .files
            .iter()
            .map(|f| FileEntry::new(&f.name, f.size_bytes))
            .collect())
    }

    fn stage_status(&mut self, scope: &str, name: &str, file: &str, now: Millis) -> Result<StageState, BackendError> {
        self.check(scope, name)?;
        let f = self.files.get(file).ok_or_else(|| {
            BackendError::Rejected(format!("no file `{file}` in {scope}:{name}"))
        })?;
        Ok(if now >= f.staged_at {
            StageState::OnDisk
        } else if self.requested {
            StageState::Staging
        } else {
            StageState::OnTape
        })
    }

    fn release(&mut self, scope: &str, name: &str, file: &str, now: Millis) -> Result<(), BackendError> {
        self.check(scope, name)?;
        if let Some(f) = self.files.get_mut(file) {
            if f.released_at.is_none() && now >= f.staged_at {
                f.released_at = Some(now);
            }
        }
        Ok(())
    }

    fn ready_at(&self, did: &str) -> Option<Millis> {
        self.by_did.get(did).and_then(|f| self.staged_at(f))
    }

    fn next_event_time(&self, now: Millis) -> Option<Millis> {
        if !self.requested {
            return None;
        }
        let i = self.times.partition_point(|t| *t <= now);
        self.times.get(i).copied()
    }
}
