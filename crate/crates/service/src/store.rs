//! Trial persistence: one directory per trial holding a creation header, an
//! append-only `events.jsonl` and a periodic `snapshot.json`. Trials are rebuilt
//! by replaying their events and cross-checked against the snapshot.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use ci3p3_core::engine::{CohortRecord, StepReport, TrialDocument};
use ci3p3_core::{DcCoord, Design, DesignParams, DoseGrid, Error as CoreError, Recommendation, Trial};
use rand::Rng;
use serde::{Deserialize, Serialize};

const HEADER_FORMAT: &str = "ci3p3/service-trial";
/// Snapshot after this many accepted cohorts.
const SNAPSHOT_EVERY: u64 = 10;

#[derive(Debug)]
pub enum StoreError {
    NotFound(String),
    VersionConflict { expected: u64, actual: u64 },
    NotRecommended { recommended: Recommendation, requested: DcCoord },
    Engine(CoreError),
    Io(io::Error),
}

impl From<CoreError> for StoreError {
    fn from(e: CoreError) -> Self {
        StoreError::Engine(e)
    }
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        StoreError::Io(e)
    }
}

impl std::fmt::Display for StoreError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StoreError::NotFound(id) => write!(f, "no trial with id {id:?}"),
            StoreError::VersionConflict { expected, actual } => {
                write!(f, "trial is at version {actual}, request expected {expected}")
            }
            StoreError::NotRecommended { recommended, requested } => match recommended {
                Recommendation::Assign(dc) => {
                    write!(f, "cohort at {requested} but the recommendation is {dc}; set override to proceed")
                }
                Recommendation::Stop(_) => write!(f, "trial has stopped"),
            },
            StoreError::Engine(e) => write!(f, "{e}"),
            StoreError::Io(e) => write!(f, "storage error: {e}"),
        }
    }
}

impl std::error::Error for StoreError {}

pub type StoreResult<T> = Result<T, StoreError>;

/// An accepted cohort and the version it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub version: u64,
    /// Milliseconds since the Unix epoch.
    pub at_ms: u64,
    #[serde(flatten)]
    pub record: CohortRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    id: String,
    created_at_ms: u64,
    grid: DoseGrid,
    params: DesignParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Snapshot {
    version: u64,
    trial: TrialDocument,
}

#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub id: String,
    pub version: u64,
    pub created_at_ms: u64,
    pub trial: Trial,
    pub events: Vec<Event>,
}

pub struct Store {
    dir: PathBuf,
    trials: RwLock<HashMap<String, Arc<RwLock<TrialRecord>>>>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

fn integrity(id: &str, msg: impl std::fmt::Display) -> StoreError {
    StoreError::Engine(CoreError::Integrity(format!("trial {id}: {msg}")))
}

impl Store {
    /// Opens (creating if needed) a data directory and loads every trial in it.
    pub fn open(dir: impl Into<PathBuf>) -> StoreResult<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut trials = HashMap::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.join("trial.json").is_file() {
                let record = load_trial(&path)?;
                trials.insert(record.id.clone(), Arc::new(RwLock::new(record)));
            }
        }
        Ok(Self { dir, trials: RwLock::new(trials) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.trials.read().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn create(&self, grid: DoseGrid, params: DesignParams) -> StoreResult<TrialRecord> {
        let design = Arc::new(Design::new(grid, params.clone())?);
        let mut trials = self.trials.write().unwrap();
        let id = loop {
            let id = format!("{:016x}", rand::rng().random::<u64>());
            if !trials.contains_key(&id) {
                break id;
            }
        };
        let header = Header { format: HEADER_FORMAT.into(), id: id.clone(), created_at_ms: now_ms(), grid, params };
        let path = self.dir.join(&id);
        fs::create_dir_all(&path)?;
        File::create(path.join("events.jsonl"))?;
        write_atomic(&path.join("trial.json"), &serde_json::to_string_pretty(&header).expect("header serializes"))?;
        let record = TrialRecord { id: id.clone(), version: 0, created_at_ms: header.created_at_ms, trial: Trial::new(design), events: Vec::new() };
        trials.insert(id, Arc::new(RwLock::new(record.clone())));
        Ok(record)
    }

    fn entry(&self, id: &str) -> StoreResult<Arc<RwLock<TrialRecord>>> {
        self.trials.read().unwrap().get(id).cloned().ok_or_else(|| StoreError::NotFound(id.to_string()))
    }

    /// A consistent copy of the trial.
    pub fn get(&self, id: &str) -> StoreResult<TrialRecord> {
        Ok(self.entry(id)?.read().unwrap().clone())
    }

    /// Records a cohort if `expected_version` is current. Placing it anywhere but
    /// the recommendation requires `allow_override`.
    pub fn record(
        &self,
        id: &str,
        dc: DcCoord,
        dlt: u32,
        expected_version: u64,
        allow_override: bool,
    ) -> StoreResult<(TrialRecord, StepReport)> {
        let entry = self.entry(id)?;
        let mut rec = entry.write().unwrap();
        if rec.version != expected_version {
            return Err(StoreError::VersionConflict { expected: expected_version, actual: rec.version });
        }
        let recommended = rec.trial.next_assignment();
        if let Recommendation::Assign(r) = recommended {
            if r != dc && !allow_override {
                return Err(StoreError::NotRecommended { recommended, requested: dc });
            }
        }
        let mut next = rec.trial.clone();
        next.record_cohort(dc, dlt)?;
        let record = *next.state().log.last().expect("cohort recorded");
        let event = Event { version: rec.version + 1, at_ms: now_ms(), record };

        let path = self.dir.join(id);
        let mut log = OpenOptions::new().append(true).open(path.join("events.jsonl"))?;
        writeln!(log, "{}", serde_json::to_string(&event).expect("event serializes"))?;
        log.sync_data()?;

        rec.trial = next;
        rec.version = event.version;
        rec.events.push(event);
        if rec.version % SNAPSHOT_EVERY == 0 || rec.trial.next_assignment().dc().is_none() {
            let snap = Snapshot { version: rec.version, trial: rec.trial.to_document() };
            write_atomic(&path.join("snapshot.json"), &serde_json::to_string(&snap).expect("snapshot serializes"))?;
        }
        let step = rec.trial.last_step().cloned().expect("step recorded");
        Ok((rec.clone(), step))
    }
}

fn load_trial(path: &Path) -> StoreResult<TrialRecord> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let header: Header = serde_json::from_str(&fs::read_to_string(path.join("trial.json"))?)
        .map_err(|e| integrity(&name, format!("unreadable header: {e}")))?;
    if header.format != HEADER_FORMAT || header.id != name {
        return Err(integrity(&name, "header does not match its directory"));
    }
    let design = Arc::new(Design::new(header.grid, header.params.clone())?);

    let mut events = Vec::new();
    let file = File::open(path.join("events.jsonl"))?;
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = serde_json::from_str(&line).map_err(|e| integrity(&name, format!("event line {}: {e}", k + 1)))?;
        if event.version != events.len() as u64 + 1 {
            return Err(integrity(&name, format!("event line {} has version {}", k + 1, event.version)));
        }
        events.push(event);
    }
    let log: Vec<CohortRecord> = events.iter().map(|e| e.record).collect();
    let seed = header.params.rng_seed;
    let trial = Trial::replay(Arc::clone(&design), seed, &log).map_err(|e| integrity(&name, e))?;

    let snap_path = path.join("snapshot.json");
    if snap_path.is_file() {
        let snap: Snapshot = serde_json::from_str(&fs::read_to_string(&snap_path)?)
            .map_err(|e| integrity(&name, format!("unreadable snapshot: {e}")))?;
        let upto = snap.version as usize;
        if upto > log.len() {
            return Err(integrity(&name, "snapshot is ahead of the event log"));
        }
        let at_snapshot = Trial::replay(design, seed, &log[..upto]).map_err(|e| integrity(&name, e))?;
        if at_snapshot.state() != &snap.trial.state {
            return Err(integrity(&name, "snapshot disagrees with the event log"));
        }
    }
    Ok(TrialRecord { id: header.id, version: events.len() as u64, created_at_ms: header.created_at_ms, trial, events })
}
