//! On-disk run state.
//!
//! ```text
//! <dir>/config.json     RunConfig, written once
//! <dir>/records.jsonl   one TrainedRecord per line, append-only
//! <dir>/rng.json        progress marker: iteration, record count, RNG, completion
//! <dir>/predictions/    prediction cache
//! <dir>/LOCK            present while a process owns the directory
//! ```
//!
//! Records are appended before `rng.json` is replaced, so after a crash the
//! records file can hold a few lines past the marker. Those lines belong to
//! an uncommitted batch and are dropped on open.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EngineError, RunConfig, SearchState, TrainedRecord};
use crate::avec::FeatureLayout;
use crate::distill::PredictionCache;
use crate::search_space::canonical_id;

pub const CONFIG_FILE: &str = "config.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const RNG_FILE: &str = "rng.json";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const LOCK_FILE: &str = "LOCK";

#[derive(Debug, Serialize, Deserialize)]
struct Progress {
    iteration: usize,
    records: usize,
    complete: bool,
    rng: ChaCha8Rng,
}

/// Exclusive handle on a state directory. The lock is released on drop.
#[derive(Debug)]
pub struct StateStore {
    dir: PathBuf,
    cache: PredictionCache,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EngineError + '_ {
    move |source| EngineError::Io { path: path.to_owned(), source }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EngineError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn integrity(files: &[&str], reason: impl Into<String>) -> EngineError {
    EngineError::Integrity { files: files.iter().map(|f| f.to_string()).collect(), reason: reason.into() }
}

impl StateStore {
    fn lock(dir: &Path) -> Result<Self, EngineError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let cache = PredictionCache::open(dir.join(PREDICTIONS_DIR))?;
        let lock = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => return Err(EngineError::Locked(dir.to_owned())),
            Err(e) => return Err(EngineError::Io { path: lock, source: e }),
        }
        Ok(Self { dir: dir.to_owned(), cache })
    }

    /// Initializes a fresh directory for `state`.
    pub fn create(dir: &Path, state: &SearchState) -> Result<Self, EngineError> {
        if dir.join(CONFIG_FILE).exists() {
            return Err(EngineError::Exists(dir.to_owned()));
        }
        let store = Self::lock(dir)?;
        let config = serde_json::to_vec_pretty(&state.config).expect("config serializes");
        write_atomic(&store.path(CONFIG_FILE), &config)?;
        let records = store.path(RECORDS_FILE);
        File::create(&records).map_err(io_err(&records))?;
        store.save_progress(state)?;
        Ok(store)
    }

    /// Locks and loads an existing directory, verifying its contents.
    pub fn open(dir: &Path) -> Result<(Self, SearchState), EngineError> {
        let missing: Vec<&str> =
            [CONFIG_FILE, RNG_FILE, RECORDS_FILE].into_iter().filter(|f| !dir.join(f).is_file()).collect();
        if !missing.is_empty() {
            return Err(integrity(&missing, "missing"));
        }
        let store = Self::lock(dir)?;
        let state = load(dir, true)?;
        Ok((store, state))
    }

    /// Reads the committed state without taking the lock or repairing
    /// anything; a concurrent run's partial batch is ignored.
    pub fn snapshot(dir: &Path) -> Result<SearchState, EngineError> {
        let missing: Vec<&str> =
            [CONFIG_FILE, RNG_FILE, RECORDS_FILE].into_iter().filter(|f| !dir.join(f).is_file()).collect();
        if !missing.is_empty() {
            return Err(integrity(&missing, "missing"));
        }
        load(dir, false)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn cache(&self) -> &PredictionCache {
        &self.cache
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn append_records(&self, records: &[TrainedRecord]) -> Result<(), EngineError> {
        let path = self.path(RECORDS_FILE);
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).expect("record serializes");
            buf.push(b'\n');
        }
        let mut f = OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
        f.write_all(&buf).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))
    }

    pub fn save_progress(&self, state: &SearchState) -> Result<(), EngineError> {
        let progress = Progress {
            iteration: state.iteration,
            records: state.records.len(),
            complete: state.complete,
            rng: state.rng.clone(),
        };
        write_atomic(&self.path(RNG_FILE), &serde_json::to_vec(&progress).expect("progress serializes"))
    }
}

impl Drop for StateStore {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.dir.join(LOCK_FILE));
    }
}

fn load(dir: &Path, repair: bool) -> Result<SearchState, EngineError> {
    let read = |name: &str| fs::read(dir.join(name)).map_err(|e| integrity(&[name], e.to_string()));
    let config: RunConfig = serde_json::from_slice(&read(CONFIG_FILE)?)
        .map_err(|e| integrity(&[CONFIG_FILE], e.to_string()))?;
    let progress: Progress =
        serde_json::from_slice(&read(RNG_FILE)?).map_err(|e| integrity(&[RNG_FILE], e.to_string()))?;

    let path = dir.join(RECORDS_FILE);
    let file = File::open(&path).map_err(|e| integrity(&[RECORDS_FILE], e.to_string()))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| integrity(&[RECORDS_FILE], e.to_string()))?;
        if records.len() == progress.records {
            // Past the committed prefix; a crash left part of a batch.
            log::warn!("dropping uncommitted records from line {} on", i + 1);
            break;
        }
        let rec: TrainedRecord = serde_json::from_str(&line)
            .map_err(|e| integrity(&[RECORDS_FILE], format!("line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    if records.len() < progress.records {
        return Err(integrity(
            &[RECORDS_FILE, RNG_FILE],
            format!("{} records on disk, {} committed", records.len(), progress.records),
        ));
    }
    check_records(&config, &records)?;
    let on_disk = fs::read(&path).map_err(io_err(&path))?;
    let committed: usize = on_disk.split_inclusive(|&b| b == b'\n').take(records.len()).map(<[u8]>::len).sum();
    if repair && committed < on_disk.len() {
        let f = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
        f.set_len(committed as u64).map_err(io_err(&path))?;
    }
    Ok(SearchState {
        config,
        iteration: progress.iteration,
        records,
        rng: progress.rng,
        complete: progress.complete,
    })
}

fn check_records(config: &RunConfig, records: &[TrainedRecord]) -> Result<(), EngineError> {
    let layout = FeatureLayout::new(&config.space)?;
    let mut seen = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        let bad = |why: &str| integrity(&[RECORDS_FILE], format!("record {}: {why}", i + 1));
        let id = canonical_id(&r.spec, &config.space).map_err(|e| bad(&e.to_string()))?;
        if id != r.arch_id {
            return Err(bad("arch_id does not match spec"));
        }
        if layout.encode_unchecked(&r.spec) != r.avec {
            return Err(bad("avec does not match spec"));
        }
        if !r.score.is_finite() {
            return Err(bad("score is not finite"));
        }
        if !seen.insert(&r.arch_id) {
            return Err(bad("duplicate arch_id"));
        }
    }
    if records.len() > config.target_records() {
        return Err(integrity(&[RECORDS_FILE], "more records than the configured budget"));
    }
    Ok(())
}
