//! Directory-per-session persistence and the shared, lockable registry
//! the HTTP service and CLI work through.
//!
//! ```text
//! root/
//!   session-1/
//!     events.jsonl     append-only, one Event per line
//!     state.json       derived snapshot, rewritten after each change
//!     models/session-1-m1.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use chrono::DateTime;
use chrono::Utc;

use super::{
    AcceptanceReport, Clock, Event, Round, Session, SessionConfig, SessionError, SnapshotInfo, TrainedModels,
};
use crate::audit::{ConflictItem, ResolutionRequest};
use crate::domain::{
    ingest_incidents, ingest_neighborhoods, ingest_parcels, Dataset, IncidentSchema, ParcelId, ParcelSchema,
    StudyWindow, WeightConfig,
};
use crate::evaluate::{MetricsReport, Validation};
use crate::forest::Label;
use crate::labels::{LabelRecord, Provenance};
use crate::sampler::Mix;
use crate::synth::{INCIDENTS_FILE, NEIGHBORHOODS_FILE, PARCELS_FILE};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const STATE_FILE: &str = "state.json";
pub const MODELS_DIR: &str = "models";
pub const VALIDATIONS_DIR: &str = "validations";

/// A registered dataset and the external validation sets that go with it.
#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub name: String,
    pub dataset: Arc<Dataset>,
    pub validations: Vec<Validation>,
    pub source: Option<PathBuf>,
}

impl DatasetEntry {
    pub fn new(name: impl Into<String>, dataset: Dataset, validations: Vec<Validation>) -> Self {
        DatasetEntry {
            name: name.into(),
            dataset: Arc::new(dataset),
            validations,
            source: None,
        }
    }

    /// Loads a dataset directory in the generator's layout:
    /// `parcels.csv`, `incidents.csv`, optional `neighborhoods.csv`, and
    /// optional `validations/{name}.csv` files.
    ///
    /// A validation file with only a `parcel_id` column lists the positive
    /// set over the whole pool. With a `vad` column (`1`/`0`), the listed
    /// rows are the surveyed scope and the `1` rows the positives.
    pub fn load(name: impl Into<String>, dir: &Path, weights: &WeightConfig) -> Result<Self, SessionError> {
        let parcels = ingest_parcels(&dir.join(PARCELS_FILE), &ParcelSchema::default())?;
        let known: BTreeSet<ParcelId> = parcels.iter().map(|p| p.id.clone()).collect();
        let batch = ingest_incidents(
            &dir.join(INCIDENTS_FILE),
            &IncidentSchema::default(),
            Some(&known),
            &StudyWindow::default(),
        )?;
        let mut ds = Dataset::new(parcels, batch.incidents)?;
        let hoods = dir.join(NEIGHBORHOODS_FILE);
        if hoods.exists() {
            ds = ds.with_neighborhood_stats(ingest_neighborhoods(&hoods)?);
        }
        ds.compute_features(weights)?;
        let mut validations = Vec::new();
        let vdir = dir.join(VALIDATIONS_DIR);
        if vdir.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(&vdir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            files.sort();
            for f in files {
                let vname = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                validations.push(read_validation(&vname, File::open(&f)?)?);
            }
        }
        Ok(DatasetEntry {
            name: name.into(),
            dataset: Arc::new(ds),
            validations,
            source: Some(dir.to_path_buf()),
        })
    }
}

pub fn read_validation<R: std::io::Read>(name: &str, input: R) -> Result<Validation, SessionError> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let id_col = headers
        .iter()
        .position(|h| h == "parcel_id")
        .ok_or_else(|| SessionError::InvalidRecord(format!("validation {name} has no parcel_id column")))?;
    let vad_col = headers.iter().position(|h| h == "vad");
    let mut ids = BTreeSet::new();
    let mut scope = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = ParcelId::new(rec.get(id_col).unwrap_or("").trim());
        let positive = match vad_col.map(|c| rec.get(c).unwrap_or("").trim()) {
            None | Some("1") => true,
            Some("0") => false,
            Some(other) => {
                return Err(SessionError::InvalidRecord(format!(
                    "validation {name}: vad must be 0 or 1, got {other:?}"
                )))
            }
        };
        if positive {
            ids.insert(id.clone());
        }
        scope.insert(id);
    }
    let v = Validation::new(name, ids);
    Ok(if vad_col.is_some() { v.with_scope(scope) } else { v })
}

pub fn write_validation<W: Write>(v: &Validation, out: W) -> Result<(), SessionError> {
    let mut w = csv::Writer::from_writer(out);
    match &v.scope {
        Some(scope) => {
            w.write_record(["parcel_id", "vad"])?;
            for id in scope.iter().chain(v.ids.difference(scope)) {
                w.write_record([id.as_str(), if v.ids.contains(id) { "1" } else { "0" }])?;
            }
        }
        None => {
            w.write_record(["parcel_id"])?;
            for id in &v.ids {
                w.write_record([id.as_str()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// One annotator's label for one parcel, as submitted over the API.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LabelInput {
    pub parcel_id: ParcelId,
    pub label: Label,
    #[serde(default)]
    pub comment: String,
}

type Shared = Arc<Mutex<Session>>;

pub struct SessionStore {
    root: PathBuf,
    clock: Arc<dyn Clock>,
    datasets: RwLock<BTreeMap<String, Arc<DatasetEntry>>>,
    sessions: Mutex<BTreeMap<String, Shared>>,
    /// Serializes session creation so ids stay unique.
    create_lock: Mutex<()>,
}

fn lock(s: &Shared) -> MutexGuard<'_, Session> {
    s.lock().unwrap_or_else(|e| e.into_inner())
}

fn session_of(id: &str, sep: &str) -> Option<String> {
    id.rsplit_once(sep)
        .filter(|(_, n)| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
        .map(|(s, _)| s.to_string())
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Result<Self, SessionError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(SessionStore {
            root,
            clock,
            datasets: RwLock::new(BTreeMap::new()),
            sessions: Mutex::new(BTreeMap::new()),
            create_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn register_dataset(&self, entry: DatasetEntry) {
        self.datasets
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(entry.name.clone(), Arc::new(entry));
    }

    pub fn dataset(&self, name: &str) -> Result<Arc<DatasetEntry>, SessionError> {
        self.datasets
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(name)
            .cloned()
            .ok_or_else(|| SessionError::DatasetMissing(name.to_string()))
    }

    pub fn dataset_names(&self) -> Vec<String> {
        self.datasets.read().unwrap_or_else(|e| e.into_inner()).keys().cloned().collect()
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn session_ids(&self) -> Result<Vec<String>, SessionError> {
        let mut ids = Vec::new();
        for e in fs::read_dir(&self.root)? {
            let p = e?.path();
            if p.join(EVENTS_FILE).is_file() {
                if let Some(n) = p.file_name().and_then(|n| n.to_str()) {
                    ids.push(n.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn create_session(&self, dataset: &str, config: SessionConfig) -> Result<Session, SessionError> {
        let entry = self.dataset(dataset)?;
        let _guard = self.create_lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut n = self.session_ids()?.len() + 1;
        while self.dir(&format!("session-{n}")).exists() {
            n += 1;
        }
        let id = format!("session-{n}");
        let mut session = Session::create(&id, dataset, &entry.dataset, config, self.now())?;
        fs::create_dir_all(self.dir(&id).join(MODELS_DIR))?;
        self.persist(&mut session)?;
        let snapshot = session.clone();
        self.sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(snapshot)
    }

    /// The shared session, replayed from disk on first use.
    pub fn session(&self, id: &str) -> Result<Shared, SessionError> {
        let mut map = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(s) = map.get(id) {
            return Ok(s.clone());
        }
        let s = Arc::new(Mutex::new(self.load(id)?));
        map.insert(id.to_string(), s.clone());
        Ok(s)
    }

    /// Replays a session from its event log, bypassing the cache.
    pub fn load(&self, id: &str) -> Result<Session, SessionError> {
        let events = self.read_events(id)?;
        let dataset = match events.first() {
            Some(Event::Created { dataset, .. }) => dataset.clone(),
            _ => return Err(SessionError::CorruptLog(format!("{id}: log must start with a created event"))),
        };
        let entry = self.dataset(&dataset)?;
        let models_dir = self.dir(id).join(MODELS_DIR);
        Session::replay(&events, &entry.dataset, |snap| {
            let f = File::open(models_dir.join(format!("{snap}.json")))?;
            Ok(serde_json::from_reader(BufReader::new(f))?)
        })
    }

    pub fn read_events(&self, id: &str) -> Result<Vec<Event>, SessionError> {
        let path = self.dir(id).join(EVENTS_FILE);
        if !path.is_file() {
            return Err(SessionError::UnknownSession(id.to_string()));
        }
        let mut out = Vec::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line)
                    .map_err(|e| SessionError::CorruptLog(format!("{id} line {}: {e}", i + 1)))?,
            );
        }
        Ok(out)
    }

    fn persist(&self, session: &mut Session) -> Result<(), SessionError> {
        let events = session.take_events();
        if events.is_empty() {
            return Ok(());
        }
        let dir = self.dir(&session.id);
        let mut f = OpenOptions::new().create(true).append(true).open(dir.join(EVENTS_FILE))?;
        let mut buf = Vec::new();
        for ev in &events {
            serde_json::to_writer(&mut buf, ev)?;
            buf.push(b'\n');
        }
        f.write_all(&buf)?;
        f.sync_data()?;
        let tmp = dir.join(format!("{STATE_FILE}.tmp"));
        serde_json::to_writer(BufWriter::new(File::create(&tmp)?), session)?;
        fs::rename(tmp, dir.join(STATE_FILE))?;
        Ok(())
    }

    /// Runs `op` under the session lock and persists whatever it emitted,
    /// including events emitted before a later step failed.
    pub fn with_session<T>(
        &self,
        id: &str,
        op: impl FnOnce(&mut Session, &DatasetEntry, DateTime<Utc>) -> Result<T, SessionError>,
    ) -> Result<T, SessionError> {
        let shared = self.session(id)?;
        let mut s = lock(&shared);
        let entry = self.dataset(&s.dataset)?;
        let out = op(&mut s, &entry, self.now());
        self.persist(&mut s)?;
        out
    }

    /// Read-only access under the session lock.
    pub fn read<T>(&self, id: &str, op: impl FnOnce(&Session, &DatasetEntry) -> T) -> Result<T, SessionError> {
        let shared = self.session(id)?;
        let s = lock(&shared);
        let entry = self.dataset(&s.dataset)?;
        Ok(op(&s, &entry))
    }

    pub fn request_batch(
        &self,
        id: &str,
        n: usize,
        mix: Option<Mix>,
        assignments: &BTreeMap<String, usize>,
    ) -> Result<Round, SessionError> {
        self.with_session(id, |s, e, now| s.request_batch(&e.dataset, n, mix, assignments, now).cloned())
    }

    pub fn session_for_batch(&self, batch_id: &str) -> Result<String, SessionError> {
        session_of(batch_id, "-b").ok_or_else(|| SessionError::UnknownBatch(batch_id.to_string()))
    }

    pub fn session_for_conflict(&self, conflict_id: &str) -> Result<String, SessionError> {
        session_of(conflict_id, "-c").ok_or_else(|| SessionError::UnknownConflict(conflict_id.to_string()))
    }

    pub fn batch(&self, batch_id: &str) -> Result<Round, SessionError> {
        let sid = self.session_for_batch(batch_id)?;
        let found = self
            .read(&sid, |s, _| s.batch(batch_id).cloned())
            .map_err(|e| match e {
                SessionError::UnknownSession(_) => SessionError::UnknownBatch(batch_id.to_string()),
                e => e,
            })?;
        found.ok_or_else(|| SessionError::UnknownBatch(batch_id.to_string()))
    }

    /// Labels from one annotator for a batch of the open round.
    pub fn submit_labels(
        &self,
        batch_id: &str,
        annotator: &str,
        inputs: &[LabelInput],
        provenance: Provenance,
    ) -> Result<AcceptanceReport, SessionError> {
        if annotator.trim().is_empty() {
            return Err(SessionError::InvalidRecord("missing annotator id".into()));
        }
        let sid = self.session_for_batch(batch_id)?;
        self.with_session(&sid, |s, e, now| {
            let round = s
                .batch(batch_id)
                .ok_or_else(|| SessionError::UnknownBatch(batch_id.to_string()))?
                .round;
            let records = inputs
                .iter()
                .map(|i| {
                    LabelRecord::new(i.parcel_id.clone(), annotator, i.label, round, now, provenance)
                        .with_comment(i.comment.clone())
                })
                .collect();
            s.submit_labels(&e.dataset, records, now)
        })
    }

    pub fn conflicts(&self, id: &str) -> Result<Vec<ConflictItem>, SessionError> {
        self.read(id, |s, _| s.conflicts.values().cloned().collect())
    }

    pub fn resolve_conflict(&self, conflict_id: &str, req: ResolutionRequest) -> Result<Vec<LabelRecord>, SessionError> {
        let sid = self.session_for_conflict(conflict_id)?;
        self.with_session(&sid, |s, _, now| s.resolve_conflict(conflict_id, req, now))
            .map_err(|e| match e {
                SessionError::UnknownSession(_) => SessionError::UnknownConflict(conflict_id.to_string()),
                e => e,
            })
    }

    /// Retrains without holding the session lock while forests are fit,
    /// so label submissions continue in the meantime.
    pub fn retrain(&self, id: &str, force: bool) -> Result<SnapshotInfo, SessionError> {
        let job = self.with_session(id, |s, e, now| s.begin_retrain(e.dataset.clone(), force, now))?;
        let outcome = job.run(self.now())?;
        let path = self
            .dir(id)
            .join(MODELS_DIR)
            .join(format!("{}.json", outcome.info.snapshot_id));
        fs::create_dir_all(path.parent().expect("models dir has a parent"))?;
        write_models(&path, &outcome.models)?;
        self.with_session(id, |s, e, now| s.commit_retrain(outcome, &e.dataset, now).cloned())
    }

    pub fn report(&self, id: &str) -> Result<MetricsReport, SessionError> {
        self.with_session(id, |s, e, now| s.report(&e.dataset, &e.validations, now))
    }

    pub fn models(&self, id: &str) -> Result<Arc<TrainedModels>, SessionError> {
        self.read(id, |s, _| s.models().cloned())?.ok_or(SessionError::NotTrained)
    }
}

pub fn write_models(path: &Path, models: &TrainedModels) -> Result<(), SessionError> {
    let tmp = path.with_extension("json.tmp");
    let mut w = BufWriter::new(File::create(&tmp)?);
    serde_json::to_writer(&mut w, models)?;
    w.flush()?;
    drop(w);
    fs::rename(tmp, path)?;
    Ok(())
}
