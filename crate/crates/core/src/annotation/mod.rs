//! Task assignment and the two-annotator-plus-tie-break workflow.
//!
//! All state sits behind one mutex, so transitions on a pair are serialized
//! and every read sees a consistent snapshot. With a storage directory
//! configured, each mutation is appended to a JSONL journal before it is
//! applied in memory; reopening replays the journal. Leases are not
//! journaled.

mod server;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use server::{router, serve, AppState};

use crate::model::{
    cmos_to_ternary, validate_pair, Annotation, CmosScore, FieldMode, Lang, SpeechPair,
    ValidationError,
};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("unknown pair `{0}`")]
    UnknownPair(String),
    #[error("unknown annotator `{0}`")]
    UnknownAnnotator(String),
    #[error("annotator `{0}` is inactive")]
    InactiveAnnotator(String),
    #[error("annotator `{annotator_id}` already annotated pair `{pair_id}`")]
    DuplicateAnnotation { annotator_id: String, pair_id: String },
    #[error("pair `{0}` is complete and takes no more annotations")]
    PairClosed(String),
    #[error("lease on pair `{pair_id}` for `{annotator_id}` has expired")]
    LeaseExpired { annotator_id: String, pair_id: String },
    #[error("annotator `{annotator_id}` holds no lease on pair `{pair_id}`")]
    NoLease { annotator_id: String, pair_id: String },
    #[error("invalid annotator profile: {0}")]
    InvalidProfile(String),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("storage unavailable: {0}")]
    StorageUnavailable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub annotator_id: String,
    pub qualified_langs: BTreeSet<Lang>,
    #[serde(default = "yes")]
    pub active: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairStatus {
    AwaitingFirst,
    AwaitingSecond,
    AwaitingTieBreak,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Initial,
    TieBreak,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAudio {
    pub audio_id: String,
    pub uri: String,
}

/// One leased unit of work. `audio_a`/`audio_b` are in presentation order;
/// they differ from the stored order only when `swapped` is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub pair_id: String,
    pub target_text: String,
    pub audio_a: TaskAudio,
    pub audio_b: TaskAudio,
    pub kind: TaskKind,
    pub assigned_to: String,
    pub expires_at: DateTime<Utc>,
    #[serde(default)]
    pub swapped: bool,
}

/// What an annotator sends back, relative to the order they heard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub pair_id: String,
    pub annotator_id: String,
    pub cmos: CmosScore,
    pub intelligible_a: bool,
    pub intelligible_b: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationMode {
    /// Third annotator when the two collapsed labels differ.
    #[default]
    Ternary,
    /// Also escalate on any raw CMOS or intelligibility mismatch.
    Strict,
}

fn default_lease_minutes() -> i64 {
    30
}
fn default_bind() -> String {
    "127.0.0.1:8080".into()
}
fn default_field_mode() -> FieldMode {
    FieldMode::Strict
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// Journal directory; in-memory only when absent.
    #[serde(default)]
    pub storage_path: Option<PathBuf>,
    #[serde(default = "default_lease_minutes")]
    pub lease_minutes: i64,
    #[serde(default)]
    pub escalation: EscalationMode,
    /// Randomly swap presentation order per assignment.
    #[serde(default)]
    pub swap: bool,
    #[serde(default)]
    pub swap_seed: u64,
    /// Reject submissions from annotators without a live lease.
    #[serde(default)]
    pub strict_leasing: bool,
    #[serde(default = "default_field_mode")]
    pub field_mode: FieldMode,
    /// Base directory for relative audio URIs.
    #[serde(default)]
    pub audio_root: Option<PathBuf>,
    #[serde(default = "default_bind")]
    pub bind: String,
    /// Environment variable holding the shared bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            storage_path: None,
            lease_minutes: default_lease_minutes(),
            escalation: EscalationMode::default(),
            swap: false,
            swap_seed: 0,
            strict_leasing: false,
            field_mode: default_field_mode(),
            audio_root: None,
            bind: default_bind(),
            token_env: None,
        }
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
#[derive(Clone)]
pub struct ManualClock(Arc<Mutex<DateTime<Utc>>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> ManualClock {
        ManualClock(Arc::new(Mutex::new(start)))
    }

    pub fn advance(&self, by: Duration) {
        *self.0.lock().expect("clock") += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().expect("clock")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejected {
    pub line: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected: Vec<Rejected>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSnapshot {
    pub pair: SpeechPair,
    pub status: PairStatus,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProgressStats {
    pub total_pairs: usize,
    /// Only statuses that occur.
    pub per_status: BTreeMap<PairStatus, usize>,
    pub per_annotator: BTreeMap<String, usize>,
    pub total_annotations: usize,
    pub mean_annotations_per_pair: f64,
}

#[derive(Debug, Clone)]
struct Lease {
    annotator_id: String,
    expires_at: DateTime<Utc>,
    swapped: bool,
}

struct PairEntry {
    pair: SpeechPair,
    annotations: Vec<Annotation>,
    status: PairStatus,
    leases: Vec<Lease>,
}

struct Journal {
    pairs: File,
    annotations: File,
    annotators: File,
}

fn append_line<T: Serialize>(file: &mut File, value: &T) -> Result<(), AnnotationError> {
    let mut line = serde_json::to_vec(value).map_err(|e| AnnotationError::StorageUnavailable(e.to_string()))?;
    line.push(b'\n');
    file.write_all(&line)
        .and_then(|_| file.flush())
        .map_err(|e| AnnotationError::StorageUnavailable(e.to_string()))
}

struct Inner {
    pairs: HashMap<String, PairEntry>,
    /// Ingest order, for deterministic task selection.
    order: Vec<String>,
    annotators: BTreeMap<String, AnnotatorProfile>,
    journal: Option<Journal>,
    rng: ChaCha8Rng,
}

pub struct AnnotationStore {
    inner: Mutex<Inner>,
    config: ServiceConfig,
    clock: Arc<dyn Clock>,
}

fn status_for(annotations: &[Annotation], escalation: EscalationMode) -> PairStatus {
    match annotations {
        [] => PairStatus::AwaitingFirst,
        [_] => PairStatus::AwaitingSecond,
        [x, y] => {
            let differ = match escalation {
                EscalationMode::Ternary => cmos_to_ternary(x.cmos) != cmos_to_ternary(y.cmos),
                EscalationMode::Strict => {
                    x.cmos != y.cmos
                        || x.intelligible_a != y.intelligible_a
                        || x.intelligible_b != y.intelligible_b
                }
            };
            if differ {
                PairStatus::AwaitingTieBreak
            } else {
                PairStatus::Complete
            }
        }
        _ => PairStatus::Complete,
    }
}

fn slots_left(status: PairStatus, n: usize) -> usize {
    match status {
        PairStatus::AwaitingFirst | PairStatus::AwaitingSecond => 2 - n.min(2),
        PairStatus::AwaitingTieBreak => 1,
        PairStatus::Complete => 0,
    }
}

impl AnnotationStore {
    pub fn open(config: ServiceConfig) -> Result<AnnotationStore, AnnotationError> {
        AnnotationStore::with_clock(config, Arc::new(SystemClock))
    }

    pub fn with_clock(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<AnnotationStore, AnnotationError> {
        let mut inner = Inner {
            pairs: HashMap::new(),
            order: Vec::new(),
            annotators: BTreeMap::new(),
            journal: None,
            rng: ChaCha8Rng::seed_from_u64(config.swap_seed),
        };
        if let Some(dir) = &config.storage_path {
            inner.journal = Some(replay(dir, &mut inner, config.escalation)?);
        }
        Ok(AnnotationStore {
            inner: Mutex::new(inner),
            config,
            clock,
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn lock(&self) -> Result<MutexGuard<'_, Inner>, AnnotationError> {
        self.inner
            .lock()
            .map_err(|_| AnnotationError::StorageUnavailable("store lock poisoned".into()))
    }

    /// Validates and stores newline-delimited pair records. Re-ingesting an
    /// identical record is a no-op; a different record under a known
    /// `pair_id` is rejected.
    pub fn ingest_pairs(&self, records: &str) -> Result<IngestReport, AnnotationError> {
        let mut report = IngestReport::default();
        let mut inner = self.lock()?;
        for (i, line) in records.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let pair = match validate_pair(line, self.config.field_mode) {
                Ok(p) => p,
                Err(e) => {
                    report.rejected.push(Rejected {
                        line: i + 1,
                        error: e.to_string(),
                    });
                    continue;
                }
            };
            if let Some(existing) = inner.pairs.get(&pair.pair_id) {
                if existing.pair != pair {
                    report.rejected.push(Rejected {
                        line: i + 1,
                        error: format!("pair `{}` already stored with different content", pair.pair_id),
                    });
                }
                continue;
            }
            if let Some(j) = inner.journal.as_mut() {
                append_line(&mut j.pairs, &pair)?;
            }
            inner.order.push(pair.pair_id.clone());
            inner.pairs.insert(
                pair.pair_id.clone(),
                PairEntry {
                    pair,
                    annotations: Vec::new(),
                    status: PairStatus::AwaitingFirst,
                    leases: Vec::new(),
                },
            );
            report.accepted += 1;
        }
        Ok(report)
    }

    pub fn register_annotator(&self, profile: AnnotatorProfile) -> Result<(), AnnotationError> {
        if profile.annotator_id.trim().is_empty() {
            return Err(AnnotationError::InvalidProfile("empty annotator_id".into()));
        }
        if profile.active && profile.qualified_langs.is_empty() {
            return Err(AnnotationError::InvalidProfile(format!(
                "active annotator `{}` has no qualified languages",
                profile.annotator_id
            )));
        }
        let mut inner = self.lock()?;
        if inner.annotators.get(&profile.annotator_id) == Some(&profile) {
            return Ok(());
        }
        if let Some(j) = inner.journal.as_mut() {
            append_line(&mut j.annotators, &profile)?;
        }
        inner.annotators.insert(profile.annotator_id.clone(), profile);
        Ok(())
    }

    pub fn annotators(&self) -> Result<Vec<AnnotatorProfile>, AnnotationError> {
        Ok(self.lock()?.annotators.values().cloned().collect())
    }

    /// Leases the highest-priority eligible pair: tie-breaks first, then
    /// pairs with one annotation, then fresh pairs, each in ingest order.
    /// A live lease held by the same annotator is returned again.
    pub fn next_task(&self, annotator_id: &str) -> Result<Option<Task>, AnnotationError> {
        let now = self.clock.now();
        let mut guard = self.lock()?;
        let inner = &mut *guard;
        let profile = inner
            .annotators
            .get(annotator_id)
            .ok_or_else(|| AnnotationError::UnknownAnnotator(annotator_id.to_owned()))?;
        if !profile.active {
            return Err(AnnotationError::InactiveAnnotator(annotator_id.to_owned()));
        }
        let langs = profile.qualified_langs.clone();

        let mut best: Option<(u8, usize, &str)> = None;
        for (pos, id) in inner.order.iter().enumerate() {
            let e = &inner.pairs[id];
            if e.status == PairStatus::Complete || !langs.contains(&e.pair.meta.target_lang) {
                continue;
            }
            if e.annotations.iter().any(|a| a.annotator_id == annotator_id) {
                continue;
            }
            let live: Vec<&Lease> = e.leases.iter().filter(|l| l.expires_at > now).collect();
            let mine = live.iter().any(|l| l.annotator_id == annotator_id);
            if !mine && live.len() >= slots_left(e.status, e.annotations.len()) {
                continue;
            }
            let rank = match e.status {
                PairStatus::AwaitingTieBreak => 0,
                PairStatus::AwaitingSecond => 1,
                _ => 2,
            };
            if best.is_none_or(|(r, p, _)| (rank, pos) < (r, p)) {
                best = Some((rank, pos, id));
            }
        }
        let Some((_, _, id)) = best else {
            return Ok(None);
        };
        let id = id.to_owned();
        let swap_draw = self.config.swap && inner.rng.random::<bool>();
        let entry = inner.pairs.get_mut(&id).expect("pair from order exists");
        entry.leases.retain(|l| l.expires_at > now);
        let lease = match entry.leases.iter().find(|l| l.annotator_id == annotator_id) {
            Some(l) => l.clone(),
            None => {
                let l = Lease {
                    annotator_id: annotator_id.to_owned(),
                    expires_at: now + Duration::minutes(self.config.lease_minutes),
                    swapped: swap_draw,
                };
                entry.leases.push(l.clone());
                l
            }
        };
        let (first, second) = if lease.swapped {
            (&entry.pair.audio_b, &entry.pair.audio_a)
        } else {
            (&entry.pair.audio_a, &entry.pair.audio_b)
        };
        Ok(Some(Task {
            pair_id: id,
            target_text: entry.pair.target_text.clone(),
            audio_a: TaskAudio {
                audio_id: first.audio_id.clone(),
                uri: first.uri.clone(),
            },
            audio_b: TaskAudio {
                audio_id: second.audio_id.clone(),
                uri: second.uri.clone(),
            },
            kind: if entry.status == PairStatus::AwaitingTieBreak {
                TaskKind::TieBreak
            } else {
                TaskKind::Initial
            },
            assigned_to: annotator_id.to_owned(),
            expires_at: lease.expires_at,
            swapped: lease.swapped,
        }))
    }

    /// Stores one annotation and returns the pair's new status.
    pub fn submit_annotation(&self, sub: Submission) -> Result<PairStatus, AnnotationError> {
        let now = self.clock.now();
        let mut guard = self.lock()?;
        let inner = &mut *guard;
        let entry = inner
            .pairs
            .get_mut(&sub.pair_id)
            .ok_or_else(|| AnnotationError::UnknownPair(sub.pair_id.clone()))?;
        if entry.annotations.iter().any(|a| a.annotator_id == sub.annotator_id) {
            return Err(AnnotationError::DuplicateAnnotation {
                annotator_id: sub.annotator_id,
                pair_id: sub.pair_id,
            });
        }
        if entry.status == PairStatus::Complete {
            return Err(AnnotationError::PairClosed(sub.pair_id));
        }
        let lease = entry.leases.iter().find(|l| l.annotator_id == sub.annotator_id).cloned();
        if self.config.strict_leasing {
            match &lease {
                None => {
                    return Err(AnnotationError::NoLease {
                        annotator_id: sub.annotator_id,
                        pair_id: sub.pair_id,
                    })
                }
                Some(l) if l.expires_at <= now => {
                    return Err(AnnotationError::LeaseExpired {
                        annotator_id: sub.annotator_id,
                        pair_id: sub.pair_id,
                    })
                }
                Some(_) => {}
            }
        }
        let swapped = lease.is_some_and(|l| l.swapped);
        let annotation = if swapped {
            Annotation {
                pair_id: sub.pair_id,
                annotator_id: sub.annotator_id,
                cmos: sub.cmos.mirrored(),
                intelligible_a: sub.intelligible_b,
                intelligible_b: sub.intelligible_a,
                submitted_at: now,
                presented_swapped: true,
            }
        } else {
            Annotation {
                pair_id: sub.pair_id,
                annotator_id: sub.annotator_id,
                cmos: sub.cmos,
                intelligible_a: sub.intelligible_a,
                intelligible_b: sub.intelligible_b,
                submitted_at: now,
                presented_swapped: false,
            }
        };
        if let Some(j) = inner.journal.as_mut() {
            append_line(&mut j.annotations, &annotation)?;
        }
        entry.leases.retain(|l| l.annotator_id != annotation.annotator_id);
        entry.annotations.push(annotation);
        entry.status = status_for(&entry.annotations, self.config.escalation);
        Ok(entry.status)
    }

    pub fn pair_state(&self, pair_id: &str) -> Result<PairSnapshot, AnnotationError> {
        let inner = self.lock()?;
        let e = inner
            .pairs
            .get(pair_id)
            .ok_or_else(|| AnnotationError::UnknownPair(pair_id.to_owned()))?;
        Ok(PairSnapshot {
            pair: e.pair.clone(),
            status: e.status,
            annotations: e.annotations.clone(),
        })
    }

    pub fn progress_stats(&self) -> Result<ProgressStats, AnnotationError> {
        let inner = self.lock()?;
        let mut stats = ProgressStats {
            total_pairs: inner.pairs.len(),
            ..Default::default()
        };
        for e in inner.pairs.values() {
            *stats.per_status.entry(e.status).or_default() += 1;
            for a in &e.annotations {
                *stats.per_annotator.entry(a.annotator_id.clone()).or_default() += 1;
                stats.total_annotations += 1;
            }
        }
        if stats.total_pairs > 0 {
            stats.mean_annotations_per_pair = stats.total_annotations as f64 / stats.total_pairs as f64;
        }
        Ok(stats)
    }

    /// Every stored annotation, pairs in ingest order.
    pub fn annotations(&self) -> Result<Vec<Annotation>, AnnotationError> {
        let inner = self.lock()?;
        Ok(inner
            .order
            .iter()
            .flat_map(|id| inner.pairs[id].annotations.iter().cloned())
            .collect())
    }

    pub fn pairs(&self) -> Result<Vec<SpeechPair>, AnnotationError> {
        let inner = self.lock()?;
        Ok(inner.order.iter().map(|id| inner.pairs[id].pair.clone()).collect())
    }

    /// Resolves an audio id to its URI.
    pub fn audio_uri(&self, audio_id: &str) -> Result<Option<String>, AnnotationError> {
        let inner = self.lock()?;
        Ok(inner.pairs.values().find_map(|e| {
            [&e.pair.audio_a, &e.pair.audio_b]
                .into_iter()
                .find(|a| a.audio_id == audio_id)
                .map(|a| a.uri.clone())
        }))
    }
}

fn open_append(path: &Path) -> Result<File, AnnotationError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| AnnotationError::StorageUnavailable(format!("{}: {e}", path.display())))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, AnnotationError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(AnnotationError::StorageUnavailable(format!("{}: {e}", path.display()))),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| AnnotationError::StorageUnavailable(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            AnnotationError::StorageUnavailable(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

fn replay(dir: &Path, inner: &mut Inner, escalation: EscalationMode) -> Result<Journal, AnnotationError> {
    std::fs::create_dir_all(dir).map_err(|e| AnnotationError::StorageUnavailable(format!("{}: {e}", dir.display())))?;
    let pairs_path = dir.join("pairs.jsonl");
    let ann_path = dir.join("annotations.jsonl");
    let prof_path = dir.join("annotators.jsonl");
    for pair in read_lines::<SpeechPair>(&pairs_path)? {
        inner.order.push(pair.pair_id.clone());
        inner.pairs.insert(
            pair.pair_id.clone(),
            PairEntry {
                pair,
                annotations: Vec::new(),
                status: PairStatus::AwaitingFirst,
                leases: Vec::new(),
            },
        );
    }
    for a in read_lines::<Annotation>(&ann_path)? {
        let e = inner.pairs.get_mut(&a.pair_id).ok_or_else(|| {
            AnnotationError::StorageUnavailable(format!("journal annotation for unknown pair `{}`", a.pair_id))
        })?;
        e.annotations.push(a);
        e.status = status_for(&e.annotations, escalation);
    }
    for p in read_lines::<AnnotatorProfile>(&prof_path)? {
        inner.annotators.insert(p.annotator_id.clone(), p);
    }
    Ok(Journal {
        pairs: open_append(&pairs_path)?,
        annotations: open_append(&ann_path)?,
        annotators: open_append(&prof_path)?,
    })
}
