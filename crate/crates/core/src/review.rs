//! Human review queue: leased items, the four-flag rubric and an append-only
//! event log from which the whole state can be rebuilt.
//!
//! Every mutation goes through one mutex that guards both the item table and
//! the log writer, so the log order is the order in which the state changed.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::RleMask;

pub const DEFAULT_LEASE_TTL_MS: u64 = 10 * 60 * 1000;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("reviewer id must not be empty")]
    EmptyReviewer,
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("item {0} is already queued")]
    DuplicateItem(String),
    #[error("item {0} is not leased to this reviewer")]
    NotLeasedToYou(String),
    #[error("item {0} already has a decision; set revise to replace it")]
    AlreadyDecided(String),
    #[error("verdict does not match rubric: {0}")]
    RubricVerdictMismatch(String),
    #[error("audit fraction must be in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("log line {line}: {message}")]
    Replay { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
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

/// Clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        ManualClock(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    MaskReview,
    #[default]
    QaReview,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemStatus {
    Pending,
    Leased,
    Decided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rubric {
    pub object_recognition: bool,
    pub spatial_logic: bool,
    pub mask_quality: bool,
    pub grammar: bool,
}

impl Rubric {
    pub const ALL_PASS: Rubric = Rubric {
        object_recognition: true,
        spatial_logic: true,
        mask_quality: true,
        grammar: true,
    };

    pub fn all_pass(&self) -> bool {
        *self == Self::ALL_PASS
    }

    pub fn failed_flags(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for (flag, name) in [
            (self.object_recognition, "object_recognition"),
            (self.spatial_logic, "spatial_logic"),
            (self.mask_quality, "mask_quality"),
            (self.grammar, "grammar"),
        ] {
            if !flag {
                out.push(name);
            }
        }
        out
    }

    /// Mask review only judges mask quality; the other flags do not apply.
    pub fn for_stage(self, stage: Stage) -> Rubric {
        match stage {
            Stage::QaReview => self,
            Stage::MaskReview => Rubric {
                mask_quality: self.mask_quality,
                ..Self::ALL_PASS
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewDecision {
    pub item_id: String,
    pub reviewer: String,
    pub rubric: Rubric,
    pub verdict: Verdict,
    #[serde(default)]
    pub notes: String,
    /// Set by the service when the decision is stored.
    #[serde(default)]
    pub timestamp: u64,
    #[serde(default)]
    pub revise: bool,
}

impl ReviewDecision {
    pub fn check_consistency(&self) -> Result<(), ReviewError> {
        match self.verdict {
            Verdict::Accept if !self.rubric.all_pass() => Err(ReviewError::RubricVerdictMismatch(
                format!("accept with failed flags {:?}", self.rubric.failed_flags()),
            )),
            Verdict::Reject if self.rubric.all_pass() && self.notes.trim().is_empty() => {
                Err(ReviewError::RubricVerdictMismatch(
                    "reject needs a failed flag or a note".to_string(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Item as submitted to the queue. Extra fields (for example a full dataset
/// record) are ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewItem {
    pub id: String,
    pub image_path: String,
    #[serde(default)]
    pub masks: Vec<RleMask>,
    #[serde(default)]
    pub instruction: String,
    #[serde(default)]
    pub answer: String,
    #[serde(default)]
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub reviewer: String,
    pub expires_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub image_path: String,
    pub masks: Vec<RleMask>,
    pub instruction: String,
    pub answer: String,
    pub stage: Stage,
    pub status: ItemStatus,
    pub lease: Option<Lease>,
    pub decision: Option<ReviewDecision>,
    /// Original item id when this is an audit copy.
    pub audit_of: Option<String>,
}

impl ReviewItem {
    fn from_new(item: NewItem, audit_of: Option<String>) -> Self {
        ReviewItem {
            id: item.id,
            image_path: item.image_path,
            masks: item.masks,
            instruction: item.instruction,
            answer: item.answer,
            stage: item.stage,
            status: ItemStatus::Pending,
            lease: None,
            decision: None,
            audit_of,
        }
    }

    fn content(&self) -> NewItem {
        NewItem {
            id: self.id.clone(),
            image_path: self.image_path.clone(),
            masks: self.masks.clone(),
            instruction: self.instruction.clone(),
            answer: self.answer.clone(),
            stage: self.stage,
        }
    }

    fn lease_active(&self, now: u64) -> bool {
        self.status == ItemStatus::Leased && self.lease.as_ref().is_some_and(|l| l.expires_at > now)
    }

    /// Status with lease expiry applied.
    pub fn status_at(&self, now: u64) -> ItemStatus {
        match self.status {
            ItemStatus::Leased if !self.lease_active(now) => ItemStatus::Pending,
            s => s,
        }
    }
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Enqueued { at: u64, item: NewItem },
    Leased { at: u64, item_id: String, reviewer: String, expires_at: u64 },
    Decided { decision: ReviewDecision },
    AuditEnqueued { at: u64, audit_of: String, item: NewItem },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub pending: usize,
    pub leased: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub acceptance_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditBatch {
    pub fraction: f64,
    pub seed: u64,
    pub eligible: usize,
    pub item_ids: Vec<String>,
}

#[derive(Default)]
struct State {
    items: Vec<ReviewItem>,
    index: HashMap<String, usize>,
    events: Vec<Event>,
    log: Option<BufWriter<File>>,
}

impl State {
    fn item(&self, id: &str) -> Option<&ReviewItem> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    /// Applies an already-validated event. Used for live mutation and replay.
    fn apply(&mut self, event: &Event) -> Result<(), String> {
        match event {
            Event::Enqueued { item, .. } => self.insert(ReviewItem::from_new(item.clone(), None))?,
            Event::AuditEnqueued { audit_of, item, .. } => {
                self.insert(ReviewItem::from_new(item.clone(), Some(audit_of.clone())))?
            }
            Event::Leased { item_id, reviewer, expires_at, .. } => {
                let i = *self.index.get(item_id).ok_or(format!("unknown item {item_id}"))?;
                let item = &mut self.items[i];
                item.status = ItemStatus::Leased;
                item.lease = Some(Lease {
                    reviewer: reviewer.clone(),
                    expires_at: *expires_at,
                });
            }
            Event::Decided { decision } => {
                let i = *self
                    .index
                    .get(&decision.item_id)
                    .ok_or(format!("unknown item {}", decision.item_id))?;
                let item = &mut self.items[i];
                item.status = ItemStatus::Decided;
                item.lease = None;
                item.decision = Some(decision.clone());
            }
        }
        Ok(())
    }

    fn insert(&mut self, item: ReviewItem) -> Result<(), String> {
        if self.index.contains_key(&item.id) {
            return Err(format!("item {} is already queued", item.id));
        }
        self.index.insert(item.id.clone(), self.items.len());
        self.items.push(item);
        Ok(())
    }

    fn record(&mut self, event: Event) -> Result<(), ReviewError> {
        self.apply(&event)
            .expect("events are validated before they are recorded");
        if let Some(log) = &mut self.log {
            serde_json::to_writer(&mut *log, &event).map_err(std::io::Error::other)?;
            log.write_all(b"\n")?;
            log.flush()?;
        }
        self.events.push(event);
        Ok(())
    }
}

pub struct ReviewStore {
    state: Mutex<State>,
    clock: Arc<dyn Clock>,
    lease_ttl_ms: u64,
}

impl ReviewStore {
    pub fn in_memory(clock: Arc<dyn Clock>, lease_ttl_ms: u64) -> Self {
        ReviewStore {
            state: Mutex::new(State::default()),
            clock,
            lease_ttl_ms,
        }
    }

    /// Opens a store backed by a JSONL log, replaying any existing events and
    /// appending new ones.
    pub fn open(path: &Path, clock: Arc<dyn Clock>, lease_ttl_ms: u64) -> Result<Self, ReviewError> {
        let events = if path.exists() {
            read_log(BufReader::new(File::open(path)?))?
        } else {
            Vec::new()
        };
        let store = Self::replay(&events, clock, lease_ttl_ms)?;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        store.state.lock().unwrap().log = Some(BufWriter::new(file));
        Ok(store)
    }

    pub fn replay(events: &[Event], clock: Arc<dyn Clock>, lease_ttl_ms: u64) -> Result<Self, ReviewError> {
        let mut state = State::default();
        for (i, e) in events.iter().enumerate() {
            state.apply(e).map_err(|message| ReviewError::Replay { line: i + 1, message })?;
            state.events.push(e.clone());
        }
        Ok(ReviewStore {
            state: Mutex::new(state),
            clock,
            lease_ttl_ms,
        })
    }

    pub fn lease_ttl_ms(&self) -> u64 {
        self.lease_ttl_ms
    }

    pub fn enqueue(&self, items: Vec<NewItem>) -> Result<usize, ReviewError> {
        let mut state = self.state.lock().unwrap();
        let mut seen = std::collections::HashSet::new();
        for item in &items {
            if state.index.contains_key(&item.id) || !seen.insert(item.id.as_str()) {
                return Err(ReviewError::DuplicateItem(item.id.clone()));
            }
        }
        let at = self.clock.now_ms();
        let n = items.len();
        for item in items {
            state.record(Event::Enqueued { at, item })?;
        }
        Ok(n)
    }

    /// Leases the oldest pending item (expired leases count as pending) to
    /// `reviewer`. A reviewer who already holds an active lease gets that
    /// item back. `None` means there is nothing to review.
    pub fn next_item(&self, reviewer: &str) -> Result<Option<ReviewItem>, ReviewError> {
        let reviewer = reviewer.trim();
        if reviewer.is_empty() {
            return Err(ReviewError::EmptyReviewer);
        }
        let mut state = self.state.lock().unwrap();
        let now = self.clock.now_ms();
        if let Some(held) = state
            .items
            .iter()
            .find(|it| it.lease_active(now) && it.lease.as_ref().is_some_and(|l| l.reviewer == reviewer))
        {
            return Ok(Some(held.clone()));
        }
        let Some(pos) = state
            .items
            .iter()
            .position(|it| it.status_at(now) == ItemStatus::Pending)
        else {
            return Ok(None);
        };
        let item_id = state.items[pos].id.clone();
        state.record(Event::Leased {
            at: now,
            item_id,
            reviewer: reviewer.to_string(),
            expires_at: now + self.lease_ttl_ms,
        })?;
        Ok(Some(state.items[pos].clone()))
    }

    pub fn submit_decision(&self, mut decision: ReviewDecision) -> Result<ReviewDecision, ReviewError> {
        if decision.reviewer.trim().is_empty() {
            return Err(ReviewError::EmptyReviewer);
        }
        let mut state = self.state.lock().unwrap();
        let now = self.clock.now_ms();
        let item = state
            .item(&decision.item_id)
            .ok_or_else(|| ReviewError::UnknownItem(decision.item_id.clone()))?;
        decision.rubric = decision.rubric.for_stage(item.stage);
        decision.check_consistency()?;
        match item.status_at(now) {
            ItemStatus::Decided => {
                let previous = item.decision.as_ref().expect("decided items carry a decision");
                if !decision.revise || previous.reviewer != decision.reviewer {
                    return Err(ReviewError::AlreadyDecided(decision.item_id));
                }
            }
            ItemStatus::Leased => {
                let holder = item.lease.as_ref().map(|l| l.reviewer.as_str());
                if holder != Some(decision.reviewer.as_str()) {
                    return Err(ReviewError::NotLeasedToYou(decision.item_id));
                }
            }
            ItemStatus::Pending => return Err(ReviewError::NotLeasedToYou(decision.item_id)),
        }
        decision.timestamp = now;
        state.record(Event::Decided {
            decision: decision.clone(),
        })?;
        Ok(decision)
    }

    pub fn item(&self, id: &str) -> Option<ReviewItem> {
        self.state.lock().unwrap().item(id).cloned()
    }

    pub fn progress(&self) -> Progress {
        let state = self.state.lock().unwrap();
        let now = self.clock.now_ms();
        let mut p = Progress {
            pending: 0,
            leased: 0,
            accepted: 0,
            rejected: 0,
            acceptance_rate: None,
        };
        for it in &state.items {
            match it.status_at(now) {
                ItemStatus::Pending => p.pending += 1,
                ItemStatus::Leased => p.leased += 1,
                ItemStatus::Decided => match it.decision.as_ref().map(|d| d.verdict) {
                    Some(Verdict::Accept) => p.accepted += 1,
                    _ => p.rejected += 1,
                },
            }
        }
        let decided = p.accepted + p.rejected;
        if decided > 0 {
            p.acceptance_rate = Some(p.accepted as f64 / decided as f64);
        }
        p
    }

    /// Re-enqueues a seeded random subset of accepted, non-audit items as
    /// audit copies with ids `<id>#audit<k>`. The subset size is
    /// `ceil(fraction * eligible)`.
    pub fn sample_audit(&self, fraction: f64, seed: u64) -> Result<AuditBatch, ReviewError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(ReviewError::InvalidFraction(fraction));
        }
        let mut state = self.state.lock().unwrap();
        let mut eligible: Vec<&ReviewItem> = state
            .items
            .iter()
            .filter(|it| {
                it.audit_of.is_none()
                    && it.status == ItemStatus::Decided
                    && it.decision.as_ref().is_some_and(|d| d.verdict == Verdict::Accept)
            })
            .collect();
        eligible.sort_by(|a, b| a.id.cmp(&b.id));
        // the small slack keeps e.g. 0.1 * 20 from rounding up to 3
        let count = ((fraction * eligible.len() as f64 - 1e-9).ceil().max(0.0) as usize).min(eligible.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, eligible.len(), count).into_vec();
        picked.sort_unstable();
        let sources: Vec<NewItem> = picked.iter().map(|&i| eligible[i].content()).collect();
        let eligible_count = eligible.len();

        let at = self.clock.now_ms();
        let mut item_ids = Vec::with_capacity(sources.len());
        for mut item in sources {
            let original = item.id.clone();
            let k = (1..)
                .find(|k| !state.index.contains_key(&format!("{original}#audit{k}")))
                .expect("some suffix is free");
            item.id = format!("{original}#audit{k}");
            item_ids.push(item.id.clone());
            state.record(Event::AuditEnqueued {
                at,
                audit_of: original,
                item,
            })?;
        }
        Ok(AuditBatch {
            fraction,
            seed,
            eligible: eligible_count,
            item_ids,
        })
    }

    pub fn events(&self) -> Vec<Event> {
        self.state.lock().unwrap().events.clone()
    }

    /// Items in queue order as compact JSON. Two stores with the same history
    /// produce identical bytes.
    pub fn snapshot(&self) -> String {
        let state = self.state.lock().unwrap();
        serde_json::to_string(&state.items).expect("items serialize")
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<(), ReviewError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.snapshot())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }
}

pub fn read_log(reader: impl BufRead) -> Result<Vec<Event>, ReviewError> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line).map_err(|e| ReviewError::Replay {
            line: i + 1,
            message: e.to_string(),
        })?;
        events.push(event);
    }
    Ok(events)
}

pub fn write_log(events: &[Event], mut out: impl Write) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
