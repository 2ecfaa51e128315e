//! Append-only event log and registry snapshots.
//!
//! Records live in one segment file per UTC day, `events-YYYYMMDD.seg`. Each
//! record on disk is
//!
//! ```text
//! u32 big-endian  length of the JSON body in bytes
//! [u8; length]    UTF-8 JSON of the EventRecord
//! u32 big-endian  CRC-32 (IEEE) of the JSON body
//! ```
//!
//! A torn record at the tail of a segment (from a crash mid-write) is cut off
//! when the store is reopened. Damage anywhere else is reported as corruption.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{TimeZone, Utc};
use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measurement::{
    DeferralExpired, DiaryDispatch, EngagementEvent, ExposureEvent, IngestGap, RerankSummary, SurveyResponse,
};
use crate::model::{Millis, ParticipantId, SessionId};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage full: {used} of {limit} bytes used")]
    StorageFull { used: u64, limit: u64 },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("segment {path} is corrupt at byte {at}")]
    Corrupt { path: PathBuf, at: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Exposure,
    ClientExposure,
    Engagement,
    SurveyResponse,
    Rerank,
    DeferralExpired,
    IngestGap,
    DiaryDispatch,
    Tombstone,
}

impl RecordKind {
    pub const ALL: [RecordKind; 9] = [
        RecordKind::Exposure,
        RecordKind::ClientExposure,
        RecordKind::Engagement,
        RecordKind::SurveyResponse,
        RecordKind::Rerank,
        RecordKind::DeferralExpired,
        RecordKind::IngestGap,
        RecordKind::DiaryDispatch,
        RecordKind::Tombstone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Exposure => "exposure",
            RecordKind::ClientExposure => "client_exposure",
            RecordKind::Engagement => "engagement",
            RecordKind::SurveyResponse => "survey_response",
            RecordKind::Rerank => "rerank",
            RecordKind::DeferralExpired => "deferral_expired",
            RecordKind::IngestGap => "ingest_gap",
            RecordKind::DiaryDispatch => "diary_dispatch",
            RecordKind::Tombstone => "tombstone",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tombstone {
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum RecordBody {
    Exposure(ExposureEvent),
    ClientExposure(ExposureEvent),
    Engagement(EngagementEvent),
    SurveyResponse(SurveyResponse),
    Rerank(RerankSummary),
    DeferralExpired(DeferralExpired),
    IngestGap(IngestGap),
    DiaryDispatch(DiaryDispatch),
    Tombstone(Tombstone),
}

impl RecordBody {
    pub fn kind(&self) -> RecordKind {
        match self {
            RecordBody::Exposure(_) => RecordKind::Exposure,
            RecordBody::ClientExposure(_) => RecordKind::ClientExposure,
            RecordBody::Engagement(_) => RecordKind::Engagement,
            RecordBody::SurveyResponse(_) => RecordKind::SurveyResponse,
            RecordBody::Rerank(_) => RecordKind::Rerank,
            RecordBody::DeferralExpired(_) => RecordKind::DeferralExpired,
            RecordBody::IngestGap(_) => RecordKind::IngestGap,
            RecordBody::DiaryDispatch(_) => RecordKind::DiaryDispatch,
            RecordBody::Tombstone(_) => RecordKind::Tombstone,
        }
    }

    fn owner(&self) -> Option<&ParticipantId> {
        match self {
            RecordBody::Exposure(e) | RecordBody::ClientExposure(e) => Some(&e.participant_id),
            RecordBody::Engagement(e) => Some(&e.participant_id),
            RecordBody::SurveyResponse(e) => Some(&e.participant_id),
            RecordBody::DiaryDispatch(e) => Some(&e.participant_id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub offset: u64,
    pub participant_id: ParticipantId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<SessionId>,
    /// Client sequence number, for client-originated events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    pub server_received_at: Millis,
    #[serde(flatten)]
    pub body: RecordBody,
}

impl EventRecord {
    pub fn kind(&self) -> RecordKind {
        self.body.kind()
    }
}

/// A record before the store assigns its offset.
#[derive(Debug, Clone, PartialEq)]
pub struct NewRecord {
    pub participant_id: ParticipantId,
    pub session_id: Option<SessionId>,
    pub seq: Option<u64>,
    pub server_received_at: Millis,
    pub body: RecordBody,
}

impl NewRecord {
    pub fn new(participant_id: ParticipantId, server_received_at: Millis, body: RecordBody) -> Self {
        Self { participant_id, session_id: None, seq: None, server_received_at, body }
    }

    pub fn in_session(mut self, session: SessionId, seq: Option<u64>) -> Self {
        self.session_id = Some(session);
        self.seq = seq;
        self
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let bad = |m: String| Err(StoreError::SchemaViolation(m));
        if self.participant_id.as_str().is_empty() {
            return bad("empty participant_id".into());
        }
        if let Some(owner) = self.body.owner() {
            if owner != &self.participant_id {
                return bad(format!(
                    "{} record owned by {owner} filed under {}",
                    self.body.kind().as_str(),
                    self.participant_id
                ));
            }
        }
        match &self.body {
            RecordBody::Engagement(e) => e.validate().map_err(StoreError::SchemaViolation),
            RecordBody::Exposure(e) | RecordBody::ClientExposure(e) if e.global_position == 0 => {
                bad("exposure global_position is 1-based".into())
            }
            RecordBody::SurveyResponse(r) if r.card_id.as_str().is_empty() => bad("survey response without card".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecordFilter {
    pub kinds: Option<HashSet<RecordKind>>,
    pub participant: Option<ParticipantId>,
    pub session: Option<SessionId>,
}

impl RecordFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn kind(kind: RecordKind) -> Self {
        Self { kinds: Some([kind].into()), ..Self::default() }
    }

    pub fn participant(mut self, p: impl Into<ParticipantId>) -> Self {
        self.participant = Some(p.into());
        self
    }

    pub fn session(mut self, s: impl Into<SessionId>) -> Self {
        self.session = Some(s.into());
        self
    }

    pub fn matches(&self, r: &EventRecord) -> bool {
        self.kinds.as_ref().is_none_or(|k| k.contains(&r.kind()))
            && self.participant.as_ref().is_none_or(|p| *p == r.participant_id)
            && self.session.as_ref().is_none_or(|s| r.session_id.as_ref() == Some(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncPolicy {
    /// fsync before every acknowledgment.
    #[default]
    Always,
    /// Leave flushing to the OS (tests, simulations).
    Never,
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub dir: PathBuf,
    pub max_bytes: Option<u64>,
    pub sync: SyncPolicy,
}

impl StoreConfig {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into(), max_bytes: None, sync: SyncPolicy::Always }
    }
}

struct Writer {
    segment: Option<(String, File)>,
    bytes: u64,
    next_offset: u64,
}

/// Durable append-only log. Appends are serialized; readers see a consistent
/// prefix and never block on disk I/O.
pub struct EventStore {
    config: StoreConfig,
    records: RwLock<Vec<EventRecord>>,
    withdrawn: RwLock<HashSet<ParticipantId>>,
    writer: Mutex<Writer>,
}

pub fn segment_name(at: Millis) -> String {
    let day = Utc.timestamp_millis_opt(at).single().unwrap_or_default();
    format!("events-{}.seg", day.format("%Y%m%d"))
}

pub fn encode_record(record: &EventRecord) -> Vec<u8> {
    let body = serde_json::to_vec(record).expect("records serialize");
    let mut out = Vec::with_capacity(body.len() + 8);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_be_bytes());
    out
}

/// Decodes a segment. Returns the records and the byte length of the intact
/// prefix; `Err(at)` if a complete record fails its checksum or parse.
pub fn decode_segment(bytes: &[u8]) -> Result<(Vec<EventRecord>, usize), usize> {
    let mut at = 0;
    let mut out = Vec::new();
    while bytes.len() - at >= 4 {
        let len = u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        let end = at + 4 + len + 4;
        if end > bytes.len() {
            break;
        }
        let body = &bytes[at + 4..at + 4 + len];
        let crc = u32::from_be_bytes(bytes[at + 4 + len..end].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != crc {
            // A bad checksum on the very last record is a torn write.
            return if end == bytes.len() { Ok((out, at)) } else { Err(at) };
        }
        match serde_json::from_slice(body) {
            Ok(r) => out.push(r),
            Err(_) => return Err(at),
        }
        at = end;
    }
    Ok((out, at))
}

impl EventStore {
    pub fn open(config: StoreConfig) -> Result<Self, StoreError> {
        fs::create_dir_all(&config.dir)?;
        let mut names: Vec<String> = fs::read_dir(&config.dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("events-") && n.ends_with(".seg"))
            .collect();
        names.sort();
        let mut records = Vec::new();
        let mut bytes = 0;
        for name in &names {
            let path = config.dir.join(name);
            let mut data = Vec::new();
            File::open(&path)?.read_to_end(&mut data)?;
            let (recs, good) = decode_segment(&data).map_err(|at| StoreError::Corrupt { path: path.clone(), at: at as u64 })?;
            if good < data.len() {
                tracing::warn!(segment = %path.display(), kept = good, dropped = data.len() - good, "truncating torn tail");
                OpenOptions::new().write(true).open(&path)?.set_len(good as u64)?;
            }
            bytes += good as u64;
            records.extend(recs);
        }
        records.sort_by_key(|r: &EventRecord| r.offset);
        let next_offset = records.last().map_or(0, |r| r.offset + 1);
        let withdrawn = records
            .iter()
            .filter(|r| r.kind() == RecordKind::Tombstone)
            .map(|r| r.participant_id.clone())
            .collect();
        Ok(Self {
            config,
            records: RwLock::new(records),
            withdrawn: RwLock::new(withdrawn),
            writer: Mutex::new(Writer { segment: None, bytes, next_offset }),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.config.dir
    }

    pub fn append(&self, record: NewRecord) -> Result<u64, StoreError> {
        Ok(self.append_batch(vec![record])?[0])
    }

    /// Appends all records or none (on validation or capacity failure).
    /// Durable per the sync policy when this returns.
    pub fn append_batch(&self, batch: Vec<NewRecord>) -> Result<Vec<u64>, StoreError> {
        for r in &batch {
            r.validate()?;
        }
        let mut w = self.writer.lock();
        let mut staged = Vec::with_capacity(batch.len());
        let mut size = 0u64;
        for (i, r) in batch.into_iter().enumerate() {
            let rec = EventRecord {
                offset: w.next_offset + i as u64,
                participant_id: r.participant_id,
                session_id: r.session_id,
                seq: r.seq,
                server_received_at: r.server_received_at,
                body: r.body,
            };
            let bytes = encode_record(&rec);
            size += bytes.len() as u64;
            staged.push((rec, bytes));
        }
        if let Some(limit) = self.config.max_bytes {
            if w.bytes + size > limit {
                return Err(StoreError::StorageFull { used: w.bytes, limit });
            }
        }
        for (rec, bytes) in &staged {
            let name = segment_name(rec.server_received_at);
            if w.segment.as_ref().is_none_or(|(n, _)| *n != name) {
                if let Some((_, f)) = w.segment.take() {
                    self.sync(&f)?;
                }
                let f = OpenOptions::new().create(true).append(true).open(self.config.dir.join(&name))?;
                w.segment = Some((name, f));
            }
            let (_, f) = w.segment.as_mut().expect("segment open");
            f.write_all(bytes)?;
        }
        if let Some((_, f)) = &w.segment {
            self.sync(f)?;
        }
        w.bytes += size;
        w.next_offset += staged.len() as u64;
        let offsets: Vec<u64> = staged.iter().map(|(r, _)| r.offset).collect();
        let mut records = self.records.write();
        for (rec, _) in staged {
            if rec.kind() == RecordKind::Tombstone {
                self.withdrawn.write().insert(rec.participant_id.clone());
            }
            records.push(rec);
        }
        Ok(offsets)
    }

    fn sync(&self, f: &File) -> io::Result<()> {
        match self.config.sync {
            SyncPolicy::Always => f.sync_data(),
            SyncPolicy::Never => Ok(()),
        }
    }

    /// Records at or after `from_offset` matching `filter`, in offset order.
    /// Records of withdrawn participants (and tombstones) are excluded.
    pub fn scan(&self, from_offset: u64, filter: &RecordFilter) -> Vec<EventRecord> {
        let withdrawn = self.withdrawn.read();
        let records = self.records.read();
        let start = records.partition_point(|r| r.offset < from_offset);
        records[start..]
            .iter()
            .filter(|r| !withdrawn.contains(&r.participant_id) && filter.matches(r))
            .cloned()
            .collect()
    }

    /// Number of records physically held, including tombstoned ones.
    pub fn len(&self) -> usize {
        self.records.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn next_offset(&self) -> u64 {
        self.writer.lock().next_offset
    }

    pub fn bytes_used(&self) -> u64 {
        self.writer.lock().bytes
    }

    pub fn is_withdrawn(&self, p: &ParticipantId) -> bool {
        self.withdrawn.read().contains(p)
    }

    pub fn withdrawn(&self) -> Vec<ParticipantId> {
        let mut v: Vec<_> = self.withdrawn.read().iter().cloned().collect();
        v.sort();
        v
    }

    /// Tombstones every record of `participant`.
    pub fn withdraw(&self, participant: &ParticipantId, reason: &str, at: Millis) -> Result<u64, StoreError> {
        self.append(NewRecord::new(participant.clone(), at, RecordBody::Tombstone(Tombstone { reason: reason.into() })))
    }

    /// Rewrites every segment without the records of withdrawn participants.
    /// Tombstones are kept so the participants stay excluded. Returns the
    /// number of records erased.
    pub fn compact(&self) -> Result<usize, StoreError> {
        let mut w = self.writer.lock();
        w.segment = None;
        let withdrawn = self.withdrawn.read().clone();
        let mut records = self.records.write();
        let before = records.len();
        records.retain(|r| r.kind() == RecordKind::Tombstone || !withdrawn.contains(&r.participant_id));
        let mut by_segment: std::collections::BTreeMap<String, Vec<u8>> = std::collections::BTreeMap::new();
        for r in records.iter() {
            by_segment.entry(segment_name(r.server_received_at)).or_default().extend(encode_record(r));
        }
        for entry in fs::read_dir(&self.config.dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if name.starts_with("events-") && name.ends_with(".seg") && !by_segment.contains_key(&name) {
                fs::remove_file(self.config.dir.join(&name))?;
            }
        }
        let mut bytes = 0;
        for (name, data) in by_segment {
            bytes += data.len() as u64;
            write_atomic(&self.config.dir.join(name), &data)?;
        }
        w.bytes = bytes;
        Ok(before - records.len())
    }
}

/// Writes `data` to `path` through a temporary file and rename.
pub fn write_atomic(path: &Path, data: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(data)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn save_snapshot<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let data = serde_json::to_vec_pretty(value).map_err(io::Error::other)?;
    write_atomic(path, &data)
}

pub fn load_snapshot<T: DeserializeOwned>(path: &Path) -> io::Result<Option<T>> {
    match fs::read(path) {
        Ok(data) => serde_json::from_slice(&data).map(Some).map_err(io::Error::other),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

/// Writes one CSV per record kind present in `records` into `dir`; returns
/// the files written.
pub fn export_csv(records: &[EventRecord], dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for kind in RecordKind::ALL {
        let rows: Vec<&EventRecord> = records.iter().filter(|r| r.kind() == kind).collect();
        if rows.is_empty() {
            continue;
        }
        let path = dir.join(format!("{}.csv", kind.as_str()));
        let mut w = csv::Writer::from_path(&path).map_err(|e| StoreError::Io(io::Error::other(e)))?;
        let flat: Vec<serde_json::Map<String, serde_json::Value>> = rows.iter().map(|r| flatten(r)).collect();
        let mut header: Vec<String> = vec!["offset".into(), "participant_id".into(), "session_id".into(), "seq".into(), "server_received_at".into()];
        for f in &flat {
            for k in f.keys() {
                if !header.contains(k) {
                    header.push(k.clone());
                }
            }
        }
        w.write_record(&header).map_err(|e| StoreError::Io(io::Error::other(e)))?;
        for (r, f) in rows.iter().zip(&flat) {
            let cells: Vec<String> = header
                .iter()
                .map(|h| match h.as_str() {
                    "offset" => r.offset.to_string(),
                    "participant_id" => r.participant_id.to_string(),
                    "session_id" => r.session_id.as_ref().map(|s| s.to_string()).unwrap_or_default(),
                    "seq" => r.seq.map(|s| s.to_string()).unwrap_or_default(),
                    "server_received_at" => r.server_received_at.to_string(),
                    k => match f.get(k) {
                        None | Some(serde_json::Value::Null) => String::new(),
                        Some(serde_json::Value::String(s)) => s.clone(),
                        Some(v) => v.to_string(),
                    },
                })
                .collect();
            w.write_record(&cells).map_err(|e| StoreError::Io(io::Error::other(e)))?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

fn flatten(r: &EventRecord) -> serde_json::Map<String, serde_json::Value> {
    let v = serde_json::to_value(&r.body).expect("records serialize");
    let mut out = serde_json::Map::new();
    if let Some(serde_json::Value::Object(payload)) = v.get("payload") {
        for (k, v) in payload {
            if k != "participant_id" && k != "session_id" {
                out.insert(k.clone(), v.clone());
            }
        }
    }
    out
}
