//! Append-only, hash-chained skill log backing the pre-registry and the
//! approved registry.
//!
//! On disk the log is one line per entry: the lowercase hex of
//! `canonical([U64 index, Bytes prev_entry_hash, Bytes event, Bytes entry_hash])`,
//! where `event` is the JSON encoding of an [`Event`] and
//! `entry_hash = H(canonical([U64 index, Bytes prev_entry_hash, Bytes event]))`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditOutcome, AuditorId, Verdict};
use crate::canon::{canonical_decode, canonical_encode, content_hash, derive_skill_id, hash_fields, ContentHash, Field, Value};
use crate::crypto::{ContentBlob, ExchangeKey, KeyContext, VerifierKey, WrappedKey};
use crate::economics::{PurchaseRecord, SettlementRecord, TcAmount};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("skill {0} already committed")]
    Duplicate(ContentHash),
    #[error("previous version {0} not found")]
    PrevNotFound(ContentHash),
    #[error("previous version {0} belongs to another developer")]
    PrevOwnedByOther(ContentHash),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("payload does not match publication type: {0}")]
    PayloadMismatch(&'static str),
    #[error("timestamp {got} precedes developer's last commit at {last}")]
    TimestampRegression { last: u64, got: u64 },
    #[error("skill not found: {0}")]
    NotFound(String),
    #[error("name {0} is registered by several developers; qualify it as developer/name")]
    Ambiguous(String),
    #[error("skill {0} is not pending")]
    NotPending(ContentHash),
    #[error("skill {0} is not approved")]
    NotApproved(ContentHash),
    #[error("audit outcome does not approve skill {0}")]
    OutcomeNotApproved(ContentHash),
    #[error("audit outcome is for another skill")]
    OutcomeMismatch,
    #[error("verdict from {0} in the audit outcome does not verify")]
    BadVerdict(AuditorId),
    #[error("operation not available for {0:?} skills")]
    WrongType(PublicationType),
    #[error("version chain broken at {0}")]
    BrokenChain(ContentHash),
    #[error("log corrupt at entry {0}")]
    LogCorrupt(u64),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for RegistryError {
    fn from(e: std::io::Error) -> Self {
        RegistryError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PublicationType {
    Transparent,
    Licensed,
    Sealed,
    Committed,
}

impl PublicationType {
    pub const ALL: [PublicationType; 4] = [
        PublicationType::Transparent,
        PublicationType::Licensed,
        PublicationType::Sealed,
        PublicationType::Committed,
    ];

    pub fn byte(self) -> u8 {
        match self {
            PublicationType::Transparent => 1,
            PublicationType::Licensed => 2,
            PublicationType::Sealed => 3,
            PublicationType::Committed => 4,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transparent" => Some(PublicationType::Transparent),
            "licensed" => Some(PublicationType::Licensed),
            "sealed" => Some(PublicationType::Sealed),
            "committed" => Some(PublicationType::Committed),
            _ => None,
        }
    }

    pub fn is_encrypted(self) -> bool {
        matches!(self, PublicationType::Licensed | PublicationType::Sealed)
    }
}

/// Declared capabilities `(tools, data scopes, behavior bounds)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermissionManifest {
    #[serde(default)]
    pub declared_tools: BTreeSet<String>,
    #[serde(default)]
    pub data_scope: BTreeSet<String>,
    #[serde(default)]
    pub behavior_bounds: BTreeSet<String>,
}

impl PermissionManifest {
    pub fn new<T, D, B>(tools: T, scopes: D, bounds: B) -> Self
    where
        T: IntoIterator,
        T::Item: Into<String>,
        D: IntoIterator,
        D::Item: Into<String>,
        B: IntoIterator,
        B::Item: Into<String>,
    {
        PermissionManifest {
            declared_tools: tools.into_iter().map(Into::into).collect(),
            data_scope: scopes.into_iter().map(Into::into).collect(),
            behavior_bounds: bounds.into_iter().map(Into::into).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), RegistryError> {
        for (kind, set) in [
            ("tool", &self.declared_tools),
            ("data scope", &self.data_scope),
            ("behavior bound", &self.behavior_bounds),
        ] {
            if let Some(bad) = set.iter().find(|s| s.trim().is_empty() || s.trim() != s.as_str()) {
                return Err(RegistryError::Manifest(format!("{kind} identifier {bad:?} is empty or padded")));
            }
        }
        Ok(())
    }

    fn canonical_fields(&self) -> Vec<Field<'_>> {
        vec![str_list(&self.declared_tools), str_list(&self.data_scope), str_list(&self.behavior_bounds)]
    }
}

fn str_list(set: &BTreeSet<String>) -> Field<'_> {
    Field::List(set.iter().map(|x| Field::Str(x)).collect())
}

/// What the log stores for a skill's content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Payload {
    Plaintext {
        #[serde(with = "crate::canon::hexser")]
        content: Vec<u8>,
    },
    Ciphertext {
        blob: ContentBlob,
    },
    /// Committed skills register only their hash.
    None,
}

impl Payload {
    fn bytes(&self) -> Vec<u8> {
        match self {
            Payload::Plaintext { content } => content.clone(),
            Payload::Ciphertext { blob } => blob.to_bytes(),
            Payload::None => Vec::new(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Payload::Plaintext { .. } => 1,
            Payload::Ciphertext { .. } => 2,
            Payload::None => 0,
        }
    }
}

/// Bytes hashed into `skill_id`: the plaintext for Transparent skills, the
/// plaintext digest otherwise (the ciphertext itself is bound to `skill_id`).
pub fn skill_id_input(publication_type: PublicationType, plaintext_hash: &ContentHash, plaintext: Option<&[u8]>) -> Vec<u8> {
    match (publication_type, plaintext) {
        (PublicationType::Transparent, Some(p)) => p.to_vec(),
        _ => plaintext_hash.as_bytes().to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkillStatus {
    Pending,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillRecord {
    pub skill_id: ContentHash,
    pub name: String,
    pub developer: String,
    /// Developer's exchange key, needed to unwrap licensed and audit deliveries.
    pub developer_key: ExchangeKey,
    pub publication_type: PublicationType,
    pub payload: Payload,
    /// Digest of the plaintext.
    pub content_hash: ContentHash,
    pub manifest: PermissionManifest,
    pub prev_version: Option<ContentHash>,
    pub timestamp: u64,
    pub status: SkillStatus,
    pub audit_report: Option<AuditOutcome>,
}

impl SkillRecord {
    pub fn qualified_name(&self) -> String {
        format!("{}/{}", self.developer, self.name)
    }

    pub fn expected_id(&self) -> ContentHash {
        let plaintext = match &self.payload {
            Payload::Plaintext { content } => Some(content.as_slice()),
            _ => None,
        };
        derive_skill_id(
            &skill_id_input(self.publication_type, &self.content_hash, plaintext),
            &self.developer,
            self.prev_version.as_ref(),
            self.timestamp,
        )
    }

    /// Deterministic byte form of the whole record.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let payload = self.payload.bytes();
        let prev = self.prev_version.unwrap_or(ContentHash::ZERO);
        let report = self.audit_report.as_ref().map(|o| o.digest()).unwrap_or(ContentHash::ZERO);
        let status = match self.status {
            SkillStatus::Pending => 1,
            SkillStatus::Approved => 2,
            SkillStatus::Rejected => 3,
        };
        let mut fields = vec![
            Field::Bytes(self.skill_id.as_bytes()),
            Field::Str(&self.name),
            Field::Str(&self.developer),
            Field::Bytes(&self.developer_key.0),
            Field::Enum(self.publication_type.byte()),
            Field::Enum(self.payload.tag()),
            Field::Bytes(&payload),
            Field::Bytes(self.content_hash.as_bytes()),
        ];
        fields.extend(self.manifest.canonical_fields());
        fields.extend([
            Field::Bytes(prev.as_bytes()),
            Field::U64(self.timestamp),
            Field::Enum(status),
            Field::Bytes(report.as_bytes()),
        ]);
        canonical_encode(&fields)
    }

    /// Plaintext of a Transparent record.
    pub fn plaintext(&self) -> Option<&[u8]> {
        match &self.payload {
            Payload::Plaintext { content } => Some(content),
            _ => None,
        }
    }

    pub fn ciphertext(&self) -> Option<&ContentBlob> {
        match &self.payload {
            Payload::Ciphertext { blob } => Some(blob),
            _ => None,
        }
    }
}

/// Input to [`Registry::commit_skill`].
#[derive(Debug, Clone)]
pub struct CommitRequest {
    pub developer: String,
    pub developer_key: ExchangeKey,
    pub name: String,
    pub publication_type: PublicationType,
    pub payload: Payload,
    pub content_hash: ContentHash,
    pub manifest: PermissionManifest,
    pub prev_version: Option<ContentHash>,
    pub timestamp: u64,
}

impl CommitRequest {
    /// The id this request will receive.
    pub fn skill_id(&self) -> ContentHash {
        let plaintext = match &self.payload {
            Payload::Plaintext { content } => Some(content.as_slice()),
            _ => None,
        };
        derive_skill_id(
            &skill_id_input(self.publication_type, &self.content_hash, plaintext),
            &self.developer,
            self.prev_version.as_ref(),
            self.timestamp,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub skill_id: ContentHash,
    pub recipient: ExchangeKey,
    pub wrapped: WrappedKey,
    pub log_index: u64,
}

/// Log payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum Event {
    Commit {
        record: SkillRecord,
    },
    AuditorRegistered {
        auditor: AuditorId,
        exchange_key: ExchangeKey,
        verifier_key: VerifierKey,
        stake: TcAmount,
    },
    Claim {
        skill_id: ContentHash,
        auditor: AuditorId,
        deposit: TcAmount,
        bond: TcAmount,
    },
    Verdict {
        verdict: Verdict,
    },
    Promotion {
        skill_id: ContentHash,
        outcome: AuditOutcome,
    },
    Rejection {
        skill_id: ContentHash,
        outcome: AuditOutcome,
    },
    Settlement {
        skill_id: ContentHash,
        record: SettlementRecord,
    },
    Purchase {
        record: PurchaseRecord,
    },
    Delivery {
        skill_id: ContentHash,
        recipient: ExchangeKey,
        wrapped: WrappedKey,
    },
    /// Free-form audit trail note (grants, challenges, expiries).
    Note {
        kind: String,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub index: u64,
    pub prev_entry_hash: ContentHash,
    /// JSON encoding of the [`Event`].
    pub event: Vec<u8>,
    pub entry_hash: ContentHash,
}

impl LogEntry {
    pub fn compute_hash(index: u64, prev: &ContentHash, event: &[u8]) -> ContentHash {
        hash_fields(&[Field::U64(index), Field::Bytes(prev.as_bytes()), Field::Bytes(event)])
    }

    pub fn new(index: u64, prev_entry_hash: ContentHash, event: Vec<u8>) -> Self {
        let entry_hash = Self::compute_hash(index, &prev_entry_hash, &event);
        LogEntry { index, prev_entry_hash, event, entry_hash }
    }

    pub fn to_line(&self) -> String {
        hex::encode(canonical_encode(&[
            Field::U64(self.index),
            Field::Bytes(self.prev_entry_hash.as_bytes()),
            Field::Bytes(&self.event),
            Field::Bytes(self.entry_hash.as_bytes()),
        ]))
    }

    /// Parses one line. Only the exact lowercase hex form is accepted.
    pub fn from_line(line: &str) -> Option<LogEntry> {
        let bytes = hex::decode(line).ok()?;
        if hex::encode(&bytes) != line {
            return None;
        }
        let hash32 = |v: &Value| match v {
            Value::Bytes(b) => <[u8; 32]>::try_from(b.as_slice()).ok().map(ContentHash),
            _ => None,
        };
        match canonical_decode(&bytes).ok()?.as_slice() {
            [Value::U64(index), prev, Value::Bytes(event), hash] => Some(LogEntry {
                index: *index,
                prev_entry_hash: hash32(prev)?,
                event: event.clone(),
                entry_hash: hash32(hash)?,
            }),
            _ => None,
        }
    }

    pub fn decode_event(&self) -> Option<Event> {
        serde_json::from_slice(&self.event).ok()
    }
}

/// Result of a log verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogStatus {
    Ok,
    CorruptAt(u64),
}

/// Checks hash chaining and event decoding for a sequence of entries.
pub fn verify_entries(entries: &[LogEntry]) -> LogStatus {
    let mut prev = ContentHash::ZERO;
    for (i, e) in entries.iter().enumerate() {
        let i = i as u64;
        if e.index != i
            || e.prev_entry_hash != prev
            || e.entry_hash != LogEntry::compute_hash(e.index, &e.prev_entry_hash, &e.event)
            || e.decode_event().is_none()
        {
            return LogStatus::CorruptAt(i);
        }
        prev = e.entry_hash;
    }
    LogStatus::Ok
}

/// Parses and verifies a log file. Unreadable, truncated or malformed lines
/// report the index of the line they occupy.
pub fn verify_log_file(path: &Path) -> Result<LogStatus, RegistryError> {
    let bytes = std::fs::read(path)?;
    Ok(match parse_log(&bytes) {
        Ok(entries) => verify_entries(&entries),
        Err(index) => LogStatus::CorruptAt(index),
    })
}

fn parse_log(bytes: &[u8]) -> Result<Vec<LogEntry>, u64> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let text = std::str::from_utf8(bytes).map_err(|e| {
        // index of the line holding the first invalid byte
        bytes[..e.valid_up_to()].iter().filter(|b| **b == b'\n').count() as u64
    })?;
    let Some(body) = text.strip_suffix('\n') else {
        return Err(text.matches('\n').count() as u64);
    };
    body.split('\n')
        .enumerate()
        .map(|(i, line)| LogEntry::from_line(line).ok_or(i as u64))
        .collect()
}

/// Replayed registry state plus its log.
#[derive(Debug, Default)]
pub struct Registry {
    entries: Vec<LogEntry>,
    records: BTreeMap<ContentHash, SkillRecord>,
    /// `(developer, name)` to the newest approved version.
    approved: BTreeMap<(String, String), ContentHash>,
    deliveries: BTreeMap<(ContentHash, ExchangeKey), Vec<DeliveryRecord>>,
    /// Log index of each skill's promotion or rejection event.
    decided_at_index: BTreeMap<ContentHash, u64>,
    last_timestamp: BTreeMap<String, u64>,
    path: Option<PathBuf>,
    file: Option<File>,
}

impl Registry {
    /// In-memory registry.
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens (or creates) a log file, verifying and replaying it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let path = path.as_ref().to_path_buf();
        let bytes = if path.exists() { std::fs::read(&path)? } else { Vec::new() };
        let entries = parse_log(&bytes).map_err(RegistryError::LogCorrupt)?;
        if let LogStatus::CorruptAt(i) = verify_entries(&entries) {
            return Err(RegistryError::LogCorrupt(i));
        }
        let mut reg = Registry::new();
        for entry in entries {
            let event = entry.decode_event().ok_or(RegistryError::LogCorrupt(entry.index))?;
            reg.apply(&event, entry.index).map_err(|_| RegistryError::LogCorrupt(entry.index))?;
            reg.entries.push(entry);
        }
        reg.file = Some(OpenOptions::new().create(true).append(true).open(&path)?);
        reg.path = Some(path);
        Ok(reg)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn head(&self) -> ContentHash {
        self.entries.last().map(|e| e.entry_hash).unwrap_or(ContentHash::ZERO)
    }

    pub fn verify_log(&self) -> LogStatus {
        verify_entries(&self.entries)
    }

    pub fn records(&self) -> impl Iterator<Item = &SkillRecord> {
        self.records.values()
    }

    /// Appends an event without state checks beyond replay validity.
    pub fn append(&mut self, event: Event) -> Result<u64, RegistryError> {
        let index = self.entries.len() as u64;
        self.apply(&event, index)?;
        let bytes = serde_json::to_vec(&event).expect("events serialize");
        let entry = LogEntry::new(index, self.head(), bytes);
        if let Some(file) = self.file.as_mut() {
            let mut line = entry.to_line();
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.entries.push(entry);
        Ok(index)
    }

    /// State transition for one event. Rejects events that would be invalid.
    fn apply(&mut self, event: &Event, index: u64) -> Result<(), RegistryError> {
        match event {
            Event::Commit { record } => {
                self.check_commit(record)?;
                self.last_timestamp.insert(record.developer.clone(), record.timestamp);
                self.records.insert(record.skill_id, record.clone());
            }
            Event::Promotion { skill_id, outcome } => {
                let rec = self.pending(skill_id)?;
                check_outcome(skill_id, outcome)?;
                if !outcome.approved {
                    return Err(RegistryError::OutcomeNotApproved(*skill_id));
                }
                let key = (rec.developer.clone(), rec.name.clone());
                let rec = self.records.get_mut(skill_id).expect("checked");
                rec.status = SkillStatus::Approved;
                rec.audit_report = Some(outcome.clone());
                self.approved.insert(key, *skill_id);
                self.decided_at_index.insert(*skill_id, index);
            }
            Event::Rejection { skill_id, outcome } => {
                self.pending(skill_id)?;
                check_outcome(skill_id, outcome)?;
                if outcome.approved {
                    return Err(RegistryError::OutcomeMismatch);
                }
                let rec = self.records.get_mut(skill_id).expect("checked");
                rec.status = SkillStatus::Rejected;
                rec.audit_report = Some(outcome.clone());
                self.decided_at_index.insert(*skill_id, index);
            }
            Event::Delivery { skill_id, recipient, wrapped } => {
                self.check_delivery(skill_id, wrapped.context)?;
                self.deliveries.entry((*skill_id, *recipient)).or_default().push(DeliveryRecord {
                    skill_id: *skill_id,
                    recipient: *recipient,
                    wrapped: wrapped.clone(),
                    log_index: index,
                });
            }
            _ => {}
        }
        Ok(())
    }

    fn pending(&self, id: &ContentHash) -> Result<&SkillRecord, RegistryError> {
        let rec = self.records.get(id).ok_or_else(|| RegistryError::NotFound(id.to_hex()))?;
        if rec.status != SkillStatus::Pending {
            return Err(RegistryError::NotPending(*id));
        }
        Ok(rec)
    }

    fn check_commit(&self, record: &SkillRecord) -> Result<(), RegistryError> {
        if record.status != SkillStatus::Pending || record.audit_report.is_some() {
            return Err(RegistryError::PayloadMismatch("new records must be pending"));
        }
        if record.expected_id() != record.skill_id {
            return Err(RegistryError::PayloadMismatch("skill_id does not match its inputs"));
        }
        if self.records.contains_key(&record.skill_id) {
            return Err(RegistryError::Duplicate(record.skill_id));
        }
        if record.name.is_empty() || record.name.contains('/') {
            return Err(RegistryError::Manifest("skill name must be nonempty and contain no '/'".into()));
        }
        record.manifest.validate()?;
        match (record.publication_type, &record.payload) {
            (PublicationType::Transparent, Payload::Plaintext { content }) => {
                if content_hash(content) != record.content_hash {
                    return Err(RegistryError::PayloadMismatch("content_hash differs from the plaintext digest"));
                }
            }
            (PublicationType::Licensed | PublicationType::Sealed, Payload::Ciphertext { .. }) => {}
            (PublicationType::Committed, Payload::None) => {}
            (PublicationType::Transparent, _) => return Err(RegistryError::PayloadMismatch("Transparent needs plaintext")),
            (PublicationType::Committed, _) => return Err(RegistryError::PayloadMismatch("Committed stores only a hash")),
            _ => return Err(RegistryError::PayloadMismatch("Licensed and Sealed need ciphertext")),
        }
        if let Some(prev) = &record.prev_version {
            let p = self.records.get(prev).ok_or(RegistryError::PrevNotFound(*prev))?;
            if p.developer != record.developer {
                return Err(RegistryError::PrevOwnedByOther(*prev));
            }
        }
        if let Some(&last) = self.last_timestamp.get(&record.developer) {
            if record.timestamp < last {
                return Err(RegistryError::TimestampRegression { last, got: record.timestamp });
            }
        }
        Ok(())
    }

    fn check_delivery(&self, skill_id: &ContentHash, context: KeyContext) -> Result<(), RegistryError> {
        let rec = self.records.get(skill_id).ok_or_else(|| RegistryError::NotFound(skill_id.to_hex()))?;
        match (rec.publication_type, context) {
            (PublicationType::Licensed | PublicationType::Sealed, KeyContext::Audit) => {
                if rec.status != SkillStatus::Pending {
                    return Err(RegistryError::NotPending(*skill_id));
                }
            }
            (PublicationType::Licensed, KeyContext::License) => {
                if rec.status != SkillStatus::Approved {
                    return Err(RegistryError::NotApproved(*skill_id));
                }
            }
            (t, _) => return Err(RegistryError::WrongType(t)),
        }
        Ok(())
    }

    /// Records a pending skill and returns its id.
    pub fn commit_skill(&mut self, req: CommitRequest) -> Result<ContentHash, RegistryError> {
        let record = SkillRecord {
            skill_id: req.skill_id(),
            name: req.name,
            developer: req.developer,
            developer_key: req.developer_key,
            publication_type: req.publication_type,
            payload: req.payload,
            content_hash: req.content_hash,
            manifest: req.manifest,
            prev_version: req.prev_version,
            timestamp: req.timestamp,
            status: SkillStatus::Pending,
            audit_report: None,
        };
        let id = record.skill_id;
        self.append(Event::Commit { record })?;
        Ok(id)
    }

    /// Moves a pending skill into the approved registry.
    pub fn promote(&mut self, skill_id: &ContentHash, outcome: &AuditOutcome) -> Result<&SkillRecord, RegistryError> {
        self.pending(skill_id)?;
        if !outcome.approved {
            return Err(RegistryError::OutcomeNotApproved(*skill_id));
        }
        self.append(Event::Promotion { skill_id: *skill_id, outcome: outcome.clone() })?;
        Ok(&self.records[skill_id])
    }

    pub fn reject(&mut self, skill_id: &ContentHash, outcome: &AuditOutcome) -> Result<&SkillRecord, RegistryError> {
        self.pending(skill_id)?;
        self.append(Event::Rejection { skill_id: *skill_id, outcome: outcome.clone() })?;
        Ok(&self.records[skill_id])
    }

    /// Promotes or rejects according to the outcome.
    pub fn finalize(&mut self, skill_id: &ContentHash, outcome: &AuditOutcome) -> Result<&SkillRecord, RegistryError> {
        if outcome.approved {
            self.promote(skill_id, outcome)
        } else {
            self.reject(skill_id, outcome)
        }
    }

    pub fn get_by_id(&self, id: &ContentHash) -> Result<&SkillRecord, RegistryError> {
        self.records.get(id).ok_or_else(|| RegistryError::NotFound(id.to_hex()))
    }

    /// Resolves a 64-hex id (any status), `developer/name`, or a bare name
    /// (newest approved version; must be unique across developers).
    pub fn get_skill(&self, query: &str) -> Result<&SkillRecord, RegistryError> {
        if query.len() == 64 {
            if let Ok(id) = ContentHash::from_hex(query) {
                return self.get_by_id(&id);
            }
        }
        let not_found = || RegistryError::NotFound(query.to_string());
        let id = match query.split_once('/') {
            Some((dev, name)) => *self.approved.get(&(dev.to_string(), name.to_string())).ok_or_else(not_found)?,
            None => {
                let mut hits = self.approved.iter().filter(|((_, n), _)| n == query);
                let (_, id) = hits.next().ok_or_else(not_found)?;
                if hits.next().is_some() {
                    return Err(RegistryError::Ambiguous(query.to_string()));
                }
                *id
            }
        };
        self.get_by_id(&id)
    }

    /// Oldest-first chain ending at `skill_id`.
    pub fn version_history(&self, skill_id: &ContentHash) -> Result<Vec<&SkillRecord>, RegistryError> {
        let mut chain = vec![self.get_by_id(skill_id)?];
        let mut seen = BTreeSet::from([*skill_id]);
        while let Some(prev) = chain.last().and_then(|r| r.prev_version) {
            if !seen.insert(prev) {
                return Err(RegistryError::BrokenChain(prev));
            }
            chain.push(self.records.get(&prev).ok_or(RegistryError::BrokenChain(prev))?);
        }
        chain.reverse();
        Ok(chain)
    }

    /// Publishes a wrapped key on the log. Audit deliveries need a pending
    /// Licensed or Sealed skill; license deliveries an approved Licensed one.
    pub fn post_key_delivery(
        &mut self,
        skill_id: &ContentHash,
        recipient: ExchangeKey,
        wrapped: WrappedKey,
    ) -> Result<DeliveryRecord, RegistryError> {
        self.check_delivery(skill_id, wrapped.context)?;
        let index = self.append(Event::Delivery { skill_id: *skill_id, recipient, wrapped })?;
        Ok(self.deliveries[&(*skill_id, recipient)]
            .iter()
            .find(|d| d.log_index == index)
            .expect("just appended")
            .clone())
    }

    /// Log index of the event that promoted or rejected `skill_id`.
    pub fn decision_index(&self, skill_id: &ContentHash) -> Option<u64> {
        self.decided_at_index.get(skill_id).copied()
    }

    pub fn deliveries(&self, skill_id: &ContentHash, recipient: &ExchangeKey) -> &[DeliveryRecord] {
        self.deliveries.get(&(*skill_id, *recipient)).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Removes a record from the replayed view only. Used to exercise
    /// corruption handling of version chains.
    #[doc(hidden)]
    pub fn forget_record_for_testing(&mut self, id: &ContentHash) {
        self.records.remove(id);
    }
}

fn check_outcome(skill_id: &ContentHash, outcome: &AuditOutcome) -> Result<(), RegistryError> {
    if outcome.skill_id != *skill_id {
        return Err(RegistryError::OutcomeMismatch);
    }
    for v in &outcome.verdicts {
        if v.skill_id != *skill_id || v.verify(&v.signature.signer).is_err() {
            return Err(RegistryError::BadVerdict(v.auditor.clone()));
        }
    }
    Ok(())
}
