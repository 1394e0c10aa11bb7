//! Verified loading: the only path from a registry record to released
//! skill content.
//!
//! For every target the loader resolves the record, checks approval and
//! access, recovers the plaintext, verifies it against the recorded
//! `content_hash`, and finally checks the shared permission envelope against
//! the user's scope. Any failure aborts the whole load.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon::{content_hash, ContentHash};
use crate::crypto::{
    decrypt_content, derive_delivery_key, ecdh_shared_secret, license_binding, sealing_key, unwrap_content_key,
    ContentKey, KeyContext, KeyPair,
};
use crate::registry::{
    LogStatus, PermissionManifest, PublicationType, Registry, RegistryError, SkillRecord, SkillStatus,
};

/// Machine-readable refusal reasons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefusalKind {
    NotFound,
    NotApproved,
    AccessDenied,
    DecryptionFailure,
    IntegrityMismatch,
    PermissionExceeded,
    LogCorrupt,
    InvalidRequest,
}

impl RefusalKind {
    pub fn code(self) -> &'static str {
        match self {
            RefusalKind::NotFound => "not-found",
            RefusalKind::NotApproved => "not-approved",
            RefusalKind::AccessDenied => "access-denied",
            RefusalKind::DecryptionFailure => "decryption-failure",
            RefusalKind::IntegrityMismatch => "integrity-mismatch",
            RefusalKind::PermissionExceeded => "permission-exceeded",
            RefusalKind::LogCorrupt => "log-corrupt",
            RefusalKind::InvalidRequest => "invalid-request",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoadStep {
    LogVerification,
    Resolve,
    AccessCheck,
    Retrieve,
    LocalVerification,
    PermissionCheck,
}

/// Items a user must additionally authorize.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Escalation {
    pub tools: BTreeSet<String>,
    pub scopes: BTreeSet<String>,
}

impl Escalation {
    pub fn is_empty(&self) -> bool {
        self.tools.is_empty() && self.scopes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{} at {step:?} for {target}: {detail}", kind.code())]
pub struct Refusal {
    pub kind: RefusalKind,
    pub step: LoadStep,
    /// Query or skill id that failed.
    pub target: String,
    pub detail: String,
    pub escalation: Option<Escalation>,
}

impl Refusal {
    fn new(kind: RefusalKind, step: LoadStep, target: impl Into<String>, detail: impl Into<String>) -> Self {
        Refusal { kind, step, target: target.into(), detail: detail.into(), escalation: None }
    }
}

/// The user's authorized tools and data scopes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserScope {
    pub tools: BTreeSet<String>,
    pub scopes: BTreeSet<String>,
}

impl UserScope {
    pub fn new<T, D>(tools: T, scopes: D) -> Self
    where
        T: IntoIterator,
        T::Item: Into<String>,
        D: IntoIterator,
        D::Item: Into<String>,
    {
        UserScope {
            tools: tools.into_iter().map(Into::into).collect(),
            scopes: scopes.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadTarget {
    /// Hex id, `developer/name`, or bare name.
    pub query: String,
    /// Required for Committed skills, rejected for all others.
    pub local_path: Option<PathBuf>,
}

impl LoadTarget {
    pub fn registry(query: impl Into<String>) -> Self {
        LoadTarget { query: query.into(), local_path: None }
    }

    pub fn local(query: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        LoadTarget { query: query.into(), local_path: Some(path.into()) }
    }
}

pub struct LoadRequest<'a> {
    pub targets: Vec<LoadTarget>,
    pub requester: &'a KeyPair,
    pub user_scope: UserScope,
}

/// Intersections are granted; per-item differences are denied by default.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermissionEnvelope {
    pub granted_tools: BTreeSet<String>,
    pub granted_scopes: BTreeSet<String>,
    /// Every declared bound of every skill must hold.
    pub granted_bounds: BTreeSet<String>,
    pub escalation_tools: BTreeSet<String>,
    pub escalation_scopes: BTreeSet<String>,
}

fn intersect_all<'a>(mut sets: impl Iterator<Item = &'a BTreeSet<String>>) -> BTreeSet<String> {
    let Some(first) = sets.next() else {
        return BTreeSet::new();
    };
    sets.fold(first.clone(), |acc, s| acc.intersection(s).cloned().collect())
}

fn union_all<'a>(sets: impl Iterator<Item = &'a BTreeSet<String>>) -> BTreeSet<String> {
    sets.flatten().cloned().collect()
}

/// Shared envelope of several manifests.
pub fn permission_envelope(manifests: &[PermissionManifest]) -> PermissionEnvelope {
    let granted_tools = intersect_all(manifests.iter().map(|m| &m.declared_tools));
    let granted_scopes = intersect_all(manifests.iter().map(|m| &m.data_scope));
    let all_tools = union_all(manifests.iter().map(|m| &m.declared_tools));
    let all_scopes = union_all(manifests.iter().map(|m| &m.data_scope));
    PermissionEnvelope {
        escalation_tools: all_tools.difference(&granted_tools).cloned().collect(),
        escalation_scopes: all_scopes.difference(&granted_scopes).cloned().collect(),
        granted_tools,
        granted_scopes,
        granted_bounds: union_all(manifests.iter().map(|m| &m.behavior_bounds)),
    }
}

fn excess(tools: &BTreeSet<String>, scopes: &BTreeSet<String>, user: &UserScope) -> Result<(), Escalation> {
    let esc = Escalation {
        tools: tools.difference(&user.tools).cloned().collect(),
        scopes: scopes.difference(&user.scopes).cloned().collect(),
    };
    if esc.is_empty() {
        Ok(())
    } else {
        Err(esc)
    }
}

/// `declared_tools ⊆ T_user` and `data_scope ⊆ D_user`; otherwise the excess.
pub fn permission_check_single(manifest: &PermissionManifest, user: &UserScope) -> Result<(), Escalation> {
    excess(&manifest.declared_tools, &manifest.data_scope, user)
}

/// Granted intersections must lie within the user's scope.
pub fn envelope_check(envelope: &PermissionEnvelope, user: &UserScope) -> Result<(), Escalation> {
    excess(&envelope.granted_tools, &envelope.granted_scopes, user)
}

/// Type-specific access gate.
pub fn access_check(
    registry: &Registry,
    record: &SkillRecord,
    requester: &KeyPair,
    local_path: Option<&Path>,
) -> Result<(), Refusal> {
    let deny = |detail: &str| {
        Err(Refusal::new(RefusalKind::AccessDenied, LoadStep::AccessCheck, record.skill_id.to_hex(), detail))
    };
    match record.publication_type {
        PublicationType::Transparent | PublicationType::Sealed => Ok(()),
        PublicationType::Licensed => {
            if registry.deliveries(&record.skill_id, &requester.public_key()).is_empty() {
                deny("no license delivery recorded for this requester")
            } else {
                Ok(())
            }
        }
        PublicationType::Committed => {
            if local_path.is_some() {
                Ok(())
            } else {
                deny("committed skills load from a local file")
            }
        }
    }
}

fn licensed_key(registry: &Registry, record: &SkillRecord, requester: &KeyPair) -> Option<ContentKey> {
    let pk_b = requester.public_key();
    let shared = ecdh_shared_secret(requester, &record.developer_key).ok()?;
    let k_b = derive_delivery_key(&shared, KeyContext::License, &license_binding(&record.skill_id, &pk_b, &record.developer_key));
    registry
        .deliveries(&record.skill_id, &pk_b)
        .iter()
        .rev()
        .filter(|d| d.wrapped.context == KeyContext::License)
        .find_map(|d| unwrap_content_key(&d.wrapped, &k_b, &record.skill_id).ok())
}

/// Recovers and hash-checks the plaintext. Committed skills read the local
/// file; their hash check is [`verify_local`].
pub fn retrieve_plaintext(
    registry: &Registry,
    record: &SkillRecord,
    requester: &KeyPair,
    local_path: Option<&Path>,
) -> Result<Vec<u8>, Refusal> {
    let id = record.skill_id.to_hex();
    let fail = |kind, detail: &str| Refusal::new(kind, LoadStep::Retrieve, id.clone(), detail);
    let plaintext = match record.publication_type {
        PublicationType::Transparent => record
            .plaintext()
            .ok_or_else(|| fail(RefusalKind::IntegrityMismatch, "record carries no plaintext"))?
            .to_vec(),
        PublicationType::Licensed | PublicationType::Sealed => {
            let blob = record
                .ciphertext()
                .ok_or_else(|| fail(RefusalKind::IntegrityMismatch, "record carries no ciphertext"))?;
            let key = if record.publication_type == PublicationType::Licensed {
                licensed_key(registry, record, requester)
                    .ok_or_else(|| fail(RefusalKind::DecryptionFailure, "no delivery unwraps under the requester key"))?
            } else {
                let k = sealing_key(requester, &record.skill_id)
                    .map_err(|e| fail(RefusalKind::DecryptionFailure, &e.to_string()))?;
                ContentKey::from_bytes(k.to_bytes())
            };
            decrypt_content(blob, &key, &record.skill_id)
                .map_err(|_| fail(RefusalKind::DecryptionFailure, "content authentication failed"))?
        }
        PublicationType::Committed => {
            let path = local_path.ok_or_else(|| fail(RefusalKind::AccessDenied, "no local path"))?;
            return std::fs::read(path).map_err(|e| fail(RefusalKind::AccessDenied, &format!("cannot read local file: {e}")));
        }
    };
    if content_hash(&plaintext) != record.content_hash {
        return Err(fail(RefusalKind::IntegrityMismatch, "plaintext does not hash to the recorded content_hash"));
    }
    Ok(plaintext)
}

/// `H(local) == content_hash`.
pub fn verify_local(local: &[u8], record: &SkillRecord) -> Result<(), Refusal> {
    if content_hash(local) == record.content_hash {
        Ok(())
    } else {
        Err(Refusal::new(
            RefusalKind::IntegrityMismatch,
            LoadStep::LocalVerification,
            record.skill_id.to_hex(),
            "local file does not hash to the recorded content_hash",
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Log index of the promotion event.
    pub log_index: u64,
    pub outcome_digest: ContentHash,
    pub log_head: ContentHash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifiedSkill {
    pub skill_id: ContentHash,
    pub name: String,
    pub developer: String,
    pub publication_type: PublicationType,
    /// UTF-8 text when valid, otherwise lowercase hex (see `content_encoding`).
    pub content: String,
    pub content_encoding: String,
    pub content_hash: ContentHash,
    pub manifest: PermissionManifest,
    pub provenance: Provenance,
}

impl VerifiedSkill {
    pub fn content_bytes(&self) -> Vec<u8> {
        if self.content_encoding == "hex" {
            hex::decode(&self.content).unwrap_or_default()
        } else {
            self.content.clone().into_bytes()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadResult {
    pub skills: Vec<VerifiedSkill>,
    pub envelope: PermissionEnvelope,
}

impl LoadResult {
    /// Structured text a host agent would inject.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("load results serialize")
    }
}

fn resolve<'r>(registry: &'r Registry, query: &str) -> Result<&'r SkillRecord, Refusal> {
    let record = registry.get_skill(query).map_err(|e| {
        let kind = match e {
            RegistryError::NotFound(_) | RegistryError::Ambiguous(_) => RefusalKind::NotFound,
            _ => RefusalKind::InvalidRequest,
        };
        Refusal::new(kind, LoadStep::Resolve, query, e.to_string())
    })?;
    if record.status != SkillStatus::Approved {
        return Err(Refusal::new(
            RefusalKind::NotApproved,
            LoadStep::Resolve,
            query,
            format!("skill is {:?}", record.status).to_lowercase(),
        ));
    }
    Ok(record)
}

/// Loads every target or none.
pub fn load(registry: &Registry, request: &LoadRequest<'_>) -> Result<LoadResult, Refusal> {
    if let LogStatus::CorruptAt(i) = registry.verify_log() {
        return Err(Refusal::new(RefusalKind::LogCorrupt, LoadStep::LogVerification, "registry", format!("entry {i}")));
    }
    if request.targets.is_empty() {
        return Err(Refusal::new(RefusalKind::InvalidRequest, LoadStep::Resolve, "", "no targets"));
    }
    let mut staged = Vec::with_capacity(request.targets.len());
    for target in &request.targets {
        let record = resolve(registry, &target.query)?;
        let local = target.local_path.as_deref();
        if record.publication_type != PublicationType::Committed && local.is_some() {
            return Err(Refusal::new(
                RefusalKind::InvalidRequest,
                LoadStep::AccessCheck,
                &target.query,
                "only committed skills take a local path",
            ));
        }
        access_check(registry, record, request.requester, local)?;
        let plaintext = retrieve_plaintext(registry, record, request.requester, local)?;
        if record.publication_type == PublicationType::Committed {
            verify_local(&plaintext, record)?;
        }
        staged.push((record, plaintext));
    }

    let manifests: Vec<PermissionManifest> = staged.iter().map(|(r, _)| r.manifest.clone()).collect();
    let envelope = permission_envelope(&manifests);
    if let Err(esc) = envelope_check(&envelope, &request.user_scope) {
        let mut r = Refusal::new(
            RefusalKind::PermissionExceeded,
            LoadStep::PermissionCheck,
            staged.iter().map(|(r, _)| r.qualified_name()).collect::<Vec<_>>().join(","),
            "granted permissions exceed the user scope",
        );
        r.escalation = Some(esc);
        return Err(r);
    }

    let head = registry.head();
    let skills = staged
        .into_iter()
        .map(|(record, plaintext)| {
            let (content, content_encoding) = match String::from_utf8(plaintext) {
                Ok(s) => (s, "utf-8"),
                Err(e) => (hex::encode(e.as_bytes()), "hex"),
            };
            VerifiedSkill {
                skill_id: record.skill_id,
                name: record.name.clone(),
                developer: record.developer.clone(),
                publication_type: record.publication_type,
                content,
                content_encoding: content_encoding.to_string(),
                content_hash: record.content_hash,
                manifest: record.manifest.clone(),
                provenance: Provenance {
                    log_index: registry.decision_index(&record.skill_id).unwrap_or_default(),
                    outcome_digest: record.audit_report.as_ref().map(|o| o.digest()).unwrap_or_default(),
                    log_head: head,
                },
            }
        })
        .collect();
    Ok(LoadResult { skills, envelope })
}

/// Opens and verifies a log file, then loads from it.
pub fn load_from_log(path: &Path, request: &LoadRequest<'_>) -> Result<LoadResult, Refusal> {
    let registry = Registry::open(path).map_err(|e| match e {
        RegistryError::LogCorrupt(i) => {
            Refusal::new(RefusalKind::LogCorrupt, LoadStep::LogVerification, path.display().to_string(), format!("entry {i}"))
        }
        other => Refusal::new(RefusalKind::LogCorrupt, LoadStep::LogVerification, path.display().to_string(), other.to_string()),
    })?;
    load(&registry, request)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(tools: &[&str], scopes: &[&str], bounds: &[&str]) -> PermissionManifest {
        PermissionManifest::new(tools.iter().copied(), scopes.iter().copied(), bounds.iter().copied())
    }

    #[test]
    fn single_manifest_envelope_is_identity() {
        let a = m(&["x", "y"], &["s"], &["b"]);
        let env = permission_envelope(std::slice::from_ref(&a));
        assert_eq!(env.granted_tools, a.declared_tools);
        assert_eq!(env.granted_scopes, a.data_scope);
        assert_eq!(env.granted_bounds, a.behavior_bounds);
        assert!(env.escalation_tools.is_empty() && env.escalation_scopes.is_empty());
    }

    #[test]
    fn two_manifest_example() {
        let env = permission_envelope(&[m(&["a", "b"], &[], &["p"]), m(&["b", "c"], &[], &["q"])]);
        assert_eq!(env.granted_tools, BTreeSet::from(["b".to_string()]));
        assert_eq!(env.escalation_tools, BTreeSet::from(["a".to_string(), "c".to_string()]));
        assert_eq!(env.granted_bounds.len(), 2);
    }

    #[test]
    fn single_check_reports_excess() {
        let user = UserScope::new(["read"], ["ws"]);
        assert!(permission_check_single(&m(&["read"], &["ws"], &[]), &user).is_ok());
        let esc = permission_check_single(&m(&["read", "net"], &["ws"], &[]), &user).unwrap_err();
        assert_eq!(esc.tools, BTreeSet::from(["net".to_string()]));
        assert!(esc.scopes.is_empty());
        assert!(permission_check_single(&PermissionManifest::default(), &UserScope::default()).is_ok());
    }

    #[test]
    fn refusal_codes_are_distinct() {
        let kinds = [
            RefusalKind::NotFound,
            RefusalKind::NotApproved,
            RefusalKind::AccessDenied,
            RefusalKind::DecryptionFailure,
            RefusalKind::IntegrityMismatch,
            RefusalKind::PermissionExceeded,
            RefusalKind::LogCorrupt,
            RefusalKind::InvalidRequest,
        ];
        let codes: BTreeSet<_> = kinds.iter().map(|k| k.code()).collect();
        assert_eq!(codes.len(), kinds.len());
    }
}
