//! End-to-end protocol facade tying registry, audit book, ledger and loader
//! together. Every state change that matters to third parties is appended to
//! the registry log.

use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{
    deliver_audit_keys, recover_audit_key, AuditDelivery, AuditError, AuditOutcome, AuditorId, TaskPhase, Verdict,
};
use crate::canon::{content_hash, ContentHash};
use crate::crypto::{
    decrypt_content, derive_delivery_key, ecdh_shared_secret, encrypt_content, license_binding, sealing_key,
    wrap_content_key, ContentBlob, ContentKey, CryptoError, ExchangeKey, Identity, KeyContext, KeyPair,
};
use crate::economics::{
    complete_purchase, escrow_publication_fee, expire_purchase, fee_from_r_base, freeze_delivery_bond,
    purchase_licensed, r_base, settle_audit, EconomicParams, ExpiryRecord, FlowError, FlowKind,
    Ledger, LedgerError, ParamError, Party, PurchaseRecord, RewardDestination, SettlementRecord, TcAmount,
};
use crate::registry::{
    CommitRequest, DeliveryRecord, Event, Payload, PermissionManifest, PublicationType, Registry, RegistryError,
    SkillStatus,
};
use crate::svl::{self, LoadRequest, LoadResult, Refusal};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Refused(#[from] Refusal),
    #[error("{0}")]
    Invalid(String),
}

/// Off-registry facts about a published skill.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Listing {
    pub developer: String,
    pub skill_tokens: u64,
    pub license_price: Option<TcAmount>,
}

/// Serializable protocol state; the registry log is persisted separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolState {
    pub params: EconomicParams,
    pub ledger: Ledger,
    pub book: crate::audit::AuditBook,
    pub listings: BTreeMap<ContentHash, Listing>,
    pub purchases: Vec<PurchaseRecord>,
}

impl ProtocolState {
    pub fn genesis(params: EconomicParams, allocations: &[(&str, TcAmount)]) -> Result<Self, ProtocolError> {
        params.validate()?;
        Ok(ProtocolState {
            ledger: Ledger::genesis(params.treasury_seed, allocations),
            params,
            book: Default::default(),
            listings: BTreeMap::new(),
            purchases: Vec::new(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct PublishRequest {
    pub name: String,
    pub publication_type: PublicationType,
    pub content: Vec<u8>,
    pub manifest: PermissionManifest,
    pub prev_version: Option<ContentHash>,
    pub timestamp: u64,
    /// Skill size in LLM tokens; defaults to one token per four bytes.
    pub skill_tokens: Option<u64>,
    /// Licensed only.
    pub license_price: Option<TcAmount>,
    /// Licensed only; defaults to the price.
    pub delivery_bond: Option<TcAmount>,
}

impl PublishRequest {
    pub fn new(name: &str, publication_type: PublicationType, content: impl Into<Vec<u8>>, manifest: PermissionManifest, timestamp: u64) -> Self {
        PublishRequest {
            name: name.to_string(),
            publication_type,
            content: content.into(),
            manifest,
            prev_version: None,
            timestamp,
            skill_tokens: None,
            license_price: None,
            delivery_bond: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Published {
    pub skill_id: ContentHash,
    pub content_hash: ContentHash,
    /// Key the developer keeps: the license content key, the sealing key,
    /// or the key for the off-log Committed audit copy.
    pub content_key: Option<ContentKey>,
    pub fee: TcAmount,
}

/// Audit material for a Committed skill travels off-log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffLogAuditPackage {
    pub blob: ContentBlob,
    pub deliveries: Vec<AuditDelivery>,
}

#[derive(Debug, Clone)]
pub struct TallyResult {
    pub outcome: AuditOutcome,
    pub settlement: SettlementRecord,
}

pub struct Sigil {
    pub registry: Registry,
    pub state: ProtocolState,
    pub reward_destination: RewardDestination,
}

impl Sigil {
    pub fn new(registry: Registry, state: ProtocolState) -> Self {
        Sigil { registry, state, reward_destination: RewardDestination::Account }
    }

    pub fn in_memory(params: EconomicParams, allocations: &[(&str, TcAmount)]) -> Result<Self, ProtocolError> {
        Ok(Self::new(Registry::new(), ProtocolState::genesis(params, allocations)?))
    }

    pub fn params(&self) -> &EconomicParams {
        &self.state.params
    }

    pub fn ledger(&self) -> &Ledger {
        &self.state.ledger
    }

    /// Treasury-funded grant to an account.
    pub fn grant(&mut self, account: &str, amount: TcAmount) -> Result<(), ProtocolError> {
        self.state
            .ledger
            .transfer(FlowKind::Grant, &Party::Treasury, &Party::Account(account.to_string()), amount)?;
        self.registry.append(Event::Note { kind: "grant".into(), detail: format!("{account} {}", amount.0) })?;
        Ok(())
    }

    /// Runs a ledger-touching step and restores the ledger and book if it fails.
    fn atomically<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T, ProtocolError>) -> Result<T, ProtocolError> {
        let ledger = self.state.ledger.clone();
        let book = self.state.book.clone();
        let listings = self.state.listings.clone();
        let purchases = self.state.purchases.clone();
        let result = f(self);
        if result.is_err() {
            self.state.ledger = ledger;
            self.state.book = book;
            self.state.listings = listings;
            self.state.purchases = purchases;
        }
        result
    }

    /// Encrypts as the type requires, escrows the fee, commits the record and
    /// opens its audit task.
    pub fn publish<R: RngCore + CryptoRng>(
        &mut self,
        developer: &str,
        keys: &KeyPair,
        req: PublishRequest,
        rng: &mut R,
    ) -> Result<Published, ProtocolError> {
        let h = content_hash(&req.content);
        let payload = match req.publication_type {
            PublicationType::Transparent => Payload::Plaintext { content: req.content.clone() },
            _ => Payload::None,
        };
        let mut commit = CommitRequest {
            developer: developer.to_string(),
            developer_key: keys.public_key(),
            name: req.name.clone(),
            publication_type: req.publication_type,
            payload,
            content_hash: h,
            manifest: req.manifest.clone(),
            prev_version: req.prev_version,
            timestamp: req.timestamp,
        };
        let skill_id = commit.skill_id();
        let content_key = match req.publication_type {
            PublicationType::Transparent => None,
            PublicationType::Sealed => Some(ContentKey::from_bytes(sealing_key(keys, &skill_id)?.to_bytes())),
            PublicationType::Licensed | PublicationType::Committed => Some(ContentKey::generate(rng)),
        };
        if req.publication_type.is_encrypted() {
            let key = content_key.as_ref().expect("encrypted types have a key");
            commit.payload = Payload::Ciphertext { blob: encrypt_content(&req.content, key, &skill_id, rng) };
        }
        let price = match (req.publication_type, req.license_price) {
            (PublicationType::Licensed, Some(p)) => Some(p),
            (PublicationType::Licensed, None) => return Err(ProtocolError::Invalid("licensed skills need a price".into())),
            (_, Some(_)) => return Err(ProtocolError::Invalid("only licensed skills carry a price".into())),
            _ => None,
        };
        let tokens = req.skill_tokens.unwrap_or(req.content.len() as u64 / 4);

        self.atomically(|s| {
            let params = s.state.params.clone();
            let rb = r_base(tokens, &params);
            let fee = fee_from_r_base(rb, &params);
            escrow_publication_fee(&mut s.state.ledger, &skill_id, developer, fee)?;
            if let Some(p) = price {
                freeze_delivery_bond(&mut s.state.ledger, &skill_id, developer, req.delivery_bond.unwrap_or(p).max(p))?;
            }
            s.state
                .book
                .open_task(skill_id, developer, req.publication_type, rb, req.timestamp, &params)?;
            s.state.listings.insert(
                skill_id,
                Listing { developer: developer.to_string(), skill_tokens: tokens, license_price: price },
            );
            let id = s.registry.commit_skill(commit)?;
            debug_assert_eq!(id, skill_id);
            Ok(Published { skill_id, content_hash: h, content_key, fee: fee.total })
        })
    }

    pub fn register_auditor(&mut self, id: &str, identity: &Identity, stake: TcAmount) -> Result<(), ProtocolError> {
        let params = self.state.params.clone();
        self.atomically(|s| {
            s.state.book.register_auditor(
                &mut s.state.ledger,
                id,
                identity.exchange_key(),
                identity.verifier_key(),
                stake,
                &params,
            )?;
            s.registry.append(Event::AuditorRegistered {
                auditor: id.to_string(),
                exchange_key: identity.exchange_key(),
                verifier_key: identity.verifier_key(),
                stake,
            })?;
            Ok(())
        })
    }

    pub fn claim(
        &mut self,
        skill_id: &ContentHash,
        auditor: &str,
        deposit: TcAmount,
        bond: TcAmount,
        now: u64,
    ) -> Result<TaskPhase, ProtocolError> {
        let params = self.state.params.clone();
        self.atomically(|s| {
            let phase = s.state.book.claim_task(&mut s.state.ledger, skill_id, auditor, deposit, bond, now, &params)?;
            s.registry.append(Event::Claim { skill_id: *skill_id, auditor: auditor.to_string(), deposit, bond })?;
            Ok(phase)
        })
    }

    /// Wraps the content key for every claimant. Licensed and Sealed
    /// deliveries are posted on the log; Committed ones are returned together
    /// with an encrypted copy of the content for off-log transfer.
    pub fn deliver_audit_keys<R: RngCore + CryptoRng>(
        &mut self,
        skill_id: &ContentHash,
        developer: &KeyPair,
        content_key: &ContentKey,
        committed_content: Option<&[u8]>,
        rng: &mut R,
    ) -> Result<Option<OffLogAuditPackage>, ProtocolError> {
        let record = self.registry.get_by_id(skill_id)?.clone();
        if record.developer_key != developer.public_key() {
            return Err(ProtocolError::Invalid("only the developer delivers audit keys".into()));
        }
        let claimants = self.state.book.claimant_keys(skill_id)?;
        let deliveries =
            deliver_audit_keys(skill_id, record.publication_type, developer, content_key, &claimants, rng)?;
        if record.publication_type == PublicationType::Committed {
            let content = committed_content
                .ok_or_else(|| ProtocolError::Invalid("committed audits need the local content".into()))?;
            if content_hash(content) != record.content_hash {
                return Err(ProtocolError::Invalid("local content does not match the committed hash".into()));
            }
            let blob = encrypt_content(content, content_key, skill_id, rng);
            return Ok(Some(OffLogAuditPackage { blob, deliveries }));
        }
        for d in deliveries {
            self.registry.post_key_delivery(skill_id, d.recipient, d.wrapped)?;
        }
        Ok(None)
    }

    /// Auditor side: recover and hash-check the plaintext under review.
    pub fn fetch_audit_content(
        &self,
        skill_id: &ContentHash,
        auditor: &KeyPair,
        off_log: Option<(&ContentBlob, &AuditDelivery)>,
    ) -> Result<Vec<u8>, ProtocolError> {
        let record = self.registry.get_by_id(skill_id)?;
        let plaintext = match record.publication_type {
            PublicationType::Transparent => record.plaintext().expect("transparent records hold plaintext").to_vec(),
            PublicationType::Licensed | PublicationType::Sealed => {
                let delivery = self
                    .registry
                    .deliveries(skill_id, &auditor.public_key())
                    .iter()
                    .rev()
                    .find(|d| d.wrapped.context == KeyContext::Audit)
                    .ok_or_else(|| ProtocolError::Invalid("no audit delivery for this auditor".into()))?;
                let key = recover_audit_key(auditor, &record.developer_key, skill_id, &delivery.wrapped)?;
                decrypt_content(record.ciphertext().expect("encrypted records hold ciphertext"), &key, skill_id)?
            }
            PublicationType::Committed => {
                let (blob, delivery) =
                    off_log.ok_or_else(|| ProtocolError::Invalid("committed audits arrive off-log".into()))?;
                let key = recover_audit_key(auditor, &record.developer_key, skill_id, &delivery.wrapped)?;
                decrypt_content(blob, &key, skill_id)?
            }
        };
        if content_hash(&plaintext) != record.content_hash {
            return Err(ProtocolError::Invalid("audit content does not hash to the committed value".into()));
        }
        Ok(plaintext)
    }

    pub fn submit_verdict(&mut self, verdict: Verdict, now: u64) -> Result<(), ProtocolError> {
        self.state.book.submit_verdict(verdict.clone(), now)?;
        self.registry.append(Event::Verdict { verdict })?;
        Ok(())
    }

    /// Tallies, promotes or rejects, and settles the audit economy.
    pub fn tally(&mut self, skill_id: &ContentHash, now: u64) -> Result<TallyResult, ProtocolError> {
        let params = self.state.params.clone();
        let dest = self.reward_destination;
        self.atomically(|s| {
            let outcome = s.state.book.tally(skill_id, now, &params)?;
            let settlement = settle_audit(&mut s.state.ledger, &mut s.state.book, &outcome, dest, &params)?;
            s.registry.finalize(skill_id, &outcome)?;
            s.registry.append(Event::Settlement { skill_id: *skill_id, record: settlement.clone() })?;
            Ok(TallyResult { outcome, settlement })
        })
    }

    pub fn purchase(&mut self, skill_id: &ContentHash, buyer: &str, now: u64) -> Result<PurchaseRecord, ProtocolError> {
        let record = self.registry.get_by_id(skill_id)?;
        let ok = record.publication_type == PublicationType::Licensed && record.status == SkillStatus::Approved;
        let listing = self
            .state
            .listings
            .get(skill_id)
            .cloned()
            .ok_or_else(|| RegistryError::NotFound(skill_id.to_hex()))?;
        let price = listing.license_price.unwrap_or_default();
        let params = self.state.params.clone();
        self.atomically(|s| {
            let rec = purchase_licensed(&mut s.state.ledger, skill_id, ok, buyer, &listing.developer, price, now, &params)?;
            s.state.purchases.push(rec.clone());
            s.registry.append(Event::Purchase { record: rec.clone() })?;
            Ok(rec)
        })
    }

    /// Developer wraps the content key for a paying buyer and collects the
    /// escrowed price.
    #[allow(clippy::too_many_arguments)]
    pub fn deliver_license<R: RngCore + CryptoRng>(
        &mut self,
        skill_id: &ContentHash,
        developer: &KeyPair,
        content_key: &ContentKey,
        buyer: &str,
        buyer_key: &ExchangeKey,
        now: u64,
        rng: &mut R,
    ) -> Result<DeliveryRecord, ProtocolError> {
        let record = self.registry.get_by_id(skill_id)?.clone();
        if record.developer_key != developer.public_key() {
            return Err(ProtocolError::Invalid("only the developer delivers license keys".into()));
        }
        let shared = ecdh_shared_secret(developer, buyer_key)?;
        let k_b = derive_delivery_key(&shared, KeyContext::License, &license_binding(skill_id, buyer_key, &developer.public_key()));
        let wrapped = wrap_content_key(content_key, &k_b, KeyContext::License, skill_id, rng);
        self.atomically(|s| {
            complete_purchase(&mut s.state.ledger, skill_id, buyer, &record.developer, now)?;
            s.state.purchases.retain(|p| !(p.skill_id == *skill_id && p.buyer == buyer));
            Ok(s.registry.post_key_delivery(skill_id, *buyer_key, wrapped)?)
        })
    }

    pub fn expire_purchase(&mut self, skill_id: &ContentHash, buyer: &str, now: u64) -> Result<ExpiryRecord, ProtocolError> {
        let developer = self
            .state
            .listings
            .get(skill_id)
            .map(|l| l.developer.clone())
            .ok_or_else(|| RegistryError::NotFound(skill_id.to_hex()))?;
        self.atomically(|s| {
            let rec = expire_purchase(&mut s.state.ledger, skill_id, buyer, &developer, now)?;
            s.state.purchases.retain(|p| !(p.skill_id == *skill_id && p.buyer == buyer));
            s.registry.append(Event::Note {
                kind: "purchase-expired".into(),
                detail: format!("{skill_id} {buyer} refund={} forfeit={}", rec.buyer_refund.0, rec.bond_forfeited.0),
            })?;
            Ok(rec)
        })
    }

    pub fn load(&self, request: &LoadRequest<'_>) -> Result<LoadResult, Refusal> {
        svl::load(&self.registry, request)
    }

    /// Auditor ids and reputations for reporting.
    pub fn auditors(&self) -> impl Iterator<Item = (&AuditorId, &crate::audit::AuditorAccount)> {
        self.state.book.auditors.iter()
    }

    pub fn check_conservation(&self) -> bool {
        self.state.ledger.is_conserved()
    }

    pub fn activation(&mut self, auditor: &str) -> Result<bool, ProtocolError> {
        let params = self.state.params.clone();
        Ok(self.state.book.check_activation(&self.state.ledger, auditor, &params)?)
    }
}
