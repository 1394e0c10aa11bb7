//! Audit lifecycle: auditor registration, task claims, signed verdicts,
//! reputation-weighted tallying and audit key delivery.

use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon::{canonical_encode, hash_fields, ContentHash, Field};
use crate::crypto::{
    audit_binding, derive_delivery_key, ecdh_shared_secret, sign_verdict, unwrap_content_key, verify_verdict,
    wrap_content_key, ContentKey, CryptoError, ExchangeKey, Identity, KeyContext, KeyPair, VerdictSignature,
    VerifierKey, WrappedKey,
};
use crate::economics::{
    EconomicParams, EscrowId, EscrowPurpose, FlowKind, Ledger, LedgerError, Party, Ppm, Reputation, TcAmount, PPM,
};
use crate::registry::PublicationType;

pub type AuditorId = String;

/// Fixed-point scale of verdict confidence.
pub const CONFIDENCE_SCALE: u32 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuditError {
    #[error("stake {stake} below minimum {min}")]
    StakeBelowMinimum { stake: TcAmount, min: TcAmount },
    #[error("auditor {0} already registered")]
    DuplicateAuditor(AuditorId),
    #[error("public key already registered to {0}")]
    DuplicateKey(AuditorId),
    #[error("unknown auditor {0}")]
    UnknownAuditor(AuditorId),
    #[error("auditor {0} is inactive")]
    Inactive(AuditorId),
    #[error("no audit task for skill {0}")]
    UnknownTask(ContentHash),
    #[error("audit task for skill {0} already exists")]
    TaskExists(ContentHash),
    #[error("auditor {0} already claimed this task")]
    DuplicateClaim(AuditorId),
    #[error("a confidentiality bond is required for {0:?} skills")]
    MissingBond(PublicationType),
    #[error("auditor {0} did not claim this task")]
    NotClaimant(AuditorId),
    #[error("verdict signature does not verify")]
    BadSignature,
    #[error("auditor {0} already submitted a verdict")]
    DuplicateVerdict(AuditorId),
    #[error("task in wrong state: {0}")]
    WrongState(&'static str),
    #[error("no non-abstaining weight: no quorum")]
    NoQuorum,
    #[error("confidence must lie in [0, 1]")]
    ConfidenceOutOfRange,
    #[error("auditor {0} holds no confidentiality bond for this task")]
    NoBond(AuditorId),
    #[error("{0:?} skills need no audit key delivery")]
    WrongType(PublicationType),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vote {
    Safe,
    Unsafe,
    Abstain,
}

impl Vote {
    pub fn byte(self) -> u8 {
        match self {
            Vote::Safe => 1,
            Vote::Unsafe => 2,
            Vote::Abstain => 3,
        }
    }

    pub fn parse(s: &str) -> Option<Vote> {
        match s {
            "safe" => Some(Vote::Safe),
            "unsafe" => Some(Vote::Unsafe),
            "abstain" => Some(Vote::Abstain),
            _ => None,
        }
    }
}

/// A signed audit report.
///
/// Signed bytes: `skill_id || auditor || vote:u8 || findings (list) || confidence * 1e6 as u64`,
/// in the canonical field encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub skill_id: ContentHash,
    pub auditor: AuditorId,
    pub vote: Vote,
    pub risk_findings: Vec<String>,
    /// Confidence in millionths.
    pub confidence_micro: u32,
    pub signature: VerdictSignature,
}

impl Verdict {
    pub fn signing_bytes(
        skill_id: &ContentHash,
        auditor: &str,
        vote: Vote,
        risk_findings: &[String],
        confidence_micro: u32,
    ) -> Vec<u8> {
        let findings = risk_findings.iter().map(|f| Field::Str(f)).collect();
        canonical_encode(&[
            Field::Bytes(skill_id.as_bytes()),
            Field::Str(auditor),
            Field::Enum(vote.byte()),
            Field::List(findings),
            Field::U64(confidence_micro as u64),
        ])
    }

    pub fn sign(
        skill_id: ContentHash,
        auditor: &str,
        vote: Vote,
        risk_findings: Vec<String>,
        confidence: f64,
        identity: &Identity,
    ) -> Result<Verdict, AuditError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(AuditError::ConfidenceOutOfRange);
        }
        let confidence_micro = (confidence * CONFIDENCE_SCALE as f64).round() as u32;
        let bytes = Self::signing_bytes(&skill_id, auditor, vote, &risk_findings, confidence_micro);
        Ok(Verdict {
            skill_id,
            auditor: auditor.to_string(),
            vote,
            risk_findings,
            confidence_micro,
            signature: sign_verdict(&bytes, identity.signing_key()),
        })
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        Self::signing_bytes(&self.skill_id, &self.auditor, self.vote, &self.risk_findings, self.confidence_micro)
    }

    pub fn confidence(&self) -> f64 {
        self.confidence_micro as f64 / CONFIDENCE_SCALE as f64
    }

    /// Checks range and signature against `key`.
    pub fn verify(&self, key: &VerifierKey) -> Result<(), AuditError> {
        if self.confidence_micro > CONFIDENCE_SCALE {
            return Err(AuditError::ConfidenceOutOfRange);
        }
        match verify_verdict(&self.canonical_bytes(), &self.signature, key) {
            Ok(true) => Ok(()),
            Ok(false) | Err(CryptoError::MalformedSignature) => Err(AuditError::BadSignature),
            Err(e) => Err(e.into()),
        }
    }
}

/// Registered auditor. Stake lives in the ledger escrow `stake:<id>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditorAccount {
    pub id: AuditorId,
    pub exchange_key: ExchangeKey,
    pub verifier_key: VerifierKey,
    pub reputation: Reputation,
    pub active: bool,
}

impl AuditorAccount {
    pub fn stake(&self, ledger: &Ledger) -> TcAmount {
        ledger.escrow_amount(&EscrowId::stake(&self.id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub deposit: TcAmount,
    pub bond: TcAmount,
    pub claimed_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskPhase {
    /// Collecting claims.
    Open,
    /// Committee full; collecting verdicts.
    Reviewing,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditTask {
    pub skill_id: ContentHash,
    pub developer: String,
    pub publication_type: PublicationType,
    pub required_claims: usize,
    pub claimants: BTreeMap<AuditorId, ClaimRecord>,
    pub verdicts: BTreeMap<AuditorId, Verdict>,
    pub opened_at: u64,
    /// Reference reward before any slippage.
    pub r_base: TcAmount,
    pub phase: TaskPhase,
    pub deadline: Option<u64>,
    #[serde(default)]
    pub outcome: Option<AuditOutcome>,
}

impl AuditTask {
    /// Every claimant has voted, or the verdict window has passed.
    pub fn ready_for_tally(&self, now: u64) -> bool {
        self.phase == TaskPhase::Reviewing
            && (self.verdicts.len() == self.claimants.len() || self.deadline.is_some_and(|d| now >= d))
    }

    pub fn needs_bond(&self) -> bool {
        self.publication_type != PublicationType::Transparent
    }
}

/// Tally result for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditOutcome {
    pub skill_id: ContentHash,
    /// `None` when no non-abstaining weight exists.
    pub safe_score: Option<f64>,
    pub approved: bool,
    pub no_quorum: bool,
    pub verdicts: Vec<Verdict>,
    /// Weights used in the tally.
    pub weights: BTreeMap<AuditorId, Reputation>,
    pub threshold: Ppm,
    pub decided_at: u64,
}

impl AuditOutcome {
    /// Vote that settlement treats as consensus; `None` without quorum.
    pub fn consensus(&self) -> Option<Vote> {
        if self.no_quorum {
            None
        } else if self.approved {
            Some(Vote::Safe)
        } else {
            Some(Vote::Unsafe)
        }
    }

    pub fn voters_with(&self, vote: Vote) -> impl Iterator<Item = &AuditorId> {
        self.verdicts.iter().filter(move |v| v.vote == vote).map(|v| &v.auditor)
    }

    /// Commitment over the outcome, for provenance references.
    pub fn digest(&self) -> ContentHash {
        let verdicts: Vec<Vec<u8>> = self.verdicts.iter().map(Verdict::canonical_bytes).collect();
        let weights: Vec<(String, u64)> = self.weights.iter().map(|(k, v)| (k.clone(), v.0 as u64)).collect();
        hash_fields(&[
            Field::Bytes(self.skill_id.as_bytes()),
            Field::Enum(self.approved as u8),
            Field::Enum(self.no_quorum as u8),
            Field::List(verdicts.iter().map(|b| Field::Bytes(b)).collect()),
            Field::List(
                weights
                    .iter()
                    .map(|(k, v)| Field::List(vec![Field::Str(k), Field::U64(*v)]))
                    .collect(),
            ),
            Field::U64(self.threshold.0),
            Field::U64(self.decided_at),
        ])
    }
}

/// Reputation-weighted share of non-abstaining weight that voted safe.
pub fn safe_score<I>(votes: I) -> Result<f64, AuditError>
where
    I: IntoIterator<Item = (Vote, Reputation)>,
{
    let (safe, counted) = weight_sums(votes);
    if counted == 0 {
        return Err(AuditError::NoQuorum);
    }
    Ok(safe as f64 / counted as f64)
}

fn weight_sums<I: IntoIterator<Item = (Vote, Reputation)>>(votes: I) -> (u64, u64) {
    let mut safe = 0u64;
    let mut counted = 0u64;
    for (vote, rep) in votes {
        match vote {
            Vote::Safe => {
                safe += rep.0 as u64;
                counted += rep.0 as u64;
            }
            Vote::Unsafe => counted += rep.0 as u64,
            Vote::Abstain => {}
        }
    }
    (safe, counted)
}

/// Exact `safe_score >= theta`, evaluated in integers.
pub fn meets_threshold<I>(votes: I, theta: Ppm) -> Result<bool, AuditError>
where
    I: IntoIterator<Item = (Vote, Reputation)>,
{
    let (safe, counted) = weight_sums(votes);
    if counted == 0 {
        return Err(AuditError::NoQuorum);
    }
    Ok(safe as u128 * PPM as u128 >= theta.0 as u128 * counted as u128)
}

/// Builds the outcome for a task that is ready for tallying.
pub fn decide(
    task: &AuditTask,
    theta: Ppm,
    reputations: &BTreeMap<AuditorId, Reputation>,
    now: u64,
) -> Result<AuditOutcome, AuditError> {
    if !task.ready_for_tally(now) {
        return Err(AuditError::WrongState("task is not ready for tallying"));
    }
    let weights: BTreeMap<AuditorId, Reputation> = task
        .verdicts
        .keys()
        .map(|a| (a.clone(), reputations.get(a).copied().unwrap_or_default()))
        .collect();
    let votes = || task.verdicts.values().map(|v| (v.vote, weights[&v.auditor]));
    let (safe_score, approved, no_quorum) = match meets_threshold(votes(), theta) {
        Ok(ok) => (Some(safe_score(votes())?), ok, false),
        Err(AuditError::NoQuorum) => (None, false, true),
        Err(e) => return Err(e),
    };
    Ok(AuditOutcome {
        skill_id: task.skill_id,
        safe_score,
        approved,
        no_quorum,
        verdicts: task.verdicts.values().cloned().collect(),
        weights,
        threshold: theta,
        decided_at: now,
    })
}

/// One wrapped content key for one claimant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditDelivery {
    pub auditor: AuditorId,
    pub recipient: ExchangeKey,
    pub wrapped: WrappedKey,
}

/// Wraps `content_key` for every claimant under `HKDF(sk_d * pk_i, audit, skill_id || pk_i || pk_d)`.
pub fn deliver_audit_keys<R: RngCore + CryptoRng>(
    skill_id: &ContentHash,
    publication_type: PublicationType,
    developer: &KeyPair,
    content_key: &ContentKey,
    claimants: &[(AuditorId, ExchangeKey)],
    rng: &mut R,
) -> Result<Vec<AuditDelivery>, AuditError> {
    if publication_type == PublicationType::Transparent {
        return Err(AuditError::WrongType(publication_type));
    }
    let pk_d = developer.public_key();
    claimants
        .iter()
        .map(|(auditor, pk_i)| {
            let shared = ecdh_shared_secret(developer, pk_i)?;
            let k_i = derive_delivery_key(&shared, KeyContext::Audit, &audit_binding(skill_id, pk_i, &pk_d));
            Ok(AuditDelivery {
                auditor: auditor.clone(),
                recipient: *pk_i,
                wrapped: wrap_content_key(content_key, &k_i, KeyContext::Audit, skill_id, rng),
            })
        })
        .collect()
}

/// Auditor side of the audit delivery.
pub fn recover_audit_key(
    auditor: &KeyPair,
    developer_key: &ExchangeKey,
    skill_id: &ContentHash,
    wrapped: &WrappedKey,
) -> Result<ContentKey, CryptoError> {
    let shared = ecdh_shared_secret(auditor, developer_key)?;
    let binding = audit_binding(skill_id, &auditor.public_key(), developer_key);
    let k_i = derive_delivery_key(&shared, KeyContext::Audit, &binding);
    unwrap_content_key(wrapped, &k_i, skill_id)
}

/// Auditor registry and open tasks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditBook {
    pub auditors: BTreeMap<AuditorId, AuditorAccount>,
    pub tasks: BTreeMap<ContentHash, AuditTask>,
}

impl AuditBook {
    pub fn auditor(&self, id: &str) -> Result<&AuditorAccount, AuditError> {
        self.auditors.get(id).ok_or_else(|| AuditError::UnknownAuditor(id.to_string()))
    }

    fn auditor_mut(&mut self, id: &str) -> Result<&mut AuditorAccount, AuditError> {
        self.auditors.get_mut(id).ok_or_else(|| AuditError::UnknownAuditor(id.to_string()))
    }

    pub fn task(&self, skill_id: &ContentHash) -> Result<&AuditTask, AuditError> {
        self.tasks.get(skill_id).ok_or(AuditError::UnknownTask(*skill_id))
    }

    fn task_mut(&mut self, skill_id: &ContentHash) -> Result<&mut AuditTask, AuditError> {
        self.tasks.get_mut(skill_id).ok_or(AuditError::UnknownTask(*skill_id))
    }

    pub fn reputations(&self) -> BTreeMap<AuditorId, Reputation> {
        self.auditors.iter().map(|(k, a)| (k.clone(), a.reputation)).collect()
    }

    /// Locks `initial_stake` from the auditor's account and grants reputation `r0`.
    pub fn register_auditor(
        &mut self,
        ledger: &mut Ledger,
        id: &str,
        exchange_key: ExchangeKey,
        verifier_key: VerifierKey,
        initial_stake: TcAmount,
        params: &EconomicParams,
    ) -> Result<&AuditorAccount, AuditError> {
        if initial_stake < params.s_min {
            return Err(AuditError::StakeBelowMinimum { stake: initial_stake, min: params.s_min });
        }
        if self.auditors.contains_key(id) {
            return Err(AuditError::DuplicateAuditor(id.to_string()));
        }
        if let Some(other) = self
            .auditors
            .values()
            .find(|a| a.exchange_key == exchange_key || a.verifier_key == verifier_key)
        {
            return Err(AuditError::DuplicateKey(other.id.clone()));
        }
        let escrow = EscrowId::stake(id);
        let have = ledger.balance(id);
        if have < initial_stake {
            return Err(LedgerError::Insufficient { party: format!("account:{id}"), need: initial_stake, have }.into());
        }
        ledger.ensure_escrow(&escrow, EscrowPurpose::Stake, vec![id.to_string()]);
        ledger.transfer(FlowKind::Stake, &Party::Account(id.to_string()), &Party::Escrow(escrow), initial_stake)?;
        self.auditors.insert(
            id.to_string(),
            AuditorAccount {
                id: id.to_string(),
                exchange_key,
                verifier_key,
                reputation: Reputation::from_points(params.r0),
                active: true,
            },
        );
        Ok(&self.auditors[id])
    }

    /// Adds stake and re-evaluates activation.
    pub fn top_up_stake(
        &mut self,
        ledger: &mut Ledger,
        id: &str,
        amount: TcAmount,
        params: &EconomicParams,
    ) -> Result<bool, AuditError> {
        self.auditor(id)?;
        ledger.transfer(FlowKind::Stake, &Party::Account(id.to_string()), &Party::Escrow(EscrowId::stake(id)), amount)?;
        self.check_activation(ledger, id, params)
    }

    /// `active = stake >= s_min`.
    pub fn check_activation(&mut self, ledger: &Ledger, id: &str, params: &EconomicParams) -> Result<bool, AuditError> {
        let stake = ledger.escrow_amount(&EscrowId::stake(id));
        let acct = self.auditor_mut(id)?;
        acct.active = stake >= params.s_min;
        Ok(acct.active)
    }

    pub fn open_task(
        &mut self,
        skill_id: ContentHash,
        developer: &str,
        publication_type: PublicationType,
        r_base: TcAmount,
        now: u64,
        params: &EconomicParams,
    ) -> Result<&AuditTask, AuditError> {
        if self.tasks.contains_key(&skill_id) {
            return Err(AuditError::TaskExists(skill_id));
        }
        self.tasks.insert(
            skill_id,
            AuditTask {
                skill_id,
                developer: developer.to_string(),
                publication_type,
                required_claims: params.committee_size,
                claimants: BTreeMap::new(),
                verdicts: BTreeMap::new(),
                opened_at: now,
                r_base,
                phase: TaskPhase::Open,
                deadline: None,
                outcome: None,
            },
        );
        Ok(&self.tasks[&skill_id])
    }

    /// Escrows the commitment deposit and, for non-plaintext skills, the
    /// confidentiality bond. The N-th claim moves the task to reviewing.
    #[allow(clippy::too_many_arguments)]
    pub fn claim_task(
        &mut self,
        ledger: &mut Ledger,
        skill_id: &ContentHash,
        auditor: &str,
        deposit: TcAmount,
        bond: TcAmount,
        now: u64,
        params: &EconomicParams,
    ) -> Result<TaskPhase, AuditError> {
        let acct = self.auditor(auditor)?;
        if !acct.active {
            return Err(AuditError::Inactive(auditor.to_string()));
        }
        let task = self.task(skill_id)?;
        if task.phase != TaskPhase::Open {
            return Err(AuditError::WrongState("task is not accepting claims"));
        }
        if task.claimants.contains_key(auditor) {
            return Err(AuditError::DuplicateClaim(auditor.to_string()));
        }
        if task.needs_bond() && bond.is_zero() {
            return Err(AuditError::MissingBond(task.publication_type));
        }
        let bond = if task.needs_bond() { bond } else { TcAmount::ZERO };
        let have = ledger.balance(auditor);
        if have < deposit + bond {
            return Err(LedgerError::Insufficient {
                party: format!("account:{auditor}"),
                need: deposit + bond,
                have,
            }
            .into());
        }
        let from = Party::Account(auditor.to_string());
        let dep = EscrowId::deposit(skill_id, auditor);
        ledger.ensure_escrow(&dep, EscrowPurpose::Deposit, vec![auditor.to_string()]);
        ledger.transfer(FlowKind::Deposit, &from, &Party::Escrow(dep), deposit)?;
        if !bond.is_zero() {
            let b = EscrowId::bond(skill_id, auditor);
            ledger.ensure_escrow(&b, EscrowPurpose::ConfidentialityBond, vec![auditor.to_string()]);
            ledger.transfer(FlowKind::Bond, &from, &Party::Escrow(b), bond)?;
        }
        let task = self.task_mut(skill_id)?;
        task.claimants
            .insert(auditor.to_string(), ClaimRecord { deposit, bond, claimed_at: now });
        if task.claimants.len() >= task.required_claims {
            task.phase = TaskPhase::Reviewing;
            task.deadline = Some(now + params.verdict_window);
        }
        Ok(task.phase)
    }

    pub fn submit_verdict(&mut self, verdict: Verdict, now: u64) -> Result<(), AuditError> {
        let key = self.auditor(&verdict.auditor)?.verifier_key;
        let task = self.task(&verdict.skill_id)?;
        if !task.claimants.contains_key(&verdict.auditor) {
            return Err(AuditError::NotClaimant(verdict.auditor.clone()));
        }
        if task.phase != TaskPhase::Reviewing {
            return Err(AuditError::WrongState("task is not in review"));
        }
        if task.deadline.is_some_and(|d| now > d) {
            return Err(AuditError::WrongState("verdict window has closed"));
        }
        if task.verdicts.contains_key(&verdict.auditor) {
            return Err(AuditError::DuplicateVerdict(verdict.auditor.clone()));
        }
        verdict.verify(&key)?;
        let task = self.task_mut(&verdict.skill_id)?;
        task.verdicts.insert(verdict.auditor.clone(), verdict);
        Ok(())
    }

    /// Decides the task with current reputations and closes it.
    pub fn tally(&mut self, skill_id: &ContentHash, now: u64, params: &EconomicParams) -> Result<AuditOutcome, AuditError> {
        let reps = self.reputations();
        let task = self.task(skill_id)?;
        if task.phase == TaskPhase::Open {
            return Err(AuditError::WrongState("fewer than N auditors have claimed"));
        }
        if task.phase == TaskPhase::Closed {
            return Err(AuditError::WrongState("task already tallied"));
        }
        let outcome = decide(task, params.theta, &reps, now)?;
        let task = self.task_mut(skill_id)?;
        task.phase = TaskPhase::Closed;
        task.outcome = Some(outcome.clone());
        Ok(outcome)
    }

    /// Claimants' exchange keys, for audit key delivery.
    pub fn claimant_keys(&self, skill_id: &ContentHash) -> Result<Vec<(AuditorId, ExchangeKey)>, AuditError> {
        let task = self.task(skill_id)?;
        if task.phase != TaskPhase::Reviewing {
            return Err(AuditError::WrongState("audit keys are delivered during review"));
        }
        task.claimants
            .keys()
            .map(|a| Ok((a.clone(), self.auditor(a)?.exchange_key)))
            .collect()
    }

    /// Proven leakage: the bond goes to the Treasury and reputation resets to zero.
    pub fn report_leak(
        &mut self,
        ledger: &mut Ledger,
        auditor: &str,
        skill_id: &ContentHash,
        params: &EconomicParams,
    ) -> Result<TcAmount, AuditError> {
        self.auditor(auditor)?;
        let bond = EscrowId::bond(skill_id, auditor);
        if ledger.escrow_amount(&bond).is_zero() {
            return Err(AuditError::NoBond(auditor.to_string()));
        }
        let forfeited = ledger.drain_escrow(FlowKind::BondForfeit, &bond, &Party::Treasury)?;
        self.auditor_mut(auditor)?.reputation = Reputation::ZERO;
        self.check_activation(ledger, auditor, params)?;
        Ok(forfeited)
    }
}
