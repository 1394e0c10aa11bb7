//! Multi-party flows: fee escrow, audit settlement, monitoring outcomes,
//! retrospective slashing, re-audit challenges and licensed purchases.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    aligned_reward, decay_reputation, fee_from_r_base, reputation_gain, reputation_loss, slash_amount,
    slippage_adjust, EconomicParams, EscrowId, EscrowPurpose, FeeSplit, FlowKind, Ledger, LedgerError, Party,
    Reputation, TcAmount,
};
use crate::audit::{AuditBook, AuditError, AuditOutcome, AuditorId, Vote};
use crate::canon::ContentHash;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FlowError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("skill {0} is not approved")]
    NotApproved(ContentHash),
    #[error("audit pool holds {have}, expected {expected}")]
    PoolMismatch { expected: TcAmount, have: TcAmount },
    #[error("retrospective pool for {0} is empty")]
    EmptyPool(ContentHash),
    #[error("skill is not an approved Licensed skill")]
    WrongType,
    #[error("no delivery bond frozen for {0}")]
    NoDeliveryBond(ContentHash),
    #[error("delivery bond {bond} does not cover price {price}")]
    BondTooSmall { bond: TcAmount, price: TcAmount },
    #[error("no pending purchase by {buyer} for {skill}")]
    UnknownPurchase { skill: ContentHash, buyer: String },
    #[error("delivery deadline {0} has not passed")]
    DeadlineNotReached(u64),
    #[error("delivery deadline {0} has passed")]
    DeadlinePassed(u64),
    #[error("no open challenge by {submitter} on {skill}")]
    NoChallenge { skill: ContentHash, submitter: String },
    #[error("challenge fee must be positive")]
    ZeroFee,
}

/// Escrows the publication fee: the protocol cut goes to the Treasury and the
/// audit pool is locked for settlement.
pub fn escrow_publication_fee(
    ledger: &mut Ledger,
    skill_id: &ContentHash,
    developer: &str,
    fee: FeeSplit,
) -> Result<(), FlowError> {
    let have = ledger.balance(developer);
    if have < fee.total {
        return Err(LedgerError::Insufficient { party: format!("account:{developer}"), need: fee.total, have }.into());
    }
    let pool = EscrowId::pool(skill_id);
    ledger.open_escrow(pool.clone(), EscrowPurpose::AuditPool, vec![developer.to_string()], None)?;
    let dev = Party::Account(developer.to_string());
    ledger.transfer(FlowKind::ProtocolFee, &dev, &Party::Treasury, fee.treasury_cut)?;
    ledger.transfer(FlowKind::PublicationFee, &dev, &Party::Escrow(pool), fee.audit_pool)?;
    Ok(())
}

/// Where consensus-aligned rewards are credited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardDestination {
    /// Spendable account balance.
    #[default]
    Account,
    /// Compounded into the auditor's stake.
    Stake,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettlementRecord {
    pub skill_id: Option<ContentHash>,
    /// Reward reference after slippage.
    pub effective_r_base: TcAmount,
    pub rewards: Vec<(AuditorId, TcAmount)>,
    /// Amount actually taken from stake (clamped at the remaining stake).
    pub slashes: Vec<(AuditorId, TcAmount)>,
    pub deposit_refunds: Vec<(AuditorId, TcAmount)>,
    pub deposit_forfeits: Vec<(AuditorId, TcAmount)>,
    pub bonds_released: Vec<(AuditorId, TcAmount)>,
    pub subsidy: TcAmount,
    pub pool_refund: TcAmount,
    pub no_quorum: bool,
    pub deactivated: Vec<AuditorId>,
}

/// Pays aligned voters, slashes divergent ones, refunds deposits and returns
/// the residual pool to the developer.
///
/// Abstainers are neither paid nor slashed. Claimants without a verdict
/// forfeit their commitment deposit. Without quorum everything is refunded.
/// Rewards use the slippage-adjusted reference reward, with any shortfall in
/// the pool covered by the Treasury; slashes use the unadjusted reference.
pub fn settle_audit(
    ledger: &mut Ledger,
    book: &mut AuditBook,
    outcome: &AuditOutcome,
    destination: RewardDestination,
    params: &EconomicParams,
) -> Result<SettlementRecord, FlowError> {
    let task = book.task(&outcome.skill_id)?.clone();
    let pool = EscrowId::pool(&task.skill_id);
    let expected = fee_from_r_base(task.r_base, params).audit_pool;
    let have = ledger.escrow_amount(&pool);
    if ledger.escrow(&pool).is_none() || have != expected {
        return Err(FlowError::PoolMismatch { expected, have });
    }

    let filled_at = task.claimants.values().map(|c| c.claimed_at).max().unwrap_or(task.opened_at);
    let effective = slippage_adjust(task.r_base, filled_at, task.opened_at, params);
    let mut rec = SettlementRecord {
        skill_id: Some(task.skill_id),
        effective_r_base: effective,
        no_quorum: outcome.no_quorum,
        ..Default::default()
    };
    let pool_party = Party::Escrow(pool.clone());

    if let Some(cons) = outcome.consensus() {
        let aligned: Vec<(&AuditorId, TcAmount)> = outcome
            .verdicts
            .iter()
            .filter(|v| v.vote == cons)
            .map(|v| {
                let r = outcome.weights.get(&v.auditor).copied().unwrap_or_default();
                (&v.auditor, aligned_reward(effective, r, params))
            })
            .collect();
        let owed: TcAmount = aligned.iter().map(|(_, r)| *r).sum();
        if owed > have {
            rec.subsidy = ledger.transfer_up_to(FlowKind::SlippageSubsidy, &Party::Treasury, &pool_party, owed - have)?;
        }
        for (auditor, reward) in aligned {
            let to = match destination {
                RewardDestination::Account => Party::Account(auditor.clone()),
                RewardDestination::Stake => Party::Escrow(EscrowId::stake(auditor)),
            };
            let paid = ledger.transfer_up_to(FlowKind::Reward, &pool_party, &to, reward)?;
            rec.rewards.push((auditor.clone(), paid));
        }
        let slash = slash_amount(task.r_base, params);
        for v in outcome.verdicts.iter().filter(|v| v.vote != cons && v.vote != Vote::Abstain) {
            let stake = Party::Escrow(EscrowId::stake(&v.auditor));
            let taken = ledger.transfer_up_to(FlowKind::Slash, &stake, &Party::Treasury, slash)?;
            rec.slashes.push((v.auditor.clone(), taken));
            if !book.check_activation(ledger, &v.auditor, params)? {
                rec.deactivated.push(v.auditor.clone());
            }
        }
    }

    let voted: BTreeSet<&AuditorId> = outcome.verdicts.iter().map(|v| &v.auditor).collect();
    for auditor in task.claimants.keys() {
        let dep = EscrowId::deposit(&task.skill_id, auditor);
        if ledger.escrow(&dep).is_none() {
            continue;
        }
        if voted.contains(auditor) {
            let amt = ledger.drain_escrow(FlowKind::DepositRefund, &dep, &Party::Account(auditor.clone()))?;
            rec.deposit_refunds.push((auditor.clone(), amt));
        } else {
            let amt = ledger.drain_escrow(FlowKind::DepositForfeit, &dep, &Party::Treasury)?;
            rec.deposit_forfeits.push((auditor.clone(), amt));
        }
        // Bonds stay locked through monitoring only for approved skills.
        if !outcome.approved {
            let bond = EscrowId::bond(&task.skill_id, auditor);
            if ledger.escrow(&bond).is_some() {
                let amt = ledger.drain_escrow(FlowKind::BondRelease, &bond, &Party::Account(auditor.clone()))?;
                rec.bonds_released.push((auditor.clone(), amt));
            }
        }
    }

    rec.pool_refund = ledger.drain_escrow(FlowKind::PoolRefund, &pool, &Party::Account(task.developer.clone()))?;
    Ok(rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MonitoringEvent {
    CleanWindow,
    ProvenMalicious,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitoringRecord {
    /// `(auditor, before, after)`
    pub reputation: Vec<(AuditorId, Reputation, Reputation)>,
    /// Stake moved into the retrospective pool.
    pub slashed: Vec<(AuditorId, TcAmount)>,
    pub bonds_released: Vec<(AuditorId, TcAmount)>,
}

/// Post-approval reputation update.
///
/// A clean window rewards safe voters with `delta_plus`. A proven-malicious
/// finding costs each safe voter `delta_minus` and a fixed `gamma * R_base`
/// stake slash into the retrospective pool, while unsafe voters gain
/// `delta_plus`. Confidentiality bonds are released in both cases.
pub fn apply_monitoring_outcome(
    ledger: &mut Ledger,
    book: &mut AuditBook,
    outcome: &AuditOutcome,
    event: MonitoringEvent,
    params: &EconomicParams,
) -> Result<MonitoringRecord, FlowError> {
    if !outcome.approved {
        return Err(FlowError::NotApproved(outcome.skill_id));
    }
    let task = book.task(&outcome.skill_id)?.clone();
    let mut rec = MonitoringRecord::default();
    let retro = EscrowId::retro_pool(&task.skill_id);
    if event == MonitoringEvent::ProvenMalicious {
        ledger.ensure_escrow(&retro, EscrowPurpose::RetroPool, vec![]);
    }
    let slash = slash_amount(task.r_base, params);

    for v in &outcome.verdicts {
        let before = book.auditor(&v.auditor)?.reputation;
        let after = match (event, v.vote) {
            (MonitoringEvent::CleanWindow, Vote::Safe) => reputation_gain(before, params),
            (MonitoringEvent::ProvenMalicious, Vote::Safe) => {
                let stake = Party::Escrow(EscrowId::stake(&v.auditor));
                let taken = ledger.transfer_up_to(FlowKind::RetroSlash, &stake, &Party::Escrow(retro.clone()), slash)?;
                rec.slashed.push((v.auditor.clone(), taken));
                reputation_loss(before, params)
            }
            (MonitoringEvent::ProvenMalicious, Vote::Unsafe) => reputation_gain(before, params),
            _ => before,
        };
        if after != before {
            set_reputation(book, &v.auditor, after);
            rec.reputation.push((v.auditor.clone(), before, after));
        }
        book.check_activation(ledger, &v.auditor, params)?;
    }

    for auditor in task.claimants.keys() {
        let bond = EscrowId::bond(&task.skill_id, auditor);
        if ledger.escrow(&bond).is_some() {
            let amt = ledger.drain_escrow(FlowKind::BondRelease, &bond, &Party::Account(auditor.clone()))?;
            rec.bonds_released.push((auditor.clone(), amt));
        }
    }
    Ok(rec)
}

fn set_reputation(book: &mut AuditBook, id: &str, r: Reputation) {
    if let Some(a) = book.auditors.get_mut(id) {
        a.reputation = r;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetroDistribution {
    pub pool: TcAmount,
    pub whistleblower: TcAmount,
    pub per_dissenter: TcAmount,
    pub dissenters: Vec<AuditorId>,
    pub treasury: TcAmount,
}

/// Splits a pool `total` into whistleblower, per-dissenter and Treasury shares.
/// Rounding remainders and the dissenter share without dissenters go to the Treasury.
pub fn split_retro_pool(total: TcAmount, dissenters: usize, params: &EconomicParams) -> (TcAmount, TcAmount, TcAmount) {
    let split = params.slash_split;
    let whistle = total.mul_ppm(split.whistleblower);
    let per = if dissenters == 0 {
        TcAmount::ZERO
    } else {
        TcAmount(total.mul_ppm(split.dissenters).0 / dissenters as u64)
    };
    let treasury = total - whistle - TcAmount(per.0 * dissenters as u64);
    (whistle, per, treasury)
}

/// Distributes the retrospective pool of a skill and closes it.
pub fn retrospective_slash(
    ledger: &mut Ledger,
    skill_id: &ContentHash,
    whistleblower: &str,
    dissenters: &[AuditorId],
    params: &EconomicParams,
) -> Result<RetroDistribution, FlowError> {
    let retro = EscrowId::retro_pool(skill_id);
    let total = ledger.escrow_amount(&retro);
    if total.is_zero() {
        return Err(FlowError::EmptyPool(*skill_id));
    }
    let (whistle, per, _) = split_retro_pool(total, dissenters.len(), params);
    let from = Party::Escrow(retro.clone());
    ledger.transfer(FlowKind::RetroPayout, &from, &Party::Account(whistleblower.to_string()), whistle)?;
    for d in dissenters {
        ledger.transfer(FlowKind::RetroPayout, &from, &Party::Account(d.clone()), per)?;
    }
    let treasury = ledger.drain_escrow(FlowKind::RetroPayout, &retro, &Party::Treasury)?;
    Ok(RetroDistribution {
        pool: total,
        whistleblower: whistle,
        per_dissenter: per,
        dissenters: dissenters.to_vec(),
        treasury,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeRecord {
    pub skill_id: ContentHash,
    pub submitter: String,
    pub fee: TcAmount,
}

/// Escrows a re-audit fee against an approved skill.
pub fn re_audit_challenge(
    ledger: &mut Ledger,
    skill_id: &ContentHash,
    approved: bool,
    submitter: &str,
    fee: TcAmount,
) -> Result<ChallengeRecord, FlowError> {
    if !approved {
        return Err(FlowError::NotApproved(*skill_id));
    }
    if fee.is_zero() {
        return Err(FlowError::ZeroFee);
    }
    let have = ledger.balance(submitter);
    if have < fee {
        return Err(LedgerError::Insufficient { party: format!("account:{submitter}"), need: fee, have }.into());
    }
    let id = EscrowId::challenge(skill_id, submitter);
    ledger.open_escrow(id.clone(), EscrowPurpose::ChallengeFee, vec![submitter.to_string()], None)?;
    ledger.transfer(FlowKind::ChallengeFee, &Party::Account(submitter.to_string()), &Party::Escrow(id), fee)?;
    Ok(ChallengeRecord { skill_id: *skill_id, submitter: submitter.to_string(), fee })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChallengeResolution {
    /// Original verdict stands; the fee goes to the Treasury.
    Confirmed { fee: TcAmount },
    /// Verdict reversed; the fee is refunded and the slash pool distributed.
    Reversed { refund: TcAmount, monitoring: MonitoringRecord, distribution: RetroDistribution },
}

/// Resolves a re-audit. On reversal the original safe voters are slashed
/// into the retrospective pool, which then pays the submitter, the original
/// dissenters and the Treasury.
pub fn resolve_challenge(
    ledger: &mut Ledger,
    book: &mut AuditBook,
    original: &AuditOutcome,
    submitter: &str,
    reversed: bool,
    params: &EconomicParams,
) -> Result<ChallengeResolution, FlowError> {
    let id = EscrowId::challenge(&original.skill_id, submitter);
    if ledger.escrow(&id).is_none() {
        return Err(FlowError::NoChallenge { skill: original.skill_id, submitter: submitter.to_string() });
    }
    if !reversed {
        let fee = ledger.drain_escrow(FlowKind::ChallengeFee, &id, &Party::Treasury)?;
        return Ok(ChallengeResolution::Confirmed { fee });
    }
    let monitoring = apply_monitoring_outcome(ledger, book, original, MonitoringEvent::ProvenMalicious, params)?;
    let dissenters: Vec<AuditorId> = original.voters_with(Vote::Unsafe).cloned().collect();
    let refund = ledger.drain_escrow(FlowKind::ChallengeRefund, &id, &Party::Account(submitter.to_string()))?;
    let distribution = if ledger.escrow_amount(&EscrowId::retro_pool(&original.skill_id)).is_zero() {
        // Nobody voted safe with stake left: close the empty pool.
        let retro = EscrowId::retro_pool(&original.skill_id);
        if ledger.escrow(&retro).is_some() {
            ledger.close_escrow(&retro)?;
        }
        RetroDistribution { dissenters, ..Default::default() }
    } else {
        retrospective_slash(ledger, &original.skill_id, submitter, &dissenters, params)?
    };
    Ok(ChallengeResolution::Reversed { refund, monitoring, distribution })
}

/// One decay epoch for every registered auditor.
pub fn decay_reputations(book: &mut AuditBook, params: &EconomicParams) {
    for a in book.auditors.values_mut() {
        a.reputation = decay_reputation(a.reputation, params);
    }
}

/// Developer locks a delivery bond at publication of a Licensed skill.
pub fn freeze_delivery_bond(
    ledger: &mut Ledger,
    skill_id: &ContentHash,
    developer: &str,
    amount: TcAmount,
) -> Result<(), FlowError> {
    let id = EscrowId::delivery_bond(skill_id);
    ledger.ensure_escrow(&id, EscrowPurpose::DeliveryBond, vec![developer.to_string()]);
    ledger.transfer(FlowKind::Bond, &Party::Account(developer.to_string()), &Party::Escrow(id), amount)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurchaseRecord {
    pub skill_id: ContentHash,
    pub buyer: String,
    pub developer: String,
    pub price: TcAmount,
    pub protocol_fee: TcAmount,
    pub deadline: u64,
}

impl PurchaseRecord {
    pub fn total(&self) -> TcAmount {
        self.price + self.protocol_fee
    }
}

/// Buyer pays `P + phi * P`: the fee goes to the Treasury at once and `P` is
/// escrowed until key delivery or `now + tau_deliver`.
#[allow(clippy::too_many_arguments)]
pub fn purchase_licensed(
    ledger: &mut Ledger,
    skill_id: &ContentHash,
    licensed_and_approved: bool,
    buyer: &str,
    developer: &str,
    price: TcAmount,
    now: u64,
    params: &EconomicParams,
) -> Result<PurchaseRecord, FlowError> {
    if !licensed_and_approved {
        return Err(FlowError::WrongType);
    }
    let bond_id = EscrowId::delivery_bond(skill_id);
    let bond = match ledger.escrow(&bond_id) {
        Some(e) if !e.amount.is_zero() => e.amount,
        _ => return Err(FlowError::NoDeliveryBond(*skill_id)),
    };
    if bond < price {
        return Err(FlowError::BondTooSmall { bond, price });
    }
    let fee = price.mul_ppm(params.phi_proto);
    let have = ledger.balance(buyer);
    if have < price + fee {
        return Err(LedgerError::Insufficient { party: format!("account:{buyer}"), need: price + fee, have }.into());
    }
    let deadline = now + params.tau_deliver;
    let esc = EscrowId::purchase(skill_id, buyer);
    ledger.open_escrow(
        esc.clone(),
        EscrowPurpose::Purchase,
        vec![buyer.to_string(), developer.to_string()],
        Some(deadline),
    )?;
    let from = Party::Account(buyer.to_string());
    ledger.transfer(FlowKind::ProtocolFee, &from, &Party::Treasury, fee)?;
    ledger.transfer(FlowKind::Purchase, &from, &Party::Escrow(esc), price)?;
    Ok(PurchaseRecord {
        skill_id: *skill_id,
        buyer: buyer.to_string(),
        developer: developer.to_string(),
        price,
        protocol_fee: fee,
        deadline,
    })
}

fn purchase_escrow(ledger: &Ledger, skill_id: &ContentHash, buyer: &str) -> Result<(EscrowId, u64), FlowError> {
    let id = EscrowId::purchase(skill_id, buyer);
    match ledger.escrow(&id) {
        Some(e) => Ok((id, e.deadline.unwrap_or(u64::MAX))),
        None => Err(FlowError::UnknownPurchase { skill: *skill_id, buyer: buyer.to_string() }),
    }
}

/// Key delivered in time: escrowed price released to the developer.
pub fn complete_purchase(
    ledger: &mut Ledger,
    skill_id: &ContentHash,
    buyer: &str,
    developer: &str,
    now: u64,
) -> Result<TcAmount, FlowError> {
    let (id, deadline) = purchase_escrow(ledger, skill_id, buyer)?;
    if now > deadline {
        return Err(FlowError::DeadlinePassed(deadline));
    }
    Ok(ledger.drain_escrow(FlowKind::PurchaseRelease, &id, &Party::Account(developer.to_string()))?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpiryRecord {
    pub buyer_refund: TcAmount,
    pub bond_forfeited: TcAmount,
    pub to_treasury: TcAmount,
    pub to_developer: TcAmount,
}

/// Delivery timed out: the buyer gets `P` back and the delivery bond is
/// forfeit, `B - P` to the Treasury and `P` to the developer, which nets the
/// developer `-(B - P)` as if the price had been paid directly.
pub fn expire_purchase(
    ledger: &mut Ledger,
    skill_id: &ContentHash,
    buyer: &str,
    developer: &str,
    now: u64,
) -> Result<ExpiryRecord, FlowError> {
    let (id, deadline) = purchase_escrow(ledger, skill_id, buyer)?;
    if now <= deadline {
        return Err(FlowError::DeadlineNotReached(deadline));
    }
    let refund = ledger.drain_escrow(FlowKind::PurchaseRefund, &id, &Party::Account(buyer.to_string()))?;
    let bond_id = EscrowId::delivery_bond(skill_id);
    let bond = ledger.escrow_amount(&bond_id);
    let to_dev = refund.min(bond);
    ledger.transfer(FlowKind::BondRelease, &Party::Escrow(bond_id.clone()), &Party::Account(developer.to_string()), to_dev)?;
    let to_treasury = if ledger.escrow(&bond_id).is_some() {
        ledger.drain_escrow(FlowKind::BondForfeit, &bond_id, &Party::Treasury)?
    } else {
        TcAmount::ZERO
    };
    Ok(ExpiryRecord { buyer_refund: refund, bond_forfeited: bond, to_treasury, to_developer: to_dev })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::Verdict;
    use crate::crypto::Identity;
    use crate::economics::{publication_fee, Ppm};
    use crate::registry::PublicationType;

    struct World {
        ledger: Ledger,
        book: AuditBook,
        params: EconomicParams,
        ids: Vec<Identity>,
        skill: ContentHash,
    }

    fn world(ptype: PublicationType, votes: &[Vote], reps: &[u32]) -> (World, AuditOutcome) {
        let params = EconomicParams { kappa_tc: 5_000, ..Default::default() };
        let names: Vec<String> = (0..votes.len()).map(|i| format!("a{i}")).collect();
        let mut allocs: Vec<(&str, TcAmount)> = names.iter().map(|n| (n.as_str(), TcAmount::from_tc(100))).collect();
        allocs.push(("dev", TcAmount::from_tc(100)));
        let mut ledger = Ledger::genesis(TcAmount::from_tc(1_000), &allocs);
        let mut book = AuditBook::default();
        let ids: Vec<Identity> = (0..votes.len()).map(|i| Identity::from_seed([i as u8 + 1; 32])).collect();
        for (i, n) in names.iter().enumerate() {
            book.register_auditor(&mut ledger, n, ids[i].exchange_key(), ids[i].verifier_key(), TcAmount::from_tc(50), &params)
                .unwrap();
            book.auditors.get_mut(n).unwrap().reputation = Reputation::from_points(reps[i]);
        }
        let skill = ContentHash([0xab; 32]);
        let fee = publication_fee(2_000, &params);
        escrow_publication_fee(&mut ledger, &skill, "dev", fee).unwrap();
        let params_n = EconomicParams { committee_size: votes.len(), ..params.clone() };
        book.open_task(skill, "dev", ptype, TcAmount(560), 0, &params_n).unwrap();
        let bond = if ptype == PublicationType::Transparent { TcAmount::ZERO } else { TcAmount::from_tc(5) };
        for n in &names {
            book.claim_task(&mut ledger, &skill, n, TcAmount::from_tc(1), bond, 0, &params_n).unwrap();
        }
        for (i, v) in votes.iter().enumerate() {
            let verdict = Verdict::sign(skill, &names[i], *v, vec![], 1.0, &ids[i]).unwrap();
            book.submit_verdict(verdict, 1).unwrap();
        }
        let outcome = book.tally(&skill, 2, &params_n).unwrap();
        (World { ledger, book, params, ids, skill }, outcome)
    }

    #[test]
    fn settlement_pays_aligned_and_slashes_divergent() {
        use Vote::*;
        let (mut w, out) = world(PublicationType::Transparent, &[Safe, Safe, Safe, Unsafe, Abstain], &[1000, 100, 1000, 1000, 1000]);
        assert!(out.approved);
        let dev_before = w.ledger.balance("dev");
        let rec = settle_audit(&mut w.ledger, &mut w.book, &out, RewardDestination::Account, &w.params).unwrap();
        assert_eq!(rec.rewards, vec![("a0".into(), TcAmount(560)), ("a1".into(), TcAmount(56)), ("a2".into(), TcAmount(560))]);
        assert_eq!(rec.slashes, vec![("a3".into(), TcAmount(1_120))]);
        assert_eq!(w.ledger.escrow_amount(&EscrowId::stake("a3")), TcAmount(50_000 - 1_120));
        assert_eq!(rec.pool_refund, TcAmount(2_800 - 560 - 56 - 560));
        assert_eq!(w.ledger.balance("dev"), dev_before + rec.pool_refund);
        assert_eq!(rec.deposit_refunds.len(), 5);
        // abstainer untouched apart from the deposit refund
        assert_eq!(w.ledger.balance("a4"), TcAmount::from_tc(50));
        assert!(w.ledger.is_conserved());
        assert!(settle_audit(&mut w.ledger, &mut w.book, &out, RewardDestination::Account, &w.params).is_err());
    }

    #[test]
    fn no_quorum_refunds_everything() {
        use Vote::*;
        let (mut w, out) = world(PublicationType::Sealed, &[Abstain; 5], &[100; 5]);
        let before: Vec<TcAmount> = (0..5).map(|i| w.ledger.balance(&format!("a{i}"))).collect();
        let rec = settle_audit(&mut w.ledger, &mut w.book, &out, RewardDestination::Account, &w.params).unwrap();
        assert!(rec.no_quorum && rec.rewards.is_empty() && rec.slashes.is_empty());
        assert_eq!(rec.pool_refund, TcAmount(2_800));
        for (i, b) in before.iter().enumerate() {
            assert_eq!(w.ledger.balance(&format!("a{i}")), *b + TcAmount::from_tc(6));
        }
        assert!(w.ledger.is_conserved());
    }

    #[test]
    fn stake_rewards_compound() {
        use Vote::*;
        let (mut w, out) = world(PublicationType::Transparent, &[Safe; 5], &[1000; 5]);
        settle_audit(&mut w.ledger, &mut w.book, &out, RewardDestination::Stake, &w.params).unwrap();
        assert_eq!(w.ledger.escrow_amount(&EscrowId::stake("a0")), TcAmount(50_560));
    }

    #[test]
    fn slash_below_minimum_deactivates() {
        use Vote::*;
        let (mut w, out) = world(PublicationType::Transparent, &[Safe, Safe, Safe, Safe, Unsafe], &[1000; 5]);
        // leave exactly s_min in a4's stake
        let extra = w.ledger.escrow_amount(&EscrowId::stake("a4")) - w.params.s_min;
        w.ledger
            .transfer(FlowKind::Unstake, &Party::Escrow(EscrowId::stake("a4")), &Party::Account("a4".into()), extra)
            .unwrap();
        let rec = settle_audit(&mut w.ledger, &mut w.book, &out, RewardDestination::Account, &w.params).unwrap();
        assert_eq!(rec.deactivated, vec!["a4".to_string()]);
        assert!(!w.book.auditor("a4").unwrap().active);
        w.book.top_up_stake(&mut w.ledger, "a4", TcAmount(1_120), &w.params).unwrap();
        assert!(w.book.auditor("a4").unwrap().active);
    }

    #[test]
    fn monitoring_updates_and_retro_split() {
        use Vote::*;
        let (mut w, out) = world(PublicationType::Licensed, &[Safe, Safe, Safe, Unsafe, Unsafe], &[100; 5]);
        settle_audit(&mut w.ledger, &mut w.book, &out, RewardDestination::Account, &w.params).unwrap();
        w.ledger.transfer(FlowKind::Grant, &Party::Treasury, &Party::Account("whistle".into()), TcAmount::from_tc(1)).unwrap();
        re_audit_challenge(&mut w.ledger, &w.skill, true, "whistle", TcAmount::from_tc(1)).unwrap();
        let res = resolve_challenge(&mut w.ledger, &mut w.book, &out, "whistle", true, &w.params).unwrap();
        let ChallengeResolution::Reversed { refund, monitoring, distribution } = res else { panic!() };
        assert_eq!(refund, TcAmount::from_tc(1));
        assert_eq!(monitoring.slashed.len(), 3);
        assert_eq!(distribution.pool, TcAmount(3 * 1_120));
        assert_eq!(distribution.whistleblower, TcAmount(1_008));
        assert_eq!(distribution.per_dissenter, TcAmount(672));
        assert_eq!(distribution.treasury, TcAmount(3_360 - 1_008 - 2 * 672));
        assert_eq!(w.book.auditor("a0").unwrap().reputation, Reputation::from_points(70));
        assert_eq!(w.book.auditor("a3").unwrap().reputation, Reputation::from_points(115));
        assert_eq!(monitoring.bonds_released.len(), 5);
        assert!(w.ledger.is_conserved());
        let _ = &w.ids;
    }

    #[test]
    fn clean_window_rewards_safe_voters() {
        use Vote::*;
        let (mut w, out) = world(PublicationType::Transparent, &[Safe, Safe, Safe, Safe, Unsafe], &[100, 995, 100, 100, 100]);
        let rec = apply_monitoring_outcome(&mut w.ledger, &mut w.book, &out, MonitoringEvent::CleanWindow, &w.params).unwrap();
        assert_eq!(rec.reputation.len(), 4);
        assert_eq!(w.book.auditor("a0").unwrap().reputation, Reputation::from_points(115));
        assert_eq!(w.book.auditor("a1").unwrap().reputation, Reputation::from_points(1_000));
        assert_eq!(w.book.auditor("a4").unwrap().reputation, Reputation::from_points(100));
    }

    #[test]
    fn rejected_skill_cannot_be_monitored_or_challenged() {
        use Vote::*;
        let (mut w, out) = world(PublicationType::Transparent, &[Unsafe; 5], &[100; 5]);
        assert!(!out.approved);
        assert_eq!(
            apply_monitoring_outcome(&mut w.ledger, &mut w.book, &out, MonitoringEvent::CleanWindow, &w.params),
            Err(FlowError::NotApproved(w.skill))
        );
        assert_eq!(
            re_audit_challenge(&mut w.ledger, &w.skill, false, "a0", TcAmount(1)),
            Err(FlowError::NotApproved(w.skill))
        );
    }

    #[test]
    fn confirmed_challenge_fee_to_treasury() {
        use Vote::*;
        let (mut w, out) = world(PublicationType::Transparent, &[Safe; 5], &[100; 5]);
        re_audit_challenge(&mut w.ledger, &w.skill, true, "a0", TcAmount(700)).unwrap();
        let t = w.ledger.treasury();
        let res = resolve_challenge(&mut w.ledger, &mut w.book, &out, "a0", false, &w.params).unwrap();
        assert_eq!(res, ChallengeResolution::Confirmed { fee: TcAmount(700) });
        assert_eq!(w.ledger.treasury(), t + TcAmount(700));
    }

    #[test]
    fn retro_split_examples() {
        let p = EconomicParams::default();
        assert_eq!(
            split_retro_pool(TcAmount::from_tc(10), 2, &p),
            (TcAmount::from_tc(3), TcAmount::from_tc(2), TcAmount::from_tc(3))
        );
        assert_eq!(
            split_retro_pool(TcAmount::from_tc(10), 0, &p),
            (TcAmount::from_tc(3), TcAmount::ZERO, TcAmount::from_tc(7))
        );
        for total in [1u64, 7, 999, 10_001, 123_457] {
            for d in 0..7 {
                let (wb, per, t) = split_retro_pool(TcAmount(total), d, &p);
                assert_eq!(wb.0 + per.0 * d as u64 + t.0, total);
            }
        }
    }

    #[test]
    fn retro_slash_on_empty_pool_fails() {
        let mut l = Ledger::genesis(TcAmount(10), &[]);
        let s = ContentHash([1; 32]);
        assert_eq!(retrospective_slash(&mut l, &s, "w", &[], &EconomicParams::default()), Err(FlowError::EmptyPool(s)));
    }

    #[test]
    fn licensed_purchase_paths() {
        let params = EconomicParams { phi_proto: Ppm(50_000), ..Default::default() };
        let mut l = Ledger::genesis(TcAmount::ZERO, &[("dev", TcAmount::from_tc(20)), ("buyer", TcAmount::from_tc(30))]);
        let s = ContentHash([2; 32]);
        let price = TcAmount::from_tc(10);
        assert_eq!(
            purchase_licensed(&mut l, &s, true, "buyer", "dev", price, 0, &params),
            Err(FlowError::NoDeliveryBond(s))
        );
        assert_eq!(purchase_licensed(&mut l, &s, false, "buyer", "dev", price, 0, &params), Err(FlowError::WrongType));
        freeze_delivery_bond(&mut l, &s, "dev", TcAmount::from_tc(15)).unwrap();
        let rec = purchase_licensed(&mut l, &s, true, "buyer", "dev", price, 100, &params).unwrap();
        assert_eq!(rec.total(), TcAmount(10_500));
        assert_eq!(l.treasury(), TcAmount(500));
        assert_eq!(l.escrow_amount(&EscrowId::purchase(&s, "buyer")), price);
        assert_eq!(rec.deadline, 100 + 86_400);

        assert_eq!(
            expire_purchase(&mut l, &s, "buyer", "dev", rec.deadline),
            Err(FlowError::DeadlineNotReached(rec.deadline))
        );
        assert_eq!(complete_purchase(&mut l, &s, "buyer", "dev", rec.deadline).unwrap(), price);
        assert_eq!(l.balance("dev"), TcAmount::from_tc(15));

        // second purchase times out
        let rec = purchase_licensed(&mut l, &s, true, "buyer", "dev", price, 200, &params).unwrap();
        let buyer_before = l.balance("buyer");
        let exp = expire_purchase(&mut l, &s, "buyer", "dev", rec.deadline + 1).unwrap();
        assert_eq!(exp.buyer_refund, price);
        assert_eq!(l.balance("buyer"), buyer_before + price);
        assert_eq!(exp.to_treasury, TcAmount::from_tc(5));
        assert_eq!(exp.to_developer, price);
        assert!(l.escrow(&EscrowId::delivery_bond(&s)).is_none());
        assert!(l.is_conserved());
    }

    #[test]
    fn bond_must_cover_price() {
        let p = EconomicParams::default();
        let mut l = Ledger::genesis(TcAmount::ZERO, &[("dev", TcAmount(10)), ("b", TcAmount(100))]);
        let s = ContentHash([3; 32]);
        freeze_delivery_bond(&mut l, &s, "dev", TcAmount(5)).unwrap();
        assert_eq!(
            purchase_licensed(&mut l, &s, true, "b", "dev", TcAmount(6), 0, &p),
            Err(FlowError::BondTooSmall { bond: TcAmount(5), price: TcAmount(6) })
        );
    }

    #[test]
    fn decay_all() {
        let (mut w, _) = world(PublicationType::Transparent, &[Vote::Safe; 5], &[1000; 5]);
        decay_reputations(&mut w.book, &w.params);
        assert!(w.book.auditors.values().all(|a| a.reputation == Reputation::from_points(995)));
    }
}
