use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TcAmount;

pub type AccountId = String;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("insufficient funds in {party}: need {need}, have {have}")]
    Insufficient { party: String, need: TcAmount, have: TcAmount },
    #[error("unknown escrow {0}")]
    UnknownEscrow(EscrowId),
    #[error("escrow {0} already exists")]
    DuplicateEscrow(EscrowId),
    #[error("supply may only be minted at genesis")]
    MintAfterGenesis,
}

/// Escrow key. The string form is `purpose:scope`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EscrowId(pub String);

impl EscrowId {
    pub fn stake(auditor: &str) -> Self {
        EscrowId(format!("stake:{auditor}"))
    }
    pub fn deposit(skill: &impl fmt::Display, auditor: &str) -> Self {
        EscrowId(format!("deposit:{skill}:{auditor}"))
    }
    pub fn bond(skill: &impl fmt::Display, auditor: &str) -> Self {
        EscrowId(format!("bond:{skill}:{auditor}"))
    }
    pub fn pool(skill: &impl fmt::Display) -> Self {
        EscrowId(format!("pool:{skill}"))
    }
    pub fn delivery_bond(skill: &impl fmt::Display) -> Self {
        EscrowId(format!("delivery-bond:{skill}"))
    }
    pub fn purchase(skill: &impl fmt::Display, buyer: &str) -> Self {
        EscrowId(format!("purchase:{skill}:{buyer}"))
    }
    pub fn challenge(skill: &impl fmt::Display, submitter: &str) -> Self {
        EscrowId(format!("challenge:{skill}:{submitter}"))
    }
    pub fn retro_pool(skill: &impl fmt::Display) -> Self {
        EscrowId(format!("retro:{skill}"))
    }
}

impl fmt::Display for EscrowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EscrowPurpose {
    Stake,
    Deposit,
    ConfidentialityBond,
    AuditPool,
    DeliveryBond,
    Purchase,
    ChallengeFee,
    RetroPool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Escrow {
    pub amount: TcAmount,
    pub purpose: EscrowPurpose,
    pub parties: Vec<AccountId>,
    pub deadline: Option<u64>,
}

/// Source or sink of a flow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Account(AccountId),
    Treasury,
    Escrow(EscrowId),
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Account(a) => write!(f, "account:{a}"),
            Party::Treasury => f.write_str("treasury"),
            Party::Escrow(e) => write!(f, "escrow:{e}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowKind {
    Mint,
    Transfer,
    Grant,
    Stake,
    Unstake,
    Deposit,
    DepositRefund,
    DepositForfeit,
    Bond,
    BondRelease,
    BondForfeit,
    PublicationFee,
    ProtocolFee,
    Reward,
    Slash,
    PoolRefund,
    SlippageSubsidy,
    RetroSlash,
    RetroPayout,
    Purchase,
    PurchaseRelease,
    PurchaseRefund,
    ChallengeFee,
    ChallengeRefund,
}

impl FlowKind {
    pub fn label(self) -> &'static str {
        match self {
            FlowKind::Mint => "mint",
            FlowKind::Transfer => "transfer",
            FlowKind::Grant => "grant",
            FlowKind::Stake => "stake",
            FlowKind::Unstake => "unstake",
            FlowKind::Deposit => "deposit",
            FlowKind::DepositRefund => "deposit-refund",
            FlowKind::DepositForfeit => "deposit-forfeit",
            FlowKind::Bond => "bond",
            FlowKind::BondRelease => "bond-release",
            FlowKind::BondForfeit => "bond-forfeit",
            FlowKind::PublicationFee => "publication-fee",
            FlowKind::ProtocolFee => "protocol-fee",
            FlowKind::Reward => "reward",
            FlowKind::Slash => "slash",
            FlowKind::PoolRefund => "pool-refund",
            FlowKind::SlippageSubsidy => "slippage-subsidy",
            FlowKind::RetroSlash => "retro-slash",
            FlowKind::RetroPayout => "retro-payout",
            FlowKind::Purchase => "purchase",
            FlowKind::PurchaseRelease => "purchase-release",
            FlowKind::PurchaseRefund => "purchase-refund",
            FlowKind::ChallengeFee => "challenge-fee",
            FlowKind::ChallengeRefund => "challenge-refund",
        }
    }
}

/// One executed flow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub kind: FlowKind,
    pub from: Option<Party>,
    pub to: Party,
    pub amount: TcAmount,
}

impl JournalEntry {
    /// `seq kind from to amount_milli_tc`, space separated, `-` for a mint source.
    pub fn to_line(&self) -> String {
        let from = self.from.as_ref().map(ToString::to_string).unwrap_or_else(|| "-".into());
        format!("{} {} {} {} {}", self.seq, self.kind.label(), from, self.to, self.amount.0)
    }
}

/// Accounts, Treasury and escrows. Every flow conserves `total_supply`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    accounts: BTreeMap<AccountId, TcAmount>,
    treasury: TcAmount,
    escrows: BTreeMap<EscrowId, Escrow>,
    total_supply: TcAmount,
    sealed: bool,
    #[serde(default)]
    journal: Vec<JournalEntry>,
    #[serde(default)]
    next_seq: u64,
    /// When false, flows are applied without journaling (simulator fast path).
    #[serde(skip, default = "default_true")]
    record: bool,
}

fn default_true() -> bool {
    true
}

impl Ledger {
    /// Mints the Treasury seed and any initial account balances, then closes minting.
    pub fn genesis(treasury_seed: TcAmount, allocations: &[(&str, TcAmount)]) -> Self {
        let mut ledger = Ledger { record: true, ..Default::default() };
        ledger.mint(Party::Treasury, treasury_seed).expect("genesis is open");
        for (id, amount) in allocations {
            ledger.mint(Party::Account((*id).to_string()), *amount).expect("genesis is open");
        }
        ledger.sealed = true;
        ledger
    }

    /// Genesis without a journal; used by the simulator.
    pub fn genesis_unjournaled(treasury_seed: TcAmount, allocations: &[(&str, TcAmount)]) -> Self {
        let mut ledger = Self::genesis(treasury_seed, allocations);
        ledger.record = false;
        ledger.journal.clear();
        ledger
    }

    fn mint(&mut self, to: Party, amount: TcAmount) -> Result<(), LedgerError> {
        if self.sealed {
            return Err(LedgerError::MintAfterGenesis);
        }
        self.credit(&to, amount);
        self.total_supply = self.total_supply + amount;
        self.log(FlowKind::Mint, None, to, amount);
        Ok(())
    }

    pub fn total_supply(&self) -> TcAmount {
        self.total_supply
    }

    pub fn treasury(&self) -> TcAmount {
        self.treasury
    }

    pub fn balance(&self, account: &str) -> TcAmount {
        self.accounts.get(account).copied().unwrap_or_default()
    }

    pub fn accounts(&self) -> impl Iterator<Item = (&AccountId, &TcAmount)> {
        self.accounts.iter()
    }

    pub fn escrow(&self, id: &EscrowId) -> Option<&Escrow> {
        self.escrows.get(id)
    }

    pub fn escrows(&self) -> impl Iterator<Item = (&EscrowId, &Escrow)> {
        self.escrows.iter()
    }

    pub fn escrow_amount(&self, id: &EscrowId) -> TcAmount {
        self.escrows.get(id).map(|e| e.amount).unwrap_or_default()
    }

    pub fn journal(&self) -> &[JournalEntry] {
        &self.journal
    }

    /// Drains journal entries after `seq` (exclusive) for persistence elsewhere.
    pub fn journal_since(&self, seq: u64) -> &[JournalEntry] {
        let start = self.journal.partition_point(|e| e.seq < seq);
        &self.journal[start..]
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// `sum(accounts) + treasury + sum(escrows) == total_supply`
    pub fn is_conserved(&self) -> bool {
        let accounts: u128 = self.accounts.values().map(|a| a.0 as u128).sum();
        let escrows: u128 = self.escrows.values().map(|e| e.amount.0 as u128).sum();
        accounts + escrows + self.treasury.0 as u128 == self.total_supply.0 as u128
    }

    pub fn available(&self, party: &Party) -> TcAmount {
        match party {
            Party::Account(a) => self.balance(a),
            Party::Treasury => self.treasury,
            Party::Escrow(e) => self.escrow_amount(e),
        }
    }

    /// Opens an empty escrow. Fails if the id is taken.
    pub fn open_escrow(
        &mut self,
        id: EscrowId,
        purpose: EscrowPurpose,
        parties: Vec<AccountId>,
        deadline: Option<u64>,
    ) -> Result<(), LedgerError> {
        if self.escrows.contains_key(&id) {
            return Err(LedgerError::DuplicateEscrow(id));
        }
        self.escrows.insert(id, Escrow { amount: TcAmount::ZERO, purpose, parties, deadline });
        Ok(())
    }

    /// Opens the escrow if missing, keeping an existing one as is.
    pub fn ensure_escrow(&mut self, id: &EscrowId, purpose: EscrowPurpose, parties: Vec<AccountId>) {
        self.escrows
            .entry(id.clone())
            .or_insert(Escrow { amount: TcAmount::ZERO, purpose, parties, deadline: None });
    }

    /// Removes an escrow that has been fully paid out.
    pub fn close_escrow(&mut self, id: &EscrowId) -> Result<(), LedgerError> {
        match self.escrows.get(id) {
            None => Err(LedgerError::UnknownEscrow(id.clone())),
            Some(e) if !e.amount.is_zero() => Err(LedgerError::Insufficient {
                party: format!("escrow:{id} (not empty)"),
                need: TcAmount::ZERO,
                have: e.amount,
            }),
            Some(_) => {
                self.escrows.remove(id);
                Ok(())
            }
        }
    }

    /// Moves `amount` between two parties. Atomic: fails without effect if the
    /// source cannot cover it.
    pub fn transfer(&mut self, kind: FlowKind, from: &Party, to: &Party, amount: TcAmount) -> Result<(), LedgerError> {
        if let Party::Escrow(id) = to {
            if !self.escrows.contains_key(id) {
                return Err(LedgerError::UnknownEscrow(id.clone()));
            }
        }
        if let Party::Escrow(id) = from {
            if !self.escrows.contains_key(id) {
                return Err(LedgerError::UnknownEscrow(id.clone()));
            }
        }
        let have = self.available(from);
        if have < amount {
            return Err(LedgerError::Insufficient { party: from.to_string(), need: amount, have });
        }
        if amount.is_zero() {
            return Ok(());
        }
        self.debit(from, amount);
        self.credit(to, amount);
        self.log(kind, Some(from.clone()), to.clone(), amount);
        Ok(())
    }

    /// Moves up to `amount`, returning what was actually moved.
    pub fn transfer_up_to(&mut self, kind: FlowKind, from: &Party, to: &Party, amount: TcAmount) -> Result<TcAmount, LedgerError> {
        let moved = amount.min(self.available(from));
        self.transfer(kind, from, to, moved)?;
        Ok(moved)
    }

    /// Moves the whole balance of an escrow and closes it.
    pub fn drain_escrow(&mut self, kind: FlowKind, id: &EscrowId, to: &Party) -> Result<TcAmount, LedgerError> {
        let amount = self.escrow_amount(id);
        let from = Party::Escrow(id.clone());
        self.transfer(kind, &from, to, amount)?;
        self.close_escrow(id)?;
        Ok(amount)
    }

    fn debit(&mut self, party: &Party, amount: TcAmount) {
        match party {
            Party::Account(a) => {
                let bal = self.accounts.get_mut(a).expect("checked balance");
                *bal = *bal - amount;
            }
            Party::Treasury => self.treasury = self.treasury - amount,
            Party::Escrow(e) => {
                let esc = self.escrows.get_mut(e).expect("checked escrow");
                esc.amount = esc.amount - amount;
            }
        }
    }

    fn credit(&mut self, party: &Party, amount: TcAmount) {
        match party {
            Party::Account(a) => {
                let bal = self.accounts.entry(a.clone()).or_default();
                *bal = *bal + amount;
            }
            Party::Treasury => self.treasury = self.treasury + amount,
            Party::Escrow(e) => {
                let esc = self.escrows.get_mut(e).expect("checked escrow");
                esc.amount = esc.amount + amount;
            }
        }
    }

    fn log(&mut self, kind: FlowKind, from: Option<Party>, to: Party, amount: TcAmount) {
        let seq = self.next_seq;
        self.next_seq += 1;
        if self.record {
            self.journal.push(JournalEntry { seq, kind, from, to, amount });
        }
    }

    /// Per-account CSV: `id,balance_milli_tc,reputation,active`.
    ///
    /// Reputation and activity come from the caller (the audit book); accounts
    /// without auditor state export empty cells.
    pub fn export_csv(&self, auditor_info: impl Fn(&str) -> Option<(u32, bool)>) -> String {
        let mut out = String::from("id,balance_milli_tc,reputation,active\n");
        out.push_str(&format!("treasury,{},,\n", self.treasury.0));
        for (id, bal) in &self.accounts {
            match auditor_info(id) {
                Some((rep, active)) => out.push_str(&format!("{id},{},{rep},{active}\n", bal.0)),
                None => out.push_str(&format!("{id},{},,\n", bal.0)),
            }
        }
        out
    }
}
