//! Token-credit economy: reward and fee formulas, the conserving ledger,
//! and the settlement flows built on it.
//!
//! Amounts are integer milli-TC. Fractions are parts per million and are
//! applied with floor division.

mod flows;
mod ledger;
mod params;

use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

pub use flows::*;
pub use ledger::{Escrow, EscrowId, EscrowPurpose, FlowKind, JournalEntry, Ledger, LedgerError, Party};
pub use params::{EconomicParams, ParamError, Ppm, SlashSplit, PPM};

/// Milli-TC. `1 TC = 1000` units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TcAmount(pub u64);

impl TcAmount {
    pub const ZERO: TcAmount = TcAmount(0);
    pub const UNITS_PER_TC: u64 = 1_000;

    pub const fn milli(units: u64) -> Self {
        TcAmount(units)
    }

    pub const fn from_tc(tc: u64) -> Self {
        TcAmount(tc * Self::UNITS_PER_TC)
    }

    pub fn units(self) -> u64 {
        self.0
    }

    pub fn as_tc(self) -> f64 {
        self.0 as f64 / Self::UNITS_PER_TC as f64
    }

    pub fn checked_sub(self, rhs: TcAmount) -> Option<TcAmount> {
        self.0.checked_sub(rhs.0).map(TcAmount)
    }

    pub fn saturating_sub(self, rhs: TcAmount) -> TcAmount {
        TcAmount(self.0.saturating_sub(rhs.0))
    }

    /// `floor(self * fraction)`.
    pub fn mul_ppm(self, fraction: Ppm) -> TcAmount {
        TcAmount(mul_div(self.0, fraction.0, PPM))
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl Add for TcAmount {
    type Output = TcAmount;
    fn add(self, rhs: TcAmount) -> TcAmount {
        TcAmount(self.0.checked_add(rhs.0).expect("TC amount overflow"))
    }
}

impl Sub for TcAmount {
    type Output = TcAmount;
    fn sub(self, rhs: TcAmount) -> TcAmount {
        TcAmount(self.0.checked_sub(rhs.0).expect("TC amount underflow"))
    }
}

impl std::iter::Sum for TcAmount {
    fn sum<I: Iterator<Item = TcAmount>>(iter: I) -> TcAmount {
        iter.fold(TcAmount::ZERO, |a, b| a + b)
    }
}

impl fmt::Display for TcAmount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03} TC", self.0 / 1000, self.0 % 1000)
    }
}

/// `floor(a * b / d)` without intermediate overflow.
pub(crate) fn mul_div(a: u64, b: u64, d: u64) -> u64 {
    ((a as u128 * b as u128) / d as u128) as u64
}

/// Reference audit reward `beta0 + beta1 * L / kappa_tc`.
pub fn r_base(skill_tokens: u64, params: &EconomicParams) -> TcAmount {
    let size_term = (params.beta1.0 as u128 * skill_tokens as u128 * TcAmount::UNITS_PER_TC as u128)
        / (PPM as u128 * params.kappa_tc as u128);
    params.beta0 + TcAmount(size_term as u64)
}

/// Slippage-adjusted reference reward for a task opened at `t0`.
pub fn slippage_r_base(skill_tokens: u64, t: u64, t0: u64, params: &EconomicParams) -> TcAmount {
    let base = r_base(skill_tokens, params);
    slippage_adjust(base, t, t0, params)
}

pub fn slippage_adjust(base: TcAmount, t: u64, t0: u64, params: &EconomicParams) -> TcAmount {
    let intervals = t.saturating_sub(t0) / params.delta_t;
    let bump = mul_div(base.0, params.sigma.0.saturating_mul(intervals), PPM);
    base + TcAmount(bump)
}

/// Split of the publication fee `N * R_base`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeeSplit {
    pub total: TcAmount,
    pub treasury_cut: TcAmount,
    pub audit_pool: TcAmount,
}

/// The pool is floored; the rounding remainder stays in the Treasury cut.
pub fn publication_fee(skill_tokens: u64, params: &EconomicParams) -> FeeSplit {
    fee_from_r_base(r_base(skill_tokens, params), params)
}

pub fn fee_from_r_base(rb: TcAmount, params: &EconomicParams) -> FeeSplit {
    let total = TcAmount(rb.0 * params.committee_size as u64);
    let audit_pool = total.mul_ppm(params.phi_proto.complement());
    FeeSplit { total, treasury_cut: total - audit_pool, audit_pool }
}

/// Reputation in fixed-point milli-points; `1000` units per reputation point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Reputation(pub u32);

impl Reputation {
    pub const ZERO: Reputation = Reputation(0);
    pub const UNITS_PER_POINT: u32 = 1_000;

    pub const fn from_points(points: u32) -> Self {
        Reputation(points * Self::UNITS_PER_POINT)
    }

    /// Whole points, rounded down.
    pub fn points(self) -> u32 {
        self.0 / Self::UNITS_PER_POINT
    }

    pub fn milli(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / Self::UNITS_PER_POINT as f64
    }
}

impl fmt::Display for Reputation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}", self.0 / 1000, self.0 % 1000)
    }
}

/// Consensus-aligned reward `(1 - phi) * R_base * r_i / r_max`.
pub fn aligned_reward(rb: TcAmount, reputation: Reputation, params: &EconomicParams) -> TcAmount {
    let cap = Reputation::from_points(params.r_max);
    let num = rb.0 as u128 * params.phi_proto.complement().0 as u128 * reputation.min(cap).0 as u128;
    let den = PPM as u128 * cap.0 as u128;
    TcAmount((num / den) as u64)
}

/// Fixed per-skill slash `gamma * R_base`.
pub fn slash_amount(rb: TcAmount, params: &EconomicParams) -> TcAmount {
    rb.mul_ppm(params.gamma)
}

/// One decay epoch: `floor(r * alpha)` at milli-point resolution.
pub fn decay_reputation(r: Reputation, params: &EconomicParams) -> Reputation {
    Reputation(mul_div(r.0 as u64, params.alpha.0, PPM) as u32)
}

/// `min(r_max, r + delta_plus)`
pub fn reputation_gain(r: Reputation, params: &EconomicParams) -> Reputation {
    let cap = Reputation::from_points(params.r_max);
    Reputation(r.0.saturating_add(params.delta_plus * Reputation::UNITS_PER_POINT)).min(cap)
}

/// `max(0, r - delta_minus)`
pub fn reputation_loss(r: Reputation, params: &EconomicParams) -> Reputation {
    Reputation(r.0.saturating_sub(params.delta_minus * Reputation::UNITS_PER_POINT))
}
