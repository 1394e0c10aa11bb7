use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TcAmount;

/// Parts-per-million denominator for every fractional parameter.
pub const PPM: u64 = 1_000_000;

/// A fraction stored as parts per million.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ppm(pub u64);

impl Ppm {
    pub const ZERO: Ppm = Ppm(0);
    pub const ONE: Ppm = Ppm(PPM);

    /// Nearest ppm value for a real fraction. Only used at configuration boundaries.
    pub fn from_f64(x: f64) -> Ppm {
        Ppm((x * PPM as f64).round().max(0.0) as u64)
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / PPM as f64
    }

    pub fn complement(self) -> Ppm {
        Ppm(PPM.saturating_sub(self.0))
    }
}

/// Retrospective slash pool split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlashSplit {
    pub whistleblower: Ppm,
    pub dissenters: Ppm,
    pub treasury: Ppm,
}

impl Default for SlashSplit {
    fn default() -> Self {
        SlashSplit {
            whistleblower: Ppm(300_000),
            dissenters: Ppm(400_000),
            treasury: Ppm(300_000),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid economic parameter: {0}")]
pub struct ParamError(pub &'static str);

/// Every tunable of the audit economy. Times are logical seconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EconomicParams {
    /// LLM tokens per TC.
    pub kappa_tc: u64,
    /// Flat reward floor.
    pub beta0: TcAmount,
    /// Size-scaling coefficient.
    pub beta1: Ppm,
    /// Committee size N.
    pub committee_size: usize,
    pub phi_proto: Ppm,
    /// Slash coefficient; must be at least 1.
    pub gamma: Ppm,
    /// Slippage rate per wait interval.
    pub sigma: Ppm,
    pub delta_t: u64,
    pub delta_plus: u32,
    pub delta_minus: u32,
    /// Per-epoch reputation decay factor.
    pub alpha: Ppm,
    pub s_min: TcAmount,
    pub r0: u32,
    pub r_max: u32,
    /// Approval threshold on the safe score.
    pub theta: Ppm,
    pub monitoring_window: u64,
    pub tau_deliver: u64,
    pub treasury_seed: TcAmount,
    pub slash_split: SlashSplit,
    /// Logical-time window for verdicts after the committee fills.
    pub verdict_window: u64,
}

impl Default for EconomicParams {
    fn default() -> Self {
        EconomicParams {
            kappa_tc: 5_000,
            beta0: TcAmount::milli(200),
            beta1: Ppm(900_000),
            committee_size: 5,
            phi_proto: Ppm::ZERO,
            gamma: Ppm(2_000_000),
            sigma: Ppm(250_000),
            delta_t: 3_600,
            delta_plus: 15,
            delta_minus: 30,
            alpha: Ppm(995_000),
            s_min: TcAmount::from_tc(10),
            r0: 100,
            r_max: 1_000,
            theta: Ppm(600_000),
            monitoring_window: 7 * 86_400,
            tau_deliver: 86_400,
            treasury_seed: TcAmount::from_tc(100_000),
            slash_split: SlashSplit::default(),
            verdict_window: 86_400,
        }
    }
}

impl EconomicParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        if self.kappa_tc == 0 {
            return Err(ParamError("kappa_tc must be positive"));
        }
        if self.committee_size == 0 {
            return Err(ParamError("committee_size must be positive"));
        }
        if self.gamma.0 < PPM {
            return Err(ParamError("gamma must be at least 1"));
        }
        if self.delta_minus <= self.delta_plus {
            return Err(ParamError("delta_minus must exceed delta_plus"));
        }
        if self.alpha.0 == 0 || self.alpha.0 >= PPM {
            return Err(ParamError("alpha must lie strictly between 0 and 1"));
        }
        if self.phi_proto.0 > PPM {
            return Err(ParamError("phi_proto must be at most 1"));
        }
        if self.theta.0 > PPM {
            return Err(ParamError("theta must be at most 1"));
        }
        if self.r_max == 0 || self.r0 > self.r_max {
            return Err(ParamError("need 0 <= r0 <= r_max and r_max > 0"));
        }
        if self.delta_t == 0 {
            return Err(ParamError("delta_t must be positive"));
        }
        let s = self.slash_split;
        if s.whistleblower.0 + s.dissenters.0 + s.treasury.0 != PPM {
            return Err(ParamError("slash_split must sum to 1"));
        }
        Ok(())
    }
}
