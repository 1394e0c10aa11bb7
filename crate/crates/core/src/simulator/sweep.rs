//! Parameter sweeps: committee false-negative rate and slash-coefficient payoff.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{rng_for, RewardReputation, SimError};
use crate::audit::{meets_threshold, Vote};
use crate::economics::{EconomicParams, Ppm};
use crate::economics::{aligned_reward, decay_reputation, reputation_gain, reputation_loss, slash_amount, Reputation, TcAmount};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    FnRate,
    FinalPayoff,
    FinalReputation,
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub x: f64,
    pub y: f64,
    pub value: f64,
    pub trials: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub metric: Metric,
    pub x_name: String,
    pub y_name: String,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn get(&self, x: f64, y: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.x == x && c.y == y)
    }

    pub fn xs(&self) -> Vec<f64> {
        dedup(self.cells.iter().map(|c| c.x))
    }

    pub fn ys(&self) -> Vec<f64> {
        dedup(self.cells.iter().map(|c| c.y))
    }

    /// `<x_name>,<y_name>,metric,value,trials,seed`
    pub fn to_csv(&self) -> String {
        let metric = serde_json::to_value(self.metric).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        let mut out = format!("{},{},metric,value,trials,seed\n", self.x_name, self.y_name);
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{metric},{:.6},{},{}", c.x, c.y, c.value, c.trials, c.seed);
        }
        out
    }
}

fn dedup(it: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = Vec::new();
    for x in it {
        if !v.contains(&x) {
            v.push(x);
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FnConfig {
    /// Malicious seats' reputation as a fraction of `r_max`.
    pub ratio: f64,
    /// Probability that a seat is malicious.
    pub fraction: f64,
    pub trials: u64,
    pub committee_size: usize,
    pub theta: Ppm,
    pub r_max: u32,
    pub seed: u64,
}

impl Default for FnConfig {
    fn default() -> Self {
        FnConfig { ratio: 0.1, fraction: 0.3, trials: 20_000, committee_size: 5, theta: Ppm(600_000), r_max: 1_000, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnEstimate {
    pub fn_rate: f64,
    pub false_negatives: u64,
    pub trials: u64,
    pub seed: u64,
}

/// Fraction of malicious skills approved by a committee whose seats are
/// independently malicious. Malicious seats vote safe at reputation
/// `ratio * r_max`; honest seats vote unsafe at `r_max`.
pub fn monte_carlo_fn(cfg: &FnConfig) -> Result<FnEstimate, SimError> {
    if !(cfg.ratio > 0.0 && cfg.ratio <= 1.0) {
        return Err(SimError::InvalidConfig("ratio must lie in (0, 1]".into()));
    }
    if !(0.0..=1.0).contains(&cfg.fraction) || cfg.committee_size == 0 {
        return Err(SimError::InvalidConfig("fraction outside [0, 1] or empty committee".into()));
    }
    let honest = Reputation::from_points(cfg.r_max);
    let malicious = Reputation((cfg.ratio * honest.0 as f64).round().max(1.0) as u32);
    let mut rng = rng_for(cfg.seed);
    let mut fns = 0u64;
    let mut seats = Vec::with_capacity(cfg.committee_size);
    for _ in 0..cfg.trials {
        seats.clear();
        for _ in 0..cfg.committee_size {
            let u: f64 = rng.gen();
            seats.push(if u < cfg.fraction { (Vote::Safe, malicious) } else { (Vote::Unsafe, honest) });
        }
        if meets_threshold(seats.iter().copied(), cfg.theta).unwrap_or(false) {
            fns += 1;
        }
    }
    Ok(FnEstimate {
        fn_rate: if cfg.trials == 0 { 0.0 } else { fns as f64 / cfg.trials as f64 },
        false_negatives: fns,
        trials: cfg.trials,
        seed: cfg.seed,
    })
}

/// FN rate over a `ratio x fraction` grid. Every cell uses `base.seed`.
pub fn sweep_r0(ratios: &[f64], fractions: &[f64], base: &FnConfig) -> Result<SweepResult, SimError> {
    let mut cells = Vec::with_capacity(ratios.len() * fractions.len());
    for &x in ratios {
        for &y in fractions {
            let est = monte_carlo_fn(&FnConfig { ratio: x, fraction: y, ..base.clone() })?;
            cells.push(SweepCell { x, y, value: est.fn_rate, trials: est.trials, seed: est.seed });
        }
    }
    Ok(SweepResult { metric: Metric::FnRate, x_name: "r0_over_rmax".into(), y_name: "malicious_fraction".into(), cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GammaSweepConfig {
    pub gammas: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub rounds: usize,
    /// Seeds per cell; trial `t` uses `seed + t` in every cell.
    pub trials: u64,
    pub seed: u64,
    pub initial_balance: TcAmount,
    pub r_base: TcAmount,
    pub reward_reputation: RewardReputation,
    pub params: EconomicParams,
}

impl Default for GammaSweepConfig {
    fn default() -> Self {
        GammaSweepConfig {
            gammas: (1..=16).map(|i| i as f64 * 0.25).collect(),
            accuracies: (0..10).map(|i| (55 + 5 * i) as f64 / 100.0).collect(),
            rounds: 600,
            trials: 100,
            seed: 0,
            initial_balance: TcAmount::from_tc(200),
            r_base: TcAmount::milli(560),
            reward_reputation: RewardReputation::Dynamic,
            params: EconomicParams { s_min: TcAmount::milli(1), ..EconomicParams::default() },
        }
    }
}

/// Final payoff of one auditor voting in every round, for a single trial.
pub fn gamma_trial(cfg: &GammaSweepConfig, gamma: f64, accuracy: f64, trial: u64) -> i64 {
    let params = EconomicParams { gamma: Ppm::from_f64(gamma), ..cfg.params.clone() };
    let slash = slash_amount(cfg.r_base, &params);
    let r_max = Reputation::from_points(params.r_max);
    let mut rng = rng_for(cfg.seed.wrapping_add(trial));
    let mut balance = cfg.initial_balance;
    let mut rep = Reputation::from_points(params.r0);
    for _ in 0..cfg.rounds {
        if balance < params.s_min {
            break;
        }
        let u: f64 = rng.gen();
        if u < accuracy {
            let basis = match cfg.reward_reputation {
                RewardReputation::FixedRmax => r_max,
                RewardReputation::Dynamic => rep,
            };
            balance = balance + aligned_reward(cfg.r_base, basis, &params);
            rep = reputation_gain(rep, &params);
        } else {
            balance = balance.saturating_sub(slash);
            rep = reputation_loss(rep, &params);
        }
        rep = decay_reputation(rep, &params);
    }
    balance.units() as i64 - cfg.initial_balance.units() as i64
}

/// Mean final payoff in TC over a `gamma x accuracy` grid.
pub fn sweep_gamma(cfg: &GammaSweepConfig) -> Result<SweepResult, SimError> {
    if cfg.gammas.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
        return Err(SimError::InvalidConfig("gamma values must be positive".into()));
    }
    if cfg.accuracies.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(SimError::InvalidConfig("accuracy values outside [0, 1]".into()));
    }
    let mut cells = Vec::with_capacity(cfg.gammas.len() * cfg.accuracies.len());
    for &g in &cfg.gammas {
        for &a in &cfg.accuracies {
            let total: i64 = (0..cfg.trials).map(|t| gamma_trial(cfg, g, a, t)).sum();
            let mean = total as f64 / cfg.trials.max(1) as f64 / TcAmount::UNITS_PER_TC as f64;
            cells.push(SweepCell { x: g, y: a, value: mean, trials: cfg.trials, seed: cfg.seed });
        }
    }
    Ok(SweepResult { metric: Metric::FinalPayoff, x_name: "gamma".into(), y_name: "accuracy".into(), cells })
}
