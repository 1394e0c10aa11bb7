//! One-round developer/auditor game.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid game parameters: {0}")]
pub struct GameError(pub &'static str);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DeveloperMove {
    Benign,
    Malicious,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AuditorMove {
    Cooperate,
    Defect,
}

const DEV: [DeveloperMove; 2] = [DeveloperMove::Benign, DeveloperMove::Malicious];
const AUD: [AuditorMove; 2] = [AuditorMove::Cooperate, AuditorMove::Defect];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Profile(pub DeveloperMove, pub AuditorMove);

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.0 {
            DeveloperMove::Benign => 'B',
            DeveloperMove::Malicious => 'M',
        };
        let a = match self.1 {
            AuditorMove::Cooperate => 'C',
            AuditorMove::Defect => 'D',
        };
        write!(f, "({d},{a})")
    }
}

/// Payoffs `(U_d, U_a)`:
///
/// |   | C                  | D                      |
/// |---|--------------------|------------------------|
/// | B | (U_legit - C, R)   | (U_legit - C, R)       |
/// | M | (-C, R)            | (-C - Bribe, Bribe - S)|
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameMatrix {
    pub reward: f64,
    pub slash: f64,
    pub publication_fee: f64,
    pub u_legit: f64,
    pub bribe: f64,
    pub r_base: f64,
}

impl GameMatrix {
    /// Enforces `S > Bribe > 0` and `S > R_base >= R >= 0`.
    pub fn new(reward: f64, slash: f64, publication_fee: f64, u_legit: f64, bribe: f64, r_base: f64) -> Result<Self, GameError> {
        let all = [reward, slash, publication_fee, u_legit, bribe, r_base];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(GameError("parameters must be finite"));
        }
        if !(bribe > 0.0 && slash > bribe) {
            return Err(GameError("need S > Bribe > 0"));
        }
        if !(slash > r_base && r_base >= reward && reward >= 0.0) {
            return Err(GameError("need S > R_base >= R >= 0"));
        }
        if u_legit < 0.0 || publication_fee < 0.0 {
            return Err(GameError("U_legit and C_pub must be non-negative"));
        }
        Ok(Self::unchecked(reward, slash, publication_fee, u_legit, bribe, r_base))
    }

    /// Builds a matrix without constraint checks, for exploring violations.
    pub fn unchecked(reward: f64, slash: f64, publication_fee: f64, u_legit: f64, bribe: f64, r_base: f64) -> Self {
        GameMatrix { reward, slash, publication_fee, u_legit, bribe, r_base }
    }

    pub fn payoff(&self, p: Profile) -> (f64, f64) {
        use AuditorMove::*;
        use DeveloperMove::*;
        match (p.0, p.1) {
            (Benign, _) => (self.u_legit - self.publication_fee, self.reward),
            (Malicious, Cooperate) => (-self.publication_fee, self.reward),
            (Malicious, Defect) => (-self.publication_fee - self.bribe, self.bribe - self.slash),
        }
    }

    /// Smallest loss from a unilateral deviation away from `(B,C)`: the
    /// developer switching to M, or the auditor defecting on a malicious skill.
    pub fn deviation_loss(&self) -> f64 {
        let bc = self.payoff(Profile(DeveloperMove::Benign, AuditorMove::Cooperate));
        let mc = self.payoff(Profile(DeveloperMove::Malicious, AuditorMove::Cooperate));
        let md = self.payoff(Profile(DeveloperMove::Malicious, AuditorMove::Defect));
        (bc.0 - mc.0).min(mc.1 - md.1)
    }

    /// True when every unilateral deviation from `p` is strictly worse.
    pub fn is_strict(&self, p: Profile) -> bool {
        let (ud, ua) = self.payoff(p);
        let dev_ok = DEV.iter().filter(|&&d| d != p.0).all(|&d| self.payoff(Profile(d, p.1)).0 < ud);
        let aud_ok = AUD.iter().filter(|&&a| a != p.1).all(|&a| self.payoff(Profile(p.0, a)).1 < ua);
        dev_ok && aud_ok
    }
}

fn equilibria_within(m: &GameMatrix, devs: &[DeveloperMove], auds: &[AuditorMove]) -> BTreeSet<Profile> {
    let mut out = BTreeSet::new();
    for &d in devs {
        for &a in auds {
            let (ud, ua) = m.payoff(Profile(d, a));
            let dev_best = devs.iter().all(|&d2| m.payoff(Profile(d2, a)).0 <= ud);
            let aud_best = auds.iter().all(|&a2| m.payoff(Profile(d, a2)).1 <= ua);
            if dev_best && aud_best {
                out.insert(Profile(d, a));
            }
        }
    }
    out
}

/// All pure-strategy Nash equilibria by best-response enumeration.
pub fn pure_nash(m: &GameMatrix) -> BTreeSet<Profile> {
    equilibria_within(m, &DEV, &AUD)
}

/// Pure equilibria that survive iterated removal of weakly dominated
/// strategies. In the benign row both auditor moves pay `R`, so plain
/// enumeration also admits `(B,D)`; removing the dominated D leaves `(B,C)`.
pub fn nash_equilibria(m: &GameMatrix) -> BTreeSet<Profile> {
    let mut devs = DEV.to_vec();
    let mut auds = AUD.to_vec();
    loop {
        let dev_dominated: Vec<DeveloperMove> = devs
            .iter()
            .copied()
            .filter(|&s| {
                devs.iter().any(|&t| {
                    t != s
                        && auds.iter().all(|&a| m.payoff(Profile(t, a)).0 >= m.payoff(Profile(s, a)).0)
                        && auds.iter().any(|&a| m.payoff(Profile(t, a)).0 > m.payoff(Profile(s, a)).0)
                })
            })
            .collect();
        let aud_dominated: Vec<AuditorMove> = auds
            .iter()
            .copied()
            .filter(|&s| {
                auds.iter().any(|&t| {
                    t != s
                        && devs.iter().all(|&d| m.payoff(Profile(d, t)).1 >= m.payoff(Profile(d, s)).1)
                        && devs.iter().any(|&d| m.payoff(Profile(d, t)).1 > m.payoff(Profile(d, s)).1)
                })
            })
            .collect();
        if dev_dominated.is_empty() && aud_dominated.is_empty() {
            break;
        }
        devs.retain(|s| !dev_dominated.contains(s));
        auds.retain(|s| !aud_dominated.contains(s));
    }
    equilibria_within(m, &devs, &auds)
}
