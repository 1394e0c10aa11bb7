//! Skill-security lifecycle: content-addressed registration on a
//! tamper-evident log, reputation-weighted audits with stake-and-slash
//! economics, per-recipient key delivery, and verified loading under a
//! permission envelope. A seeded simulator reproduces the incentive
//! experiments.

pub mod audit;
pub mod canon;
pub mod crypto;
pub mod economics;
pub mod protocol;
pub mod registry;
pub mod simulator;
pub mod svl;

pub use canon::ContentHash;
