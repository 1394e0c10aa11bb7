use std::fmt;

use sigil_core::audit::AuditError;
use sigil_core::crypto::CryptoError;
use sigil_core::economics::{FlowError, LedgerError};
use sigil_core::protocol::ProtocolError;
use sigil_core::registry::RegistryError;
use sigil_core::simulator::{GameError, SimError};
use sigil_core::svl::{Refusal, RefusalKind};

/// Process exit codes. Stable; documented in the README and `--help`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Code {
    General = 1,
    Usage = 2,
    NotFound = 10,
    NotApproved = 11,
    AccessDenied = 12,
    Decryption = 13,
    Integrity = 14,
    PermissionExceeded = 15,
    LogCorrupt = 20,
    WrongState = 21,
    InsufficientFunds = 22,
}

#[derive(Debug)]
pub struct CliError {
    pub code: Code,
    pub message: String,
    /// Structured refusal, printed as JSON on stderr.
    pub refusal: Option<Box<Refusal>>,
}

impl CliError {
    pub fn new(code: Code, message: impl Into<String>) -> Self {
        CliError { code, message: message.into(), refusal: None }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(Code::General, format!("i/o error: {e}"))
    }
}

pub fn refusal_code(kind: RefusalKind) -> Code {
    match kind {
        RefusalKind::NotFound => Code::NotFound,
        RefusalKind::NotApproved => Code::NotApproved,
        RefusalKind::AccessDenied => Code::AccessDenied,
        RefusalKind::DecryptionFailure => Code::Decryption,
        RefusalKind::IntegrityMismatch => Code::Integrity,
        RefusalKind::PermissionExceeded => Code::PermissionExceeded,
        RefusalKind::LogCorrupt => Code::LogCorrupt,
        RefusalKind::InvalidRequest => Code::Usage,
    }
}

impl From<Refusal> for CliError {
    fn from(r: Refusal) -> Self {
        CliError { code: refusal_code(r.kind), message: r.to_string(), refusal: Some(Box::new(r)) }
    }
}

fn registry_code(e: &RegistryError) -> Code {
    match e {
        RegistryError::NotFound(_) | RegistryError::PrevNotFound(_) | RegistryError::Ambiguous(_) => Code::NotFound,
        RegistryError::NotApproved(_) | RegistryError::OutcomeNotApproved(_) => Code::NotApproved,
        RegistryError::LogCorrupt(_) | RegistryError::BrokenChain(_) => Code::LogCorrupt,
        RegistryError::NotPending(_) | RegistryError::WrongType(_) => Code::WrongState,
        _ => Code::General,
    }
}

fn ledger_code(e: &LedgerError) -> Code {
    match e {
        LedgerError::Insufficient { .. } => Code::InsufficientFunds,
        _ => Code::General,
    }
}

fn audit_code(e: &AuditError) -> Code {
    match e {
        AuditError::UnknownAuditor(_) | AuditError::UnknownTask(_) => Code::NotFound,
        AuditError::WrongState(_)
        | AuditError::NotClaimant(_)
        | AuditError::DuplicateClaim(_)
        | AuditError::DuplicateVerdict(_)
        | AuditError::Inactive(_)
        | AuditError::TaskExists(_)
        | AuditError::NoQuorum => Code::WrongState,
        AuditError::Ledger(l) => ledger_code(l),
        AuditError::Crypto(_) => Code::Decryption,
        _ => Code::General,
    }
}

fn flow_code(e: &FlowError) -> Code {
    match e {
        FlowError::Ledger(l) => ledger_code(l),
        FlowError::Audit(a) => audit_code(a),
        FlowError::NotApproved(_) => Code::NotApproved,
        FlowError::UnknownPurchase { .. } | FlowError::NoChallenge { .. } => Code::NotFound,
        FlowError::DeadlineNotReached(_)
        | FlowError::DeadlinePassed(_)
        | FlowError::WrongType
        | FlowError::NoDeliveryBond(_)
        | FlowError::EmptyPool(_) => Code::WrongState,
        _ => Code::General,
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        let code = match &e {
            ProtocolError::Registry(r) => registry_code(r),
            ProtocolError::Audit(a) => audit_code(a),
            ProtocolError::Flow(f) => flow_code(f),
            ProtocolError::Ledger(l) => ledger_code(l),
            ProtocolError::Crypto(_) => Code::Decryption,
            ProtocolError::Params(_) => Code::Usage,
            ProtocolError::Refused(r) => return r.clone().into(),
            ProtocolError::Invalid(_) => Code::General,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<RegistryError> for CliError {
    fn from(e: RegistryError) -> Self {
        CliError::new(registry_code(&e), e.to_string())
    }
}

impl From<CryptoError> for CliError {
    fn from(e: CryptoError) -> Self {
        CliError::new(Code::Decryption, e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let code = match e {
            SimError::InvalidConfig(_) => Code::Usage,
            _ => Code::General,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<GameError> for CliError {
    fn from(e: GameError) -> Self {
        CliError::new(Code::Usage, e.to_string())
    }
}
