//! On-disk workspace: configuration, registry log, protocol state, key store
//! and the single-writer lock.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sigil_core::crypto::{ContentKey, ExchangeKey, Identity, VerifierKey};
use sigil_core::economics::{EconomicParams, TcAmount};
use sigil_core::protocol::{OffLogAuditPackage, ProtocolState, Sigil};
use sigil_core::registry::Registry;
use sigil_core::ContentHash;

use crate::error::{CliError, Code};

pub const CONFIG_FILE: &str = "sigil.toml";
pub const LOG_FILE: &str = "registry.log";
pub const STATE_FILE: &str = "state.json";
pub const LOCK_FILE: &str = ".sigil.lock";
const KEYS_DIR: &str = "keys";
const CONTENT_KEYS_DIR: &str = "content-keys";
const OFFLOG_DIR: &str = "offlog";

/// Every economic parameter, as written to `sigil.toml`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub params: EconomicParams,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, CliError> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::new(Code::Usage, format!("invalid config: {e}")))?;
        cfg.params.validate().map_err(|e| CliError::new(Code::Usage, format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn emit(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// Persisted protocol state plus the logical clock.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct State {
    pub clock: u64,
    pub protocol: ProtocolState,
}

/// Public half of a key file pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKeys {
    pub name: String,
    pub exchange_key: ExchangeKey,
    pub verifier_key: VerifierKey,
}

/// Removes the lock file when dropped.
pub struct Lock(PathBuf);

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn log_path(&self) -> PathBuf {
        self.path(LOG_FILE)
    }

    pub fn is_initialized(&self) -> bool {
        self.path(STATE_FILE).exists()
    }

    fn require_init(&self) -> Result<(), CliError> {
        if self.is_initialized() {
            Ok(())
        } else {
            Err(CliError::new(Code::General, format!("{} is not a sigil workspace; run `sigil init`", self.root.display())))
        }
    }

    /// Takes the advisory single-writer lock.
    pub fn lock(&self) -> Result<Lock, CliError> {
        fs::create_dir_all(&self.root)?;
        let path = self.path(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::new(
                Code::General,
                format!("workspace is locked by another process; remove {} if it is stale", path.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }

    pub fn init(&self, config: &Config, allocations: &[(String, TcAmount)]) -> Result<(), CliError> {
        if self.is_initialized() {
            return Err(CliError::new(Code::General, format!("{} is already initialized", self.root.display())));
        }
        for dir in [KEYS_DIR, CONTENT_KEYS_DIR, OFFLOG_DIR] {
            fs::create_dir_all(self.path(dir))?;
        }
        let allocs: Vec<(&str, TcAmount)> = allocations.iter().map(|(n, a)| (n.as_str(), *a)).collect();
        let protocol = ProtocolState::genesis(config.params.clone(), &allocs)?;
        write_atomic(&self.path(CONFIG_FILE), config.emit().as_bytes())?;
        Registry::open(self.log_path())?;
        self.save_state(&State { clock: 0, protocol })
    }

    pub fn config(&self) -> Result<Config, CliError> {
        self.require_init()?;
        Config::parse(&fs::read_to_string(self.path(CONFIG_FILE))?)
    }

    pub fn load_state(&self) -> Result<State, CliError> {
        self.require_init()?;
        let text = fs::read_to_string(self.path(STATE_FILE))?;
        serde_json::from_str(&text).map_err(|e| CliError::new(Code::General, format!("state file unreadable: {e}")))
    }

    pub fn save_state(&self, state: &State) -> Result<(), CliError> {
        let text = serde_json::to_string(state).expect("state serializes");
        write_atomic(&self.path(STATE_FILE), text.as_bytes())
    }

    /// Opens the registry log and protocol state together.
    pub fn open(&self) -> Result<(Sigil, u64), CliError> {
        let state = self.load_state()?;
        let registry = Registry::open(self.log_path())?;
        Ok((Sigil::new(registry, state.protocol), state.clock))
    }

    pub fn save(&self, sigil: &Sigil, clock: u64) -> Result<(), CliError> {
        self.save_state(&State { clock, protocol: sigil.state.clone() })
    }

    fn secret_path(&self, name: &str) -> PathBuf {
        self.path(KEYS_DIR).join(format!("{name}.secret"))
    }

    fn public_path(&self, name: &str) -> PathBuf {
        self.path(KEYS_DIR).join(format!("{name}.pub.json"))
    }

    /// Writes a new identity. Refuses to overwrite an existing name.
    pub fn keygen(&self, name: &str, identity: &Identity) -> Result<PublicKeys, CliError> {
        validate_name(name)?;
        fs::create_dir_all(self.path(KEYS_DIR))?;
        let secret = self.secret_path(name);
        if secret.exists() || self.public_path(name).exists() {
            return Err(CliError::new(Code::General, format!("identity {name} already exists")));
        }
        write_secret(&secret, hex::encode(identity.seed()).as_bytes())?;
        let public = PublicKeys {
            name: name.to_string(),
            exchange_key: identity.exchange_key(),
            verifier_key: identity.verifier_key(),
        };
        write_atomic(&self.public_path(name), serde_json::to_string_pretty(&public).expect("keys serialize").as_bytes())?;
        Ok(public)
    }

    pub fn identity(&self, name: &str) -> Result<Identity, CliError> {
        validate_name(name)?;
        let text = fs::read_to_string(self.secret_path(name))
            .map_err(|_| CliError::new(Code::NotFound, format!("no identity named {name}; run `sigil keygen {name}`")))?;
        let seed: [u8; 32] = hex::decode(text.trim())
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| CliError::new(Code::General, format!("key file for {name} is malformed")))?;
        Ok(Identity::from_seed(seed))
    }

    pub fn public_keys(&self, name: &str) -> Result<PublicKeys, CliError> {
        validate_name(name)?;
        let text = fs::read_to_string(self.public_path(name))
            .map_err(|_| CliError::new(Code::NotFound, format!("no identity named {name}")))?;
        serde_json::from_str(&text).map_err(|e| CliError::new(Code::General, format!("public key file for {name}: {e}")))
    }

    pub fn store_content_key(&self, skill: &ContentHash, key: &ContentKey) -> Result<(), CliError> {
        fs::create_dir_all(self.path(CONTENT_KEYS_DIR))?;
        write_secret(&self.path(CONTENT_KEYS_DIR).join(format!("{skill}.key")), hex::encode(key.to_bytes()).as_bytes())
    }

    pub fn content_key(&self, skill: &ContentHash) -> Result<ContentKey, CliError> {
        let text = fs::read_to_string(self.path(CONTENT_KEYS_DIR).join(format!("{skill}.key")))
            .map_err(|_| CliError::new(Code::NotFound, format!("no content key stored for {skill}")))?;
        let bytes: [u8; 32] = hex::decode(text.trim())
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| CliError::new(Code::General, "content key file is malformed"))?;
        Ok(ContentKey::from_bytes(bytes))
    }

    pub fn store_offlog(&self, skill: &ContentHash, pkg: &OffLogAuditPackage) -> Result<(), CliError> {
        fs::create_dir_all(self.path(OFFLOG_DIR))?;
        let stored = StoredPackage { blob: pkg.blob.to_bytes(), deliveries: pkg.deliveries.clone() };
        let text = serde_json::to_string_pretty(&stored).expect("package serializes");
        write_atomic(&self.path(OFFLOG_DIR).join(format!("{skill}.json")), text.as_bytes())
    }

    pub fn offlog(&self, skill: &ContentHash) -> Result<OffLogAuditPackage, CliError> {
        let text = fs::read_to_string(self.path(OFFLOG_DIR).join(format!("{skill}.json")))
            .map_err(|_| CliError::new(Code::NotFound, format!("no off-log audit package for {skill}; the developer must run `sigil audit deliver`")))?;
        let stored: StoredPackage =
            serde_json::from_str(&text).map_err(|e| CliError::new(Code::General, format!("off-log package: {e}")))?;
        let blob = sigil_core::crypto::ContentBlob::from_bytes(&stored.blob)?;
        Ok(OffLogAuditPackage { blob, deliveries: stored.deliveries })
    }
}

#[derive(Serialize, Deserialize)]
struct StoredPackage {
    #[serde(with = "hex_bytes")]
    blob: Vec<u8>,
    deliveries: Vec<sigil_core::audit::AuditDelivery>,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

fn validate_name(name: &str) -> Result<(), CliError> {
    let ok = !name.is_empty()
        && name.len() <= 64
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(CliError::new(Code::Usage, format!("invalid identity name {name:?}; use letters, digits, '-', '_' or '.'")))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_secret(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut opts = OpenOptions::new();
    opts.write(true).create_new(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f: File = opts.open(path)?;
    f.write_all(bytes)?;
    Ok(())
}
