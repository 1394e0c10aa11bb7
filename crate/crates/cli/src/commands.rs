use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, IsTerminal, Write};
use std::path::Path;

use rand::rngs::OsRng;
use serde::Deserialize;
use serde_json::json;
use sigil_core::audit::{Verdict, Vote};
use sigil_core::crypto::Identity;
use sigil_core::protocol::{ProtocolError, PublishRequest, Sigil};
use sigil_core::registry::{verify_log_file, LogStatus, PermissionManifest, PublicationType};
use sigil_core::svl::{load_from_log, LoadRequest, LoadTarget, RefusalKind, UserScope};
use sigil_core::ContentHash;

use crate::error::{CliError, Code};
use crate::workspace::{Config, Workspace};
use crate::{AuditCmd, AuditorCmd, Cli, Command, LedgerCmd, LoadArgs, PublishArgs};

pub fn run(cli: Cli) -> Result<(), CliError> {
    let ws = Workspace::new(&cli.workspace);
    match cli.command {
        Command::Init { config, allocations } => {
            let cfg = match config {
                Some(p) => Config::parse(&read_text(&p)?)?,
                None => Config::default(),
            };
            let _lock = ws.lock()?;
            ws.init(&cfg, &allocations)?;
            say!("initialized {}", ws.root.display());
            Ok(())
        }
        Command::Keygen { name } => {
            let _lock = ws.lock()?;
            let public = ws.keygen(&name, &Identity::generate(&mut OsRng))?;
            say!("{}", serde_json::to_string_pretty(&public).expect("keys serialize"));
            Ok(())
        }
        Command::Config { default } => {
            let cfg = if default { Config::default() } else { ws.config()? };
            say!("{}", cfg.emit().trim_end());
            Ok(())
        }
        Command::Clock { advance } => match advance {
            None => {
                say!("{}", ws.load_state()?.clock);
                Ok(())
            }
            Some(secs) => {
                let _lock = ws.lock()?;
                let mut state = ws.load_state()?;
                state.clock = state.clock.saturating_add(secs);
                ws.save_state(&state)?;
                say!("{}", state.clock);
                Ok(())
            }
        },
        Command::Grant { account, amount } => report(&ws, |s, _| {
            s.grant(&account, amount)?;
            Ok(format!("{account} {}", s.ledger().balance(&account)))
        }),
        Command::Balance { account } => {
            let (sigil, _) = ws.open()?;
            let ledger = sigil.ledger();
            match account {
                Some(a) => say!("{}", ledger.balance(&a)),
                None => {
                    say!("treasury {}", ledger.treasury());
                    for (id, bal) in ledger.accounts() {
                        say!("{id} {bal}");
                    }
                    let escrowed = ledger.escrows().map(|(_, e)| e.amount.0).sum::<u64>();
                    say!("escrowed {}", sigil_core::economics::TcAmount(escrowed));
                    say!("supply {}", ledger.total_supply());
                }
            }
            Ok(())
        }
        Command::Publish(args) => publish(&ws, args),
        Command::Auditor(AuditorCmd::Register { name, stake }) => {
            let identity = ws.identity(&name)?;
            report(&ws, |s, _| {
                s.register_auditor(&name, &identity, stake)?;
                let active = s.state.book.auditor(&name).map(|a| a.active).unwrap_or(false);
                Ok(format!("registered {name} stake={stake} active={active}"))
            })
        }
        Command::Auditor(AuditorCmd::List) => {
            let (sigil, _) = ws.open()?;
            for (id, a) in sigil.auditors() {
                say!(
                    "{id} stake={} reputation={} active={}",
                    a.stake(sigil.ledger()),
                    a.reputation.points(),
                    a.active
                );
            }
            Ok(())
        }
        Command::Audit(cmd) => audit(&ws, cmd),
        Command::Purchase { skill, buyer } => report(&ws, |s, now| {
            let id = resolve(s, &skill)?;
            let rec = s.purchase(&id, &buyer, now)?;
            Ok(serde_json::to_string_pretty(&rec).expect("records serialize"))
        }),
        Command::DeliverLicense { skill, developer, buyer } => {
            let dev = ws.identity(&developer)?;
            let buyer_key = ws.public_keys(&buyer)?.exchange_key;
            report(&ws, |s, now| {
                let id = resolve(s, &skill)?;
                let key = ws.content_key(&id)?;
                let rec = s.deliver_license(&id, dev.exchange(), &key, &buyer, &buyer_key, now, &mut OsRng)?;
                Ok(format!("delivered license for {id} to {buyer} at log index {}", rec.log_index))
            })
        }
        Command::Expire { skill, buyer } => report(&ws, |s, now| {
            let id = resolve(s, &skill)?;
            let rec = s.expire_purchase(&id, &buyer, now)?;
            Ok(serde_json::to_string_pretty(&rec).expect("records serialize"))
        }),
        Command::Load(args) => load(&ws, args),
        Command::Sim(cmd) => crate::sim::run(cmd),
        Command::Ledger(cmd) => ledger(&ws, cmd),
    }
}

/// Locks the workspace, advances the clock by one second, runs `f` and saves.
/// Nothing is persisted when `f` fails.
fn mutate<T>(ws: &Workspace, f: impl FnOnce(&mut Sigil, u64) -> Result<T, CliError>) -> Result<T, CliError> {
    let _lock = ws.lock()?;
    let (mut sigil, clock) = ws.open()?;
    let now = clock + 1;
    let out = f(&mut sigil, now)?;
    ws.save(&sigil, now)?;
    Ok(out)
}

/// `mutate`, then prints the returned text once the state is saved.
fn report(ws: &Workspace, f: impl FnOnce(&mut Sigil, u64) -> Result<String, CliError>) -> Result<(), CliError> {
    let text = mutate(ws, f)?;
    say!("{text}");
    Ok(())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::new(Code::Usage, format!("cannot read {}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::new(Code::Usage, format!("cannot read {}: {e}", path.display())))
}

/// Full id, unique hex prefix (6+ chars), `developer/name` or bare name. Names
/// match any status; the newest version wins.
pub fn resolve(sigil: &Sigil, query: &str) -> Result<ContentHash, CliError> {
    let not_found = || CliError::new(Code::NotFound, format!("no skill matches {query:?}"));
    if query.len() == 64 {
        if let Ok(id) = ContentHash::from_hex(query) {
            sigil.registry.get_by_id(&id)?;
            return Ok(id);
        }
    }
    if query.len() >= 6 && query.chars().all(|c| c.is_ascii_hexdigit()) {
        let q = query.to_ascii_lowercase();
        let hits: Vec<ContentHash> =
            sigil.registry.records().filter(|r| r.skill_id.to_hex().starts_with(&q)).map(|r| r.skill_id).collect();
        match hits.as_slice() {
            [id] => return Ok(*id),
            [] => {}
            _ => return Err(CliError::new(Code::NotFound, format!("prefix {query} is ambiguous"))),
        }
    }
    let (dev, name) = match query.split_once('/') {
        Some((d, n)) => (Some(d), n),
        None => (None, query),
    };
    let hits: Vec<_> = sigil
        .registry
        .records()
        .filter(|r| r.name == name && dev.is_none_or(|d| r.developer == d))
        .collect();
    let developers: BTreeSet<&str> = hits.iter().map(|r| r.developer.as_str()).collect();
    if developers.len() > 1 {
        return Err(CliError::new(
            Code::NotFound,
            format!("{name} is published by several developers; use developer/{name}"),
        ));
    }
    hits.into_iter().max_by_key(|r| r.timestamp).map(|r| r.skill_id).ok_or_else(not_found)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    #[serde(default)]
    tools: Vec<String>,
    #[serde(default)]
    scopes: Vec<String>,
    #[serde(default)]
    bounds: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MetadataFile {
    name: String,
    #[serde(rename = "type", default)]
    publication_type: Option<String>,
    #[serde(default)]
    price: Option<String>,
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::new(Code::Usage, format!("invalid {}: {e}", path.display())))
}

fn publish(ws: &Workspace, args: PublishArgs) -> Result<(), CliError> {
    let content = read_bytes(&args.dir.join("skill.txt"))?;
    let manifest: ManifestFile = parse_json(&args.dir.join("manifest.json"))?;
    let meta: MetadataFile = parse_json(&args.dir.join("metadata.json"))?;
    let type_name = args.publication_type.or(meta.publication_type).unwrap_or_else(|| "transparent".into());
    let ptype = PublicationType::parse(&type_name)
        .ok_or_else(|| CliError::new(Code::Usage, format!("unknown publication type {type_name:?}")))?;
    let price = match (args.price, meta.price) {
        (Some(p), _) => Some(p),
        (None, Some(p)) => Some(crate::parse_tc(&p).map_err(|e| CliError::new(Code::Usage, e))?),
        (None, None) => None,
    };
    let dev = ws.identity(&args.developer)?;
    let out = mutate(ws, |s, now| {
        let mut req = PublishRequest::new(
            &meta.name,
            ptype,
            content.clone(),
            PermissionManifest::new(manifest.tools, manifest.scopes, manifest.bounds),
            now,
        );
        req.license_price = price;
        req.delivery_bond = args.bond;
        req.skill_tokens = args.tokens;
        req.prev_version = args.prev.as_deref().map(|p| resolve(s, p)).transpose()?;
        let published = s.publish(&args.developer, dev.exchange(), req, &mut OsRng)?;
        if let Some(key) = &published.content_key {
            ws.store_content_key(&published.skill_id, key)?;
        }
        Ok(published)
    })?;
    say!("{}", out.skill_id);
    eprintln!("published {} ({type_name}), fee {}", meta.name, out.fee);
    if ptype == PublicationType::Committed {
        eprintln!("receipt: content_hash {}; keep skill.txt, loads verify it against this hash", out.content_hash);
    }
    Ok(())
}

fn audit(ws: &Workspace, cmd: AuditCmd) -> Result<(), CliError> {
    match cmd {
        AuditCmd::Claim { skill, auditor, deposit, bond } => report(ws, |s, now| {
            let id = resolve(s, &skill)?;
            let phase = s.claim(&id, &auditor, deposit, bond, now)?;
            Ok(format!("{auditor} claimed {id}; task {}", format!("{phase:?}").to_lowercase()))
        }),
        AuditCmd::Deliver { skill, developer, content } => {
            let dev = ws.identity(&developer)?;
            let committed = content.as_deref().map(read_bytes).transpose()?;
            report(ws, |s, _| {
                let id = resolve(s, &skill)?;
                let key = ws.content_key(&id)?;
                match s.deliver_audit_keys(&id, dev.exchange(), &key, committed.as_deref(), &mut OsRng)? {
                    Some(pkg) => {
                        ws.store_offlog(&id, &pkg)?;
                        Ok(format!("wrote off-log audit package for {} claimants", pkg.deliveries.len()))
                    }
                    None => Ok(format!("posted audit keys for {id}")),
                }
            })
        }
        AuditCmd::FetchKey { skill, auditor, out } => {
            let identity = ws.identity(&auditor)?;
            let (sigil, _) = ws.open()?;
            let id = resolve(&sigil, &skill)?;
            let record = sigil.registry.get_by_id(&id)?;
            let text = if record.publication_type == PublicationType::Committed {
                let pkg = ws.offlog(&id)?;
                let delivery = pkg.deliveries.iter().find(|d| d.auditor == auditor).ok_or_else(|| {
                    CliError::new(Code::AccessDenied, format!("the audit package holds no key for {auditor}"))
                })?;
                sigil.fetch_audit_content(&id, identity.exchange(), Some((&pkg.blob, delivery)))
            } else {
                sigil.fetch_audit_content(&id, identity.exchange(), None)
            }
            .map_err(|e| match e {
                ProtocolError::Invalid(m) if m.contains("hash") => CliError::new(Code::Integrity, m),
                ProtocolError::Invalid(m) => CliError::new(Code::AccessDenied, m),
                e => e.into(),
            })?;
            match out {
                Some(p) => fs::write(p, &text)?,
                None => std::io::stdout().write_all(&text)?,
            }
            Ok(())
        }
        AuditCmd::Verdict { skill, auditor, vote, confidence, findings } => {
            let identity = ws.identity(&auditor)?;
            let vote = Vote::parse(&vote)
                .ok_or_else(|| CliError::new(Code::Usage, format!("vote must be safe, unsafe or abstain, not {vote:?}")))?;
            report(ws, |s, now| {
                let id = resolve(s, &skill)?;
                let verdict = Verdict::sign(id, &auditor, vote, findings, confidence, &identity)
                    .map_err(|e| CliError::new(Code::Usage, e.to_string()))?;
                s.submit_verdict(verdict, now)?;
                Ok(format!("{auditor} voted {vote:?} on {id}"))
            })
        }
        AuditCmd::Tally { skill } => report(ws, |s, now| {
            let id = resolve(s, &skill)?;
            let r = s.tally(&id, now)?;
            let report = json!({
                "skill_id": id,
                "approved": r.outcome.approved,
                "no_quorum": r.outcome.no_quorum,
                "safe_score": r.outcome.safe_score,
                "consensus": r.outcome.consensus(),
                "settlement": r.settlement,
            });
            Ok(serde_json::to_string_pretty(&report).expect("reports serialize"))
        }),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScopeFile {
    #[serde(default)]
    tools: Vec<String>,
    #[serde(default)]
    scopes: Vec<String>,
}

fn load(ws: &Workspace, args: LoadArgs) -> Result<(), CliError> {
    if args.targets.is_empty() && args.local.is_empty() {
        return Err(CliError::new(Code::Usage, "nothing to load"));
    }
    let identity = ws.identity(&args.requester)?;
    let mut scope = UserScope::new(args.tools, args.scopes);
    if let Some(p) = &args.scope_file {
        let f: ScopeFile = parse_json(p)?;
        scope.tools.extend(f.tools);
        scope.scopes.extend(f.scopes);
    }
    let mut targets: Vec<LoadTarget> = args.targets.iter().map(LoadTarget::registry).collect();
    targets.extend(args.local.iter().map(|(q, p)| LoadTarget::local(q, p)));
    let interactive = !args.non_interactive && std::io::stdin().is_terminal();
    loop {
        let req = LoadRequest { targets: targets.clone(), requester: identity.exchange(), user_scope: scope.clone() };
        match load_from_log(&ws.log_path(), &req) {
            Ok(result) => {
                say!("{}", result.to_json());
                return Ok(());
            }
            Err(refusal) => {
                let esc = match (&refusal.kind, &refusal.escalation) {
                    (RefusalKind::PermissionExceeded, Some(e)) if interactive && !e.is_empty() => e.clone(),
                    _ => return Err(refusal.into()),
                };
                if !confirm(&esc.tools, &esc.scopes)? {
                    return Err(refusal.into());
                }
                scope.tools.extend(esc.tools);
                scope.scopes.extend(esc.scopes);
            }
        }
    }
}

fn confirm(tools: &BTreeSet<String>, scopes: &BTreeSet<String>) -> Result<bool, CliError> {
    let list = |s: &BTreeSet<String>| s.iter().cloned().collect::<Vec<_>>().join(", ");
    let mut err = std::io::stderr();
    writeln!(err, "These skills need permissions you have not granted.")?;
    if !tools.is_empty() {
        writeln!(err, "  tools:  {}", list(tools))?;
    }
    if !scopes.is_empty() {
        writeln!(err, "  scopes: {}", list(scopes))?;
    }
    write!(err, "Grant them for this load? [y/N] ")?;
    err.flush()?;
    let mut answer = String::new();
    std::io::stdin().lock().read_line(&mut answer)?;
    Ok(matches!(answer.trim(), "y" | "Y" | "yes"))
}

fn ledger(ws: &Workspace, cmd: LedgerCmd) -> Result<(), CliError> {
    match cmd {
        LedgerCmd::Verify => {
            match verify_log_file(&ws.log_path())? {
                LogStatus::Ok => {}
                LogStatus::CorruptAt(i) => {
                    say!("corrupt_at {i}");
                    return Err(CliError::new(Code::LogCorrupt, format!("registry log is corrupt at entry {i}")));
                }
            }
            let (sigil, _) = ws.open()?;
            say!("log ok: {} entries, head {}", sigil.registry.entries().len(), sigil.registry.head());
            if !sigil.check_conservation() {
                return Err(CliError::new(Code::General, "ledger is not conserved"));
            }
            say!("ledger conserved: supply {}", sigil.ledger().total_supply());
            Ok(())
        }
        LedgerCmd::Export => {
            let (sigil, _) = ws.open()?;
            let book = &sigil.state.book;
            let csv = sigil.ledger().export_csv(|id| book.auditors.get(id).map(|a| (a.reputation.points(), a.active)));
            say!("{}", csv.trim_end());
            Ok(())
        }
        LedgerCmd::Journal => {
            let (sigil, _) = ws.open()?;
            for e in sigil.ledger().journal() {
                say!("{}", e.to_line());
            }
            Ok(())
        }
    }
}
