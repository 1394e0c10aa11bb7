/// `println!` that ignores a closed stdout.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

mod commands;
mod error;
mod sim;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sigil_core::economics::TcAmount;

use error::CliError;

const EXIT_CODES: &str = "\
Exit codes:
  0   success
  1   general failure
  2   usage or configuration error
  10  not found
  11  not approved
  12  access denied
  13  decryption failure
  14  integrity mismatch
  15  permission escalation required
  20  registry log corrupt
  21  wrong state for the operation
  22  insufficient funds

Environment:
  SIGIL_WORKSPACE  workspace root (default: current directory)
  SIGIL_SEED       simulator seed";

#[derive(Parser)]
#[command(name = "sigil", version, about = "Skill registry, audits, verified loading and incentive simulations", after_help = EXIT_CODES)]
pub struct Cli {
    /// Workspace root.
    #[arg(short = 'C', long, env = "SIGIL_WORKSPACE", default_value = ".", global = true)]
    pub workspace: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Create a workspace with a genesis ledger.
    Init {
        /// Configuration file to start from (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Genesis balance, as NAME=TC. Repeatable.
        #[arg(long = "alloc", value_parser = parse_alloc)]
        allocations: Vec<(String, TcAmount)>,
    },
    /// Generate a named identity (exchange and signing keys).
    Keygen { name: String },
    /// Print the workspace configuration, or the default one.
    Config {
        #[arg(long)]
        default: bool,
    },
    /// Show or advance the logical clock.
    Clock {
        /// Seconds to advance.
        #[arg(long)]
        advance: Option<u64>,
    },
    /// Treasury-funded grant to an account.
    Grant {
        account: String,
        #[arg(value_parser = parse_tc)]
        amount: TcAmount,
    },
    /// Account balances, or one account.
    Balance { account: Option<String> },
    /// Publish a skill directory (skill.txt, manifest.json, metadata.json).
    Publish(PublishArgs),
    /// Auditor registration.
    #[command(subcommand)]
    Auditor(AuditorCmd),
    /// Audit workflow: claim, deliver, fetch-key, verdict, tally.
    #[command(subcommand)]
    Audit(AuditCmd),
    /// Buy a Licensed skill.
    Purchase {
        skill: String,
        #[arg(long = "as")]
        buyer: String,
    },
    /// Developer delivers a license key to a paying buyer.
    DeliverLicense {
        skill: String,
        #[arg(long = "as")]
        developer: String,
        #[arg(long)]
        buyer: String,
    },
    /// Refund an undelivered purchase after its deadline.
    Expire {
        skill: String,
        #[arg(long)]
        buyer: String,
    },
    /// Verify and load skills through the loader.
    Load(LoadArgs),
    /// Simulations and sweeps.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Registry log verification and ledger export.
    #[command(subcommand)]
    Ledger(LedgerCmd),
}

#[derive(Args)]
pub struct PublishArgs {
    pub dir: PathBuf,
    #[arg(long = "as")]
    pub developer: String,
    /// Overrides the type in metadata.json.
    #[arg(long = "type")]
    pub publication_type: Option<String>,
    /// License price in TC (Licensed only).
    #[arg(long, value_parser = parse_tc)]
    pub price: Option<TcAmount>,
    /// Delivery bond in TC (Licensed only; defaults to the price).
    #[arg(long, value_parser = parse_tc)]
    pub bond: Option<TcAmount>,
    /// Previous version id.
    #[arg(long)]
    pub prev: Option<String>,
    /// Skill size in LLM tokens (defaults to bytes / 4).
    #[arg(long)]
    pub tokens: Option<u64>,
}

#[derive(Subcommand)]
pub enum AuditorCmd {
    /// Register an identity as auditor, staking from its balance.
    Register {
        name: String,
        #[arg(long, value_parser = parse_tc)]
        stake: TcAmount,
    },
    /// Auditors with stake, reputation and status.
    List,
}

#[derive(Subcommand)]
pub enum AuditCmd {
    /// Claim an audit task, escrowing a deposit and, for encrypted or
    /// committed skills, a confidentiality bond.
    Claim {
        skill: String,
        #[arg(long = "as")]
        auditor: String,
        #[arg(long, value_parser = parse_tc, default_value = "1")]
        deposit: TcAmount,
        #[arg(long, value_parser = parse_tc, default_value = "0")]
        bond: TcAmount,
    },
    /// Developer wraps the content key for every claimant.
    Deliver {
        skill: String,
        #[arg(long = "as")]
        developer: String,
        /// Local content file (Committed skills).
        #[arg(long)]
        content: Option<PathBuf>,
    },
    /// Auditor recovers the content under review.
    #[command(alias = "fetch")]
    FetchKey {
        skill: String,
        #[arg(long = "as")]
        auditor: String,
        /// Write the content here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sign and submit a verdict.
    Verdict {
        skill: String,
        #[arg(long = "as")]
        auditor: String,
        /// safe, unsafe or abstain.
        #[arg(long)]
        vote: String,
        #[arg(long, default_value_t = 0.9)]
        confidence: f64,
        #[arg(long = "finding")]
        findings: Vec<String>,
    },
    /// Decide the task, promote or reject the skill, and settle.
    Tally { skill: String },
}

#[derive(Args)]
pub struct LoadArgs {
    /// Registry targets: skill id, developer/name or name.
    pub targets: Vec<String>,
    #[arg(long = "as")]
    pub requester: String,
    /// Committed skill loaded from a local file, as QUERY=PATH. Repeatable.
    #[arg(long = "local", value_parser = parse_pair)]
    pub local: Vec<(String, PathBuf)>,
    /// Authorized tool. Repeatable.
    #[arg(long = "tool")]
    pub tools: Vec<String>,
    /// Authorized data scope. Repeatable.
    #[arg(long = "scope")]
    pub scopes: Vec<String>,
    /// JSON file with `tools` and `scopes` arrays.
    #[arg(long)]
    pub scope_file: Option<PathBuf>,
    /// Abort instead of prompting when permissions must be escalated.
    #[arg(long)]
    pub non_interactive: bool,
}

#[derive(Args)]
pub struct SimOpts {
    /// TOML configuration for this experiment.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "SIGIL_SEED")]
    pub seed: Option<u64>,
    /// Output directory; results go to standard output otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum SimCmd {
    /// Agent-based audit economy.
    Run {
        #[command(flatten)]
        opts: SimOpts,
        /// Average over this many consecutive seeds.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Accuracy under colluding auditors.
    Collusion {
        #[command(flatten)]
        opts: SimOpts,
        #[arg(long, default_value_t = 50)]
        seeds: u64,
        /// Malicious fractions. Repeatable.
        #[arg(long = "fraction")]
        fractions: Vec<f64>,
    },
    /// Equilibria of the one-round developer/auditor game.
    Nash {
        #[arg(long, default_value_t = 0.56)]
        reward: f64,
        #[arg(long, default_value_t = 1.12)]
        slash: f64,
        #[arg(long, default_value_t = 2.8)]
        fee: f64,
        #[arg(long, default_value_t = 10.0)]
        u_legit: f64,
        #[arg(long, default_value_t = 0.5)]
        bribe: f64,
        #[arg(long, default_value_t = 0.56)]
        r_base: f64,
    },
    /// Final payoff over slash coefficient and accuracy.
    SweepGamma {
        #[command(flatten)]
        opts: SimOpts,
    },
    /// Committee false-negative rate over reputation ratio and malicious fraction.
    SweepR0 {
        #[command(flatten)]
        opts: SimOpts,
    },
}

#[derive(Subcommand)]
pub enum LedgerCmd {
    /// Verify the registry log chain and ledger conservation.
    Verify,
    /// Per-account CSV.
    Export,
    /// Settlement journal, one entry per line.
    Journal,
}

/// `12`, `12.5` or `0.001` TC to milli-TC.
pub fn parse_tc(s: &str) -> Result<TcAmount, String> {
    let bad = || format!("invalid TC amount {s:?}; use up to three decimals");
    let (whole, frac) = s.split_once('.').unwrap_or((s, ""));
    if whole.is_empty() && frac.is_empty() || frac.len() > 3 {
        return Err(bad());
    }
    if !whole.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    let whole: u64 = if whole.is_empty() { 0 } else { whole.parse().map_err(|_| bad())? };
    let frac: u64 = if frac.is_empty() { 0 } else { format!("{frac:0<3}").parse().map_err(|_| bad())? };
    whole
        .checked_mul(TcAmount::UNITS_PER_TC)
        .and_then(|w| w.checked_add(frac))
        .map(TcAmount::milli)
        .ok_or_else(bad)
}

fn parse_alloc(s: &str) -> Result<(String, TcAmount), String> {
    let (name, amount) = s.split_once('=').ok_or_else(|| format!("expected NAME=TC, got {s:?}"))?;
    Ok((name.to_string(), parse_tc(amount)?))
}

fn parse_pair(s: &str) -> Result<(String, PathBuf), String> {
    let (q, p) = s.split_once('=').ok_or_else(|| format!("expected QUERY=PATH, got {s:?}"))?;
    Ok((q.to_string(), PathBuf::from(p)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("error: {e}");
    if let Some(r) = &e.refusal {
        eprintln!("{}", serde_json::to_string_pretty(r).expect("refusals serialize"));
    }
    ExitCode::from(e.code as u8)
}
