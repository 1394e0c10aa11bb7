//! `sigil sim ...`: each experiment reads its own TOML file; every field is
//! optional and falls back to the defaults.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sigil_core::simulator::{
    collusion_curve, nash_equilibria, pure_nash, run_economy, run_ensemble, sweep_gamma, sweep_r0, CollusionConfig,
    FnConfig, GameMatrix, GammaSweepConfig, SimConfig,
};

use crate::error::{CliError, Code};
use crate::{SimCmd, SimOpts};

/// Grid for `sim sweep-r0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct R0Sweep {
    pub ratios: Vec<f64>,
    pub fractions: Vec<f64>,
    pub base: FnConfig,
}

impl Default for R0Sweep {
    fn default() -> Self {
        R0Sweep {
            ratios: vec![0.02, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40],
            fractions: vec![0.2, 0.3, 0.4],
            base: FnConfig::default(),
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::new(Code::Usage, format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::new(Code::Usage, format!("invalid config {}: {e}", path.display())))
}

/// Writes `name` under `--out`, or prints to stdout.
fn emit(opts: &SimOpts, name: &str, body: &str) -> Result<(), CliError> {
    match &opts.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), body)?;
            eprintln!("wrote {}", dir.join(name).display());
        }
        None => {
            use std::io::Write as _;
            let _ = std::io::stdout().write_all(body.as_bytes());
        }
    }
    Ok(())
}

fn json(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("results serialize");
    s.push('\n');
    s
}

pub fn run(cmd: SimCmd) -> Result<(), CliError> {
    match cmd {
        SimCmd::Run { opts, seeds } => {
            let mut cfg: SimConfig = read_config(opts.config.as_deref())?;
            if let Some(s) = opts.seed {
                cfg.seed = s;
            }
            match seeds {
                Some(n) => emit(&opts, "ensemble.json", &json(&run_ensemble(&cfg, n)?)),
                None => {
                    let run = run_economy(&cfg)?;
                    if opts.out.is_some() {
                        emit(&opts, "summary.json", &json(&run.summary_json(&cfg)))?;
                    }
                    emit(&opts, "economy.csv", &run.to_csv())
                }
            }
        }
        SimCmd::Collusion { opts, seeds, fractions } => {
            let mut cfg: CollusionConfig = read_config(opts.config.as_deref())?;
            if let Some(s) = opts.seed {
                cfg.seed = s;
            }
            let fractions = if fractions.is_empty() { vec![0.2, 0.3, 0.4] } else { fractions };
            let curves = fractions
                .iter()
                .map(|&f| collusion_curve(&CollusionConfig { malicious_fraction: f, ..cfg.clone() }, seeds))
                .collect::<Result<Vec<_>, _>>()?;
            let mut csv = String::from("round");
            for f in &fractions {
                csv.push_str(&format!(",accuracy_f{f}"));
            }
            csv.push('\n');
            for r in 0..cfg.rounds {
                csv.push_str(&r.to_string());
                for c in &curves {
                    csv.push_str(&format!(",{:.6}", c[r]));
                }
                csv.push('\n');
            }
            emit(&opts, "collusion.csv", &csv)
        }
        SimCmd::Nash { reward, slash, fee, u_legit, bribe, r_base } => {
            let m = GameMatrix::new(reward, slash, fee, u_legit, bribe, r_base)?;
            let show = |set: std::collections::BTreeSet<_>| {
                set.iter().map(|p: &sigil_core::simulator::Profile| p.to_string()).collect::<Vec<_>>().join(" ")
            };
            say!("equilibria: {}", show(nash_equilibria(&m)));
            say!("pure: {}", show(pure_nash(&m)));
            say!("deviation_loss: {:.6}", m.deviation_loss());
            Ok(())
        }
        SimCmd::SweepGamma { opts } => {
            let mut cfg: GammaSweepConfig = read_config(opts.config.as_deref())?;
            if let Some(s) = opts.seed {
                cfg.seed = s;
            }
            emit(&opts, "sweep_gamma.csv", &sweep_gamma(&cfg)?.to_csv())
        }
        SimCmd::SweepR0 { opts } => {
            let mut cfg: R0Sweep = read_config(opts.config.as_deref())?;
            if let Some(s) = opts.seed {
                cfg.base.seed = s;
            }
            emit(&opts, "sweep_r0.csv", &sweep_r0(&cfg.ratios, &cfg.fractions, &cfg.base)?.to_csv())
        }
    }
}
