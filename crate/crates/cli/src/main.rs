//! `setoff`: command-line front-end to a clearing store.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use setoff_core::ascertain::{KeyRing, SigningKey};
use setoff_core::engine::{read_intents, to_json_bytes, Engine, EngineConfig, EngineError, RunOptions};
use setoff_core::experiments::{
    curve_csv, generate, multiplier_curve, parse_fractions, ExperimentError, Placement, SyntheticGraphConfig,
};
use setoff_core::graph::LiquiditySource;
use setoff_core::model::{AgentId, Amount, AssetCode, IntentId, Ledger};

#[derive(Parser)]
#[command(name = "setoff", version, about = "Batch multilateral obligation clearing")]
struct Cli {
    /// Store directory.
    #[arg(long, global = true, env = "SETOFF_STORE", default_value = "store")]
    store: PathBuf,
    /// Unit of account. Sets it on `init`; elsewhere must match the store.
    #[arg(long, global = true)]
    unit: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a new store with epoch 1 open.
    Init {
        /// Liquidity source every firm implicitly accepts, as AGENT:CURRENCY.
        #[arg(long)]
        default_source: Option<String>,
        /// Most intents per signer per epoch.
        #[arg(long)]
        quota: Option<usize>,
        /// Keys file to register (see `keygen`).
        #[arg(long)]
        keys: Option<PathBuf>,
        /// Opening ledger.
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Add random keys for agents to a keys file.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        agents: Vec<String>,
    },
    /// Sign every intent in a JSONL file with its bound party's key.
    Sign {
        #[arg(long)]
        keys: PathBuf,
        file: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Credit a balance directly (operator issuance).
    Fund { agent: String, asset: String, amount: u64 },
    /// Submit intents from a JSONL file to the open epoch.
    Submit { file: PathBuf },
    /// Withdraw a pooled intent before its epoch is frozen.
    Cancel { id: String },
    /// Freeze the open epoch.
    Freeze,
    /// Clear the frozen epoch.
    Run {
        /// Most liquidity to inject, in unit-of-account minor units.
        #[arg(long)]
        budget: Option<u64>,
        /// Tie-breaking seed; 0 is canonical order.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print an epoch's report (json) or set-off notices (csv).
    Report {
        #[arg(long)]
        epoch: Option<u64>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Net internal debt of the open epoch.
    Nid,
    /// Liquidity-multiplier curve on a synthetic graph.
    Simulate {
        /// JSON synthetic graph configuration.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated fractions of total debt, decimal or num/den.
        #[arg(long)]
        fractions: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    std::io::stdout().write_all(&to_json_bytes(v))?;
    Ok(())
}

fn parse_source(s: &str) -> Result<LiquiditySource> {
    let (agent, currency) = s
        .split_once(':')
        .ok_or_else(|| anyhow!("default source must look like AGENT:CURRENCY"))?;
    Ok(LiquiditySource {
        agent: AgentId::new(agent)?,
        currency: AssetCode::new(currency)?,
    })
}

fn read_keys(path: &Path) -> Result<KeyRing> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn open(cli: &Cli) -> Result<Engine> {
    if !cli.store.join("config.json").exists() {
        bail!(EngineError::State(format!("{} is not a store; run `setoff init`", cli.store.display())));
    }
    let e = Engine::open(&cli.store)?;
    if let Some(u) = &cli.unit {
        if u != e.config().unit.as_str() {
            bail!(EngineError::State(format!("store unit is {}, not {u}", e.config().unit)));
        }
    }
    Ok(e)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Init {
            default_source,
            quota,
            keys,
            ledger,
        } => {
            let config = EngineConfig {
                unit: AssetCode::new(cli.unit.as_deref().unwrap_or("USD"))?,
                default_source: default_source.as_deref().map(parse_source).transpose()?,
                quota: *quota,
            };
            let keys = keys.as_deref().map(read_keys).transpose()?.unwrap_or_default();
            let ledger: Ledger = match ledger {
                Some(p) => serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => Ledger::default(),
            };
            let e = Engine::init(&cli.store, config, keys, ledger)?;
            print_json(&json!({ "store": e.root(), "open_epoch": 1 }))
        }
        Cmd::Keygen { out, agents } => {
            let mut ring = if out.exists() { read_keys(out)? } else { KeyRing::new() };
            let mut rng = rand::rng();
            for a in agents {
                ring.insert(AgentId::new(a.as_str())?, SigningKey::generate(&mut rng));
            }
            fs::write(out, to_json_bytes(&ring))?;
            print_json(&json!({ "keys": out, "agents": ring.agents().collect::<Vec<_>>() }))
        }
        Cmd::Sign { keys, file, out } => {
            let ring = read_keys(keys)?;
            let mut text = String::new();
            for mut intent in read_intents(file)? {
                if !ring.sign_intent(&mut intent) {
                    bail!("no key for {} (signer of {})", intent.signer(), intent.id());
                }
                text.push_str(&serde_json::to_string(&intent)?);
                text.push('\n');
            }
            match out {
                Some(p) => fs::write(p, text)?,
                None => std::io::stdout().write_all(text.as_bytes())?,
            }
            Ok(())
        }
        Cmd::Fund { agent, asset, amount } => {
            let e = open(&cli)?;
            let mut ledger = e.ledger()?;
            let (agent, asset) = (AgentId::new(agent.as_str())?, AssetCode::new(asset.as_str())?);
            ledger.credit(&agent, &asset, Amount(*amount))?;
            e.set_ledger(&ledger)?;
            print_json(&json!({ "agent": agent, "asset": asset, "balance": ledger.balance(&agent, &asset) }))
        }
        Cmd::Submit { file } => {
            let e = open(&cli)?;
            let mut out = Vec::new();
            for intent in read_intents(file)? {
                let id = intent.id().clone();
                let s = e.submit(intent)?;
                out.push(json!({ "id": id, "epoch": s.epoch_id, "duplicate": s.duplicate }));
            }
            print_json(&out)
        }
        Cmd::Cancel { id } => {
            let e = open(&cli)?;
            let epoch = e.cancel(&IntentId::new(id.as_str())?)?;
            print_json(&json!({ "cancelled": id, "epoch": epoch }))
        }
        Cmd::Freeze => {
            let e = open(&cli)?;
            let id = e.freeze()?;
            print_json(&json!({ "epoch": id, "state": "frozen" }))
        }
        Cmd::Run { budget, seed } => {
            let e = open(&cli)?;
            let report = e.run(&RunOptions {
                budget: budget.map(Amount),
                seed: *seed,
                ..Default::default()
            })?;
            print_json(&report)
        }
        Cmd::Report { epoch, format } => {
            let e = open(&cli)?;
            let (id, report) = e.report(*epoch)?;
            match format {
                Format::Json => print_json(&report),
                Format::Csv => {
                    std::io::stdout().write_all(e.notices_csv(id)?.as_bytes())?;
                    Ok(())
                }
            }
        }
        Cmd::Nid => {
            let e = open(&cli)?;
            let (epoch, nid, total) = e.preview()?;
            print_json(&json!({ "epoch": epoch, "nid": nid, "total_debt": total }))
        }
        Cmd::Simulate {
            config,
            fractions,
            out,
        } => {
            let cfg: SyntheticGraphConfig = serde_json::from_slice(
                &fs::read(config).with_context(|| format!("reading {}", config.display()))?,
            )
            .with_context(|| format!("parsing {}", config.display()))?;
            let fractions = parse_fractions(fractions)?;
            let g = generate(&cfg)?;
            let placement: Placement = cfg.placement;
            let points = multiplier_curve(&g, &fractions, placement)?;
            fs::write(out, curve_csv(&points))?;
            print_json(&json!({
                "out": out,
                "points": points.len(),
                "total_debt": g.total_debt()?,
                "nid": g.nid(),
            }))
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(e) = e.downcast_ref::<EngineError>() {
        e.kind()
    } else if e.downcast_ref::<ExperimentError>().is_some() {
        "experiment"
    } else {
        "error"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({ "error": error_kind(&e), "message": format!("{e:#}") });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
