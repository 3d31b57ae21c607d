//! File-backed epoch state machine.
//!
//! Store layout:
//!
//! ```text
//! <store>/config.json        unit of account, default liquidity source, quota
//! <store>/keys.json          ascertainment keys per agent
//! <store>/ledger.json        balances and open obligations
//! <store>/state.json         epoch states and run parameters
//! <store>/.lock              held exclusively while an Engine is open
//! <store>/epochs/<id>/pool.jsonl    intents, one JSON object per line
//! <store>/epochs/<id>/graph.txt     aggregated graph dump
//! <store>/epochs/<id>/flow.json     settlement flow
//! <store>/epochs/<id>/report.json   validation and clearing summary
//! <store>/epochs/<id>/applied.json  write-ahead record of the ledger change
//! <store>/epochs/<id>/notices.csv   set-off notices
//! ```
//!
//! Epochs move `Open -> Frozen -> Solved -> Applied`, or to `Failed` when the
//! flow does not validate. A run writes `applied.json` before replacing
//! `ledger.json`; a run that finds an epoch `Solved` finishes the commit from
//! that record, so a crash at any point applies the epoch at most once.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ascertain::{verify_ascertainment, KeyRing};
use crate::graph::{aggregate, AggregateOptions, Exclusion, GraphError, LiquiditySource};
use crate::model::{AgentId, Amount, AssetCode, Intent, IntentId, Ledger, SettlementFlow};
use crate::network::{ArcOrder, BuildError};
use crate::records::cleared_debt;
use crate::settlement::{apply_flow, notices_csv, AppliedEpoch, SettlementError};
use crate::solver::solve_with;
use crate::validator::ValidationReport;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    State(String),
    #[error("intent rejected: {0}")]
    Rejected(String),
    #[error("{0}")]
    Conflict(String),
    #[error("agent {0} has reached its pool quota")]
    Quota(AgentId),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("settlement failed: {0}")]
    Settlement(String),
    #[error("injected fault at {0:?}")]
    Fault(FaultPoint),
    #[error("store is inconsistent: {0}")]
    Corrupt(String),
}

impl EngineError {
    /// Stable machine-readable name.
    pub fn kind(&self) -> &'static str {
        match self {
            EngineError::Io { .. } => "io",
            EngineError::Json { .. } => "json",
            EngineError::State(_) => "state",
            EngineError::Rejected(_) => "rejected",
            EngineError::Conflict(_) => "conflict",
            EngineError::Quota(_) => "quota",
            EngineError::Graph(_) => "graph",
            EngineError::Build(_) => "build",
            EngineError::Settlement(_) => "settlement",
            EngineError::Fault(_) => "fault",
            EngineError::Corrupt(_) => "corrupt",
        }
    }
}

type Result<T> = std::result::Result<T, EngineError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EngineError + '_ {
    move |source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub unit: AssetCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_source: Option<LiquiditySource>,
    /// Most intents one signer may have in a single epoch's pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quota: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochState {
    Open,
    Frozen,
    Solved,
    Applied,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub state: EpochState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunParams>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreState {
    pub epochs: BTreeMap<u64, EpochRecord>,
}

impl StoreState {
    fn first_in(&self, states: &[EpochState]) -> Option<u64> {
        self.epochs
            .iter()
            .find(|(_, r)| states.contains(&r.state))
            .map(|(id, _)| *id)
    }
}

/// Summary of an epoch's run, written as `report.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch_id: u64,
    pub state: EpochState,
    pub run: RunParams,
    pub total_debt: Amount,
    pub nid: Amount,
    pub cleared_debt: Amount,
    pub residual_debt: Amount,
    pub liquidity_used: BTreeMap<AssetCode, Amount>,
    pub transfers: usize,
    pub new_obligations: usize,
    pub excluded: Vec<Exclusion>,
    pub validation: ValidationReport,
}

/// Where a run may be made to stop, simulating a crash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultPoint {
    /// The flow validated and was applied in memory; nothing is persisted.
    AfterValidation,
    /// `applied.json` is on disk; `ledger.json` is not yet replaced.
    AfterWriteAhead,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub budget: Option<Amount>,
    pub seed: u64,
    pub fault: Option<FaultPoint>,
    /// Applied to the solver's flow before validation; for fault-injection tests.
    pub tamper: Option<fn(&mut SettlementFlow)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Submitted {
    pub epoch_id: u64,
    /// The same intent was already pooled; nothing changed.
    pub duplicate: bool,
}

/// Writes via a temporary file and a rename, so readers see old or new bytes.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Pretty JSON with a trailing newline; all maps are ordered, so output is stable.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("plain data serializes");
    v.push(b'\n');
    v
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| EngineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a JSON-lines intent file; blank lines are skipped.
pub fn read_intents(path: &Path) -> Result<Vec<Intent>> {
    let f = File::open(path).map_err(io_err(path))?;
    parse_intents(BufReader::new(f), path)
}

pub fn parse_intents(reader: impl BufRead, path: &Path) -> Result<Vec<Intent>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| EngineError::Json {
            path: path.to_path_buf(),
            source,
        })?);
    }
    Ok(out)
}

/// An open store. Holds the store lock until dropped.
pub struct Engine {
    root: PathBuf,
    config: EngineConfig,
    keys: KeyRing,
    _lock: File,
}

impl Engine {
    /// Creates a store with an empty ledger and epoch 1 open.
    pub fn init(root: &Path, config: EngineConfig, keys: KeyRing, ledger: Ledger) -> Result<Engine> {
        fs::create_dir_all(root.join("epochs")).map_err(io_err(root))?;
        let cfg_path = root.join("config.json");
        if cfg_path.exists() {
            return Err(EngineError::State(format!("{} already holds a store", root.display())));
        }
        let lock = Self::lock(root)?;
        write_atomic(&root.join("keys.json"), &to_json_bytes(&keys))?;
        write_atomic(&root.join("ledger.json"), &to_json_bytes(&ledger))?;
        let state = StoreState {
            epochs: BTreeMap::from([(
                1,
                EpochRecord {
                    state: EpochState::Open,
                    run: None,
                },
            )]),
        };
        write_atomic(&root.join("state.json"), &to_json_bytes(&state))?;
        write_atomic(&cfg_path, &to_json_bytes(&config))?;
        Ok(Engine {
            root: root.to_path_buf(),
            config,
            keys,
            _lock: lock,
        })
    }

    /// Opens an existing store, waiting for any other holder of its lock.
    pub fn open(root: &Path) -> Result<Engine> {
        let lock = Self::lock(root)?;
        let config = read_json(&root.join("config.json"))?;
        let keys = read_json(&root.join("keys.json"))?;
        Ok(Engine {
            root: root.to_path_buf(),
            config,
            keys,
            _lock: lock,
        })
    }

    fn lock(root: &Path) -> Result<File> {
        let path = root.join(".lock");
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        f.lock().map_err(io_err(&path))?;
        Ok(f)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn keys(&self) -> &KeyRing {
        &self.keys
    }

    pub fn epoch_dir(&self, id: u64) -> PathBuf {
        self.root.join("epochs").join(id.to_string())
    }

    pub fn state(&self) -> Result<StoreState> {
        read_json(&self.root.join("state.json"))
    }

    fn save_state(&self, s: &StoreState) -> Result<()> {
        write_atomic(&self.root.join("state.json"), &to_json_bytes(s))
    }

    pub fn ledger(&self) -> Result<Ledger> {
        read_json(&self.root.join("ledger.json"))
    }

    /// Replaces the ledger outright; an administrative operation.
    pub fn set_ledger(&self, ledger: &Ledger) -> Result<()> {
        write_atomic(&self.root.join("ledger.json"), &to_json_bytes(ledger))
    }

    pub fn pool(&self, id: u64) -> Result<Vec<Intent>> {
        let path = self.epoch_dir(id).join("pool.jsonl");
        if !path.exists() {
            return Ok(Vec::new());
        }
        read_intents(&path)
    }

    fn write_pool(&self, id: u64, pool: &[Intent]) -> Result<()> {
        let dir = self.epoch_dir(id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut bytes = Vec::new();
        for i in pool {
            serde_json::to_writer(&mut bytes, i).expect("plain data serializes");
            bytes.push(b'\n');
        }
        write_atomic(&dir.join("pool.jsonl"), &bytes)
    }

    /// The epoch that takes submissions: the first open one, created if needed.
    fn intake_epoch(&self, state: &mut StoreState) -> u64 {
        if let Some(id) = state.first_in(&[EpochState::Open]) {
            return id;
        }
        let id = state.epochs.keys().next_back().map_or(1, |k| k + 1);
        state.epochs.insert(
            id,
            EpochRecord {
                state: EpochState::Open,
                run: None,
            },
        );
        id
    }

    /// Adds an intent to the open epoch's pool. Resubmitting an identical
    /// intent is a no-op reporting where it already sits.
    pub fn submit(&self, intent: Intent) -> Result<Submitted> {
        intent
            .check_well_formed()
            .map_err(|e| EngineError::Rejected(e.to_string()))?;
        if !verify_ascertainment(&intent, &self.keys) {
            return Err(EngineError::Rejected(format!(
                "{} is not ascertained by {}",
                intent.id(),
                intent.signer()
            )));
        }
        if self.ledger()?.open_obligations.contains_key(intent.id()) {
            return Err(EngineError::Conflict(format!("{} is already an open obligation", intent.id())));
        }
        let mut state = self.state()?;
        for id in state.epochs.keys() {
            if let Some(existing) = self.pool(*id)?.into_iter().find(|i| i.id() == intent.id()) {
                if existing == intent {
                    return Ok(Submitted {
                        epoch_id: *id,
                        duplicate: true,
                    });
                }
                return Err(EngineError::Conflict(format!(
                    "{} was already submitted with different contents",
                    intent.id()
                )));
            }
        }
        let target = self.intake_epoch(&mut state);
        let mut pool = self.pool(target)?;
        if let Some(q) = self.config.quota {
            if pool.iter().filter(|i| i.signer() == intent.signer()).count() >= q {
                return Err(EngineError::Quota(intent.signer().clone()));
            }
        }
        pool.push(intent);
        self.write_pool(target, &pool)?;
        self.save_state(&state)?;
        Ok(Submitted {
            epoch_id: target,
            duplicate: false,
        })
    }

    /// Withdraws a pooled intent from an epoch that has not been frozen.
    pub fn cancel(&self, id: &IntentId) -> Result<u64> {
        let state = self.state()?;
        for (eid, rec) in &state.epochs {
            let mut pool = self.pool(*eid)?;
            let Some(pos) = pool.iter().position(|i| i.id() == id) else { continue };
            if rec.state != EpochState::Open {
                return Err(EngineError::State(format!("epoch {eid} is frozen; {id} can no longer be cancelled")));
            }
            pool.remove(pos);
            self.write_pool(*eid, &pool)?;
            return Ok(*eid);
        }
        Err(EngineError::Conflict(format!("{id} is not pooled")))
    }

    /// Freezes the open epoch. Only one epoch may be awaiting a run.
    pub fn freeze(&self) -> Result<u64> {
        let mut state = self.state()?;
        if let Some(id) = state.first_in(&[EpochState::Frozen, EpochState::Solved]) {
            return Err(EngineError::State(format!("epoch {id} is frozen and has not been run")));
        }
        let id = self.intake_epoch(&mut state);
        state.epochs.get_mut(&id).expect("intake exists").state = EpochState::Frozen;
        let dir = self.epoch_dir(id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        if !dir.join("pool.jsonl").exists() {
            self.write_pool(id, &[])?;
        }
        self.save_state(&state)?;
        Ok(id)
    }

    fn set_epoch_state(&self, id: u64, to: EpochState, run: Option<RunParams>) -> Result<()> {
        let mut state = self.state()?;
        let rec = state
            .epochs
            .get_mut(&id)
            .ok_or_else(|| EngineError::Corrupt(format!("epoch {id} missing from state")))?;
        if to < rec.state {
            return Err(EngineError::Corrupt(format!("epoch {id} cannot go from {:?} to {to:?}", rec.state)));
        }
        rec.state = to;
        if run.is_some() {
            rec.run = run;
        }
        self.save_state(&state)
    }

    /// Runs the frozen epoch: aggregate, solve, validate, apply, commit.
    ///
    /// If the epoch was left `Solved` by an interrupted run, the stored run
    /// parameters are used instead of `opts.budget` and `opts.seed`, and a
    /// write-ahead record, if present, is committed rather than recomputed.
    pub fn run(&self, opts: &RunOptions) -> Result<EpochReport> {
        let state = self.state()?;
        let Some(id) = state.first_in(&[EpochState::Frozen, EpochState::Solved]) else {
            let open = state.first_in(&[EpochState::Open]);
            return Err(EngineError::State(match open {
                Some(o) => format!("epoch {o} is open; freeze it before running"),
                None => "no epoch is frozen".to_string(),
            }));
        };
        let rec = &state.epochs[&id];
        let dir = self.epoch_dir(id);
        let params = match (rec.state, rec.run) {
            (EpochState::Solved, Some(p)) => p,
            _ => RunParams {
                budget: opts.budget.map(|b| b.0),
                seed: opts.seed,
            },
        };

        if rec.state == EpochState::Solved && dir.join("applied.json").exists() {
            let applied: AppliedEpoch = read_json(&dir.join("applied.json"))?;
            return self.commit(id, &applied);
        }

        let ledger = self.ledger()?;
        let pool = self.pool(id)?;
        let g = aggregate(
            &pool,
            &ledger,
            &AggregateOptions {
                epoch_id: id,
                unit: self.config.unit.clone(),
                default_source: self.config.default_source.clone(),
                verifier: &self.keys,
                eligible: None,
            },
        )?;
        let solved = solve_with(&g, params.budget.map(Amount), ArcOrder::from_seed(params.seed))?;
        let mut flow = solved.flow;
        if let Some(t) = opts.tamper {
            t(&mut flow);
        }
        let validation = crate::validator::is_valid_flow(&g, &flow, &ledger, &self.keys);
        write_atomic(&dir.join("graph.txt"), g.dump().as_bytes())?;
        write_atomic(&dir.join("flow.json"), &to_json_bytes(&flow))?;

        let total = g.total_debt().map_err(|e| EngineError::Settlement(e.to_string()))?;
        let cleared = if validation.valid { cleared_debt(&g, &flow) } else { Amount::ZERO };
        let mut report = EpochReport {
            epoch_id: id,
            state: EpochState::Failed,
            run: params,
            total_debt: total,
            nid: g.nid(),
            cleared_debt: cleared,
            residual_debt: Amount(total.0 - cleared.0),
            liquidity_used: if validation.valid {
                solved.solution.liquidity_used.clone()
            } else {
                BTreeMap::new()
            },
            transfers: flow.transfers.len(),
            new_obligations: 0,
            excluded: g.excluded.clone(),
            validation,
        };

        if !report.validation.valid {
            write_atomic(&dir.join("report.json"), &to_json_bytes(&report))?;
            self.set_epoch_state(id, EpochState::Failed, Some(params))?;
            return Ok(report);
        }

        let applied = apply_flow(&ledger, &g, &flow, &self.keys).map_err(|e| match e {
            SettlementError::Invalid(r) => EngineError::Settlement(format!("{} violations", r.violations.len())),
            other => EngineError::Settlement(other.to_string()),
        })?;
        report.state = EpochState::Applied;
        report.new_obligations = applied.new_obligations.len();
        write_atomic(&dir.join("report.json"), &to_json_bytes(&report))?;
        self.set_epoch_state(id, EpochState::Solved, Some(params))?;
        if opts.fault == Some(FaultPoint::AfterValidation) {
            return Err(EngineError::Fault(FaultPoint::AfterValidation));
        }

        write_atomic(&dir.join("applied.json"), &to_json_bytes(&applied))?;
        if opts.fault == Some(FaultPoint::AfterWriteAhead) {
            return Err(EngineError::Fault(FaultPoint::AfterWriteAhead));
        }
        self.commit(id, &applied)
    }

    /// Moves the ledger from `ledger_before` to `ledger_after` exactly once.
    fn commit(&self, id: u64, applied: &AppliedEpoch) -> Result<EpochReport> {
        let dir = self.epoch_dir(id);
        let path = self.root.join("ledger.json");
        let current = fs::read(&path).map_err(io_err(&path))?;
        let after = to_json_bytes(&applied.ledger_after);
        if current == to_json_bytes(&applied.ledger_before) {
            write_atomic(&path, &after)?;
        } else if current != after {
            return Err(EngineError::Corrupt(format!(
                "ledger matches neither side of epoch {id}'s write-ahead record"
            )));
        }
        write_atomic(&dir.join("notices.csv"), notices_csv(&applied.notices).as_bytes())?;
        self.set_epoch_state(id, EpochState::Applied, None)?;
        read_json(&dir.join("report.json"))
    }

    /// The stored report of `epoch`, or of the latest run epoch.
    pub fn report(&self, epoch: Option<u64>) -> Result<(u64, EpochReport)> {
        let id = match epoch {
            Some(id) => id,
            None => self
                .state()?
                .epochs
                .iter()
                .rev()
                .find(|(_, r)| matches!(r.state, EpochState::Applied | EpochState::Failed))
                .map(|(id, _)| *id)
                .ok_or_else(|| EngineError::State("no epoch has been run".into()))?,
        };
        let path = self.epoch_dir(id).join("report.json");
        if !path.exists() {
            return Err(EngineError::State(format!("epoch {id} has no report")));
        }
        Ok((id, read_json(&path)?))
    }

    /// Notices CSV of `epoch`.
    pub fn notices_csv(&self, epoch: u64) -> Result<String> {
        let path = self.epoch_dir(epoch).join("notices.csv");
        fs::read_to_string(&path).map_err(io_err(&path))
    }

    /// NID and total debt of what the open epoch would clear if frozen now.
    pub fn preview(&self) -> Result<(u64, Amount, Amount)> {
        let mut state = self.state()?;
        let id = self.intake_epoch(&mut state);
        let g = aggregate(
            &self.pool(id)?,
            &self.ledger()?,
            &AggregateOptions {
                epoch_id: id,
                unit: self.config.unit.clone(),
                default_source: self.config.default_source.clone(),
                verifier: &self.keys,
                eligible: None,
            },
        )?;
        let total = g.total_debt().map_err(|e| EngineError::Settlement(e.to_string()))?;
        Ok((id, g.nid(), total))
    }
}
