//! Multilateral obligation clearing.
//!
//! Pipeline for one epoch: [`graph::aggregate`] a frozen intent pool into an
//! [`ObligationGraph`], [`solver::solve`] it as a min-cost flow, check the
//! result with [`validator::is_valid_flow`] and commit it with
//! [`settlement::apply_flow`]. [`engine`] wraps this in a file-backed epoch
//! state machine; [`experiments`] holds the synthetic workloads and the
//! brute-force oracle.

pub mod ascertain;
pub mod codec;
pub mod engine;
pub mod experiments;
pub mod fixtures;
pub mod graph;
pub mod model;
pub mod network;
pub mod records;
pub mod settlement;
pub mod solver;
pub mod validator;

pub use ascertain::{KeyRing, SigningKey, Verifier};
pub use graph::{aggregate, AggregateOptions, LiquiditySource, ObligationGraph};
pub use model::{
    Acceptance, AcceptanceKind, AgentId, Amount, AssetCode, Intent, IntentId, Ledger, Limit, Obligation, Price,
    SetOffNotice, SettlementFlow, SettlementRecord, Tender, TenderKind, Transfer,
};
pub use network::ArcOrder;
pub use settlement::{apply_flow, AppliedEpoch};
pub use solver::{solve, solve_with};
pub use validator::{is_valid_flow, verify_notices, ValidationReport};
