//! Builders for signed intents and small fixtures, shared by tests, benches and the CLI.
//!
//! Every builder registers a derived key for the signing party in the supplied
//! [`KeyRing`] and signs the intent with it. The default unit of account is
//! `USD`, circulated by the liquidity source `BANK`.

use crate::ascertain::KeyRing;
use crate::graph::{AggregateOptions, LiquiditySource};
use crate::model::{
    Acceptance, AcceptanceKind, AgentId, Amount, AssetCode, Intent, IntentId, Limit, Obligation, Price, Tender,
    TenderKind,
};

pub const UNIT: &str = "USD";
pub const BANK: &str = "BANK";

pub fn agent(s: &str) -> AgentId {
    AgentId::new(s).expect("valid agent id")
}

pub fn iid(s: &str) -> IntentId {
    IntentId::new(s).expect("valid intent id")
}

pub fn asset(s: &str) -> AssetCode {
    AssetCode::new(s).expect("valid asset code")
}

pub fn bank() -> LiquiditySource {
    LiquiditySource {
        agent: agent(BANK),
        currency: asset(UNIT),
    }
}

pub fn opts(ring: &KeyRing, default_source: Option<LiquiditySource>) -> AggregateOptions<'_> {
    AggregateOptions {
        epoch_id: 1,
        unit: asset(UNIT),
        default_source,
        verifier: ring,
        eligible: None,
    }
}

fn signed(ring: &mut KeyRing, mut intent: Intent) -> Intent {
    ring.ensure(intent.signer());
    ring.sign_intent(&mut intent);
    intent
}

pub fn ob(ring: &mut KeyRing, id: &str, debtor: &str, creditor: &str, amount: u64) -> Intent {
    signed(
        ring,
        Intent::Obligation(Obligation {
            id: iid(id),
            debtor: agent(debtor),
            creditor: agent(creditor),
            amount: Amount(amount),
            unit: asset(UNIT),
            due_date: None,
            ascertainment: None,
        }),
    )
}

/// Assignment tender of `max` from the sender's `USD` balance at `BANK`.
pub fn tender(ring: &mut KeyRing, id: &str, sender: &str, max: u64) -> Intent {
    foreign_tender(ring, id, sender, BANK, UNIT, max, None)
}

pub fn foreign_tender(
    ring: &mut KeyRing,
    id: &str,
    sender: &str,
    source: &str,
    currency: &str,
    max: u64,
    price: Option<Price>,
) -> Intent {
    signed(
        ring,
        Intent::Tender(Tender {
            id: iid(id),
            sender: agent(sender),
            source: agent(source),
            kind: TenderKind::Assignment,
            currency: asset(currency),
            max_amount: Amount(max),
            price,
            ascertainment: None,
        }),
    )
}

/// Overdraft tender: `sender` draws up to `max` on the credit line of `facility`.
pub fn overdraft(ring: &mut KeyRing, id: &str, sender: &str, facility: &str, max: u64) -> Intent {
    signed(
        ring,
        Intent::Tender(Tender {
            id: iid(id),
            sender: agent(sender),
            source: agent(facility),
            kind: TenderKind::Overdraft,
            currency: asset(UNIT),
            max_amount: Amount(max),
            price: None,
            ascertainment: None,
        }),
    )
}

/// Repayment acceptance: `facility` lends up to `limit` to `borrower`.
pub fn repayment(ring: &mut KeyRing, id: &str, facility: &str, borrower: &str, limit: u64) -> Intent {
    signed(
        ring,
        Intent::Acceptance(Acceptance {
            id: iid(id),
            origin: agent(facility),
            target: agent(borrower),
            kind: AcceptanceKind::Repayment,
            limit: Limit::Finite(Amount(limit)),
            currency: asset(UNIT),
            repayment_due: None,
            ascertainment: None,
        }),
    )
}

/// Deposit acceptance: `origin` accepts to be paid in `currency` issued by `source`.
pub fn deposit(ring: &mut KeyRing, id: &str, origin: &str, source: &str, currency: &str, limit: Limit) -> Intent {
    signed(
        ring,
        Intent::Acceptance(Acceptance {
            id: iid(id),
            origin: agent(origin),
            target: agent(source),
            kind: AcceptanceKind::Deposit,
            limit,
            currency: asset(currency),
            repayment_due: None,
            ascertainment: None,
        }),
    )
}
