//! Shared vocabulary: identifiers, amounts, intents, settlement records and the ledger.
//!
//! Every amount in a settlement path is an exact integer count of minor units.
//! Arithmetic that can overflow goes through [`Amount::checked_add`] and friends and
//! reports [`AmountError`] instead of wrapping.

use std::collections::BTreeMap;
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Maximum length of an [`AgentId`].
pub const MAX_AGENT_ID_LEN: usize = 64;

/// Prefix reserved for identifiers the engine synthesizes (implicit acceptances,
/// overdraft draws). User-submitted intent ids may not start with it.
pub const SYSTEM_ID_PREFIX: char = '~';

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("agent id must be 1..={MAX_AGENT_ID_LEN} characters, got {0:?}")]
    BadAgentId(String),
    #[error("identifier must be non-empty and free of whitespace, got {0:?}")]
    BadIdentifier(String),
    #[error("intent {id}: {reason}")]
    Malformed { id: String, reason: String },
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum AmountError {
    #[error("amount overflow")]
    Overflow,
    #[error("amount underflow")]
    Underflow,
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident, $check:expr) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Result<Self, ModelError> {
                let s = s.into();
                let check: fn(&str) -> Result<(), ModelError> = $check;
                check(&s)?;
                Ok(Self(s))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                $name::new(s).map_err(serde::de::Error::custom)
            }
        }

        impl TryFrom<&str> for $name {
            type Error = ModelError;
            fn try_from(s: &str) -> Result<Self, ModelError> {
                $name::new(s)
            }
        }
    };
}

fn check_agent(s: &str) -> Result<(), ModelError> {
    if s.is_empty() || s.chars().count() > MAX_AGENT_ID_LEN || s.chars().any(char::is_whitespace) {
        return Err(ModelError::BadAgentId(s.to_string()));
    }
    Ok(())
}

fn check_ident(s: &str) -> Result<(), ModelError> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(ModelError::BadIdentifier(s.to_string()));
    }
    Ok(())
}

string_id!(
    /// A participant: firm, liquidity source or credit facility. They share one namespace.
    AgentId,
    check_agent
);
string_id!(
    /// Identifier of an intent (obligation, acceptance or tender).
    IntentId,
    check_ident
);
string_id!(
    /// Code of a unit of account or of a liquid asset (e.g. `USD`, `USDC`).
    AssetCode,
    check_ident
);

impl IntentId {
    pub fn is_system(&self) -> bool {
        self.0.starts_with(SYSTEM_ID_PREFIX)
    }
}

/// Non-negative integer amount in minor units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Amount(pub u64);

impl Amount {
    pub const ZERO: Amount = Amount(0);

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn checked_add(self, rhs: Amount) -> Result<Amount, AmountError> {
        self.0.checked_add(rhs.0).map(Amount).ok_or(AmountError::Overflow)
    }

    pub fn checked_sub(self, rhs: Amount) -> Result<Amount, AmountError> {
        self.0.checked_sub(rhs.0).map(Amount).ok_or(AmountError::Underflow)
    }

    /// Checked sum of an iterator of amounts.
    pub fn sum<I: IntoIterator<Item = Amount>>(iter: I) -> Result<Amount, AmountError> {
        iter.into_iter().try_fold(Amount::ZERO, Amount::checked_add)
    }
}

impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u64> for Amount {
    fn from(v: u64) -> Self {
        Amount(v)
    }
}

/// Capacity of an acceptance, in unit-of-account minor units.
///
/// Serialized as a number, or the string `"infinite"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Limit {
    Finite(Amount),
    Infinite,
}

impl Limit {
    pub fn finite(self) -> Option<Amount> {
        match self {
            Limit::Finite(a) => Some(a),
            Limit::Infinite => None,
        }
    }

    pub fn min_amount(self, other: Amount) -> Amount {
        match self {
            Limit::Finite(a) => a.min(other),
            Limit::Infinite => other,
        }
    }
}

impl Serialize for Limit {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Limit::Finite(a) => s.serialize_u64(a.0),
            Limit::Infinite => s.serialize_str("infinite"),
        }
    }
}

impl<'de> Deserialize<'de> for Limit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(Limit::Finite(Amount(n))),
            Raw::Str(s) if s == "infinite" => Ok(Limit::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad limit {s:?}"))),
        }
    }
}

/// Exchange price: `num / den` unit-of-account minor units per currency minor unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Price {
    pub num: u64,
    pub den: u64,
}

impl Price {
    pub const ONE: Price = Price { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Price {
        Price { num, den }
    }

    pub fn is_positive(&self) -> bool {
        self.num > 0 && self.den > 0
    }

    /// `floor(amount * price)`: currency minor units to unit-of-account minor units.
    pub fn to_unit_floor(&self, amount: Amount) -> Result<Amount, AmountError> {
        let v = amount.0 as u128 * self.num as u128 / self.den as u128;
        u64::try_from(v).map(Amount).map_err(|_| AmountError::Overflow)
    }

    /// `ceil(units / price)`: currency needed to cover `units` of the unit of account.
    pub fn to_currency_ceil(&self, units: u128) -> u128 {
        let num = units * self.den as u128;
        num.div_ceil(self.num as u128)
    }
}

/// Ascertainment token: hex-encoded signature over an intent's canonical bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub String);

/// A dated, ascertained debt from `debtor` to `creditor`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Obligation {
    pub id: IntentId,
    pub debtor: AgentId,
    pub creditor: AgentId,
    pub amount: Amount,
    pub unit: AssetCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub due_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ascertainment: Option<Token>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceKind {
    /// Willingness to hold a liquidity source's liability (to be paid in that asset).
    Deposit,
    /// A credit line: the origin lends to the target, creating a dated obligation back.
    Repayment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acceptance {
    pub id: IntentId,
    pub origin: AgentId,
    pub target: AgentId,
    pub kind: AcceptanceKind,
    pub limit: Limit,
    pub currency: AssetCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repayment_due: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ascertainment: Option<Token>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TenderKind {
    /// Spend an existing balance held at `source`.
    Assignment,
    /// Draw on a credit line extended by `source`.
    Overdraft,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tender {
    pub id: IntentId,
    pub sender: AgentId,
    pub source: AgentId,
    pub kind: TenderKind,
    pub currency: AssetCode,
    pub max_amount: Amount,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price: Option<Price>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ascertainment: Option<Token>,
}

impl Tender {
    /// The price to apply for `unit`; `None` if the tender is foreign and unpriced.
    pub fn effective_price(&self, unit: &AssetCode) -> Option<Price> {
        match self.price {
            Some(p) => Some(p),
            None if &self.currency == unit => Some(Price::ONE),
            None => None,
        }
    }
}

/// Anything a participant can submit to an epoch's pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Intent {
    Obligation(Obligation),
    Acceptance(Acceptance),
    Tender(Tender),
}

impl Intent {
    pub fn id(&self) -> &IntentId {
        match self {
            Intent::Obligation(o) => &o.id,
            Intent::Acceptance(a) => &a.id,
            Intent::Tender(t) => &t.id,
        }
    }

    /// The party whose signature ascertains this intent.
    pub fn signer(&self) -> &AgentId {
        match self {
            Intent::Obligation(o) => &o.debtor,
            Intent::Acceptance(a) => &a.origin,
            Intent::Tender(t) => &t.sender,
        }
    }

    pub fn ascertainment(&self) -> Option<&Token> {
        match self {
            Intent::Obligation(o) => o.ascertainment.as_ref(),
            Intent::Acceptance(a) => a.ascertainment.as_ref(),
            Intent::Tender(t) => t.ascertainment.as_ref(),
        }
    }

    pub fn set_ascertainment(&mut self, token: Option<Token>) {
        match self {
            Intent::Obligation(o) => o.ascertainment = token,
            Intent::Acceptance(a) => a.ascertainment = token,
            Intent::Tender(t) => t.ascertainment = token,
        }
    }

    /// Structural checks that do not need keys or a ledger.
    pub fn check_well_formed(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| {
            Err(ModelError::Malformed {
                id: self.id().to_string(),
                reason: reason.to_string(),
            })
        };
        if self.id().is_system() {
            return bad("identifier uses the reserved '~' prefix");
        }
        match self {
            Intent::Obligation(o) => {
                if o.debtor == o.creditor {
                    return bad("debtor and creditor are the same agent");
                }
                if o.amount.is_zero() {
                    return bad("amount must be positive");
                }
            }
            Intent::Acceptance(a) => {
                if a.origin == a.target {
                    return bad("origin and target are the same agent");
                }
                match a.kind {
                    AcceptanceKind::Repayment => {
                        if a.limit.finite().is_none() {
                            return bad("repayment acceptance needs a finite limit");
                        }
                    }
                    AcceptanceKind::Deposit => {
                        if a.repayment_due.is_some() {
                            return bad("repayment_due only applies to repayment acceptances");
                        }
                    }
                }
            }
            Intent::Tender(t) => {
                if t.sender == t.source {
                    return bad("sender and source are the same agent");
                }
                if let Some(p) = t.price {
                    if !p.is_positive() {
                        return bad("price must be positive");
                    }
                }
            }
        }
        Ok(())
    }
}

/// Currency leg of a settlement record on a liquidity edge.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CurrencyAmount {
    pub asset: AssetCode,
    pub amount: Amount,
}

/// How much of one intent is discharged, addressed to one of its endpoints.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SettlementRecord {
    pub edge_ref: IntentId,
    pub party: AgentId,
    pub amount: Amount,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub currency_amount: Option<CurrencyAmount>,
}

/// A direct asset movement between a tenderer and an acceptor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transfer {
    pub from: AgentId,
    pub to: AgentId,
    pub asset: AssetCode,
    pub amount: Amount,
}

/// The atomic output of the solver: balanced records plus the transfers they imply.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettlementFlow {
    pub epoch_id: u64,
    pub records: Vec<SettlementRecord>,
    pub transfers: Vec<Transfer>,
}

impl SettlementFlow {
    pub fn empty(epoch_id: u64) -> Self {
        SettlementFlow {
            epoch_id,
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty() && self.transfers.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoticeEntry {
    pub obligation: IntentId,
    pub discharged: Amount,
    pub remaining: Amount,
}

/// Per-party statement of what an epoch discharged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetOffNotice {
    pub epoch_id: u64,
    pub party: AgentId,
    pub entries: Vec<NoticeEntry>,
}

/// An obligation admitted to the ledger with what is still owed on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenObligation {
    pub obligation: Obligation,
    pub outstanding: Amount,
}

/// Account balances per (agent, asset) and obligations carried between epochs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    pub balances: BTreeMap<AgentId, BTreeMap<AssetCode, Amount>>,
    pub open_obligations: BTreeMap<IntentId, OpenObligation>,
}

impl Ledger {
    pub fn balance(&self, agent: &AgentId, asset: &AssetCode) -> Amount {
        self.balances
            .get(agent)
            .and_then(|m| m.get(asset))
            .copied()
            .unwrap_or_default()
    }

    pub fn set_balance(&mut self, agent: AgentId, asset: AssetCode, amount: Amount) {
        let per_agent = self.balances.entry(agent.clone()).or_default();
        if amount.is_zero() {
            per_agent.remove(&asset);
            if per_agent.is_empty() {
                self.balances.remove(&agent);
            }
        } else {
            per_agent.insert(asset, amount);
        }
    }

    pub fn credit(&mut self, agent: &AgentId, asset: &AssetCode, amount: Amount) -> Result<(), AmountError> {
        let b = self.balance(agent, asset).checked_add(amount)?;
        self.set_balance(agent.clone(), asset.clone(), b);
        Ok(())
    }

    pub fn debit(&mut self, agent: &AgentId, asset: &AssetCode, amount: Amount) -> Result<(), AmountError> {
        let b = self.balance(agent, asset).checked_sub(amount)?;
        self.set_balance(agent.clone(), asset.clone(), b);
        Ok(())
    }

    /// Sum of balances held in `asset` across all agents.
    pub fn supply(&self, asset: &AssetCode) -> Result<Amount, AmountError> {
        Amount::sum(self.balances.values().filter_map(|m| m.get(asset).copied()))
    }

    pub fn open_debt(&self) -> Result<Amount, AmountError> {
        Amount::sum(self.open_obligations.values().map(|o| o.outstanding))
    }
}
