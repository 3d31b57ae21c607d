//! Obligation graph: aggregation of a frozen pool, net positions and NID.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use chrono::NaiveDate;
use thiserror::Error;

use crate::ascertain::{verify_ascertainment, Verifier};
use crate::model::{
    AcceptanceKind, AgentId, Amount, AmountError, AssetCode, Intent, IntentId, Ledger, Limit, ModelError,
    Obligation, Price, TenderKind, SYSTEM_ID_PREFIX,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("duplicate intent id {0}")]
    DuplicateIntent(IntentId),
    #[error("aggregation overflow on edge {debtor} -> {creditor}")]
    Overflow { debtor: AgentId, creditor: AgentId },
    #[error("bad graph dump line {line}: {reason}")]
    Dump { line: usize, reason: String },
}

impl From<ModelError> for GraphError {
    fn from(e: ModelError) -> Self {
        GraphError::Dump {
            line: 0,
            reason: e.to_string(),
        }
    }
}

/// An asset circuit: the agent whose liabilities circulate as `currency`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LiquiditySource {
    pub agent: AgentId,
    pub currency: AssetCode,
}

/// One obligation's share of an aggregated edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contribution {
    pub id: IntentId,
    pub amount: Amount,
    pub due_date: Option<NaiveDate>,
    /// Admitted in an earlier epoch and carried in the ledger.
    pub carried: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AggregatedEdge {
    pub amount: Amount,
    /// Ordered for partial-discharge attribution: earliest due date first
    /// (undated last), then smallest id.
    pub contributions: Vec<Contribution>,
}

/// Liquidity offered by `sender` from its balance at `source`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TenderEdge {
    pub tender: IntentId,
    pub source: AgentId,
    pub sender: AgentId,
    pub currency: AssetCode,
    /// In currency minor units, already clamped to the sender's balance.
    pub max_amount: Amount,
    pub price: Option<Price>,
}

/// Willingness of `origin` to be paid in `currency`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcceptanceEdge {
    pub acceptance: IntentId,
    pub origin: AgentId,
    pub source: AgentId,
    pub currency: AssetCode,
    pub limit: Limit,
}

/// A drawable credit line: a repayment acceptance matched with the borrower's
/// overdraft tenders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CreditEdge {
    pub acceptance: IntentId,
    pub facility: AgentId,
    pub borrower: AgentId,
    pub capacity: Amount,
    pub tenders: Vec<IntentId>,
    pub repayment_due: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Exclusion {
    pub id: IntentId,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObligationGraph {
    pub epoch_id: u64,
    pub unit: AssetCode,
    pub default_source: Option<LiquiditySource>,
    pub nodes: BTreeSet<AgentId>,
    pub edges: BTreeMap<(AgentId, AgentId), AggregatedEdge>,
    pub tender_edges: Vec<TenderEdge>,
    pub acceptance_edges: Vec<AcceptanceEdge>,
    pub credit_edges: Vec<CreditEdge>,
    /// Source agent per currency.
    pub sources: BTreeMap<AssetCode, AgentId>,
    /// Fresh intents admitted into this graph, keyed by id.
    pub intents: BTreeMap<IntentId, Intent>,
    pub excluded: Vec<Exclusion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct NetPosition<'a> {
    pub agent: &'a AgentId,
    pub payables: Amount,
    pub receivables: Amount,
    /// receivables - payables
    pub net: i128,
}

/// Everything besides the pool that aggregation needs.
pub struct AggregateOptions<'a> {
    pub epoch_id: u64,
    pub unit: AssetCode,
    pub default_source: Option<LiquiditySource>,
    pub verifier: &'a dyn Verifier,
    /// Eligibility hook; obligations for which it returns false stay out of the epoch.
    pub eligible: Option<&'a dyn Fn(&Obligation) -> bool>,
}

/// Id of the implicit infinite acceptance `agent` holds towards the default source.
pub fn implicit_acceptance_id(agent: &AgentId) -> IntentId {
    IntentId::new(format!("{SYSTEM_ID_PREFIX}accept:{agent}")).expect("agent ids contain no whitespace")
}

/// Parses an implicit acceptance id back to its agent.
pub fn implicit_acceptance_agent(id: &IntentId) -> Option<AgentId> {
    let rest = id.as_str().strip_prefix(SYSTEM_ID_PREFIX)?.strip_prefix("accept:")?;
    AgentId::new(rest).ok()
}

fn due_key(d: Option<NaiveDate>) -> (bool, Option<NaiveDate>) {
    (d.is_none(), d)
}

impl ObligationGraph {
    pub fn new(epoch_id: u64, unit: AssetCode) -> Self {
        ObligationGraph {
            epoch_id,
            unit,
            default_source: None,
            nodes: BTreeSet::new(),
            edges: BTreeMap::new(),
            tender_edges: Vec::new(),
            acceptance_edges: Vec::new(),
            credit_edges: Vec::new(),
            sources: BTreeMap::new(),
            intents: BTreeMap::new(),
            excluded: Vec::new(),
        }
    }

    /// Adds `amount` owed by `debtor` to `creditor` under obligation `id`.
    pub fn add_obligation(
        &mut self,
        id: IntentId,
        debtor: AgentId,
        creditor: AgentId,
        amount: Amount,
        due_date: Option<NaiveDate>,
        carried: bool,
    ) -> Result<(), GraphError> {
        let overflow = || GraphError::Overflow {
            debtor: debtor.clone(),
            creditor: creditor.clone(),
        };
        self.nodes.insert(debtor.clone());
        self.nodes.insert(creditor.clone());
        let edge = self.edges.entry((debtor.clone(), creditor.clone())).or_default();
        edge.amount = edge.amount.checked_add(amount).map_err(|_| overflow())?;
        let c = Contribution {
            id,
            amount,
            due_date,
            carried,
        };
        let pos = edge
            .contributions
            .partition_point(|x| (due_key(x.due_date), &x.id) < (due_key(c.due_date), &c.id));
        edge.contributions.insert(pos, c);
        Ok(())
    }

    pub fn add_tender_edge(&mut self, edge: TenderEdge) {
        self.nodes.insert(edge.sender.clone());
        self.nodes.insert(edge.source.clone());
        self.sources.entry(edge.currency.clone()).or_insert_with(|| edge.source.clone());
        self.tender_edges.push(edge);
    }

    pub fn add_acceptance_edge(&mut self, edge: AcceptanceEdge) {
        self.nodes.insert(edge.origin.clone());
        self.nodes.insert(edge.source.clone());
        self.sources.entry(edge.currency.clone()).or_insert_with(|| edge.source.clone());
        self.acceptance_edges.push(edge);
    }

    pub fn add_credit_edge(&mut self, edge: CreditEdge) {
        self.nodes.insert(edge.facility.clone());
        self.nodes.insert(edge.borrower.clone());
        self.credit_edges.push(edge);
    }

    /// Agents that appear on obligation or credit edges.
    pub fn firms(&self) -> BTreeSet<&AgentId> {
        let mut out = BTreeSet::new();
        for (d, c) in self.edges.keys() {
            out.insert(d);
            out.insert(c);
        }
        for e in &self.credit_edges {
            out.insert(&e.facility);
            out.insert(&e.borrower);
        }
        out
    }

    pub fn total_debt(&self) -> Result<Amount, AmountError> {
        Amount::sum(self.edges.values().map(|e| e.amount))
    }

    /// Per-agent payables and receivables over obligation edges, in agent order.
    pub fn net_positions(&self) -> Vec<NetPosition<'_>> {
        let mut acc: BTreeMap<&AgentId, (u128, u128)> = BTreeMap::new();
        for ((d, c), e) in &self.edges {
            acc.entry(d).or_default().0 += e.amount.0 as u128;
            acc.entry(c).or_default().1 += e.amount.0 as u128;
        }
        acc.into_iter()
            .map(|(agent, (pay, rec))| NetPosition {
                agent,
                payables: Amount(pay as u64),
                receivables: Amount(rec as u64),
                net: rec as i128 - pay as i128,
            })
            .collect()
    }

    /// Net Internal Debt: the sum of net debit positions, i.e. the least
    /// liquidity that discharges every obligation.
    pub fn nid(&self) -> Amount {
        let total: i128 = self
            .net_positions()
            .iter()
            .map(|p| if p.net < 0 { -p.net } else { 0 })
            .sum();
        Amount(total as u64)
    }

    /// Text dump, one edge per line:
    ///
    /// ```text
    /// # epoch <id> unit <unit>
    /// O <debtor> <creditor> <amount> <id>:<amount>[,<id>:<amount>...]
    /// T <source> <sender> <currency> <max_amount> <num/den|-> <tender_id>
    /// A <origin> <source> <currency> <limit|inf> <acceptance_id>
    /// C <facility> <borrower> <capacity> <acceptance_id> <tender_id>[,...]
    /// ```
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# epoch {} unit {}", self.epoch_id, self.unit);
        for ((d, c), e) in &self.edges {
            let parts: Vec<String> = e.contributions.iter().map(|x| format!("{}:{}", x.id, x.amount)).collect();
            let _ = writeln!(out, "O {d} {c} {} {}", e.amount, parts.join(","));
        }
        for t in &self.tender_edges {
            let price = t.price.map(|p| format!("{}/{}", p.num, p.den)).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "T {} {} {} {} {} {}",
                t.source, t.sender, t.currency, t.max_amount, price, t.tender
            );
        }
        for a in &self.acceptance_edges {
            let limit = match a.limit {
                Limit::Infinite => "inf".to_string(),
                Limit::Finite(x) => x.to_string(),
            };
            let _ = writeln!(out, "A {} {} {} {} {}", a.origin, a.source, a.currency, limit, a.acceptance);
        }
        for c in &self.credit_edges {
            let ids: Vec<&str> = c.tenders.iter().map(|t| t.as_str()).collect();
            let _ = writeln!(
                out,
                "C {} {} {} {} {}",
                c.facility,
                c.borrower,
                c.capacity,
                c.acceptance,
                ids.join(",")
            );
        }
        out
    }

    /// Parses [`dump`](Self::dump) output. Obligation lines may omit the id list, in
    /// which case a single contribution `<debtor>-><creditor>` is synthesized.
    pub fn from_dump(text: &str) -> Result<Self, GraphError> {
        let mut g = ObligationGraph::new(0, AssetCode::new("USD")?);
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |reason: &str| GraphError::Dump {
                line: line_no,
                reason: reason.to_string(),
            };
            let f: Vec<&str> = raw.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| err("bad number"));
            let id = |s: &str| IntentId::new(s).map_err(|e| err(&e.to_string()));
            let agent = |s: &str| AgentId::new(s).map_err(|e| err(&e.to_string()));
            let asset = |s: &str| AssetCode::new(s).map_err(|e| err(&e.to_string()));
            match f[0] {
                "#" => {
                    if f.len() == 5 && f[1] == "epoch" && f[3] == "unit" {
                        g.epoch_id = num(f[2])?;
                        g.unit = asset(f[4])?;
                    }
                }
                "O" if f.len() == 4 || f.len() == 5 => {
                    let (d, c, total) = (agent(f[1])?, agent(f[2])?, num(f[3])?);
                    if f.len() == 4 {
                        g.add_obligation(id(&format!("{d}->{c}"))?, d, c, Amount(total), None, false)?;
                    } else {
                        let mut sum = 0u64;
                        for part in f[4].split(',') {
                            let (pid, amt) = part.rsplit_once(':').ok_or_else(|| err("expected id:amount"))?;
                            let amt = num(amt)?;
                            sum = sum.checked_add(amt).ok_or_else(|| err("overflow"))?;
                            g.add_obligation(id(pid)?, d.clone(), c.clone(), Amount(amt), None, false)?;
                        }
                        if sum != total {
                            return Err(err("contributions do not sum to the edge amount"));
                        }
                    }
                }
                "T" if f.len() == 7 => {
                    let price = if f[5] == "-" {
                        None
                    } else {
                        let (n, d) = f[5].split_once('/').ok_or_else(|| err("expected num/den"))?;
                        Some(Price::new(num(n)?, num(d)?))
                    };
                    g.add_tender_edge(TenderEdge {
                        tender: id(f[6])?,
                        source: agent(f[1])?,
                        sender: agent(f[2])?,
                        currency: asset(f[3])?,
                        max_amount: Amount(num(f[4])?),
                        price,
                    });
                }
                "A" if f.len() == 6 => {
                    let limit = if f[4] == "inf" {
                        Limit::Infinite
                    } else {
                        Limit::Finite(Amount(num(f[4])?))
                    };
                    g.add_acceptance_edge(AcceptanceEdge {
                        acceptance: id(f[5])?,
                        origin: agent(f[1])?,
                        source: agent(f[2])?,
                        currency: asset(f[3])?,
                        limit,
                    });
                }
                "C" if f.len() == 5 || f.len() == 6 => {
                    let tenders = match f.get(5) {
                        Some(list) => list.split(',').map(id).collect::<Result<_, _>>()?,
                        None => Vec::new(),
                    };
                    g.add_credit_edge(CreditEdge {
                        acceptance: id(f[4])?,
                        facility: agent(f[1])?,
                        borrower: agent(f[2])?,
                        capacity: Amount(num(f[3])?),
                        tenders,
                        repayment_due: None,
                    });
                }
                _ => return Err(err("unrecognised line")),
            }
        }
        Ok(g)
    }
}

/// Builds the epoch graph from a frozen pool plus obligations carried in `ledger`.
///
/// Intents that are malformed, unascertained, in a different unit of account,
/// ineligible or inconsistent with the epoch's liquidity sources are left out
/// and listed in [`ObligationGraph::excluded`]. Assignment tenders are clamped
/// to the sender's ledger balance, in tender-id order.
pub fn aggregate(pool: &[Intent], ledger: &Ledger, opts: &AggregateOptions<'_>) -> Result<ObligationGraph, GraphError> {
    let mut g = ObligationGraph::new(opts.epoch_id, opts.unit.clone());
    g.default_source = opts.default_source.clone();

    let mut by_id: BTreeMap<&IntentId, &Intent> = BTreeMap::new();
    for intent in pool {
        if by_id.insert(intent.id(), intent).is_some() || ledger.open_obligations.contains_key(intent.id()) {
            return Err(GraphError::DuplicateIntent(intent.id().clone()));
        }
    }

    let exclude = |g: &mut ObligationGraph, id: &IntentId, reason: &str| {
        g.excluded.push(Exclusion {
            id: id.clone(),
            reason: reason.to_string(),
        })
    };
    let eligible = |o: &Obligation| opts.eligible.is_none_or(|f| f(o));

    // Admission: well-formed and ascertained.
    let mut admitted: Vec<&Intent> = Vec::new();
    for (id, intent) in &by_id {
        if let Err(e) = intent.check_well_formed() {
            exclude(&mut g, id, &e.to_string());
        } else if !verify_ascertainment(intent, opts.verifier) {
            exclude(&mut g, id, "not ascertained by its bound party");
        } else {
            admitted.push(intent);
        }
    }

    // Obligations: carried first, then fresh.
    for (id, open) in &ledger.open_obligations {
        if open.outstanding.is_zero() || !eligible(&open.obligation) {
            continue;
        }
        let o = &open.obligation;
        g.add_obligation(id.clone(), o.debtor.clone(), o.creditor.clone(), open.outstanding, o.due_date, true)?;
    }
    for intent in &admitted {
        let Intent::Obligation(o) = intent else { continue };
        if o.unit != opts.unit {
            exclude(&mut g, &o.id, "obligation is in a different unit of account");
            continue;
        }
        if !eligible(o) {
            exclude(&mut g, &o.id, "not eligible for this epoch");
            continue;
        }
        g.add_obligation(o.id.clone(), o.debtor.clone(), o.creditor.clone(), o.amount, o.due_date, false)?;
        g.intents.insert(o.id.clone(), (*intent).clone());
    }

    // Liquidity sources: default first, then tenders and deposits in id order.
    if let Some(src) = &opts.default_source {
        g.sources.insert(src.currency.clone(), src.agent.clone());
    }
    let source_ok = |g: &mut ObligationGraph, currency: &AssetCode, agent: &AgentId| match g.sources.get(currency) {
        Some(existing) => existing == agent,
        None => {
            g.sources.insert(currency.clone(), agent.clone());
            true
        }
    };

    let mut remaining_balance: BTreeMap<(AgentId, AssetCode), Amount> = BTreeMap::new();
    let mut overdrafts: Vec<&crate::model::Tender> = Vec::new();
    for intent in &admitted {
        let Intent::Tender(t) = intent else { continue };
        match t.kind {
            TenderKind::Overdraft => overdrafts.push(t),
            TenderKind::Assignment => {
                if !source_ok(&mut g, &t.currency, &t.source) {
                    exclude(&mut g, &t.id, "source does not issue this currency in this epoch");
                    continue;
                }
                let key = (t.sender.clone(), t.currency.clone());
                let left = remaining_balance
                    .entry(key)
                    .or_insert_with(|| ledger.balance(&t.sender, &t.currency));
                let usable = t.max_amount.min(*left);
                *left = left.checked_sub(usable).expect("usable <= left");
                g.add_tender_edge(TenderEdge {
                    tender: t.id.clone(),
                    source: t.source.clone(),
                    sender: t.sender.clone(),
                    currency: t.currency.clone(),
                    max_amount: usable,
                    price: t.price,
                });
                g.intents.insert(t.id.clone(), (*intent).clone());
            }
        }
    }

    let mut repayments = Vec::new();
    let mut explicit_default: BTreeSet<AgentId> = BTreeSet::new();
    for intent in &admitted {
        let Intent::Acceptance(a) = intent else { continue };
        match a.kind {
            AcceptanceKind::Repayment => repayments.push(*intent),
            AcceptanceKind::Deposit => {
                if !source_ok(&mut g, &a.currency, &a.target) {
                    exclude(&mut g, &a.id, "target is not the source of this currency");
                    continue;
                }
                if opts.default_source.as_ref().is_some_and(|s| s.currency == a.currency) {
                    explicit_default.insert(a.origin.clone());
                }
                g.add_acceptance_edge(AcceptanceEdge {
                    acceptance: a.id.clone(),
                    origin: a.origin.clone(),
                    source: a.target.clone(),
                    currency: a.currency.clone(),
                    limit: a.limit,
                });
                g.intents.insert(a.id.clone(), (*intent).clone());
            }
        }
    }

    // Credit lines: repayment acceptance + the borrower's overdraft tenders on it.
    let mut tender_left: BTreeMap<&IntentId, Amount> = BTreeMap::new();
    let mut matched: BTreeSet<&IntentId> = BTreeSet::new();
    for t in &overdrafts {
        match t.effective_price(&opts.unit) {
            Some(p) => {
                let cap = p.to_unit_floor(t.max_amount).unwrap_or(Amount(u64::MAX));
                tender_left.insert(&t.id, cap);
            }
            None => exclude(&mut g, &t.id, "foreign-currency tender without a price"),
        }
    }
    for intent in repayments {
        let Intent::Acceptance(a) = intent else { unreachable!() };
        let mut cap = Amount::ZERO;
        let mut backing = Vec::new();
        let limit = a.limit.finite().expect("checked well-formed");
        for t in &overdrafts {
            if t.sender != a.target || t.source != a.origin {
                continue;
            }
            let Some(left) = tender_left.get_mut(&t.id) else { continue };
            let room = limit.checked_sub(cap).unwrap_or_default();
            let take = (*left).min(room);
            matched.insert(&t.id);
            if take.is_zero() {
                continue;
            }
            *left = left.checked_sub(take).expect("take <= left");
            cap = cap.checked_add(take).expect("cap <= limit");
            backing.push(t.id.clone());
        }
        if backing.is_empty() {
            continue;
        }
        for id in &backing {
            let t = overdrafts.iter().find(|t| &t.id == id).expect("backing tender");
            g.intents.insert(id.clone(), Intent::Tender((*t).clone()));
        }
        g.add_credit_edge(CreditEdge {
            acceptance: a.id.clone(),
            facility: a.origin.clone(),
            borrower: a.target.clone(),
            capacity: cap,
            tenders: backing,
            repayment_due: a.repayment_due,
        });
        g.intents.insert(a.id.clone(), intent.clone());
    }
    for t in &overdrafts {
        if tender_left.contains_key(&t.id) && !matched.contains(&t.id) {
            exclude(&mut g, &t.id, "no matching repayment acceptance from the facility");
        }
    }

    // Implicit infinite acceptance of the default source by every firm.
    if let Some(src) = &opts.default_source {
        let firms: Vec<AgentId> = g
            .firms()
            .into_iter()
            .filter(|f| **f != src.agent && !explicit_default.contains(*f))
            .cloned()
            .collect();
        for firm in firms {
            g.add_acceptance_edge(AcceptanceEdge {
                acceptance: implicit_acceptance_id(&firm),
                origin: firm,
                source: src.agent.clone(),
                currency: src.currency.clone(),
                limit: Limit::Infinite,
            });
        }
    }
    g.excluded.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(g)
}
