//! Flow network derived from an [`ObligationGraph`].
//!
//! Each currency gets its own super-source `S_c` and super-sink `T_c`. Arcs:
//!
//! | arc                        | capacity                          | cost |
//! |----------------------------|-----------------------------------|------|
//! | debtor -> creditor         | aggregated obligation amount      | -1   |
//! | facility -> borrower       | credit line capacity              | 0    |
//! | `S_c` -> tender sender     | `floor(max_amount * price)`       | 0    |
//! | acceptor -> `T_c`          | acceptance limit (or unbounded)   | 0    |
//!
//! Negative cycles are exactly the set-off cycles; every unit pushed from a
//! source to a sink along `k` obligation arcs clears `k` units of debt.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::ObligationGraph;
use crate::model::{AgentId, Amount, AssetCode, IntentId, Limit};

/// Stand-in for an unbounded acceptance.
pub const UNBOUNDED: i64 = i64::MAX / 4;
/// Largest finite capacity a single arc may carry.
pub const MAX_ARC_CAPACITY: u64 = (i64::MAX / 16) as u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BuildError {
    #[error("tender {0} is in a foreign currency and has no price")]
    MissingPrice(IntentId),
    #[error("capacity of {0} exceeds the supported range")]
    CapacityOverflow(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Agent(AgentId),
    Source(AssetCode),
    Sink(AssetCode),
}

/// What an arc stands for; indices point into the graph's edge vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArcKind {
    Obligation { debtor: AgentId, creditor: AgentId },
    Credit(usize),
    Tender(usize),
    Acceptance(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arc {
    pub from: usize,
    pub to: usize,
    pub capacity: i64,
    pub cost: i64,
    pub kind: ArcKind,
    pub currency: Option<AssetCode>,
}

/// Source and sink of one currency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Circuit {
    pub currency: AssetCode,
    pub source: usize,
    pub sink: usize,
}

/// Order in which arcs are laid out, which fixes tie-breaking among optimal flows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ArcOrder {
    /// Obligation arcs by (debtor, creditor), then credit, tender and acceptance
    /// arcs in graph order.
    #[default]
    Canonical,
    /// Canonical order shuffled by a seeded ChaCha8 permutation.
    Seeded(u64),
}

impl ArcOrder {
    /// `0` means canonical.
    pub fn from_seed(seed: u64) -> Self {
        if seed == 0 {
            ArcOrder::Canonical
        } else {
            ArcOrder::Seeded(seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowNetwork {
    pub nodes: Vec<NodeKind>,
    pub arcs: Vec<Arc>,
    /// Ascending by currency code.
    pub circuits: Vec<Circuit>,
    /// Cap on total outflow of all super-sources, in unit-of-account minor units.
    pub budget: Option<u64>,
}

impl FlowNetwork {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

fn capacity(amount: Amount, what: impl FnOnce() -> String) -> Result<i64, BuildError> {
    if amount.0 > MAX_ARC_CAPACITY {
        return Err(BuildError::CapacityOverflow(what()));
    }
    Ok(amount.0 as i64)
}

/// Lays out the flow network for `g`. `budget` caps total liquidity injected.
pub fn build_network(g: &ObligationGraph, budget: Option<Amount>, order: ArcOrder) -> Result<FlowNetwork, BuildError> {
    let mut nodes: Vec<NodeKind> = Vec::new();
    let mut index: BTreeMap<&AgentId, usize> = BTreeMap::new();
    for a in &g.nodes {
        index.insert(a, nodes.len());
        nodes.push(NodeKind::Agent(a.clone()));
    }

    let mut currencies: Vec<&AssetCode> = g
        .tender_edges
        .iter()
        .map(|t| &t.currency)
        .chain(g.acceptance_edges.iter().map(|a| &a.currency))
        .collect();
    currencies.sort();
    currencies.dedup();
    let mut circuits = Vec::new();
    let mut circuit_of: BTreeMap<&AssetCode, (usize, usize)> = BTreeMap::new();
    for c in currencies {
        let s = nodes.len();
        nodes.push(NodeKind::Source(c.clone()));
        let t = nodes.len();
        nodes.push(NodeKind::Sink(c.clone()));
        circuits.push(Circuit {
            currency: c.clone(),
            source: s,
            sink: t,
        });
        circuit_of.insert(c, (s, t));
    }

    let mut arcs = Vec::new();
    for ((d, c), e) in &g.edges {
        if e.amount.is_zero() {
            continue;
        }
        arcs.push(Arc {
            from: index[d],
            to: index[c],
            capacity: capacity(e.amount, || format!("obligation edge {d} -> {c}"))?,
            cost: -1,
            kind: ArcKind::Obligation {
                debtor: d.clone(),
                creditor: c.clone(),
            },
            currency: None,
        });
    }
    for (i, e) in g.credit_edges.iter().enumerate() {
        arcs.push(Arc {
            from: index[&e.facility],
            to: index[&e.borrower],
            capacity: capacity(e.capacity, || format!("credit line {}", e.acceptance))?,
            cost: 0,
            kind: ArcKind::Credit(i),
            currency: None,
        });
    }
    for (i, t) in g.tender_edges.iter().enumerate() {
        let price = t
            .price
            .or_else(|| (t.currency == g.unit).then_some(crate::model::Price::ONE))
            .ok_or_else(|| BuildError::MissingPrice(t.tender.clone()))?;
        let units = price
            .to_unit_floor(t.max_amount)
            .map_err(|_| BuildError::CapacityOverflow(format!("tender {}", t.tender)))?;
        arcs.push(Arc {
            from: circuit_of[&t.currency].0,
            to: index[&t.sender],
            capacity: capacity(units, || format!("tender {}", t.tender))?,
            cost: 0,
            kind: ArcKind::Tender(i),
            currency: Some(t.currency.clone()),
        });
    }
    for (i, a) in g.acceptance_edges.iter().enumerate() {
        let cap = match a.limit {
            Limit::Infinite => UNBOUNDED,
            Limit::Finite(x) => capacity(x, || format!("acceptance {}", a.acceptance))?,
        };
        arcs.push(Arc {
            from: index[&a.origin],
            to: circuit_of[&a.currency].1,
            capacity: cap,
            cost: 0,
            kind: ArcKind::Acceptance(i),
            currency: Some(a.currency.clone()),
        });
    }

    if let ArcOrder::Seeded(seed) = order {
        arcs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }

    Ok(FlowNetwork {
        nodes,
        arcs,
        circuits,
        budget: budget.map(|b| b.0),
    })
}
