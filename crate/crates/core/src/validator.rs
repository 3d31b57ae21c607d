//! Validity predicate for a proposed [`SettlementFlow`].
//!
//! Capacities and endpoints are re-derived from the raw intents held by the
//! graph (and, for carried obligations, from the ledger); the aggregated edges
//! are never consulted. One pass over the records plus one over the transfers.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::ascertain::{verify_ascertainment, Verifier};
use crate::graph::{implicit_acceptance_agent, ObligationGraph};
use crate::model::{
    AcceptanceKind, AgentId, Amount, AssetCode, Intent, IntentId, Ledger, Limit, SetOffNotice, SettlementFlow,
    TenderKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Check {
    Ascertainment,
    SubsetFlow,
    BalancedFlow,
    PairedRecords,
    NonNegativeBalance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub check: Check,
    pub ids: Vec<String>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn has(&self, check: Check) -> bool {
        self.violations.iter().any(|v| v.check == check)
    }
}

/// Direction of value through a party on an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Out,
    In,
}

/// An edge as re-derived from intents: (out-party, in-party, capacity).
struct EdgeSpec {
    out: AgentId,
    inn: AgentId,
    capacity: Option<u64>,
    /// Currency the edge moves, with the most currency it may draw (tenders).
    currency: Option<(AssetCode, Option<u64>)>,
    tender_sender: bool,
}

struct Resolver<'a> {
    g: &'a ObligationGraph,
    ledger: &'a Ledger,
    verifier: &'a dyn Verifier,
    cache: HashMap<&'a IntentId, Result<EdgeSpec, (Check, String)>>,
}

impl<'a> Resolver<'a> {
    fn resolve(&mut self, id: &'a IntentId) -> &Result<EdgeSpec, (Check, String)> {
        if !self.cache.contains_key(id) {
            let r = self.derive(id);
            self.cache.insert(id, r);
        }
        &self.cache[id]
    }

    fn signed(&self, intent: &Intent) -> Result<(), (Check, String)> {
        if verify_ascertainment(intent, self.verifier) {
            Ok(())
        } else {
            Err((Check::Ascertainment, format!("{} lacks a valid signature from {}", intent.id(), intent.signer())))
        }
    }

    fn derive(&self, id: &IntentId) -> Result<EdgeSpec, (Check, String)> {
        let unknown = || Err((Check::SubsetFlow, format!("{id} is not an edge of the epoch graph")));
        if let Some(agent) = implicit_acceptance_agent(id) {
            let Some(src) = &self.g.default_source else { return unknown() };
            let in_graph = self.g.nodes.contains(&agent) && agent != src.agent;
            if !in_graph {
                return unknown();
            }
            return Ok(EdgeSpec {
                out: agent,
                inn: src.agent.clone(),
                capacity: None,
                currency: Some((src.currency.clone(), None)),
                tender_sender: false,
            });
        }
        match self.g.intents.get(id) {
            Some(intent) => {
                self.signed(intent)?;
                match intent {
                    Intent::Obligation(o) => Ok(EdgeSpec {
                        out: o.debtor.clone(),
                        inn: o.creditor.clone(),
                        capacity: Some(o.amount.0),
                        currency: None,
                        tender_sender: false,
                    }),
                    Intent::Tender(t) if t.kind == TenderKind::Assignment => {
                        let price = t
                            .effective_price(&self.g.unit)
                            .ok_or((Check::SubsetFlow, format!("tender {id} has no price")))?;
                        let cap = price.to_unit_floor(t.max_amount).map(|a| a.0).unwrap_or(u64::MAX);
                        Ok(EdgeSpec {
                            out: t.source.clone(),
                            inn: t.sender.clone(),
                            capacity: Some(cap),
                            currency: Some((t.currency.clone(), Some(t.max_amount.0))),
                            tender_sender: true,
                        })
                    }
                    Intent::Tender(_) => Err((Check::SubsetFlow, format!("overdraft tender {id} is drawn via its acceptance"))),
                    Intent::Acceptance(a) => match a.kind {
                        AcceptanceKind::Deposit => Ok(EdgeSpec {
                            out: a.origin.clone(),
                            inn: a.target.clone(),
                            capacity: a.limit.finite().map(|x| x.0),
                            currency: Some((a.currency.clone(), None)),
                            tender_sender: false,
                        }),
                        AcceptanceKind::Repayment => {
                            let mut drawable = 0u64;
                            for t in self.g.intents.values() {
                                let Intent::Tender(t) = t else { continue };
                                if t.kind != TenderKind::Overdraft || t.sender != a.target || t.source != a.origin {
                                    continue;
                                }
                                self.signed(&Intent::Tender(t.clone()))?;
                                let price = t
                                    .effective_price(&self.g.unit)
                                    .ok_or((Check::SubsetFlow, format!("tender {} has no price", t.id)))?;
                                let cap = price.to_unit_floor(t.max_amount).map(|x| x.0).unwrap_or(u64::MAX);
                                drawable = drawable.saturating_add(cap);
                            }
                            let limit = match a.limit {
                                Limit::Finite(x) => x.0,
                                Limit::Infinite => u64::MAX,
                            };
                            Ok(EdgeSpec {
                                out: a.origin.clone(),
                                inn: a.target.clone(),
                                capacity: Some(limit.min(drawable)),
                                currency: None,
                                tender_sender: false,
                            })
                        }
                    },
                }
            }
            None => match self.ledger.open_obligations.get(id) {
                Some(open) => Ok(EdgeSpec {
                    out: open.obligation.debtor.clone(),
                    inn: open.obligation.creditor.clone(),
                    capacity: Some(open.outstanding.0),
                    currency: None,
                    tender_sender: false,
                }),
                None => unknown(),
            },
        }
    }
}

/// Checks, in order: Ascertainment, SubsetFlow, BalancedFlow, PairedRecords,
/// NonNegativeBalance. Problems are reported as violations, never as errors.
pub fn is_valid_flow(
    g: &ObligationGraph,
    f: &SettlementFlow,
    ledger: &Ledger,
    verifier: &dyn Verifier,
) -> ValidationReport {
    let mut violations: Vec<Violation> = Vec::new();
    let mut push = |check: Check, ids: Vec<String>, detail: String| violations.push(Violation { check, ids, detail });

    if f.epoch_id != g.epoch_id {
        push(
            Check::SubsetFlow,
            vec![f.epoch_id.to_string()],
            format!("flow is for epoch {}, graph is epoch {}", f.epoch_id, g.epoch_id),
        );
    }

    let mut resolver = Resolver {
        g,
        ledger,
        verifier,
        cache: HashMap::new(),
    };

    // Per edge: summed amount per side, record count per side, currency drawn per side.
    #[derive(Default)]
    struct EdgeTally {
        amount: [u128; 2],
        count: [usize; 2],
        currency: [u128; 2],
    }
    let mut tallies: BTreeMap<&IntentId, EdgeTally> = BTreeMap::new();
    let mut side_sum: BTreeMap<&AgentId, [u128; 2]> = BTreeMap::new();
    // Net currency that should leave each (agent, asset) according to the records.
    let mut currency_net: BTreeMap<(AgentId, AssetCode), i128> = BTreeMap::new();
    let mut seen_failures: BTreeSet<&IntentId> = BTreeSet::new();

    let mut asc = Vec::new();
    let mut subset = Vec::new();
    let mut paired = Vec::new();

    for r in &f.records {
        let spec = match resolver.resolve(&r.edge_ref) {
            Ok(s) => s,
            Err((check, detail)) => {
                if seen_failures.insert(&r.edge_ref) {
                    let v = (vec![r.edge_ref.to_string()], detail.clone());
                    if *check == Check::Ascertainment {
                        asc.push(v);
                    } else {
                        subset.push(v);
                    }
                }
                continue;
            }
        };
        if r.amount.is_zero() {
            subset.push((vec![r.edge_ref.to_string(), r.party.to_string()], "record amount must be positive".into()));
        }
        let side = if r.party == spec.out {
            Side::Out
        } else if r.party == spec.inn {
            Side::In
        } else {
            paired.push((
                vec![r.edge_ref.to_string(), r.party.to_string()],
                format!("{} is not an endpoint of {}", r.party, r.edge_ref),
            ));
            continue;
        };
        let k = side as usize;
        let t = tallies.entry(&r.edge_ref).or_default();
        t.amount[k] += r.amount.0 as u128;
        t.count[k] += 1;
        side_sum.entry(&r.party).or_default()[k] += r.amount.0 as u128;

        match (&spec.currency, &r.currency_amount) {
            (None, None) => {}
            (Some((asset, _)), Some(c)) if &c.asset == asset => {
                t.currency[k] += c.amount.0 as u128;
                // The party of the edge that is a firm holds the balance.
                let holder_side = if spec.tender_sender { Side::In } else { Side::Out };
                if side == holder_side {
                    let sign = if spec.tender_sender { 1 } else { -1 };
                    *currency_net.entry((r.party.clone(), asset.clone())).or_default() += sign * c.amount.0 as i128;
                }
            }
            _ => subset.push((vec![r.edge_ref.to_string()], "currency leg does not match the edge".into())),
        }
    }

    for (id, t) in &tallies {
        let Ok(spec) = resolver.resolve(id) else { continue };
        let used = t.amount[0].max(t.amount[1]);
        if let Some(cap) = spec.capacity {
            if used > cap as u128 {
                subset.push((vec![id.to_string()], format!("{used} exceeds capacity {cap}")));
            }
        }
        if let Some((_, Some(max_cur))) = &spec.currency {
            if t.currency[0].max(t.currency[1]) > *max_cur as u128 {
                subset.push((vec![id.to_string()], "currency drawn exceeds the tender".into()));
            }
        }
        if t.count != [1, 1] || t.amount[0] != t.amount[1] || t.currency[0] != t.currency[1] {
            paired.push((
                vec![id.to_string()],
                format!(
                    "expected one equal record per endpoint, got {:?} records with amounts {:?}",
                    t.count, t.amount
                ),
            ));
        }
    }

    let mut balanced = Vec::new();
    for (agent, [out, inn]) in &side_sum {
        if out != inn {
            balanced.push((vec![agent.to_string()], format!("out {out} != in {inn}")));
        }
    }
    let mut transfer_net: BTreeMap<(AgentId, AssetCode), i128> = BTreeMap::new();
    for tr in &f.transfers {
        *transfer_net.entry((tr.from.clone(), tr.asset.clone())).or_default() += tr.amount.0 as i128;
        *transfer_net.entry((tr.to.clone(), tr.asset.clone())).or_default() -= tr.amount.0 as i128;
    }
    let keys: BTreeSet<&(AgentId, AssetCode)> = currency_net.keys().chain(transfer_net.keys()).collect();
    for key in keys {
        let want = currency_net.get(key).copied().unwrap_or(0);
        let got = transfer_net.get(key).copied().unwrap_or(0);
        if want != got {
            balanced.push((
                vec![key.0.to_string(), key.1.to_string()],
                format!("transfers move {got} net out, records imply {want}"),
            ));
        }
    }

    let mut nonneg = Vec::new();
    let mut deltas: BTreeMap<(&AgentId, &AssetCode), i128> = BTreeMap::new();
    for tr in &f.transfers {
        if tr.amount.is_zero() {
            subset.push((vec![tr.from.to_string(), tr.to.to_string()], "zero transfer".into()));
        }
        *deltas.entry((&tr.from, &tr.asset)).or_default() -= tr.amount.0 as i128;
        *deltas.entry((&tr.to, &tr.asset)).or_default() += tr.amount.0 as i128;
    }
    for ((agent, asset), d) in deltas {
        if ledger.balance(agent, asset).0 as i128 + d < 0 {
            nonneg.push((vec![agent.to_string(), asset.to_string()], format!("balance would go negative by {}", -d)));
        }
    }

    for (check, list) in [
        (Check::Ascertainment, asc),
        (Check::SubsetFlow, subset),
        (Check::BalancedFlow, balanced),
        (Check::PairedRecords, paired),
        (Check::NonNegativeBalance, nonneg),
    ] {
        for (ids, detail) in list {
            push(check, ids, detail);
        }
    }
    ValidationReport {
        valid: violations.is_empty(),
        violations,
    }
}

/// True iff every obligation record's party has exactly the matching notice
/// entry, and no notice carries anything else.
pub fn verify_notices(g: &ObligationGraph, f: &SettlementFlow, notices: &[SetOffNotice]) -> bool {
    let Some(expected) = crate::settlement::expected_entries(g, f) else {
        return false;
    };
    let mut got: BTreeMap<(AgentId, IntentId), (Amount, Amount)> = BTreeMap::new();
    let mut parties = BTreeSet::new();
    for n in notices {
        if n.epoch_id != f.epoch_id || !parties.insert(&n.party) {
            return false;
        }
        for e in &n.entries {
            if got.insert((n.party.clone(), e.obligation.clone()), (e.discharged, e.remaining)).is_some() {
                return false;
            }
        }
    }
    got == expected
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ascertain::KeyRing;
    use crate::fixtures::*;
    use crate::graph::aggregate;
    use crate::model::{CurrencyAmount, Transfer};
    use crate::solver::solve;

    fn triangle() -> (KeyRing, ObligationGraph, SettlementFlow) {
        let mut ring = KeyRing::new();
        let pool = vec![
            ob(&mut ring, "ab", "A", "B", 20),
            ob(&mut ring, "bc", "B", "C", 30),
            ob(&mut ring, "ca", "C", "A", 45),
        ];
        let g = aggregate(&pool, &Ledger::default(), &opts(&ring, None)).unwrap();
        let f = solve(&g, None).unwrap();
        (ring, g, f)
    }

    fn chain_with_tender() -> (KeyRing, Ledger, ObligationGraph, SettlementFlow) {
        let mut ring = KeyRing::new();
        let mut ledger = Ledger::default();
        ledger.credit(&agent("A"), &asset(UNIT), Amount(20)).unwrap();
        let pool = vec![
            ob(&mut ring, "ab", "A", "B", 20),
            ob(&mut ring, "bc", "B", "C", 20),
            tender(&mut ring, "t1", "A", 20),
        ];
        let g = aggregate(&pool, &ledger, &opts(&ring, Some(bank()))).unwrap();
        let f = solve(&g, None).unwrap();
        (ring, ledger, g, f)
    }

    #[test]
    fn solver_output_is_valid() {
        let (ring, g, f) = triangle();
        let r = is_valid_flow(&g, &f, &Ledger::default(), &ring);
        assert!(r.valid, "{r:?}");
        let (ring, ledger, g, f) = chain_with_tender();
        let r = is_valid_flow(&g, &f, &ledger, &ring);
        assert!(r.valid, "{r:?}");
    }

    #[test]
    fn empty_flow_is_valid() {
        let (ring, g, _) = triangle();
        assert!(is_valid_flow(&g, &SettlementFlow::empty(g.epoch_id), &Ledger::default(), &ring).valid);
    }

    #[test]
    fn one_sided_raise_is_caught() {
        let (ring, g, mut f) = triangle();
        let r = f
            .records
            .iter_mut()
            .find(|r| r.edge_ref.as_str() == "ab" && r.party.as_str() == "A")
            .unwrap();
        assert_eq!(r.amount, Amount(20));
        r.amount = Amount(21);
        let rep = is_valid_flow(&g, &f, &Ledger::default(), &ring);
        assert!(!rep.valid);
        assert!(rep.has(Check::BalancedFlow) || rep.has(Check::PairedRecords));
    }

    #[test]
    fn both_sides_over_capacity() {
        let (ring, g, mut f) = triangle();
        for r in f.records.iter_mut().filter(|r| r.edge_ref.as_str() == "ab") {
            r.amount = Amount(21);
        }
        let rep = is_valid_flow(&g, &f, &Ledger::default(), &ring);
        assert!(rep.has(Check::SubsetFlow));
    }

    #[test]
    fn unknown_edge_is_a_violation() {
        let (ring, g, mut f) = triangle();
        f.records[0].edge_ref = iid("nope");
        let rep = is_valid_flow(&g, &f, &Ledger::default(), &ring);
        assert!(rep.has(Check::SubsetFlow));
        assert!(rep.violations.iter().any(|v| v.ids.contains(&"nope".to_string())));
    }

    #[test]
    fn forged_signature_is_caught() {
        let (_, g, f) = triangle();
        let other = KeyRing::new();
        let rep = is_valid_flow(&g, &f, &Ledger::default(), &other);
        assert!(rep.has(Check::Ascertainment));
    }

    #[test]
    fn dropped_record_breaks_pairing() {
        let (ring, g, mut f) = triangle();
        f.records.remove(0);
        let rep = is_valid_flow(&g, &f, &Ledger::default(), &ring);
        assert!(rep.has(Check::PairedRecords));
    }

    #[test]
    fn swapped_party_is_caught() {
        let (ring, g, mut f) = triangle();
        f.records[0].party = agent("Z");
        let rep = is_valid_flow(&g, &f, &Ledger::default(), &ring);
        assert!(rep.has(Check::PairedRecords));
    }

    #[test]
    fn overdrawn_transfer_is_caught() {
        let (ring, ledger, g, mut f) = chain_with_tender();
        f.transfers[0].amount = Amount(25);
        for r in &mut f.records {
            if let Some(c) = &mut r.currency_amount {
                c.amount = Amount(25);
            }
        }
        let rep = is_valid_flow(&g, &f, &ledger, &ring);
        assert!(rep.has(Check::NonNegativeBalance));
        assert!(rep.has(Check::SubsetFlow));
    }

    #[test]
    fn transfer_inconsistent_with_records() {
        let (ring, ledger, g, mut f) = chain_with_tender();
        f.transfers.push(Transfer {
            from: agent("A"),
            to: agent("B"),
            asset: asset(UNIT),
            amount: Amount(1),
        });
        let rep = is_valid_flow(&g, &f, &ledger, &ring);
        assert!(rep.has(Check::BalancedFlow));
    }

    #[test]
    fn wrong_currency_leg() {
        let (ring, ledger, g, mut f) = chain_with_tender();
        let r = f.records.iter_mut().find(|r| r.currency_amount.is_some()).unwrap();
        r.currency_amount = Some(CurrencyAmount {
            asset: asset("EUR"),
            amount: Amount(20),
        });
        assert!(is_valid_flow(&g, &f, &ledger, &ring).has(Check::SubsetFlow));
    }

    #[test]
    fn deterministic_report() {
        let (ring, g, mut f) = triangle();
        f.records[1].amount = Amount(3);
        let a = is_valid_flow(&g, &f, &Ledger::default(), &ring);
        let b = is_valid_flow(&g, &f, &Ledger::default(), &ring);
        assert_eq!(a, b);
        assert!(serde_json::to_string(&a).unwrap().contains("\"check\""));
    }
}
