//! Turning arc flows into settlement records and direct transfers.

use std::collections::BTreeMap;

use crate::graph::ObligationGraph;
use crate::model::{
    AgentId, Amount, AssetCode, CurrencyAmount, IntentId, Price, SettlementFlow, SettlementRecord, Transfer,
};
use crate::network::{ArcKind, FlowNetwork};
use crate::solver::FlowSolution;

fn pair(records: &mut Vec<SettlementRecord>, edge: &IntentId, a: &AgentId, b: &AgentId, amount: u64, cur: Option<CurrencyAmount>) {
    for party in [a, b] {
        records.push(SettlementRecord {
            edge_ref: edge.clone(),
            party: party.clone(),
            amount: Amount(amount),
            currency_amount: cur.clone(),
        });
    }
}

/// A tender's flow split into transfer pieces, carrying cumulative state so the
/// currency drawn is `ceil(total / price)` no matter how it is split.
struct TenderDraw<'a> {
    sender: &'a AgentId,
    price: Price,
    units_sent: u128,
    currency_sent: u128,
}

impl TenderDraw<'_> {
    fn take(&mut self, units: u64) -> u64 {
        self.units_sent += units as u128;
        let total = self.price.to_currency_ceil(self.units_sent);
        let piece = total - self.currency_sent;
        self.currency_sent = total;
        piece as u64
    }
}

/// Emits paired records for every arc with flow, and per currency pairs tender
/// inflows with acceptance outflows greedily in id order to produce transfers.
///
/// Obligation flow on an aggregated edge is attributed to its contributions in
/// their stored order (earliest due date first, then id).
pub fn settlement_from_solution(g: &ObligationGraph, net: &FlowNetwork, sol: &FlowSolution) -> SettlementFlow {
    let mut records = Vec::new();
    let mut tender_flow: BTreeMap<&AssetCode, Vec<(usize, u64)>> = BTreeMap::new();
    let mut accept_flow: BTreeMap<&AssetCode, Vec<(usize, u64)>> = BTreeMap::new();

    for (arc, &f) in net.arcs.iter().zip(&sol.arc_flows) {
        if f <= 0 {
            continue;
        }
        let f = f as u64;
        match &arc.kind {
            ArcKind::Obligation { debtor, creditor } => {
                let edge = &g.edges[&(debtor.clone(), creditor.clone())];
                let mut left = f;
                for c in &edge.contributions {
                    if left == 0 {
                        break;
                    }
                    let take = left.min(c.amount.0);
                    if take > 0 {
                        pair(&mut records, &c.id, debtor, creditor, take, None);
                    }
                    left -= take;
                }
                debug_assert_eq!(left, 0, "flow exceeds aggregated amount");
            }
            ArcKind::Credit(i) => {
                let e = &g.credit_edges[*i];
                pair(&mut records, &e.acceptance, &e.facility, &e.borrower, f, None);
            }
            ArcKind::Tender(i) => {
                let t = &g.tender_edges[*i];
                tender_flow.entry(&t.currency).or_default().push((*i, f));
            }
            ArcKind::Acceptance(i) => {
                let a = &g.acceptance_edges[*i];
                accept_flow.entry(&a.currency).or_default().push((*i, f));
            }
        }
    }

    let mut transfers: BTreeMap<(AssetCode, AgentId, AgentId), u64> = BTreeMap::new();
    for (currency, mut tenders) in tender_flow {
        let mut accepts = accept_flow.remove(currency).unwrap_or_default();
        tenders.sort_by(|x, y| g.tender_edges[x.0].tender.cmp(&g.tender_edges[y.0].tender));
        accepts.sort_by(|x, y| g.acceptance_edges[x.0].acceptance.cmp(&g.acceptance_edges[y.0].acceptance));

        let mut draws: Vec<TenderDraw> = tenders
            .iter()
            .map(|(i, _)| {
                let t = &g.tender_edges[*i];
                TenderDraw {
                    sender: &t.sender,
                    price: t.price.unwrap_or(Price::ONE),
                    units_sent: 0,
                    currency_sent: 0,
                }
            })
            .collect();
        let mut received = vec![0u64; accepts.len()];

        let (mut ti, mut ai) = (0usize, 0usize);
        let mut t_left = tenders.first().map_or(0, |t| t.1);
        let mut a_left = accepts.first().map_or(0, |a| a.1);
        while ti < tenders.len() && ai < accepts.len() {
            let units = t_left.min(a_left);
            let cur = draws[ti].take(units);
            received[ai] += cur;
            let to = &g.acceptance_edges[accepts[ai].0].origin;
            if cur > 0 && draws[ti].sender != to {
                *transfers
                    .entry((currency.clone(), draws[ti].sender.clone(), to.clone()))
                    .or_default() += cur;
            }
            t_left -= units;
            a_left -= units;
            if t_left == 0 {
                ti += 1;
                t_left = tenders.get(ti).map_or(0, |t| t.1);
            }
            if a_left == 0 {
                ai += 1;
                a_left = accepts.get(ai).map_or(0, |a| a.1);
            }
        }
        debug_assert!(ti == tenders.len() && ai == accepts.len(), "circuit flow unbalanced");

        for ((i, f), draw) in tenders.iter().zip(&draws) {
            let t = &g.tender_edges[*i];
            let cur = CurrencyAmount {
                asset: currency.clone(),
                amount: Amount(draw.currency_sent as u64),
            };
            pair(&mut records, &t.tender, &t.source, &t.sender, *f, Some(cur));
        }
        for ((i, f), got) in accepts.iter().zip(received) {
            let a = &g.acceptance_edges[*i];
            let cur = CurrencyAmount {
                asset: currency.clone(),
                amount: Amount(got),
            };
            pair(&mut records, &a.acceptance, &a.origin, &a.source, *f, Some(cur));
        }
    }

    records.sort_by(|x, y| (&x.edge_ref, &x.party).cmp(&(&y.edge_ref, &y.party)));
    SettlementFlow {
        epoch_id: g.epoch_id,
        records,
        transfers: transfers
            .into_iter()
            .map(|((asset, from, to), amount)| Transfer {
                from,
                to,
                asset,
                amount: Amount(amount),
            })
            .collect(),
    }
}

/// Debt discharged by `flow`: half the sum of obligation record amounts.
pub fn cleared_debt(g: &ObligationGraph, flow: &SettlementFlow) -> Amount {
    let obligation_ids: std::collections::BTreeSet<&IntentId> =
        g.edges.values().flat_map(|e| e.contributions.iter().map(|c| &c.id)).collect();
    let total: u64 = flow
        .records
        .iter()
        .filter(|r| obligation_ids.contains(&r.edge_ref))
        .map(|r| r.amount.0)
        .sum();
    Amount(total / 2)
}
