//! Atomic application of a validated flow to the ledger, and set-off notices.
//!
//! All changes are made on a working copy; the caller commits `ledger_after`
//! only when [`apply_flow`] returns `Ok`, so a failure anywhere leaves the
//! original ledger untouched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ascertain::Verifier;
use crate::graph::ObligationGraph;
use crate::model::{
    AgentId, Amount, AssetCode, Intent, IntentId, Ledger, NoticeEntry, Obligation, OpenObligation, SetOffNotice,
    SettlementFlow, SYSTEM_ID_PREFIX,
};
use crate::validator::{is_valid_flow, ValidationReport};

#[derive(Debug, Error)]
pub enum SettlementError {
    #[error("flow failed validation")]
    Invalid(ValidationReport),
    #[error("ledger arithmetic failed: {0}")]
    Arithmetic(String),
    #[error("injected fault at {0:?}")]
    Fault(ApplyStep),
}

/// Points inside [`apply_flow_with`] at which a hook may abort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApplyStep {
    Validated,
    Discharged,
    Transferred,
    Drawn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedEpoch {
    pub epoch_id: u64,
    pub ledger_before: Ledger,
    pub ledger_after: Ledger,
    /// Obligations created by draws on credit lines.
    pub new_obligations: Vec<Obligation>,
    pub notices: Vec<SetOffNotice>,
}

/// Id of the obligation created when `acceptance` is drawn in `epoch`.
pub fn draw_obligation_id(epoch: u64, acceptance: &IntentId) -> IntentId {
    IntentId::new(format!("{SYSTEM_ID_PREFIX}draw:{epoch}:{acceptance}")).expect("ids contain no whitespace")
}

/// Obligation endpoints and opening amount per id, read off the graph.
fn obligation_index(g: &ObligationGraph) -> BTreeMap<&IntentId, (&AgentId, &AgentId, Amount)> {
    let mut out = BTreeMap::new();
    for ((d, c), e) in &g.edges {
        for x in &e.contributions {
            out.insert(&x.id, (d, c, x.amount));
        }
    }
    out
}

/// Expected `(discharged, remaining)` per (party, obligation) for `f` on `g`.
pub(crate) fn expected_entries(
    g: &ObligationGraph,
    f: &SettlementFlow,
) -> Option<BTreeMap<(AgentId, IntentId), (Amount, Amount)>> {
    let index = obligation_index(g);
    let mut out: BTreeMap<(AgentId, IntentId), (Amount, Amount)> = BTreeMap::new();
    for r in &f.records {
        let Some(&(d, c, opening)) = index.get(&r.edge_ref) else { continue };
        if &r.party != d && &r.party != c {
            return None;
        }
        let e = out.entry((r.party.clone(), r.edge_ref.clone())).or_insert((Amount::ZERO, opening));
        e.0 = e.0.checked_add(r.amount).ok()?;
        e.1 = opening.checked_sub(e.0).ok()?;
    }
    Some(out)
}

/// One notice per party named on a discharged obligation, sorted by party,
/// with entries sorted by obligation id.
pub fn emit_notices(g: &ObligationGraph, f: &SettlementFlow) -> Vec<SetOffNotice> {
    let entries = expected_entries(g, f).unwrap_or_default();
    let mut notices: Vec<SetOffNotice> = Vec::new();
    for ((party, obligation), (discharged, remaining)) in entries {
        if notices.last().is_none_or(|n| n.party != party) {
            notices.push(SetOffNotice {
                epoch_id: f.epoch_id,
                party: party.clone(),
                entries: Vec::new(),
            });
        }
        notices.last_mut().expect("just pushed").entries.push(NoticeEntry {
            obligation,
            discharged,
            remaining,
        });
    }
    notices
}

/// `party,obligation,discharged,remaining` with a header row.
pub fn notices_csv(notices: &[SetOffNotice]) -> String {
    let mut out = String::from("party,obligation,discharged,remaining\n");
    for n in notices {
        for e in &n.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                csv_field(n.party.as_str()),
                csv_field(e.obligation.as_str()),
                e.discharged,
                e.remaining
            ));
        }
    }
    out
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// [`apply_flow_with`] without a fault hook.
pub fn apply_flow(
    ledger: &Ledger,
    g: &ObligationGraph,
    f: &SettlementFlow,
    verifier: &dyn Verifier,
) -> Result<AppliedEpoch, SettlementError> {
    apply_flow_with(ledger, g, f, verifier, &mut |_| Ok(()))
}

/// Validates `f` and applies it to a copy of `ledger`:
///
/// - fresh obligations of the epoch become open obligations, then every
///   obligation record reduces what is outstanding (removed at zero);
/// - transfers move balances;
/// - each drawn credit line becomes a new obligation from borrower to facility,
///   carried into later epochs.
///
/// `hook` runs after each step and may abort the whole application.
pub fn apply_flow_with(
    ledger: &Ledger,
    g: &ObligationGraph,
    f: &SettlementFlow,
    verifier: &dyn Verifier,
    hook: &mut dyn FnMut(ApplyStep) -> Result<(), SettlementError>,
) -> Result<AppliedEpoch, SettlementError> {
    let report = is_valid_flow(g, f, ledger, verifier);
    if !report.valid {
        return Err(SettlementError::Invalid(report));
    }
    hook(ApplyStep::Validated)?;
    let arith = |e: crate::model::AmountError| SettlementError::Arithmetic(e.to_string());

    let mut work = ledger.clone();
    for intent in g.intents.values() {
        if let Intent::Obligation(o) = intent {
            work.open_obligations.insert(
                o.id.clone(),
                OpenObligation {
                    obligation: o.clone(),
                    outstanding: o.amount,
                },
            );
        }
    }
    let index = obligation_index(g);
    let mut discharged: BTreeMap<&IntentId, Amount> = BTreeMap::new();
    for r in &f.records {
        if let Some((debtor, _, _)) = index.get(&r.edge_ref) {
            if &r.party == *debtor {
                let e = discharged.entry(&r.edge_ref).or_default();
                *e = e.checked_add(r.amount).map_err(arith)?;
            }
        }
    }
    for (id, amount) in &discharged {
        let open = work
            .open_obligations
            .get_mut(*id)
            .ok_or_else(|| SettlementError::Arithmetic(format!("{id} is not open")))?;
        open.outstanding = open.outstanding.checked_sub(*amount).map_err(arith)?;
        if open.outstanding.is_zero() {
            work.open_obligations.remove(*id);
        }
    }
    hook(ApplyStep::Discharged)?;

    for t in &f.transfers {
        work.debit(&t.from, &t.asset, t.amount).map_err(arith)?;
        work.credit(&t.to, &t.asset, t.amount).map_err(arith)?;
    }
    hook(ApplyStep::Transferred)?;

    let mut drawn: BTreeMap<&IntentId, Amount> = BTreeMap::new();
    for r in &f.records {
        if let Some(c) = g.credit_edges.iter().find(|c| c.acceptance == r.edge_ref) {
            if r.party == c.borrower {
                let e = drawn.entry(&c.acceptance).or_default();
                *e = e.checked_add(r.amount).map_err(arith)?;
            }
        }
    }
    let mut new_obligations = Vec::new();
    for (acc, amount) in drawn {
        let c = g.credit_edges.iter().find(|c| &c.acceptance == acc).expect("drawn line exists");
        let o = Obligation {
            id: draw_obligation_id(g.epoch_id, acc),
            debtor: c.borrower.clone(),
            creditor: c.facility.clone(),
            amount,
            unit: g.unit.clone(),
            due_date: c.repayment_due,
            ascertainment: None,
        };
        work.open_obligations.insert(
            o.id.clone(),
            OpenObligation {
                obligation: o.clone(),
                outstanding: amount,
            },
        );
        new_obligations.push(o);
    }
    hook(ApplyStep::Drawn)?;

    // Defensive: transfers only move balances.
    let assets: std::collections::BTreeSet<&AssetCode> = f.transfers.iter().map(|t| &t.asset).collect();
    for a in assets {
        if ledger.supply(a).map_err(arith)? != work.supply(a).map_err(arith)? {
            return Err(SettlementError::Arithmetic(format!("supply of {a} changed")));
        }
    }

    Ok(AppliedEpoch {
        epoch_id: g.epoch_id,
        ledger_before: ledger.clone(),
        ledger_after: work,
        new_obligations,
        notices: emit_notices(g, f),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ascertain::KeyRing;
    use crate::fixtures::*;
    use crate::graph::aggregate;
    use crate::model::Limit;
    use crate::solver::solve;
    use crate::validator::verify_notices;

    fn chain(ring: &mut KeyRing, names: &[&str]) -> Vec<Intent> {
        names
            .windows(2)
            .enumerate()
            .map(|(i, w)| ob(ring, &format!("o{}", i + 1), w[0], w[1], 20))
            .collect()
    }

    #[test]
    fn chain_apply_moves_twenty_head_to_tail() {
        let mut ring = KeyRing::new();
        let mut ledger = Ledger::default();
        ledger.credit(&agent("Alice"), &asset(UNIT), Amount(20)).unwrap();
        let mut pool = chain(&mut ring, &["Alice", "Bob", "Bill", "Ben", "Carol"]);
        pool.push(tender(&mut ring, "t1", "Alice", 20));
        pool.push(deposit(&mut ring, "a1", "Carol", BANK, UNIT, Limit::Infinite));
        let g = aggregate(&pool, &ledger, &opts(&ring, None)).unwrap();
        let f = solve(&g, None).unwrap();
        let applied = apply_flow(&ledger, &g, &f, &ring).unwrap();
        let after = &applied.ledger_after;
        assert_eq!(after.balance(&agent("Alice"), &asset(UNIT)), Amount(0));
        assert_eq!(after.balance(&agent("Carol"), &asset(UNIT)), Amount(20));
        assert!(after.open_obligations.is_empty());
        let parties: Vec<&str> = applied.notices.iter().map(|n| n.party.as_str()).collect();
        assert_eq!(parties, vec!["Alice", "Ben", "Bill", "Bob", "Carol"]);
        assert!(applied.new_obligations.is_empty());
    }

    #[test]
    fn p2p_loan_leaves_only_the_draw() {
        let mut ring = KeyRing::new();
        let ledger = Ledger::default();
        let mut pool = chain(&mut ring, &["Alice", "Bob", "Carol"]);
        pool.push(overdraft(&mut ring, "t1", "Alice", "Carol", 20));
        pool.push(repayment(&mut ring, "r1", "Carol", "Alice", 20));
        let g = aggregate(&pool, &ledger, &opts(&ring, None)).unwrap();
        let f = solve(&g, None).unwrap();
        assert!(f.transfers.is_empty());
        let applied = apply_flow(&ledger, &g, &f, &ring).unwrap();
        assert_eq!(applied.ledger_after.balances, ledger.balances);
        assert_eq!(applied.new_obligations.len(), 1);
        let o = &applied.new_obligations[0];
        assert_eq!((o.debtor.as_str(), o.creditor.as_str(), o.amount), ("Alice", "Carol", Amount(20)));
        let open: Vec<&IntentId> = applied.ledger_after.open_obligations.keys().collect();
        assert_eq!(open, vec![&o.id]);
    }

    #[test]
    fn empty_flow_is_identity() {
        let ring = KeyRing::new();
        let mut ledger = Ledger::default();
        ledger.credit(&agent("A"), &asset(UNIT), Amount(5)).unwrap();
        let g = aggregate(&[], &ledger, &opts(&ring, None)).unwrap();
        let applied = apply_flow(&ledger, &g, &SettlementFlow::empty(1), &ring).unwrap();
        assert_eq!(applied.ledger_after, ledger);
        assert!(applied.notices.is_empty());
    }

    #[test]
    fn triangle_notices() {
        let mut ring = KeyRing::new();
        let pool = vec![
            ob(&mut ring, "ab", "A", "B", 20),
            ob(&mut ring, "bc", "B", "C", 30),
            ob(&mut ring, "ca", "C", "A", 45),
        ];
        let ledger = Ledger::default();
        let g = aggregate(&pool, &ledger, &opts(&ring, None)).unwrap();
        let f = solve(&g, None).unwrap();
        let notices = emit_notices(&g, &f);
        assert_eq!(notices.len(), 3);
        let entry = |party: &str, id: &str| {
            let n = notices.iter().find(|n| n.party.as_str() == party).unwrap();
            let e = n.entries.iter().find(|e| e.obligation.as_str() == id).unwrap();
            (e.discharged.0, e.remaining.0)
        };
        assert_eq!(entry("A", "ab"), (20, 0));
        assert_eq!(entry("C", "ca"), (20, 25));
        assert!(verify_notices(&g, &f, &notices));

        let applied = apply_flow(&ledger, &g, &f, &ring).unwrap();
        let left: Vec<(&str, u64)> = applied
            .ledger_after
            .open_obligations
            .iter()
            .map(|(k, v)| (k.as_str(), v.outstanding.0))
            .collect();
        assert_eq!(left, vec![("bc", 10), ("ca", 25)]);
    }

    #[test]
    fn middle_of_chain_sees_both_sides() {
        let mut ring = KeyRing::new();
        let mut ledger = Ledger::default();
        ledger.credit(&agent("A"), &asset(UNIT), Amount(20)).unwrap();
        let mut pool = chain(&mut ring, &["A", "B", "C"]);
        pool.push(tender(&mut ring, "t1", "A", 20));
        let g = aggregate(&pool, &ledger, &opts(&ring, Some(bank()))).unwrap();
        let f = solve(&g, None).unwrap();
        let notices = emit_notices(&g, &f);
        let b = notices.iter().find(|n| n.party.as_str() == "B").unwrap();
        let got: Vec<(&str, u64)> = b.entries.iter().map(|e| (e.obligation.as_str(), e.discharged.0)).collect();
        assert_eq!(got, vec![("o1", 20), ("o2", 20)]);
    }

    #[test]
    fn tampered_notices_fail_verification() {
        let mut ring = KeyRing::new();
        let pool = vec![
            ob(&mut ring, "ab", "A", "B", 20),
            ob(&mut ring, "bc", "B", "C", 30),
            ob(&mut ring, "ca", "C", "A", 45),
        ];
        let g = aggregate(&pool, &Ledger::default(), &opts(&ring, None)).unwrap();
        let f = solve(&g, None).unwrap();
        let good = emit_notices(&g, &f);

        let mut extra = good.clone();
        extra[0].entries.push(NoticeEntry {
            obligation: iid("fake"),
            discharged: Amount(1),
            remaining: Amount(0),
        });
        assert!(!verify_notices(&g, &f, &extra));

        let mut partial = good.clone();
        let n = partial.iter_mut().find(|n| n.party.as_str() == "C").unwrap();
        n.entries.retain(|e| e.obligation.as_str() != "ca");
        assert!(!verify_notices(&g, &f, &partial));

        let mut wrong = good;
        wrong[1].entries[0].remaining = Amount(99);
        assert!(!verify_notices(&g, &f, &wrong));
    }

    #[test]
    fn invalid_flow_is_a_no_op() {
        let mut ring = KeyRing::new();
        let pool = vec![ob(&mut ring, "ab", "A", "B", 20), ob(&mut ring, "ba", "B", "A", 20)];
        let ledger = Ledger::default();
        let g = aggregate(&pool, &ledger, &opts(&ring, None)).unwrap();
        let mut f = solve(&g, None).unwrap();
        f.records[0].amount = Amount(21);
        assert!(matches!(apply_flow(&ledger, &g, &f, &ring), Err(SettlementError::Invalid(_))));
    }

    #[test]
    fn fault_hook_aborts() {
        let mut ring = KeyRing::new();
        let pool = vec![ob(&mut ring, "ab", "A", "B", 20), ob(&mut ring, "ba", "B", "A", 20)];
        let ledger = Ledger::default();
        let g = aggregate(&pool, &ledger, &opts(&ring, None)).unwrap();
        let f = solve(&g, None).unwrap();
        let r = apply_flow_with(&ledger, &g, &f, &ring, &mut |s| {
            if s == ApplyStep::Transferred {
                Err(SettlementError::Fault(s))
            } else {
                Ok(())
            }
        });
        assert!(matches!(r, Err(SettlementError::Fault(ApplyStep::Transferred))));
    }

    #[test]
    fn residual_debt_is_carried() {
        let mut ring = KeyRing::new();
        let pool = vec![ob(&mut ring, "ab", "A", "B", 20)];
        let ledger = Ledger::default();
        let g = aggregate(&pool, &ledger, &opts(&ring, None)).unwrap();
        let f = solve(&g, None).unwrap();
        let applied = apply_flow(&ledger, &g, &f, &ring).unwrap();
        assert_eq!(applied.ledger_after.open_debt().unwrap(), Amount(20));
    }

    #[test]
    fn csv_export() {
        let notices = vec![SetOffNotice {
            epoch_id: 1,
            party: agent("A,1"),
            entries: vec![NoticeEntry {
                obligation: iid("o1"),
                discharged: Amount(3),
                remaining: Amount(4),
            }],
        }];
        assert_eq!(notices_csv(&notices), "party,obligation,discharged,remaining\n\"A,1\",o1,3,4\n");
    }
}
