use setoff_core::ascertain::KeyRing;
use setoff_core::engine::{Engine, EngineConfig, EpochState, RunOptions};
use setoff_core::fixtures::*;
use setoff_core::graph::aggregate;
use setoff_core::model::{Amount, Ledger, Limit, Price};
use setoff_core::records::cleared_debt;
use setoff_core::settlement::apply_flow;
use setoff_core::solver::solve;
use setoff_core::validator::is_valid_flow;

#[test]
fn priced_foreign_tender_pays_in_its_own_currency() {
    let mut ring = KeyRing::new();
    let pool = vec![
        ob(&mut ring, "ab", "A", "B", 30),
        // 15 EUR at 3/2 USD each is worth floor(22.5) = 22 USD.
        foreign_tender(&mut ring, "t", "A", "ECB", "EUR", 15, Some(Price::new(3, 2))),
        deposit(&mut ring, "d", "B", "ECB", "EUR", Limit::Infinite),
    ];
    let mut ledger = Ledger::default();
    ledger.credit(&agent("A"), &asset("EUR"), Amount(15)).unwrap();
    let g = aggregate(&pool, &ledger, &opts(&ring, None)).unwrap();
    let f = solve(&g, None).unwrap();
    assert!(is_valid_flow(&g, &f, &ledger, &ring).valid);
    assert_eq!(cleared_debt(&g, &f), Amount(22));
    assert_eq!(f.transfers.len(), 1);
    assert_eq!(f.transfers[0].asset, asset("EUR"));
    assert_eq!(f.transfers[0].amount, Amount(15));

    let applied = apply_flow(&ledger, &g, &f, &ring).unwrap();
    assert_eq!(applied.ledger_after.balance(&agent("B"), &asset("EUR")), Amount(15));
    assert_eq!(applied.ledger_after.open_debt().unwrap(), Amount(8));
}

#[test]
fn insufficient_foreign_balance_caps_the_tender() {
    let mut ring = KeyRing::new();
    let pool = vec![
        ob(&mut ring, "ab", "A", "B", 30),
        foreign_tender(&mut ring, "t", "A", "ECB", "EUR", 100, Some(Price::new(2, 1))),
        deposit(&mut ring, "d", "B", "ECB", "EUR", Limit::Infinite),
    ];
    let mut ledger = Ledger::default();
    ledger.credit(&agent("A"), &asset("EUR"), Amount(5)).unwrap();
    let g = aggregate(&pool, &ledger, &opts(&ring, None)).unwrap();
    let f = solve(&g, None).unwrap();
    assert!(is_valid_flow(&g, &f, &ledger, &ring).valid);
    assert_eq!(cleared_debt(&g, &f), Amount(10));
    assert_eq!(f.transfers[0].amount, Amount(5));
}

#[test]
fn credit_draw_carries_into_the_next_epoch_and_clears_there() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ring = KeyRing::new();
    let first = vec![
        ob(&mut ring, "o1", "Alice", "Bob", 20),
        ob(&mut ring, "o2", "Bob", "Carol", 20),
        overdraft(&mut ring, "t1", "Alice", "Carol", 20),
        repayment(&mut ring, "r1", "Carol", "Alice", 20),
    ];
    let second = vec![ob(&mut ring, "o3", "Carol", "Alice", 20)];
    let e = Engine::init(
        tmp.path(),
        EngineConfig {
            unit: asset(UNIT),
            default_source: None,
            quota: None,
        },
        ring,
        Ledger::default(),
    )
    .unwrap();

    for i in first {
        e.submit(i).unwrap();
    }
    e.freeze().unwrap();
    let r1 = e.run(&RunOptions::default()).unwrap();
    assert_eq!(r1.state, EpochState::Applied);
    assert_eq!(r1.cleared_debt, Amount(40));
    assert_eq!(r1.new_obligations, 1);
    let carried = e.ledger().unwrap().open_obligations;
    assert_eq!(carried.len(), 1);
    let draw = &carried.values().next().unwrap().obligation;
    assert_eq!((&draw.debtor, &draw.creditor), (&agent("Alice"), &agent("Carol")));

    for i in second {
        assert_eq!(e.submit(i).unwrap().epoch_id, 2);
    }
    let (_, nid, total) = e.preview().unwrap();
    assert_eq!((nid, total), (Amount(0), Amount(40)));
    e.freeze().unwrap();
    let r2 = e.run(&RunOptions::default()).unwrap();
    assert_eq!(r2.epoch_id, 2);
    assert_eq!(r2.cleared_debt, Amount(40));
    assert!(e.ledger().unwrap().open_obligations.is_empty());
}
