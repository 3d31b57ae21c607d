//! Workloads shared by the solver benchmarks.

use setoff_core::experiments::{generate, with_liquidity, AmountDist, Placement, SyntheticGraphConfig};
use setoff_core::graph::ObligationGraph;

/// A lognormal synthetic network of `n_firms` firms and `n_edges` obligations.
pub fn synthetic(n_firms: usize, n_edges: usize, seed: u64) -> ObligationGraph {
    generate(&SyntheticGraphConfig {
        n_firms,
        n_edges,
        amounts: AmountDist::Lognormal { mu: 4.0, sigma: 1.0 },
        seed,
        placement: Placement::NetDebtors,
    })
    .expect("benchmark sizes are valid")
}

/// `synthetic` plus a liquidity source wired to every net debtor.
pub fn funded(n_firms: usize, n_edges: usize, seed: u64) -> ObligationGraph {
    with_liquidity(&synthetic(n_firms, n_edges, seed), Placement::NetDebtors)
}

/// Sizes benchmarked, as (firms, obligations).
pub const SIZES: [(usize, usize); 3] = [(50, 200), (200, 800), (500, 2000)];
