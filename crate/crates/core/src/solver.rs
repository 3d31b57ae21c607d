//! Min-cost flow clearing.
//!
//! Two phases over one residual network:
//!
//! 1. [`Solver::cancel_cycles`]: Bellman-Ford negative-cycle canceling. With no
//!    liquidity the only negative cycles are set-off cycles, so the result is
//!    the largest zero-liquidity discharge.
//! 2. [`Solver::fund_chains`]: successive shortest paths with node potentials
//!    from each currency's source to its sink, most negative path first, until
//!    no path clears debt or the budget runs out. Currencies are processed in
//!    ascending code order over the shared residual.
//!
//! Ties are broken by arc order, so a fixed [`ArcOrder`](crate::network::ArcOrder)
//! gives a fixed solution.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::Serialize;

use crate::graph::ObligationGraph;
use crate::model::{Amount, AssetCode, SettlementFlow};
use crate::network::{build_network, ArcKind, ArcOrder, BuildError, FlowNetwork};
use crate::records::settlement_from_solution;

const NONE: usize = usize::MAX;
const INF: i64 = i64::MAX / 2;

/// Integer flow on every arc of a [`FlowNetwork`], with summary figures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlowSolution {
    /// Indexed by arc id.
    pub arc_flows: Vec<i64>,
    pub cleared_debt: Amount,
    /// Source outflow per currency, in unit-of-account minor units.
    pub liquidity_used: BTreeMap<AssetCode, Amount>,
    /// Negated total cost.
    pub objective: i64,
}

impl FlowSolution {
    fn from_flows(net: &FlowNetwork, arc_flows: Vec<i64>) -> Self {
        let mut cleared = 0i64;
        let mut cost = 0i64;
        let mut liquidity: BTreeMap<AssetCode, Amount> = BTreeMap::new();
        for (arc, &f) in net.arcs.iter().zip(&arc_flows) {
            cost += arc.cost * f;
            match &arc.kind {
                ArcKind::Obligation { .. } => cleared += f,
                ArcKind::Tender(_) => {
                    let c = arc.currency.clone().expect("tender arcs carry a currency");
                    let e = liquidity.entry(c).or_default();
                    *e = Amount(e.0 + f as u64);
                }
                _ => {}
            }
        }
        FlowSolution {
            arc_flows,
            cleared_debt: Amount(cleared as u64),
            liquidity_used: liquidity,
            objective: -cost,
        }
    }

    /// Total liquidity injected across currencies.
    pub fn total_liquidity(&self) -> Amount {
        Amount(self.liquidity_used.values().map(|a| a.0).sum())
    }

    /// `self - earlier`, arc by arc.
    pub fn minus(&self, net: &FlowNetwork, earlier: &FlowSolution) -> FlowSolution {
        let flows = self
            .arc_flows
            .iter()
            .zip(&earlier.arc_flows)
            .map(|(a, b)| a - b)
            .collect();
        FlowSolution::from_flows(net, flows)
    }
}

/// Residual network over a borrowed [`FlowNetwork`].
///
/// Arc `i` owns residual edges `2i` (forward) and `2i + 1` (backward).
#[derive(Debug, Clone)]
pub struct Solver<'n> {
    net: &'n FlowNetwork,
    head: Vec<usize>,
    tail: Vec<usize>,
    residual: Vec<i64>,
    cost: Vec<i64>,
    out: Vec<Vec<usize>>,
}

impl<'n> Solver<'n> {
    pub fn new(net: &'n FlowNetwork) -> Self {
        let m = net.arcs.len();
        let mut head = Vec::with_capacity(2 * m);
        let mut tail = Vec::with_capacity(2 * m);
        let mut residual = Vec::with_capacity(2 * m);
        let mut cost = Vec::with_capacity(2 * m);
        let mut out = vec![Vec::new(); net.nodes.len()];
        for (i, a) in net.arcs.iter().enumerate() {
            tail.extend([a.from, a.to]);
            head.extend([a.to, a.from]);
            residual.extend([a.capacity, 0]);
            cost.extend([a.cost, -a.cost]);
            out[a.from].push(2 * i);
            out[a.to].push(2 * i + 1);
        }
        Solver {
            net,
            head,
            tail,
            residual,
            cost,
            out,
        }
    }

    pub fn network(&self) -> &FlowNetwork {
        self.net
    }

    /// Current flow on every arc.
    pub fn solution(&self) -> FlowSolution {
        let flows = (0..self.net.arcs.len()).map(|i| self.residual[2 * i + 1]).collect();
        FlowSolution::from_flows(self.net, flows)
    }

    fn push(&mut self, e: usize, amount: i64) {
        self.residual[e] -= amount;
        self.residual[e ^ 1] += amount;
    }

    /// Cancels negative residual cycles until none remain; returns the flow so far.
    pub fn cancel_cycles(&mut self) -> FlowSolution {
        while let Some(cycle) = self.find_negative_cycle() {
            let delta = cycle.iter().map(|&e| self.residual[e]).min().expect("non-empty cycle");
            for &e in &cycle {
                self.push(e, delta);
            }
        }
        self.solution()
    }

    /// Bellman-Ford from a virtual root, checking the parent graph for a cycle
    /// after every pass. Any cycle there has negative cost.
    fn find_negative_cycle(&self) -> Option<Vec<usize>> {
        let n = self.net.nodes.len();
        let mut dist = vec![0i64; n];
        let mut parent = vec![NONE; n];
        for _ in 0..=n {
            let mut relaxed = false;
            for e in 0..self.residual.len() {
                if self.residual[e] <= 0 {
                    continue;
                }
                let (u, v) = (self.tail[e], self.head[e]);
                let nd = dist[u] + self.cost[e];
                if nd < dist[v] {
                    dist[v] = nd;
                    parent[v] = e;
                    relaxed = true;
                }
            }
            if !relaxed {
                return None;
            }
            if let Some(c) = self.parent_cycle(&parent) {
                return Some(c);
            }
        }
        unreachable!("bellman-ford kept relaxing without a parent cycle")
    }

    fn parent_cycle(&self, parent: &[usize]) -> Option<Vec<usize>> {
        let n = parent.len();
        let mut stamp = vec![NONE; n];
        for start in 0..n {
            let mut v = start;
            while v != NONE && stamp[v] == NONE {
                stamp[v] = start;
                v = match parent[v] {
                    NONE => NONE,
                    e => self.tail[e],
                };
            }
            if v != NONE && stamp[v] == start {
                // v lies on a cycle; walk it once.
                let mut cycle = Vec::new();
                let mut x = v;
                loop {
                    let e = parent[x];
                    cycle.push(e);
                    x = self.tail[e];
                    if x == v {
                        break;
                    }
                }
                cycle.reverse();
                return Some(cycle);
            }
        }
        None
    }

    /// Routes liquidity from sources to sinks along debt-clearing paths.
    /// Returns the increment over the flow before the call.
    pub fn fund_chains(&mut self, budget: Option<u64>) -> FlowSolution {
        let before = self.solution();
        let mut remaining = budget.map(|b| b as i64).unwrap_or(INF);
        for circuit in self.net.circuits.clone() {
            if remaining <= 0 {
                break;
            }
            let used = self.augment_circuit(circuit.source, circuit.sink, remaining);
            remaining -= used;
        }
        self.solution().minus(self.net, &before)
    }

    /// Shortest-path distances from `s` over residual edges (SPFA, FIFO order).
    fn potentials_from(&self, s: usize) -> Vec<i64> {
        let n = self.net.nodes.len();
        let mut dist = vec![INF; n];
        let mut queued = vec![false; n];
        let mut q = VecDeque::from([s]);
        dist[s] = 0;
        queued[s] = true;
        while let Some(u) = q.pop_front() {
            queued[u] = false;
            for &e in &self.out[u] {
                if self.residual[e] <= 0 {
                    continue;
                }
                let v = self.head[e];
                let nd = dist[u] + self.cost[e];
                if nd < dist[v] {
                    dist[v] = nd;
                    if !queued[v] {
                        queued[v] = true;
                        q.push_back(v);
                    }
                }
            }
        }
        dist
    }

    fn augment_circuit(&mut self, s: usize, t: usize, limit: i64) -> i64 {
        let n = self.net.nodes.len();
        let mut pot = self.potentials_from(s);
        let mut sent = 0i64;
        let mut dist = vec![INF; n];
        let mut parent = vec![NONE; n];
        while sent < limit {
            dist.fill(INF);
            parent.fill(NONE);
            dist[s] = 0;
            let mut heap = BinaryHeap::from([Reverse((0i64, s))]);
            while let Some(Reverse((d, u))) = heap.pop() {
                if d > dist[u] {
                    continue;
                }
                for &e in &self.out[u] {
                    if self.residual[e] <= 0 {
                        continue;
                    }
                    let v = self.head[e];
                    let rc = self.cost[e] + pot[u] - pot[v];
                    debug_assert!(rc >= 0, "negative reduced cost");
                    if d + rc < dist[v] {
                        dist[v] = d + rc;
                        parent[v] = e;
                        heap.push(Reverse((dist[v], v)));
                    }
                }
            }
            if dist[t] >= INF {
                break;
            }
            let path_cost = dist[t] + pot[t] - pot[s];
            if path_cost >= 0 {
                break;
            }
            let mut delta = limit - sent;
            let mut v = t;
            while v != s {
                let e = parent[v];
                delta = delta.min(self.residual[e]);
                v = self.tail[e];
            }
            let mut v = t;
            while v != s {
                let e = parent[v];
                self.push(e, delta);
                v = self.tail[e];
            }
            sent += delta;
            for v in 0..n {
                if dist[v] < INF {
                    pot[v] += dist[v];
                }
            }
        }
        sent
    }
}

/// Zero-liquidity set-off component of `net`.
pub fn cancel_cycles(net: &FlowNetwork) -> FlowSolution {
    Solver::new(net).cancel_cycles()
}

/// Cycle canceling followed by funded chains; the full flow on `net`.
pub fn solve_network(net: &FlowNetwork) -> FlowSolution {
    let mut s = Solver::new(net);
    s.cancel_cycles();
    s.fund_chains(net.budget);
    s.solution()
}

/// Solver output with the network it was computed on.
#[derive(Debug, Clone)]
pub struct Solved {
    pub network: FlowNetwork,
    pub solution: FlowSolution,
    pub flow: SettlementFlow,
}

/// Runs the clearing solver on `g` and emits the settlement flow.
pub fn solve_with(g: &ObligationGraph, budget: Option<Amount>, order: ArcOrder) -> Result<Solved, BuildError> {
    let network = build_network(g, budget, order)?;
    let solution = solve_network(&network);
    let flow = settlement_from_solution(g, &network, &solution);
    Ok(Solved {
        network,
        solution,
        flow,
    })
}

/// [`solve_with`] in canonical arc order, returning only the settlement flow.
pub fn solve(g: &ObligationGraph, budget: Option<Amount>) -> Result<SettlementFlow, BuildError> {
    solve_with(g, budget, ArcOrder::Canonical).map(|s| s.flow)
}
