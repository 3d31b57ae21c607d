//! Synthetic workloads, the liquidity-multiplier curve and a brute-force
//! clearing oracle for small graphs.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{implicit_acceptance_id, AcceptanceEdge, LiquiditySource, ObligationGraph, TenderEdge};
use crate::model::{AgentId, Amount, AssetCode, IntentId, Limit, SYSTEM_ID_PREFIX};
use crate::network::{build_network, ArcKind, ArcOrder, BuildError};
use crate::solver::Solver;

/// Agent that issues the experiment currency.
pub const LIQUIDITY_AGENT: &str = "LIQ";

#[derive(Debug, Error, PartialEq)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("instance outside oracle bounds: {0}")]
    OutOfBounds(String),
    #[error("bad fraction {0:?}")]
    Fraction(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AmountDist {
    /// Integers drawn uniformly from `lo..=hi`.
    Uniform { lo: u64, hi: u64 },
    /// `exp(N(mu, sigma))` rounded to the nearest integer, at least 1.
    Lognormal { mu: f64, sigma: f64 },
}

/// Who tenders liquidity in an experiment. Every firm always accepts the
/// experiment currency without limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Each net debtor tenders up to its net debit position.
    #[default]
    NetDebtors,
    /// Each firm with payables tenders up to its total payables.
    EveryDebtor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGraphConfig {
    pub n_firms: usize,
    pub n_edges: usize,
    pub amounts: AmountDist,
    pub seed: u64,
    #[serde(default)]
    pub placement: Placement,
}

fn firm_name(i: usize, n: usize) -> AgentId {
    let width = n.saturating_sub(1).max(1).to_string().len();
    AgentId::new(format!("F{i:0width$}")).expect("short id")
}

/// A random simple obligation graph: `n_edges` distinct ordered pairs, no
/// self-edges, amounts from the configured distribution. Deterministic in `seed`.
pub fn generate(cfg: &SyntheticGraphConfig) -> Result<ObligationGraph, ExperimentError> {
    let n = cfg.n_firms;
    let pairs = n.checked_mul(n.saturating_sub(1)).ok_or_else(|| ExperimentError::Config("too many firms".into()))?;
    if cfg.n_edges > pairs {
        return Err(ExperimentError::Config(format!(
            "{} edges do not fit in a simple graph on {n} firms",
            cfg.n_edges
        )));
    }
    let lognormal = match cfg.amounts {
        AmountDist::Uniform { lo, hi } if lo == 0 || lo > hi => {
            return Err(ExperimentError::Config("uniform bounds need 1 <= lo <= hi".into()))
        }
        AmountDist::Uniform { .. } => None,
        AmountDist::Lognormal { mu, sigma } => {
            Some(LogNormal::new(mu, sigma).map_err(|e| ExperimentError::Config(e.to_string()))?)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut chosen = index::sample(&mut rng, pairs, cfg.n_edges).into_vec();
    chosen.sort_unstable();

    let mut g = ObligationGraph::new(0, AssetCode::new("USD").expect("valid code"));
    for (k, idx) in chosen.into_iter().enumerate() {
        let i = idx / (n - 1);
        let j = idx % (n - 1);
        let j = if j >= i { j + 1 } else { j };
        let amount = match (&cfg.amounts, &lognormal) {
            (AmountDist::Uniform { lo, hi }, _) => rng.random_range(*lo..=*hi),
            (_, Some(d)) => (d.sample(&mut rng).round() as u64).max(1),
            _ => unreachable!(),
        };
        let id = IntentId::new(format!("e{k}")).expect("short id");
        g.add_obligation(id, firm_name(i, n), firm_name(j, n), Amount(amount), None, false)
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
    }
    Ok(g)
}

/// Adds the experiment liquidity: tenders per `placement` and unlimited
/// acceptances for every firm, all against [`LIQUIDITY_AGENT`].
pub fn with_liquidity(g: &ObligationGraph, placement: Placement) -> ObligationGraph {
    let mut out = g.clone();
    out.tender_edges.clear();
    out.acceptance_edges.clear();
    let source = AgentId::new(LIQUIDITY_AGENT).expect("valid id");
    out.default_source = Some(LiquiditySource {
        agent: source.clone(),
        currency: g.unit.clone(),
    });
    for p in g.net_positions() {
        let max = match placement {
            Placement::NetDebtors if p.net < 0 => Amount((-p.net) as u64),
            Placement::EveryDebtor if !p.payables.is_zero() => p.payables,
            _ => continue,
        };
        out.add_tender_edge(TenderEdge {
            tender: IntentId::new(format!("{SYSTEM_ID_PREFIX}tender:{}", p.agent)).expect("valid id"),
            source: source.clone(),
            sender: p.agent.clone(),
            currency: g.unit.clone(),
            max_amount: max,
            price: None,
        });
    }
    let firms: Vec<AgentId> = g.firms().into_iter().cloned().collect();
    for f in firms {
        out.add_acceptance_edge(AcceptanceEdge {
            acceptance: implicit_acceptance_id(&f),
            origin: f,
            source: source.clone(),
            currency: g.unit.clone(),
            limit: Limit::Infinite,
        });
    }
    out
}

/// A non-negative rational, parsed exactly from decimal or `num/den` text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "zero denominator");
        let g = gcd(num, den);
        Ratio { num: num / g, den: den / g }
    }

    /// `floor(self * x)`.
    pub fn of(self, x: u64) -> u64 {
        (self.num as u128 * x as u128 / self.den as u128) as u64
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_f64())
    }
}

impl FromStr for Ratio {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ExperimentError::Fraction(s.to_string());
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let (n, d) = (n.parse().map_err(|_| bad())?, d.parse::<u64>().map_err(|_| bad())?);
            if d == 0 {
                return Err(bad());
            }
            return Ok(Ratio::new(n, d));
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 18 || (int.is_empty() && frac.is_empty()) {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let num = int.checked_mul(den).and_then(|x| x.checked_add(frac)).ok_or_else(bad)?;
        Ok(Ratio::new(num, den))
    }
}

/// Parses `"0,0.01,0.02"` or `"1/4,1/2"`.
pub fn parse_fractions(list: &str) -> Result<Vec<Ratio>, ExperimentError> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiplierPoint {
    pub liquidity_fraction: Ratio,
    pub budget: Amount,
    pub cleared_debt: Amount,
    pub total_debt: Amount,
    /// `cleared_debt / total_debt`.
    pub debt_cleared_fraction: Ratio,
    /// Mean over firms with payables of cleared payables / payables. A mean of
    /// ratios with unrelated denominators, so kept as a float.
    pub avg_ap_cleared_fraction: f64,
}

/// Clears `g` once per fraction with budget `floor(fraction * total_debt)`.
///
/// Liquidity is placed with `placement` (any tenders already on `g` are
/// replaced). The set-off component is computed once and shared by every
/// point; only the funded chains are recomputed.
pub fn multiplier_curve(
    g: &ObligationGraph,
    fractions: &[Ratio],
    placement: Placement,
) -> Result<Vec<MultiplierPoint>, ExperimentError> {
    let lg = with_liquidity(g, placement);
    let total = lg.total_debt().map_err(|e| ExperimentError::Config(e.to_string()))?;
    let net = build_network(&lg, None, ArcOrder::Canonical)?;
    let mut base = Solver::new(&net);
    base.cancel_cycles();

    let payables: BTreeMap<&AgentId, u64> = lg
        .net_positions()
        .into_iter()
        .filter(|p| !p.payables.is_zero())
        .map(|p| (p.agent, p.payables.0))
        .collect();

    let mut out = Vec::with_capacity(fractions.len());
    for &fr in fractions {
        let budget = fr.of(total.0);
        let mut s = base.clone();
        s.fund_chains(Some(budget));
        let sol = s.solution();
        let mut cleared_by: BTreeMap<&AgentId, u64> = BTreeMap::new();
        for (arc, &f) in net.arcs.iter().zip(&sol.arc_flows) {
            if let ArcKind::Obligation { debtor, .. } = &arc.kind {
                *cleared_by.entry(debtor).or_default() += f as u64;
            }
        }
        let avg = if payables.is_empty() {
            1.0
        } else {
            payables
                .iter()
                .map(|(a, p)| cleared_by.get(a).copied().unwrap_or(0) as f64 / *p as f64)
                .sum::<f64>()
                / payables.len() as f64
        };
        out.push(MultiplierPoint {
            liquidity_fraction: fr,
            budget: Amount(budget),
            cleared_debt: sol.cleared_debt,
            total_debt: total,
            debt_cleared_fraction: if total.is_zero() {
                Ratio::new(1, 1)
            } else {
                Ratio::new(sol.cleared_debt.0, total.0)
            },
            avg_ap_cleared_fraction: avg,
        });
    }
    Ok(out)
}

/// `liquidity_fraction,debt_cleared_fraction,avg_ap_cleared_fraction` with a header.
pub fn curve_csv(points: &[MultiplierPoint]) -> String {
    let mut out = String::from("liquidity_fraction,debt_cleared_fraction,avg_ap_cleared_fraction\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{}\n",
            p.liquidity_fraction, p.debt_cleared_fraction, p.avg_ap_cleared_fraction
        ));
    }
    out
}

pub const ORACLE_MAX_NODES: usize = 5;
pub const ORACLE_MAX_AMOUNT: u64 = 3;
/// Largest search space accepted: that of a complete 5-node graph with every
/// amount at [`ORACLE_MAX_AMOUNT`].
pub const ORACLE_MAX_SPACE: u128 = 4u128.pow(20);

/// Largest total discharge over all integer sub-flows `0 <= x_e <= amount_e`
/// on the obligation edges of `g`, where each node may receive an injection
/// covering its deficit `max(0, out - in)`, surpluses are absorbed, and the
/// injections sum to at most `budget`.
///
/// Liquidity edges on `g` are ignored: the oracle assumes every firm may
/// tender and every firm accepts. Dynamic programming over per-node
/// imbalance vectors, edge by edge.
///
/// Accepts at most [`ORACLE_MAX_NODES`] firms, and a search space
/// `prod(amount_e + 1)` no larger than an instance with every amount at
/// [`ORACLE_MAX_AMOUNT`] could have.
pub fn brute_force_oracle(g: &ObligationGraph, budget: u64) -> Result<Amount, ExperimentError> {
    let firms: Vec<&AgentId> = g.firms().into_iter().collect();
    if firms.len() > ORACLE_MAX_NODES {
        return Err(ExperimentError::OutOfBounds(format!("{} nodes", firms.len())));
    }
    let space = g
        .edges
        .values()
        .try_fold(1u128, |acc, e| acc.checked_mul(e.amount.0 as u128 + 1).filter(|&x| x <= ORACLE_MAX_SPACE));
    if space.is_none() {
        return Err(ExperimentError::OutOfBounds("search space too large".into()));
    }
    let pos = |a: &AgentId| firms.iter().position(|f| *f == a).expect("firm");

    // state: out - in per node -> best discharge so far
    let mut states: HashMap<[i64; ORACLE_MAX_NODES], u64> = HashMap::from([([0; ORACLE_MAX_NODES], 0)]);
    for ((d, c), e) in &g.edges {
        let (i, j) = (pos(d), pos(c));
        let mut next: HashMap<[i64; ORACLE_MAX_NODES], u64> = HashMap::with_capacity(states.len() * 2);
        for (state, cleared) in &states {
            for x in 0..=e.amount.0 {
                let mut s = *state;
                s[i] += x as i64;
                s[j] -= x as i64;
                let v = cleared + x;
                let slot = next.entry(s).or_insert(v);
                *slot = (*slot).max(v);
            }
        }
        states = next;
    }
    let best = states
        .iter()
        .filter(|(s, _)| s.iter().map(|&x| x.max(0) as u64).sum::<u64>() <= budget)
        .map(|(_, &v)| v)
        .max()
        .unwrap_or(0);
    Ok(Amount(best))
}
