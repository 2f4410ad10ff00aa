//! Wasserstein-infinity between discrete measures and the class-conditional
//! shift `rho`.
//!
//! The value computed is the Kantorovich form: the smallest `tau` such that
//! some coupling moves no mass farther than `tau`. It never exceeds the Monge
//! value and coincides with it whenever a transport map exists.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::distributions::{DiscreteDistribution, Label, WeightedCloud};
use crate::error::{arg, Error, Result};
use crate::par;

/// Largest denominator accepted when turning masses into rationals.
pub const DENOMINATOR_CAP: u64 = 1_000_000;

const MASS_TOL: f64 = 1e-9;

/// Feasibility instance at a fixed threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CostThresholdProblem {
    pub supply: Vec<u64>,
    pub demand: Vec<u64>,
    pub cost: Vec<Vec<f64>>,
    pub tau: f64,
}

impl CostThresholdProblem {
    /// Max-flow through edges of cost at most `tau`; feasible iff it carries
    /// all of the supply. Returns the flow matrix when feasible.
    pub fn solve(&self) -> Option<Vec<Vec<u64>>> {
        let total: u64 = self.supply.iter().sum();
        let (value, flows) = max_flow(&self.supply, &self.demand, |i, j| self.cost[i][j] <= self.tau);
        (value == total).then_some(flows)
    }

    pub fn feasible(&self) -> bool {
        self.solve().is_some()
    }
}

/// One entry of a transport plan between atom `from` of P and atom `to` of Q.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingEntry {
    pub from: usize,
    pub to: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub winf: f64,
    pub entries: Vec<CouplingEntry>,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn cost_matrix(p: &WeightedCloud, q: &WeightedCloud) -> Vec<Vec<f64>> {
    par::map(&p.points, |x| q.points.iter().map(|y| euclid(x, y)).collect())
}

fn distinct_costs(cost: &[Vec<f64>]) -> Vec<f64> {
    let mut v: Vec<f64> = cost.iter().flatten().copied().collect();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite costs"));
    v.dedup();
    v
}

/// Best rational approximation `num/den` with `den <= cap`, by continued
/// fractions.
pub fn rationalize(x: f64, cap: u64) -> Result<(u64, u64)> {
    if !(x.is_finite() && x >= 0.0) {
        return arg(format!("mass {x} is not a nonnegative real"));
    }
    let (mut h0, mut h1) = (0u64, 1u64);
    let (mut k0, mut k1) = (1u64, 0u64);
    let mut r = x;
    let mut best = (x.round() as u64, 1u64);
    for _ in 0..64 {
        let a = r.floor();
        if a > 1e15 {
            break;
        }
        let a = a as u64;
        let h2 = a.saturating_mul(h1).saturating_add(h0);
        let k2 = a.saturating_mul(k1).saturating_add(k0);
        if k2 > cap {
            let err = (x - best.0 as f64 / best.1 as f64).abs();
            if err > MASS_TOL * x.max(1e-3) {
                return Err(Error::Precision { mass: x, denominator: k2, cap });
            }
            return Ok(best);
        }
        best = (h2, k2);
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        let frac = r - a as f64;
        if (x - h2 as f64 / k2 as f64).abs() <= 1e-15 * x.max(1.0) || frac < 1e-12 {
            break;
        }
        r = 1.0 / frac;
    }
    Ok(best)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Integer masses over a common denominator.
fn scale_masses(p: &[f64], q: &[f64]) -> Result<(Vec<u64>, Vec<u64>)> {
    let rp: Vec<(u64, u64)> = p.iter().map(|&m| rationalize(m, DENOMINATOR_CAP)).collect::<Result<_>>()?;
    let rq: Vec<(u64, u64)> = q.iter().map(|&m| rationalize(m, DENOMINATOR_CAP)).collect::<Result<_>>()?;
    let mut lcd: u64 = 1;
    for &(_, d) in rp.iter().chain(&rq) {
        let g = gcd(lcd, d);
        lcd = (lcd / g).checked_mul(d).filter(|&v| v <= 1 << 52).ok_or(Error::Precision {
            mass: 0.0,
            denominator: d,
            cap: DENOMINATOR_CAP,
        })?;
    }
    let sp: Vec<u64> = rp.iter().map(|&(n, d)| n * (lcd / d)).collect();
    let sq: Vec<u64> = rq.iter().map(|&(n, d)| n * (lcd / d)).collect();
    if sp.iter().sum::<u64>() != sq.iter().sum::<u64>() {
        return arg("masses do not balance after rational scaling");
    }
    Ok((sp, sq))
}

/// Dinic max-flow on source -> P atoms -> Q atoms -> sink.
fn max_flow(supply: &[u64], demand: &[u64], edge: impl Fn(usize, usize) -> bool) -> (u64, Vec<Vec<u64>>) {
    let np = supply.len();
    let nq = demand.len();
    let n = np + nq + 2;
    let (s, t) = (np + nq, np + nq + 1);
    struct E {
        to: usize,
        cap: u64,
    }
    let mut edges: Vec<E> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut add = |edges: &mut Vec<E>, u: usize, v: usize, c: u64| {
        adj[u].push(edges.len());
        edges.push(E { to: v, cap: c });
        adj[v].push(edges.len());
        edges.push(E { to: u, cap: 0 });
    };
    let inf: u64 = supply.iter().sum::<u64>().max(1);
    for (i, &a) in supply.iter().enumerate() {
        add(&mut edges, s, i, a);
    }
    let mut mid = vec![vec![usize::MAX; nq]; np];
    for i in 0..np {
        for j in 0..nq {
            if edge(i, j) {
                mid[i][j] = edges.len();
                add(&mut edges, i, np + j, inf);
            }
        }
    }
    for (j, &b) in demand.iter().enumerate() {
        add(&mut edges, np + j, t, b);
    }

    let mut flow = 0u64;
    loop {
        let mut level = vec![usize::MAX; n];
        level[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &e in &adj[u] {
                if edges[e].cap > 0 && level[edges[e].to] == usize::MAX {
                    level[edges[e].to] = level[u] + 1;
                    queue.push_back(edges[e].to);
                }
            }
        }
        if level[t] == usize::MAX {
            break;
        }
        let mut it = vec![0usize; n];
        loop {
            let pushed = dfs(&mut edges, &adj, &level, &mut it, s, t, u64::MAX);
            if pushed == 0 {
                break;
            }
            flow += pushed;
        }
    }

    fn dfs(
        edges: &mut Vec<E>,
        adj: &[Vec<usize>],
        level: &[usize],
        it: &mut [usize],
        u: usize,
        t: usize,
        f: u64,
    ) -> u64 {
        if u == t {
            return f;
        }
        while it[u] < adj[u].len() {
            let e = adj[u][it[u]];
            let v = edges[e].to;
            if edges[e].cap > 0 && level[v] == level[u] + 1 {
                let got = dfs(edges, adj, level, it, v, t, f.min(edges[e].cap));
                if got > 0 {
                    edges[e].cap -= got;
                    edges[e ^ 1].cap += got;
                    return got;
                }
            }
            it[u] += 1;
        }
        0
    }

    let flows = (0..np)
        .map(|i| (0..nq).map(|j| if mid[i][j] == usize::MAX { 0 } else { edges[mid[i][j] ^ 1].cap }).collect())
        .collect();
    (flow, flows)
}

/// Hopcroft-Karp perfect-matching test on the bipartite graph `edge(i, j)`.
fn has_perfect_matching(n: usize, edge: impl Fn(usize, usize) -> bool) -> Option<Vec<usize>> {
    let adj: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| edge(i, j)).collect()).collect();
    const NIL: usize = usize::MAX;
    let mut match_l = vec![NIL; n];
    let mut match_r = vec![NIL; n];
    let mut dist = vec![0usize; n];
    let bfs = |match_l: &[usize], match_r: &[usize], dist: &mut [usize]| -> bool {
        let mut queue = VecDeque::new();
        for u in 0..n {
            if match_l[u] == NIL {
                dist[u] = 0;
                queue.push_back(u);
            } else {
                dist[u] = usize::MAX;
            }
        }
        let mut found = false;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                let w = match_r[v];
                if w == NIL {
                    found = true;
                } else if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        found
    };
    fn augment(u: usize, adj: &[Vec<usize>], match_l: &mut [usize], match_r: &mut [usize], dist: &mut [usize]) -> bool {
        for &v in &adj[u] {
            let w = match_r[v];
            if w == usize::MAX || (dist[w] == dist[u] + 1 && augment(w, adj, match_l, match_r, dist)) {
                match_l[u] = v;
                match_r[v] = u;
                return true;
            }
        }
        dist[u] = usize::MAX;
        false
    }
    let mut size = 0;
    while bfs(&match_l, &match_r, &mut dist) {
        for u in 0..n {
            if match_l[u] == NIL && augment(u, &adj, &mut match_l, &mut match_r, &mut dist) {
                size += 1;
            }
        }
    }
    (size == n).then_some(match_l)
}

fn check_clouds(p: &WeightedCloud, q: &WeightedCloud) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return arg("W-infinity of an empty measure");
    }
    let d = p.points[0].len();
    for x in p.points.iter().chain(&q.points) {
        if x.len() != d {
            return Err(Error::Dimension { expected: d, got: x.len() });
        }
    }
    let (tp, tq) = (p.total_mass(), q.total_mass());
    if (tp - 1.0).abs() > MASS_TOL || (tq - 1.0).abs() > MASS_TOL {
        return arg(format!("unbalanced masses: totals {tp} and {tq}, expected 1"));
    }
    Ok(())
}

fn is_uniform(c: &WeightedCloud) -> bool {
    let m = 1.0 / c.len() as f64;
    c.masses.iter().all(|&x| (x - m).abs() <= 1e-12)
}

/// Smallest index in `costs` whose threshold is feasible.
fn bottleneck(costs: &[f64], feasible: impl Fn(f64) -> bool) -> usize {
    let (mut lo, mut hi) = (0usize, costs.len() - 1);
    debug_assert!(feasible(costs[hi]));
    while lo < hi {
        let mid = (lo + hi) / 2;
        if feasible(costs[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// W-infinity between two discrete measures with the optimal coupling.
pub fn winf_coupling(p: &WeightedCloud, q: &WeightedCloud) -> Result<Coupling> {
    check_clouds(p, q)?;
    let cost = cost_matrix(p, q);
    let costs = distinct_costs(&cost);
    if p.len() == q.len() && is_uniform(p) && is_uniform(q) {
        let n = p.len();
        let k = bottleneck(&costs, |tau| has_perfect_matching(n, |i, j| cost[i][j] <= tau).is_some());
        let tau = costs[k];
        let matching = has_perfect_matching(n, |i, j| cost[i][j] <= tau).expect("feasible at optimum");
        let entries = matching
            .into_iter()
            .enumerate()
            .map(|(i, j)| CouplingEntry { from: i, to: j, mass: 1.0 / n as f64 })
            .collect();
        return Ok(Coupling { winf: tau, entries });
    }
    let (supply, demand) = scale_masses(&p.masses, &q.masses)?;
    let total: u64 = supply.iter().sum();
    let problem =
        |tau: f64| CostThresholdProblem { supply: supply.clone(), demand: demand.clone(), cost: cost.clone(), tau };
    let k = bottleneck(&costs, |tau| problem(tau).feasible());
    let tau = costs[k];
    let flows = problem(tau).solve().expect("feasible at optimum");
    let mut entries = Vec::new();
    for (i, row) in flows.iter().enumerate() {
        for (j, &f) in row.iter().enumerate() {
            if f > 0 {
                entries.push(CouplingEntry { from: i, to: j, mass: f as f64 / total as f64 });
            }
        }
    }
    Ok(Coupling { winf: tau, entries })
}

/// Kantorovich W-infinity between two discrete measures of total mass one.
pub fn winf_discrete(p: &WeightedCloud, q: &WeightedCloud) -> Result<f64> {
    Ok(winf_coupling(p, q)?.winf)
}

/// `max_y W-infinity(P_{X|Y=y}, Q_{X|Y=y})`. With `no_label_shift`, the class
/// marginals must agree within 1e-12.
pub fn rho_conditional(p: &DiscreteDistribution, q: &DiscreteDistribution, no_label_shift: bool) -> Result<f64> {
    if no_label_shift {
        let (a, b) = (p.class_mass(Label::Pos), q.class_mass(Label::Pos));
        if (a - b).abs() > 1e-12 {
            return Err(Error::AssumptionViolation(format!("label marginals differ: P(Y=1) = {a} vs {b}")));
        }
    }
    let mut rho: f64 = 0.0;
    for y in [Label::Neg, Label::Pos] {
        let (Some(cp), Some(cq)) = (p.conditional(y), q.conditional(y)) else {
            return arg(format!("class {} absent from one distribution", i8::from(y)));
        };
        rho = rho.max(winf_discrete(&cp, &cq)?);
    }
    Ok(rho)
}

/// Oracle for small supports: checks every distinct cost as a threshold
/// using the supply-demand condition over all subsets of P atoms.
pub fn winf_bruteforce(p: &WeightedCloud, q: &WeightedCloud) -> Result<f64> {
    check_clouds(p, q)?;
    if p.len() + q.len() > 8 {
        return arg(format!("brute force limited to 8 atoms, got {}", p.len() + q.len()));
    }
    let cost = cost_matrix(p, q);
    for tau in distinct_costs(&cost) {
        let ok = (1u32..(1 << p.len())).all(|set| {
            let mass: f64 = (0..p.len()).filter(|i| set >> i & 1 == 1).map(|i| p.masses[i]).sum();
            let reach: f64 = (0..q.len())
                .filter(|&j| (0..p.len()).any(|i| set >> i & 1 == 1 && cost[i][j] <= tau))
                .map(|j| q.masses[j])
                .sum();
            mass <= reach + 1e-12
        });
        if ok {
            return Ok(tau);
        }
    }
    unreachable!("the largest cost is always feasible")
}

/// Consecutive `rho` values of a sequence if each is at most `rho_max` and
/// `rho_max < 1/R`; otherwise an assumption-violation error.
pub fn gradual_shift_gate(domains: &[DiscreteDistribution], r: f64, rho_max: f64) -> Result<Vec<f64>> {
    if !(rho_max * r < 1.0) {
        return Err(Error::AssumptionViolation(format!("rho_max = {rho_max} is not below 1/R = {}", 1.0 / r)));
    }
    let rhos: Vec<f64> = domains.windows(2).map(|w| rho_conditional(&w[0], &w[1], true)).collect::<Result<_>>()?;
    if let Some((t, v)) = rhos.iter().enumerate().find(|(_, v)| **v > rho_max) {
        return Err(Error::AssumptionViolation(format!("rho(P_{t}, P_{}) = {v} exceeds {rho_max}", t + 1)));
    }
    Ok(rhos)
}
