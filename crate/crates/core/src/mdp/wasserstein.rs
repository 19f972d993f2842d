//! Exact 1-Wasserstein distances between distributions on finite metric
//! spaces.

use super::Metric;
use crate::error::{Error, Result};

/// Largest support (after dropping zero atoms) solved by network flow.
pub const MAX_FLOW_SUPPORT: usize = 64;
const MASS_TOL: f64 = 1e-9;
const EPS: f64 = 1e-15;

/// `W1(p, q)` under `metric`. Index metrics use the CDF formula, the 0/1
/// metric uses total variation, anything else an exact min-cost flow.
pub fn wasserstein1(p: &[f64], q: &[f64], metric: &Metric) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    if metric.size() != p.len() {
        return Err(Error::InvalidMetric(format!(
            "metric has size {}, distributions have length {}",
            metric.size(),
            p.len()
        )));
    }
    check_mass(p)?;
    check_mass(q)?;
    match metric {
        Metric::Index(_) => Ok(w1_cdf(p, q)),
        Metric::Discrete(_) => Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()),
        _ => w1_flow(p, q, |i, j| metric.dist(i, j)),
    }
}

/// `W1` with an explicit cost matrix (validated as a metric first).
pub fn wasserstein1_matrix(p: &[f64], q: &[f64], cost: &[Vec<f64>]) -> Result<f64> {
    let metric = Metric::matrix(cost.to_vec())?;
    wasserstein1(p, q, &metric)
}

fn check_mass(p: &[f64]) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::NotADistribution(f64::NAN));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > MASS_TOL {
        return Err(Error::NotADistribution(sum));
    }
    Ok(())
}

/// `sum_i |F_p(i) - F_q(i)|` for the index metric `|i - j|`.
pub fn w1_cdf(p: &[f64], q: &[f64]) -> f64 {
    let mut fp = 0.0;
    let mut fq = 0.0;
    let mut total = 0.0;
    for i in 0..p.len().saturating_sub(1) {
        fp += p[i];
        fq += q[i];
        total += (fp - fq).abs();
    }
    total
}

/// Exact optimal transport cost by successive shortest augmenting paths
/// on the bipartite transport network restricted to the supports.
pub fn w1_flow(p: &[f64], q: &[f64], cost: impl Fn(usize, usize) -> f64) -> Result<f64> {
    let src: Vec<(usize, f64)> = support(p);
    let dst: Vec<(usize, f64)> = support(q);
    if src.len() > MAX_FLOW_SUPPORT || dst.len() > MAX_FLOW_SUPPORT {
        return Err(Error::SupportTooLarge(src.len().max(dst.len())));
    }
    if src.is_empty() || dst.is_empty() {
        return Err(Error::EmptySupport);
    }
    let mut net = Network::new(src.len() + dst.len() + 2);
    let source = 0;
    let sink = src.len() + dst.len() + 1;
    for (k, &(_, m)) in src.iter().enumerate() {
        net.add_edge(source, 1 + k, m, 0.0);
    }
    for (k, &(_, m)) in dst.iter().enumerate() {
        net.add_edge(1 + src.len() + k, sink, m, 0.0);
    }
    for (a, &(i, _)) in src.iter().enumerate() {
        for (b, &(j, _)) in dst.iter().enumerate() {
            net.add_edge(1 + a, 1 + src.len() + b, f64::INFINITY, cost(i, j));
        }
    }
    Ok(net.min_cost_flow(source, sink, 1.0))
}

/// Nonzero atoms renormalized to total mass exactly one.
fn support(p: &[f64]) -> Vec<(usize, f64)> {
    let total: f64 = p.iter().sum();
    p.iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(i, &m)| (i, m / total))
        .collect()
}

struct Edge {
    to: usize,
    cap: f64,
    cost: f64,
}

struct Network {
    edges: Vec<Edge>,
    adj: Vec<Vec<usize>>,
}

impl Network {
    fn new(n: usize) -> Self {
        Self {
            edges: Vec::new(),
            adj: vec![Vec::new(); n],
        }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: f64, cost: f64) {
        self.adj[from].push(self.edges.len());
        self.edges.push(Edge { to, cap, cost });
        self.adj[to].push(self.edges.len());
        self.edges.push(Edge {
            to: from,
            cap: 0.0,
            cost: -cost,
        });
    }

    fn min_cost_flow(&mut self, s: usize, t: usize, demand: f64) -> f64 {
        let n = self.adj.len();
        let mut flow = 0.0;
        let mut total_cost = 0.0;
        while flow < demand - EPS {
            // Bellman-Ford: residual graph may contain negative reverse edges.
            let mut dist = vec![f64::INFINITY; n];
            let mut via = vec![usize::MAX; n];
            dist[s] = 0.0;
            for _ in 0..n {
                let mut relaxed = false;
                for u in 0..n {
                    if dist[u] == f64::INFINITY {
                        continue;
                    }
                    for &e in &self.adj[u] {
                        let edge = &self.edges[e];
                        if edge.cap > EPS && dist[u] + edge.cost < dist[edge.to] - 1e-15 {
                            dist[edge.to] = dist[u] + edge.cost;
                            via[edge.to] = e;
                            relaxed = true;
                        }
                    }
                }
                if !relaxed {
                    break;
                }
            }
            if dist[t] == f64::INFINITY {
                break;
            }
            let mut push = demand - flow;
            let mut v = t;
            while v != s {
                let e = via[v];
                push = push.min(self.edges[e].cap);
                v = self.edges[e ^ 1].to;
            }
            let mut v = t;
            while v != s {
                let e = via[v];
                self.edges[e].cap -= push;
                self.edges[e ^ 1].cap += push;
                v = self.edges[e ^ 1].to;
            }
            flow += push;
            total_cost += push * dist[t];
        }
        total_cost
    }
}
