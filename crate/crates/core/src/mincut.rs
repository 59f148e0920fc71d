//! Exact s-t max-flow / min-cut and the reduction of submodular pairwise energies over
//! `{-1,+1}` variables to a cut problem.
//!
//! Energies have the form `E(z) = sum_i u_i z_i + sum_(i,j) c_ij z_i z_j` with every
//! `c_ij <= 0`. Substituting `z = 2x - 1` gives a submodular pseudo-boolean function of
//! `x in {0,1}^m` that is represented exactly by terminal and inter-node arcs. Nodes on the
//! source side of the cut decode to `x = 0` (`z = -1`), sink side to `x = 1` (`z = +1`).

use std::collections::VecDeque;

use crate::error::{Error, Result};

const UNREACHED: usize = usize::MAX;

/// Directed network with real capacities. Arc `2e` is the `e`-th inserted arc and `2e + 1`
/// its residual twin.
#[derive(Clone, Debug)]
pub struct FlowNetwork {
    source: usize,
    sink: usize,
    head: Vec<usize>,
    cap: Vec<f64>,
    adj: Vec<Vec<usize>>,
}

impl FlowNetwork {
    pub fn new(nodes: usize, source: usize, sink: usize) -> Result<Self> {
        if source >= nodes || sink >= nodes {
            return Err(Error::validation(format!(
                "terminals ({source}, {sink}) out of range for {nodes} nodes"
            )));
        }
        if source == sink {
            return Err(Error::validation("source and sink must differ"));
        }
        Ok(FlowNetwork {
            source,
            sink,
            head: Vec::new(),
            cap: Vec::new(),
            adj: vec![Vec::new(); nodes],
        })
    }

    pub fn with_arc_capacity(nodes: usize, source: usize, sink: usize, arcs: usize) -> Result<Self> {
        let mut net = Self::new(nodes, source, sink)?;
        net.head.reserve(2 * arcs);
        net.cap.reserve(2 * arcs);
        Ok(net)
    }

    pub fn nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn sink(&self) -> usize {
        self.sink
    }

    pub fn arc_count(&self) -> usize {
        self.head.len() / 2
    }

    /// Adds `from -> to` with the given capacity and returns its arc index.
    pub fn add_arc(&mut self, from: usize, to: usize, capacity: f64) -> Result<usize> {
        let n = self.nodes();
        if from >= n || to >= n {
            return Err(Error::validation(format!("arc ({from}, {to}) out of range")));
        }
        if !capacity.is_finite() || capacity < 0.0 {
            return Err(Error::validation(format!(
                "arc capacity must be finite and >= 0, got {capacity}"
            )));
        }
        let e = self.head.len();
        self.head.push(to);
        self.cap.push(capacity);
        self.head.push(from);
        self.cap.push(0.0);
        self.adj[from].push(e);
        self.adj[to].push(e + 1);
        Ok(e / 2)
    }

    /// `(from, to, capacity)` of every inserted arc, in insertion order.
    pub fn arcs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.arc_count()).map(|a| (self.head[2 * a + 1], self.head[2 * a], self.cap[2 * a]))
    }

    /// Total capacity of arcs leaving the source side.
    pub fn cut_capacity(&self, source_side: &[bool]) -> f64 {
        self.arcs()
            .filter(|&(u, v, _)| source_side[u] && !source_side[v])
            .map(|(_, _, c)| c)
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct CutResult {
    pub flow_value: f64,
    /// `true` for nodes reachable from the source in the final residual network.
    pub source_side: Vec<bool>,
    /// Flow on each inserted arc.
    pub arc_flow: Vec<f64>,
}

struct Dinic<'a> {
    net: &'a FlowNetwork,
    residual: Vec<f64>,
    level: Vec<usize>,
    cursor: Vec<usize>,
    queue: VecDeque<usize>,
    eps: f64,
}

impl Dinic<'_> {
    fn bfs(&mut self) -> bool {
        self.level.fill(UNREACHED);
        self.queue.clear();
        self.level[self.net.source] = 0;
        self.queue.push_back(self.net.source);
        while let Some(u) = self.queue.pop_front() {
            for &e in &self.net.adj[u] {
                let v = self.net.head[e];
                if self.residual[e] > self.eps && self.level[v] == UNREACHED {
                    self.level[v] = self.level[u] + 1;
                    self.queue.push_back(v);
                }
            }
        }
        self.level[self.net.sink] != UNREACHED
    }

    /// Saturates the current level graph. Iterative so deep layered graphs cannot overflow the stack.
    fn blocking_flow(&mut self) -> f64 {
        let (s, t) = (self.net.source, self.net.sink);
        self.cursor.fill(0);
        let mut path: Vec<usize> = Vec::new();
        let mut u = s;
        let mut total = 0.0;
        loop {
            if u == t {
                let pushed = path
                    .iter()
                    .map(|&e| self.residual[e])
                    .fold(f64::INFINITY, f64::min);
                for &e in &path {
                    self.residual[e] -= pushed;
                    self.residual[e ^ 1] += pushed;
                }
                total += pushed;
                let first_saturated = path
                    .iter()
                    .position(|&e| self.residual[e] <= self.eps)
                    .unwrap_or(0);
                path.truncate(first_saturated);
                u = path.last().map_or(s, |&e| self.net.head[e]);
                continue;
            }
            let mut advanced = false;
            while self.cursor[u] < self.net.adj[u].len() {
                let e = self.net.adj[u][self.cursor[u]];
                let v = self.net.head[e];
                if self.residual[e] > self.eps && self.level[v] == self.level[u] + 1 {
                    path.push(e);
                    u = v;
                    advanced = true;
                    break;
                }
                self.cursor[u] += 1;
            }
            if !advanced {
                if u == s {
                    return total;
                }
                self.level[u] = UNREACHED;
                let e = path.pop().expect("non-source node has an incoming path arc");
                u = self.net.head[e ^ 1];
                self.cursor[u] += 1;
            }
        }
    }
}

pub fn max_flow(net: &FlowNetwork) -> Result<CutResult> {
    let mut max_cap: f64 = 0.0;
    for &c in &net.cap {
        if !c.is_finite() || c < 0.0 {
            return Err(Error::validation(format!("invalid arc capacity {c}")));
        }
        max_cap = max_cap.max(c);
    }
    let n = net.nodes();
    let mut dinic = Dinic {
        net,
        residual: net.cap.clone(),
        level: vec![UNREACHED; n],
        cursor: vec![0; n],
        queue: VecDeque::with_capacity(n),
        eps: max_cap * 1e-13,
    };
    let mut flow_value = 0.0;
    while dinic.bfs() {
        flow_value += dinic.blocking_flow();
    }
    // the last failed BFS leaves exactly the source-reachable set labelled
    let source_side: Vec<bool> = dinic.level.iter().map(|&l| l != UNREACHED).collect();
    let arc_flow = (0..net.arc_count())
        .map(|a| net.cap[2 * a] - dinic.residual[2 * a])
        .collect();
    Ok(CutResult {
        flow_value,
        source_side,
        arc_flow,
    })
}

/// Submodular energy as a cut problem: `energy(z) = cut_capacity(z) + constant`.
#[derive(Clone, Debug)]
pub struct EnergyNetwork {
    pub network: FlowNetwork,
    pub constant: f64,
    pub vars: usize,
}

impl EnergyNetwork {
    /// Variable assignment induced by a cut.
    pub fn decode(&self, cut: &CutResult) -> Vec<i8> {
        cut.source_side[..self.vars]
            .iter()
            .map(|&src| if src { -1 } else { 1 })
            .collect()
    }
}

/// Builds the cut network of `sum_i u_i z_i + sum_(i,j,c) c z_i z_j`.
pub fn energy_to_network(unaries: &[f64], pairwise: &[(usize, usize, f64)]) -> Result<EnergyNetwork> {
    let m = unaries.len();
    if let Some(u) = unaries.iter().find(|u| !u.is_finite()) {
        return Err(Error::validation(format!("unary {u} is not finite")));
    }
    // linear[i] is the cost of x_i = 1 relative to x_i = 0
    let mut linear: Vec<f64> = unaries.iter().map(|u| 2.0 * u).collect();
    let mut constant: f64 = -unaries.iter().sum::<f64>();
    let (s, t) = (m, m + 1);
    let mut network = FlowNetwork::with_arc_capacity(m + 2, s, t, m + pairwise.len())?;
    for &(i, j, c) in pairwise {
        if i >= m || j >= m || i == j {
            return Err(Error::validation(format!("pairwise term ({i}, {j}) invalid for {m} variables")));
        }
        if !c.is_finite() {
            return Err(Error::validation(format!("pairwise coefficient {c} is not finite")));
        }
        if c > 0.0 {
            return Err(Error::contract(format!(
                "pairwise coefficient {c} on ({i}, {j}) is not submodular"
            )));
        }
        if c == 0.0 {
            continue;
        }
        // c z_i z_j = 4c x_i x_j - 2c x_i - 2c x_j + c
        //           = c - 2c x_i + 2c x_j - 4c (1 - x_i) x_j
        constant += c;
        linear[i] -= 2.0 * c;
        linear[j] += 2.0 * c;
        network.add_arc(i, j, -4.0 * c)?;
    }
    for (i, &l) in linear.iter().enumerate() {
        if l > 0.0 {
            network.add_arc(s, i, l)?;
        } else if l < 0.0 {
            // l x = l - l (1 - x)
            constant += l;
            network.add_arc(i, t, -l)?;
        }
    }
    Ok(EnergyNetwork {
        network,
        constant,
        vars: m,
    })
}

pub fn energy(unaries: &[f64], pairwise: &[(usize, usize, f64)], z: &[i8]) -> f64 {
    let lin: f64 = unaries.iter().zip(z).map(|(u, &b)| u * f64::from(b)).sum();
    let quad: f64 = pairwise
        .iter()
        .map(|&(i, j, c)| c * f64::from(z[i] * z[j]))
        .sum();
    lin + quad
}

/// Exact minimizer of a submodular energy and its value.
pub fn minimize(unaries: &[f64], pairwise: &[(usize, usize, f64)]) -> Result<(Vec<i8>, f64)> {
    let en = energy_to_network(unaries, pairwise)?;
    let cut = max_flow(&en.network)?;
    let z = en.decode(&cut);
    Ok((z, cut.flow_value + en.constant))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(unaries: &[f64], pairwise: &[(usize, usize, f64)]) -> f64 {
        let m = unaries.len();
        (0..1u32 << m)
            .map(|mask| {
                let z: Vec<i8> = (0..m).map(|i| if mask >> i & 1 == 1 { 1 } else { -1 }).collect();
                energy(unaries, pairwise, &z)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn single_path() {
        let mut net = FlowNetwork::new(3, 0, 2).unwrap();
        net.add_arc(0, 1, 3.0).unwrap();
        net.add_arc(1, 2, 2.0).unwrap();
        let cut = max_flow(&net).unwrap();
        assert_eq!(cut.flow_value, 2.0);
        assert!(cut.source_side[1]);
        assert_eq!(net.cut_capacity(&cut.source_side), 2.0);
    }

    #[test]
    fn disjoint_paths_add() {
        let mut net = FlowNetwork::new(4, 0, 3).unwrap();
        net.add_arc(0, 1, 1.0).unwrap();
        net.add_arc(1, 3, 1.0).unwrap();
        net.add_arc(0, 2, 4.0).unwrap();
        net.add_arc(2, 3, 4.0).unwrap();
        assert_eq!(max_flow(&net).unwrap().flow_value, 5.0);
    }

    #[test]
    fn no_arcs() {
        let net = FlowNetwork::new(2, 0, 1).unwrap();
        let cut = max_flow(&net).unwrap();
        assert_eq!(cut.flow_value, 0.0);
        assert_eq!(cut.source_side, vec![true, false]);
    }

    #[test]
    fn invalid_networks() {
        assert!(FlowNetwork::new(2, 0, 0).is_err());
        assert!(FlowNetwork::new(2, 0, 2).is_err());
        let mut net = FlowNetwork::new(2, 0, 1).unwrap();
        assert!(net.add_arc(0, 1, f64::NAN).is_err());
        assert!(net.add_arc(0, 1, -1.0).is_err());
        assert!(net.add_arc(0, 5, 1.0).is_err());
    }

    #[test]
    fn two_variable_energy() {
        let u = [3.0 / 8.0, -1.0 / 8.0];
        let p = [(0, 1, -3.0 / 8.0)];
        let (z, e) = minimize(&u, &p).unwrap();
        assert_eq!(z, vec![-1, -1]);
        assert_eq!(e, -5.0 / 8.0);
        assert_eq!(energy(&u, &p, &z), e);
    }

    #[test]
    fn separable_energy_follows_unary_sign() {
        let u = [2.0, -0.5, 0.0, 1e-3];
        let (z, e) = minimize(&u, &[]).unwrap();
        assert_eq!(z, vec![-1, 1, 1, -1]);
        assert!((e - -(2.0 + 0.5 + 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn zero_energy_network_is_empty() {
        let en = energy_to_network(&[0.0; 3], &[(0, 1, 0.0)]).unwrap();
        assert_eq!(en.network.arc_count(), 0);
        assert_eq!(en.constant, 0.0);
    }

    #[test]
    fn positive_coupling_is_rejected() {
        let err = energy_to_network(&[0.0, 0.0], &[(0, 1, 0.5)]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn cut_plus_constant_equals_energy_for_every_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = rng.random_range(1..7);
            let u: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut p = Vec::new();
            for i in 0..m {
                for j in i + 1..m {
                    if rng.random_bool(0.5) {
                        p.push((i, j, -rng.random_range(0.0..2.0)));
                    }
                }
            }
            let en = energy_to_network(&u, &p).unwrap();
            for mask in 0..1u32 << m {
                let z: Vec<i8> = (0..m).map(|i| if mask >> i & 1 == 1 { 1 } else { -1 }).collect();
                let mut side = vec![false; m + 2];
                for i in 0..m {
                    side[i] = z[i] < 0;
                }
                side[m] = true;
                let cut = en.network.cut_capacity(&side) + en.constant;
                assert!((cut - energy(&u, &p, &z)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_submodular_energies_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let m = rng.random_range(1..=12);
            let u: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut p = Vec::new();
            for i in 0..m {
                for j in i + 1..m {
                    if rng.random_bool(0.4) {
                        p.push((i, j, -rng.random_range(0.0..2.0)));
                    }
                }
            }
            let (z, e) = minimize(&u, &p).unwrap();
            let best = brute_force(&u, &p);
            assert!((energy(&u, &p, &z) - best).abs() < 1e-9);
            assert!((e - best).abs() < 1e-9);
        }
    }

    #[test]
    fn random_networks_satisfy_duality_and_conservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(2..=50);
            let mut net = FlowNetwork::new(n, 0, n - 1).unwrap();
            let arcs = rng.random_range(0..4 * n);
            for _ in 0..arcs {
                let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
                if a != b {
                    net.add_arc(a, b, rng.random_range(0.0..10.0)).unwrap();
                }
            }
            let cut = max_flow(&net).unwrap();
            assert!(cut.source_side[0] && !cut.source_side[n - 1]);
            assert!((net.cut_capacity(&cut.source_side) - cut.flow_value).abs() < 1e-9);
            let mut balance = vec![0.0; n];
            for ((u, v, c), f) in net.arcs().zip(&cut.arc_flow) {
                assert!(*f >= -1e-9 && *f <= c + 1e-9);
                balance[u] -= f;
                balance[v] += f;
            }
            for (node, b) in balance.iter().enumerate() {
                if node != 0 && node != n - 1 {
                    assert!(b.abs() < 1e-9, "node {node} imbalance {b}");
                }
            }
            assert!((balance[n - 1] - cut.flow_value).abs() < 1e-9);
        }
    }

    #[test]
    fn large_sparse_network() {
        // ~10^5 nodes, ~5*10^5 arcs
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 100_000;
        let mut u = Vec::with_capacity(m);
        let mut p = Vec::new();
        for i in 0..m {
            u.push(rng.random_range(-1.0..1.0));
            for _ in 0..4 {
                let j = rng.random_range(0..m);
                if j != i {
                    p.push((i, j, -rng.random_range(0.0..0.5)));
                }
            }
        }
        let start = std::time::Instant::now();
        let (z, e) = minimize(&u, &p).unwrap();
        assert!((energy(&u, &p, &z) - e).abs() < 1e-6 * (1.0 + e.abs()));
        assert!(start.elapsed().as_secs_f64() < 30.0);
    }
}
