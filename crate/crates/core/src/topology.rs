//! Communication graph, Metropolis weights and synchronous average consensus.
//!
//! Node indices are zero-based. An inactive edge contributes nothing in a round and
//! its weight is folded back into both endpoints' self-coefficients, so the network
//! total is conserved.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected edge stored with the smaller endpoint first.
pub type Edge = (usize, usize);
pub type EdgeSet = BTreeSet<Edge>;

pub fn edge(a: usize, b: usize) -> Edge {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

pub const DEFAULT_CONSENSUS_TOLERANCE: f64 = 1e-10;
/// Largest acceptable distance from an integer after scaling a broadcast entry.
pub const INTEGER_GUARD: f64 = 1e-3;
/// Integer broadcast entries must not exceed this (exact in double precision after scaling).
pub const MAX_INTEGER_ENTRY: f64 = 4_294_967_296.0;
pub const INTEGER_SPREAD: f64 = 1e-6;

/// Planar coordinates of the nine-farm case study; with threshold 2.2 they give a
/// connected graph with 30 links whose Metropolis matrix mixes in about 26 rounds.
pub const CASE_STUDY_COORDINATES: [[f64; 2]; 9] = [
    [0.0, 0.0],
    [1.1, 0.3],
    [2.0, 0.1],
    [0.2, 1.0],
    [1.2, 1.2],
    [2.1, 1.0],
    [0.1, 2.1],
    [1.0, 2.0],
    [2.2, 2.2],
];
pub const CASE_STUDY_THRESHOLD: f64 = 2.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    nodes: usize,
    edges: EdgeSet,
    adjacency: Vec<Vec<usize>>,
    coordinates: Option<Vec<[f64; 2]>>,
    threshold: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TopologyFile {
    Coordinates {
        coordinates: Vec<[f64; 2]>,
        threshold: f64,
    },
    Edges {
        nodes: usize,
        edges: Vec<[usize; 2]>,
    },
}

impl Topology {
    pub fn from_edges(nodes: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::Topology("a topology needs at least one node".into()));
        }
        let mut set = EdgeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::Topology(format!("self-loop at node {a}")));
            }
            if a >= nodes || b >= nodes {
                return Err(Error::Topology(format!(
                    "edge ({a},{b}) references a node outside 0..{nodes}"
                )));
            }
            set.insert(edge(a, b));
        }
        let mut adjacency = vec![Vec::new(); nodes];
        for &(a, b) in &set {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        let topo = Self {
            nodes,
            edges: set,
            adjacency,
            coordinates: None,
            threshold: None,
        };
        if !topo.is_connected_without(&EdgeSet::new()) {
            return Err(Error::Topology("graph is not connected".into()));
        }
        Ok(topo)
    }

    /// Links every pair of nodes closer than `threshold`.
    pub fn from_coordinates(coordinates: Vec<[f64; 2]>, threshold: f64) -> Result<Self> {
        let m = coordinates.len();
        let mut edges = Vec::new();
        for a in 0..m {
            for b in (a + 1)..m {
                let d = (coordinates[a][0] - coordinates[b][0])
                    .hypot(coordinates[a][1] - coordinates[b][1]);
                if d < threshold {
                    edges.push((a, b));
                }
            }
        }
        let mut topo = Self::from_edges(m, edges)?;
        topo.coordinates = Some(coordinates);
        topo.threshold = Some(threshold);
        Ok(topo)
    }

    pub fn case_study() -> Self {
        Self::from_coordinates(CASE_STUDY_COORDINATES.to_vec(), CASE_STUDY_THRESHOLD)
            .expect("case-study layout is connected")
    }

    pub fn path(nodes: usize) -> Result<Self> {
        Self::from_edges(nodes, (1..nodes).map(|i| (i - 1, i)))
    }

    pub fn ring(nodes: usize) -> Result<Self> {
        let mut edges: Vec<Edge> = (1..nodes).map(|i| (i - 1, i)).collect();
        if nodes > 2 {
            edges.push((nodes - 1, 0));
        }
        Self::from_edges(nodes, edges)
    }

    pub fn complete(nodes: usize) -> Result<Self> {
        Self::from_edges(
            nodes,
            (0..nodes).flat_map(|a| ((a + 1)..nodes).map(move |b| (a, b))),
        )
    }

    /// Random spanning tree plus each remaining pair with probability `extra`.
    pub fn random_connected(nodes: usize, extra: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..nodes).collect();
        order.shuffle(&mut rng);
        let mut edges = EdgeSet::new();
        for k in 1..nodes {
            let parent = order[rng.gen_range(0..k)];
            edges.insert(edge(order[k], parent));
        }
        for a in 0..nodes {
            for b in (a + 1)..nodes {
                if rng.gen::<f64>() < extra {
                    edges.insert((a, b));
                }
            }
        }
        Self::from_edges(nodes, edges)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        match serde_json::from_str::<TopologyFile>(s)? {
            TopologyFile::Coordinates {
                coordinates,
                threshold,
            } => Self::from_coordinates(coordinates, threshold),
            TopologyFile::Edges { nodes, edges } => {
                Self::from_edges(nodes, edges.into_iter().map(|[a, b]| (a, b)))
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = match (&self.coordinates, self.threshold) {
            (Some(c), Some(t)) => TopologyFile::Coordinates {
                coordinates: c.clone(),
                threshold: t,
            },
            _ => TopologyFile::Edges {
                nodes: self.nodes,
                edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
            },
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> &EdgeSet {
        &self.edges
    }

    pub fn neighbors(&self, m: usize) -> &[usize] {
        &self.adjacency[m]
    }

    pub fn degree(&self, m: usize) -> usize {
        self.adjacency[m].len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&edge(a, b))
    }

    pub fn coordinates(&self) -> Option<&[[f64; 2]]> {
        self.coordinates.as_deref()
    }

    /// Connectivity after removing `cut`.
    pub fn is_connected_without(&self, cut: &EdgeSet) -> bool {
        let mut seen = vec![false; self.nodes];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(a) = queue.pop_front() {
            for &b in &self.adjacency[a] {
                if !seen[b] && !cut.contains(&edge(a, b)) {
                    seen[b] = true;
                    count += 1;
                    queue.push_back(b);
                }
            }
        }
        count == self.nodes
    }

    /// Longest shortest path in hops.
    pub fn diameter(&self) -> usize {
        (0..self.nodes)
            .map(|s| {
                let mut dist = vec![usize::MAX; self.nodes];
                dist[s] = 0;
                let mut queue = VecDeque::from([s]);
                while let Some(a) = queue.pop_front() {
                    for &b in &self.adjacency[a] {
                        if dist[b] == usize::MAX {
                            dist[b] = dist[a] + 1;
                            queue.push_back(b);
                        }
                    }
                }
                dist.into_iter().max().unwrap_or(0)
            })
            .max()
            .unwrap_or(0)
    }

    /// Default round budget `10 * M * diameter` (at least 10).
    pub fn default_max_rounds(&self) -> usize {
        (10 * self.nodes * self.diameter()).max(10)
    }
}

/// Doubly stochastic consensus weights `alpha[m][i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    values: DMatrix<f64>,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl WeightMatrix {
    pub fn get(&self, m: usize, i: usize) -> f64 {
        self.values[(m, i)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn nodes(&self) -> usize {
        self.values.nrows()
    }

    /// Off-diagonal nonzeros of row `m`, ordered by neighbor index.
    pub fn neighbor_weights(&self, m: usize) -> &[(usize, f64)] {
        &self.neighbors[m]
    }
}

/// `alpha[m][i] = 1 / (max(deg m, deg i) + 1)` on edges, the remainder on the diagonal.
pub fn metropolis_weights(topology: &Topology) -> WeightMatrix {
    let m = topology.nodes();
    let mut values = DMatrix::zeros(m, m);
    let mut neighbors = vec![Vec::new(); m];
    for a in 0..m {
        let mut off = 0.0;
        for &b in topology.neighbors(a) {
            let w = 1.0 / (topology.degree(a).max(topology.degree(b)) + 1) as f64;
            values[(a, b)] = w;
            neighbors[a].push((b, w));
            off += w;
        }
        values[(a, a)] = 1.0 - off;
    }
    WeightMatrix { values, neighbors }
}

/// Per-node consensus values at round `round`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusState {
    pub values: Vec<Vec<f64>>,
    pub round: usize,
}

impl ConsensusState {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(first) = values.first() {
            if values.iter().any(|v| v.len() != first.len()) {
                return Err(Error::Dimension(
                    "consensus vectors differ in length across nodes".into(),
                ));
            }
        }
        Ok(Self { values, round: 0 })
    }
}

/// One node's update from the neighbor values that actually arrived. Neighbors in
/// `weights` missing from `received` are replaced by the node's own value.
pub fn node_update(
    own: &[f64],
    self_weight: f64,
    weights: &[(usize, f64)],
    received: &[(usize, &[f64])],
) -> Vec<f64> {
    let mut coeff = self_weight;
    let mut out = vec![0.0; own.len()];
    let mut r = 0;
    for &(i, w) in weights {
        while r < received.len() && received[r].0 < i {
            r += 1;
        }
        if r < received.len() && received[r].0 == i {
            for (o, v) in out.iter_mut().zip(received[r].1) {
                *o += w * v;
            }
        } else {
            coeff += w;
        }
    }
    for (o, v) in out.iter_mut().zip(own) {
        *o += coeff * v;
    }
    out
}

/// One synchronous round over the edges in `active`.
pub fn consensus_round(
    state: &ConsensusState,
    weights: &WeightMatrix,
    active: &EdgeSet,
) -> ConsensusState {
    let values = (0..weights.nodes())
        .map(|m| {
            let received: Vec<(usize, &[f64])> = weights
                .neighbor_weights(m)
                .iter()
                .filter(|(i, _)| active.contains(&edge(m, *i)))
                .map(|(i, _)| (*i, state.values[*i].as_slice()))
                .collect();
            node_update(
                &state.values[m],
                weights.get(m, m),
                weights.neighbor_weights(m),
                &received,
            )
        })
        .collect();
    ConsensusState {
        values,
        round: state.round + 1,
    }
}

/// How disagreement between nodes is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpreadRule {
    /// Per entry, `(max - min) / max(1, |mean|)`.
    Relative,
    /// Per entry, `max - min`.
    Absolute,
}

/// Largest per-entry disagreement across nodes under `rule`.
pub fn spread(values: &[Vec<f64>], rule: SpreadRule) -> f64 {
    let Some(first) = values.first() else {
        return 0.0;
    };
    let m = values.len() as f64;
    let mut worst: f64 = 0.0;
    for k in 0..first.len() {
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for v in values {
            lo = lo.min(v[k]);
            hi = hi.max(v[k]);
            sum += v[k];
        }
        let scale = match rule {
            SpreadRule::Relative => (sum / m).abs().max(1.0),
            SpreadRule::Absolute => 1.0,
        };
        worst = worst.max((hi - lo) / scale);
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsensusConfig {
    pub tolerance: f64,
    /// Defaults to `10 * M * diameter` when absent.
    pub max_rounds: Option<usize>,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_CONSENSUS_TOLERANCE,
            max_rounds: None,
        }
    }
}

impl ConsensusConfig {
    pub fn budget(&self, topology: &Topology) -> usize {
        self.max_rounds
            .unwrap_or_else(|| topology.default_max_rounds())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusOutcome {
    /// Final per-node averages (not yet scaled by `M`).
    pub values: Vec<Vec<f64>>,
    pub rounds: usize,
    /// Spread before the first round and after every round.
    pub spreads: Vec<f64>,
}

/// Iterates [`consensus_round`] until the spread is below `tolerance`.
pub fn run_consensus(
    init: Vec<Vec<f64>>,
    weights: &WeightMatrix,
    active: &EdgeSet,
    tolerance: f64,
    rule: SpreadRule,
    max_rounds: usize,
) -> Result<ConsensusOutcome> {
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(Error::InvalidInput(
            "consensus tolerance must be positive".into(),
        ));
    }
    let mut state = ConsensusState::new(init)?;
    let mut spreads = vec![spread(&state.values, rule)];
    while *spreads.last().unwrap() >= tolerance {
        if state.round >= max_rounds {
            return Err(Error::NonConvergence {
                rounds: state.round,
                residual: *spreads.last().unwrap(),
            });
        }
        state = consensus_round(&state, weights, active);
        spreads.push(spread(&state.values, rule));
    }
    Ok(ConsensusOutcome {
        values: state.values,
        rounds: state.round,
        spreads,
    })
}

/// Scales averages by `M` and snaps integer entries, enforcing the rounding guard.
pub fn finish_broadcast(averages: &[f64], nodes: usize, integer: bool) -> Result<Vec<f64>> {
    averages
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let total = v * nodes as f64;
            if !integer {
                return Ok(total);
            }
            let r = total.round();
            let residual = (total - r).abs();
            if residual >= INTEGER_GUARD {
                Err(Error::BroadcastIntegrity { index: k, residual })
            } else {
                Ok(r)
            }
        })
        .collect()
}

pub fn check_integer_payload(contributions: &[Vec<f64>]) -> Result<()> {
    for v in contributions.iter().flatten() {
        if v.fract() != 0.0 || *v < 0.0 || *v > MAX_INTEGER_ENTRY {
            return Err(Error::InvalidInput(format!(
                "integer broadcast entry {v} is not in 0..=2^32"
            )));
        }
    }
    Ok(())
}

/// Every node recovers the sum of the per-node contribution vectors. Each node places
/// its own entries at its indices and zeros elsewhere, so the sum is the union.
pub fn consensus_broadcast(
    contributions: Vec<Vec<f64>>,
    weights: &WeightMatrix,
    active: &EdgeSet,
    integer: bool,
    config: &ConsensusConfig,
    max_rounds: usize,
) -> Result<Vec<Vec<f64>>> {
    let m = contributions.len();
    if integer {
        check_integer_payload(&contributions)?;
    }
    let (tol, rule) = if integer {
        (INTEGER_SPREAD, SpreadRule::Absolute)
    } else {
        (config.tolerance, SpreadRule::Relative)
    };
    let out = run_consensus(contributions, weights, active, tol, rule, max_rounds)?;
    out.values
        .iter()
        .map(|v| finish_broadcast(v, m, integer))
        .collect()
}
