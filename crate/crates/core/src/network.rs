//! Adversarial topology schedules.
//!
//! The model lets an adversary rebuild the link set every round, subject to
//! the graph being connected each round. This module provides concrete
//! schedule families (the experimentally pessimistic permuted path and
//! bounded-degree random trees, plus static baselines and a file-driven
//! hook), per-round validation, and the three graph metrics the analysis
//! speaks about: dynamic max degree, dynamic diameter, and the chronopath
//! (opportunistic multi-round hop distance).
//!
//! Generation is counter-based: `(kind, n, seed, round)` fully determines a
//! round's graph, so schedules are reproducible and random-access.

use std::collections::VecDeque;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

/// Extra-edge probability for the `dynamic_random_connected` family.
const EXTRA_EDGE_PROB: f64 = 0.2;
/// Default degree cap for `dynamic_random_tree`.
pub const DEFAULT_TREE_DEGREE_BOUND: u32 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("schedule kind {0} requires a source file")]
    MissingSource(ScheduleKind),
    #[error("schedule file {path} has no round {round}")]
    MissingRound { path: PathBuf, round: u64 },
    #[error("cannot read schedule file {path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("schedule file line {line}: bad edge token {token:?}")]
    BadToken { line: usize, token: String },
    #[error("schedule round {round} is invalid: {violation}")]
    InvalidRound { round: u64, violation: Violation },
    #[error("tree degree bound must be at least 2, got {0}")]
    BadDegreeBound(u32),
    #[error("{rounds}-round window is too short for flooding to complete")]
    InsufficientWindow { rounds: u64 },
}

/// One round's communication graph: undirected, meant to be simple and
/// connected. Violations are reported by [`validate`], not hidden.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl RoundGraph {
    pub fn new(n: usize, edges: Vec<(usize, usize)>) -> Self {
        RoundGraph { n, edges }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        self.fill_adjacency(&mut adj);
        adj
    }

    /// Rebuild adjacency lists into reusable buffers.
    pub fn fill_adjacency(&self, adj: &mut Vec<Vec<usize>>) {
        adj.resize(self.n, Vec::new());
        for a in adj.iter_mut() {
            a.clear();
        }
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
    }

    pub fn max_degree(&self) -> usize {
        let mut deg = vec![0usize; self.n];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg.into_iter().max().unwrap_or(0)
    }
}

/// First property a graph fails, if any. Data, not a fault.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    TooFewNodes { n: usize },
    IndexOutOfRange { index: usize, n: usize },
    SelfLoop { node: usize },
    DuplicateEdge { u: usize, v: usize },
    Disconnected,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewNodes { n } => write!(f, "needs at least 2 nodes, has {n}"),
            Violation::IndexOutOfRange { index, n } => {
                write!(f, "node index {index} out of range for n={n}")
            }
            Violation::SelfLoop { node } => write!(f, "self-loop at node {node}"),
            Violation::DuplicateEdge { u, v } => write!(f, "duplicate edge {u}-{v}"),
            Violation::Disconnected => write!(f, "disconnected"),
        }
    }
}

/// Check a round graph: at least two nodes, indices in range, simple,
/// connected. Reports the first violated property.
pub fn validate(g: &RoundGraph) -> Result<(), Violation> {
    if g.n < 2 {
        return Err(Violation::TooFewNodes { n: g.n });
    }
    let mut seen = vec![false; g.n * g.n];
    for &(u, v) in &g.edges {
        if u >= g.n {
            return Err(Violation::IndexOutOfRange { index: u, n: g.n });
        }
        if v >= g.n {
            return Err(Violation::IndexOutOfRange { index: v, n: g.n });
        }
        if u == v {
            return Err(Violation::SelfLoop { node: u });
        }
        let key = u.min(v) * g.n + u.max(v);
        if seen[key] {
            return Err(Violation::DuplicateEdge { u: u.min(v), v: u.max(v) });
        }
        seen[key] = true;
    }
    if !is_connected(g) {
        return Err(Violation::Disconnected);
    }
    Ok(())
}

fn is_connected(g: &RoundGraph) -> bool {
    let adj = g.adjacency();
    let mut seen = vec![false; g.n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == g.n
}

/// Per-round graph diameter; `None` when disconnected.
pub fn diameter(g: &RoundGraph) -> Option<usize> {
    let adj = g.adjacency();
    let mut worst = 0;
    let mut dist = vec![usize::MAX; g.n];
    for s in 0..g.n {
        dist.iter_mut().for_each(|d| *d = usize::MAX);
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        let mut reached = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    reached += 1;
                    worst = worst.max(dist[v]);
                    queue.push_back(v);
                }
            }
        }
        if reached < g.n {
            return None;
        }
    }
    Some(worst)
}

/// Built-in schedule families. Node 0 is the leader in all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    StaticPath,
    StaticClique,
    StaticStar,
    DynamicPermutedPath,
    DynamicRandomTree,
    DynamicRandomConnected,
    FromFile,
}

impl ScheduleKind {
    /// The six generator kinds (everything except `from_file`).
    pub const GENERATORS: [ScheduleKind; 6] = [
        ScheduleKind::StaticPath,
        ScheduleKind::StaticClique,
        ScheduleKind::StaticStar,
        ScheduleKind::DynamicPermutedPath,
        ScheduleKind::DynamicRandomTree,
        ScheduleKind::DynamicRandomConnected,
    ];

    pub fn is_static(self) -> bool {
        matches!(
            self,
            ScheduleKind::StaticPath | ScheduleKind::StaticClique | ScheduleKind::StaticStar
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::StaticPath => "static-path",
            ScheduleKind::StaticClique => "static-clique",
            ScheduleKind::StaticStar => "static-star",
            ScheduleKind::DynamicPermutedPath => "dynamic-permuted-path",
            ScheduleKind::DynamicRandomTree => "dynamic-random-tree",
            ScheduleKind::DynamicRandomConnected => "dynamic-random-connected",
            ScheduleKind::FromFile => "from-file",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('_', "-").as_str() {
            "static-path" => Ok(ScheduleKind::StaticPath),
            "static-clique" => Ok(ScheduleKind::StaticClique),
            "static-star" => Ok(ScheduleKind::StaticStar),
            "dynamic-permuted-path" => Ok(ScheduleKind::DynamicPermutedPath),
            "dynamic-random-tree" => Ok(ScheduleKind::DynamicRandomTree),
            "dynamic-random-connected" => Ok(ScheduleKind::DynamicRandomConnected),
            "from-file" => Ok(ScheduleKind::FromFile),
            other => Err(format!("unknown topology kind {other:?}")),
        }
    }
}

/// A deterministic topology schedule description.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologySchedule {
    pub kind: ScheduleKind,
    pub n: usize,
    pub seed: u64,
    pub source: Option<PathBuf>,
    pub tree_degree_bound: u32,
}

impl TopologySchedule {
    pub fn new(kind: ScheduleKind, n: usize, seed: u64) -> Self {
        TopologySchedule {
            kind,
            n,
            seed,
            source: None,
            tree_degree_bound: DEFAULT_TREE_DEGREE_BOUND,
        }
    }

    pub fn from_file(path: impl Into<PathBuf>, n: usize) -> Self {
        TopologySchedule {
            kind: ScheduleKind::FromFile,
            n,
            seed: 0,
            source: Some(path.into()),
            tree_degree_bound: DEFAULT_TREE_DEGREE_BOUND,
        }
    }

    /// The graph for one round. Static kinds ignore the round index; dynamic
    /// kinds re-randomize from the `(seed, kind, round)` counter; `from_file`
    /// reads its source (callers that iterate rounds should parse the file
    /// once via [`parse_schedule_file`] instead).
    pub fn generate(&self, round: u64) -> Result<RoundGraph, NetworkError> {
        match self.kind {
            ScheduleKind::StaticPath => Ok(path_graph(self.n)),
            ScheduleKind::StaticClique => Ok(clique_graph(self.n)),
            ScheduleKind::StaticStar => Ok(star_graph(self.n)),
            ScheduleKind::DynamicPermutedPath => Ok(permuted_path(self.n, self.seed, round)),
            ScheduleKind::DynamicRandomTree => {
                random_tree(self.n, self.seed, round, self.tree_degree_bound)
            }
            ScheduleKind::DynamicRandomConnected => Ok(random_connected(self.n, self.seed, round)),
            ScheduleKind::FromFile => {
                let path = self
                    .source
                    .as_deref()
                    .ok_or(NetworkError::MissingSource(self.kind))?;
                let parsed = parse_schedule_file(path, self.n)?;
                parsed.round(round).cloned().ok_or(NetworkError::MissingRound {
                    path: path.to_path_buf(),
                    round,
                })
            }
        }
    }
}

fn path_graph(n: usize) -> RoundGraph {
    RoundGraph::new(n, (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect())
}

fn clique_graph(n: usize) -> RoundGraph {
    let mut edges = Vec::with_capacity(n * (n - 1) / 2);
    for u in 0..n {
        for v in u + 1..n {
            edges.push((u, v));
        }
    }
    RoundGraph::new(n, edges)
}

/// Star with a non-leader center (node 1) so the leader sits on the rim.
fn star_graph(n: usize) -> RoundGraph {
    if n == 2 {
        return RoundGraph::new(2, vec![(0, 1)]);
    }
    let edges = (0..n).filter(|&v| v != 1).map(|v| (1.min(v), 1.max(v))).collect();
    RoundGraph::new(n, edges)
}

fn round_rng(seed: u64, kind: ScheduleKind, round: u64) -> ChaCha8Rng {
    let mut state = seed
        ^ (kind as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ round.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fresh Hamiltonian path each round, leader pinned at one end,
/// non-leaders permuted uniformly.
fn permuted_path(n: usize, seed: u64, round: u64) -> RoundGraph {
    let mut rng = round_rng(seed, ScheduleKind::DynamicPermutedPath, round);
    let mut order: Vec<usize> = (0..n).collect();
    order[1..].shuffle(&mut rng);
    let edges = order
        .windows(2)
        .map(|w| (w[0].min(w[1]), w[0].max(w[1])))
        .collect();
    RoundGraph::new(n, edges)
}

/// Fresh random tree each round, rooted at the leader, every degree capped.
fn random_tree(n: usize, seed: u64, round: u64, bound: u32) -> Result<RoundGraph, NetworkError> {
    if bound < 2 {
        return Err(NetworkError::BadDegreeBound(bound));
    }
    let mut rng = round_rng(seed, ScheduleKind::DynamicRandomTree, round);
    let mut deg = vec![0u32; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    for i in 1..n {
        // a tree on i nodes has average degree < 2, so a slot always exists
        let open: Vec<usize> = (0..i).filter(|&j| deg[j] < bound).collect();
        let parent = open[rng.gen_range(0..open.len())];
        deg[parent] += 1;
        deg[i] += 1;
        edges.push((parent, i));
    }
    Ok(RoundGraph::new(n, edges))
}

/// Random spanning tree plus a sprinkling of extra edges.
fn random_connected(n: usize, seed: u64, round: u64) -> RoundGraph {
    let mut rng = round_rng(seed, ScheduleKind::DynamicRandomConnected, round);
    let mut in_tree = vec![false; n * n];
    let mut edges = Vec::new();
    for i in 1..n {
        let parent = rng.gen_range(0..i);
        in_tree[parent * n + i] = true;
        edges.push((parent, i));
    }
    for u in 0..n {
        for v in u + 1..n {
            if !in_tree[u * n + v] && rng.gen_bool(EXTRA_EDGE_PROB) {
                edges.push((u, v));
            }
        }
    }
    RoundGraph::new(n, edges)
}

/// A fully parsed file-driven schedule: line i of the source is round i,
/// each line a whitespace-separated list of `u-v` edge tokens.
#[derive(Debug, Clone)]
pub struct ParsedSchedule {
    n: usize,
    rounds: Vec<RoundGraph>,
}

impl ParsedSchedule {
    /// Wrap explicit per-round graphs, validating each.
    pub fn from_rounds(n: usize, rounds: Vec<RoundGraph>) -> Result<Self, NetworkError> {
        for (i, g) in rounds.iter().enumerate() {
            validate(g).map_err(|violation| NetworkError::InvalidRound {
                round: i as u64,
                violation,
            })?;
        }
        Ok(ParsedSchedule { n, rounds })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn round(&self, idx: u64) -> Option<&RoundGraph> {
        self.rounds.get(usize::try_from(idx).ok()?)
    }
}

/// Parse and validate a schedule file.
pub fn parse_schedule_file(path: &Path, n: usize) -> Result<ParsedSchedule, NetworkError> {
    let text = std::fs::read_to_string(path).map_err(|e| NetworkError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut rounds = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut edges = Vec::new();
        for token in line.split_whitespace() {
            let (u, v) = token
                .split_once('-')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                .ok_or_else(|| NetworkError::BadToken {
                    line: lineno + 1,
                    token: token.to_string(),
                })?;
            edges.push((u, v));
        }
        rounds.push(RoundGraph::new(n, edges));
    }
    ParsedSchedule::from_rounds(n, rounds)
}

/// A schedule readied for random access by the executor: static kinds cache
/// their one graph, file schedules are parsed up front (so coverage and
/// validity problems surface before any round runs), dynamic kinds stay
/// counter-generated.
#[derive(Debug, Clone)]
pub enum CompiledSchedule {
    Static(RoundGraph),
    Dynamic(TopologySchedule),
    File { parsed: ParsedSchedule, path: PathBuf },
}

impl CompiledSchedule {
    pub fn compile(sched: &TopologySchedule) -> Result<Self, NetworkError> {
        match sched.kind {
            _ if sched.kind.is_static() => {
                let g = sched.generate(0)?;
                validate(&g).map_err(|violation| NetworkError::InvalidRound {
                    round: 0,
                    violation,
                })?;
                Ok(CompiledSchedule::Static(g))
            }
            ScheduleKind::FromFile => {
                let path = sched
                    .source
                    .clone()
                    .ok_or(NetworkError::MissingSource(sched.kind))?;
                let parsed = parse_schedule_file(&path, sched.n)?;
                Ok(CompiledSchedule::File { parsed, path })
            }
            _ => Ok(CompiledSchedule::Dynamic(sched.clone())),
        }
    }

    /// Explicit per-round graphs, mainly for tests and replay.
    pub fn from_rounds(n: usize, rounds: Vec<RoundGraph>) -> Result<Self, NetworkError> {
        Ok(CompiledSchedule::File {
            parsed: ParsedSchedule::from_rounds(n, rounds)?,
            path: PathBuf::from("<explicit>"),
        })
    }

    pub fn n(&self) -> usize {
        match self {
            CompiledSchedule::Static(g) => g.n(),
            CompiledSchedule::Dynamic(s) => s.n,
            CompiledSchedule::File { parsed, .. } => parsed.n(),
        }
    }

    pub fn graph_at(&self, round: u64) -> Result<std::borrow::Cow<'_, RoundGraph>, NetworkError> {
        match self {
            CompiledSchedule::Static(g) => Ok(std::borrow::Cow::Borrowed(g)),
            CompiledSchedule::Dynamic(s) => {
                let g = s.generate(round)?;
                debug_assert_eq!(validate(&g), Ok(()));
                Ok(std::borrow::Cow::Owned(g))
            }
            CompiledSchedule::File { parsed, path } => parsed
                .round(round)
                .map(std::borrow::Cow::Borrowed)
                .ok_or_else(|| NetworkError::MissingRound {
                    path: path.clone(),
                    round,
                }),
        }
    }
}

/// Worst-case degree, per-round diameter, and chronopath over a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TopologyMetrics {
    pub delta: usize,
    pub diameter: usize,
    pub chronopath: usize,
}

/// Scan `rounds` rounds of a schedule.
pub fn metrics(sched: &TopologySchedule, rounds: u64) -> Result<TopologyMetrics, NetworkError> {
    assert!(rounds >= 1);
    match sched.kind {
        ScheduleKind::FromFile => {
            let path = sched
                .source
                .as_deref()
                .ok_or(NetworkError::MissingSource(sched.kind))?;
            let parsed = parse_schedule_file(path, sched.n)?;
            let mut graphs = Vec::new();
            for round in 0..rounds {
                graphs.push(
                    parsed
                        .round(round)
                        .cloned()
                        .ok_or(NetworkError::MissingRound {
                            path: path.to_path_buf(),
                            round,
                        })?,
                );
            }
            metrics_of(&graphs)
        }
        _ => {
            let mut graphs = Vec::new();
            for round in 0..rounds {
                graphs.push(sched.generate(round)?);
            }
            metrics_of(&graphs)
        }
    }
}

/// Metrics of an explicit window of round graphs.
pub fn metrics_of(graphs: &[RoundGraph]) -> Result<TopologyMetrics, NetworkError> {
    assert!(!graphs.is_empty());
    let mut delta = 0;
    let mut diam = 0;
    for (i, g) in graphs.iter().enumerate() {
        delta = delta.max(g.max_degree());
        diam = diam.max(diameter(g).ok_or(NetworkError::InvalidRound {
            round: i as u64,
            violation: Violation::Disconnected,
        })?);
    }
    let chrono = chronopath(graphs.iter()).ok_or(NetworkError::InsufficientWindow {
        rounds: graphs.len() as u64,
    })?;
    Ok(TopologyMetrics {
        delta,
        diameter: diam,
        chronopath: chrono,
    })
}

/// Opportunistic flooding completion time from every source at once: in each
/// round a node is reached if any of that round's neighbors was reached.
/// `None` if some source cannot reach everyone within the window.
pub fn chronopath<'a>(graphs: impl Iterator<Item = &'a RoundGraph>) -> Option<usize> {
    let mut reached: Vec<Vec<u64>> = Vec::new();
    let mut done_at: Vec<Option<usize>> = Vec::new();
    let mut adj_masks: Vec<Vec<u64>> = Vec::new();
    let mut words = 0;
    let mut n = 0;
    for (t, g) in graphs.enumerate() {
        if t == 0 {
            n = g.n();
            words = n.div_ceil(64);
            reached = (0..n)
                .map(|s| {
                    let mut m = vec![0u64; words];
                    m[s / 64] |= 1 << (s % 64);
                    m
                })
                .collect();
            done_at = vec![None; n];
            if n == 1 {
                return Some(0);
            }
            adj_masks = vec![vec![0u64; words]; n];
        }
        for mask in adj_masks.iter_mut() {
            mask.iter_mut().for_each(|w| *w = 0);
        }
        for &(u, v) in g.edges() {
            adj_masks[u][v / 64] |= 1 << (v % 64);
            adj_masks[v][u / 64] |= 1 << (u % 64);
        }
        let full = |m: &[u64]| {
            (0..n).all(|i| m[i / 64] & (1 << (i % 64)) != 0)
        };
        for s in 0..n {
            if done_at[s].is_some() {
                continue;
            }
            let mut next = reached[s].clone();
            for v in 0..n {
                if reached[s][v / 64] & (1 << (v % 64)) != 0 {
                    for w in 0..words {
                        next[w] |= adj_masks[v][w];
                    }
                }
            }
            reached[s] = next;
            if full(&reached[s]) {
                done_at[s] = Some(t + 1);
            }
        }
        if done_at.iter().all(|d| d.is_some()) {
            break;
        }
    }
    done_at
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .map(|v| v.into_iter().max().unwrap_or(0))
}
