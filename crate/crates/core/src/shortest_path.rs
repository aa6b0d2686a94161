//! Dijkstra over adjacency lists with deterministic tie-breaking.
//!
//! Ties in distance are resolved towards the smaller node id, and the
//! nearest-source label prefers the smaller source id at equal distance.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

pub type Adjacency = Vec<Vec<(usize, f64)>>;

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    dist: f64,
    source: usize,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (dist, source, node)
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.source.cmp(&self.source))
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug)]
pub struct ShortestPaths {
    pub dist: Vec<f64>,
    /// Nearest source per node (`usize::MAX` when unreachable).
    pub source: Vec<usize>,
    /// Predecessor towards the nearest source (`usize::MAX` at sources).
    pub pred: Vec<usize>,
}

impl ShortestPaths {
    /// Nodes from `node` back to its nearest source, inclusive.
    pub fn path_to_source(&self, mut node: usize) -> Vec<usize> {
        let mut path = vec![node];
        while self.pred[node] != usize::MAX {
            node = self.pred[node];
            path.push(node);
        }
        path
    }
}

pub fn multi_source(adj: &Adjacency, sources: &[usize]) -> ShortestPaths {
    let n = adj.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut source = vec![usize::MAX; n];
    let mut pred = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    let mut sorted: Vec<usize> = sources.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &s in &sorted {
        dist[s] = 0.0;
        source[s] = s;
        heap.push(Entry { dist: 0.0, source: s, node: s });
    }
    while let Some(Entry { dist: d, source: src, node }) = heap.pop() {
        if d > dist[node] || (d == dist[node] && src != source[node]) {
            continue;
        }
        for &(next, w) in &adj[node] {
            let nd = d + w;
            let better = nd < dist[next] || (nd == dist[next] && src < source[next] && source[next] != next);
            if better {
                dist[next] = nd;
                source[next] = src;
                pred[next] = node;
                heap.push(Entry { dist: nd, source: src, node: next });
            }
        }
    }
    ShortestPaths { dist, source, pred }
}

pub fn single_source(adj: &Adjacency, s: usize) -> ShortestPaths {
    multi_source(adj, &[s])
}
