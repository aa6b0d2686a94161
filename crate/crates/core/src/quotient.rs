//! The quotient `Z_f = Omega / ~` with the maps `psi` (node to class) and
//! `phi` (class to value), tree verification and geodesics.
//!
//! Two neighboring nodes are identified when their values fall into the same
//! cell of the lattice `tau * Z^m` (centered on multiples of `tau`); with
//! `tau = 0` only exactly equal values are identified. The classes are the
//! connected components of that relation, i.e. discrete level sets at
//! resolution `tau`. Level-set bands thinner than the grid spacing can split
//! into fragments that close short cycles in the class graph; every
//! biconnected block whose value spread is at most [`BLOCK_MERGE_FACTOR`]` *
//! tau` is collapsed into a single class.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{euclid, SampledMap};
use crate::quasimetric::QuasiMetricGraph;
use crate::shortest_path::{self, Adjacency};
use crate::union_find::UnionFind;

/// Blocks of the class graph with value spread up to this many `tau` are
/// treated as discretization noise and collapsed.
pub const BLOCK_MERGE_FACTOR: f64 = 4.0;

#[derive(Clone, Debug)]
pub struct QuotientTree {
    codim: usize,
    class_of: Vec<usize>,
    representative: Vec<usize>,
    phi: Vec<f64>,
    edges: Vec<(usize, usize, f64)>,
    adjacency: Adjacency,
    zero_threshold: f64,
    spread: Vec<f64>,
}

/// Multiple of the largest edge image weight used as the default threshold.
/// With a factor of two every level band is at least two grid steps thick,
/// which keeps axis-staircase bands connected.
pub const DEFAULT_TAU_FACTOR: f64 = 2.0;

/// Default identification threshold: [`DEFAULT_TAU_FACTOR`] times the largest
/// edge image weight.
pub fn default_tau(graph: &QuasiMetricGraph) -> f64 {
    DEFAULT_TAU_FACTOR * graph.max_image_weight()
}

fn cell_key(value: &[f64], tau: f64) -> Vec<i64> {
    value.iter().map(|v| (v / tau + 0.5).floor() as i64).collect()
}

pub fn build_quotient(graph: &QuasiMetricGraph, map: &SampledMap, tau: f64) -> Result<QuotientTree> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::InvalidInput("tau must be finite and non-negative".into()));
    }
    let n = graph.num_nodes();
    let keys: Option<Vec<Vec<i64>>> = (tau > 0.0).then(|| (0..n).map(|v| cell_key(map.value(v), tau)).collect());
    let mut uf = UnionFind::new(n);
    for (&(x, y), &w) in graph.edges().iter().zip(graph.image_weights()) {
        let same = match &keys {
            Some(k) => k[x] == k[y],
            None => w <= 0.0,
        };
        if same {
            uf.union(x, y);
        }
    }
    let (mut labels, mut count) = uf.labels();
    loop {
        let (edges, rep) = class_edges(graph, map, &labels, count);
        let blocks = biconnected_blocks(count, &edges);
        let mut merge = UnionFind::new(count);
        let mut merged = false;
        for block in blocks.iter().filter(|b| b.len() >= 3) {
            let reps: Vec<usize> = block.iter().map(|&c| rep[c]).collect();
            let spread = reps
                .iter()
                .flat_map(|&a| reps.iter().map(move |&b| (a, b)))
                .map(|(a, b)| euclid(map.value(a), map.value(b)))
                .fold(0.0, f64::max);
            if spread <= BLOCK_MERGE_FACTOR * tau {
                for w in block.windows(2) {
                    merged |= merge.union(w[0], w[1]);
                }
            }
        }
        if !merged {
            break;
        }
        let (class_labels, new_count) = merge.labels();
        for l in labels.iter_mut() {
            *l = class_labels[*l];
        }
        // relabel by first appearance so ids stay ordered by smallest node
        let mut remap = vec![usize::MAX; new_count];
        let mut next = 0;
        for l in labels.iter_mut() {
            if remap[*l] == usize::MAX {
                remap[*l] = next;
                next += 1;
            }
            *l = remap[*l];
        }
        count = new_count;
    }
    QuotientTree::assemble(graph, map, labels, count, tau)
}

fn representatives(labels: &[usize], count: usize) -> Vec<usize> {
    let mut rep = vec![usize::MAX; count];
    for (v, &l) in labels.iter().enumerate() {
        if rep[l] == usize::MAX {
            rep[l] = v;
        }
    }
    rep
}

/// Class-graph edges with length `max(min image weight, |phi(a) - phi(b)|)`.
fn class_edges(
    graph: &QuasiMetricGraph,
    map: &SampledMap,
    labels: &[usize],
    count: usize,
) -> (Vec<(usize, usize, f64)>, Vec<usize>) {
    let rep = representatives(labels, count);
    let mut pairs: Vec<(usize, usize, f64)> = graph
        .edges()
        .iter()
        .zip(graph.image_weights())
        .filter_map(|(&(x, y), &w)| {
            let (a, b) = (labels[x], labels[y]);
            (a != b).then(|| (a.min(b), a.max(b), w))
        })
        .collect();
    pairs.sort_by(|p, q| (p.0, p.1).cmp(&(q.0, q.1)).then(p.2.total_cmp(&q.2)));
    pairs.dedup_by(|later, first| later.0 == first.0 && later.1 == first.1);
    for p in pairs.iter_mut() {
        p.2 = p.2.max(euclid(map.value(rep[p.0]), map.value(rep[p.1])));
    }
    (pairs, rep)
}

/// Vertex sets of the biconnected blocks of a simple graph.
fn biconnected_blocks(n: usize, edges: &[(usize, usize, f64)]) -> Vec<Vec<usize>> {
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (e, &(a, b, _)) in edges.iter().enumerate() {
        adj[a].push((b, e));
        adj[b].push((a, e));
    }
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut time = 0;
    let mut edge_stack: Vec<usize> = Vec::new();
    let mut blocks = Vec::new();
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        disc[root] = time;
        low[root] = time;
        time += 1;
        let mut stack: Vec<(usize, usize, usize)> = vec![(root, usize::MAX, 0)];
        while let Some(top) = stack.last_mut() {
            let (v, parent_edge, i) = *top;
            if i < adj[v].len() {
                top.2 += 1;
                let (w, e) = adj[v][i];
                if e == parent_edge {
                    continue;
                }
                if disc[w] == usize::MAX {
                    edge_stack.push(e);
                    disc[w] = time;
                    low[w] = time;
                    time += 1;
                    stack.push((w, e, 0));
                } else if disc[w] < disc[v] {
                    low[v] = low[v].min(disc[w]);
                    edge_stack.push(e);
                }
            } else {
                stack.pop();
                if let Some(&(u, _, _)) = stack.last() {
                    low[u] = low[u].min(low[v]);
                    if low[v] >= disc[u] {
                        let mut block = Vec::new();
                        while let Some(e) = edge_stack.pop() {
                            block.push(edges[e].0);
                            block.push(edges[e].1);
                            if e == parent_edge {
                                break;
                            }
                        }
                        block.sort_unstable();
                        block.dedup();
                        blocks.push(block);
                    }
                }
            }
        }
    }
    blocks
}

impl QuotientTree {
    fn assemble(
        graph: &QuasiMetricGraph,
        map: &SampledMap,
        labels: Vec<usize>,
        count: usize,
        tau: f64,
    ) -> Result<Self> {
        let codim = map.codim();
        let (edges, representative) = class_edges(graph, map, &labels, count);
        let mut phi = Vec::with_capacity(count * codim);
        for &r in &representative {
            phi.extend_from_slice(map.value(r));
        }
        let mut spread = vec![0.0f64; count];
        for (v, &c) in labels.iter().enumerate() {
            let d = euclid(map.value(v), &phi[c * codim..(c + 1) * codim]);
            spread[c] = spread[c].max(d);
        }
        let slack = (BLOCK_MERGE_FACTOR + 2.0 * (codim as f64).sqrt()) * tau + 1e-12;
        if let Some((class, &s)) = spread.iter().enumerate().find(|(_, &s)| s > slack) {
            return Err(Error::InconsistentClass { class, spread: s, slack });
        }
        let mut adjacency = vec![Vec::new(); count];
        for &(a, b, w) in &edges {
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
        Ok(Self {
            codim,
            class_of: labels,
            representative,
            phi,
            edges,
            adjacency,
            zero_threshold: tau,
            spread,
        })
    }

    /// Rebuilds a quotient from its stored parts.
    pub fn from_parts(
        codim: usize,
        class_of: Vec<usize>,
        representative: Vec<usize>,
        phi: Vec<f64>,
        edges: Vec<(usize, usize, f64)>,
        zero_threshold: f64,
    ) -> Result<Self> {
        let count = representative.len();
        if phi.len() != count * codim
            || class_of.iter().any(|&c| c >= count)
            || edges.iter().any(|&(a, b, w)| a >= count || b >= count || !(w >= 0.0))
        {
            return Err(Error::InvalidInput("inconsistent quotient data".into()));
        }
        let mut adjacency = vec![Vec::new(); count];
        for &(a, b, w) in &edges {
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
        Ok(Self {
            codim,
            class_of,
            representative,
            phi,
            edges,
            adjacency,
            zero_threshold,
            spread: vec![0.0; count],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.representative.len()
    }
    pub fn codim(&self) -> usize {
        self.codim
    }
    /// `psi`: class of an inside node.
    pub fn class_of(&self, node: usize) -> usize {
        self.class_of[node]
    }
    pub fn classes(&self) -> &[usize] {
        &self.class_of
    }
    pub fn representative(&self, class: usize) -> usize {
        self.representative[class]
    }
    pub fn representatives(&self) -> &[usize] {
        &self.representative
    }
    /// `phi`: value of a class.
    pub fn phi(&self, class: usize) -> &[f64] {
        &self.phi[class * self.codim..(class + 1) * self.codim]
    }
    pub fn phi_values(&self) -> &[f64] {
        &self.phi
    }
    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }
    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }
    pub fn zero_threshold(&self) -> f64 {
        self.zero_threshold
    }
    /// Largest `|f(x) - phi(class)|` over the nodes of each class.
    pub fn spread(&self, class: usize) -> f64 {
        self.spread[class]
    }
    pub fn max_spread(&self) -> f64 {
        self.spread.iter().copied().fold(0.0, f64::max)
    }
    pub fn degree(&self, class: usize) -> usize {
        self.adjacency[class].len()
    }
    /// Connected with `classes - 1` edges.
    pub fn is_tree_graph(&self) -> bool {
        self.edges.len() + 1 == self.num_classes()
            && shortest_path::single_source(&self.adjacency, 0).dist.iter().all(|d| d.is_finite())
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class < self.num_classes() {
            Ok(())
        } else {
            Err(Error::UnknownClass(class))
        }
    }

    pub fn distances_from(&self, class: usize) -> Result<Vec<f64>> {
        self.check_class(class)?;
        Ok(shortest_path::single_source(&self.adjacency, class).dist)
    }
}

pub fn quotient_distance(zf: &QuotientTree, a: usize, b: usize) -> Result<f64> {
    zf.check_class(b)?;
    Ok(zf.distances_from(a)?[b])
}

/// The shortest class path from `a` to `b`, inclusive. In a tree it is the
/// unique arc.
pub fn geodesic(zf: &QuotientTree, a: usize, b: usize) -> Result<Vec<usize>> {
    zf.check_class(a)?;
    zf.check_class(b)?;
    let sp = shortest_path::single_source(&zf.adjacency, a);
    let mut path = sp.path_to_source(b);
    path.reverse();
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeCheckReport {
    pub quadruples_tested: usize,
    pub max_four_point_defect: f64,
    pub pass: bool,
}

/// Four-point defect `d(x,y) + d(z,w) - max(d(x,z) + d(y,w), d(x,w) + d(y,z))`.
pub fn four_point_defect(d: impl Fn(usize, usize) -> f64, q: [usize; 4]) -> f64 {
    let [x, y, z, w] = q;
    d(x, y) + d(z, w) - (d(x, z) + d(y, w)).max(d(x, w) + d(y, z))
}

/// Classes drawn into the distance pool of [`check_tree`].
pub const TREE_CHECK_POOL: usize = 48;

/// Four-point test on quadruples drawn from a seeded pool of classes; every
/// quadruple is tested when the class count is small enough.
pub fn check_tree(zf: &QuotientTree, samples: usize, tol: f64, seed: u64) -> TreeCheckReport {
    let count = zf.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<usize> = if count <= TREE_CHECK_POOL {
        (0..count).collect()
    } else {
        let mut p = sample(&mut rng, count, TREE_CHECK_POOL).into_vec();
        p.sort_unstable();
        p
    };
    let rows: Vec<Vec<f64>> = pool
        .par_iter()
        .map(|&c| shortest_path::single_source(&zf.adjacency, c).dist)
        .collect();
    let k = pool.len();
    let d = |i: usize, j: usize| rows[i][pool[j]];
    let mut max_defect = 0.0f64;
    let mut tested = 0;
    if k.pow(4) <= samples.max(1) {
        for x in 0..k {
            for y in 0..k {
                for z in 0..k {
                    for w in 0..k {
                        max_defect = max_defect.max(four_point_defect(d, [x, y, z, w]));
                        tested += 1;
                    }
                }
            }
        }
    } else {
        for _ in 0..samples.max(1) {
            let q = [0; 4].map(|_| rng.gen_range(0..k));
            max_defect = max_defect.max(four_point_defect(d, q));
            tested += 1;
        }
    }
    TreeCheckReport {
        quadruples_tested: tested,
        max_four_point_defect: max_defect,
        pass: max_defect <= tol,
    }
}

/// Serialized quotient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeFile {
    pub version: u32,
    /// Class of every inside node, in compact node order.
    pub classes: Vec<usize>,
    pub representatives: Vec<usize>,
    pub edges: Vec<(usize, usize, f64)>,
    pub phi: Vec<Vec<f64>>,
    pub zero_threshold: f64,
}

impl From<&QuotientTree> for TreeFile {
    fn from(zf: &QuotientTree) -> Self {
        Self {
            version: 1,
            classes: zf.class_of.clone(),
            representatives: zf.representative.clone(),
            edges: zf.edges.clone(),
            phi: zf.phi.chunks(zf.codim).map(<[f64]>::to_vec).collect(),
            zero_threshold: zf.zero_threshold,
        }
    }
}

impl TryFrom<TreeFile> for QuotientTree {
    type Error = Error;
    fn try_from(file: TreeFile) -> Result<Self> {
        let codim = file.phi.first().map_or(1, Vec::len);
        let phi = file.phi.into_iter().flatten().collect();
        QuotientTree::from_parts(codim, file.classes, file.representatives, phi, file.edges, file.zero_threshold)
    }
}
