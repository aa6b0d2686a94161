//! Finite subtrees of the quotient: epsilon-nets, the incremental subtree
//! spanned by a net, its contraction to combinatorial edges and the
//! nearest-point retraction onto it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quotient::QuotientTree;
use crate::shortest_path::{self, Adjacency};
use crate::union_find::UnionFind;

/// Contracted edges shorter than this are merged into their neighbors.
pub const MIN_EDGE_LENGTH: f64 = 1e-9;

/// Greedy farthest-point sampling over `region`, starting at `start`, until
/// every region class lies strictly within `eps` of the chosen set.
pub fn build_eps_net(zf: &QuotientTree, region: &[usize], start: usize, eps: f64) -> Result<Vec<usize>> {
    if region.is_empty() {
        return Err(Error::InvalidInput("empty net region".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidInput("eps must be positive".into()));
    }
    for &c in region {
        zf.check_class(c)?;
    }
    let mut net = vec![start];
    let mut nearest = zf.distances_from(start)?;
    loop {
        let (far, radius) = farthest(region, &nearest);
        if radius < eps {
            return Ok(net);
        }
        net.push(far);
        let fresh = zf.distances_from(far)?;
        for (d, f) in nearest.iter_mut().zip(fresh) {
            *d = d.min(f);
        }
    }
}

fn farthest(region: &[usize], dist: &[f64]) -> (usize, f64) {
    let mut best = (region[0], f64::NEG_INFINITY);
    for &c in region {
        let d = dist[c];
        if d > best.1 || (d == best.1 && c < best.0) {
            best = (c, d);
        }
    }
    best
}

/// Largest distance from a region class to the nearest net class.
pub fn covering_radius(zf: &QuotientTree, region: &[usize], net: &[usize]) -> Result<f64> {
    let sp = shortest_path::multi_source(zf.adjacency(), net);
    Ok(region.iter().map(|&c| sp.dist[c]).fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeEdge {
    /// Vertex index of the endpoint the edge is measured from.
    pub u: usize,
    pub v: usize,
    pub lambda: f64,
    /// Classes from `u` to `v`, inclusive.
    pub class_path: Vec<usize>,
    /// Accumulated length at every class of `class_path`.
    pub offsets: Vec<f64>,
}

/// A point of a finite tree: an edge and the arc length from its `u` end.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreePoint {
    pub edge: usize,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteTree {
    /// Class id of every vertex.
    pub vertices: Vec<usize>,
    /// Edges in prefix-connected order once [`order_edges`] has run.
    pub edges: Vec<TreeEdge>,
    /// Position of each edge in construction order.
    pub ordering: Vec<usize>,
    pub net: Vec<usize>,
    /// Set when the net had a single point and the tree is one vertex.
    pub degenerate: bool,
    /// Number of edges merged away for being shorter than [`MIN_EDGE_LENGTH`].
    pub merged_short_edges: usize,
}

impl FiniteTree {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn lambda_min(&self) -> f64 {
        self.edges.iter().map(|e| e.lambda).fold(f64::INFINITY, f64::min)
    }

    /// Net size used for the combinatorial bounds (distinct classes).
    pub fn net_size(&self) -> usize {
        let mut n = self.net.clone();
        n.sort_unstable();
        n.dedup();
        n.len()
    }

    /// `|V| <= 2k - 2` and `E <= 2k - 3` for a `k`-point net, `k >= 2`.
    pub fn within_bounds(&self) -> bool {
        let k = self.net_size();
        if k < 2 {
            return self.edges.is_empty() && self.vertices.len() == 1;
        }
        self.vertices.len() <= 2 * k - 2 && self.edges.len() <= 2 * k - 3
    }

    /// Vertex adjacency as `(neighbor, edge)` pairs.
    pub fn vertex_adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for (i, e) in self.edges.iter().enumerate() {
            adj[e.u].push((e.v, i));
            adj[e.v].push((e.u, i));
        }
        adj
    }

    /// Tree distances between all pairs of vertices.
    pub fn vertex_distances(&self) -> Vec<Vec<f64>> {
        let adj: Adjacency = self
            .vertex_adjacency()
            .into_iter()
            .map(|row| row.into_iter().map(|(n, e)| (n, self.edges[e].lambda)).collect())
            .collect();
        (0..self.vertices.len()).map(|v| shortest_path::single_source(&adj, v).dist).collect()
    }

    pub fn check_point(&self, p: TreePoint) -> Result<()> {
        let e = self.edges.get(p.edge).ok_or(Error::InvalidInput(format!("no edge {}", p.edge)))?;
        if !(p.offset >= 0.0 && p.offset <= e.lambda) {
            return Err(Error::OffsetOutOfRange { edge: p.edge, offset: p.offset, lambda: e.lambda });
        }
        Ok(())
    }

    /// Tree metric between two points, given [`FiniteTree::vertex_distances`].
    pub fn point_distance(&self, vd: &[Vec<f64>], p: TreePoint, q: TreePoint) -> f64 {
        let (ep, eq) = (&self.edges[p.edge], &self.edges[q.edge]);
        if p.edge == q.edge {
            return (p.offset - q.offset).abs();
        }
        let ends_p = [(ep.u, p.offset), (ep.v, ep.lambda - p.offset)];
        let ends_q = [(eq.u, q.offset), (eq.v, eq.lambda - q.offset)];
        let mut best = f64::INFINITY;
        for &(a, da) in &ends_p {
            for &(b, db) in &ends_q {
                best = best.min(da + vd[a][b] + db);
            }
        }
        best
    }

    /// Point of the tree sitting at a class that lies on it.
    pub fn locate_class(&self, class: usize) -> Option<TreePoint> {
        self.edges.iter().enumerate().find_map(|(i, e)| {
            e.class_path.iter().position(|&c| c == class).map(|k| TreePoint { edge: i, offset: e.offsets[k] })
        })
    }

    /// All classes lying on the tree (vertices and edge interiors), sorted.
    pub fn classes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.vertices.clone();
        for e in &self.edges {
            all.extend_from_slice(&e.class_path);
        }
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Vertex distances and next hops of a finite tree, for geodesic queries
/// between tree points.
#[derive(Clone, Debug)]
pub struct TreeMetric {
    pub vertex_distance: Vec<Vec<f64>>,
    /// `toward[b][v]`: the neighbor of `v` and the edge leading to `b`.
    toward: Vec<Vec<(usize, usize)>>,
}

impl TreeMetric {
    pub fn new(tree: &FiniteTree) -> Self {
        let nv = tree.vertices.len();
        let adj = tree.vertex_adjacency();
        let mut toward = vec![vec![(usize::MAX, usize::MAX); nv]; nv];
        for (b, row) in toward.iter_mut().enumerate() {
            let mut queue = std::collections::VecDeque::from([b]);
            let mut seen = vec![false; nv];
            seen[b] = true;
            while let Some(x) = queue.pop_front() {
                for &(y, e) in &adj[x] {
                    if !seen[y] {
                        seen[y] = true;
                        row[y] = (x, e);
                        queue.push_back(y);
                    }
                }
            }
        }
        Self { vertex_distance: tree.vertex_distances(), toward }
    }

    pub fn distance(&self, tree: &FiniteTree, p: TreePoint, q: TreePoint) -> f64 {
        tree.point_distance(&self.vertex_distance, p, q)
    }

    /// The point at fraction `t` of the way from `p` to `q` along the arc.
    pub fn interpolate(&self, tree: &FiniteTree, p: TreePoint, q: TreePoint, t: f64) -> TreePoint {
        if t <= 0.0 {
            return p;
        }
        if t >= 1.0 {
            return q;
        }
        if p.edge == q.edge {
            return TreePoint { edge: p.edge, offset: p.offset + t * (q.offset - p.offset) };
        }
        let (ep, eq) = (&tree.edges[p.edge], &tree.edges[q.edge]);
        let mut best = (f64::INFINITY, 0, 0, 0.0, 0.0);
        for (a, da) in [(ep.u, p.offset), (ep.v, ep.lambda - p.offset)] {
            for (b, db) in [(eq.u, q.offset), (eq.v, eq.lambda - q.offset)] {
                let total = da + self.vertex_distance[a][b] + db;
                if total < best.0 {
                    best = (total, a, b, da, db);
                }
            }
        }
        let (total, a, b, da, _) = best;
        let mut s = t * total;
        if s <= da {
            let offset = if a == ep.u { p.offset - s } else { p.offset + s };
            return TreePoint { edge: p.edge, offset: offset.clamp(0.0, ep.lambda) };
        }
        s -= da;
        let mut cur = a;
        while cur != b {
            let (next, e) = self.toward[b][cur];
            let edge = &tree.edges[e];
            if s <= edge.lambda {
                let offset = if cur == edge.u { s } else { edge.lambda - s };
                return TreePoint { edge: e, offset };
            }
            s -= edge.lambda;
            cur = next;
        }
        let offset = if b == eq.u { s } else { eq.lambda - s };
        TreePoint { edge: q.edge, offset: offset.clamp(0.0, eq.lambda) }
    }
}

/// Builds the subtree spanned by `net` one arc at a time, contracts it to
/// combinatorial edges and orders the edges from `net[0]`.
pub fn build_subtree(zf: &QuotientTree, net: &[usize]) -> Result<FiniteTree> {
    let Some(&first) = net.first() else {
        return Err(Error::EmptySourceSet);
    };
    for &c in net {
        zf.check_class(c)?;
    }
    let n = zf.num_classes();
    let mut on_tree = vec![false; n];
    on_tree[first] = true;
    let mut tree_classes = vec![first];
    let mut tree_edges: Vec<(usize, usize, f64)> = Vec::new();

    for &a in &net[1..] {
        if on_tree[a] {
            continue;
        }
        let sp = shortest_path::multi_source(zf.adjacency(), &tree_classes);
        if !sp.dist[a].is_finite() {
            return Err(Error::DisconnectedDomain { components: 2 });
        }
        let mut path = sp.path_to_source(a);
        if let Some(hit) = path.iter().position(|&c| on_tree[c]) {
            path.truncate(hit + 1);
        }
        for w in path.windows(2) {
            let (x, y) = (w[0], w[1]);
            if on_tree[x] {
                return Err(Error::CycleDetected(x));
            }
            let len = zf.adjacency()[x].iter().filter(|&&(t, _)| t == y).map(|&(_, l)| l).fold(f64::INFINITY, f64::min);
            tree_edges.push((x, y, len));
            on_tree[x] = true;
            tree_classes.push(x);
        }
    }
    if tree_edges.len() + 1 != tree_classes.len() {
        return Err(Error::CycleDetected(tree_classes[0]));
    }

    let mut is_net = vec![false; n];
    for &c in net {
        is_net[c] = true;
    }
    let tree = contract(&tree_classes, &tree_edges, &is_net, first)?;
    let mut tree = FiniteTree { net: net.to_vec(), ..tree };
    if tree.edges.is_empty() {
        tree.degenerate = true;
        log::warn!("net has a single point; the finite tree is one vertex");
        return Ok(tree);
    }
    let tree = order_edges(tree)?;
    if !tree.within_bounds() {
        return Err(Error::InvalidInput(format!(
            "subtree has {} vertices and {} edges for a {}-point net",
            tree.vertices.len(),
            tree.edges.len(),
            tree.net_size()
        )));
    }
    Ok(tree)
}

fn contract(classes: &[usize], edges: &[(usize, usize, f64)], is_net: &[bool], root: usize) -> Result<FiniteTree> {
    let mut local = std::collections::HashMap::new();
    for (i, &c) in classes.iter().enumerate() {
        local.insert(c, i);
    }
    let m = classes.len();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    for &(a, b, w) in edges {
        let (a, b) = (local[&a], local[&b]);
        adj[a].push((b, w));
        adj[b].push((a, w));
    }
    for row in &mut adj {
        row.sort_by_key(|&(t, _)| classes[t]);
    }
    let is_vertex: Vec<bool> = (0..m).map(|i| classes[i] == root || is_net[classes[i]] || adj[i].len() != 2).collect();
    let mut vertex_id = vec![usize::MAX; m];
    let mut vertices = Vec::new();
    // Vertex ids follow class order, except the root which always comes first.
    let mut order: Vec<usize> = (0..m).filter(|&i| is_vertex[i]).collect();
    order.sort_by_key(|&i| (classes[i] != root, classes[i]));
    for i in order {
        vertex_id[i] = vertices.len();
        vertices.push(classes[i]);
    }

    let mut out = Vec::new();
    for start in 0..m {
        if !is_vertex[start] {
            continue;
        }
        for &(next, w) in &adj[start] {
            let mut path = vec![classes[start]];
            let mut offsets = vec![0.0];
            let (mut prev, mut cur, mut total) = (start, next, w);
            loop {
                path.push(classes[cur]);
                offsets.push(total);
                if is_vertex[cur] {
                    break;
                }
                let &(nx, nw) = adj[cur].iter().find(|&&(t, _)| t != prev).expect("degree-2 class");
                prev = cur;
                cur = nx;
                total += nw;
            }
            // each chain is found from both ends; keep one copy
            if vertex_id[start] < vertex_id[cur] || (vertex_id[start] == vertex_id[cur] && path[1] < path[path.len() - 2]) {
                out.push(TreeEdge { u: vertex_id[start], v: vertex_id[cur], lambda: total, class_path: path, offsets });
            }
        }
    }
    out.sort_by(|a, b| (a.u, a.v, &a.class_path).cmp(&(b.u, b.v, &b.class_path)));
    let (vertices, edges, merged) = merge_short_edges(vertices, out);
    let ordering = (0..edges.len()).collect();
    Ok(FiniteTree { vertices, edges, ordering, net: Vec::new(), degenerate: false, merged_short_edges: merged })
}

fn merge_short_edges(vertices: Vec<usize>, edges: Vec<TreeEdge>) -> (Vec<usize>, Vec<TreeEdge>, usize) {
    let short = edges.iter().filter(|e| e.lambda < MIN_EDGE_LENGTH).count();
    if short == 0 {
        return (vertices, edges, 0);
    }
    log::warn!("merging {short} tree edges shorter than {MIN_EDGE_LENGTH}");
    let mut uf = UnionFind::new(vertices.len());
    for e in edges.iter().filter(|e| e.lambda < MIN_EDGE_LENGTH) {
        // keep the smaller vertex id as the survivor
        let (lo, hi) = (e.u.min(e.v), e.u.max(e.v));
        let (rl, rh) = (uf.find(lo), uf.find(hi));
        uf.union(rl.min(rh), rl.max(rh));
    }
    let mut rep = vec![0; vertices.len()];
    let mut min_member = vec![usize::MAX; vertices.len()];
    for v in 0..vertices.len() {
        rep[v] = uf.find(v);
        min_member[rep[v]] = min_member[rep[v]].min(v);
    }
    let mut new_id = vec![usize::MAX; vertices.len()];
    let mut kept = Vec::new();
    for v in 0..vertices.len() {
        if min_member[rep[v]] == v {
            new_id[rep[v]] = kept.len();
            kept.push(vertices[v]);
        }
    }
    let edges = edges
        .into_iter()
        .filter(|e| e.lambda >= MIN_EDGE_LENGTH)
        .map(|e| TreeEdge { u: new_id[rep[e.u]], v: new_id[rep[e.v]], ..e })
        .collect();
    (kept, edges, short)
}

/// Breadth-first edge order from vertex 0, with every edge oriented so that
/// its `u` end is already covered by the earlier edges.
pub fn order_edges(tree: FiniteTree) -> Result<FiniteTree> {
    let nv = tree.vertices.len();
    if tree.edges.is_empty() {
        return Ok(tree);
    }
    let adj = tree.vertex_adjacency();
    let mut seen = vec![false; nv];
    let mut queue = std::collections::VecDeque::from([0]);
    seen[0] = true;
    let mut order = Vec::with_capacity(tree.edges.len());
    let mut used = vec![false; tree.edges.len()];
    while let Some(x) = queue.pop_front() {
        let mut row = adj[x].clone();
        row.sort_by_key(|&(_, e)| e);
        for (y, e) in row {
            if used[e] {
                continue;
            }
            if seen[y] {
                return Err(Error::CycleDetected(tree.vertices[y]));
            }
            used[e] = true;
            seen[y] = true;
            order.push((e, x));
            queue.push_back(y);
        }
    }
    if order.len() != tree.edges.len() {
        return Err(Error::OrderingViolation(order.len()));
    }
    let mut edges = Vec::with_capacity(order.len());
    let mut ordering = Vec::with_capacity(order.len());
    for &(e, from) in &order {
        let mut edge = tree.edges[e].clone();
        if edge.u != from {
            std::mem::swap(&mut edge.u, &mut edge.v);
            edge.class_path.reverse();
            let total = edge.lambda;
            edge.offsets = edge.offsets.iter().rev().map(|o| total - o).collect();
        }
        edges.push(edge);
        ordering.push(tree.ordering[e]);
    }
    Ok(FiniteTree { edges, ordering, ..tree })
}

/// Whether every prefix of the edge list is connected and each `u` lies in
/// the previous prefix.
pub fn is_prefix_connected(tree: &FiniteTree) -> bool {
    let mut covered = vec![false; tree.vertices.len()];
    for (k, e) in tree.edges.iter().enumerate() {
        if k == 0 {
            covered[e.u] = true;
        } else if !covered[e.u] || covered[e.v] {
            return false;
        }
        covered[e.v] = true;
    }
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retraction {
    /// Nearest tree class of every class.
    pub nearest: Vec<usize>,
    /// `r(x)` as a tree point; empty for a single-vertex tree.
    pub to_tree: Vec<TreePoint>,
    /// `d(x, r(x))`.
    pub displacement: Vec<f64>,
}

impl Retraction {
    pub fn max_displacement(&self, classes: &[usize]) -> f64 {
        classes.iter().map(|&c| self.displacement[c]).fold(0.0, f64::max)
    }
}

/// Nearest-point retraction of the quotient onto the tree.
pub fn retract(zf: &QuotientTree, tree: &FiniteTree) -> Result<Retraction> {
    let sources = tree.classes();
    for &c in &sources {
        zf.check_class(c)?;
    }
    let sp = shortest_path::multi_source(zf.adjacency(), &sources);
    let mut lift = vec![None; zf.num_classes()];
    // vertices first through the smallest incident edge, then edge interiors
    for (i, e) in tree.edges.iter().enumerate().rev() {
        for (k, &c) in e.class_path.iter().enumerate() {
            let interior = k != 0 && k + 1 != e.class_path.len();
            if interior || lift[c].is_none() || matches!(lift[c], Some(TreePoint { edge, .. }) if edge > i) {
                lift[c] = Some(TreePoint { edge: i, offset: e.offsets[k] });
            }
        }
    }
    let to_tree = if tree.edges.is_empty() {
        Vec::new()
    } else {
        sp.source.iter().map(|&s| lift[s].expect("tree class")).collect()
    };
    Ok(Retraction { nearest: sp.source, to_tree, displacement: sp.dist })
}
