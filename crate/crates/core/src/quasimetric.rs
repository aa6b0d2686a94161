//! The pullback quasimetric `d_f` as a shortest-path distance on the grid.
//!
//! Curves are restricted to grid paths. Each grid edge carries the image
//! length of the segment under the multilinear interpolant of the samples,
//! estimated by summing `|f(p_{i+1}) - f(p_i)|` over a uniform subdivision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{euclid, SampledMap};
use crate::shortest_path::{self, Adjacency};

#[derive(Clone, Debug)]
pub struct QuasiMetricGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    image_weight: Vec<f64>,
    euclid_weight: Vec<f64>,
    adjacency: Adjacency,
}

/// Options for [`build_weight_graph`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphOptions {
    pub subdivision: usize,
    /// Also connect nodes that differ by one step on several axes.
    pub diagonals: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self { subdivision: 1, diagonals: false }
    }
}

/// Multilinear interpolation of the samples at `point`, if every corner of
/// the enclosing cell is inside.
pub fn interpolate(map: &SampledMap, point: &[f64]) -> Option<Vec<f64>> {
    let domain = map.domain();
    let dim = domain.dim();
    let mut base = vec![0usize; dim];
    let mut frac = vec![0.0; dim];
    for a in 0..dim {
        let t = (point[a] - domain.origin()[a]) / domain.spacing()[a];
        let n = domain.shape()[a];
        if t < -1e-12 || t > (n - 1) as f64 + 1e-12 {
            return None;
        }
        let cell = (t.floor().max(0.0) as usize).min(n.saturating_sub(2));
        base[a] = cell;
        frac[a] = if n == 1 { 0.0 } else { (t - cell as f64).clamp(0.0, 1.0) };
    }
    let mut out = vec![0.0; map.codim()];
    let mut corner = vec![0usize; dim];
    for mask in 0..(1usize << dim) {
        let mut weight = 1.0;
        for a in 0..dim {
            let bit = (mask >> a) & 1;
            corner[a] = (base[a] + bit).min(domain.shape()[a] - 1);
            weight *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if weight == 0.0 {
            continue;
        }
        let node = domain.compact_of(domain.ravel(&corner))?;
        for (o, v) in out.iter_mut().zip(map.value(node)) {
            *o += weight * v;
        }
    }
    Some(out)
}

fn segment_image_length(map: &SampledMap, x: usize, y: usize, subdivision: usize) -> f64 {
    let fx = map.value(x);
    let fy = map.value(y);
    if subdivision <= 1 {
        return euclid(fx, fy);
    }
    let px = map.domain().point(x);
    let py = map.domain().point(y);
    let mut prev = fx.to_vec();
    let mut total = 0.0;
    for i in 1..=subdivision {
        let next = if i == subdivision {
            fy.to_vec()
        } else {
            let t = i as f64 / subdivision as f64;
            let p: Vec<f64> = px.iter().zip(&py).map(|(a, b)| a + t * (b - a)).collect();
            // straight-line interpolation when the cell leaves the mask
            interpolate(map, &p).unwrap_or_else(|| fx.iter().zip(fy).map(|(a, b)| a + t * (b - a)).collect())
        };
        total += euclid(&prev, &next);
        prev = next;
    }
    total
}

/// Builds the weighted grid graph carrying `d_f`.
pub fn build_weight_graph(map: &SampledMap, options: GraphOptions) -> QuasiMetricGraph {
    let domain = map.domain();
    let dim = domain.dim();
    let strides = domain.strides();
    let offsets: Vec<Vec<i64>> = if options.diagonals {
        (0..3usize.pow(dim as u32))
            .map(|mut code| {
                (0..dim)
                    .map(|_| {
                        let d = (code % 3) as i64 - 1;
                        code /= 3;
                        d
                    })
                    .collect::<Vec<i64>>()
            })
            .filter(|o| o.iter().any(|&d| d != 0) && o.iter().find(|&&d| d != 0) == Some(&1))
            .collect()
    } else {
        (0..dim)
            .map(|a| (0..dim).map(|b| i64::from(a == b)).collect())
            .collect()
    };
    let mut edges = Vec::new();
    for x in 0..domain.num_inside() {
        let index = domain.unravel(domain.flat_of(x));
        'offsets: for off in &offsets {
            let mut flat = domain.flat_of(x) as i64;
            for a in 0..dim {
                let i = index[a] as i64 + off[a];
                if i < 0 || i >= domain.shape()[a] as i64 {
                    continue 'offsets;
                }
                flat += off[a] * strides[a] as i64;
            }
            if let Some(y) = domain.compact_of(flat as usize) {
                edges.push((x.min(y), x.max(y)));
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    let subdivision = options.subdivision.max(1);
    let image_weight: Vec<f64> = edges
        .iter()
        .map(|&(x, y)| segment_image_length(map, x, y, subdivision))
        .collect();
    let euclid_weight: Vec<f64> = edges
        .iter()
        .map(|&(x, y)| euclid(&domain.point(x), &domain.point(y)))
        .collect();
    let mut adjacency = vec![Vec::new(); domain.num_inside()];
    for (&(x, y), &w) in edges.iter().zip(&image_weight) {
        adjacency[x].push((y, w));
        adjacency[y].push((x, w));
    }
    QuasiMetricGraph {
        num_nodes: domain.num_inside(),
        edges,
        image_weight,
        euclid_weight,
        adjacency,
    }
}

impl QuasiMetricGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }
    pub fn image_weights(&self) -> &[f64] {
        &self.image_weight
    }
    pub fn euclid_weights(&self) -> &[f64] {
        &self.euclid_weight
    }
    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }
    pub fn max_image_weight(&self) -> f64 {
        self.image_weight.iter().copied().fold(0.0, f64::max)
    }

    /// Max ratio of image to Euclidean edge length over edges with both
    /// endpoints in `nodes` (all edges when `None`).
    pub fn lipschitz_scale(&self, nodes: Option<&[bool]>) -> f64 {
        self.edges
            .iter()
            .zip(self.image_weight.iter().zip(&self.euclid_weight))
            .filter(|((x, y), _)| nodes.is_none_or(|m| m[*x] && m[*y]))
            .map(|(_, (w, e))| w / e)
            .fold(0.0, f64::max)
    }

    fn check(&self, node: usize) -> Result<()> {
        if node < self.num_nodes {
            Ok(())
        } else {
            Err(Error::NodeNotInGraph(node))
        }
    }

    /// All distances from `source`.
    pub fn df_from(&self, source: usize) -> Result<Vec<f64>> {
        self.check(source)?;
        Ok(shortest_path::single_source(&self.adjacency, source).dist)
    }
}

pub fn df_distance(graph: &QuasiMetricGraph, source: usize, target: usize) -> Result<f64> {
    graph.check(target)?;
    Ok(graph.df_from(source)?[target])
}

/// Distance to, and id of, the nearest source for every node.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSource {
    pub distance: Vec<f64>,
    pub nearest: Vec<usize>,
}

pub fn df_multisource(graph: &QuasiMetricGraph, sources: &[usize]) -> Result<MultiSource> {
    if sources.is_empty() {
        return Err(Error::EmptySourceSet);
    }
    for &s in sources {
        graph.check(s)?;
    }
    let sp = shortest_path::multi_source(&graph.adjacency, sources);
    Ok(MultiSource { distance: sp.dist, nearest: sp.source })
}

/// Debug dump of the graph.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphDump {
    pub nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub image_weight: Vec<f64>,
    pub euclid_weight: Vec<f64>,
}

impl From<&QuasiMetricGraph> for GraphDump {
    fn from(g: &QuasiMetricGraph) -> Self {
        Self {
            nodes: g.num_nodes,
            edges: g.edges.clone(),
            image_weight: g.image_weight.clone(),
            euclid_weight: g.euclid_weight.clone(),
        }
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::grid::{build_grid_domain, generate_map, GridSpec, MapCase, MapParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(points: usize) -> crate::grid::GridDomain {
        build_grid_domain(&GridSpec::unit_cube(2, points), |_| true).unwrap()
    }

    #[test]
    fn constant_map_has_zero_weights() {
        let d = square(9);
        let map = generate_map(MapCase::Constant, &d, &MapParams::default()).unwrap();
        let g = build_weight_graph(&map, GraphOptions::default());
        assert!(g.image_weights().iter().all(|&w| w == 0.0));
        assert_eq!(df_distance(&g, 0, 80).unwrap(), 0.0);
    }

    #[test]
    fn linear_map_weights_follow_axes() {
        let d = square(9);
        let map = SampledMap::from_fn(d.clone(), 1, |x| vec![x[0]]).unwrap();
        let g = build_weight_graph(&map, GraphOptions { subdivision: 3, diagonals: false });
        let h = 1.0 / 8.0;
        for (&(x, y), &w) in g.edges().iter().zip(g.image_weights()) {
            let (px, py) = (d.point(x), d.point(y));
            if px[0] != py[0] {
                assert!((w - h).abs() < 1e-15);
            } else {
                assert!(w.abs() < 1e-15);
            }
        }
        // (0, y) -> (1, y)
        assert!((df_distance(&g, 4, 8 * 9 + 4).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn subdivision_never_decreases_weights() {
        let d = square(17);
        let params = MapParams::default();
        let map = generate_map(MapCase::SaddleReeb, &d, &params).unwrap();
        let opts = |s| GraphOptions { subdivision: s, diagonals: true };
        let g1 = build_weight_graph(&map, opts(1));
        let g4 = build_weight_graph(&map, opts(4));
        let g8 = build_weight_graph(&map, opts(8));
        let lip = 2.0 * (2.0f64).sqrt() * 0.5 * 1.25;
        for i in 0..g1.edges().len() {
            let (w1, w4, w8) = (g1.image_weights()[i], g4.image_weights()[i], g8.image_weights()[i]);
            assert!(w4 >= w1 - 1e-15 && w8 >= w4 - 1e-15);
            assert!(w8 <= lip * g1.euclid_weights()[i] + 1e-12);
        }
    }

    #[test]
    fn unknown_node_and_empty_sources() {
        let d = square(3);
        let map = generate_map(MapCase::MonotoneLine, &d, &MapParams::default()).unwrap();
        let g = build_weight_graph(&map, GraphOptions::default());
        assert!(matches!(df_distance(&g, 0, 9), Err(Error::NodeNotInGraph(9))));
        assert!(matches!(df_multisource(&g, &[]), Err(Error::EmptySourceSet)));
    }

    #[test]
    fn multisource_is_min_of_single_runs() {
        let d = square(11);
        let map = generate_map(MapCase::MonotoneLine, &d, &MapParams::default()).unwrap();
        let g = build_weight_graph(&map, GraphOptions::default());
        let (a, b) = (13, 97);
        let da = g.df_from(a).unwrap();
        let db = g.df_from(b).unwrap();
        let ms = df_multisource(&g, &[b, a]).unwrap();
        for v in 0..g.num_nodes() {
            assert_eq!(ms.distance[v], da[v].min(db[v]));
            let expect = if da[v] <= db[v] { a } else { b };
            assert_eq!(ms.nearest[v], expect);
        }
        let all: Vec<usize> = (0..g.num_nodes()).collect();
        assert!(df_multisource(&g, &all).unwrap().distance.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn random_map_bounds() {
        let d = square(7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let map = SampledMap::from_fn(d, 2, |_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).unwrap();
        let g = build_weight_graph(&map, GraphOptions::default());
        let lip = g.lipschitz_scale(None);
        for s in 0..g.num_nodes() {
            let dist = g.df_from(s).unwrap();
            for t in 0..g.num_nodes() {
                assert!(euclid(map.value(s), map.value(t)) <= dist[t] + 1e-9);
                let ps = map.domain().point(s);
                let pt = map.domain().point(t);
                // grid paths are at most l1 long
                let l1: f64 = ps.iter().zip(&pt).map(|(a, b)| (a - b).abs()).sum();
                assert!(dist[t] <= lip * l1 + 1e-9);
            }
        }
    }
}
