//! Regular grid domains, sampled maps and finite-difference rank checks.
//!
//! Nodes are stored in row-major order: the last axis varies fastest. Inside
//! nodes additionally carry a compact id (their rank among inside nodes in
//! row-major order), which is the node id used by every graph in the crate.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NOT_INSIDE: u32 = u32::MAX;

/// A discretized domain: a box of nodes with an inside mask and a basepoint.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDomain {
    shape: Vec<usize>,
    spacing: Vec<f64>,
    origin: Vec<f64>,
    inside: Vec<bool>,
    basepoint: usize,
    inside_nodes: Vec<usize>,
    compact: Vec<u32>,
}

/// Box geometry used to build a [`GridDomain`] from a predicate.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    /// Multi-index of the basepoint `x_o`.
    pub basepoint: Vec<usize>,
}

impl GridSpec {
    /// `points` nodes per axis spanning the closed unit cube `[0,1]^dim`,
    /// basepoint at the central node.
    pub fn unit_cube(dim: usize, points: usize) -> Self {
        assert!(points >= 2);
        Self {
            shape: vec![points; dim],
            spacing: vec![1.0 / (points - 1) as f64; dim],
            origin: vec![0.0; dim],
            basepoint: vec![points / 2; dim],
        }
    }

    pub fn with_shape(shape: &[usize]) -> Self {
        let spacing = shape.iter().map(|&p| 1.0 / (p.max(2) - 1) as f64).collect();
        Self {
            shape: shape.to_vec(),
            spacing,
            origin: vec![0.0; shape.len()],
            basepoint: shape.iter().map(|&p| p / 2).collect(),
        }
    }
}

/// Builds a domain whose inside nodes are those where `inside` holds.
pub fn build_grid_domain(spec: &GridSpec, inside: impl Fn(&[f64]) -> bool) -> Result<GridDomain> {
    let dim = spec.shape.len();
    if dim == 0 || spec.spacing.len() != dim || spec.origin.len() != dim {
        return Err(Error::InvalidInput("shape, spacing and origin must share a positive length".into()));
    }
    let total: usize = spec.shape.iter().product();
    let mut mask = vec![false; total];
    let mut point = vec![0.0; dim];
    let mut index = vec![0usize; dim];
    for (flat, slot) in mask.iter_mut().enumerate() {
        unravel_into(&spec.shape, flat, &mut index);
        for a in 0..dim {
            point[a] = spec.origin[a] + index[a] as f64 * spec.spacing[a];
        }
        *slot = inside(&point);
    }
    GridDomain::new(
        spec.shape.clone(),
        spec.spacing.clone(),
        spec.origin.clone(),
        mask,
        &spec.basepoint,
    )
}

fn unravel_into(shape: &[usize], mut flat: usize, out: &mut [usize]) {
    for a in (0..shape.len()).rev() {
        out[a] = flat % shape[a];
        flat /= shape[a];
    }
}

impl GridDomain {
    pub fn new(
        shape: Vec<usize>,
        spacing: Vec<f64>,
        origin: Vec<f64>,
        inside: Vec<bool>,
        basepoint: &[usize],
    ) -> Result<Self> {
        let dim = shape.len();
        if dim == 0 || spacing.len() != dim || origin.len() != dim || basepoint.len() != dim {
            return Err(Error::InvalidInput("inconsistent grid dimensions".into()));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidInput("every axis needs at least one node".into()));
        }
        if spacing.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidInput("spacing must be positive and finite".into()));
        }
        if inside.len() != shape.iter().product::<usize>() {
            return Err(Error::InvalidInput("inside mask length does not match shape".into()));
        }
        if basepoint.iter().zip(&shape).any(|(&b, &s)| b >= s) {
            return Err(Error::BasepointOutside(basepoint.to_vec()));
        }
        let mut flat = 0;
        for a in 0..dim {
            flat = flat * shape[a] + basepoint[a];
        }
        if !inside[flat] {
            return Err(Error::BasepointOutside(basepoint.to_vec()));
        }
        let mut compact = vec![NOT_INSIDE; inside.len()];
        let mut inside_nodes = Vec::new();
        for (i, &b) in inside.iter().enumerate() {
            if b {
                compact[i] = inside_nodes.len() as u32;
                inside_nodes.push(i);
            }
        }
        let domain = Self {
            shape,
            spacing,
            origin,
            inside,
            basepoint: flat,
            inside_nodes,
            compact,
        };
        let components = domain.count_components();
        if components != 1 {
            return Err(Error::DisconnectedDomain { components });
        }
        Ok(domain)
    }

    fn count_components(&self) -> usize {
        let all = vec![true; self.inside_nodes.len()];
        let mut seen = vec![false; self.inside_nodes.len()];
        let mut components = 0;
        for start in 0..self.inside_nodes.len() {
            if !seen[start] {
                components += 1;
                for v in self.flood(start, &all) {
                    seen[v] = true;
                }
            }
        }
        components
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }
    pub fn origin(&self) -> &[f64] {
        &self.origin
    }
    pub fn inside_mask(&self) -> &[bool] {
        &self.inside
    }
    pub fn total_nodes(&self) -> usize {
        self.inside.len()
    }
    pub fn num_inside(&self) -> usize {
        self.inside_nodes.len()
    }
    /// Flat index of the basepoint.
    pub fn basepoint_flat(&self) -> usize {
        self.basepoint
    }
    /// Compact id of the basepoint.
    pub fn basepoint(&self) -> usize {
        self.compact[self.basepoint] as usize
    }
    pub fn basepoint_index(&self) -> Vec<usize> {
        self.unravel(self.basepoint)
    }
    pub fn flat_of(&self, node: usize) -> usize {
        self.inside_nodes[node]
    }
    pub fn compact_of(&self, flat: usize) -> Option<usize> {
        match self.compact[flat] {
            NOT_INSIDE => None,
            c => Some(c as usize),
        }
    }

    pub fn unravel(&self, flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        unravel_into(&self.shape, flat, &mut out);
        out
    }

    pub fn ravel(&self, index: &[usize]) -> usize {
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &s)| acc * s + i)
    }

    /// Flat stride of each axis.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dim()];
        for a in (0..self.dim().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * self.shape[a + 1];
        }
        strides
    }

    pub fn point_of_flat(&self, flat: usize) -> Vec<f64> {
        self.unravel(flat)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.origin[a] + i as f64 * self.spacing[a])
            .collect()
    }

    /// Coordinates of an inside node.
    pub fn point(&self, node: usize) -> Vec<f64> {
        self.point_of_flat(self.inside_nodes[node])
    }

    /// Inside neighbors along the axes: `(neighbor, axis)`.
    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let flat = self.inside_nodes[node];
        let index = self.unravel(flat);
        let strides = self.strides();
        (0..self.dim()).flat_map(move |a| {
            let mut out = [None, None];
            if index[a] > 0 {
                out[0] = self.compact_of(flat - strides[a]).map(|c| (c, a));
            }
            if index[a] + 1 < self.shape[a] {
                out[1] = self.compact_of(flat + strides[a]).map(|c| (c, a));
            }
            out.into_iter().flatten()
        })
    }

    /// For every node of the box, the inside node reached first by a
    /// breadth-first search started from all inside nodes at once (ties go to
    /// the smaller inside id).
    pub fn nearest_inside(&self) -> Vec<usize> {
        let total = self.total_nodes();
        let mut owner = vec![usize::MAX; total];
        let mut queue = VecDeque::with_capacity(total);
        for (c, &flat) in self.inside_nodes.iter().enumerate() {
            owner[flat] = c;
            queue.push_back(flat);
        }
        let strides = self.strides();
        while let Some(flat) = queue.pop_front() {
            let index = self.unravel(flat);
            for a in 0..self.dim() {
                let mut visit = |next: usize| {
                    if owner[next] == usize::MAX {
                        owner[next] = owner[flat];
                        queue.push_back(next);
                    }
                };
                if index[a] > 0 {
                    visit(flat - strides[a]);
                }
                if index[a] + 1 < self.shape[a] {
                    visit(flat + strides[a]);
                }
            }
        }
        owner
    }

    /// Breadth-first component of `start` restricted to nodes where `allowed` holds.
    pub fn flood(&self, start: usize, allowed: &[bool]) -> Vec<usize> {
        let mut seen = vec![false; self.num_inside()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut out = Vec::new();
        while let Some(v) = queue.pop_front() {
            out.push(v);
            for (w, _) in self.neighbors(v) {
                if allowed[w] && !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Euclidean distance from every inside node to the nearest outside node,
    /// where every node of the one-node padding around the box is outside.
    pub fn boundary_distance(&self) -> Vec<f64> {
        let padded: Vec<usize> = self.shape.iter().map(|s| s + 2).collect();
        let total: usize = padded.iter().product();
        let mut sq = vec![f64::INFINITY; total];
        let mut index = vec![0usize; self.dim()];
        for (p, v) in sq.iter_mut().enumerate() {
            unravel_into(&padded, p, &mut index);
            let interior = index.iter().zip(&self.shape).all(|(&i, &s)| i >= 1 && i <= s);
            let outside = if interior {
                let inner: Vec<usize> = index.iter().map(|i| i - 1).collect();
                !self.inside[self.ravel(&inner)]
            } else {
                true
            };
            if outside {
                *v = 0.0;
            }
        }
        squared_distance_transform(&mut sq, &padded, &self.spacing);
        self.inside_nodes
            .iter()
            .map(|&flat| {
                let inner = self.unravel(flat);
                let padded_index: Vec<usize> = inner.iter().map(|i| i + 1).collect();
                let p = padded_index.iter().zip(&padded).fold(0, |acc, (&i, &s)| acc * s + i);
                sq[p].sqrt()
            })
            .collect()
    }
}

/// Exact separable squared Euclidean distance transform (lower envelope of
/// parabolas along each axis in turn).
fn squared_distance_transform(values: &mut [f64], shape: &[usize], spacing: &[f64]) {
    let dim = shape.len();
    let mut strides = vec![1; dim];
    for a in (0..dim.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    let total = values.len();
    for axis in 0..dim {
        let n = shape[axis];
        let h2 = spacing[axis] * spacing[axis];
        let stride = strides[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..total {
            if !(start / stride).is_multiple_of(n) {
                continue;
            }
            for i in 0..n {
                line[i] = values[start + i * stride];
            }
            lower_envelope(&line, h2, &mut out);
            for i in 0..n {
                values[start + i * stride] = out[i];
            }
        }
    }
}

fn lower_envelope(f: &[f64], h2: f64, out: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if finite.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    let intersect = |q: usize, p: usize| -> f64 {
        let (q, p) = (q as f64, p as f64);
        ((f[q as usize] / h2 + q * q) - (f[p as usize] / h2 + p * p)) / (2.0 * (q - p))
    };
    for &q in &finite {
        while let Some(&p) = v.last() {
            let s = intersect(q, p);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            z.push(f64::NEG_INFINITY);
        } else {
            z.push(intersect(q, *v.last().unwrap()));
        }
        v.push(q);
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (i, slot) in out.iter_mut().enumerate() {
        while z[k + 1] < i as f64 {
            k += 1;
        }
        let d = i as f64 - v[k] as f64;
        *slot = d * d * h2 + f[v[k]];
    }
}

/// The exhaustion set: the basepoint component of
/// `{x inside : |x - x_o| < 1/eps, dist(x, boundary) > eps}` as a mask over
/// inside nodes. The boundary distance is the distance to the nearest outside
/// node minus half a cell diagonal.
pub fn compute_omega_eps(domain: &GridDomain, eps: f64) -> Result<Vec<bool>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput("eps must be positive".into()));
    }
    let half_diag = 0.5 * domain.spacing.iter().map(|h| h * h).sum::<f64>().sqrt();
    let dist = domain.boundary_distance();
    let base = domain.point(domain.basepoint());
    let candidate: Vec<bool> = (0..domain.num_inside())
        .map(|v| {
            let p = domain.point(v);
            let r = p.iter().zip(&base).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            r < 1.0 / eps && dist[v] - half_diag > eps
        })
        .collect();
    let bp = domain.basepoint();
    if !candidate[bp] {
        return Err(Error::EmptyResult { eps });
    }
    let mut mask = vec![false; domain.num_inside()];
    for v in domain.flood(bp, &candidate) {
        mask[v] = true;
    }
    Ok(mask)
}

/// Values of a map `f: Omega -> R^m` at the inside nodes of a domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledMap {
    domain: GridDomain,
    codim: usize,
    values: Vec<f64>,
}

impl SampledMap {
    pub fn new(domain: GridDomain, codim: usize, values: Vec<f64>) -> Result<Self> {
        if codim == 0 {
            return Err(Error::InvalidInput("codim must be positive".into()));
        }
        if values.len() != domain.num_inside() * codim {
            return Err(Error::InvalidInput(format!(
                "expected {} values, got {}",
                domain.num_inside() * codim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("map values must be finite".into()));
        }
        Ok(Self { domain, codim, values })
    }

    /// Samples `f` at every inside node.
    pub fn from_fn(domain: GridDomain, codim: usize, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(domain.num_inside() * codim);
        for v in 0..domain.num_inside() {
            let y = f(&domain.point(v));
            if y.len() != codim {
                return Err(Error::InvalidInput("map returned the wrong number of components".into()));
            }
            values.extend(y);
        }
        Self::new(domain, codim, values)
    }

    pub fn domain(&self) -> &GridDomain {
        &self.domain
    }
    pub fn codim(&self) -> usize {
        self.codim
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn value(&self, node: usize) -> &[f64] {
        &self.values[node * self.codim..(node + 1) * self.codim]
    }
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Built-in test maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapCase {
    Constant,
    MonotoneLine,
    SaddleReeb,
    ScaledSaddle,
    FullRankCounterexample,
}

impl MapCase {
    pub const ALL: [MapCase; 5] = [
        MapCase::Constant,
        MapCase::MonotoneLine,
        MapCase::SaddleReeb,
        MapCase::ScaledSaddle,
        MapCase::FullRankCounterexample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MapCase::Constant => "constant",
            MapCase::MonotoneLine => "monotone-line",
            MapCase::SaddleReeb => "saddle-reeb",
            MapCase::ScaledSaddle => "scaled-saddle",
            MapCase::FullRankCounterexample => "full-rank-counterexample",
        }
    }
}

impl std::str::FromStr for MapCase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MapCase::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownCase(s.to_string()))
    }
}

/// Parameters of the generated maps.
///
/// `profile[j]` holds the polynomial coefficients (lowest degree first) of
/// the `j`-th component of the curve `Phi` used by the saddle cases.
#[derive(Clone, Debug, PartialEq)]
pub struct MapParams {
    pub constant: Vec<f64>,
    pub direction: Vec<f64>,
    pub profile: Vec<Vec<f64>>,
    pub scale: f64,
}

impl Default for MapParams {
    fn default() -> Self {
        Self {
            constant: vec![1.0, 2.0],
            direction: vec![1.0, 0.0],
            profile: vec![vec![0.0, 1.0], vec![0.0, 0.0, 0.5]],
            scale: 4.0,
        }
    }
}

fn polynomial(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

pub fn generate_map(case: MapCase, domain: &GridDomain, params: &MapParams) -> Result<SampledMap> {
    let dim = domain.dim();
    let center: Vec<f64> = (0..dim)
        .map(|a| domain.origin[a] + 0.5 * (domain.shape[a] - 1) as f64 * domain.spacing[a])
        .collect();
    let saddle = move |x: &[f64]| {
        let dx = x[0] - center[0];
        let dy = x[1] - center[1];
        dx * dx - dy * dy
    };
    let curve = |t: f64| params.profile.iter().map(|c| polynomial(c, t)).collect::<Vec<_>>();
    match case {
        MapCase::Constant => {
            let c = params.constant.clone();
            SampledMap::from_fn(domain.clone(), c.len(), move |_| c.clone())
        }
        MapCase::MonotoneLine => {
            let v = params.direction.clone();
            SampledMap::from_fn(domain.clone(), v.len(), move |x| v.iter().map(|vj| x[0] * vj).collect())
        }
        MapCase::SaddleReeb | MapCase::ScaledSaddle => {
            if dim < 2 {
                return Err(Error::InvalidInput("saddle maps need dim >= 2".into()));
            }
            let scale = if case == MapCase::ScaledSaddle { params.scale } else { 1.0 };
            SampledMap::from_fn(domain.clone(), params.profile.len(), |x| curve(scale * saddle(x)))
        }
        MapCase::FullRankCounterexample => SampledMap::from_fn(domain.clone(), dim, |x| x.to_vec()),
    }
}

/// Finite-difference rank statistics of a sampled map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub tested_nodes: usize,
    pub max_sigma2_over_sigma1: f64,
    pub violating_fraction: f64,
    pub fd_step: f64,
    pub rank_tol: f64,
}

/// Default relative tolerance on `sigma_{r+1} / sigma_1`.
pub const DEFAULT_RANK_TOL: f64 = 1e-3;

/// Relative singular-value ratio `sigma_{r+1} / max(sigma_1, sqrt(eps_machine))`
/// of an `m x n` row-major matrix; zero when the matrix has no `(r+1)`-th value.
pub fn singular_ratio(jac: &[f64], m: usize, n: usize, r: usize) -> f64 {
    if r >= m.min(n) {
        return 0.0;
    }
    let mat = DMatrix::from_row_slice(m, n, jac);
    let mut sv: Vec<f64> = mat.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv[r] / sv[0].max(f64::EPSILON.sqrt())
}

/// Central-difference Jacobians at every node whose axis neighbors at
/// `±step` (rounded to whole cells) are inside; nodes at the mask boundary
/// are skipped.
pub fn fd_rank_report(map: &SampledMap, r: usize, step: f64, tol: f64) -> RankReport {
    let domain = &map.domain;
    let dim = domain.dim();
    let m = map.codim;
    let cells: Vec<usize> = domain
        .spacing
        .iter()
        .map(|&h| ((step / h).round() as usize).max(1))
        .collect();
    let strides = domain.strides();
    let ratios: Vec<f64> = (0..domain.num_inside())
        .into_par_iter()
        .filter_map(|v| {
            let flat = domain.flat_of(v);
            let index = domain.unravel(flat);
            let mut jac = vec![0.0; m * dim];
            for a in 0..dim {
                let k = cells[a];
                if index[a] < k || index[a] + k >= domain.shape[a] {
                    return None;
                }
                let plus = domain.compact_of(flat + k * strides[a])?;
                let minus = domain.compact_of(flat - k * strides[a])?;
                let width = 2.0 * k as f64 * domain.spacing[a];
                for j in 0..m {
                    jac[j * dim + a] = (map.value(plus)[j] - map.value(minus)[j]) / width;
                }
            }
            Some(singular_ratio(&jac, m, dim, r))
        })
        .collect();
    let tested = ratios.len();
    let violating = ratios.iter().filter(|&&q| q > tol).count();
    RankReport {
        tested_nodes: tested,
        max_sigma2_over_sigma1: ratios.iter().copied().fold(0.0, f64::max),
        violating_fraction: if tested == 0 { 0.0 } else { violating as f64 / tested as f64 },
        fd_step: step,
        rank_tol: tol,
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    fn open_unit_square(points: usize) -> GridDomain {
        build_grid_domain(&GridSpec::unit_cube(2, points), |x| {
            x.iter().all(|&c| c > 0.0 && c < 1.0)
        })
        .unwrap()
    }

    #[test]
    fn open_square_excludes_boundary() {
        let d = open_unit_square(65);
        assert_eq!(d.num_inside(), 63 * 63);
        assert_eq!(d.point(d.basepoint()), vec![0.5, 0.5]);
    }

    #[test]
    fn nearest_inside_of_open_square() {
        let d = open_unit_square(5);
        let owner = d.nearest_inside();
        // corner (0,0) reaches (1,1) after two steps
        assert_eq!(d.flat_of(owner[0]), d.ravel(&[1, 1]));
        assert_eq!(d.flat_of(owner[d.ravel(&[0, 2])]), d.ravel(&[1, 2]));
        assert_eq!(d.flat_of(owner[d.ravel(&[2, 2])]), d.ravel(&[2, 2]));
    }

    #[test]
    fn disk_predicate() {
        let d = build_grid_domain(&GridSpec::unit_cube(2, 65), |x| {
            (x[0] - 0.5).hypot(x[1] - 0.5) < 0.5
        })
        .unwrap();
        let expected = (0..65 * 65)
            .filter(|&i| {
                let (a, b) = ((i / 65) as f64 / 64.0, (i % 65) as f64 / 64.0);
                (a - 0.5).hypot(b - 0.5) < 0.5
            })
            .count();
        assert_eq!(d.num_inside(), expected);
    }

    #[test]
    fn disjoint_squares_rejected() {
        let mut spec = GridSpec::unit_cube(2, 33);
        spec.basepoint = vec![8, 8];
        let err = build_grid_domain(&spec, |x| (x[0] < 0.4 || x[0] > 0.6) && x[1] > 0.1 && x[1] < 0.9)
            .unwrap_err();
        assert!(matches!(err, Error::DisconnectedDomain { components: 2 }));
    }

    #[test]
    fn basepoint_outside_rejected() {
        let mut spec = GridSpec::unit_cube(2, 9);
        spec.basepoint = vec![0, 0];
        let err = build_grid_domain(&spec, |x| x[0] > 0.0).unwrap_err();
        assert!(matches!(err, Error::BasepointOutside(_)));
    }

    #[test]
    fn boundary_distance_matches_brute_force() {
        let d = build_grid_domain(&GridSpec::unit_cube(2, 21), |x| {
            (x[0] - 0.5).hypot(x[1] - 0.4) < 0.45 && !(x[0] > 0.7 && x[1] > 0.6)
        })
        .unwrap();
        let dist = d.boundary_distance();
        // brute force over the padded box
        let h = 1.0 / 20.0;
        let mut outside = Vec::new();
        for i in -1i64..=21 {
            for j in -1i64..=21 {
                let is_out = if (0..21).contains(&i) && (0..21).contains(&j) {
                    !d.inside_mask()[(i * 21 + j) as usize]
                } else {
                    true
                };
                if is_out {
                    outside.push((i as f64 * h, j as f64 * h));
                }
            }
        }
        for v in 0..d.num_inside() {
            let p = d.point(v);
            let brute = outside
                .iter()
                .map(|&(a, b)| (p[0] - a).hypot(p[1] - b))
                .fold(f64::INFINITY, f64::min);
            assert!((brute - dist[v]).abs() < 1e-12, "node {v}: {brute} vs {}", dist[v]);
        }
    }

    #[test]
    fn omega_eps_on_square_is_thresholded_set() {
        let d = open_unit_square(65);
        let mask = compute_omega_eps(&d, 0.1).unwrap();
        let half_diag = 0.5 * (2.0f64).sqrt() / 64.0;
        for v in 0..d.num_inside() {
            let p = d.point(v);
            let bd = p.iter().map(|&c| c.min(1.0 - c)).fold(f64::INFINITY, f64::min);
            assert_eq!(mask[v], bd - half_diag > 0.1, "node {v} at {p:?}");
        }
    }

    #[test]
    fn omega_eps_is_nested() {
        let d = open_unit_square(65);
        let coarse = compute_omega_eps(&d, 0.1).unwrap();
        let fine = compute_omega_eps(&d, 0.05).unwrap();
        assert!(coarse.iter().zip(&fine).all(|(&c, &f)| !c || f));
        assert!(fine.iter().filter(|&&b| b).count() > coarse.iter().filter(|&&b| b).count());
    }

    #[test]
    fn omega_eps_cuts_narrow_corridor() {
        // a block on the left joined to a far block by a corridor of width 0.15
        let mut spec = GridSpec::unit_cube(2, 81);
        spec.basepoint = vec![20, 40];
        let d = build_grid_domain(&spec, |x| {
            let block = x[0] > 0.0 && x[0] < 0.5 && x[1] > 0.0 && x[1] < 1.0;
            let corridor = x[0] >= 0.5 && x[0] < 0.7 && x[1] > 0.0 && x[1] < 0.15;
            let far = x[0] >= 0.7 && x[0] < 1.0 && x[1] > 0.0 && x[1] < 1.0;
            block || corridor || far
        })
        .unwrap();
        let mask = compute_omega_eps(&d, 0.1).unwrap();
        // flood-fill oracle over the thresholded mask
        let half_diag = 0.5 * (2.0f64).sqrt() / 80.0;
        let dist = d.boundary_distance();
        let thresh: Vec<bool> = (0..d.num_inside()).map(|v| dist[v] - half_diag > 0.1).collect();
        let comp = d.flood(d.basepoint(), &thresh);
        assert_eq!(mask.iter().filter(|&&b| b).count(), comp.len());
        for v in 0..d.num_inside() {
            if d.point(v)[0] > 0.7 {
                assert!(!mask[v]);
            }
        }
        assert!(thresh.iter().enumerate().any(|(v, &t)| t && d.point(v)[0] > 0.7));
    }

    #[test]
    fn omega_eps_empty_for_large_eps() {
        let d = open_unit_square(33);
        assert!(matches!(compute_omega_eps(&d, 0.6), Err(Error::EmptyResult { .. })));
    }

    #[test]
    fn constant_case() {
        let d = open_unit_square(17);
        let map = generate_map(MapCase::Constant, &d, &MapParams::default()).unwrap();
        assert!((0..d.num_inside()).all(|v| map.value(v) == [1.0, 2.0]));
        let report = fd_rank_report(&map, 1, 1.0 / 16.0, DEFAULT_RANK_TOL);
        assert_eq!(report.max_sigma2_over_sigma1, 0.0);
        assert_eq!(report.violating_fraction, 0.0);
    }

    #[test]
    fn saddle_vanishes_on_diagonal() {
        let d = open_unit_square(17);
        let params = MapParams {
            profile: vec![vec![0.0, 1.0], vec![0.0]],
            ..MapParams::default()
        };
        let map = generate_map(MapCase::SaddleReeb, &d, &params).unwrap();
        assert_eq!(map.value(d.basepoint()), [0.0, 0.0]);
    }

    #[test]
    fn saddle_passes_rank_check() {
        let d = open_unit_square(65);
        let params = MapParams {
            profile: vec![vec![0.0, 1.0], vec![0.0, 0.0, 1.0]],
            ..MapParams::default()
        };
        let map = generate_map(MapCase::SaddleReeb, &d, &params).unwrap();
        let report = fd_rank_report(&map, 1, 1.0 / 64.0, DEFAULT_RANK_TOL);
        assert!(report.tested_nodes > 3000);
        assert!(report.violating_fraction <= 0.01, "{report:?}");
    }

    #[test]
    fn identity_violates_rank_one() {
        let d = open_unit_square(33);
        let map = generate_map(MapCase::FullRankCounterexample, &d, &MapParams::default()).unwrap();
        let report = fd_rank_report(&map, 1, 1.0 / 32.0, DEFAULT_RANK_TOL);
        assert!(report.violating_fraction > 0.99);
    }

    #[test]
    fn unknown_case_name() {
        assert!(matches!("spiral".parse::<MapCase>(), Err(Error::UnknownCase(_))));
        assert_eq!("scaled-saddle".parse::<MapCase>().unwrap(), MapCase::ScaledSaddle);
    }
}
