//! The axis-orthogonal embedding `w: T -> R^E`: edge `k` is laid along the
//! `k`-th coordinate axis starting from the image of its `u` end.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finite_tree::{FiniteTree, TreePoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    /// `w(u_k)` for every edge.
    pub bases: Vec<Vec<f64>>,
    pub lambdas: Vec<f64>,
    pub vertex_images: Vec<Vec<f64>>,
}

/// Places the edges of an ordered tree one axis at a time.
pub fn embed_tree(tree: &FiniteTree) -> Result<Embedding> {
    let dim = tree.num_edges();
    let mut images: Vec<Option<Vec<f64>>> = vec![None; tree.vertices.len()];
    let root = tree.edges.first().map_or(0, |e| e.u);
    images[root] = Some(vec![0.0; dim]);
    let mut bases = Vec::with_capacity(dim);
    for (k, e) in tree.edges.iter().enumerate() {
        let base = images[e.u].clone().ok_or(Error::OrderingViolation(k))?;
        if images[e.v].is_some() {
            return Err(Error::OrderingViolation(k));
        }
        let mut end = base.clone();
        end[k] += e.lambda;
        images[e.v] = Some(end);
        bases.push(base);
    }
    let vertex_images = images.into_iter().enumerate().map(|(i, w)| w.ok_or(Error::OrderingViolation(i))).collect::<Result<_>>()?;
    Ok(Embedding { bases, lambdas: tree.edges.iter().map(|e| e.lambda).collect(), vertex_images })
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }

    pub fn check_point(&self, p: TreePoint) -> Result<()> {
        let lambda = *self.lambdas.get(p.edge).ok_or(Error::InvalidInput(format!("no edge {}", p.edge)))?;
        if !(p.offset >= 0.0 && p.offset <= lambda) {
            return Err(Error::OffsetOutOfRange { edge: p.edge, offset: p.offset, lambda });
        }
        Ok(())
    }

    /// `w(p) = w(u_k) + offset * e_k`.
    pub fn embed_point(&self, p: TreePoint) -> Result<Vec<f64>> {
        self.check_point(p)?;
        let mut out = self.bases[p.edge].clone();
        out[p.edge] += p.offset;
        Ok(out)
    }

    /// Euclidean distance from `t` to the segment `w(edge)`, with the closest
    /// offset along it.
    pub fn distance_to_edge(&self, t: &[f64], edge: usize) -> (f64, f64) {
        let base = &self.bases[edge];
        let mut sq = 0.0;
        for (j, (&x, &b)) in t.iter().zip(base).enumerate() {
            if j != edge {
                sq += (x - b) * (x - b);
            }
        }
        let offset = (t[edge] - base[edge]).clamp(0.0, self.lambdas[edge]);
        let along = t[edge] - base[edge] - offset;
        ((sq + along * along).sqrt(), offset)
    }

    /// Closest point of `w(T)` to `t` and its distance.
    pub fn nearest_point(&self, t: &[f64]) -> (TreePoint, f64) {
        let mut best = (TreePoint { edge: 0, offset: 0.0 }, f64::INFINITY);
        for k in 0..self.dim() {
            let (d, offset) = self.distance_to_edge(t, k);
            if d < best.1 {
                best = (TreePoint { edge: k, offset }, d);
            }
        }
        best
    }

    pub fn distance_to_image(&self, t: &[f64]) -> f64 {
        self.nearest_point(t).1
    }

    /// Uniform point of `T` by arc length.
    pub fn random_point(&self, rng: &mut impl Rng) -> TreePoint {
        let total: f64 = self.lambdas.iter().sum();
        let mut s = rng.gen::<f64>() * total;
        for (k, &l) in self.lambdas.iter().enumerate() {
            if s <= l {
                return TreePoint { edge: k, offset: s };
            }
            s -= l;
        }
        let last = self.dim() - 1;
        TreePoint { edge: last, offset: self.lambdas[last] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCheck {
    pub pairs: usize,
    /// Largest `|d_T(p,q) - |w(p)-w(q)|_1|`.
    pub max_l1_defect: f64,
    /// Largest `|w(p)-w(q)|_2 / d_T(p,q)`; at most one.
    pub max_forward_ratio: f64,
    /// Largest `d_T(p,q) / |w(p)-w(q)|_2`; at most `sqrt(E)`.
    pub max_inverse_ratio: f64,
}

/// Compares the tree metric with the embedded l1 and l2 distances.
pub fn tree_l1_check(emb: &Embedding, tree: &FiniteTree, pairs: &[(TreePoint, TreePoint)]) -> Result<EmbeddingCheck> {
    let vd = tree.vertex_distances();
    let mut check = EmbeddingCheck { pairs: pairs.len(), ..Default::default() };
    for &(p, q) in pairs {
        let (wp, wq) = (emb.embed_point(p)?, emb.embed_point(q)?);
        let dt = tree.point_distance(&vd, p, q);
        let l1: f64 = wp.iter().zip(&wq).map(|(a, b)| (a - b).abs()).sum();
        let l2 = wp.iter().zip(&wq).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        check.max_l1_defect = check.max_l1_defect.max((dt - l1).abs());
        if dt > 1e-12 && l2 > 1e-12 {
            check.max_forward_ratio = check.max_forward_ratio.max(l2 / dt);
            check.max_inverse_ratio = check.max_inverse_ratio.max(dt / l2);
        }
    }
    Ok(check)
}
