//! The full construction `f_eps = phi_eps . rho_eps . g_eps` and its
//! verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{embed_tree, Embedding};
use crate::error::{Error, Result};
use crate::finite_tree::{build_eps_net, build_subtree, retract, FiniteTree, Retraction, TreeMetric, TreePoint};
use crate::grid::{compute_omega_eps, euclid, fd_rank_report, singular_ratio, RankReport, SampledMap, DEFAULT_RANK_TOL};
use crate::quasimetric::{build_weight_graph, GraphOptions};
use crate::quotient::{build_quotient, check_tree, default_tau, QuotientTree, TreeCheckReport};
use crate::smoothing::{
    mcshane_extend, rho_eps, smooth_lipschitz, Constant, FieldSource, Lattice, Mollified, Rho, SmoothKind, SmoothMap,
    Smoothness, SoftMcShane, MAX_RETRIES,
};

pub const REPORT_VERSION: u32 = 1;

/// Fraction of grid nodes allowed to fail the rank test before strict mode
/// rejects the input.
pub const HYPOTHESIS_ALLOWANCE: f64 = 0.01;

/// Four-point defect accepted as a tree.
pub const TREE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApproxConfig {
    pub epsilon: f64,
    /// Quotient threshold; the default is derived from the graph.
    pub tau: Option<f64>,
    pub subdivision: usize,
    /// Step of the grid rank test; defaults to the largest grid spacing.
    pub fd_step: Option<f64>,
    /// Step of the finite-difference Jacobians of `f_eps`.
    pub probe_step: f64,
    pub rank_tol: f64,
    pub seed: u64,
    pub smoothness: Smoothness,
    pub strict_rank: bool,
    pub probes: usize,
    pub tree_samples: usize,
    /// Place each node along the tree by its value instead of at its class.
    pub fiber_refinement: bool,
    /// Record wall-clock stage timings; reports then differ between runs.
    pub timings: bool,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            tau: None,
            subdivision: 1,
            fd_step: None,
            probe_step: 1e-6,
            rank_tol: DEFAULT_RANK_TOL,
            seed: 0,
            smoothness: Smoothness::CInfinity,
            strict_rank: false,
            probes: 1000,
            tree_samples: 20_000,
            fiber_refinement: true,
            timings: false,
        }
    }
}

impl ApproxConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.epsilon) || !positive(self.probe_step) || !positive(self.rank_tol) {
            return Err(Error::InvalidInput("epsilon and tolerances must be positive".into()));
        }
        if self.tau.is_some_and(|t| !(t >= 0.0)) || self.fd_step.is_some_and(|s| !positive(s)) || self.subdivision == 0 {
            return Err(Error::InvalidInput("invalid tau, fd_step or subdivision".into()));
        }
        Ok(())
    }
}

/// `delta = min(eps / (1 + sqrt(E) + 2E), lambda / 4)`.
pub fn compute_delta(epsilon: f64, edges: usize, lambda_min: f64) -> f64 {
    (epsilon / budget_factor(edges)).min(lambda_min / 4.0)
}

pub fn budget_factor(edges: usize) -> f64 {
    let e = edges as f64;
    1.0 + e.sqrt() + 2.0 * e
}

/// `(1 + sqrt(E) + 2E) delta + eps <= 2 eps`, up to rounding of the division.
pub fn budget_holds(epsilon: f64, edges: usize, delta: f64) -> bool {
    budget_factor(edges) * delta + epsilon <= 2.0 * epsilon * (1.0 + 4.0 * f64::EPSILON)
}

/// `g~`: the tree-valued map on a lattice refining the grid `refine` times,
/// interpolated axis by axis along tree geodesics between the grid values
/// `w(r(psi(x)))`, then embedded.
#[derive(Clone, Debug)]
pub struct TreeField {
    tree: FiniteTree,
    metric: TreeMetric,
    embedding: Embedding,
    coarse_shape: Vec<usize>,
    strides: Vec<usize>,
    /// Inside node standing in for every grid node.
    owner: Vec<usize>,
    node_points: Vec<TreePoint>,
    refine: usize,
    fine: Lattice,
}

impl TreeField {
    pub fn new(map: &SampledMap, tree: FiniteTree, embedding: Embedding, node_points: Vec<TreePoint>, refine: usize) -> Self {
        let d = map.domain();
        let refine = refine.max(1);
        let fine = Lattice {
            origin: d.origin().to_vec(),
            pitch: d.spacing().iter().map(|h| h / refine as f64).collect(),
            shape: d.shape().iter().map(|&n| (n - 1) * refine + 1).collect(),
        };
        Self {
            metric: TreeMetric::new(&tree),
            tree,
            embedding,
            coarse_shape: d.shape().to_vec(),
            strides: d.strides(),
            owner: d.nearest_inside(),
            node_points,
            refine,
            fine,
        }
    }

    pub fn refine(&self) -> usize {
        self.refine
    }
    pub fn node_points(&self) -> &[TreePoint] {
        &self.node_points
    }

    /// Tree point at a fine lattice index.
    pub fn tree_point(&self, index: &[usize]) -> TreePoint {
        let p = index.len();
        let mut base = vec![0usize; p];
        let mut frac = vec![0.0; p];
        for a in 0..p {
            let n = self.coarse_shape[a];
            let (mut b, mut r) = (index[a] / self.refine, index[a] % self.refine);
            if n == 1 {
                (b, r) = (0, 0);
            } else if b >= n - 1 {
                (b, r) = (n - 2, self.refine);
            }
            base[a] = b;
            frac[a] = r as f64 / self.refine as f64;
        }
        let mut values: Vec<TreePoint> = (0..1usize << p)
            .map(|mask| {
                let flat: usize = (0..p)
                    .map(|a| {
                        let i = (base[a] + ((mask >> a) & 1)).min(self.coarse_shape[a] - 1);
                        i * self.strides[a]
                    })
                    .sum();
                self.node_points[self.owner[flat]]
            })
            .collect();
        for t in frac.iter() {
            values = values.chunks(2).map(|pair| self.metric.interpolate(&self.tree, pair[0], pair[1], *t)).collect();
        }
        values[0]
    }
}

impl FieldSource for TreeField {
    fn lattice(&self) -> &Lattice {
        &self.fine
    }
    fn codim(&self) -> usize {
        self.embedding.dim()
    }
    fn sample(&self, index: &[usize]) -> Vec<f64> {
        let p = self.tree_point(index);
        let mut out = self.embedding.bases[p.edge].clone();
        out[p.edge] += p.offset;
        out
    }
}

/// `phi` along the tree, linear between consecutive classes of an edge.
pub fn phi_on_tree(zf: &QuotientTree, tree: &FiniteTree, p: TreePoint) -> Vec<f64> {
    let Some(e) = tree.edges.get(p.edge) else {
        return zf.phi(tree.vertices[0]).to_vec();
    };
    let k = e.offsets.partition_point(|&o| o <= p.offset).clamp(1, e.offsets.len() - 1);
    let (o0, o1) = (e.offsets[k - 1], e.offsets[k]);
    let t = if o1 > o0 { ((p.offset - o0) / (o1 - o0)).clamp(0.0, 1.0) } else { 0.0 };
    let (a, b) = (zf.phi(e.class_path[k - 1]), zf.phi(e.class_path[k]));
    a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
}

/// The approximant: a constant for a single-vertex tree, otherwise the
/// composition.
#[derive(Clone, Debug)]
pub enum FEps {
    Constant(Constant),
    Composition { g: Box<Mollified<TreeField>>, rho: Rho, phi: SoftMcShane },
}

impl FEps {
    /// `rho(g_eps(x))` for the composed map.
    pub fn projected(&self, x: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            FEps::Constant(_) => None,
            FEps::Composition { g, rho, .. } => {
                let t = g.eval(x);
                Some((rho.eval(&t), t))
            }
        }
    }
}

impl SmoothMap for FEps {
    fn input_dim(&self) -> usize {
        match self {
            FEps::Constant(c) => c.input_dim(),
            FEps::Composition { g, .. } => g.input_dim(),
        }
    }
    fn output_dim(&self) -> usize {
        match self {
            FEps::Constant(c) => c.output_dim(),
            FEps::Composition { phi, .. } => phi.output_dim(),
        }
    }
    fn kind(&self) -> SmoothKind {
        match self {
            FEps::Constant(_) => SmoothKind::Constant,
            FEps::Composition { .. } => SmoothKind::Composition,
        }
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FEps::Constant(c) => c.eval(x),
            FEps::Composition { g, rho, phi } => phi.eval(&rho.eval(&g.eval(x))),
        }
    }
    fn jacobian(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FEps::Constant(c) => c.jacobian(x),
            FEps::Composition { g, rho, phi } => {
                let (t, jg) = g.eval_with_jacobian(x);
                let diag = rho.diagonal(&t);
                let jp = phi.jacobian(&rho.eval(&t));
                let (p, e, m) = (x.len(), t.len(), phi.output_dim());
                let mut out = vec![0.0; m * p];
                for i in 0..m {
                    for k in 0..e {
                        let c = jp[i * e + k] * diag[k];
                        if c != 0.0 {
                            for b in 0..p {
                                out[i * p + b] += c * jg[k * p + b];
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GEpsReport {
    pub sigma: f64,
    pub refine: usize,
    pub lipschitz: f64,
    /// Largest `|g_eps - g|` at region nodes.
    pub node_error: f64,
    /// Largest distance from `g_eps` to `w(T)` at region probes.
    pub tree_distance: f64,
    pub retries: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhiEpsReport {
    pub samples: usize,
    pub lipschitz: f64,
    pub temperature: f64,
    pub eta: f64,
    pub error_bound: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeRankReport {
    pub probes: usize,
    /// Probes where the largest singular value clears the noise floor.
    pub tested: usize,
    pub max_sigma2_over_sigma1: f64,
    pub violating: usize,
    pub fd_step: f64,
    pub rank_tol: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub region_nodes: usize,
    pub sup_error: f64,
    pub rank: ProbeRankReport,
    /// Largest distance from `rho(g_eps(x))` to `w(T)` over the probes.
    pub rho_tree_distance: f64,
    /// Largest number of clamp derivatives above `1e-9` at one probe.
    pub rho_active_entries: usize,
    /// Largest `|rho(t) - t| / (2 sqrt(E) delta)` over the probes.
    pub rho_shift_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub config: ApproxConfig,
    pub hypothesis: Option<RankReport>,
    pub tau: f64,
    pub classes: usize,
    pub max_class_spread: f64,
    pub tree_check: Option<TreeCheckReport>,
    pub region_nodes: usize,
    pub net_size: usize,
    pub covering_radius: f64,
    pub vertices: usize,
    pub edges: usize,
    pub lambda_min: Option<f64>,
    pub merged_short_edges: usize,
    pub degenerate: bool,
    pub delta: f64,
    pub budget_lhs: f64,
    pub bound_2eps: f64,
    pub budget_ok: bool,
    pub retraction_max_displacement: f64,
    pub g_eps: Option<GEpsReport>,
    pub phi_eps: Option<PhiEpsReport>,
    pub verification: Verification,
    /// Grid spacing times the measured Lipschitz scale of `f`.
    pub discretization_scale: f64,
    /// `max(0, sup_error - 2 eps)`.
    pub discretization_slack: f64,
    /// `sup_error <= 2 eps + discretization_scale`.
    pub within_tolerance: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<Vec<StageTiming>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

struct Stopwatch {
    enabled: bool,
    last: std::time::Instant,
    stages: Vec<StageTiming>,
}

impl Stopwatch {
    fn new(enabled: bool) -> Self {
        Self { enabled, last: std::time::Instant::now(), stages: Vec::new() }
    }
    fn lap(&mut self, stage: &str) {
        let now = std::time::Instant::now();
        if self.enabled {
            self.stages.push(StageTiming { stage: stage.to_string(), seconds: (now - self.last).as_secs_f64() });
        }
        self.last = now;
    }
    fn finish(self) -> Option<Vec<StageTiming>> {
        self.enabled.then_some(self.stages)
    }
}

/// Everything the pipeline built, for inspection.
pub struct Approximation {
    pub f: FEps,
    pub report: Report,
    pub omega_eps: Vec<bool>,
    pub quotient: QuotientTree,
    pub region: Vec<usize>,
    pub net: Vec<usize>,
    pub tree: FiniteTree,
    pub retraction: Retraction,
    pub embedding: Option<Embedding>,
}

/// Runs the full construction and verifies the result.
pub fn approximate(map: &SampledMap, config: &ApproxConfig) -> Result<Approximation> {
    config.validate()?;
    let d = map.domain();
    let eps = config.epsilon;
    let mut report = Report { version: REPORT_VERSION, config: config.clone(), bound_2eps: 2.0 * eps, ..Default::default() };

    let mut clock = Stopwatch::new(config.timings);
    let hmax = d.spacing().iter().copied().fold(0.0, f64::max);
    let hypothesis = fd_rank_report(map, 1, config.fd_step.unwrap_or(hmax), config.rank_tol);
    if hypothesis.violating_fraction > HYPOTHESIS_ALLOWANCE {
        if config.strict_rank {
            return Err(Error::HypothesisViolated { fraction: hypothesis.violating_fraction });
        }
        log::warn!("rank test fails on {:.3}% of nodes", 100.0 * hypothesis.violating_fraction);
    }
    report.hypothesis = Some(hypothesis);
    clock.lap("hypothesis");

    let omega_eps = compute_omega_eps(d, eps)?;
    report.region_nodes = omega_eps.iter().filter(|&&b| b).count();
    let graph = build_weight_graph(map, GraphOptions { subdivision: config.subdivision, diagonals: false });
    report.discretization_scale = graph.lipschitz_scale(None) * hmax;
    let tau = config.tau.unwrap_or_else(|| default_tau(&graph));
    let zf = build_quotient(&graph, map, tau)?;
    report.tau = tau;
    report.classes = zf.num_classes();
    report.max_class_spread = zf.max_spread();
    let tree_check = check_tree(&zf, config.tree_samples, TREE_TOLERANCE, config.seed);
    report.tree_check = Some(tree_check.clone());
    clock.lap("quotient");
    if !tree_check.pass {
        return Err(Error::NotATree { defect: tree_check.max_four_point_defect });
    }

    let mut region: Vec<usize> = (0..d.num_inside()).filter(|&v| omega_eps[v]).map(|v| zf.class_of(v)).collect();
    region.sort_unstable();
    region.dedup();
    let start = zf.class_of(d.basepoint());
    let net = build_eps_net(&zf, &region, start, eps)?;
    report.net_size = net.len();
    report.covering_radius = crate::finite_tree::covering_radius(&zf, &region, &net)?;
    let tree = build_subtree(&zf, &net)?;
    let retraction = retract(&zf, &tree)?;
    report.vertices = tree.vertices.len();
    report.edges = tree.num_edges();
    report.merged_short_edges = tree.merged_short_edges;
    report.degenerate = tree.degenerate;
    report.retraction_max_displacement = retraction.max_displacement(&region);
    clock.lap("subtree");

    let edges = tree.num_edges();
    let lambda_min = if edges == 0 { f64::INFINITY } else { tree.lambda_min() };
    report.lambda_min = lambda_min.is_finite().then_some(lambda_min);
    let delta = compute_delta(eps, edges, lambda_min);
    report.delta = delta;
    report.budget_lhs = budget_factor(edges) * delta + eps;
    report.budget_ok = budget_holds(eps, edges, delta);
    assert!(report.budget_ok, "error budget violated: {} > {}", report.budget_lhs, 2.0 * eps);

    let (f, embedding) = if edges == 0 {
        let value = zf.phi(tree.vertices[0]).to_vec();
        (FEps::Constant(Constant { dim: d.dim(), value }), None)
    } else {
        let emb = embed_tree(&tree)?;
        let rho = rho_eps(&emb, delta, config.smoothness)?;
        let node_points = if config.fiber_refinement {
            refined_node_points(map, &zf, &tree, &retraction)
        } else {
            (0..d.num_inside()).map(|v| retraction.to_tree[zf.class_of(v)]).collect()
        };
        let (g, g_report) = build_g_eps(map, &tree, &emb, node_points, &omega_eps, delta, config.seed)?;
        report.g_eps = Some(g_report);
        clock.lap("g_eps");
        let (phi, phi_report) = build_phi_eps(&zf, &tree, &emb, delta, config.seed)?;
        report.phi_eps = Some(phi_report);
        clock.lap("phi_eps");
        (FEps::Composition { g: Box::new(g), rho, phi }, Some(emb))
    };

    report.verification = verify(map, &f, &omega_eps, config, embedding.as_ref(), delta);
    report.discretization_slack = (report.verification.sup_error - 2.0 * eps).max(0.0);
    report.within_tolerance = report.verification.sup_error <= 2.0 * eps + report.discretization_scale;
    clock.lap("verify");
    report.timings = clock.finish();
    Ok(Approximation { f, report, omega_eps, quotient: zf, region, net, tree, retraction, embedding })
}

/// Result of re-checking a stored approximation against its map.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub version: u32,
    pub epsilon: f64,
    pub delta: f64,
    pub bound_2eps: f64,
    pub discretization_scale: f64,
    pub verification: Verification,
    pub within_tolerance: bool,
}

/// Recomputes `Omega_eps` and the verification statistics for `f`.
pub fn check_approximation(
    map: &SampledMap,
    f: &FEps,
    embedding: Option<&Embedding>,
    delta: f64,
    config: &ApproxConfig,
) -> Result<VerifyReport> {
    config.validate()?;
    let eps = config.epsilon;
    let region = compute_omega_eps(map.domain(), eps)?;
    let graph = build_weight_graph(map, GraphOptions { subdivision: config.subdivision, diagonals: false });
    let hmax = map.domain().spacing().iter().copied().fold(0.0, f64::max);
    let discretization_scale = graph.lipschitz_scale(None) * hmax;
    let verification = verify(map, f, &region, config, embedding, delta);
    Ok(VerifyReport {
        version: REPORT_VERSION,
        epsilon: eps,
        delta,
        bound_2eps: 2.0 * eps,
        discretization_scale,
        within_tolerance: verification.sup_error <= 2.0 * eps + discretization_scale,
        verification,
    })
}

/// Tree point of every node. A node whose class lies on the tree is moved
/// between the neighbouring classes on the class path, to where the piecewise
/// linear `phi` is closest to its value; other nodes keep the retraction point
/// of their class.
pub fn refined_node_points(map: &SampledMap, zf: &QuotientTree, tree: &FiniteTree, retraction: &Retraction) -> Vec<TreePoint> {
    let mut appearances: Vec<Vec<(usize, usize)>> = vec![Vec::new(); zf.num_classes()];
    for (k, e) in tree.edges.iter().enumerate() {
        for (i, &c) in e.class_path.iter().enumerate() {
            appearances[c].push((k, i));
        }
    }
    (0..map.domain().num_inside())
        .into_par_iter()
        .map(|v| {
            let c = zf.class_of(v);
            let mut best = (retraction.to_tree[c], f64::INFINITY);
            let value = map.value(v);
            for &(k, i) in &appearances[c] {
                let e = &tree.edges[k];
                for j in [i.wrapping_sub(1), i] {
                    if j == usize::MAX || j + 1 >= e.class_path.len() {
                        continue;
                    }
                    let (a, b) = (zf.phi(e.class_path[j]), zf.phi(e.class_path[j + 1]));
                    let t = segment_parameter(value, a, b);
                    let q: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect();
                    let dist = euclid(value, &q);
                    if dist < best.1 {
                        let offset = (e.offsets[j] + t * (e.offsets[j + 1] - e.offsets[j])).clamp(0.0, e.lambda);
                        best = (TreePoint { edge: k, offset }, dist);
                    }
                }
            }
            best.0
        })
        .collect()
}

/// Parameter in `[0, 1]` of the point of segment `ab` closest to `x`.
fn segment_parameter(x: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for ((xi, ai), bi) in x.iter().zip(a).zip(b) {
        num += (xi - ai) * (bi - ai);
        den += (bi - ai) * (bi - ai);
    }
    if den > 0.0 {
        (num / den).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Random points of the box whose enclosing grid cell has all corners in `mask`.
pub fn region_probes(map: &SampledMap, mask: &[bool], count: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = map.domain();
    let p = d.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    if !mask.iter().any(|&b| b) {
        return out;
    }
    let mut attempts = 0usize;
    while out.len() < count && attempts < 1000 * count.max(1) {
        attempts += 1;
        let x: Vec<f64> = (0..p).map(|a| d.origin()[a] + rng.gen::<f64>() * (d.shape()[a] - 1) as f64 * d.spacing()[a]).collect();
        let base: Vec<usize> = (0..p)
            .map(|a| (((x[a] - d.origin()[a]) / d.spacing()[a]).floor() as usize).min(d.shape()[a].saturating_sub(2)))
            .collect();
        let ok = (0..1usize << p).all(|mask_bits| {
            let corner: Vec<usize> = (0..p).map(|a| (base[a] + ((mask_bits >> a) & 1)).min(d.shape()[a] - 1)).collect();
            d.compact_of(d.ravel(&corner)).is_some_and(|c| mask[c])
        });
        if ok {
            out.push(x);
        }
    }
    out
}

fn build_g_eps(
    map: &SampledMap,
    tree: &FiniteTree,
    emb: &Embedding,
    node_points: Vec<TreePoint>,
    region: &[bool],
    target: f64,
    seed: u64,
) -> Result<(Mollified<TreeField>, GEpsReport)> {
    let d = map.domain();
    let metric = TreeMetric::new(tree);
    let lipschitz = (0..d.num_inside())
        .into_par_iter()
        .map(|v| {
            d.neighbors(v)
                .filter(|&(w, _)| w > v)
                .map(|(w, a)| metric.distance(tree, node_points[v], node_points[w]) / d.spacing()[a])
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    let p = d.dim() as f64;
    let hmax = d.spacing().iter().copied().fold(0.0, f64::max);
    // |g_eps - g~| <= p L (sigma + h_f) with h_f <= sigma / 2
    let mut sigma = if lipschitz > 0.0 { target / (2.0 * p * lipschitz) } else { hmax };
    let probes = region_probes(map, region, 2000, seed ^ 0x9e37_79b9);
    let nodes: Vec<usize> = (0..d.num_inside()).filter(|&v| region[v]).collect();
    let (mut node_error, mut tree_distance) = (f64::INFINITY, f64::INFINITY);
    let mut field = TreeField::new(map, tree.clone(), emb.clone(), node_points, 1);
    for retries in 0..=MAX_RETRIES {
        let refine = (2.0 * hmax / sigma).ceil().max(1.0) as usize;
        field = TreeField::new(map, field.tree, field.embedding, field.node_points, refine);
        let g = Mollified::new(field, sigma);
        node_error = nodes
            .par_iter()
            .map(|&v| {
                let exact = emb.embed_point(g.source.node_points[v]).expect("tree point");
                euclid(&g.eval(&d.point(v)), &exact)
            })
            .reduce(|| 0.0, f64::max);
        tree_distance = probes.par_iter().map(|x| emb.distance_to_image(&g.eval(x))).reduce(|| 0.0, f64::max);
        if node_error < target && tree_distance < target {
            let report = GEpsReport { sigma, refine, lipschitz, node_error, tree_distance, retries };
            return Ok((g, report));
        }
        field = g.source;
        sigma *= 0.5;
    }
    Err(Error::CannotMeetTolerance { target, achieved: node_error.max(tree_distance), retries: MAX_RETRIES })
}

/// Samples of `phi . w^{-1}` on `w(T)` at pitch at most `delta / 2`.
pub fn tree_samples(zf: &QuotientTree, tree: &FiniteTree, emb: &Embedding, pitch: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut points = Vec::new();
    let mut values = Vec::new();
    let mut push = |p: TreePoint| {
        points.push(emb.embed_point(p).expect("tree point"));
        values.push(phi_on_tree(zf, tree, p));
    };
    push(TreePoint { edge: 0, offset: 0.0 });
    for (k, e) in tree.edges.iter().enumerate() {
        // every vertex but the root is the far end of exactly one edge
        let n = (e.lambda / pitch).ceil().max(1.0) as usize;
        for i in 1..=n {
            let offset = if i == n { e.lambda } else { e.lambda * i as f64 / n as f64 };
            push(TreePoint { edge: k, offset });
        }
    }
    (points, values)
}

fn build_phi_eps(zf: &QuotientTree, tree: &FiniteTree, emb: &Embedding, target: f64, seed: u64) -> Result<(SoftMcShane, PhiEpsReport)> {
    let (points, values) = tree_samples(zf, tree, emb, target / 2.0);
    let lipschitz = (emb.dim() as f64).sqrt();
    let base = mcshane_extend(points, values, lipschitz)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d);
    let probes: Vec<Vec<f64>> = (0..2000).map(|_| emb.embed_point(emb.random_point(&mut rng)).expect("tree point")).collect();
    let phi = smooth_lipschitz(&base, target, &probes)?;
    let report = PhiEpsReport {
        samples: base.len(),
        lipschitz,
        temperature: phi.temperature,
        eta: phi.eta,
        error_bound: phi.error_bound(),
    };
    Ok((phi, report))
}

/// Sup error over the region nodes, finite-difference rank statistics of
/// `f_eps` at region probes and the projection invariants at the same probes.
pub fn verify(map: &SampledMap, f: &FEps, region: &[bool], config: &ApproxConfig, emb: Option<&Embedding>, delta: f64) -> Verification {
    let d = map.domain();
    let nodes: Vec<usize> = (0..d.num_inside()).filter(|&v| region[v]).collect();
    let sup_error = nodes.par_iter().map(|&v| euclid(&f.eval(&d.point(v)), map.value(v))).reduce(|| 0.0, f64::max);
    let probes = region_probes(map, region, config.probes, config.seed ^ 0x2545_f491);
    let step = config.probe_step;
    let (p, m) = (d.dim(), map.codim());
    let rows: Vec<(Option<f64>, f64, usize, f64)> = probes
        .par_iter()
        .map(|x| {
            let jac = crate::smoothing::fd_jacobian(f, x, step);
            let scale = f.eval(x).iter().fold(1.0f64, |a, v| a.max(v.abs()));
            let noise = f64::EPSILON * scale / step;
            let norm = jac.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ratio = (norm > 10.0 * noise).then(|| singular_ratio(&jac, m, p, 1));
            let (dist, active, shift) = match (f.projected(x), emb) {
                (Some((r, t)), Some(emb)) => {
                    let rho = match f {
                        FEps::Composition { rho, .. } => rho,
                        FEps::Constant(_) => unreachable!(),
                    };
                    let active = rho.diagonal(&t).iter().filter(|v| v.abs() > 1e-9).count();
                    let bound = 2.0 * (emb.dim() as f64).sqrt() * delta;
                    (emb.distance_to_image(&r), active, euclid(&r, &t) / bound)
                }
                _ => (0.0, 0, 0.0),
            };
            (ratio, dist, active, shift)
        })
        .collect();
    let ratios: Vec<f64> = rows.iter().filter_map(|r| r.0).collect();
    Verification {
        region_nodes: nodes.len(),
        sup_error,
        rank: ProbeRankReport {
            probes: probes.len(),
            tested: ratios.len(),
            max_sigma2_over_sigma1: ratios.iter().copied().fold(0.0, f64::max),
            violating: ratios.iter().filter(|&&r| r > config.rank_tol).count(),
            fd_step: step,
            rank_tol: config.rank_tol,
        },
        rho_tree_distance: rows.iter().map(|r| r.1).fold(0.0, f64::max),
        rho_active_entries: rows.iter().map(|r| r.2).max().unwrap_or(0),
        rho_shift_ratio: rows.iter().map(|r| r.3).fold(0.0, f64::max),
    }
}
