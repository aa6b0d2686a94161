//! End-to-end acceptance checks. Runs as a plain binary so every check prints
//! one PASS/FAIL line; the process fails if any check fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use treefactor::finite_tree::{build_subtree, retract, FiniteTree, Retraction, TreePoint};
use treefactor::grid::{build_grid_domain, compute_omega_eps, generate_map, GridSpec, MapCase, MapParams, SampledMap};
use treefactor::io::ApproxFile;
use treefactor::pipeline::{approximate, ApproxConfig, Approximation, FEps};
use treefactor::quasimetric::{build_weight_graph, df_distance, GraphOptions};
use treefactor::quotient::{build_quotient, check_tree, default_tau, QuotientTree};
use treefactor::smoothing::SmoothMap;
use treefactor::Error;

const SADDLE_EPS: [f64; 3] = [0.2, 0.1, 0.05];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn unit_square(points: usize) -> treefactor::grid::GridDomain {
    build_grid_domain(&GridSpec::unit_cube(2, points), |x| x.iter().all(|&c| c > 0.0 && c < 1.0)).unwrap()
}

fn disk(points: usize) -> treefactor::grid::GridDomain {
    build_grid_domain(&GridSpec::unit_cube(2, points), |x| (x[0] - 0.5).hypot(x[1] - 0.5) < 0.5).unwrap()
}

fn saddle(points: usize) -> SampledMap {
    generate_map(MapCase::SaddleReeb, &unit_square(points), &MapParams::default()).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// All-pairs shortest paths by Floyd-Warshall.
fn floyd(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Vec<Vec<f64>> {
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for (a, b, w) in edges {
        d[a][b] = d[a][b].min(w);
        d[b][a] = d[b][a].min(w);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

/// Distance between tree points from vertex distances, computed without the
/// library's tree metric.
fn tree_distance(tree: &FiniteTree, vd: &[Vec<f64>], p: TreePoint, q: TreePoint) -> f64 {
    let (ep, eq) = (&tree.edges[p.edge], &tree.edges[q.edge]);
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

fn vertex_distances(tree: &FiniteTree) -> Vec<Vec<f64>> {
    floyd(tree.vertices.len(), tree.edges.iter().map(|e| (e.u, e.v, e.lambda)))
}

fn random_tree_point(tree: &FiniteTree, rng: &mut impl Rng) -> TreePoint {
    let total: f64 = tree.edges.iter().map(|e| e.lambda).sum();
    let mut s = rng.gen::<f64>() * total;
    for (k, e) in tree.edges.iter().enumerate() {
        if s <= e.lambda {
            return TreePoint { edge: k, offset: s };
        }
        s -= e.lambda;
    }
    let k = tree.edges.len() - 1;
    TreePoint { edge: k, offset: tree.edges[k].lambda }
}

fn embed(a: &Approximation, p: TreePoint) -> Vec<f64> {
    let emb = a.embedding.as_ref().unwrap();
    let mut out = emb.bases[p.edge].clone();
    out[p.edge] += p.offset;
    out
}

/// Euclidean distance from `t` to the union of the embedded edges.
fn distance_to_image(a: &Approximation, t: &[f64]) -> f64 {
    let emb = a.embedding.as_ref().unwrap();
    (0..emb.lambdas.len())
        .map(|k| {
            let base = &emb.bases[k];
            let s = (t[k] - base[k]).clamp(0.0, emb.lambdas[k]);
            let mut closest = base.clone();
            closest[k] += s;
            norm(&sub(t, &closest))
        })
        .fold(f64::INFINITY, f64::min)
}

/// Singular values of a 2 x 2 matrix in closed form.
fn singular_values_2x2(j: &[f64]) -> (f64, f64) {
    let frob = j.iter().map(|v| v * v).sum::<f64>();
    let det = (j[0] * j[3] - j[1] * j[2]).abs();
    let disc = (frob * frob - 4.0 * det * det).max(0.0).sqrt();
    let s1 = (0.5 * (frob + disc)).sqrt();
    let s2 = if s1 > 0.0 { det / s1 } else { 0.0 };
    (s1, s2)
}

fn error_budget_identity(saddle_runs: &[Approximation]) -> Outcome {
    let mut cases: Vec<(String, Approximation)> = Vec::new();
    let configs = [
        (MapCase::MonotoneLine, false, 65, 0.1),
        (MapCase::MonotoneLine, false, 65, 0.05),
        (MapCase::ScaledSaddle, false, 65, 0.1),
        (MapCase::SaddleReeb, true, 65, 0.1),
        (MapCase::SaddleReeb, true, 65, 0.05),
        (MapCase::Constant, false, 17, 0.2),
    ];
    for (case, on_disk, points, eps) in configs {
        let d = if on_disk { disk(points) } else { unit_square(points) };
        let map = generate_map(case, &d, &MapParams::default()).unwrap();
        let a = approximate(&map, &ApproxConfig { epsilon: eps, probes: 50, ..Default::default() }).unwrap();
        cases.push((format!("{}{} eps={eps}", case.name(), if on_disk { " (disk)" } else { "" }), a));
    }
    let mut checked = 0;
    let mut with_edges = saddle_runs.iter().filter(|a| a.report.edges > 0).count();
    let mut failures = Vec::new();
    let all = saddle_runs.iter().map(|a| (format!("saddle-reeb eps={}", a.report.config.epsilon), a)).chain(cases.iter().map(|(n, a)| (n.clone(), a)));
    for (name, a) in all {
        let r = &a.report;
        let eps = r.config.epsilon;
        let e = a.tree.edges.len();
        let lambda = a.tree.edges.iter().map(|e| e.lambda).fold(f64::INFINITY, f64::min);
        let factor = 1.0 + (e as f64).sqrt() + 2.0 * e as f64;
        let expected = (eps / factor).min(lambda / 4.0);
        let budget = factor * r.delta + eps;
        checked += 1;
        if r.edges != e || r.delta != expected || budget > 2.0 * eps * (1.0 + 1e-15) {
            failures.push(format!("{name}: E={e} delta={} expected {expected} budget {budget}", r.delta));
        }
    }
    with_edges += cases.iter().filter(|(_, a)| a.report.edges > 0).count();
    let pass = failures.is_empty() && with_edges >= 5;
    outcome(pass, format!("{checked} runs, {with_edges} with E >= 1{}", failures.iter().map(|f| format!("; {f}")).collect::<String>()))
}

fn end_to_end(map: &SampledMap, runs: &[Approximation], seconds: &[f64]) -> Outcome {
    let h = 1.0 / 128.0;
    let d = map.domain();
    let mut errors = Vec::new();
    let mut pass = true;
    for (a, &secs) in runs.iter().zip(seconds) {
        let eps = a.report.config.epsilon;
        let region = compute_omega_eps(d, eps).unwrap();
        let err = (0..d.num_inside())
            .filter(|&v| region[v])
            .map(|v| norm(&sub(&a.f.eval(&d.point(v)), map.value(v))))
            .fold(0.0, f64::max);
        pass &= err <= 2.0 * eps + 5.0 * h && secs < 60.0 && err == a.report.verification.sup_error;
        errors.push(err);
    }
    pass &= errors.windows(2).all(|w| w[1] < w[0]);
    let detail = SADDLE_EPS
        .iter()
        .zip(&errors)
        .zip(seconds)
        .map(|((eps, err), s)| format!("eps={eps}: {err:.4} <= {:.4} ({s:.1}s)", 2.0 * eps + 5.0 * h))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, detail)
}

fn rank_conclusion(runs: &[Approximation]) -> Outcome {
    let step = 1e-6;
    let mut pass = true;
    let mut parts = Vec::new();
    for a in runs {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut tested, mut worst) = (0, 0.0f64);
        for _ in 0..1000 {
            let x = [rng.gen_range(0.01..0.99), rng.gen_range(0.01..0.99)];
            let f0 = a.f.eval(&x);
            let mut jac = [0.0; 4];
            for b in 0..2 {
                let (mut xp, mut xm) = (x, x);
                xp[b] += step;
                xm[b] -= step;
                let (fp, fm) = (a.f.eval(&xp), a.f.eval(&xm));
                for i in 0..2 {
                    jac[i * 2 + b] = (fp[i] - fm[i]) / (2.0 * step);
                }
            }
            let noise = f64::EPSILON * f0.iter().fold(1.0f64, |m, v| m.max(v.abs())) / step;
            let (s1, s2) = singular_values_2x2(&jac);
            if s1 > 10.0 * noise {
                tested += 1;
                worst = worst.max(s2 / s1);
            }
        }
        pass &= worst <= 1e-3;
        parts.push(format!("eps={}: {tested} probes above noise, max s2/s1 {worst:.2e}", a.report.config.epsilon));
    }
    outcome(pass, parts.join(", "))
}

fn quasimetric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let start = Instant::now();
    for _ in 0..20 {
        let codim = rng.gen_range(1..=3);
        let d = build_grid_domain(&GridSpec::unit_cube(2, 5), |_| true).unwrap();
        let values: Vec<f64> = (0..25 * codim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let map = SampledMap::new(d.clone(), codim, values).unwrap();
        let graph = build_weight_graph(&map, GraphOptions::default());
        let mut edges = Vec::new();
        for v in 0..25 {
            for (w, _) in d.neighbors(v) {
                edges.push((v, w, norm(&sub(map.value(v), map.value(w)))));
            }
        }
        let all = floyd(25, edges);
        let source = rng.gen_range(0..25);
        let single = graph.df_from(source).unwrap();
        for target in 0..25 {
            worst = worst.max((single[target] - all[source][target]).abs());
            worst = worst.max((df_distance(&graph, target, source).unwrap() - all[target][source]).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-12 && secs < 1.0, format!("20 instances, max deviation {worst:.1e}, {secs:.3}s"))
}

fn tree_combinatorics(zf: &QuotientTree) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = zf.num_classes();
    let mut worst = String::new();
    let mut pass = true;
    let mut trees = 0;
    for k in 2..=12usize {
        for _ in 0..20 {
            let mut net: Vec<usize> = Vec::new();
            while net.len() < k {
                let c = rng.gen_range(0..n);
                if !net.contains(&c) {
                    net.push(c);
                }
            }
            let tree = build_subtree(zf, &net).unwrap();
            trees += 1;
            let (v, e) = (tree.vertices.len(), tree.edges.len());
            if v > 2 * k - 2 || e > 2 * k - 3 {
                pass = false;
                worst = format!("; k={k}: {v} vertices, {e} edges");
            }
        }
    }
    outcome(pass, format!("{trees} random nets on {n} classes{worst}"))
}

/// Lipschitz and nearest-point checks of the retraction onto `tree`.
fn check_retraction(zf: &QuotientTree, tree: &FiniteTree, r: &Retraction, seed: u64) -> (f64, f64) {
    let n = zf.num_classes();
    let dq = floyd(n, zf.edges().iter().copied());
    let vd = vertex_distances(tree);
    let tree_classes = tree.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lipschitz_excess = f64::NEG_INFINITY;
    for _ in 0..10_000 {
        let (x, y) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let d = tree_distance(tree, &vd, r.to_tree[x], r.to_tree[y]);
        lipschitz_excess = lipschitz_excess.max(d - dq[x][y]);
    }
    let mut nearest_error = 0.0f64;
    for x in 0..n {
        let dist = tree_classes.iter().map(|&c| dq[x][c]).fold(f64::INFINITY, f64::min);
        nearest_error = nearest_error.max((r.displacement[x] - dist).abs()).max((dq[x][r.nearest[x]] - dist).abs());
    }
    (lipschitz_excess, nearest_error)
}

fn retraction_properties(runs: &[Approximation]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for a in runs.iter().filter(|a| !a.tree.edges.is_empty()) {
        let (excess, nearest) = check_retraction(&a.quotient, &a.tree, &a.retraction, 17);
        let eps = a.report.config.epsilon;
        let displacement = a.retraction.max_displacement(&a.region);
        pass &= excess <= 1e-9 && nearest <= 1e-9 && displacement < eps;
        parts.push(format!("eps={eps}: max d(rx,ry)-d(x,y) {excess:.1e}, |d(x,rx)-dist(x,T)| {nearest:.1e}, displacement {displacement:.3}"));
    }
    // small nets leave most classes off the tree
    let zf = &runs[runs.len() - 1].quotient;
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let (mut excess, mut nearest, mut off_tree) = (f64::NEG_INFINITY, 0.0f64, 0usize);
    for k in 2..=4 {
        let mut net = Vec::new();
        while net.len() < k {
            let c = rng.gen_range(0..zf.num_classes());
            if !net.contains(&c) {
                net.push(c);
            }
        }
        let tree = build_subtree(zf, &net).unwrap();
        let r = retract(zf, &tree).unwrap();
        off_tree += r.displacement.iter().filter(|&&d| d > 0.0).count();
        let (e, n) = check_retraction(zf, &tree, &r, k as u64);
        excess = excess.max(e);
        nearest = nearest.max(n);
    }
    pass &= excess <= 1e-9 && nearest <= 1e-9 && off_tree > 0;
    parts.push(format!("random nets: {off_tree} off-tree classes, max excess {excess:.1e}, nearest error {nearest:.1e}"));
    outcome(pass && !parts.is_empty(), parts.join(", "))
}

fn embedding_isometry(runs: &[Approximation]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for a in runs.iter().filter(|a| a.embedding.is_some()) {
        let vd = vertex_distances(&a.tree);
        let e = a.tree.edges.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (mut l1_defect, mut inverse) = (0.0f64, 0.0f64);
        for _ in 0..10_000 {
            let (p, q) = (random_tree_point(&a.tree, &mut rng), random_tree_point(&a.tree, &mut rng));
            let dt = tree_distance(&a.tree, &vd, p, q);
            let diff = sub(&embed(a, p), &embed(a, q));
            let l1: f64 = diff.iter().map(|v| v.abs()).sum();
            l1_defect = l1_defect.max((dt - l1).abs());
            let l2 = norm(&diff);
            if l2 > 0.0 {
                inverse = inverse.max(dt / l2);
            }
        }
        pass &= l1_defect <= 1e-9 && inverse <= e.sqrt() + 1e-6;
        parts.push(format!("E={e}: l1 defect {l1_defect:.1e}, inverse Lipschitz {inverse:.3} <= {:.3}", e.sqrt()));
    }
    outcome(pass && !parts.is_empty(), parts.join(", "))
}

fn projection_invariants(runs: &[Approximation]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for a in runs.iter().filter(|a| a.embedding.is_some()) {
        let FEps::Composition { rho, .. } = &a.f else { continue };
        let delta = a.report.delta;
        let e = a.tree.edges.len();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (mut off_image, mut shift, mut most_active, mut fd_mismatch) = (0.0f64, 0.0f64, 0usize, 0.0f64);
        for _ in 0..10_000 {
            let base = embed(a, random_tree_point(&a.tree, &mut rng));
            let dir: Vec<f64> = (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let radius = 0.999 * delta * rng.gen::<f64>() / norm(&dir).max(1e-300);
            let t: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + radius * d).collect();
            let out = rho.eval(&t);
            off_image = off_image.max(distance_to_image(a, &out));
            shift = shift.max(norm(&sub(&out, &t)) / (2.0 * (e as f64).sqrt() * delta));
            let diag = rho.diagonal(&t);
            most_active = most_active.max(diag.iter().filter(|v| v.abs() > 1e-9).count());
            let h = 1e-7 * delta;
            for k in 0..e {
                let (mut tp, mut tm) = (t.clone(), t.clone());
                tp[k] += h;
                tm[k] -= h;
                let fd = (rho.eval(&tp)[k] - rho.eval(&tm)[k]) / (2.0 * h);
                fd_mismatch = fd_mismatch.max((fd - diag[k]).abs() / (1.0 + diag[k].abs()));
            }
        }
        pass &= off_image <= 1e-9 && shift <= 1.0 && most_active <= 1 && fd_mismatch <= 1e-4;
        parts.push(format!(
            "E={e}: off image {off_image:.1e}, shift/(2 sqrt(E) delta) {shift:.3}, active entries {most_active}, derivative check {fd_mismatch:.1e}"
        ));
    }
    outcome(pass && !parts.is_empty(), parts.join(", "))
}

fn negative_control() -> Outcome {
    let map = generate_map(MapCase::FullRankCounterexample, &unit_square(33), &MapParams::default()).unwrap();
    let graph = build_weight_graph(&map, GraphOptions::default());
    let zf = build_quotient(&graph, &map, default_tau(&graph)).unwrap();
    let check = check_tree(&zf, 20_000, 1e-9, 0);
    let strict = approximate(&map, &ApproxConfig { epsilon: 0.1, strict_rank: true, ..Default::default() });
    let code = strict.as_ref().err().map_or(0, Error::exit_code);
    let pass = !check.pass && check.max_four_point_defect > 0.0 && matches!(strict, Err(Error::HypothesisViolated { .. })) && code == 2;
    outcome(pass, format!("four-point defect {:.3}, strict exit code {code}", check.max_four_point_defect))
}

fn determinism(map: &SampledMap, first: &Approximation) -> Outcome {
    let second = approximate(map, &first.report.config).unwrap();
    let r1 = serde_json::to_string_pretty(&first.report).unwrap();
    let r2 = serde_json::to_string_pretty(&second.report).unwrap();
    let f1 = serde_json::to_string(&ApproxFile::new(first)).unwrap();
    let f2 = serde_json::to_string(&ApproxFile::new(&second)).unwrap();
    outcome(r1 == r2 && f1 == f2, format!("report {} bytes, approximation {} bytes", r1.len(), f1.len()))
}

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() -> ExitCode {
    let map = saddle(129);
    let mut runs = Vec::new();
    let mut seconds = Vec::new();
    for eps in SADDLE_EPS {
        let start = Instant::now();
        runs.push(approximate(&map, &ApproxConfig { epsilon: eps, ..Default::default() }).expect("saddle run"));
        seconds.push(start.elapsed().as_secs_f64());
    }
    let checks: Vec<(&str, Check)> = vec![
        ("error budget identity", Box::new(|| error_budget_identity(&runs))),
        ("end-to-end approximation", Box::new(|| end_to_end(&map, &runs, &seconds))),
        ("rank of f_eps", Box::new(|| rank_conclusion(&runs))),
        ("quasimetric oracle equivalence", Box::new(quasimetric_oracle)),
        ("tree combinatorics", Box::new(|| tree_combinatorics(&runs[2].quotient))),
        ("retraction properties", Box::new(|| retraction_properties(&runs))),
        ("embedding isometry", Box::new(|| embedding_isometry(&runs))),
        ("projection invariants", Box::new(|| projection_invariants(&runs))),
        ("negative control", Box::new(negative_control)),
        ("determinism", Box::new(|| determinism(&map, &runs[1]))),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let o = check();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance checks failed");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
