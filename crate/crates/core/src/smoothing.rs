//! Smooth clamps, the projection `rho` onto the embedded tree, lattice
//! mollification and the McShane extension with its smoothing.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::grid::{euclid, SampledMap};
use crate::quadrature::GaussLegendre;
use crate::quasimetric::interpolate;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothness {
    /// Transitions built from the bump `exp(-1/(t(1-t)))`.
    #[default]
    CInfinity,
    /// `6t^5 - 15t^4 + 10t^3`, twice continuously differentiable.
    Polynomial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothKind {
    MollifiedGrid,
    ClampProduct,
    McshaneMollified,
    Composition,
    Constant,
}

/// A smooth map `R^p -> R^q` with derivative queries.
pub trait SmoothMap: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn kind(&self) -> SmoothKind;
    fn eval(&self, x: &[f64]) -> Vec<f64>;
    /// Row-major `output_dim x input_dim`.
    fn jacobian(&self, x: &[f64]) -> Vec<f64>;
}

const QUADRATURE_POINTS: usize = 64;

fn rule() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(QUADRATURE_POINTS))
}

fn bump(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        0.0
    } else {
        (-1.0 / (t * (1.0 - t))).exp()
    }
}

fn bump_mass() -> f64 {
    static MASS: OnceLock<f64> = OnceLock::new();
    *MASS.get_or_init(|| rule().integrate_composite(0.0, 1.0, 2, bump))
}

/// Monotone blend from 0 at `t <= 0` to 1 at `t >= 1`, with its derivative.
pub fn blend(t: f64, smoothness: Smoothness) -> (f64, f64) {
    if t <= 0.0 {
        return (0.0, 0.0);
    }
    if t >= 1.0 {
        return (1.0, 0.0);
    }
    match smoothness {
        Smoothness::Polynomial => {
            let t2 = t * t;
            (t2 * t * (10.0 - 15.0 * t + 6.0 * t2), 30.0 * t2 * (1.0 - t) * (1.0 - t))
        }
        Smoothness::CInfinity => {
            let mass = bump_mass();
            // integrate from the nearer end so both halves are equally accurate
            let value = if t <= 0.5 {
                rule().integrate(0.0, t, bump) / mass
            } else {
                1.0 - rule().integrate(t, 1.0, bump) / mass
            };
            (value, bump(t) / mass)
        }
    }
}

/// `xi`: zero below `delta`, the identity on `[2 delta, lambda - 2 delta]`,
/// `lambda` above `lambda - delta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothClamp {
    pub lambda: f64,
    pub delta: f64,
    pub smoothness: Smoothness,
}

pub fn make_clamp(lambda: f64, delta: f64, smoothness: Smoothness) -> Result<SmoothClamp> {
    if !(delta > 0.0 && delta <= lambda / 4.0) {
        return Err(Error::DeltaTooLarge { delta, limit: lambda / 4.0 });
    }
    Ok(SmoothClamp { lambda, delta, smoothness })
}

impl SmoothClamp {
    /// `(xi(s), xi'(s))`.
    pub fn eval(&self, s: f64) -> (f64, f64) {
        let (l, d) = (self.lambda, self.delta);
        if s <= d {
            (0.0, 0.0)
        } else if s < 2.0 * d {
            let (b, db) = blend((s - d) / d, self.smoothness);
            (b * s, db * s / d + b)
        } else if s <= l - 2.0 * d {
            (s, 1.0)
        } else if s < l - d {
            let (b, db) = blend((s - (l - 2.0 * d)) / d, self.smoothness);
            (s + b * (l - s), 1.0 - b + db * (l - s) / d)
        } else {
            (l, 0.0)
        }
    }

    pub fn value(&self, s: f64) -> f64 {
        self.eval(s).0
    }
}

/// `rho(t) = (xi_1(t_1), ..., xi_E(t_E))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rho {
    pub clamps: Vec<SmoothClamp>,
}

pub fn rho_eps(emb: &Embedding, delta: f64, smoothness: Smoothness) -> Result<Rho> {
    let limit = emb.lambdas.iter().copied().fold(f64::INFINITY, f64::min) / 4.0;
    if !(delta > 0.0 && delta <= limit) {
        return Err(Error::DeltaTooLarge { delta, limit });
    }
    let clamps = emb.lambdas.iter().map(|&l| make_clamp(l, delta, smoothness)).collect::<Result<_>>()?;
    Ok(Rho { clamps })
}

impl Rho {
    /// Diagonal of the derivative.
    pub fn diagonal(&self, t: &[f64]) -> Vec<f64> {
        self.clamps.iter().zip(t).map(|(c, &s)| c.eval(s).1).collect()
    }
}

impl SmoothMap for Rho {
    fn input_dim(&self) -> usize {
        self.clamps.len()
    }
    fn output_dim(&self) -> usize {
        self.clamps.len()
    }
    fn kind(&self) -> SmoothKind {
        SmoothKind::ClampProduct
    }
    fn eval(&self, t: &[f64]) -> Vec<f64> {
        self.clamps.iter().zip(t).map(|(c, &s)| c.value(s)).collect()
    }
    fn jacobian(&self, t: &[f64]) -> Vec<f64> {
        let n = self.clamps.len();
        let mut jac = vec![0.0; n * n];
        for (k, d) in self.diagonal(t).into_iter().enumerate() {
            jac[k * n + k] = d;
        }
        jac
    }
}

// One-dimensional kernel kappa(u) ~ exp(-1/(1-u^2)) on (-1, 1).

fn kappa_raw(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - u * u)).exp()
    }
}

fn kappa_mass() -> f64 {
    static MASS: OnceLock<f64> = OnceLock::new();
    *MASS.get_or_init(|| rule().integrate_composite(-1.0, 1.0, 2, kappa_raw))
}

/// `(G(u), K(u))` for the unit kernel: `K` is the distribution function and
/// `G(u) = u K(u) - int_{-1}^u s kappa(s) ds`, the kernel smoothing of `max(u, 0)`.
fn ramp_smoothing(u: f64) -> (f64, f64) {
    if u <= -1.0 {
        return (0.0, 0.0);
    }
    if u >= 1.0 {
        return (u, 1.0);
    }
    let mass = kappa_mass();
    let gl = rule();
    let (k, m) = if u <= 0.0 {
        let k = gl.integrate(-1.0, u, kappa_raw) / mass;
        let m = gl.integrate(-1.0, u, |s| s * kappa_raw(s)) / mass;
        (k, m)
    } else {
        // the kernel is even with zero mean: use the tail on [u, 1]
        let k = 1.0 - gl.integrate(u, 1.0, kappa_raw) / mass;
        let m = -gl.integrate(u, 1.0, |s| s * kappa_raw(s)) / mass;
        (k, m)
    };
    (u * k - m, k)
}

/// Regular lattice `origin + index * pitch` with `shape` nodes per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub origin: Vec<f64>,
    pub pitch: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Lattice {
    pub fn dim(&self) -> usize {
        self.shape.len()
    }
    pub fn point(&self, index: &[usize]) -> Vec<f64> {
        index.iter().enumerate().map(|(a, &i)| self.origin[a] + i as f64 * self.pitch[a]).collect()
    }
}

/// Values on a lattice; indices passed to [`FieldSource::sample`] are in range.
pub trait FieldSource: Send + Sync {
    fn lattice(&self) -> &Lattice;
    fn codim(&self) -> usize;
    fn sample(&self, index: &[usize]) -> Vec<f64>;
}

/// Per-axis weights of the mollified hat functions at a coordinate:
/// clamped lattice index, weight, derivative.
fn axis_weights(x: f64, origin: f64, h: f64, n: usize, sigma: f64) -> Vec<(usize, f64, f64)> {
    let t = (x - origin) / h;
    let reach = sigma / h + 1.0;
    let lo = (t - reach).ceil() as i64;
    let hi = (t + reach).floor() as i64;
    // G and K at z_j = x - x_j for j in lo-1..=hi+1
    let gk: Vec<(f64, f64)> = (lo - 1..=hi + 1)
        .map(|j| {
            let z = x - (origin + j as f64 * h);
            let (g, k) = ramp_smoothing(z / sigma);
            (sigma * g, k)
        })
        .collect();
    let mut out: Vec<(usize, f64, f64)> = Vec::new();
    for (pos, j) in (lo..=hi).enumerate() {
        let (gm, km) = gk[pos];
        let (g0, k0) = gk[pos + 1];
        let (gp, kp) = gk[pos + 2];
        // z_{j-1} = z_j + h
        let w = (gm - 2.0 * g0 + gp) / h;
        let dw = (km - 2.0 * k0 + kp) / h;
        if w == 0.0 && dw == 0.0 {
            continue;
        }
        let index = j.clamp(0, n as i64 - 1) as usize;
        match out.last_mut() {
            Some(last) if last.0 == index => {
                last.1 += w;
                last.2 += dw;
            }
            _ => out.push((index, w, dw)),
        }
    }
    out
}

/// Convolution of the multilinear interpolant of a lattice field (extended
/// by clamping indices) with a tensor-product kernel of radius `sigma`.
#[derive(Clone, Debug)]
pub struct Mollified<S> {
    pub source: S,
    pub sigma: f64,
}

impl<S: FieldSource> Mollified<S> {
    pub fn new(source: S, sigma: f64) -> Self {
        Self { source, sigma }
    }

    /// Value and row-major Jacobian.
    pub fn eval_with_jacobian(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let lat = self.source.lattice();
        let p = lat.dim();
        let q = self.source.codim();
        let axes: Vec<_> = (0..p).map(|a| axis_weights(x[a], lat.origin[a], lat.pitch[a], lat.shape[a], self.sigma)).collect();
        // accumulate differences to a reference sample and divide by the
        // discrete kernel mass, so constant fields come back exactly
        let mut reference: Option<Vec<f64>> = None;
        let mut sum = vec![0.0; q];
        let mut dsum = vec![0.0; q * p];
        let (mut mass, mut dmass) = (0.0, vec![0.0; p]);
        let mut pick = vec![0usize; p];
        let mut index = vec![0usize; p];
        let mut grad = vec![0.0; p];
        let count: usize = axes.iter().map(Vec::len).product();
        for mut flat in 0..count {
            for a in (0..p).rev() {
                pick[a] = flat % axes[a].len();
                flat /= axes[a].len();
            }
            let mut w = 1.0;
            for a in 0..p {
                let (i, wa, _) = axes[a][pick[a]];
                index[a] = i;
                w *= wa;
            }
            for (b, g) in grad.iter_mut().enumerate() {
                *g = (0..p).map(|a| if a == b { axes[a][pick[a]].2 } else { axes[a][pick[a]].1 }).product();
            }
            if w == 0.0 && grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let v = self.source.sample(&index);
            let r = reference.get_or_insert_with(|| v.clone());
            mass += w;
            for (dm, g) in dmass.iter_mut().zip(&grad) {
                *dm += g;
            }
            for c in 0..q {
                let dv = v[c] - r[c];
                sum[c] += w * dv;
                for b in 0..p {
                    dsum[c * p + b] += grad[b] * dv;
                }
            }
        }
        let reference = reference.unwrap_or_else(|| vec![0.0; q]);
        let mut value = vec![0.0; q];
        let mut jac = vec![0.0; q * p];
        for c in 0..q {
            let mean = sum[c] / mass;
            value[c] = reference[c] + mean;
            for b in 0..p {
                jac[c * p + b] = (dsum[c * p + b] - mean * dmass[b]) / mass;
            }
        }
        (value, jac)
    }

    /// Lattice indices whose values enter the evaluation at `x`.
    pub fn support(&self, x: &[f64]) -> Vec<Vec<usize>> {
        let lat = self.source.lattice();
        (0..lat.dim())
            .map(|a| axis_weights(x[a], lat.origin[a], lat.pitch[a], lat.shape[a], self.sigma).into_iter().map(|t| t.0).collect())
            .collect()
    }
}

impl<S: FieldSource> SmoothMap for Mollified<S> {
    fn input_dim(&self) -> usize {
        self.source.lattice().dim()
    }
    fn output_dim(&self) -> usize {
        self.source.codim()
    }
    fn kind(&self) -> SmoothKind {
        SmoothKind::MollifiedGrid
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.eval_with_jacobian(x).0
    }
    fn jacobian(&self, x: &[f64]) -> Vec<f64> {
        self.eval_with_jacobian(x).1
    }
}

/// Samples of a [`SampledMap`]; nodes outside the mask take the value of the
/// nearest inside node.
#[derive(Clone, Debug)]
pub struct GridSource {
    lattice: Lattice,
    codim: usize,
    values: Vec<f64>,
    strides: Vec<usize>,
}

impl GridSource {
    pub fn new(map: &SampledMap) -> Self {
        let d = map.domain();
        let owner = d.nearest_inside();
        let values = owner.iter().flat_map(|&c| map.value(c).iter().copied()).collect();
        Self {
            lattice: Lattice { origin: d.origin().to_vec(), pitch: d.spacing().to_vec(), shape: d.shape().to_vec() },
            codim: map.codim(),
            values,
            strides: d.strides(),
        }
    }
}

impl FieldSource for GridSource {
    fn lattice(&self) -> &Lattice {
        &self.lattice
    }
    fn codim(&self) -> usize {
        self.codim
    }
    fn sample(&self, index: &[usize]) -> Vec<f64> {
        let flat: usize = index.iter().zip(&self.strides).map(|(i, s)| i * s).sum();
        self.values[flat * self.codim..(flat + 1) * self.codim].to_vec()
    }
}

/// A function sampled lazily on a lattice.
pub struct FnSource<F> {
    pub lattice: Lattice,
    pub codim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64> + Send + Sync> FieldSource for FnSource<F> {
    fn lattice(&self) -> &Lattice {
        &self.lattice
    }
    fn codim(&self) -> usize {
        self.codim
    }
    fn sample(&self, index: &[usize]) -> Vec<f64> {
        (self.f)(&self.lattice.point(index))
    }
}

/// Maximal halvings of the kernel radius before giving up.
pub const MAX_RETRIES: usize = 6;

/// Largest `|v(a) - v(b)| / |a - b|` over neighboring inside nodes.
pub fn grid_lipschitz(map: &SampledMap) -> f64 {
    let d = map.domain();
    (0..d.num_inside())
        .into_par_iter()
        .map(|v| {
            d.neighbors(v)
                .filter(|&(w, _)| w > v)
                .map(|(w, a)| euclid(map.value(v), map.value(w)) / d.spacing()[a])
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct MollifiedMap {
    pub field: Mollified<GridSource>,
    pub lipschitz: f64,
    pub achieved: f64,
    pub retries: usize,
}

/// Mollifies the multilinear interpolant of `map` so that it stays within
/// `target` at every inside node and at random inside points whose kernel
/// support avoids outside nodes.
pub fn mollify_map(map: &SampledMap, target: f64, seed: u64) -> Result<MollifiedMap> {
    if !(target > 0.0) {
        return Err(Error::InvalidInput("target must be positive".into()));
    }
    let d = map.domain();
    let p = d.dim() as f64;
    let lipschitz = grid_lipschitz(map);
    let hmin = d.spacing().iter().copied().fold(f64::INFINITY, f64::min);
    // the interpolant is sqrt(p) L-Lipschitz and the kernel reaches sqrt(p) sigma
    let mut sigma = if lipschitz > 0.0 { target / (2.0 * p * lipschitz) } else { hmin };
    let source = GridSource::new(map);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes: Vec<Vec<f64>> = (0..2000)
        .map(|_| (0..d.dim()).map(|a| d.origin()[a] + rng.gen::<f64>() * (d.shape()[a] - 1) as f64 * d.spacing()[a]).collect())
        .collect();
    let mut achieved = f64::INFINITY;
    for retries in 0..=MAX_RETRIES {
        let field = Mollified::new(source.clone(), sigma);
        let inside_ok = |x: &[f64]| support_inside(&field, map, x);
        let nodes = (0..d.num_inside()).into_par_iter().filter_map(|v| {
            let x = d.point(v);
            inside_ok(&x).then(|| euclid(&field.eval(&x), map.value(v)))
        });
        let off = probes.par_iter().filter_map(|x| {
            let exact = interpolate(map, x)?;
            inside_ok(x).then(|| euclid(&field.eval(x), &exact))
        });
        achieved = nodes.chain(off).reduce(|| 0.0, f64::max);
        if achieved < target {
            return Ok(MollifiedMap { field, lipschitz, achieved, retries });
        }
        sigma *= 0.5;
    }
    Err(Error::CannotMeetTolerance { target, achieved, retries: MAX_RETRIES })
}

fn support_inside(field: &Mollified<GridSource>, map: &SampledMap, x: &[f64]) -> bool {
    let d = map.domain();
    let axes = field.support(x);
    let mut index = vec![0usize; axes.len()];
    let count: usize = axes.iter().map(Vec::len).product();
    (0..count).all(|mut flat| {
        for a in (0..axes.len()).rev() {
            index[a] = axes[a][flat % axes[a].len()];
            flat /= axes[a].len();
        }
        d.inside_mask()[d.ravel(&index)]
    })
}

/// Mollifies an `L`-Lipschitz function given on the box `bounds` (at most
/// four dimensions) so that probes stay within `target`.
pub fn smooth_closure<F>(
    f: F,
    codim: usize,
    bounds: &[(f64, f64)],
    lipschitz: f64,
    target: f64,
    probes: &[Vec<f64>],
    exact: impl Fn(&[f64]) -> Vec<f64> + Sync,
) -> Result<Mollified<FnSource<F>>>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    let p = bounds.len();
    if p == 0 || p > 4 {
        return Err(Error::InvalidInput("lattice smoothing needs 1 to 4 dimensions".into()));
    }
    let mut sigma = if lipschitz > 0.0 { target / (2.0 * p as f64 * lipschitz) } else { 1e-2 };
    let mut f = Some(f);
    let mut achieved = f64::INFINITY;
    for _ in 0..=MAX_RETRIES {
        let pitch = sigma / 2.0;
        let lattice = Lattice {
            origin: bounds.iter().map(|b| b.0 - sigma - pitch).collect(),
            pitch: vec![pitch; p],
            shape: bounds.iter().map(|b| ((b.1 - b.0 + 2.0 * (sigma + pitch)) / pitch).ceil() as usize + 1).collect(),
        };
        let field = Mollified::new(FnSource { lattice, codim, f: f.take().expect("closure") }, sigma);
        achieved = probes.par_iter().map(|x| euclid(&field.eval(x), &exact(x))).reduce(|| 0.0, f64::max);
        if achieved < target {
            return Ok(field);
        }
        f = Some(field.source.f);
        sigma *= 0.5;
    }
    Err(Error::CannotMeetTolerance { target, achieved, retries: MAX_RETRIES })
}

/// `F_j(x) = min_e (v_j(e) + L |x - e|)`, per output component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McShane {
    pub dim: usize,
    pub codim: usize,
    /// Sample points, row-major.
    pub points: Vec<f64>,
    /// Sample values, row-major.
    pub values: Vec<f64>,
    pub lipschitz: f64,
}

/// Relative slack of the pairwise Lipschitz check.
const LIPSCHITZ_SLACK: f64 = 1e-9;

pub fn mcshane_extend(points: Vec<Vec<f64>>, values: Vec<Vec<f64>>, lipschitz: f64) -> Result<McShane> {
    if points.is_empty() || points.len() != values.len() {
        return Err(Error::InvalidInput("McShane needs matching, non-empty samples".into()));
    }
    let dim = points[0].len();
    let codim = values[0].len();
    let n = points.len();
    let bad = (0..n).into_par_iter().find_map_first(|a| {
        (a + 1..n).find_map(|b| {
            let dist = euclid(&points[a], &points[b]);
            let limit = lipschitz * dist * (1.0 + LIPSCHITZ_SLACK) + 1e-12;
            values[a].iter().zip(&values[b]).any(|(x, y)| (x - y).abs() > limit).then_some((a, b))
        })
    });
    if let Some((a, b)) = bad {
        return Err(Error::SamplesNotLipschitz { a, b, lipschitz });
    }
    Ok(McShane { dim, codim, points: points.concat(), values: values.concat(), lipschitz })
}

impl McShane {
    pub fn len(&self) -> usize {
        self.points.len() / self.dim.max(1)
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
    pub fn point(&self, e: usize) -> &[f64] {
        &self.points[e * self.dim..(e + 1) * self.dim]
    }
    pub fn value(&self, e: usize) -> &[f64] {
        &self.values[e * self.codim..(e + 1) * self.codim]
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![f64::INFINITY; self.codim];
        for e in 0..self.len() {
            let r = self.lipschitz * euclid(x, self.point(e));
            for (o, v) in out.iter_mut().zip(self.value(e)) {
                *o = o.min(v + r);
            }
        }
        out
    }
}

/// Softmax-weighted average of the smoothed cones `v_e + L sqrt(|x-e|^2 + eta^2)`
/// at temperature `s`: within `L eta + s ln N` of the McShane extension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftMcShane {
    pub base: McShane,
    pub temperature: f64,
    pub eta: f64,
}

impl SoftMcShane {
    pub fn error_bound(&self) -> f64 {
        self.base.lipschitz * self.eta + self.temperature * (self.base.len() as f64).ln()
    }

    pub fn eval_with_jacobian(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (p, q) = (self.base.dim, self.base.codim);
        let l = self.base.lipschitz;
        let n = self.base.len();
        let radial: Vec<f64> = (0..n).map(|e| (sq_dist(x, self.base.point(e)) + self.eta * self.eta).sqrt()).collect();
        let mut value = vec![0.0; q];
        let mut jac = vec![0.0; q * p];
        let mut cones = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for j in 0..q {
            for e in 0..n {
                cones[e] = self.base.value(e)[j] + l * radial[e];
            }
            let low = cones.iter().copied().fold(f64::INFINITY, f64::min);
            let mut total = 0.0;
            for e in 0..n {
                weights[e] = (-(cones[e] - low) / self.temperature).exp();
                total += weights[e];
            }
            let f: f64 = (0..n).map(|e| weights[e] * cones[e]).sum::<f64>() / total;
            value[j] = f;
            if l == 0.0 {
                continue;
            }
            for e in 0..n {
                let w = weights[e] / total;
                if w == 0.0 || radial[e] == 0.0 {
                    continue;
                }
                let factor = w * (1.0 - (cones[e] - f) / self.temperature) * l / radial[e];
                for (b, (&xb, &eb)) in x.iter().zip(self.base.point(e)).enumerate() {
                    jac[j * p + b] += factor * (xb - eb);
                }
            }
        }
        (value, jac)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl SmoothMap for SoftMcShane {
    fn input_dim(&self) -> usize {
        self.base.dim
    }
    fn output_dim(&self) -> usize {
        self.base.codim
    }
    fn kind(&self) -> SmoothKind {
        SmoothKind::McshaneMollified
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.eval_with_jacobian(x).0
    }
    fn jacobian(&self, x: &[f64]) -> Vec<f64> {
        self.eval_with_jacobian(x).1
    }
}

/// Smooths a McShane extension to within `target` of it, checked on `probes`.
pub fn smooth_lipschitz(base: &McShane, target: f64, probes: &[Vec<f64>]) -> Result<SoftMcShane> {
    if !(target > 0.0) {
        return Err(Error::InvalidInput("target must be positive".into()));
    }
    let logn = (base.len().max(2) as f64).ln();
    let mut budget = 0.98 * target;
    let mut achieved = f64::INFINITY;
    for _ in 0..=MAX_RETRIES {
        let eta = if base.lipschitz > 0.0 { 0.5 * budget / base.lipschitz } else { 0.0 };
        let soft = SoftMcShane { base: base.clone(), temperature: 0.5 * budget / logn, eta };
        achieved = probes
            .par_iter()
            .map(|x| {
                let exact = base.eval(x);
                let approx = soft.eval_with_jacobian(x).0;
                exact.iter().zip(&approx).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max);
        if achieved < target {
            return Ok(soft);
        }
        budget *= 0.5;
    }
    Err(Error::CannotMeetTolerance { target, achieved, retries: MAX_RETRIES })
}

/// A constant map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constant {
    pub dim: usize,
    pub value: Vec<f64>,
}

impl SmoothMap for Constant {
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        self.value.len()
    }
    fn kind(&self) -> SmoothKind {
        SmoothKind::Constant
    }
    fn eval(&self, _: &[f64]) -> Vec<f64> {
        self.value.clone()
    }
    fn jacobian(&self, _: &[f64]) -> Vec<f64> {
        vec![0.0; self.value.len() * self.dim]
    }
}

/// Central-difference Jacobian, row-major.
pub fn fd_jacobian(map: &dyn SmoothMap, x: &[f64], step: f64) -> Vec<f64> {
    let (p, q) = (map.input_dim(), map.output_dim());
    let mut jac = vec![0.0; q * p];
    let mut y = x.to_vec();
    for b in 0..p {
        y[b] = x[b] + step;
        let plus = map.eval(&y);
        y[b] = x[b] - step;
        let minus = map.eval(&y);
        y[b] = x[b];
        for c in 0..q {
            jac[c * p + b] = (plus[c] - minus[c]) / (2.0 * step);
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid_domain, GridSpec};

    #[test]
    fn blend_endpoints_and_symmetry() {
        for s in [Smoothness::CInfinity, Smoothness::Polynomial] {
            assert_eq!(blend(0.0, s).0, 0.0);
            assert_eq!(blend(1.0, s).0, 1.0);
            for t in [0.1, 0.3, 0.45] {
                assert!((blend(t, s).0 + blend(1.0 - t, s).0 - 1.0).abs() < 1e-13);
            }
            assert!((blend(0.5, s).0 - 0.5).abs() < 1e-13);
        }
    }

    #[test]
    fn blend_derivative_matches_differences() {
        for t in [0.05, 0.2, 0.5, 0.77, 0.93] {
            let h = 1e-6;
            let fd = (blend(t + h, Smoothness::CInfinity).0 - blend(t - h, Smoothness::CInfinity).0) / (2.0 * h);
            let exact = blend(t, Smoothness::CInfinity).1;
            assert!((fd - exact).abs() < 1e-6 * exact.max(1.0), "t {t}: {fd} vs {exact}");
        }
    }

    #[test]
    fn clamp_plateaus() {
        let c = make_clamp(1.0, 0.1, Smoothness::CInfinity).unwrap();
        assert_eq!(c.value(0.0), 0.0);
        assert_eq!(c.value(1.0), 1.0);
        assert_eq!(c.value(0.5), 0.5);
        assert_eq!(c.value(0.1), 0.0);
        assert_eq!(c.value(0.9), 1.0);
        assert_eq!(c.value(-0.05), 0.0);
    }

    #[test]
    fn clamp_rejects_large_delta() {
        assert!(matches!(make_clamp(1.0, 0.3, Smoothness::CInfinity), Err(Error::DeltaTooLarge { .. })));
        assert!(make_clamp(1.0, 0.25, Smoothness::CInfinity).is_ok());
    }

    #[test]
    fn clamp_monotone_and_close() {
        for (lambda, delta) in [(1.0, 0.1), (1.0, 0.25), (0.3, 0.01)] {
            for s in [Smoothness::CInfinity, Smoothness::Polynomial] {
                let c = make_clamp(lambda, delta, s).unwrap();
                let n = 10_000;
                let (lo, hi) = (-delta, lambda + delta);
                let mut prev = c.value(lo);
                for i in 1..n {
                    let x = lo + (hi - lo) * i as f64 / n as f64;
                    let v = c.value(x);
                    assert!(v - prev >= -1e-12, "not monotone at {x}");
                    assert!((v - x).abs() < 2.0 * delta);
                    assert!(c.eval(x).1 >= -1e-9);
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn kernel_ramp_smoothing() {
        // G is convex, equals max(u,0) away from the kernel, and G' = K
        assert_eq!(ramp_smoothing(-1.5), (0.0, 0.0));
        assert_eq!(ramp_smoothing(2.0), (2.0, 1.0));
        let (g0, k0) = ramp_smoothing(0.0);
        assert!((k0 - 0.5).abs() < 1e-14);
        assert!(g0 > 0.0 && g0 < 0.5);
        let h = 1e-6;
        for u in [-0.9, -0.4, 0.0, 0.3, 0.8] {
            let fd = (ramp_smoothing(u + h).0 - ramp_smoothing(u - h).0) / (2.0 * h);
            assert!((fd - ramp_smoothing(u).1).abs() < 1e-8);
        }
    }

    fn unit_lattice(n: usize) -> Lattice {
        Lattice { origin: vec![0.0, 0.0], pitch: vec![1.0 / (n - 1) as f64; 2], shape: vec![n, n] }
    }

    #[test]
    fn mollified_constants_and_affine_maps() {
        let constant = Mollified::new(FnSource { lattice: unit_lattice(21), codim: 2, f: |_: &[f64]| vec![1.0, -2.0] }, 0.07);
        for x in [[0.0, 0.0], [0.31, 0.77], [1.0, 0.5]] {
            let v = constant.eval(&x);
            assert!((v[0] - 1.0).abs() < 1e-13 && (v[1] + 2.0).abs() < 1e-13);
            assert!(constant.jacobian(&x).iter().all(|d| d.abs() < 1e-11));
        }
        let affine = Mollified::new(
            FnSource { lattice: unit_lattice(21), codim: 1, f: |x: &[f64]| vec![0.5 + 2.0 * x[0] - 3.0 * x[1]] },
            0.07,
        );
        for x in [[0.3, 0.4], [0.5, 0.5], [0.81, 0.2]] {
            let v = affine.eval(&x)[0];
            assert!((v - (0.5 + 2.0 * x[0] - 3.0 * x[1])).abs() < 1e-12);
            let j = affine.jacobian(&x);
            assert!((j[0] - 2.0).abs() < 1e-9 && (j[1] + 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mollified_gradient_matches_differences() {
        let m = Mollified::new(
            FnSource { lattice: unit_lattice(17), codim: 1, f: |x: &[f64]| vec![(3.0 * x[0]).sin() * x[1].abs().sqrt()] },
            0.09,
        );
        for x in [[0.2, 0.3], [0.55, 0.61], [0.9, 0.1]] {
            let a = m.jacobian(&x);
            let f = fd_jacobian(&m, &x, 1e-6);
            for (u, v) in a.iter().zip(&f) {
                assert!((u - v).abs() <= 1e-4 * u.abs().max(1e-2), "{a:?} vs {f:?}");
            }
        }
    }

    #[test]
    fn mollify_sampled_map() {
        let d = build_grid_domain(&GridSpec::unit_cube(2, 33), |_| true).unwrap();
        let map = SampledMap::from_fn(d, 1, |x| vec![(x[0] - 0.5).abs() + x[1] * x[1]]).unwrap();
        let m = mollify_map(&map, 1e-2, 3).unwrap();
        assert!(m.achieved < 1e-2);
        let c = SampledMap::from_fn(m.field.source.lattice().clone().into_domain(), 1, |_| vec![4.0]).unwrap();
        let mc = mollify_map(&c, 1e-3, 3).unwrap();
        assert!(mc.achieved < 1e-14);
        for x in [[0.0, 0.0], [0.123, 0.987], [0.5, 0.5]] {
            assert_eq!(mc.field.eval(&x), vec![4.0]);
        }
    }

    impl Lattice {
        fn into_domain(self) -> crate::grid::GridDomain {
            let spec = GridSpec { shape: self.shape.clone(), spacing: self.pitch, origin: self.origin, basepoint: self.shape.iter().map(|s| s / 2).collect() };
            build_grid_domain(&spec, |_| true).unwrap()
        }
    }

    #[test]
    fn mcshane_interpolates_and_is_lipschitz() {
        let f = mcshane_extend(vec![vec![0.0], vec![1.0]], vec![vec![0.0], vec![1.0]], 1.0).unwrap();
        assert_eq!(f.eval(&[0.5]), vec![0.5]);
        assert_eq!(f.eval(&[1.0]), vec![1.0]);
        let err = mcshane_extend(vec![vec![0.0], vec![1.0]], vec![vec![0.0], vec![2.0]], 1.0).unwrap_err();
        assert!(matches!(err, Error::SamplesNotLipschitz { a: 0, b: 1, .. }));
    }

    #[test]
    fn soft_mcshane_constant_and_cone() {
        let f = mcshane_extend(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![vec![3.0], vec![3.0]], 0.0).unwrap();
        let s = smooth_lipschitz(&f, 1e-2, &[vec![0.3, 0.4]]).unwrap();
        assert_eq!(s.eval(&[0.7, -2.0]), vec![3.0]);

        let cone = mcshane_extend(vec![vec![0.0, 0.0]], vec![vec![0.0]], 1.0).unwrap();
        let probes: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
        let s = smooth_lipschitz(&cone, 1e-2, &probes).unwrap();
        for x in &probes {
            assert!((s.eval(x)[0] - x[0].hypot(x[1])).abs() < 1e-2);
        }
        let x = [0.3, -0.2];
        let (a, f) = (s.jacobian(&x), fd_jacobian(&s, &x, 1e-7));
        assert!((a[0] - f[0]).abs() < 1e-5 && (a[1] - f[1]).abs() < 1e-5);
    }

    #[test]
    fn smooth_closure_on_cone() {
        let probes: Vec<Vec<f64>> = (0..100).map(|i| vec![(i as f64 * 0.37).sin() * 0.8, (i as f64 * 0.11).cos() * 0.8]).collect();
        let norm = |x: &[f64]| vec![x[0].hypot(x[1])];
        let m = smooth_closure(norm, 1, &[(-1.0, 1.0), (-1.0, 1.0)], 1.0, 1e-2, &probes, norm).unwrap();
        assert_eq!(m.kind(), SmoothKind::MollifiedGrid);
    }
}
