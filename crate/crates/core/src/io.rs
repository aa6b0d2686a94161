//! JSON and CSV interchange formats.
//!
//! Grid values are flat row-major arrays: the last axis varies fastest. The
//! inside mask is stored as alternating run lengths, starting with a run of
//! outside nodes (possibly zero).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::finite_tree::{FiniteTree, TreePoint};
use crate::grid::{GridDomain, SampledMap};
use crate::pipeline::{Approximation, FEps, TreeField};
use crate::smoothing::{Constant, McShane, Mollified, Rho, SmoothClamp, SmoothMap, SoftMcShane};

pub const FORMAT_VERSION: u32 = 1;

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn rle_encode(bits: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &b in bits {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[usize]) -> Vec<bool> {
    let mut out = Vec::with_capacity(runs.iter().sum());
    for (i, &n) in runs.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, n));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapFile {
    pub version: u32,
    pub dim: usize,
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    pub basepoint: Vec<usize>,
    pub inside: Vec<usize>,
    pub codim: usize,
    /// Values at the inside nodes in row-major order, `codim` per node.
    pub values: Vec<f64>,
}

impl From<&SampledMap> for MapFile {
    fn from(map: &SampledMap) -> Self {
        let d = map.domain();
        Self {
            version: FORMAT_VERSION,
            dim: d.dim(),
            shape: d.shape().to_vec(),
            spacing: d.spacing().to_vec(),
            origin: d.origin().to_vec(),
            basepoint: d.basepoint_index(),
            inside: rle_encode(d.inside_mask()),
            codim: map.codim(),
            values: map.values().to_vec(),
        }
    }
}

impl TryFrom<MapFile> for SampledMap {
    type Error = Error;
    fn try_from(file: MapFile) -> Result<Self> {
        if file.version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!("unsupported map version {}", file.version)));
        }
        if file.shape.len() != file.dim {
            return Err(Error::InvalidInput("dim does not match shape".into()));
        }
        let inside = rle_decode(&file.inside);
        let domain = GridDomain::new(file.shape, file.spacing, file.origin, inside, &file.basepoint)?;
        SampledMap::new(domain, file.codim, file.values)
    }
}

pub fn read_map(path: impl AsRef<Path>) -> Result<SampledMap> {
    read_json::<MapFile>(path)?.try_into()
}

pub fn write_map(path: impl AsRef<Path>, map: &SampledMap) -> Result<()> {
    write_json(path, &MapFile::from(map))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedEdge {
    pub axis: usize,
    pub base: Vec<f64>,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingFile {
    pub edges: Vec<EmbeddedEdge>,
    pub vertex_images: Vec<Vec<f64>>,
}

impl From<&Embedding> for EmbeddingFile {
    fn from(emb: &Embedding) -> Self {
        let edges = emb
            .bases
            .iter()
            .zip(&emb.lambdas)
            .enumerate()
            .map(|(axis, (base, &lambda))| EmbeddedEdge { axis, base: base.clone(), lambda })
            .collect();
        Self { edges, vertex_images: emb.vertex_images.clone() }
    }
}

impl From<EmbeddingFile> for Embedding {
    fn from(file: EmbeddingFile) -> Self {
        let (bases, lambdas) = file.edges.into_iter().map(|e| (e.base, e.lambda)).unzip();
        Self { bases, lambdas, vertex_images: file.vertex_images }
    }
}

/// Parameters of `phi_eps . rho_eps . g_eps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionFile {
    pub tree: FiniteTree,
    pub embedding: EmbeddingFile,
    /// Tree point of every inside node, in compact node order.
    pub node_points: Vec<TreePoint>,
    /// Refinement of the grid carrying the tree-valued interpolant.
    pub refine: usize,
    /// Kernel radius of `g_eps`.
    pub sigma: f64,
    pub clamps: Vec<SmoothClamp>,
    pub mcshane: McShane,
    pub temperature: f64,
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxFile {
    pub version: u32,
    pub epsilon: f64,
    pub delta: f64,
    pub input_dim: usize,
    pub output_dim: usize,
    pub constant: Option<Vec<f64>>,
    pub composition: Option<CompositionFile>,
}

impl ApproxFile {
    pub fn new(approx: &Approximation) -> Self {
        let (constant, composition) = match &approx.f {
            FEps::Constant(c) => (Some(c.value.clone()), None),
            FEps::Composition { g, rho, phi } => {
                let emb = approx.embedding.as_ref().expect("composition has an embedding");
                let c = CompositionFile {
                    tree: approx.tree.clone(),
                    embedding: emb.into(),
                    node_points: g.source.node_points().to_vec(),
                    refine: g.source.refine(),
                    sigma: g.sigma,
                    clamps: rho.clamps.clone(),
                    mcshane: phi.base.clone(),
                    temperature: phi.temperature,
                    eta: phi.eta,
                };
                (None, Some(c))
            }
        };
        Self {
            version: FORMAT_VERSION,
            epsilon: approx.report.config.epsilon,
            delta: approx.report.delta,
            input_dim: approx.f.input_dim(),
            output_dim: approx.f.output_dim(),
            constant,
            composition,
        }
    }

    /// Rebuilds `f_eps` over the domain of `map`.
    pub fn to_map(&self, map: &SampledMap) -> Result<FEps> {
        if self.version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!("unsupported approximation version {}", self.version)));
        }
        if self.input_dim != map.domain().dim() {
            return Err(Error::InvalidInput("approximation does not match the map dimension".into()));
        }
        match (&self.constant, &self.composition) {
            (Some(value), None) => Ok(FEps::Constant(Constant { dim: self.input_dim, value: value.clone() })),
            (None, Some(c)) => {
                if c.node_points.len() != map.domain().num_inside() {
                    return Err(Error::InvalidInput("node points do not match the map".into()));
                }
                let emb: Embedding = c.embedding.clone().into();
                for &p in &c.node_points {
                    emb.check_point(p)?;
                }
                let field = TreeField::new(map, c.tree.clone(), emb, c.node_points.clone(), c.refine);
                Ok(FEps::Composition {
                    g: Box::new(Mollified::new(field, c.sigma)),
                    rho: Rho { clamps: c.clamps.clone() },
                    phi: SoftMcShane { base: c.mcshane.clone(), temperature: c.temperature, eta: c.eta },
                })
            }
            _ => Err(Error::InvalidInput("approximation must be either constant or a composition".into())),
        }
    }
}

/// One CSV row per probe: coordinates, values and the row-major Jacobian.
pub fn write_probes(path: impl AsRef<Path>, f: &dyn SmoothMap, probes: &[Vec<f64>]) -> Result<()> {
    let (p, m) = (f.input_dim(), f.output_dim());
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header: Vec<String> = (0..p).map(|a| format!("x{a}")).collect();
    header.extend((0..m).map(|i| format!("f{i}")));
    header.extend((0..m).flat_map(|i| (0..p).map(move |a| format!("d{i}_{a}"))));
    w.write_record(&header).map_err(csv_error)?;
    for x in probes {
        let row: Vec<String> = x.iter().chain(&f.eval(x)).chain(&f.jacobian(x)).map(f64::to_string).collect();
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(e.into())
}
