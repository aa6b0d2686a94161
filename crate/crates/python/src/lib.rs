//! Python bindings.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use treefactor::grid::{build_grid_domain, generate_map, GridDomain, GridSpec, MapCase, MapParams, SampledMap};
use treefactor::io::{read_map, write_json, write_map, ApproxFile};
use treefactor::pipeline::{self, ApproxConfig, FEps, Report};
use treefactor::quasimetric::{build_weight_graph, GraphOptions};
use treefactor::quotient::{build_quotient, check_tree, default_tau, quotient_distance, QuotientTree, TreeFile};
use treefactor::smoothing::SmoothMap;
use treefactor::Error;

create_exception!(treefactor_py, HypothesisViolated, PyException);
create_exception!(treefactor_py, NotATree, PyException);
create_exception!(treefactor_py, ToleranceError, PyException);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::HypothesisViolated { .. } => HypothesisViolated::new_err(e.to_string()),
        Error::NotATree { .. } => NotATree::new_err(e.to_string()),
        Error::CannotMeetTolerance { .. } => ToleranceError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A map sampled at the inside nodes of a grid.
#[pyclass(name = "SampledMap", module = "treefactor_py", frozen)]
struct PyMap {
    inner: SampledMap,
}

#[pymethods]
impl PyMap {
    /// Samples a built-in case on the unit box. `domain` is one of `box`,
    /// `open-box` or `disk`.
    #[staticmethod]
    #[pyo3(signature = (case, shape, domain = "open-box"))]
    fn generate(case: &str, shape: Vec<usize>, domain: &str) -> PyResult<Self> {
        let case: MapCase = case.parse().map_err(to_py)?;
        let inside: fn(&[f64]) -> bool = match domain {
            "box" => |_| true,
            "open-box" => |x| x.iter().all(|&c| c > 0.0 && c < 1.0),
            "disk" => |x| x.iter().map(|c| (c - 0.5) * (c - 0.5)).sum::<f64>() < 0.25,
            other => return Err(PyValueError::new_err(format!("unknown domain `{other}`"))),
        };
        let d = build_grid_domain(&GridSpec::with_shape(&shape), inside).map_err(to_py)?;
        Ok(Self { inner: generate_map(case, &d, &MapParams::default()).map_err(to_py)? })
    }

    /// Builds a map from values at every inside node, listed in row-major
    /// order of the box.
    #[staticmethod]
    #[pyo3(signature = (shape, values, inside = None, basepoint = None))]
    fn from_values(
        shape: Vec<usize>,
        values: Vec<Vec<f64>>,
        inside: Option<Vec<bool>>,
        basepoint: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let spec = GridSpec::with_shape(&shape);
        let total = shape.iter().product();
        let inside = inside.unwrap_or_else(|| vec![true; total]);
        let basepoint = basepoint.unwrap_or(spec.basepoint);
        let d = GridDomain::new(spec.shape, spec.spacing, spec.origin, inside, &basepoint).map_err(to_py)?;
        let codim = values.first().map_or(0, Vec::len);
        Ok(Self { inner: SampledMap::new(d, codim, values.concat()).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: read_map(path).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        write_map(path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.domain().dim()
    }
    #[getter]
    fn codim(&self) -> usize {
        self.inner.codim()
    }
    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.domain().shape().to_vec()
    }
    #[getter]
    fn num_inside(&self) -> usize {
        self.inner.domain().num_inside()
    }

    fn points(&self) -> Vec<Vec<f64>> {
        let d = self.inner.domain();
        (0..d.num_inside()).map(|v| d.point(v)).collect()
    }

    fn values(&self) -> Vec<Vec<f64>> {
        self.inner.values().chunks(self.inner.codim()).map(<[f64]>::to_vec).collect()
    }

    fn __repr__(&self) -> String {
        format!("SampledMap(shape={:?}, codim={}, inside={})", self.shape(), self.codim(), self.num_inside())
    }
}

/// The quotient of a map by its zero-distance classes.
#[pyclass(name = "Quotient", module = "treefactor_py", frozen)]
struct PyQuotient {
    inner: QuotientTree,
}

#[pymethods]
impl PyQuotient {
    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn class_of(&self, node: usize) -> PyResult<usize> {
        if node >= self.inner.classes().len() {
            return Err(PyValueError::new_err(format!("no node {node}")));
        }
        Ok(self.inner.class_of(node))
    }

    fn phi(&self, class: usize) -> PyResult<Vec<f64>> {
        if class >= self.inner.num_classes() {
            return Err(PyValueError::new_err(format!("no class {class}")));
        }
        Ok(self.inner.phi(class).to_vec())
    }

    fn distance(&self, a: usize, b: usize) -> PyResult<f64> {
        quotient_distance(&self.inner, a, b).map_err(to_py)
    }

    /// `(max four-point defect, passed)` over random quadruples of classes.
    #[pyo3(signature = (samples = 20000, seed = 0))]
    fn check_tree(&self, samples: usize, seed: u64) -> (f64, bool) {
        let r = check_tree(&self.inner, samples, pipeline::TREE_TOLERANCE, seed);
        (r.max_four_point_defect, r.pass)
    }

    fn to_json(&self) -> PyResult<String> {
        json(&TreeFile::from(&self.inner))
    }
}

/// The smooth approximant together with its report.
#[pyclass(name = "Approximation", module = "treefactor_py", frozen)]
struct PyApproximation {
    f: FEps,
    report: Report,
    file: ApproxFile,
}

#[pymethods]
impl PyApproximation {
    fn __call__(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check_input(&x)?;
        Ok(self.f.eval(&x))
    }

    /// Jacobian rows, one per output component.
    fn jacobian(&self, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        self.check_input(&x)?;
        Ok(self.f.jacobian(&x).chunks(x.len()).map(<[f64]>::to_vec).collect())
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.report.delta
    }
    #[getter]
    fn edges(&self) -> usize {
        self.report.edges
    }
    #[getter]
    fn sup_error(&self) -> f64 {
        self.report.verification.sup_error
    }
    #[getter]
    fn within_tolerance(&self) -> bool {
        self.report.within_tolerance
    }

    fn report_json(&self) -> PyResult<String> {
        json(&self.report)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        write_json(path, &self.file).map_err(to_py)
    }
}

impl PyApproximation {
    fn check_input(&self, x: &[f64]) -> PyResult<()> {
        if x.len() != self.f.input_dim() {
            return Err(PyValueError::new_err(format!("expected {} coordinates", self.f.input_dim())));
        }
        Ok(())
    }
}

#[pyfunction]
#[pyo3(signature = (map, tau = None, subdivision = 1))]
fn factor(map: &PyMap, tau: Option<f64>, subdivision: usize) -> PyResult<PyQuotient> {
    let graph = build_weight_graph(&map.inner, GraphOptions { subdivision: subdivision.max(1), diagonals: false });
    let tau = tau.unwrap_or_else(|| default_tau(&graph));
    Ok(PyQuotient { inner: build_quotient(&graph, &map.inner, tau).map_err(to_py)? })
}

#[pyfunction]
#[pyo3(signature = (map, epsilon, seed = 0, tau = None, strict_rank = false, probes = 1000))]
fn approximate(
    py: Python<'_>,
    map: &PyMap,
    epsilon: f64,
    seed: u64,
    tau: Option<f64>,
    strict_rank: bool,
    probes: usize,
) -> PyResult<PyApproximation> {
    let config = ApproxConfig { epsilon, seed, tau, strict_rank, probes, ..Default::default() };
    let approx = py.detach(|| pipeline::approximate(&map.inner, &config)).map_err(to_py)?;
    let file = ApproxFile::new(&approx);
    Ok(PyApproximation { f: approx.f, report: approx.report, file })
}

#[pyfunction]
fn compute_delta(epsilon: f64, edges: usize, lambda_min: f64) -> f64 {
    pipeline::compute_delta(epsilon, edges, lambda_min)
}

#[pymodule]
pub fn treefactor_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMap>()?;
    m.add_class::<PyQuotient>()?;
    m.add_class::<PyApproximation>()?;
    m.add_function(wrap_pyfunction!(factor, m)?)?;
    m.add_function(wrap_pyfunction!(approximate, m)?)?;
    m.add_function(wrap_pyfunction!(compute_delta, m)?)?;
    m.add("HypothesisViolated", m.py().get_type::<HypothesisViolated>())?;
    m.add("NotATree", m.py().get_type::<NotATree>())?;
    m.add("ToleranceError", m.py().get_type::<ToleranceError>())?;
    Ok(())
}
