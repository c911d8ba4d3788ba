//! Python bindings: units, datasets, prediction sets, pipelines and the
//! experiment runner.

use jomi::harness::rng::{stream, Role};
use jomi::harness::runner::{run_trials, Experiment};
use jomi::pipeline::{Method, Pipeline, References, RuleSpec, TaxonomySpec};
use jomi::report::ResultDocument;
use jomi::{JomiError, PredictionSet, ScoreFamily, SetKind};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::Rng;

fn err(e: JomiError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Unit", module = "pyjomi", skip_from_py_object)]
#[derive(Clone)]
struct PyUnit {
    inner: jomi::Unit,
}

#[pymethods]
impl PyUnit {
    #[new]
    #[pyo3(signature = (id, y=None, mu_hat=None, q_lo=None, q_hi=None, sigma_hat=None, class_probs=None, c=None, cost=None, sel_score=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        id: String,
        y: Option<f64>,
        mu_hat: Option<f64>,
        q_lo: Option<f64>,
        q_hi: Option<f64>,
        sigma_hat: Option<f64>,
        class_probs: Option<Vec<f64>>,
        c: Option<f64>,
        cost: Option<f64>,
        sel_score: Option<f64>,
    ) -> PyResult<Self> {
        let inner = jomi::Unit {
            id,
            y,
            mu_hat,
            q_lo,
            q_hi,
            sigma_hat,
            class_probs,
            threshold_c: c,
            cost,
            sel_score,
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn y(&self) -> Option<f64> {
        self.inner.y
    }

    #[getter]
    fn mu_hat(&self) -> Option<f64> {
        self.inner.mu_hat
    }

    fn __repr__(&self) -> String {
        format!(
            "Unit(id={:?}, y={:?}, mu_hat={:?})",
            self.inner.id, self.inner.y, self.inner.mu_hat
        )
    }
}

#[pyclass(name = "Dataset", module = "pyjomi")]
struct PyDataset {
    inner: jomi::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(calib: Vec<PyRef<'_, PyUnit>>, test: Vec<PyRef<'_, PyUnit>>) -> PyResult<Self> {
        let calib = calib.iter().map(|u| u.inner.clone()).collect();
        let test = test.iter().map(|u| u.inner.clone()).collect();
        Ok(Self {
            inner: jomi::Dataset::new(calib, test).map_err(err)?,
        })
    }

    /// Reads calibration and test CSV files.
    #[staticmethod]
    fn from_csv(calib_path: &str, test_path: &str) -> PyResult<Self> {
        let inner = jomi::io::read_dataset(calib_path.as_ref(), test_path.as_ref()).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }
}

#[pyclass(name = "PredictionSet", module = "pyjomi")]
struct PySet {
    inner: PredictionSet,
}

#[pymethods]
impl PySet {
    /// Parses the text form; `kind` is "intervals" or "labels".
    #[staticmethod]
    fn parse(text: &str, kind: &str) -> PyResult<Self> {
        let kind = match kind {
            "intervals" => SetKind::Intervals,
            "labels" => SetKind::Labels,
            _ => return Err(PyValueError::new_err(format!("unknown set kind `{kind}`"))),
        };
        Ok(Self {
            inner: PredictionSet::parse(text, kind).map_err(err)?,
        })
    }

    fn __contains__(&self, y: f64) -> bool {
        self.inner.contains(y)
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("PredictionSet({:?})", self.inner.to_string())
    }

    /// Lebesgue measure, or the label count.
    #[getter]
    fn size(&self) -> f64 {
        self.inner.size()
    }

    #[getter]
    fn segments(&self) -> usize {
        self.inner.segment_count()
    }

    fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }
}

/// A selection rule, taxonomy and score family.
#[pyclass(name = "Pipeline", module = "pyjomi")]
struct PyPipeline {
    inner: Pipeline,
}

fn parse_method(s: &str) -> PyResult<Method> {
    s.parse().map_err(err)
}

#[pymethods]
impl PyPipeline {
    /// `rule` is a JSON rule spec such as '{"kind": "top_k", "k": 5}';
    /// `taxonomy` is "all", "size_of_selection" or JSON.
    #[new]
    #[pyo3(signature = (rule, family="abs_residual", taxonomy="all"))]
    fn new(rule: &str, family: &str, taxonomy: &str) -> PyResult<Self> {
        let rule: RuleSpec = serde_json::from_str(rule).map_err(json_err)?;
        let family: ScoreFamily = family.parse().map_err(err)?;
        let taxonomy: TaxonomySpec = serde_json::from_str(taxonomy)
            .or_else(|_| serde_json::from_value(serde_json::json!({ "kind": taxonomy })))
            .map_err(json_err)?;
        Ok(Self {
            inner: Pipeline {
                rule,
                taxonomy,
                family,
            },
        })
    }

    fn select(&self, data: &PyDataset) -> PyResult<Vec<usize>> {
        self.inner.rule.build().select(&data.inner).map_err(err)
    }

    /// `(test_index, set)` for every selected unit.
    #[pyo3(signature = (data, method="jomi", alpha=0.1, seed=0))]
    fn sets(
        &self,
        data: &PyDataset,
        method: &str,
        alpha: f64,
        seed: u64,
    ) -> PyResult<Vec<(usize, PySet)>> {
        let method = parse_method(method)?;
        method.check_rule(&self.inner.rule).map_err(err)?;
        self.inner.validate(&data.inner).map_err(err)?;
        let scores = self.inner.calibration_scores(&data.inner).map_err(err)?;
        let prep = self.inner.prepare(&data.inner, &scores).map_err(err)?;
        let mut rng = stream(seed, 0, Role::Uniform);
        let u: Vec<f64> = (0..data.inner.m()).map(|_| rng.random()).collect();
        prep.selected
            .iter()
            .enumerate()
            .map(|(idx, &j)| {
                let out = self
                    .inner
                    .set(&prep, idx, method, alpha, u[j], &data.inner)
                    .map_err(err)?;
                Ok((j, PySet { inner: out.set }))
            })
            .collect()
    }

    /// Reference sets of every selected unit, as dicts.
    fn references<'py>(
        &self,
        py: Python<'py>,
        data: &PyDataset,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner.validate(&data.inner).map_err(err)?;
        let scores = self.inner.calibration_scores(&data.inner).map_err(err)?;
        let prep = self.inner.prepare(&data.inner, &scores).map_err(err)?;
        prep.selected
            .iter()
            .enumerate()
            .map(|(idx, &j)| {
                let d = PyDict::new(py);
                d.set_item("test_index", j)?;
                match self.inner.references(&prep, idx) {
                    References::Uniform(r) => d.set_item("uniform", r.clone())?,
                    References::TwoBranch { c, above, below } => {
                        d.set_item("c", *c)?;
                        d.set_item("above", above.clone())?;
                        d.set_item("below", below.clone())?;
                    }
                    References::Prelim { below, above } => {
                        d.set_item("below", below.clone())?;
                        d.set_item("above", above.clone())?;
                    }
                }
                Ok(d)
            })
            .collect()
    }
}

/// `ceil(level * N)`-th smallest score, `+inf` past the end when
/// `augment` is set.
#[pyfunction]
#[pyo3(signature = (level, scores, augment=true))]
fn conformal_quantile(level: f64, scores: Vec<f64>, augment: bool) -> PyResult<f64> {
    jomi::conformal_quantile(level, &scores, augment).map_err(err)
}

#[pyfunction]
fn randomized_membership(v: f64, ref_scores: Vec<f64>, u: f64, alpha: f64) -> bool {
    jomi::randomized_membership(v, &ref_scores, u, alpha)
}

/// Runs an experiment given as JSON and returns the result document as
/// JSON.
#[pyfunction]
#[pyo3(signature = (experiment, threads=None))]
fn run_experiment(py: Python<'_>, experiment: &str, threads: Option<usize>) -> PyResult<String> {
    let exp: Experiment = serde_json::from_str(experiment).map_err(json_err)?;
    let recs = py.detach(|| run_trials(&exp, threads)).map_err(err)?;
    let echo = serde_json::to_value(&exp).map_err(json_err)?;
    Ok(ResultDocument::new("evaluate", echo)
        .with_records(&recs, &[])
        .to_json())
}

#[pymodule]
fn pyjomi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyUnit>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PySet>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(conformal_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(randomized_membership, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
