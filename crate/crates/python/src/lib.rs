//! Python bindings: benchmarks, encoders, the experiment protocols and the
//! scalar loss and metric helpers.
//!
//! Configs cross the boundary as JSON strings; reports come back as JSON.

use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mudok_core::autodiff::{Graph, RngStream, Tensor};
use mudok_core::encoder::{Encoder, EncoderConfig, SequenceBatch};
use mudok_core::experiment::{self, ExperimentConfig};
use mudok_core::kg::bench::{self, load_benchmark, write_benchmark};
use mudok_core::kg::synth::{generate_synthetic_benchmark, SyntheticSpec};
use mudok_core::pretrain::{self as pt, checkpoint};
use mudok_core::{metrics, Error};

fn py_err(e: Error) -> PyErr {
    if e.is_config_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn parse<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(T::default()),
    }
}

/// A loaded multi-domain benchmark.
#[pyclass(name = "Benchmark", module = "mudok")]
pub struct PyBenchmark {
    inner: bench::Benchmark,
}

#[pymethods]
impl PyBenchmark {
    #[staticmethod]
    fn load(manifest: &str) -> PyResult<Self> {
        Ok(PyBenchmark {
            inner: load_benchmark(Path::new(manifest)).map_err(py_err)?,
        })
    }

    /// Seeded synthetic benchmark; `spec` is a JSON object of generator fields.
    #[staticmethod]
    #[pyo3(signature = (spec=None, seed=None))]
    fn synthetic(spec: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut spec: SyntheticSpec = parse(spec)?;
        if let Some(s) = seed {
            spec.seed = s;
        }
        Ok(PyBenchmark {
            inner: generate_synthetic_benchmark(&spec).map_err(py_err)?,
        })
    }

    /// Writes the benchmark files and returns the manifest path.
    fn write(&self, dir: &str) -> PyResult<String> {
        let p = write_benchmark(&self.inner, Path::new(dir)).map_err(py_err)?;
        Ok(p.display().to_string())
    }

    #[getter]
    fn n_entities(&self) -> usize {
        self.inner.kg.num_entities()
    }

    #[getter]
    fn n_relations(&self) -> usize {
        self.inner.kg.num_relations()
    }

    #[getter]
    fn n_triples(&self) -> usize {
        self.inner.kg.triples().len()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.features.dim()
    }

    #[getter]
    fn domains(&self) -> Vec<String> {
        self.inner.kg.domains().iter().map(|d| d.name.clone()).collect()
    }

    fn items(&self, domain: &str) -> PyResult<Vec<String>> {
        let kg = &self.inner.kg;
        let d = kg
            .domain_index(domain)
            .ok_or_else(|| PyValueError::new_err(format!("unknown domain {domain:?}")))?;
        Ok(kg.domains()[d]
            .items
            .iter()
            .map(|&i| kg.entities().name(i).to_string())
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Benchmark(domains={}, entities={}, relations={}, triples={})",
            self.inner.kg.domains().len(),
            self.n_entities(),
            self.n_relations(),
            self.n_triples()
        )
    }
}

/// Item-sequence transformer encoder.
#[pyclass(name = "Encoder", module = "mudok", from_py_object)]
#[derive(Clone)]
pub struct PyEncoder {
    inner: Encoder<f32>,
}

#[pymethods]
impl PyEncoder {
    #[staticmethod]
    #[pyo3(signature = (n_relations, config=None, seed=0))]
    fn random(n_relations: usize, config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: EncoderConfig = parse(config)?;
        let inner = Encoder::new(cfg, n_relations, &mut RngStream::new(seed)).map_err(py_err)?;
        Ok(PyEncoder { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (store, side) = checkpoint::load(Path::new(path)).map_err(py_err)?;
        Ok(PyEncoder {
            inner: Encoder::from_params(side.encoder, store).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(
            Path::new(path),
            &self.inner.params,
            &self.inner.config,
            serde_json::Value::Null,
        )
        .map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params.numel()
    }

    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    /// Eval-mode representations of the named items, one row each.
    #[pyo3(signature = (bench, items, seed=0))]
    fn represent(&self, bench: &PyBenchmark, items: Vec<String>, seed: u64) -> PyResult<Vec<Vec<f32>>> {
        let kg = &bench.inner.kg;
        let idx = items
            .iter()
            .map(|name| {
                kg.entities()
                    .get(name)
                    .filter(|&i| kg.is_item(i))
                    .ok_or_else(|| PyValueError::new_err(format!("{name:?} is not an item")))
            })
            .collect::<PyResult<Vec<usize>>>()?;
        let mut rng = RngStream::new(seed);
        let batch = SequenceBatch::sample(kg, &idx, self.inner.config.n_triples, &mut rng).map_err(py_err)?;
        let out = self
            .inner
            .represent(&bench.inner.features, &batch, &mut rng, false)
            .map_err(py_err)?;
        Ok((0..out.rows()).map(|r| out.row(r).to_vec()).collect())
    }
}

fn config_with_seed(config: Option<&str>, seed: Option<u64>) -> PyResult<ExperimentConfig> {
    let mut cfg: ExperimentConfig = parse(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Pre-trains an encoder; returns it with the JSON report.
#[pyfunction]
#[pyo3(signature = (bench, config=None, seed=None))]
fn pretrain(
    py: Python<'_>,
    bench: &PyBenchmark,
    config: Option<&str>,
    seed: Option<u64>,
) -> PyResult<(PyEncoder, String)> {
    let cfg = config_with_seed(config, seed)?;
    let out = py
        .detach(|| experiment::run_pretrain(&bench.inner, &cfg))
        .map_err(py_err)?;
    let report = out.report(cfg.seed).to_json();
    Ok((PyEncoder { inner: out.encoder }, report))
}

/// Tunes the configured task; returns the JSON report.
#[pyfunction]
#[pyo3(signature = (bench, encoder=None, config=None, seed=None))]
fn tune(
    py: Python<'_>,
    bench: &PyBenchmark,
    encoder: Option<PyEncoder>,
    config: Option<&str>,
    seed: Option<u64>,
) -> PyResult<String> {
    let cfg = config_with_seed(config, seed)?;
    let enc = encoder.map(|e| e.inner);
    let out = py
        .detach(|| experiment::tune(&bench.inner, &cfg, enc, Path::new(".")))
        .map_err(py_err)?;
    let command = match cfg.task {
        experiment::TaskKind::Rec => "tune-rec",
        experiment::TaskKind::Text => "tune-text",
    };
    Ok(out.report(command, cfg.seed).to_json())
}

#[pyfunction]
#[pyo3(signature = (bench, config=None, seed=None, with_full=true))]
fn transfer(
    py: Python<'_>,
    bench: &PyBenchmark,
    config: Option<&str>,
    seed: Option<u64>,
    with_full: bool,
) -> PyResult<String> {
    let cfg = config_with_seed(config, seed)?;
    let cmp = py
        .detach(|| experiment::run_transfer(&bench.inner, &cfg, with_full, Path::new(".")))
        .map_err(py_err)?;
    Ok(cmp.report().to_json())
}

#[pyfunction]
#[pyo3(signature = (bench, config=None, seed=None))]
fn ablate(py: Python<'_>, bench: &PyBenchmark, config: Option<&str>, seed: Option<u64>) -> PyResult<String> {
    let cfg = config_with_seed(config, seed)?;
    let cmp = py
        .detach(|| experiment::run_ablation(&bench.inner, &cfg, Path::new(".")))
        .map_err(py_err)?;
    Ok(cmp.report().to_json())
}

/// Parameter census; `scale` projects to `(entities, tuned items)`.
#[pyfunction]
#[pyo3(signature = (bench, config=None, scale=None))]
fn census(bench: &PyBenchmark, config: Option<&str>, scale: Option<(usize, usize)>) -> PyResult<String> {
    let cfg: ExperimentConfig = parse(config)?;
    Ok(experiment::run_census(&bench.inner, &cfg, scale)
        .map_err(py_err)?
        .to_json())
}

#[pyfunction]
#[pyo3(signature = (text, dim, seed=0))]
fn hash_featurize(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    mudok_core::kg::hash_featurize(text, dim, seed)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Tensor::matrix(rows.len(), cols, rows.concat()).map_err(py_err)
}

/// In-batch contrastive loss between two views (rows are items).
#[pyfunction]
#[pyo3(signature = (h1, h2, tau=0.1))]
fn contrastive_loss(h1: Vec<Vec<f64>>, h2: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let mut g = Graph::<f64>::new();
    let a = g.constant(matrix(&h1)?);
    let b = g.constant(matrix(&h2)?);
    let l = pt::contrastive_loss(&mut g, a, b, tau).map_err(py_err)?;
    Ok(g.value(l).item())
}

#[pyfunction]
fn triple_score(h: Vec<f64>, r: Vec<f64>, t: Vec<f64>) -> PyResult<f64> {
    if h.len() != r.len() || r.len() != t.len() {
        return Err(PyValueError::new_err("vectors differ in length"));
    }
    Ok(pt::triple_score(&h, &r, &t))
}

#[pyfunction]
fn recall_at_k(ranked: Vec<usize>, positives: Vec<usize>, k: usize) -> f64 {
    metrics::recall_at_k(&ranked, &positives, k)
}

#[pyfunction]
fn ndcg_at_k(ranked: Vec<usize>, positives: Vec<usize>, k: usize) -> f64 {
    metrics::ndcg_at_k(&ranked, &positives, k)
}

#[pymodule]
fn mudok(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBenchmark>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(tune, m)?)?;
    m.add_function(wrap_pyfunction!(transfer, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(census, m)?)?;
    m.add_function(wrap_pyfunction!(hash_featurize, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(triple_score, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    Ok(())
}
