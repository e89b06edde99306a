//! Python bindings: load a dataset, train a scorer, evaluate it, score
//! triples by name, and save or load checkpoints.
//!
//! Structured values (configs, reports) cross the boundary as plain dicts
//! via JSON, so the Python side needs nothing beyond the standard library.

use std::net::TcpListener;
use std::path::PathBuf;

use kgc_core::bridge::serve_tcp;
use kgc_core::eval::{self, EvalOptions};
use kgc_core::ingest::{self, LoadOptions, SplitRatios};
use kgc_core::scorers::checkpoint::Checkpoint;
use kgc_core::scorers::{self, Model};
use kgc_core::{DatasetBundle, Scorer, ScorerKind, Task, TrainConfig, Triple};
use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde_json::Value;

fn core_err(e: kgc_core::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Overlays the keys of `overrides` on the serialized `base`.
fn merged<T>(py: Python<'_>, base: &T, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut value = serde_json::to_value(base).map_err(value_err)?;
    if let Some(dict) = overrides {
        let text: String = py
            .import("json")?
            .call_method1("dumps", (dict,))?
            .extract()?;
        let extra: Value = serde_json::from_str(&text).map_err(value_err)?;
        let (Value::Object(into), Value::Object(from)) = (&mut value, extra) else {
            return Err(PyValueError::new_err("overrides must be a dict"));
        };
        for (k, v) in from {
            if !into.contains_key(&k) {
                return Err(PyKeyError::new_err(format!("unknown option {k:?}")));
            }
            into.insert(k, v);
        }
    }
    serde_json::from_value(value).map_err(value_err)
}

/// A knowledge graph with its train/dev/test partition.
#[pyclass(frozen, module = "kgc_forge")]
pub struct Dataset {
    inner: DatasetBundle,
}

#[pymethods]
impl Dataset {
    /// Loads `train/dev|valid/test.tsv`, or splits a lone `all.tsv`.
    #[staticmethod]
    #[pyo3(signature = (path, *, literalize = false, ratios = (0.6, 0.2, 0.2), seed = 42))]
    fn load(
        path: PathBuf,
        literalize: bool,
        ratios: (f64, f64, f64),
        seed: u64,
    ) -> PyResult<Dataset> {
        let opts = LoadOptions {
            literalize,
            ratios: SplitRatios {
                train: ratios.0,
                dev: ratios.1,
                test: ratios.2,
            },
            seed,
        };
        let inner = ingest::load_dataset(path, &opts).map_err(core_err)?;
        Ok(Dataset { inner })
    }

    /// Writes the normalized bundle; returns the paths written.
    fn write(&self, dir: PathBuf) -> PyResult<Vec<PathBuf>> {
        self.inner.write(dir).map_err(core_err)
    }

    #[getter]
    fn num_entities(&self) -> usize {
        self.inner.graph.num_entities()
    }

    #[getter]
    fn num_relations(&self) -> usize {
        self.inner.graph.num_relations()
    }

    fn split_sizes(&self) -> (usize, usize, usize) {
        (
            self.inner.train.len(),
            self.inner.dev.len(),
            self.inner.test.len(),
        )
    }

    fn entities(&self) -> Vec<String> {
        let kg = &self.inner.graph;
        kg.entity_ids()
            .map(|e| kg.entity_name(e).to_owned())
            .collect()
    }

    fn relations(&self) -> Vec<String> {
        let kg = &self.inner.graph;
        kg.relation_ids()
            .map(|r| kg.relation_name(r).to_owned())
            .collect()
    }

    /// Triples of `split` ("train", "dev" or "test") as name tuples.
    fn triples(&self, split: &str) -> PyResult<Vec<(String, String, String)>> {
        let kg = &self.inner.graph;
        Ok(self
            .split(split)?
            .iter()
            .map(|t| {
                let (h, r, tail) = kg.raw(t);
                (h.to_owned(), r.to_owned(), tail.to_owned())
            })
            .collect())
    }

    fn __repr__(&self) -> String {
        let (tr, dv, te) = self.split_sizes();
        format!(
            "Dataset(entities={}, relations={}, train={tr}, dev={dv}, test={te})",
            self.num_entities(),
            self.num_relations()
        )
    }
}

impl Dataset {
    fn split(&self, name: &str) -> PyResult<&[Triple]> {
        match name {
            "train" => Ok(&self.inner.train),
            "dev" | "valid" => Ok(&self.inner.dev),
            "test" => Ok(&self.inner.test),
            other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        }
    }

    fn triple(&self, h: &str, r: &str, t: &str) -> PyResult<Triple> {
        let kg = &self.inner.graph;
        let entity = |name: &str| {
            kg.entity_id(name)
                .ok_or_else(|| PyKeyError::new_err(format!("entity {name:?}")))
        };
        let relation = kg
            .relation_id(r)
            .ok_or_else(|| PyKeyError::new_err(format!("relation {r:?}")))?;
        Ok(Triple {
            head: entity(h)?,
            relation,
            tail: entity(t)?,
        })
    }
}

/// Default training configuration for `scorer` and `task`, as a dict.
#[pyfunction]
#[pyo3(signature = (scorer = "classifier", task = "tc"))]
fn default_config(py: Python<'_>, scorer: &str, task: &str) -> PyResult<Py<PyAny>> {
    let kind: ScorerKind = scorer.parse().map_err(core_err)?;
    let task: Task = task.parse().map_err(core_err)?;
    to_py(py, &TrainConfig::defaults(kind, task))
}

/// A trained native scorer.
#[pyclass(frozen, module = "kgc_forge")]
pub struct TrainedModel {
    checkpoint: Checkpoint,
    #[pyo3(get)]
    initial_loss: Option<f64>,
    #[pyo3(get)]
    epoch_losses: Vec<f64>,
}

#[pymethods]
impl TrainedModel {
    /// Trains `scorer` on the dataset's train split. `config` overrides
    /// individual keys of `default_config(scorer, task)`.
    #[staticmethod]
    #[pyo3(signature = (dataset, scorer = "classifier", task = "tc", config = None))]
    fn train(
        py: Python<'_>,
        dataset: &Dataset,
        scorer: &str,
        task: &str,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<TrainedModel> {
        let kind: ScorerKind = scorer.parse().map_err(core_err)?;
        let task: Task = task.parse().map_err(core_err)?;
        let cfg: TrainConfig = merged(py, &TrainConfig::defaults(kind, task), config)?;
        let bundle = &dataset.inner;
        let trained = py
            .detach(|| scorers::train(kind, bundle, task, &cfg))
            .map_err(core_err)?;
        Ok(TrainedModel {
            checkpoint: Checkpoint::new(task, cfg, trained.model),
            initial_loss: Some(trained.initial_loss),
            epoch_losses: trained.epoch_losses,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<TrainedModel> {
        let checkpoint = Checkpoint::load(path).map_err(core_err)?;
        Ok(TrainedModel {
            checkpoint,
            initial_loss: None,
            epoch_losses: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.checkpoint.save(path).map_err(core_err)
    }

    #[getter]
    fn scorer(&self) -> &'static str {
        self.checkpoint.model.kind().as_str()
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.checkpoint.task.as_str()
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.checkpoint.config)
    }

    /// Plausibility score of each `(head, relation, tail)` name triple.
    fn score(
        &self,
        py: Python<'_>,
        dataset: &Dataset,
        triples: Vec<(String, String, String)>,
    ) -> PyResult<Vec<f64>> {
        let ids = triples
            .iter()
            .map(|(h, r, t)| dataset.triple(h, r, t))
            .collect::<PyResult<Vec<_>>>()?;
        let model = &self.checkpoint.model;
        let kg = &dataset.inner.graph;
        py.detach(|| eval::score_chunked(model, kg, &ids))
            .map_err(core_err)
    }

    /// Score of every relation for the pair, keyed by relation name.
    fn relation_scores(
        &self,
        dataset: &Dataset,
        head: &str,
        tail: &str,
    ) -> PyResult<Vec<(String, f64)>> {
        let kg = &dataset.inner.graph;
        let id = |name: &str| {
            kg.entity_id(name)
                .ok_or_else(|| PyKeyError::new_err(format!("entity {name:?}")))
        };
        let scores = self
            .checkpoint
            .model
            .relation_scores(kg, id(head)?, id(tail)?)
            .map_err(core_err)?;
        Ok(kg
            .relation_ids()
            .map(|r| (kg.relation_name(r).to_owned(), scores[r.index()]))
            .collect())
    }

    /// Serves the text classifier over the newline-delimited JSON protocol
    /// on `host:port`, returning after `max_connections` clients (forever
    /// when `None`).
    #[pyo3(signature = (addr, max_connections = None))]
    fn serve(&self, py: Python<'_>, addr: &str, max_connections: Option<usize>) -> PyResult<()> {
        let Model::Classifier(state) = &self.checkpoint.model else {
            return Err(PyValueError::new_err(
                "only the text classifier can be served",
            ));
        };
        let listener =
            TcpListener::bind(addr).map_err(|e| PyRuntimeError::new_err(format!("{addr}: {e}")))?;
        py.detach(|| serve_tcp(state, &listener, max_connections))
            .map_err(core_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainedModel(scorer={:?}, task={:?})",
            self.scorer(),
            self.task()
        )
    }
}

/// Evaluates `model` on the test split. `task` is "tc", "lp" or "rp";
/// `options` overrides keys of the default evaluation options.
#[pyfunction]
#[pyo3(signature = (model, dataset, task, options = None))]
fn evaluate(
    py: Python<'_>,
    model: &TrainedModel,
    dataset: &Dataset,
    task: &str,
    options: Option<&Bound<'_, PyDict>>,
) -> PyResult<Py<PyAny>> {
    let task: Task = task.parse().map_err(core_err)?;
    let opts: EvalOptions = merged(py, &EvalOptions::default(), options)?;
    let scorer = &model.checkpoint.model;
    let bundle = &dataset.inner;
    let mut report = py
        .detach(|| match task {
            Task::Tc => eval::evaluate_triple_classification(scorer, bundle, &opts),
            Task::Lp => eval::evaluate_link_prediction(scorer, bundle, &opts).map(|(r, _)| r),
            Task::Rp => eval::evaluate_relation_prediction(scorer, bundle, &opts).map(|(r, _)| r),
        })
        .map_err(core_err)?;
    report.scorer = model.scorer().to_owned();
    to_py(py, &report)
}

/// Default evaluation options, as a dict.
#[pyfunction]
fn default_eval_options(py: Python<'_>) -> PyResult<Py<PyAny>> {
    to_py(py, &EvalOptions::default())
}

#[pymodule]
pub fn kgc_forge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<TrainedModel>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(default_eval_options, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
