//! Python bindings: the detectors, router, metrics, and a `Gateway` class
//! wrapping the full per-turn pipeline.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use ragweir::corpus;
use ragweir::detect::{self, DetectorHit, LeakScanConfig, PatternSet};
use ragweir::eval::{
    compute_metrics as core_metrics, load_corpus, ConfusionCounts, EvalRunner, MetricsReport,
};
use ragweir::grounded::EchoMock;
use ragweir::intent::{classify_intent as core_classify, Intent, IntentRouterConfig};
use ragweir::model::{Clock, PipelineVariant, Session};
use ragweir::pipeline::{FixtureTools, Pipeline, PipelineConfig};
use ragweir::retrieval::{cosine as core_cosine, ChunkStore, Embedder, HashEmbedder};
use ragweir::telemetry::CpeLog;

fn hit_to_dict<'py>(py: Python<'py>, hit: &DetectorHit) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("rule_id", &hit.rule_id)?;
    d.set_item("start", hit.matched_span.start)?;
    d.set_item("end", hit.matched_span.end)?;
    d.set_item("excerpt", &hit.excerpt)?;
    d.set_item(
        "category",
        hit.category_hint
            .map(|c| serde_json::to_value(c).unwrap().as_str().unwrap().to_string()),
    )?;
    Ok(d)
}

/// Compatibility-normalize text the way the keyword scanners see it.
#[pyfunction]
fn normalize(text: &str) -> String {
    detect::normalize(text)
}

/// Run the injection heuristics; returns one dict per hit.
#[pyfunction]
#[pyo3(signature = (text, extra_phrases = None, decode_base64 = false))]
fn scan_injection<'py>(
    py: Python<'py>,
    text: &str,
    extra_phrases: Option<Vec<String>>,
    decode_base64: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut patterns = PatternSet::default();
    for phrase in extra_phrases.unwrap_or_default() {
        patterns.add_phrase(&phrase);
    }
    patterns.decode_base64 = decode_base64;
    detect::scan_injection(text, &patterns)
        .iter()
        .map(|h| hit_to_dict(py, h))
        .collect()
}

/// Post-generation leak scan against a system prompt.
#[pyfunction]
#[pyo3(signature = (output, system_prompt, deny_words = None, shingle_k = 8))]
fn scan_leak<'py>(
    py: Python<'py>,
    output: &str,
    system_prompt: &str,
    deny_words: Option<Vec<String>>,
    shingle_k: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let deny = deny_words.unwrap_or_else(|| {
        vec!["system".to_string(), "developer".to_string(), "internal".to_string()]
    });
    if shingle_k < 4 {
        return Err(PyValueError::new_err("shingle_k must be at least 4"));
    }
    let cfg = LeakScanConfig::with_options(system_prompt, deny, shingle_k);
    detect::scan_leak(output, &cfg)
        .iter()
        .map(|h| hit_to_dict(py, h))
        .collect()
}

/// Classify a user turn as "tourism", "self", or "other" with its score.
#[pyfunction]
fn classify_intent(text: &str) -> (String, f64) {
    let (intent, score) = core_classify(&detect::normalize(text), &IntentRouterConfig::default());
    let label = match intent {
        Intent::Tourism => "tourism",
        Intent::SelfIntro => "self",
        Intent::Other => "other",
    };
    (label.to_string(), score)
}

/// Cosine similarity of two equal-length vectors.
#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    core_cosine(&a, &b).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Deterministic mock embedding (unit-norm).
#[pyfunction]
#[pyo3(signature = (text, dim = 256, seed = 0))]
fn embed(text: &str, dim: usize, seed: u64) -> PyResult<Vec<f64>> {
    if dim < 2 {
        return Err(PyValueError::new_err("dim must be at least 2"));
    }
    HashEmbedder::new(dim, seed)
        .embed(text)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Precision / recall / accuracy / F1 from confusion counts; undefined
/// ratios come back as None.
#[pyfunction(name = "compute_metrics")]
#[pyo3(signature = (tp, fp, r#fn, tn))]
fn compute_metrics_py<'py>(
    py: Python<'py>,
    tp: usize,
    fp: usize,
    r#fn: usize,
    tn: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let row = core_metrics(ConfusionCounts::new(tp, fp, r#fn, tn))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    d.set_item("precision", row.precision)?;
    d.set_item("recall", row.recall)?;
    d.set_item("accuracy", row.accuracy)?;
    d.set_item("f1", row.f1)?;
    Ok(d)
}

/// Write the bundled synthetic fixtures into a directory.
#[pyfunction]
fn gen_fixtures(out_dir: &str) -> PyResult<()> {
    let dir = Path::new(out_dir);
    std::fs::create_dir_all(dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    corpus::write_samples(&dir.join("corpus.jsonl"), &corpus::synthetic_corpus())
        .and_then(|()| corpus::write_samples(&dir.join("anchoring.jsonl"), &corpus::anchoring_fixtures()))
        .and_then(|()| corpus::write_store(&dir.join("store.jsonl"), &corpus::store_records()))
        .map_err(|e| PyIOError::new_err(e.to_string()))
}

fn parse_variant(name: &str) -> PyResult<PipelineVariant> {
    PipelineVariant::parse(name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown variant `{name}` (expected v0..v4)")))
}

/// A fully wired guardrail pipeline bound to one knowledge store. Sessions
/// are kept per `session_id`, so multi-turn conversations work naturally.
#[pyclass]
struct Gateway {
    pipeline: Pipeline,
    sessions: Mutex<HashMap<String, Session>>,
    store_path: PathBuf,
    seed: u64,
}

#[pymethods]
impl Gateway {
    #[new]
    #[pyo3(signature = (store_path, variant = "v3", seed = 0, window_w = 3, cpe_log_path = None))]
    fn new(
        store_path: &str,
        variant: &str,
        seed: u64,
        window_w: usize,
        cpe_log_path: Option<&str>,
    ) -> PyResult<Gateway> {
        let variant = parse_variant(variant)?;
        let embedder = Arc::new(HashEmbedder::new(256, seed));
        let store = ChunkStore::load_records(Path::new(store_path), embedder.as_ref())
            .map_err(|e| PyIOError::new_err(e.to_string()))?;
        let telemetry = match cpe_log_path {
            Some(path) => CpeLog::with_file(Path::new(path))
                .map_err(|e| PyIOError::new_err(e.to_string()))?,
            None => CpeLog::in_memory(),
        };
        let mut cfg = PipelineConfig::for_variant(variant);
        cfg.window_w = window_w;
        let pipeline = Pipeline::new(
            cfg,
            Arc::new(store),
            embedder,
            Arc::new(EchoMock),
            Arc::new(FixtureTools::new(seed)),
            Arc::new(telemetry),
            Clock::logical(),
        )
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Gateway {
            pipeline,
            sessions: Mutex::new(HashMap::new()),
            store_path: PathBuf::from(store_path),
            seed,
        })
    }

    /// Run one user turn; returns a dict with action, reason, cpe_tags, and
    /// answer (None unless allowed).
    fn run_turn<'py>(
        &self,
        py: Python<'py>,
        session_id: &str,
        text: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut sessions = self.sessions.lock().unwrap();
        let session = sessions
            .entry(session_id.to_string())
            .or_insert_with(|| self.pipeline.new_session(session_id));
        let verdict = self.pipeline.run_turn(session, text);

        let d = PyDict::new(py);
        let action = serde_json::to_value(verdict.action).unwrap();
        d.set_item("action", action.as_str().unwrap())?;
        d.set_item("reason", verdict.reason)?;
        let tags: Vec<String> = verdict.cpe_tags.iter().map(|t| t.to_string()).collect();
        d.set_item("cpe_tags", PyList::new(py, tags)?)?;
        d.set_item("answer", verdict.answer)?;
        Ok(d)
    }

    /// Batch-evaluate a corpus file across variants (defaults to v0..v4);
    /// returns the machine-readable report as a JSON string.
    #[pyo3(signature = (corpus_path, variants = None))]
    fn eval_corpus(&self, corpus_path: &str, variants: Option<Vec<String>>) -> PyResult<String> {
        let variant_list: Vec<PipelineVariant> = match variants {
            None => PipelineVariant::ALL.to_vec(),
            Some(names) => names
                .iter()
                .map(|n| parse_variant(n))
                .collect::<PyResult<Vec<_>>>()?,
        };
        let samples =
            load_corpus(Path::new(corpus_path)).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let embedder = Arc::new(HashEmbedder::new(256, self.seed));
        let store = ChunkStore::load_records(&self.store_path, embedder.as_ref())
            .map_err(|e| PyIOError::new_err(e.to_string()))?;
        let runner = EvalRunner {
            store: Arc::new(store),
            embedder,
            backend: Arc::new(EchoMock),
            tools: Arc::new(FixtureTools::new(self.seed)),
            telemetry: Arc::new(CpeLog::in_memory()),
            clock: Clock::logical(),
            config_for: Box::new(PipelineConfig::for_variant),
        };
        let outcomes = runner
            .run_eval(&samples, &variant_list)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let report =
            MetricsReport::from_outcomes(&outcomes).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(report.to_json())
    }

    fn __repr__(&self) -> String {
        format!(
            "Gateway(variant={}, store={})",
            self.pipeline.variant(),
            self.store_path.display()
        )
    }
}

#[pymodule]
fn ragweir_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(scan_injection, m)?)?;
    m.add_function(wrap_pyfunction!(scan_leak, m)?)?;
    m.add_function(wrap_pyfunction!(classify_intent, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics_py, m)?)?;
    m.add_function(wrap_pyfunction!(gen_fixtures, m)?)?;
    m.add_class::<Gateway>()?;
    Ok(())
}
