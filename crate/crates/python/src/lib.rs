//! Python bindings for `unitmetric`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use unitmetric::mining::{unit_score, PairRecord};
use unitmetric::model::train;
use unitmetric::quantizer::{self, Distance, FeatureSequence, KMeansParams};
use unitmetric::synth::{gen_corpus, SynthConfig};
use unitmetric::textmetrics::{self, Metric};
use unitmetric::{stats, units, Error, ModelConfig, UnitSequence};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> PyResult<T> {
    s.parse().map_err(PyValueError::new_err)
}

fn seq(units: Vec<u32>, vocab_size: Option<u32>) -> PyResult<UnitSequence> {
    let k = vocab_size.unwrap_or_else(|| units.iter().max().map_or(1, |m| m + 1));
    UnitSequence::new(units, k).map_err(py_err)
}

/// Collapse runs of identical consecutive units.
#[pyfunction]
fn dedup(units: Vec<u32>) -> PyResult<Vec<u32>> {
    Ok(units::dedup(&seq(units, None)?).into_units())
}

#[pyfunction]
fn units_to_chars(units: Vec<u32>, vocab_size: u32) -> PyResult<String> {
    units::units_to_chars(&seq(units, Some(vocab_size))?).map_err(py_err)
}

#[pyfunction]
fn chars_to_units(s: &str, vocab_size: u32) -> PyResult<Vec<u32>> {
    Ok(units::chars_to_units(s, vocab_size).map_err(py_err)?.into_units())
}

#[pyfunction]
#[pyo3(signature = (hyp, reference, max_n = 4))]
fn sentence_bleu(hyp: Vec<String>, reference: Vec<String>, max_n: usize) -> PyResult<f64> {
    if max_n == 0 {
        return Err(PyValueError::new_err("max_n must be at least 1"));
    }
    Ok(textmetrics::sentence_bleu(&hyp, &reference, max_n).value)
}

#[pyfunction]
#[pyo3(signature = (hyp, reference, max_n = 6, beta = 2.0))]
fn sentence_chrf(hyp: &str, reference: &str, max_n: usize, beta: f64) -> PyResult<f64> {
    if max_n == 0 || !(beta > 0.0) {
        return Err(PyValueError::new_err("max_n must be >= 1 and beta > 0"));
    }
    Ok(textmetrics::sentence_chrf(hyp, reference, max_n, beta).value)
}

#[pyfunction]
fn tokenize_text(s: &str) -> Vec<String> {
    textmetrics::tokenize_text(s)
}

#[pyfunction]
#[pyo3(signature = (hyp, reference, metric = "bleu", raw = false))]
fn text_score(hyp: &str, reference: &str, metric: &str, raw: bool) -> PyResult<f64> {
    Ok(textmetrics::text_score(hyp, reference, parse(metric)?, raw))
}

#[pyfunction]
fn pearson(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    stats::pearson(&xs, &ys).map_err(py_err)
}

#[pyfunction]
fn spearman(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    stats::spearman(&xs, &ys).map_err(py_err)
}

/// `(lo, hi, count)` per bin over [0, 1].
#[pyfunction]
#[pyo3(signature = (scores, n_bins = 20))]
fn histogram(scores: Vec<f64>, n_bins: usize) -> PyResult<Vec<(f64, f64, usize)>> {
    Ok(stats::histogram(&scores, n_bins)
        .map_err(py_err)?
        .into_iter()
        .map(|b| (b.lo, b.hi, b.count))
        .collect())
}

fn frames_to_seq(id: &str, frames: Vec<Vec<f32>>) -> PyResult<FeatureSequence> {
    let dim = frames.first().map_or(0, Vec::len);
    if frames.iter().any(|f| f.len() != dim) {
        return Err(PyValueError::new_err("all frames must have the same dimension"));
    }
    FeatureSequence::new(id, dim, frames.into_iter().flatten().collect()).map_err(py_err)
}

#[pyclass(module = "unitmetric_py")]
struct Codebook {
    inner: quantizer::Codebook,
}

#[pymethods]
impl Codebook {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: quantizer::Codebook::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn centroids(&self) -> Vec<Vec<f64>> {
        self.inner.centroids.clone()
    }

    /// Nearest-centroid unit of every frame.
    fn quantize(&self, frames: Vec<Vec<f32>>) -> PyResult<Vec<u32>> {
        let s = frames_to_seq("frames", frames)?;
        Ok(quantizer::quantize(&s, &self.inner).map_err(py_err)?.into_units())
    }
}

/// Fit a codebook on a list of utterances (each a list of frames).
/// Returns the codebook and the inertia trace.
#[pyfunction]
#[pyo3(signature = (utterances, k, seed, distance = "l2", max_iters = 100))]
fn kmeans_fit(
    utterances: Vec<Vec<Vec<f32>>>,
    k: usize,
    seed: u64,
    distance: &str,
    max_iters: usize,
) -> PyResult<(Codebook, Vec<f64>)> {
    let seqs = utterances
        .into_iter()
        .enumerate()
        .map(|(i, f)| frames_to_seq(&format!("u{i}"), f))
        .collect::<PyResult<Vec<_>>>()?;
    let fit = quantizer::kmeans_fit(
        &seqs,
        &KMeansParams {
            k,
            distance: parse::<Distance>(distance)?,
            max_iters,
            seed,
        },
    )
    .map_err(py_err)?;
    Ok((Codebook { inner: fit.codebook }, fit.inertia))
}

/// A pair as `(pair_id, h_units, r_units, target)`.
type PyPair = (String, Vec<u32>, Vec<u32>, Option<f64>);

fn to_record(p: PyPair, k: u32) -> PyResult<PairRecord> {
    let (pair_id, h, r, target) = p;
    Ok(PairRecord {
        h_id: format!("{pair_id}_h"),
        r_id: format!("{pair_id}_r"),
        pair_id,
        h_units: seq(h, Some(k))?,
        r_units: seq(r, Some(k))?,
        h_transcript: None,
        r_transcript: None,
        target,
    })
}

fn from_record(p: &PairRecord) -> PyPair {
    (
        p.pair_id.clone(),
        p.h_units.units().to_vec(),
        p.r_units.units().to_vec(),
        p.target,
    )
}

/// Synthetic corpus with the desk-scale mixture; units are frame-level (not de-duplicated).
#[pyfunction]
#[pyo3(signature = (n_pairs, vocab_size, seed, config_json = None))]
fn synth_pairs(n_pairs: usize, vocab_size: u32, seed: u64, config_json: Option<&str>) -> PyResult<Vec<PyPair>> {
    let mut cfg = match config_json {
        Some(j) => serde_json::from_str::<SynthConfig>(j).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => SynthConfig::desk_scale(n_pairs, vocab_size),
    };
    cfg.n_pairs = n_pairs;
    cfg.vocab_size = vocab_size;
    let corpus = gen_corpus(&cfg, seed, false).map_err(py_err)?;
    Ok(corpus.pairs.iter().map(from_record).collect())
}

/// Naive unit metric (BLEU over unit ids or ChrF over unit characters).
/// Units are scored as given; call `dedup` first for the usual setting.
#[pyfunction]
#[pyo3(signature = (h_units, r_units, vocab_size, metric = "bleu"))]
fn unit_metric(h_units: Vec<u32>, r_units: Vec<u32>, vocab_size: u32, metric: &str) -> PyResult<f64> {
    let p = to_record(("p".into(), h_units, r_units, None), vocab_size)?;
    unit_score(&p, parse::<Metric>(metric)?).map_err(py_err)
}

#[pyclass(module = "unitmetric_py")]
struct MetricModel {
    inner: unitmetric::MetricModel,
}

#[pymethods]
impl MetricModel {
    /// New randomly initialised model from a JSON model config.
    #[new]
    fn new(config_json: &str) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: unitmetric::MetricModel::new(cfg).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: unitmetric::MetricModel::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn encode(&self, units: Vec<u32>) -> PyResult<Vec<f64>> {
        let k = self.inner.config().vocab_size;
        Ok(self.inner.encode(&seq(units, Some(k))?).map_err(py_err)?.to_vec())
    }

    /// Predicted score in (0, 1) for de-duplicated unit sequences.
    fn predict(&self, h_units: Vec<u32>, r_units: Vec<u32>) -> PyResult<f64> {
        let k = self.inner.config().vocab_size;
        self.inner
            .predict_units(&seq(h_units, Some(k))?, &seq(r_units, Some(k))?)
            .map_err(py_err)
    }

    /// Train from a JSON config on `(pair_id, h, r, target)` tuples.
    /// Units are de-duplicated first. Returns the best-dev model when a dev
    /// set is given, otherwise the final one.
    #[staticmethod]
    #[pyo3(signature = (config_json, train_pairs, dev_pairs = None))]
    fn train(py: Python<'_>, config_json: &str, train_pairs: Vec<PyPair>, dev_pairs: Option<Vec<PyPair>>) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let k = cfg.vocab_size;
        let prep = |v: Vec<PyPair>| -> PyResult<Vec<PairRecord>> {
            v.into_iter().map(|p| to_record(p, k).map(|r| r.dedup())).collect()
        };
        let tr = prep(train_pairs)?;
        let dv = dev_pairs.map(prep).transpose()?;
        let outcome = py
            .detach(|| train(&cfg, &tr, dv.as_deref(), None))
            .map_err(py_err)?;
        Ok(Self {
            inner: outcome.best.unwrap_or(outcome.model),
        })
    }
}

#[pymodule]
fn unitmetric_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(dedup, m)?)?;
    m.add_function(wrap_pyfunction!(units_to_chars, m)?)?;
    m.add_function(wrap_pyfunction!(chars_to_units, m)?)?;
    m.add_function(wrap_pyfunction!(sentence_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(sentence_chrf, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize_text, m)?)?;
    m.add_function(wrap_pyfunction!(text_score, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(histogram, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans_fit, m)?)?;
    m.add_function(wrap_pyfunction!(synth_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(unit_metric, m)?)?;
    m.add_class::<Codebook>()?;
    m.add_class::<MetricModel>()?;
    Ok(())
}
