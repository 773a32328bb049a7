//! Python bindings for `evdl_core`.

use evdl_core::data::{self, LabeledSample};
use evdl_core::eval::{self, Prediction};
use evdl_core::evidential::{self, BetaParams, BinaryLabel, EvidencePair, LambdaSchedule};
use evdl_core::net::{self, EvidenceActivation, EvidenceModel, TrainConfig, TrainedModel};
use evdl_core::Error;
use pyo3::exceptions::{PyNotImplementedError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Unsupported(_) => PyNotImplementedError::new_err(e.to_string()),
        Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn label(y: u8) -> PyResult<BinaryLabel> {
    BinaryLabel::from_u8(y).ok_or_else(|| PyValueError::new_err(format!("label must be 0 or 1, got {y}")))
}

fn beta(alpha: f64, beta: f64) -> PyResult<BetaParams> {
    BetaParams::new(alpha, beta).map_err(to_py)
}

#[pyclass(name = "Dataset", module = "evdl")]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (features, labels, ids=None, noise_flags=None))]
    fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<u8>,
        ids: Option<Vec<u64>>,
        noise_flags: Option<Vec<bool>>,
    ) -> PyResult<Self> {
        let n = features.len();
        if labels.len() != n {
            return Err(PyValueError::new_err(format!("{} labels for {n} rows", labels.len())));
        }
        let ids = ids.unwrap_or_else(|| (0..n as u64).collect());
        if ids.len() != n || noise_flags.as_ref().is_some_and(|f| f.len() != n) {
            return Err(PyValueError::new_err("ids and noise_flags must match the row count"));
        }
        let dim = features.first().map_or(0, Vec::len);
        let samples = features
            .into_iter()
            .zip(labels)
            .zip(ids)
            .enumerate()
            .map(|(i, ((features, y), id))| {
                Ok(LabeledSample {
                    id,
                    features,
                    label: label(y)?,
                    noise_flag: noise_flags.as_ref().map(|f| f[i]),
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let inner = data::Dataset::new("python", dim, samples, "python").map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (n, overlap=0.15, dim=2, positive_fraction=0.5, seed=0))]
    fn synthetic(n: usize, overlap: f64, dim: usize, positive_fraction: f64, seed: u64) -> PyResult<Self> {
        let inner = data::generate_synthetic(n, overlap, dim, positive_fraction, seed).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::read_csv(path).map_err(to_py)?,
        })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        data::write_csv(&self.inner, path).map_err(to_py)
    }

    /// Symmetric label flips with probability `rho`; flipped rows are flagged.
    #[pyo3(signature = (rho, seed=0))]
    fn with_noise(&self, rho: f64, seed: u64) -> PyResult<Self> {
        let inner = data::inject_noise(&self.inner, rho, seed).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    #[pyo3(signature = (train_frac, val_frac, seed=0))]
    fn split(&self, train_frac: f64, val_frac: f64, seed: u64) -> PyResult<(Self, Self, Self)> {
        let (a, b, c) = data::split(&self.inner, train_frac, val_frac, seed).map_err(to_py)?;
        Ok((PyDataset { inner: a }, PyDataset { inner: b }, PyDataset { inner: c }))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn ids(&self) -> Vec<u64> {
        self.inner.samples.iter().map(|s| s.id).collect()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.samples.iter().map(|s| s.features.clone()).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<u8> {
        self.inner.samples.iter().map(|s| s.label.as_u8()).collect()
    }

    #[getter]
    fn noise_flags(&self) -> Option<Vec<bool>> {
        self.inner.samples.iter().map(|s| s.noise_flag).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, dim={})", self.inner.len(), self.inner.dim)
    }
}

#[allow(clippy::too_many_arguments)]
fn train_config(
    lr: f64,
    batch_size: usize,
    epochs: usize,
    patience: usize,
    dropout: f64,
    momentum: f64,
    hidden: Vec<usize>,
    activation: &str,
    seed: u64,
) -> PyResult<TrainConfig> {
    let activation: EvidenceActivation = activation.parse().map_err(to_py)?;
    let cfg = TrainConfig {
        learning_rate: lr,
        batch_size,
        max_epochs: epochs,
        patience,
        schedule: LambdaSchedule::default(),
        dropout,
        seed,
        hidden,
        momentum,
        activation,
    };
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

#[pyclass(name = "Model", module = "evdl")]
struct PyModel {
    inner: TrainedModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (
        train, val=None, *, lr=1e-4, batch_size=128, epochs=12, patience=3, dropout=0.5,
        momentum=0.0, hidden=vec![64, 64], activation="relu", seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        train: &PyDataset,
        val: Option<&PyDataset>,
        lr: f64,
        batch_size: usize,
        epochs: usize,
        patience: usize,
        dropout: f64,
        momentum: f64,
        hidden: Vec<usize>,
        activation: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = train_config(lr, batch_size, epochs, patience, dropout, momentum, hidden, activation, seed)?;
        let tr = &train.inner.samples;
        let va = val.map_or(&[][..], |v| &v.inner.samples[..]);
        let inner = py.detach(|| net::train(tr, va, &cfg)).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: net::load_model(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        net::save_model(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.inner.best_epoch
    }

    /// One dict per completed epoch with `epoch`, `lambda`, `train_loss`, `val_loss`.
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .history
            .iter()
            .map(|h| {
                let d = PyDict::new(py);
                d.set_item("epoch", h.epoch)?;
                d.set_item("lambda", h.lambda)?;
                d.set_item("train_loss", h.train_loss)?;
                d.set_item("val_loss", h.val_loss)?;
                Ok(d)
            })
            .collect()
    }

    /// `(e_pos, e_neg)` for one feature vector.
    fn evidence(&self, x: Vec<f64>) -> PyResult<(f64, f64)> {
        let e = self.inner.evidence(&x).map_err(to_py)?;
        Ok((e.e_pos, e.e_neg))
    }

    /// `(id, p_pos, uncertainty)` per sample.
    fn predict(&self, ds: &PyDataset) -> PyResult<Vec<(u64, f64, f64)>> {
        let preds = eval::predict(&self.inner, &ds.inner.samples).map_err(to_py)?;
        Ok(preds.iter().map(|p| (p.id, p.p_pos, p.uncertainty)).collect())
    }

    #[pyo3(signature = (ds, rates, threshold=eval::DEFAULT_DECISION_THRESHOLD))]
    fn rejection_curve<'py>(
        &self,
        py: Python<'py>,
        ds: &PyDataset,
        rates: Vec<f64>,
        threshold: f64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let preds = eval::predict(&self.inner, &ds.inner.samples).map_err(to_py)?;
        let curve = eval::rejection_curve(&preds, &rates, threshold).map_err(to_py)?;
        curve
            .points
            .iter()
            .map(|p| {
                let d = PyDict::new(py);
                d.set_item("rate", p.rate)?;
                d.set_item("threshold", p.threshold)?;
                d.set_item("auc", p.auc)?;
                d.set_item("micro_f1", p.f1.map(|f| f.micro))?;
                d.set_item("retained", p.retained)?;
                d.set_item("enrichment", p.enrichment)?;
                Ok(d)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_dim={}, hidden={:?}, epochs={})",
            self.inner.input_dim(),
            self.inner.network.hidden_sizes(),
            self.inner.history.len()
        )
    }
}

/// Beta parameters and belief masses for a pair of evidence values.
#[pyfunction]
fn opinion<'py>(py: Python<'py>, e_pos: f64, e_neg: f64) -> PyResult<Bound<'py, PyDict>> {
    let bp = EvidencePair::new(e_pos, e_neg).map_err(to_py)?.to_beta();
    let d = PyDict::new(py);
    d.set_item("alpha", bp.alpha())?;
    d.set_item("beta", bp.beta())?;
    d.set_item("p_pos", bp.p_pos())?;
    d.set_item("p_neg", bp.p_neg())?;
    d.set_item("belief_pos", bp.belief_pos())?;
    d.set_item("belief_neg", bp.belief_neg())?;
    d.set_item("uncertainty", bp.uncertainty())?;
    Ok(d)
}

#[pyfunction]
fn data_term(y: u8, alpha: f64, beta_: f64) -> PyResult<f64> {
    Ok(evidential::data_term(label(y)?, beta(alpha, beta_)?))
}

#[pyfunction]
fn kl_term(y: u8, alpha: f64, beta_: f64) -> PyResult<f64> {
    Ok(evidential::kl_term(label(y)?, beta(alpha, beta_)?))
}

#[pyfunction]
fn total_loss(y: u8, alpha: f64, beta_: f64, lam: f64) -> PyResult<f64> {
    evidential::total_loss(label(y)?, beta(alpha, beta_)?, lam).map_err(to_py)
}

/// Regularization weight under the default schedule.
#[pyfunction]
fn lambda_at(epoch: usize, total_epochs: usize) -> PyResult<f64> {
    evidential::lambda_at(&LambdaSchedule::default(), epoch, total_epochs).map_err(to_py)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    let positive: Vec<bool> = labels.iter().map(|&y| label(y).map(BinaryLabel::is_positive)).collect::<PyResult<_>>()?;
    eval::roc_auc_scores(&scores, &positive).map_err(to_py)
}

/// Mean per-class F1 and micro F1 of thresholded `p_pos` scores.
#[pyfunction]
#[pyo3(signature = (p_pos, labels, threshold=eval::DEFAULT_DECISION_THRESHOLD))]
fn f1_scores(p_pos: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<(f64, f64, f64)> {
    if p_pos.len() != labels.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    let preds = p_pos
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (&p, &y))| {
            Ok(Prediction {
                id: i as u64,
                p_pos: p,
                uncertainty: 1.0,
                label: label(y)?,
                noise_flag: None,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let f = eval::f1_scores(&preds, threshold).map_err(to_py)?;
    Ok((f.pos, f.neg, f.micro))
}

#[pymodule]
pub fn evdl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(opinion, m)?)?;
    m.add_function(wrap_pyfunction!(data_term, m)?)?;
    m.add_function(wrap_pyfunction!(kl_term, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_at, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(f1_scores, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
