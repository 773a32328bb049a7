//! Model files.
//!
//! Binary container, all integers u32 little-endian:
//!
//! ```text
//! "EVDL" | version | layer count | (rows, cols) per layer |
//! per layer: weights (rows × cols, row-major) then bias (rows), f64 LE
//! ```
//!
//! A sidecar `<model>.meta` holds `key=value` lines: the training config,
//! seed, epoch counts and per-epoch history.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Dense, EpochRecord, EvidenceActivation, Network, TrainConfig, TrainedModel};
use crate::error::{Error, Result};
use crate::evidential::LambdaSchedule;

pub const MODEL_MAGIC: &[u8; 4] = b"EVDL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

pub fn meta_path(path: &Path) -> PathBuf {
    let mut os: OsString = path.as_os_str().to_owned();
    os.push(".meta");
    PathBuf::from(os)
}

pub fn encode_network(net: &Network) -> Vec<u8> {
    let layers = net.layers();
    let mut out = Vec::with_capacity(12 + 8 * layers.len() + 8 * net.param_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in layers {
        out.extend_from_slice(&(l.rows as u32).to_le_bytes());
        out.extend_from_slice(&(l.cols as u32).to_le_bytes());
    }
    for l in layers {
        for v in l.weights.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at + n;
        let slice = self
            .bytes
            .get(self.at..end)
            .ok_or_else(|| Error::Format(format!("model file truncated at byte {}", self.at)))?;
        self.at = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(f64::from_le_bytes(a))
    }
}

pub fn decode_network(
    bytes: &[u8],
    dropout: f64,
    activation: EvidenceActivation,
) -> Result<Network> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(4)? != MODEL_MAGIC {
        return Err(Error::Format("not an EVDL model file (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported model format version {version}")));
    }
    let count = cur.u32()? as usize;
    if count == 0 || count > 1024 {
        return Err(Error::Format(format!("implausible layer count {count}")));
    }
    let mut dims = Vec::with_capacity(count);
    for _ in 0..count {
        dims.push((cur.u32()? as usize, cur.u32()? as usize));
    }
    let mut layers = Vec::with_capacity(count);
    for (rows, cols) in dims {
        let mut layer = Dense::zeros(rows, cols);
        for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            *w = cur.f64()?;
        }
        layers.push(layer);
    }
    if cur.at != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after parameters",
            bytes.len() - cur.at
        )));
    }
    Network::from_layers(layers, dropout, activation)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn render_meta(model: &TrainedModel) -> String {
    let cfg = &model.config;
    let net = &model.network;
    let mut lines = vec![
        format!("format=evdl/{MODEL_FORMAT_VERSION}"),
        format!("input_dim={}", net.input_dim()),
        format!("hidden={}", join(&net.hidden_sizes())),
        format!("activation={}", net.activation()),
        format!("dropout={}", net.dropout()),
        format!("learning_rate={}", cfg.learning_rate),
        format!("batch_size={}", cfg.batch_size),
        format!("max_epochs={}", cfg.max_epochs),
        format!("patience={}", cfg.patience),
        format!("momentum={}", cfg.momentum),
        format!("lambda_initial={}", cfg.schedule.initial),
        format!("lambda_decay_points={}", join(&cfg.schedule.decay_points)),
        format!("lambda_decayed_values={}", join(&cfg.schedule.decayed_values)),
        format!("seed={}", cfg.seed),
        format!("epochs_trained={}", model.history.len()),
        format!("best_epoch={}", model.best_epoch),
    ];
    for h in &model.history {
        let val = h.val_loss.map_or_else(|| "-".to_string(), |v| v.to_string());
        lines.push(format!(
            "history={}:{}:{}:{}",
            h.epoch, h.lambda, h.train_loss, val
        ));
    }
    lines.push(String::new());
    lines.join("\n")
}

pub fn save_model(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_network(&model.network)).map_err(|e| Error::io(path, e))?;
    let meta = meta_path(path);
    fs::write(&meta, render_meta(model)).map_err(|e| Error::io(&meta, e))
}

struct Meta<'a> {
    path: &'a Path,
    fields: HashMap<&'a str, &'a str>,
    history: Vec<(usize, &'a str)>,
}

impl<'a> Meta<'a> {
    fn parse(path: &'a Path, text: &'a str) -> Result<Self> {
        let mut fields = HashMap::new();
        let mut history = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, i + 1, "expected key=value"))?;
            if k == "history" {
                history.push((i + 1, v));
            } else {
                fields.insert(k, v);
            }
        }
        Ok(Meta {
            path,
            fields,
            history,
        })
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .fields
            .get(key)
            .ok_or_else(|| Error::Format(format!("{}: missing key {key}", self.path.display())))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("{}: bad value for {key}: {raw:?}", self.path.display())))
    }

    fn pair(&self, key: &str) -> Result<[f64; 2]> {
        let raw: String = self.get(key)?;
        let parts: Vec<f64> = raw
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("{key}: expected two numbers, got {raw:?}")))?;
        <[f64; 2]>::try_from(parts)
            .map_err(|_| Error::Format(format!("{key}: expected two numbers, got {raw:?}")))
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let meta_file = meta_path(path);
    let text = fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
    let meta = Meta::parse(&meta_file, &text)?;

    let activation: String = meta.get("activation")?;
    let network = decode_network(&bytes, meta.get("dropout")?, activation.parse()?)?;
    let hidden_raw: String = meta.get("hidden")?;
    let hidden = if hidden_raw.is_empty() {
        Vec::new()
    } else {
        hidden_raw
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<Vec<usize>, _>>()
            .map_err(|_| Error::Format(format!("bad hidden sizes {hidden_raw:?}")))?
    };
    if hidden != network.hidden_sizes() {
        return Err(Error::Format(format!(
            "metadata hidden sizes {hidden:?} disagree with model file {:?}",
            network.hidden_sizes()
        )));
    }
    let config = TrainConfig {
        learning_rate: meta.get("learning_rate")?,
        batch_size: meta.get("batch_size")?,
        max_epochs: meta.get("max_epochs")?,
        patience: meta.get("patience")?,
        schedule: LambdaSchedule {
            initial: meta.get("lambda_initial")?,
            decay_points: meta.pair("lambda_decay_points")?,
            decayed_values: meta.pair("lambda_decayed_values")?,
        },
        dropout: network.dropout(),
        seed: meta.get("seed")?,
        hidden,
        momentum: meta.get("momentum")?,
        activation: network.activation(),
    };
    let mut history = Vec::with_capacity(meta.history.len());
    for (line, raw) in &meta.history {
        let bad = || Error::parse(&meta_file, *line, format!("bad history entry {raw:?}"));
        let parts: Vec<&str> = raw.split(':').collect();
        let [epoch, lambda, train_loss, val] = parts[..] else {
            return Err(bad());
        };
        history.push(EpochRecord {
            epoch: epoch.parse().map_err(|_| bad())?,
            lambda: lambda.parse().map_err(|_| bad())?,
            train_loss: train_loss.parse().map_err(|_| bad())?,
            val_loss: match val {
                "-" => None,
                v => Some(v.parse().map_err(|_| bad())?),
            },
        });
    }
    Ok(TrainedModel {
        network,
        history,
        best_epoch: meta.get("best_epoch")?,
        config,
    })
}
