//! Datasets: synthetic Gaussian classes, label-noise injection, CSV and IDX
//! readers, and seeded splitting.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::evidential::BinaryLabel;
use crate::rng;

/// Class-mean separation used when the requested overlap is (near) zero.
pub const MAX_SEPARATION: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: BinaryLabel,
    /// `Some(true)` iff the label was artificially flipped. `None` for data
    /// without ground truth about corruption.
    pub noise_flag: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    pub samples: Vec<LabeledSample>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        samples: Vec<LabeledSample>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let mut ids = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.features.len() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    got: s.features.len(),
                });
            }
            if !ids.insert(s.id) {
                return Err(Error::Config(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Dataset {
            name: name.into(),
            dim,
            samples,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_noise_flags(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.noise_flag.is_some())
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label.is_positive()).count()
    }

    /// Copy of this dataset restricted to samples whose id is not in `ids`.
    pub fn without_ids(&self, ids: &HashSet<u64>) -> Dataset {
        Dataset {
            name: self.name.clone(),
            dim: self.dim,
            samples: self
                .samples
                .iter()
                .filter(|s| !ids.contains(&s.id))
                .cloned()
                .collect(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Two unit-covariance Gaussian classes whose equal-prior Bayes error is
/// `overlap`. Means sit at `±d/2` on the first axis with `d = 2·Φ⁻¹(1 - overlap)`,
/// capped at [`MAX_SEPARATION`].
pub fn generate_synthetic(
    n: usize,
    overlap: f64,
    dim: usize,
    positive_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config(format!("need n >= 2 samples, got {n}")));
    }
    if dim < 1 {
        return Err(Error::Config("dim must be >= 1".into()));
    }
    if !(0.0..=0.5).contains(&overlap) {
        return Err(Error::Config(format!("overlap must lie in [0, 0.5], got {overlap}")));
    }
    if !(positive_fraction > 0.0 && positive_fraction < 1.0) {
        return Err(Error::Config(format!(
            "positive_fraction must lie in (0, 1), got {positive_fraction}"
        )));
    }
    let separation = class_separation(overlap);
    let n_pos = ((n as f64 * positive_fraction).round() as usize).clamp(1, n - 1);

    let mut rng = rng::stream(seed, rng::STREAM_SYNTH);
    let mut labels: Vec<BinaryLabel> = (0..n).map(|i| BinaryLabel::from(i < n_pos)).collect();
    labels.shuffle(&mut rng);

    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut features: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            features[0] += if label.is_positive() { 0.5 } else { -0.5 } * separation;
            LabeledSample {
                id: i as u64,
                features,
                label,
                noise_flag: Some(false),
            }
        })
        .collect();
    Dataset::new(
        "synthetic",
        dim,
        samples,
        format!(
            "synthetic n={n} overlap={overlap} dim={dim} positive_fraction={positive_fraction} seed={seed}"
        ),
    )
}

/// Distance between the class means for a given equal-prior Bayes error.
pub fn class_separation(overlap: f64) -> f64 {
    if overlap <= 0.0 {
        return MAX_SEPARATION;
    }
    let z = Normal::standard().inverse_cdf(1.0 - overlap);
    (2.0 * z).min(MAX_SEPARATION)
}

/// Symmetric label noise: every label flips independently with probability `rho`.
pub fn inject_noise(ds: &Dataset, rho: f64, seed: u64) -> Result<Dataset> {
    inject_noise_asymmetric(ds, rho, rho, seed)
}

/// Class-dependent label noise: positives flip with `rho_pos`, negatives with
/// `rho_neg`. The flag of a flipped sample is toggled, so it keeps tracking
/// disagreement with the original clean label.
pub fn inject_noise_asymmetric(
    ds: &Dataset,
    rho_pos: f64,
    rho_neg: f64,
    seed: u64,
) -> Result<Dataset> {
    for (name, rho) in [("rho_pos", rho_pos), ("rho_neg", rho_neg)] {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!("{name} must lie in [0, 1], got {rho}")));
        }
    }
    let mut rng = rng::stream(seed, rng::STREAM_NOISE);
    let samples = ds
        .samples
        .iter()
        .map(|s| {
            let rho = if s.label.is_positive() { rho_pos } else { rho_neg };
            // One draw per sample regardless of rho keeps streams aligned.
            let flip = rng.random::<f64>() < rho;
            let mut out = s.clone();
            if flip {
                out.label = s.label.flipped();
            }
            out.noise_flag = Some(s.noise_flag.unwrap_or(false) ^ flip);
            out
        })
        .collect();
    Ok(Dataset {
        name: ds.name.clone(),
        dim: ds.dim,
        samples,
        provenance: format!(
            "{} + noise(rho_pos={rho_pos}, rho_neg={rho_neg}, seed={seed})",
            ds.provenance
        ),
    })
}

/// Seeded shuffle followed by a contiguous partition into train/val/test.
pub fn split(
    ds: &Dataset,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "invalid split fractions train={train_frac} val={val_frac}"
        )));
    }
    let n = ds.len();
    let n_train = ((train_frac * n as f64) + 1e-9).floor() as usize;
    let n_val = if train_frac + val_frac >= 1.0 - 1e-12 {
        n - n_train
    } else {
        ((val_frac * n as f64) + 1e-9).floor() as usize
    };
    if n_train == 0 || (val_frac > 0.0 && n_val == 0) {
        return Err(Error::Config(format!(
            "split of {n} samples with train={train_frac} val={val_frac} leaves an empty part"
        )));
    }
    let test_frac = 1.0 - train_frac - val_frac;
    if test_frac > 1e-12 && n_train + n_val == n {
        return Err(Error::Config(format!(
            "split of {n} samples leaves the test part empty"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::STREAM_SPLIT));
    let part = |range: &[usize], suffix: &str| Dataset {
        name: format!("{}/{suffix}", ds.name),
        dim: ds.dim,
        samples: range.iter().map(|&i| ds.samples[i].clone()).collect(),
        provenance: format!("{} split(seed={seed})", ds.provenance),
    };
    Ok((
        part(&order[..n_train], "train"),
        part(&order[n_train..n_train + n_val], "val"),
        part(&order[n_train + n_val..], "test"),
    ))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(Error::parse(path, 1, "no header")),
        Some(r) => r.map_err(|e| csv_error(path, e))?,
    };
    let columns: Vec<&str> = header.iter().collect();
    let layout = HeaderLayout::parse(&columns).map_err(|msg| Error::parse(path, 1, msg))?;

    let mut samples = Vec::new();
    for record in records {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() != columns.len() {
            return Err(Error::parse(
                path,
                line,
                format!("expected {} fields, found {}", columns.len(), record.len()),
            ));
        }
        let mut features = Vec::with_capacity(layout.dim);
        for (i, cell) in record.iter().take(layout.dim).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::parse(path, line, format!("column f{i}: non-numeric value {cell:?}")))?;
            features.push(v);
        }
        let label_cell = &record[layout.dim];
        let label = match label_cell {
            "0" => BinaryLabel::Negative,
            "1" => BinaryLabel::Positive,
            other => {
                return Err(Error::parse(
                    path,
                    line,
                    format!("label must be 0 or 1, found {other:?}"),
                ))
            }
        };
        let noise_flag = if layout.has_flag {
            match &record[layout.dim + 1] {
                "" => None,
                "0" => Some(false),
                "1" => Some(true),
                other => {
                    return Err(Error::parse(
                        path,
                        line,
                        format!("noise_flag must be 0 or 1, found {other:?}"),
                    ))
                }
            }
        } else {
            None
        };
        samples.push(LabeledSample {
            id: samples.len() as u64,
            features,
            label,
            noise_flag,
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, layout.dim, samples, path.display().to_string())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::parse(path, line, e.to_string())
}

struct HeaderLayout {
    dim: usize,
    has_flag: bool,
}

impl HeaderLayout {
    fn parse(columns: &[&str]) -> std::result::Result<Self, String> {
        let mut seen = HashSet::new();
        for c in columns {
            if !seen.insert(*c) {
                return Err(format!("duplicate header column {c:?}"));
            }
        }
        let label_at = columns
            .iter()
            .position(|c| *c == "label")
            .ok_or_else(|| "missing header: no `label` column".to_string())?;
        for (i, c) in columns[..label_at].iter().enumerate() {
            if *c != format!("f{i}") {
                return Err(format!("expected feature column f{i}, found {c:?}"));
            }
        }
        let has_flag = match &columns[label_at + 1..] {
            [] => false,
            ["noise_flag"] => true,
            rest => return Err(format!("unexpected columns after label: {rest:?}")),
        };
        if label_at == 0 {
            return Err("no feature columns".into());
        }
        Ok(HeaderLayout {
            dim: label_at,
            has_flag,
        })
    }
}

/// Writes the CSV layout read by [`read_csv`]. The `noise_flag` column is
/// emitted when any sample carries a flag. Floats use the shortest
/// representation that round-trips exactly.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(ds.len() * (ds.dim * 20 + 8));
    let with_flag = ds.samples.iter().any(|s| s.noise_flag.is_some());
    for i in 0..ds.dim {
        out.push_str(&format!("f{i},"));
    }
    out.push_str("label");
    if with_flag {
        out.push_str(",noise_flag");
    }
    out.push('\n');
    for s in &ds.samples {
        for v in &s.features {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&s.label.as_u8().to_string());
        if with_flag {
            out.push(',');
            if let Some(flag) = s.noise_flag {
                out.push(if flag { '1' } else { '0' });
            }
        }
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Binary task from an IDX image/label archive pair: label 1 iff the digit is
/// in `positive_digits`. When `keep` is given, other digits are dropped.
pub fn read_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    positive_digits: &[u8],
    keep: Option<&[u8]>,
) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = fs::read(lp).map_err(|e| Error::io(lp, e))?;

    let magic = be_u32(&images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(&images, 4, "images")? as usize;
    let rows = be_u32(&images, 8, "images")? as usize;
    let cols = be_u32(&images, 12, "images")? as usize;
    let dim = rows * cols;
    let pixels = &images[16..];
    if pixels.len() != count * dim {
        return Err(Error::Format(format!(
            "images: header declares {count}x{rows}x{cols} bytes, file holds {}",
            pixels.len()
        )));
    }

    let magic = be_u32(&labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = be_u32(&labels, 4, "labels")? as usize;
    let digits = &labels[8..];
    if label_count != count || digits.len() != count {
        return Err(Error::Format(format!(
            "length mismatch: {count} images, {label_count} labels declared, {} label bytes",
            digits.len()
        )));
    }

    let samples = digits
        .iter()
        .enumerate()
        .filter(|(_, d)| keep.is_none_or(|k| k.contains(d)))
        .map(|(i, d)| LabeledSample {
            id: i as u64,
            features: pixels[i * dim..(i + 1) * dim]
                .iter()
                .map(|&p| f64::from(p) / 255.0)
                .collect(),
            label: BinaryLabel::from(positive_digits.contains(d)),
            noise_flag: None,
        })
        .collect();
    Dataset::new("idx", dim, samples, format!("{} + {}", ip.display(), lp.display()))
}
