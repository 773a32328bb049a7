//! Evidence from several stochastic views of the data distribution: deep
//! ensembles trained on random subsets, and MC-dropout passes.
//!
//! Both average evidence `(e⁺, e⁻)` before the `+1` offset, so the implied
//! Beta never gains the prior's pseudo-counts more than once.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::evidential::EvidencePair;
use crate::net::{load_model, save_model, EvidenceModel, Mode, Network, TrainConfig, TrainedModel};
use crate::rng;

pub const ENSEMBLE_MANIFEST: &str = "ensemble.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    members: Vec<TrainedModel>,
    seeds: Vec<u64>,
    subset_fraction: f64,
}

impl EnsembleModel {
    pub fn new(members: Vec<TrainedModel>, seeds: Vec<u64>, subset_fraction: f64) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Config("an ensemble needs at least one member".into()));
        };
        if seeds.len() != members.len() {
            return Err(Error::Config(format!(
                "{} members but {} seeds",
                members.len(),
                seeds.len()
            )));
        }
        check_fraction(subset_fraction)?;
        let dim = first.network.input_dim();
        if let Some(bad) = members.iter().find(|m| m.network.input_dim() != dim) {
            return Err(Error::Shape {
                expected: dim,
                got: bad.network.input_dim(),
            });
        }
        Ok(EnsembleModel {
            members,
            seeds,
            subset_fraction,
        })
    }

    pub fn members(&self) -> &[TrainedModel] {
        &self.members
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn subset_fraction(&self) -> f64 {
        self.subset_fraction
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl EvidenceModel for EnsembleModel {
    fn input_dim(&self) -> usize {
        self.members[0].network.input_dim()
    }

    fn evidence(&self, x: &[f64]) -> Result<EvidencePair> {
        ensemble_evidence(self, x)
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("subset fraction must lie in (0, 1], got {f}")))
    }
}

/// Indices of the training subset for one member, in original order.
pub fn member_subset(n: usize, fraction: f64, member_seed: u64) -> Vec<usize> {
    let size = ((fraction * n as f64) + 1e-9).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(member_seed, rng::STREAM_SUBSET));
    idx.truncate(size);
    idx.sort_unstable();
    idx
}

/// Trains `m` members in parallel. Member `k` uses seed `seed + k` for both
/// its subset draw and its [`TrainConfig::seed`]; the subset keeps the
/// original sample order, so `m = 1, fraction = 1` reproduces
/// [`crate::net::train`] with `cfg.seed = seed`.
pub fn ensemble_train(
    data: &[LabeledSample],
    val: &[LabeledSample],
    cfg: &TrainConfig,
    m: usize,
    subset_fraction: f64,
    seed: u64,
) -> Result<EnsembleModel> {
    if m == 0 {
        return Err(Error::Config("ensemble size must be >= 1".into()));
    }
    check_fraction(subset_fraction)?;
    cfg.validate()?;
    let size = member_subset(data.len(), subset_fraction, seed).len();
    if size < cfg.batch_size {
        return Err(Error::Config(format!(
            "member subset of {size} samples is smaller than one batch ({})",
            cfg.batch_size
        )));
    }
    let seeds: Vec<u64> = (0..m as u64).map(|k| seed.wrapping_add(k)).collect();
    let members = seeds
        .par_iter()
        .map(|&s| {
            let subset: Vec<LabeledSample> = member_subset(data.len(), subset_fraction, s)
                .into_iter()
                .map(|i| data[i].clone())
                .collect();
            let member_cfg = TrainConfig {
                seed: s,
                ..cfg.clone()
            };
            crate::net::train(&subset, val, &member_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    EnsembleModel::new(members, seeds, subset_fraction)
}

/// Component-wise mean of the members' eval-mode evidence.
pub fn ensemble_evidence(ens: &EnsembleModel, x: &[f64]) -> Result<EvidencePair> {
    let (mut pos, mut neg) = (0.0, 0.0);
    for m in &ens.members {
        let e = m.network.evidence(x)?;
        pos += e.e_pos;
        neg += e.e_neg;
    }
    let n = ens.members.len() as f64;
    Ok(EvidencePair {
        e_pos: pos / n,
        e_neg: neg / n,
    })
}

/// Mean evidence over `n_passes` train-mode passes. Masks come from one
/// ChaCha8 generator seeded with `seed`, drawn pass after pass.
pub fn mc_dropout_evidence(net: &Network, x: &[f64], n_passes: usize, seed: u64) -> Result<EvidencePair> {
    if n_passes == 0 {
        return Err(Error::Config("n_passes must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg) = (0.0, 0.0);
    for _ in 0..n_passes {
        let e = net.forward(x, Mode::Train, &mut rng)?;
        pos += e.e_pos;
        neg += e.e_neg;
    }
    let n = n_passes as f64;
    Ok(EvidencePair {
        e_pos: pos / n,
        e_neg: neg / n,
    })
}

/// MC-dropout around a fixed network, usable wherever an [`EvidenceModel`]
/// is expected. Every input reuses `seed`, so predictions do not depend on
/// evaluation order.
#[derive(Debug, Clone)]
pub struct McDropout<'a> {
    pub network: &'a Network,
    pub passes: usize,
    pub seed: u64,
}

impl EvidenceModel for McDropout<'_> {
    fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    fn evidence(&self, x: &[f64]) -> Result<EvidencePair> {
        mc_dropout_evidence(self.network, x, self.passes, self.seed)
    }
}

fn member_file(k: usize) -> String {
    format!("member_{k}.evdl")
}

/// Writes `member_<k>.evdl` (plus `.meta`) per member and a manifest listing
/// `member=<file>,<seed>` lines after the shared `subset_fraction`.
pub fn save_ensemble(ens: &EnsembleModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "format=evdl-ensemble/1\nmembers={}\nsubset_fraction={}\n",
        ens.len(),
        ens.subset_fraction
    );
    for (k, (member, seed)) in ens.members.iter().zip(&ens.seeds).enumerate() {
        let file = member_file(k);
        save_model(member, dir.join(&file))?;
        manifest.push_str(&format!("member={file},{seed}\n"));
    }
    let path = dir.join(ENSEMBLE_MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn load_ensemble(dir: impl AsRef<Path>) -> Result<EnsembleModel> {
    let dir = dir.as_ref();
    let path = dir.join(ENSEMBLE_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut fraction = None;
    let mut declared = None;
    let mut members = Vec::new();
    let mut seeds = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| Error::parse(&path, i + 1, msg);
        let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
        match key {
            "format" if value == "evdl-ensemble/1" => {}
            "format" => return Err(bad("unsupported ensemble format")),
            "members" => declared = Some(value.parse::<usize>().map_err(|_| bad("bad member count"))?),
            "subset_fraction" => {
                fraction = Some(value.parse::<f64>().map_err(|_| bad("bad subset fraction"))?)
            }
            "member" => {
                let (file, seed) = value.split_once(',').ok_or_else(|| bad("expected member=<file>,<seed>"))?;
                if file.contains(['/', '\\']) {
                    return Err(bad("member file must be a bare file name"));
                }
                seeds.push(seed.parse::<u64>().map_err(|_| bad("bad member seed"))?);
                members.push(load_model(dir.join(file))?);
            }
            _ => return Err(bad("unknown key")),
        }
    }
    if declared != Some(members.len()) {
        return Err(Error::Format(format!(
            "{}: declared {declared:?} members, found {}",
            path.display(),
            members.len()
        )));
    }
    let fraction =
        fraction.ok_or_else(|| Error::Format(format!("{}: missing subset_fraction", path.display())))?;
    EnsembleModel::new(members, seeds, fraction)
}
