//! Metrics, uncertainty-driven rejection, noise enrichment and the
//! bootstrapping driver.
//!
//! Wherever samples are ordered by uncertainty, higher `û` comes first and
//! ties go to the lower id.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::evidential::BinaryLabel;
use crate::net::{train, EvidenceModel, TrainConfig, TrainedModel};

pub const DEFAULT_DECISION_THRESHOLD: f64 = 0.5;
pub const REJECTION_CSV_HEADER: &str = "rate,threshold,auc,f1_pos,f1_neg,micro_f1,retained,enrichment";
pub const BOOTSTRAP_CSV_HEADER: &str = "round,fraction,removed,train_size,auc,f1_pos,f1_neg,micro_f1";
pub const PREDICTIONS_CSV_HEADER: &str = "id,p_pos,uncertainty,label,noise_flag";
/// Width of one enrichment histogram batch, as a fraction of the samples.
pub const ENRICHMENT_BIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub id: u64,
    pub p_pos: f64,
    /// `û = 2 / (α + β)`, in (0, 1].
    pub uncertainty: f64,
    pub label: BinaryLabel,
    pub noise_flag: Option<bool>,
}

pub fn predict<M: EvidenceModel + ?Sized>(model: &M, samples: &[LabeledSample]) -> Result<Vec<Prediction>> {
    samples
        .iter()
        .map(|s| {
            let bp = model.evidence(&s.features)?.to_beta();
            Ok(Prediction {
                id: s.id,
                p_pos: bp.p_pos(),
                uncertainty: bp.uncertainty(),
                label: s.label,
                noise_flag: s.noise_flag,
            })
        })
        .collect()
}

/// Mann–Whitney AUC with average ranks for tied scores.
pub fn roc_auc_scores(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape {
            expected: scores.len(),
            got: positive.len(),
        });
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC-AUC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("ROC-AUC scores must not be NaN".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share their mean.
        let rank = (i + 1 + j) as f64 / 2.0;
        let tied_pos = order[i..j].iter().filter(|&&k| positive[k]).count();
        pos_rank_sum += rank * tied_pos as f64;
        i = j;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// ROC-AUC of `p_pos` against the labels.
pub fn roc_auc(preds: &[Prediction]) -> Result<f64> {
    let scores: Vec<f64> = preds.iter().map(|p| p.p_pos).collect();
    let positive: Vec<bool> = preds.iter().map(|p| p.label.is_positive()).collect();
    roc_auc_scores(&scores, &positive)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Scores {
    pub pos: f64,
    pub neg: f64,
    pub micro: f64,
}

impl F1Scores {
    pub fn mean(&self) -> f64 {
        0.5 * (self.pos + self.neg)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    /// Positive prediction iff `p_pos ≥ threshold`.
    pub fn at(preds: &[Prediction], threshold: f64) -> Confusion {
        let mut c = Confusion::default();
        for p in preds {
            match (p.p_pos >= threshold, p.label.is_positive()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn f1(&self) -> F1Scores {
        // For the negative class, TN plays the role of TP and FP/FN swap.
        let pos = f1(self.tp, self.fp, self.fn_);
        let neg = f1(self.tn, self.fn_, self.fp);
        let micro = f1(self.tp + self.tn, self.fp + self.fn_, self.fn_ + self.fp);
        F1Scores { pos, neg, micro }
    }
}

/// `2TP / (2TP + FP + FN)`, 0 when the denominator is 0.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn f1_scores(preds: &[Prediction], decision_threshold: f64) -> Result<F1Scores> {
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("F1 of an empty prediction set".into()));
    }
    Ok(Confusion::at(preds, decision_threshold).f1())
}

/// The `p_pos` cut maximizing the mean of the two per-class F1 scores.
/// Candidates are the observed `p_pos` values; ties keep the lowest cut.
pub fn best_mean_f1_threshold(preds: &[Prediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("F1 of an empty prediction set".into()));
    }
    let mut order: Vec<&Prediction> = preds.iter().collect();
    order.sort_by(|a, b| b.p_pos.total_cmp(&a.p_pos));
    let n_pos = preds.iter().filter(|p| p.label.is_positive()).count();
    let n_neg = preds.len() - n_pos;
    // Sweep the cut downwards; everything before index i is predicted positive.
    let (mut tp, mut fp) = (0, 0);
    let mut best: Option<(f64, f64)> = None;
    let mut i = 0;
    while i < order.len() {
        let cut = order[i].p_pos;
        while i < order.len() && order[i].p_pos == cut {
            if order[i].label.is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let c = Confusion {
            tp,
            fp,
            fn_: n_pos - tp,
            tn: n_neg - fp,
        };
        let score = c.f1().mean();
        if best.is_none_or(|(s, _)| score >= s) {
            best = Some((score, cut));
        }
    }
    Ok(best.map(|(_, cut)| cut).unwrap_or(DEFAULT_DECISION_THRESHOLD))
}

fn by_uncertainty(a: &Prediction, b: &Prediction) -> Ordering {
    b.uncertainty.total_cmp(&a.uncertainty).then(a.id.cmp(&b.id))
}

/// `preds` sorted most-uncertain first.
pub fn rejection_order(preds: &[Prediction]) -> Vec<Prediction> {
    let mut v = preds.to_vec();
    v.sort_by(by_uncertainty);
    v
}

/// Number of samples withheld at rejection rate `rate` out of `n`.
pub fn rejected_count(rate: f64, n: usize) -> usize {
    // Guard against 0.1 * 30 = 3.0000000000000004 rounding up to 4.
    ((rate * n as f64) - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionPoint {
    pub rate: f64,
    /// Largest retained `û`; `None` when nothing is retained.
    pub threshold: Option<f64>,
    pub auc: Option<f64>,
    pub f1: Option<F1Scores>,
    pub retained: usize,
    pub rejected: usize,
    /// Flagged share among rejected over flagged share overall.
    pub enrichment: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionCurve {
    pub total: usize,
    pub decision_threshold: f64,
    pub points: Vec<RejectionPoint>,
}

fn flagged_fraction(preds: &[Prediction]) -> Option<f64> {
    if preds.is_empty() {
        return None;
    }
    let mut flagged = 0usize;
    for p in preds {
        flagged += usize::from(p.noise_flag?);
    }
    Some(flagged as f64 / preds.len() as f64)
}

/// Metrics on the retained set after withholding the `⌈r·n⌉` most uncertain
/// predictions, for each rate `r`. Points that retain fewer than two
/// predictions have no metrics; points retaining one class have no AUC.
pub fn rejection_curve(preds: &[Prediction], rates: &[f64], decision_threshold: f64) -> Result<RejectionCurve> {
    if preds.is_empty() {
        return Err(Error::Config("rejection curve of an empty prediction set".into()));
    }
    if let Some(bad) = rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::Config(format!("rejection rates must lie in [0, 1), got {bad}")));
    }
    if rates.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("rejection rates must be sorted ascending".into()));
    }
    let ordered = rejection_order(preds);
    let overall_flagged = flagged_fraction(&ordered);
    let n = ordered.len();
    let points = rates
        .iter()
        .map(|&rate| {
            let k = rejected_count(rate, n);
            let (rejected, retained) = ordered.split_at(k);
            let (auc, f1) = if retained.len() < 2 {
                (None, None)
            } else {
                (roc_auc(retained).ok(), Some(Confusion::at(retained, decision_threshold).f1()))
            };
            let enrichment = match (flagged_fraction(rejected), overall_flagged) {
                (Some(r), Some(all)) if all > 0.0 => Some(r / all),
                _ => None,
            };
            RejectionPoint {
                rate,
                threshold: retained.first().map(|p| p.uncertainty),
                auc,
                f1,
                retained: retained.len(),
                rejected: k,
                enrichment,
            }
        })
        .collect();
    Ok(RejectionCurve {
        total: n,
        decision_threshold,
        points,
    })
}

/// Formats a possibly undefined metric for CSV: `nan` when undefined.
fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| v.to_string())
}

pub fn rejection_csv(curve: &RejectionCurve) -> String {
    let mut out = format!("{REJECTION_CSV_HEADER}\n");
    for p in &curve.points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.rate,
            cell(p.threshold),
            cell(p.auc),
            cell(p.f1.map(|f| f.pos)),
            cell(p.f1.map(|f| f.neg)),
            cell(p.f1.map(|f| f.micro)),
            p.retained,
            cell(p.enrichment)
        );
    }
    out
}

pub fn predictions_csv(preds: &[Prediction]) -> String {
    let mut out = format!("{PREDICTIONS_CSV_HEADER}\n");
    for p in preds {
        let flag = p.noise_flag.map_or("", |f| if f { "1" } else { "0" });
        let _ = writeln!(out, "{},{},{},{},{}", p.id, p.p_pos, p.uncertainty, p.label.as_u8(), flag);
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrichmentReport {
    pub mean_u_clean: f64,
    pub mean_u_flagged: f64,
    pub flagged_fraction: f64,
    /// Flagged share within each consecutive 5% batch of the rejection
    /// order; `None` for batches too small to hold a sample.
    pub bins: Vec<Option<f64>>,
}

pub fn enrichment_report(preds: &[Prediction]) -> Result<EnrichmentReport> {
    let mut clean = (0.0, 0usize);
    let mut flagged = (0.0, 0usize);
    for p in preds {
        let group = match p.noise_flag {
            Some(true) => &mut flagged,
            Some(false) => &mut clean,
            None => return Err(Error::Unsupported("enrichment analysis needs noise flags on every sample".into())),
        };
        group.0 += p.uncertainty;
        group.1 += 1;
    }
    if clean.1 == 0 || flagged.1 == 0 {
        return Err(Error::Unsupported(format!(
            "enrichment analysis needs both groups ({} clean, {} flagged)",
            clean.1, flagged.1
        )));
    }
    let ordered = rejection_order(preds);
    let n = ordered.len();
    let n_bins = (1.0 / ENRICHMENT_BIN).round() as usize;
    let bins = (0..n_bins)
        .map(|b| {
            let lo = rejected_count(b as f64 * ENRICHMENT_BIN, n);
            let hi = rejected_count((b + 1) as f64 * ENRICHMENT_BIN, n).min(n);
            flagged_fraction(&ordered[lo..hi.max(lo)])
        })
        .collect();
    Ok(EnrichmentReport {
        mean_u_clean: clean.0 / clean.1 as f64,
        mean_u_flagged: flagged.0 / flagged.1 as f64,
        flagged_fraction: flagged.1 as f64 / n as f64,
        bins,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub auc: Option<f64>,
    pub f1: F1Scores,
}

pub fn metrics(preds: &[Prediction], decision_threshold: f64) -> Result<Metrics> {
    Ok(Metrics {
        auc: roc_auc(preds).ok(),
        f1: f1_scores(preds, decision_threshold)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapRound {
    pub fraction: f64,
    /// Removed training ids, most uncertain first.
    pub removed_ids: Vec<u64>,
    pub train_size: usize,
    pub test: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapReport {
    pub baseline: BootstrapRound,
    pub rounds: Vec<BootstrapRound>,
    /// Round-0 eval-mode uncertainty per training id, in training order.
    pub train_uncertainty: Vec<(u64, f64)>,
}

/// Trains on all of `train`, ranks the training samples by the resulting
/// model's `û`, then for each fraction `f` retrains from scratch (same
/// config and seed) without the `⌈f·N⌉` most uncertain ones. A fraction
/// that removes nothing reuses the baseline model.
pub fn bootstrap(
    train_set: &[LabeledSample],
    val: &[LabeledSample],
    test: &[LabeledSample],
    cfg: &TrainConfig,
    fractions: &[f64],
    decision_threshold: f64,
) -> Result<BootstrapReport> {
    if let Some(bad) = fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(Error::Config(format!("bootstrap fractions must lie in [0, 1), got {bad}")));
    }
    if fractions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("bootstrap fractions must be strictly increasing".into()));
    }
    if test.is_empty() {
        return Err(Error::Config("bootstrap needs a non-empty test set".into()));
    }
    let base_model = train(train_set, val, cfg)?;
    let train_preds = predict(&base_model, train_set)?;
    let ranked = rejection_order(&train_preds);
    let n = train_set.len();

    let score = |model: &TrainedModel| -> Result<Metrics> { metrics(&predict(model, test)?, decision_threshold) };
    let baseline_metrics = score(&base_model)?;
    let baseline = BootstrapRound {
        fraction: 0.0,
        removed_ids: Vec::new(),
        train_size: n,
        test: baseline_metrics.clone(),
    };

    let mut rounds = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let k = rejected_count(fraction, n);
        let removed_ids: Vec<u64> = ranked[..k].iter().map(|p| p.id).collect();
        if k >= n {
            return Err(Error::Config(format!("fraction {fraction} leaves no training samples")));
        }
        let test_metrics = if k == 0 {
            baseline_metrics.clone()
        } else {
            let drop: HashSet<u64> = removed_ids.iter().copied().collect();
            let kept: Vec<LabeledSample> = train_set.iter().filter(|s| !drop.contains(&s.id)).cloned().collect();
            score(&train(&kept, val, cfg)?)?
        };
        rounds.push(BootstrapRound {
            fraction,
            removed_ids,
            train_size: n - k,
            test: test_metrics,
        });
    }
    Ok(BootstrapReport {
        baseline,
        rounds,
        train_uncertainty: train_preds.iter().map(|p| (p.id, p.uncertainty)).collect(),
    })
}

pub fn bootstrap_csv(report: &BootstrapReport) -> String {
    let mut out = format!("{BOOTSTRAP_CSV_HEADER}\n");
    let rows = std::iter::once(&report.baseline).chain(&report.rounds);
    for (i, r) in rows.enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{},{}",
            r.fraction,
            r.removed_ids.len(),
            r.train_size,
            cell(r.test.auc),
            r.test.f1.pos,
            r.test.f1.neg,
            r.test.f1.micro
        );
    }
    out
}
