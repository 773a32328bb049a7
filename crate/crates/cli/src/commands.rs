use std::path::Path;

use evdl_core::data::{
    generate_synthetic, inject_noise, inject_noise_asymmetric, read_csv, split, write_csv, Dataset, LabeledSample,
};
use evdl_core::eval::{
    best_mean_f1_threshold, bootstrap, bootstrap_csv, enrichment_report, metrics, predict, predictions_csv,
    rejection_csv, rejection_curve, write_text, Prediction,
};
use evdl_core::evidential::LambdaSchedule;
use evdl_core::net::{gradient_check, meta_path, load_model, save_model, train, EvidenceModel, Network, TrainConfig, TrainedModel};
use evdl_core::sampling::{ensemble_train, load_ensemble, save_ensemble, EnsembleModel, McDropout};
use evdl_core::{Error, Result};
use serde_json::json;

use crate::args::{
    BootstrapArgs, Cli, Command, EvalArgs, GradcheckArgs, InferenceFlags, RejectArgs, SynthArgs, TrainArgs, TrainFlags,
};
use crate::manifest::RunManifest;

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

pub enum Outcome {
    Success,
    /// The command ran but its check did not hold (gradcheck).
    CheckFailed,
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let mut manifest = RunManifest::new(cli.command.name());
    if let Some(cfg) = &cli.config {
        manifest.input(cfg)?;
    }
    let outcome = match &cli.command {
        Command::Synth(a) => synth(a, &mut manifest)?,
        Command::Train(a) => train_cmd(a, &mut manifest)?,
        Command::Eval(a) => eval_cmd(a, &mut manifest)?,
        Command::Reject(a) => reject_cmd(a, &mut manifest)?,
        Command::Bootstrap(a) => bootstrap_cmd(a, &mut manifest)?,
        Command::Gradcheck(a) => gradcheck_cmd(a, &mut manifest)?,
    };
    // gradcheck without --out has no output to sit next to.
    if matches!(outcome, Outcome::Success) && manifest.has_outputs() {
        let path = manifest.write()?;
        eprintln!("manifest {}", path.display());
    }
    Ok(outcome)
}

fn synth(a: &SynthArgs, m: &mut RunManifest) -> Result<Outcome> {
    let clean = generate_synthetic(a.n as usize, a.overlap, a.dim as usize, a.positive_fraction, a.seed)?;
    let ds = match (a.noise_pos, a.noise_neg) {
        (Some(rp), Some(rn)) => inject_noise_asymmetric(&clean, rp, rn, a.seed)?,
        _ => inject_noise(&clean, a.noise, a.seed)?,
    };
    write_csv(&ds, &a.out)?;
    let flipped = ds.samples.iter().filter(|s| s.noise_flag == Some(true)).count();
    say!("samples {}", ds.len());
    say!("dim {}", ds.dim);
    say!("positives {}", ds.positives());
    say!("flipped {flipped}");
    m.config("n", a.n)
        .config("overlap", a.overlap)
        .config("noise", a.noise)
        .config("noise_pos", a.noise_pos)
        .config("noise_neg", a.noise_neg)
        .config("dim", a.dim)
        .config("positive_fraction", a.positive_fraction)
        .seed("seed", a.seed)
        .output(&a.out);
    Ok(Outcome::Success)
}

fn train_config(f: &TrainFlags) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        learning_rate: f.lr,
        batch_size: f.batch as usize,
        max_epochs: f.epochs as usize,
        patience: f.patience as usize,
        schedule: LambdaSchedule {
            initial: f.lambda[0],
            decay_points: [f.lambda_points[0], f.lambda_points[1]],
            decayed_values: [f.lambda[1], f.lambda[2]],
        },
        dropout: f.dropout,
        seed: f.seed,
        hidden: f.hidden.clone(),
        momentum: f.momentum,
        activation: f.activation,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn record_train_config(m: &mut RunManifest, f: &TrainFlags, cfg: &TrainConfig) {
    m.config("learning_rate", cfg.learning_rate)
        .config("batch_size", cfg.batch_size)
        .config("max_epochs", cfg.max_epochs)
        .config("patience", cfg.patience)
        .config("lambda", f.lambda.clone())
        .config("lambda_points", f.lambda_points.clone())
        .config("dropout", cfg.dropout)
        .config("momentum", cfg.momentum)
        .config("hidden", cfg.hidden.clone())
        .config("activation", cfg.activation.to_string())
        .config("val_frac", if f.val.is_some() { None } else { Some(f.val_frac) })
        .seed("seed", cfg.seed);
}

/// Training and validation samples per `--val` / `--val-frac`.
fn train_val(data: &Path, f: &TrainFlags, m: &mut RunManifest) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    let ds = read_csv(data)?;
    m.input(data)?;
    if let Some(val_path) = &f.val {
        let val = read_csv(val_path)?;
        m.input(val_path)?;
        check_dim(ds.dim, &val)?;
        return Ok((ds.samples, val.samples));
    }
    if f.val_frac == 0.0 {
        return Ok((ds.samples, Vec::new()));
    }
    let (tr, va, _) = split(&ds, 1.0 - f.val_frac, f.val_frac, f.seed)?;
    Ok((tr.samples, va.samples))
}

fn check_dim(expected: usize, ds: &Dataset) -> Result<()> {
    if ds.dim == expected {
        Ok(())
    } else {
        Err(Error::Shape {
            expected,
            got: ds.dim,
        })
    }
}

fn print_history(model: &TrainedModel) {
    for h in &model.history {
        let val = h.val_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        say!(
            "epoch {} lambda {} train_loss {:.6} val_loss {val}",
            h.epoch, h.lambda, h.train_loss
        );
    }
    say!("best_epoch {}", model.best_epoch);
}

fn train_cmd(a: &TrainArgs, m: &mut RunManifest) -> Result<Outcome> {
    let cfg = train_config(&a.train)?;
    let (tr, va) = train_val(&a.data, &a.train, m)?;
    say!("train_samples {}", tr.len());
    say!("val_samples {}", va.len());
    record_train_config(m, &a.train, &cfg);
    match a.ensemble {
        None => {
            let model = train(&tr, &va, &cfg)?;
            print_history(&model);
            save_model(&model, &a.out)?;
        }
        Some(members) => {
            let ens = ensemble_train(&tr, &va, &cfg, members as usize, a.subset, cfg.seed)?;
            for (member, seed) in ens.members().iter().zip(ens.seeds()) {
                say!(
                    "member seed {seed} epochs {} best_epoch {}",
                    member.history.len(),
                    member.best_epoch
                );
            }
            save_ensemble(&ens, &a.out)?;
            m.config("ensemble", members).config("subset", a.subset);
        }
    }
    m.output(&a.out);
    Ok(Outcome::Success)
}

enum Loaded {
    Single(TrainedModel),
    Ensemble(EnsembleModel),
}

impl Loaded {
    fn open(path: &Path) -> Result<Loaded> {
        if path.is_dir() {
            load_ensemble(path).map(Loaded::Ensemble)
        } else {
            load_model(path).map(Loaded::Single)
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            Loaded::Single(t) => t.input_dim(),
            Loaded::Ensemble(e) => e.input_dim(),
        }
    }
}

/// Loads model and data, checks shapes and produces predictions plus the
/// decision threshold in force.
fn infer(f: &InferenceFlags, m: &mut RunManifest) -> Result<(Dataset, Vec<Prediction>, f64)> {
    let model = Loaded::open(&f.model)?;
    m.input(&f.model)?;
    if let Loaded::Single(_) = model {
        m.input(&meta_path(&f.model))?;
    }
    let ds = read_csv(&f.data)?;
    m.input(&f.data)?;
    check_dim(model.input_dim(), &ds)?;
    let preds = match (&model, f.mc_passes) {
        (Loaded::Single(t), None) => predict(t, &ds.samples)?,
        (Loaded::Ensemble(e), None) => predict(e, &ds.samples)?,
        (Loaded::Single(t), Some(passes)) => {
            let mc = McDropout {
                network: &t.network,
                passes: passes as usize,
                seed: f.seed,
            };
            predict(&mc, &ds.samples)?
        }
        (Loaded::Ensemble(_), Some(_)) => {
            return Err(Error::Unsupported("--mc-passes applies to single models, not ensembles".into()))
        }
    };
    let threshold = if f.best_threshold {
        best_mean_f1_threshold(&preds)?
    } else {
        f.threshold
    };
    m.config("mc_passes", f.mc_passes)
        .config("threshold", threshold)
        .config("best_threshold", f.best_threshold)
        .seed("seed", f.seed);
    Ok((ds, preds, threshold))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

fn eval_cmd(a: &EvalArgs, m: &mut RunManifest) -> Result<Outcome> {
    let (_, preds, threshold) = infer(&a.inference, m)?;
    write_text(&a.out, &predictions_csv(&preds))?;
    let met = metrics(&preds, threshold)?;
    let mean_u = preds.iter().map(|p| p.uncertainty).sum::<f64>() / preds.len() as f64;
    say!("samples {}", preds.len());
    say!("threshold {threshold}");
    say!("auc {}", fmt_opt(met.auc));
    say!("f1_pos {:.6}", met.f1.pos);
    say!("f1_neg {:.6}", met.f1.neg);
    say!("micro_f1 {:.6}", met.f1.micro);
    say!("mean_uncertainty {mean_u:.6}");
    if let Ok(r) = enrichment_report(&preds) {
        say!("mean_uncertainty_clean {:.6}", r.mean_u_clean);
        say!("mean_uncertainty_flagged {:.6}", r.mean_u_flagged);
    }
    m.output(&a.out);
    Ok(Outcome::Success)
}

fn reject_cmd(a: &RejectArgs, m: &mut RunManifest) -> Result<Outcome> {
    let (_, preds, threshold) = infer(&a.inference, m)?;
    let curve = rejection_curve(&preds, &a.rates, threshold)?;
    write_text(&a.out, &rejection_csv(&curve))?;
    for p in &curve.points {
        say!(
            "rate {:.2} retained {} threshold {} auc {} micro_f1 {} enrichment {}",
            p.rate,
            p.retained,
            fmt_opt(p.threshold),
            fmt_opt(p.auc),
            fmt_opt(p.f1.map(|f| f.micro)),
            fmt_opt(p.enrichment)
        );
    }
    m.config("rates", a.rates.clone()).output(&a.out);
    Ok(Outcome::Success)
}

fn bootstrap_cmd(a: &BootstrapArgs, m: &mut RunManifest) -> Result<Outcome> {
    let cfg = train_config(&a.train)?;
    let (tr, va) = train_val(&a.data, &a.train, m)?;
    let test = read_csv(&a.test)?;
    m.input(&a.test)?;
    check_dim(tr[0].features.len(), &test)?;
    record_train_config(m, &a.train, &cfg);
    let report = bootstrap(&tr, &va, &test.samples, &cfg, &a.fractions, a.threshold)?;
    write_text(&a.out, &bootstrap_csv(&report))?;

    let mut removed = String::from("fraction,rank,id\n");
    for r in &report.rounds {
        for (rank, id) in r.removed_ids.iter().enumerate() {
            removed.push_str(&format!("{},{rank},{id}\n", r.fraction));
        }
    }
    let mut removed_path = a.out.as_os_str().to_owned();
    removed_path.push(".removed.csv");
    let removed_path = std::path::PathBuf::from(removed_path);
    write_text(&removed_path, &removed)?;

    for r in std::iter::once(&report.baseline).chain(&report.rounds) {
        say!(
            "fraction {:.2} train_size {} auc {} f1_pos {:.6} f1_neg {:.6} micro_f1 {:.6}",
            r.fraction,
            r.train_size,
            fmt_opt(r.test.auc),
            r.test.f1.pos,
            r.test.f1.neg,
            r.test.f1.micro
        );
    }
    m.config("fractions", a.fractions.clone())
        .config("threshold", a.threshold)
        .output(&a.out)
        .output(&removed_path);
    Ok(Outcome::Success)
}

fn gradcheck_cmd(a: &GradcheckArgs, m: &mut RunManifest) -> Result<Outcome> {
    let dim = a.dim as usize;
    let net = Network::init_random(dim, &a.hidden, a.dropout, a.activation, a.seed)?;
    let ds = generate_synthetic(a.n as usize, 0.3, dim, 0.5, a.seed)?;
    let batch: Vec<&LabeledSample> = ds.samples.iter().collect();
    let err = gradient_check(&net, &batch, a.lambda, a.seed, a.step)?;
    let pass = err <= a.tolerance;
    say!("parameters {}", net.param_count());
    say!("max_relative_error {err:e}");
    say!("tolerance {:e}", a.tolerance);
    say!("{}", if pass { "PASS" } else { "FAIL" });
    if let Some(out) = &a.out {
        write_text(out, &format!("{}\n", json!({"max_relative_error": err, "pass": pass})))?;
        m.output(out);
    }
    m.config("dim", dim)
        .config("hidden", a.hidden.clone())
        .config("n", a.n)
        .config("dropout", a.dropout)
        .config("lambda", a.lambda)
        .config("activation", a.activation.to_string())
        .config("step", a.step)
        .config("tolerance", a.tolerance)
        .seed("seed", a.seed);
    Ok(if pass { Outcome::Success } else { Outcome::CheckFailed })
}
