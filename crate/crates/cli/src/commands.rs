use std::path::{Path, PathBuf};

use clic_core::finetune::{
    embed_images, few_shot_csv, few_shot_curve_embedded, finetune_embeddings, ClicModel, EvalReport,
    EvalRow, FinetuneConfig, RegressionHead,
};
use clic_core::fusion::{fuse, FeatureMap};
use clic_core::heuristics::Scorer;
use clic_core::icd::{fit_normal, histogram, resolve_scorer, score_dataset, stratify, ScoredManifest};
use clic_core::imagecore::{load_image, Image};
use clic_core::manifest::Manifest;
use clic_core::moco::{
    self, similarity_report, KeyView, QueueInit, TrainConfig, CHECKPOINT_FILE, CHECKPOINT_META_FILE,
};
use clic_core::nn::{load_encoder, save_encoder, EncoderParams};
use clic_core::rcm::expand_dataset;
use clic_core::{par, synth, Error};
use serde::Serialize;
use serde_json::{json, Value};

use crate::{
    Cli, Command, EvalArgs, ExpandArgs, FewshotArgs, FinetuneArgs, FuseArgs, HeadArgs, IcdArgs,
    KeyViewArg, QueueInitArg, ScoreArgs, ScorerArgs, StratifyArgs, SynthArgs, TrainArgs,
};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::UnknownScorer { .. }
            | Error::InvalidC(_)
            | Error::BadThresholds { .. }
            | Error::InvalidConfig(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Entries that could not be used, with the reason.
type Failures = Vec<(PathBuf, String)>;

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => synth_cmd(cli.seed, a),
        Command::Score(a) => score_cmd(cli.seed, a),
        Command::Expand(a) => expand_cmd(cli.seed, a),
        Command::Train(a) => train_cmd(cli.seed, a),
        Command::Finetune(a) => finetune_cmd(cli.seed, a),
        Command::Eval(a) => eval_cmd(cli.seed, a),
        Command::Icd(a) => icd_cmd(cli.seed, a),
        Command::Stratify(a) => stratify_cmd(cli.seed, a),
        Command::Fewshot(a) => fewshot_cmd(cli.seed, a),
        Command::FuseDemo(a) => fuse_cmd(cli.seed, a),
    }
}

/// The `config` block every report carries: the parsed arguments plus the
/// seed.
fn config_echo(command: &str, seed: u64, args: &impl Serialize) -> Value {
    let mut v = serde_json::to_value(args).expect("arguments serialize");
    if let Value::Object(m) = &mut v {
        m.insert("command".into(), json!(command));
        m.insert("seed".into(), json!(seed));
    }
    v
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => create_dir(parent),
        None => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    write_text(path, &text)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn load_manifest(path: &Path) -> CliResult<Manifest> {
    Manifest::load(path).map_err(|e| CliError::usage(format!("cannot read manifest: {e}")))
}

fn load_head(path: &Path) -> CliResult<RegressionHead> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(Error::from)?;
    let head = v.get("head").cloned().unwrap_or(v);
    serde_json::from_value(head).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn load_model(args: &ScorerArgs) -> CliResult<Option<ClicModel>> {
    match (&args.encoder, &args.head) {
        (Some(enc), Some(head)) => Ok(Some(ClicModel {
            encoder: load_encoder(enc)?,
            head: load_head(head)?,
        })),
        (None, None) => Ok(None),
        _ => Err(CliError::usage("--encoder and --head must be given together")),
    }
}

fn build_scorer(name: &str, args: &ScorerArgs) -> CliResult<Box<dyn Scorer>> {
    // Resolve the name before touching any model files so a typo is
    // reported as a usage error.
    if name != "clic" {
        return Ok(resolve_scorer(name, None)?);
    }
    Ok(resolve_scorer(name, load_model(args)?)?)
}

fn failures_json(failures: &[(PathBuf, String)]) -> Value {
    failures
        .iter()
        .map(|(p, m)| json!({"path": p, "error": m}))
        .collect()
}

/// Loads every image, skipping (and reporting) ones that fail to decode.
fn load_images(manifest: &Manifest) -> (Vec<(usize, Image)>, Failures) {
    let loaded = par::map(&manifest.entries, |e| load_image(&e.path));
    let mut images = Vec::new();
    let mut failures = Vec::new();
    for (i, (e, r)) in manifest.entries.iter().zip(loaded).enumerate() {
        match r {
            Ok(img) => images.push((i, img)),
            Err(err) => {
                log::warn!("skipping {}: {err}", e.path.display());
                failures.push((e.path.clone(), err.to_string()));
            }
        }
    }
    (images, failures)
}

fn require_labels(manifest: &Manifest) -> CliResult<Vec<f64>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            e.score
                .ok_or_else(|| CliError::usage(format!("{} has no score label", e.path.display())))
        })
        .collect()
}

fn head_config(h: &HeadArgs, seed: u64) -> FinetuneConfig {
    FinetuneConfig {
        batch_size: h.batch_size,
        lr: h.lr,
        momentum: h.momentum,
        weight_decay: h.weight_decay,
        epochs: h.epochs,
        seed,
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn synth_cmd(seed: u64, a: &SynthArgs) -> CliResult<()> {
    let manifest = synth::write_corpus(&a.out_dir, a.count, a.size, seed)?;
    let labels: Vec<f64> = manifest.entries.iter().filter_map(|e| e.score).collect();
    write_json(
        &a.out_dir.join("synth.json"),
        &json!({
            "config": config_echo("synth", seed, a),
            "count": manifest.len(),
            "mean_label": mean(&labels),
        }),
    )?;
    println!("wrote {} images to {}", manifest.len(), a.out_dir.display());
    Ok(())
}

fn score_cmd(seed: u64, a: &ScoreArgs) -> CliResult<()> {
    let name = a
        .scorer
        .scorer
        .as_deref()
        .ok_or_else(|| CliError::usage("--scorer is required"))?;
    let manifest = load_manifest(&a.manifest)?;
    let scorer = build_scorer(name, &a.scorer)?;
    let scored = score_dataset(&manifest, scorer.as_ref());
    ensure_parent(&a.out)?;
    scored.save(&a.out)?;
    let scores = scored.scores();
    let summary = json!({
        "config": config_echo("score", seed, a),
        "scorer": name,
        "n": scored.len(),
        "failed": scored.failures.len(),
        "failures": failures_json(&scored.failures),
        "mean": mean(&scores),
        "fit": fit_normal(&scores).ok(),
    });
    write_json(&a.out.with_extension("summary.json"), &summary)?;
    println!("scored {} images ({} failed)", scored.len(), scored.failures.len());
    Ok(())
}

fn format_factor(f: f64) -> String {
    if f.fract() == 0.0 {
        format!("{f}x")
    } else {
        format!("{f:.2}x")
    }
}

fn expand_cmd(seed: u64, a: &ExpandArgs) -> CliResult<()> {
    if a.c < 2 {
        return Err(Error::InvalidC(a.c).into());
    }
    let manifest = load_manifest(&a.manifest)?;
    let exp = expand_dataset(&manifest, a.c, seed, &a.out_dir, a.keep_originals)?;
    exp.manifest.save(&a.out_dir.join("manifest.jsonl"))?;
    let generated_factor = if exp.sources == 0 {
        0.0
    } else {
        exp.generated as f64 / exp.sources as f64
    };
    let line = if a.keep_originals {
        format!(
            "{} ({} generated + originals)",
            format_factor(exp.factor()),
            format_factor(generated_factor)
        )
    } else {
        format_factor(exp.factor())
    };
    write_json(
        &a.out_dir.join("expand.json"),
        &json!({
            "config": config_echo("expand", seed, a),
            "sources": exp.sources,
            "generated": exp.generated,
            "output_entries": exp.manifest.len(),
            "factor": exp.factor(),
            "generated_factor": generated_factor,
            "failures": failures_json(&exp.failures),
        }),
    )?;
    println!("{line}");
    Ok(())
}

fn train_config(a: &TrainArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: a.batch_size,
        lr: a.lr,
        epochs: a.epochs,
        lr_drop_points: a.lr_drop_points.clone(),
        lr_drop_factor: a.lr_drop_factor,
        momentum_m: a.momentum_m,
        temperature: a.temperature,
        queue_size: a.queue_size,
        c: a.c,
        sgd_momentum: a.sgd_momentum,
        weight_decay: a.weight_decay,
        key_view: match a.key_view {
            KeyViewArg::Full => KeyView::Full,
            KeyViewArg::Rcm => KeyView::Rcm,
        },
        queue_init: match a.queue_init {
            QueueInitArg::Random => QueueInit::Random,
            QueueInitArg::Keys => QueueInit::Keys,
        },
        seed,
    }
}

fn train_cmd(seed: u64, a: &TrainArgs) -> CliResult<()> {
    let config = train_config(a, seed);
    config.validate()?;
    if a.c < 2 {
        return Err(Error::InvalidC(a.c).into());
    }
    let manifest = load_manifest(&a.manifest)?;
    let (loaded, failures) = load_images(&manifest);
    let images: Vec<Image> = loaded.into_iter().map(|(_, i)| i).collect();
    create_dir(&a.out_dir)?;
    if !a.resume {
        for f in [CHECKPOINT_FILE, CHECKPOINT_META_FILE] {
            let p = a.out_dir.join(f);
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let outcome = moco::train(&config, &images, Some(&a.out_dir))?;
    let encoder_path = a.out_dir.join("encoder.clic");
    save_encoder(&encoder_path, &outcome.params)?;
    let sim = similarity_report(&outcome.state, &images, &config)?;
    write_json(
        &a.out_dir.join("train.json"),
        &json!({
            "config": config_echo("train", seed, a),
            "images": images.len(),
            "failures": failures_json(&failures),
            "steps": outcome.state.step,
            "loss_history": outcome.loss_history,
            "similarity": sim,
        }),
    )?;
    println!(
        "trained {} epochs; final loss {:.4}",
        outcome.loss_history.len(),
        outcome.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Embeds the decodable labeled entries.
fn labeled_embeddings(
    manifest: &Manifest,
    encoder: &EncoderParams,
) -> CliResult<(Vec<clic_core::nn::Embedding>, Vec<f64>, Failures)> {
    let labels = require_labels(manifest)?;
    let (loaded, failures) = load_images(manifest);
    let ys: Vec<f64> = loaded.iter().map(|(i, _)| labels[*i]).collect();
    let images: Vec<Image> = loaded.into_iter().map(|(_, img)| img).collect();
    Ok((embed_images(encoder, &images)?, ys, failures))
}

fn finetune_cmd(seed: u64, a: &FinetuneArgs) -> CliResult<()> {
    let cfg = head_config(&a.head, seed);
    cfg.validate()?;
    let manifest = load_manifest(&a.manifest)?;
    let encoder = load_encoder(&a.encoder)?;
    let (emb, labels, failures) = labeled_embeddings(&manifest, &encoder)?;
    let head = finetune_embeddings(&emb, &labels, &cfg)?;
    let mse = emb
        .iter()
        .zip(&labels)
        .map(|(e, y)| (head.predict(e) - y).powi(2))
        .sum::<f64>()
        / emb.len().max(1) as f64;
    write_json(
        &a.out,
        &json!({
            "config": config_echo("finetune", seed, a),
            "n": emb.len(),
            "failures": failures_json(&failures),
            "train_mse": mse,
            "head": head,
        }),
    )?;
    println!("fitted head on {} images; train mse {mse:.5}", emb.len());
    Ok(())
}

fn eval_cmd(seed: u64, a: &EvalArgs) -> CliResult<()> {
    let name = a.scorer.scorer.as_deref().unwrap_or("clic");
    let manifest = load_manifest(&a.manifest)?;
    let labels = require_labels(&manifest)?;
    let scorer = build_scorer(name, &a.scorer)?;
    let scored = score_dataset(&manifest, scorer.as_ref());
    let mut rows = Vec::with_capacity(scored.len());
    let mut li = 0;
    for (i, e) in manifest.entries.iter().enumerate() {
        if scored.entries.get(li).map(|s| &s.path) == Some(&e.path) {
            rows.push(EvalRow {
                id: e.label(),
                prediction: scored.entries[li].score,
                label: labels[i],
            });
            li += 1;
        }
    }
    let report = EvalReport::from_rows(name, rows)?;
    let mut v = serde_json::to_value(&report).expect("report serializes");
    if let Value::Object(m) = &mut v {
        m.insert("config".into(), config_echo("eval", seed, a));
        m.insert("failures".into(), failures_json(&scored.failures));
    }
    write_json(&a.out, &v)?;
    println!("n={} pcc={:.4} srcc={:.4}", report.n, report.pcc, report.srcc);
    Ok(())
}

/// Scores with the requested scorer, or takes the manifest's own scores.
fn scored_input(manifest: &Manifest, args: &ScorerArgs) -> CliResult<ScoredManifest> {
    match args.scorer.as_deref() {
        Some(name) => Ok(score_dataset(manifest, build_scorer(name, args)?.as_ref())),
        None => ScoredManifest::from_manifest(manifest, "manifest").map_err(|e| {
            CliError::usage(format!("{e}; pass --scorer or use a scored manifest"))
        }),
    }
}

fn icd_cmd(seed: u64, a: &IcdArgs) -> CliResult<()> {
    if a.bins == 0 {
        return Err(CliError::usage("--bins must be at least 1"));
    }
    let manifest = load_manifest(&a.manifest)?;
    let scored = scored_input(&manifest, &a.scorer)?;
    create_dir(&a.out_dir)?;
    if a.scorer.scorer.is_some() {
        scored.save(&a.out_dir.join("scores.jsonl"))?;
    }
    let scores = scored.scores();
    let hist = histogram(&scores, a.bins)?;
    write_text(&a.out_dir.join("histogram.csv"), &hist.to_csv())?;
    write_text(
        &a.out_dir.join("histogram.svg"),
        &hist.to_svg("Image complexity distribution"),
    )?;
    let fit = fit_normal(&scores).ok();
    write_json(
        &a.out_dir.join("icd.json"),
        &json!({
            "config": config_echo("icd", seed, a),
            "n": scored.len(),
            "failures": failures_json(&scored.failures),
            "fit": fit,
            "mode": hist.mode().map(|(l, r)| json!({"bin_left": l, "bin_right": r})),
            "histogram": hist,
        }),
    )?;
    match fit {
        Some(f) => println!("n={} mu={:.4} sigma={:.4} ks={:.4}", f.n, f.mu, f.sigma, f.ks),
        None => println!("n={} (too few scores for a fit)", scored.len()),
    }
    Ok(())
}

fn stratify_cmd(seed: u64, a: &StratifyArgs) -> CliResult<()> {
    // Reject bad thresholds before a possibly slow scoring pass.
    if a.lo.is_nan() || a.hi.is_nan() || a.lo >= a.hi {
        return Err(Error::BadThresholds { lo: a.lo, hi: a.hi }.into());
    }
    let manifest = load_manifest(&a.manifest)?;
    let scored = scored_input(&manifest, &a.scorer)?;
    let strata = stratify(&scored, a.lo, a.hi)?;
    create_dir(&a.out_dir)?;
    for (name, part) in [("low", &strata.low), ("mid", &strata.mid), ("high", &strata.high)] {
        part.save(&a.out_dir.join(format!("{name}.jsonl")))?;
    }
    write_json(
        &a.out_dir.join("stratify.json"),
        &json!({
            "config": config_echo("stratify", seed, a),
            "n": scored.len(),
            "low": strata.low.len(),
            "mid": strata.mid.len(),
            "high": strata.high.len(),
            "failures": failures_json(&scored.failures),
        }),
    )?;
    println!(
        "low={} mid={} high={}",
        strata.low.len(),
        strata.mid.len(),
        strata.high.len()
    );
    Ok(())
}

fn fewshot_cmd(seed: u64, a: &FewshotArgs) -> CliResult<()> {
    let cfg = head_config(&a.head, seed);
    cfg.validate()?;
    if a.ns.is_empty() || a.ns.windows(2).any(|w| w[0] > w[1]) {
        return Err(CliError::usage("--ns must be a non-empty ascending list"));
    }
    let manifest = load_manifest(&a.manifest)?;
    let encoder = load_encoder(&a.encoder)?;
    let (emb, labels, failures) = labeled_embeddings(&manifest, &encoder)?;
    let rows = few_shot_curve_embedded(&emb, &labels, &a.ns, a.eval_size, &cfg)?;
    create_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("fewshot.csv"), &few_shot_csv(&rows))?;
    write_json(
        &a.out_dir.join("fewshot.json"),
        &json!({
            "config": config_echo("fewshot", seed, a),
            "pool": emb.len(),
            "failures": failures_json(&failures),
            "rows": rows,
        }),
    )?;
    for r in &rows {
        println!("n={} pcc={:.4} srcc={:.4}", r.n, r.pcc, r.srcc);
    }
    Ok(())
}

fn fuse_cmd(seed: u64, a: &FuseArgs) -> CliResult<()> {
    let task = FeatureMap::load(&a.task)?;
    let ic = FeatureMap::load(&a.ic)?;
    let out = fuse(&task, &ic, a.weight)?;
    ensure_parent(&a.out)?;
    out.save(&a.out)?;
    write_json(
        &a.out.with_extension("json"),
        &json!({
            "config": config_echo("fuse-demo", seed, a),
            "task_shape": [task.channels(), task.height(), task.width()],
            "ic_shape": [ic.channels(), ic.height(), ic.width()],
            "out_shape": [out.channels(), out.height(), out.width()],
        }),
    )?;
    println!(
        "fused {}x{}x{} map",
        out.channels(),
        out.height(),
        out.width()
    );
    Ok(())
}
