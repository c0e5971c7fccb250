//! The `enki` command line: generate, train, reconstruct, eval and sweep.
//!
//! Every command writes a `manifest.json` next to its outputs recording the
//! arguments, the fully resolved configuration, seeds and SHA-256 hashes of
//! inputs and outputs. Relative output paths are placed under
//! `$ENKI_OUTPUT_ROOT` when it is set.
//!
//! Training configuration resolves in layers: library defaults, then the
//! named preset, then a JSON config file, then individual flags.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format error, 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::data::{generate_cutouts, read_stack, write_stack, Cutout, FieldSpec, VALIDATION_ID_OFFSET};
use crate::error::{EnkiError, Result};
use crate::evaluation::{evaluate, render_gallery, render_position_map, EvalItem, EvalOptions, EvalReport};
use crate::model::{MaskedAutoencoder, ModelConfig};
use crate::pipeline::{batch_reconstruct, read_masks, write_masks, write_rows, BatchReconstruction};
use crate::training::{load_checkpoint, save_checkpoint, Checkpoint, TrainConfig, Trainer};

pub const OUTPUT_ROOT_VAR: &str = "ENKI_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "enki", version, about = "Masked-autoencoder reconstruction of SST cutouts")]
pub struct Cli {
    /// Single-threaded, timestamp-free run whose outputs and manifest are
    /// bit-identical across repeats.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,

    /// Arguments as given, recorded in the manifest.
    #[arg(skip)]
    pub argv: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a stack of cutouts.
    Generate(GenerateArgs),
    /// Train a model on a stack.
    Train(TrainArgs),
    /// Mask and reconstruct every cutout of a stack.
    Reconstruct(ReconstructArgs),
    /// Score reconstructions against their originals.
    Eval(EvalArgs),
    /// Reconstruct and score a validation stack for every (t, p) pair.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Field spec as JSON; omitted fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 4096)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Validation ids come from a range disjoint from training ids.
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Preset {
    Desk,
    #[value(name = "full-t10")]
    FullT10,
    #[value(name = "full-t35")]
    FullT35,
    #[value(name = "full-t50")]
    FullT50,
    #[value(name = "full-t75")]
    FullT75,
}

impl Preset {
    pub fn configs(self) -> (ModelConfig, TrainConfig) {
        match self {
            Preset::Desk => (ModelConfig::desk(), TrainConfig::desk(30.0)),
            Preset::FullT10 => (ModelConfig::full(), TrainConfig::full(10.0)),
            Preset::FullT35 => (ModelConfig::full(), TrainConfig::full(35.0)),
            Preset::FullT50 => (ModelConfig::full(), TrainConfig::full(50.0)),
            Preset::FullT75 => (ModelConfig::full(), TrainConfig::full(75.0)),
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for the checkpoint, loss log and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub micro_batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Train on only the first this many cutouts.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Masking ratio in percent.
    #[arg(long)]
    pub p: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Kelvin subtracted from every predicted patch.
    #[arg(long, default_value_t = 0.0)]
    pub bias: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub originals: PathBuf,
    #[arg(long)]
    pub composites: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep the outer ring of patches in the statistics.
    #[arg(long)]
    pub include_border: bool,
    /// Number of triptychs to render.
    #[arg(long, default_value_t = 8)]
    pub gallery: usize,
    /// Checkpoint that produced the composites, for the report's hash.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub p: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Validation stack.
    #[arg(long)]
    pub data: PathBuf,
    /// Models as `T=PATH`, one per training ratio.
    #[arg(long = "model", value_parser = parse_model_arg, required = true)]
    pub models: Vec<(f64, PathBuf)>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![10.0, 20.0, 30.0, 40.0, 50.0])]
    pub p: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Re-run each set with its own estimated bias subtracted.
    #[arg(long)]
    pub apply_bias: bool,
    #[arg(long)]
    pub include_border: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_model_arg(s: &str) -> std::result::Result<(f64, PathBuf), String> {
    let (t, path) = s.split_once('=').ok_or_else(|| format!("expected T=PATH, got {s:?}"))?;
    let t: f64 = t.parse().map_err(|_| format!("bad training ratio {t:?}"))?;
    Ok((t, PathBuf::from(path)))
}

/// Exit code for an error.
pub fn exit_code(e: &EnkiError) -> i32 {
    match e {
        EnkiError::InvalidArgument(_) | EnkiError::EmptyMask | EnkiError::NoVisiblePatches => 1,
        EnkiError::NonFinite { .. } => 3,
        EnkiError::Item { source, .. } => exit_code(source),
        _ => 2,
    }
}

/// Parse `args`, run, and return the process exit code.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(mut c) => {
            c.argv = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
            c
        }
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Resolve a user-supplied output path against `$ENKI_OUTPUT_ROOT`.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(FileHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub tool_version: String,
    pub deterministic: bool,
    pub config: Value,
    pub seeds: Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    /// Unix seconds; omitted in deterministic runs.
    pub started_at: Option<u64>,
    pub finished_at: Option<u64>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

struct Recorder {
    manifest: RunManifest,
}

impl Recorder {
    fn new(cli: &Cli, command: &str) -> Self {
        Recorder {
            manifest: RunManifest {
                command: command.to_string(),
                args: cli.argv.clone(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                deterministic: cli.deterministic,
                config: Value::Null,
                seeds: Value::Null,
                inputs: Vec::new(),
                outputs: Vec::new(),
                started_at: (!cli.deterministic).then(unix_now),
                finished_at: None,
            },
        }
    }

    fn input(&mut self, p: &Path) -> Result<()> {
        self.manifest.inputs.push(FileHash::of(p)?);
        Ok(())
    }

    fn output(&mut self, p: &Path) -> Result<()> {
        self.manifest.outputs.push(FileHash::of(p)?);
        Ok(())
    }

    fn finish(mut self, path: &Path) -> Result<RunManifest> {
        if !self.manifest.deterministic {
            self.manifest.finished_at = Some(unix_now());
        }
        fs::write(path, serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(self.manifest)
    }
}

/// What a command produced.
#[derive(Debug)]
pub struct Outcome {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Reconstruct(a) => cmd_reconstruct(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
    }
}

fn sidecar_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub fn load_field_spec(path: &Path) -> Result<FieldSpec> {
    let text = fs::read_to_string(path)?;
    let spec: FieldSpec =
        serde_json::from_str(&text).map_err(|e| EnkiError::invalid(format!("field spec {}: {e}", path.display())))?;
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(EnkiError::invalid(format!(
            "field spec {}:\n  - {}",
            path.display(),
            problems.join("\n  - ")
        )));
    }
    Ok(spec)
}

fn cmd_generate(cli: &Cli, a: &GenerateArgs) -> Result<Outcome> {
    let mut rec = Recorder::new(cli, "generate");
    let spec = match &a.spec {
        Some(p) => {
            rec.input(p)?;
            load_field_spec(p)?
        }
        None => FieldSpec::default(),
    };
    let first = match a.split {
        Split::Train => 0,
        Split::Validation => VALIDATION_ID_OFFSET,
    };
    let cutouts = generate_cutouts(&spec, a.seed, first..first + a.count as u64)?;
    let out = output_path(&a.out);
    ensure_parent(&out)?;
    write_stack(&cutouts, &out)?;
    rec.output(&out)?;
    rec.manifest.config = json!({ "spec": spec, "count": a.count, "split": a.split });
    rec.manifest.seeds = json!({ "master": a.seed });
    let manifest_path = sidecar_manifest(&out);
    let manifest = rec.finish(&manifest_path)?;
    if !cli.quiet {
        eprintln!("wrote {} cutouts to {}", cutouts.len(), out.display());
    }
    Ok(Outcome { manifest, manifest_path })
}

/// Overlay the keys of `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Defaults, then preset, then config file, then flags.
pub fn resolve_train_config(a: &TrainArgs) -> Result<(ModelConfig, TrainConfig)> {
    let (model, train) = match a.preset {
        Some(p) => p.configs(),
        None => (ModelConfig::default(), TrainConfig::default()),
    };
    let mut model_v = serde_json::to_value(&model)?;
    let mut train_v = serde_json::to_value(&train)?;
    if let Some(path) = &a.config {
        let file: Value = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| EnkiError::invalid(format!("config {}: {e}", path.display())))?;
        let obj = file
            .as_object()
            .ok_or_else(|| EnkiError::invalid("config file must be a JSON object"))?;
        if let Some(k) = obj.keys().find(|k| !matches!(k.as_str(), "model" | "train")) {
            return Err(EnkiError::invalid(format!("unknown config section {k:?}")));
        }
        if let Some(m) = obj.get("model") {
            merge(&mut model_v, m);
        }
        if let Some(t) = obj.get("train") {
            merge(&mut train_v, t);
        }
    }
    let flags = [
        ("t_percent", a.t.map(Value::from)),
        ("total_epochs", a.epochs.map(Value::from)),
        ("warmup_epochs", a.warmup.map(Value::from)),
        ("base_learning_rate", a.lr.map(Value::from)),
        ("weight_decay", a.weight_decay.map(Value::from)),
        ("batch_size", a.batch_size.map(Value::from)),
        ("micro_batch_size", a.micro_batch_size.map(Value::from)),
        ("seed", a.seed.map(Value::from)),
        ("checkpoint_every", a.checkpoint_every.map(Value::from)),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            train_v[k] = v;
        }
    }
    let model: ModelConfig =
        serde_json::from_value(model_v).map_err(|e| EnkiError::invalid(format!("model config: {e}")))?;
    let train: TrainConfig =
        serde_json::from_value(train_v).map_err(|e| EnkiError::invalid(format!("train config: {e}")))?;
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<Outcome> {
    let (model, train) = resolve_train_config(a)?;
    if a.dry_run {
        println!("{}", serde_json::to_string_pretty(&json!({ "model": model, "train": train }))?);
    }
    let data_path = a
        .data
        .as_ref()
        .ok_or_else(|| EnkiError::invalid("--data is required"))?;
    let out = output_path(
        a.out
            .as_ref()
            .ok_or_else(|| EnkiError::invalid("--out is required"))?,
    );
    if a.dry_run {
        return Err(EnkiError::invalid("dry run: nothing trained"));
    }
    let mut rec = Recorder::new(cli, "train");
    rec.input(data_path)?;
    let mut data = read_stack(data_path)?;
    if let Some(n) = a.limit {
        data.truncate(n);
    }
    fs::create_dir_all(&out)?;
    let quiet = cli.quiet;
    let mut trainer = Trainer::new(&data, &model, &train).on_epoch(move |r| {
        if !quiet {
            eprintln!(
                "epoch {:>4}/{} loss {:.6e} ({:.0}s)",
                r.record.epoch + 1,
                r.total_epochs,
                r.record.loss,
                r.record.wall_seconds
            );
        }
    });
    if train.checkpoint_every > 0 {
        trainer = trainer.checkpoint_dir(out.join("checkpoints"));
    }
    let (params, log) = trainer.run()?;
    let ckpt_path = out.join("model.enkp");
    save_checkpoint(
        &Checkpoint {
            model_config: model.clone(),
            train_config: Some(train.clone()),
            epoch: train.total_epochs,
            params,
            optimizer: None,
        },
        &ckpt_path,
    )?;
    let log_path = out.join("train_log.csv");
    log.write_csv(&log_path)?;
    let epochs_path = out.join("epochs.csv");
    let mut w = csv::Writer::from_path(&epochs_path)?;
    for e in &log.epochs {
        w.serialize((e.epoch, e.loss, e.shuffle_seed, e.mask_seed))?;
    }
    w.flush()?;
    for p in [&ckpt_path, &log_path, &epochs_path] {
        rec.output(p)?;
    }
    rec.manifest.config = json!({ "model": model, "train": train, "limit": a.limit, "cutouts": data.len() });
    rec.manifest.seeds = json!({
        "train": train.seed,
        "epochs": log.epochs.iter().map(|e| json!({ "shuffle": e.shuffle_seed, "masks": e.mask_seed })).collect::<Vec<_>>(),
    });
    let manifest_path = out.join("manifest.json");
    let manifest = rec.finish(&manifest_path)?;
    Ok(Outcome { manifest, manifest_path })
}

/// Write composites, masks and the results table for one batch.
fn write_batch(batch: &BatchReconstruction, out: &Path, rec: &mut Recorder) -> Result<()> {
    fs::create_dir_all(out)?;
    let composites: Vec<Cutout> = batch.results.iter().map(|r| r.composite.clone()).collect();
    let masks: Vec<_> = batch.results.iter().map(|r| r.mask.clone()).collect();
    let paths = [out.join("composites.enkd"), out.join("masks.enkm"), out.join("results.csv")];
    write_stack(&composites, &paths[0])?;
    write_masks(&masks, &paths[1])?;
    write_rows(&batch.rows, &paths[2])?;
    for p in &paths {
        rec.output(p)?;
    }
    Ok(())
}

fn cmd_reconstruct(cli: &Cli, a: &ReconstructArgs) -> Result<Outcome> {
    if !(a.p > 0.0 && a.p < 100.0) {
        return Err(EnkiError::invalid(format!("--p {} must lie in (0, 100)", a.p)));
    }
    let mut rec = Recorder::new(cli, "reconstruct");
    rec.input(&a.checkpoint)?;
    rec.input(&a.data)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = ckpt.model();
    let stack = read_stack(&a.data)?;
    let batch = batch_reconstruct(&model, &stack, a.p, a.seed, a.bias);
    if let Some(e) = batch.failures.first() {
        eprintln!("{} of {} cutouts failed; first: {e}", batch.failures.len(), stack.len());
    }
    let out = output_path(&a.out);
    write_batch(&batch, &out, &mut rec)?;
    rec.manifest.config = json!({ "p": a.p, "bias": a.bias, "model": ckpt.model_config, "failures": batch.failures.len() });
    rec.manifest.seeds = json!({ "master": a.seed });
    let manifest_path = out.join("manifest.json");
    let manifest = rec.finish(&manifest_path)?;
    if batch.results.is_empty() && !stack.is_empty() {
        return Err(batch.failures.into_iter().next().expect("a failure"));
    }
    Ok(Outcome { manifest, manifest_path })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReportBundle {
    pub report: EvalReport,
    pub artifacts: Vec<FileHash>,
}

/// Evaluate and write every table, the map, galleries and the JSON bundle
/// into `out`. Returns the written paths, bundle last.
pub fn write_report(
    originals: &[Cutout],
    composites: &[Cutout],
    masks: &[crate::patching::MaskSpec],
    mut report_meta: impl FnMut(&mut EvalReport),
    options: &EvalOptions,
    gallery: usize,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if originals.len() != composites.len() || originals.len() != masks.len() {
        return Err(EnkiError::invalid(format!(
            "{} originals, {} composites, {} masks",
            originals.len(),
            composites.len(),
            masks.len()
        )));
    }
    let Some(first) = originals.first() else {
        return Err(EnkiError::invalid("nothing to evaluate"));
    };
    let grid = crate::patching::PatchGrid::new(first.width, first.width / (masks[0].num_patches() as f64).sqrt() as usize)?;
    let items: Vec<EvalItem> = originals
        .iter()
        .zip(composites)
        .zip(masks)
        .map(|((o, c), m)| EvalItem {
            id: o.meta.id,
            original: &o.values,
            reconstructed: &c.values,
            mask: m,
        })
        .collect();
    let mut report = evaluate(&items, &grid, options)?;
    report_meta(&mut report);
    fs::create_dir_all(out)?;
    let mut paths = Vec::new();
    for (name, text) in [
        ("images.csv", report.images_csv()?),
        ("sigma_bins.csv", report.sigma_csv()?),
        ("complexity_bins.csv", report.complexity_csv()?),
        ("position_map.csv", report.position_map.to_csv()?),
    ] {
        let p = out.join(name);
        fs::write(&p, text)?;
        paths.push(p);
    }
    let map_path = out.join("position_map.pgm");
    render_position_map(&report.position_map, &map_path, 8)?;
    paths.push(map_path);
    let n = gallery.min(originals.len());
    if n > 0 {
        let gdir = out.join("gallery");
        fs::create_dir_all(&gdir)?;
        let o: Vec<&[f64]> = originals[..n].iter().map(|c| c.values.as_slice()).collect();
        let c: Vec<&[f64]> = composites[..n].iter().map(|c| c.values.as_slice()).collect();
        let ids: Vec<u64> = originals[..n].iter().map(|c| c.meta.id).collect();
        paths.extend(render_gallery(&o, &masks[..n], &c, &ids, &grid, &gdir.join("cutout"))?);
    }
    let artifacts = paths
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: p.strip_prefix(out).unwrap_or(p).display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bundle_path = out.join("report.json");
    fs::write(&bundle_path, serde_json::to_string_pretty(&ReportBundle { report, artifacts })?)?;
    paths.push(bundle_path);
    Ok(paths)
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<Outcome> {
    let mut rec = Recorder::new(cli, "eval");
    for p in [&a.originals, &a.composites, &a.masks] {
        rec.input(p)?;
    }
    let checkpoint_sha256 = match &a.checkpoint {
        Some(p) => {
            rec.input(p)?;
            Some(sha256_file(p)?)
        }
        None => None,
    };
    let composites = read_stack(&a.composites)?;
    let masks = read_masks(&a.masks)?;
    // composites carry their originals' ids; pick those out of the source stack
    let all = read_stack(&a.originals)?;
    let by_id: std::collections::HashMap<u64, &Cutout> = all.iter().map(|c| (c.meta.id, c)).collect();
    let originals = composites
        .iter()
        .map(|c| {
            by_id
                .get(&c.meta.id)
                .map(|o| (*o).clone())
                .ok_or_else(|| EnkiError::invalid(format!("no original with id {}", c.meta.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let options = EvalOptions {
        exclude_border: !a.include_border,
        ..EvalOptions::default()
    };
    let out = output_path(&a.out);
    let paths = write_report(
        &originals,
        &composites,
        &masks,
        |r| {
            r.t_percent = a.t;
            r.p_percent = a.p;
            r.checkpoint_sha256 = checkpoint_sha256.clone();
        },
        &options,
        a.gallery,
        &out,
    )?;
    for p in &paths {
        rec.output(p)?;
    }
    rec.manifest.config = json!({ "options": options, "gallery": a.gallery, "t": a.t, "p": a.p });
    let manifest_path = out.join("manifest.json");
    let manifest = rec.finish(&manifest_path)?;
    Ok(Outcome { manifest, manifest_path })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t: f64,
    pub p: f64,
    pub images: usize,
    pub mean_rmse: f64,
    pub median_rmse: f64,
    pub bias: f64,
    /// Mean RMSE after subtracting the set's own bias, when requested.
    pub corrected_mean_rmse: Option<f64>,
    pub border_mean_rmse: Option<f64>,
    pub interior_mean_rmse: Option<f64>,
    pub spearman: Option<f64>,
}

/// Rows by `p`, one bias column per `t`.
pub fn bias_table(rows: &[SweepRow]) -> String {
    let mut ts: Vec<f64> = rows.iter().map(|r| r.t).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let mut ps: Vec<f64> = rows.iter().map(|r| r.p).collect();
    ps.sort_by(f64::total_cmp);
    ps.dedup();
    let mut s = String::from("p");
    for t in &ts {
        s.push_str(&format!(",t={t}"));
    }
    s.push('\n');
    for p in &ps {
        s.push_str(&p.to_string());
        for t in &ts {
            let cell = rows.iter().find(|r| r.t == *t && r.p == *p).map(|r| format!("{:.4}", r.bias));
            s.push(',');
            s.push_str(&cell.unwrap_or_default());
        }
        s.push('\n');
    }
    s
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<Outcome> {
    let mut rec = Recorder::new(cli, "sweep");
    rec.input(&a.data)?;
    let stack = read_stack(&a.data)?;
    let out = output_path(&a.out);
    fs::create_dir_all(&out)?;
    let options = EvalOptions {
        exclude_border: !a.include_border,
        ..EvalOptions::default()
    };
    let mut rows = Vec::new();
    for (t, path) in &a.models {
        rec.input(path)?;
        let model: MaskedAutoencoder = load_checkpoint(path)?.model();
        for &p in &a.p {
            if !cli.quiet {
                eprintln!("t={t} p={p}");
            }
            let row = sweep_cell(&model, &stack, *t, p, a.seed, a.apply_bias, &options)?;
            rows.push(row);
        }
    }
    let sweep_path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&sweep_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let table_path = out.join("bias_table.csv");
    fs::write(&table_path, bias_table(&rows))?;
    rec.output(&sweep_path)?;
    rec.output(&table_path)?;
    rec.manifest.config = json!({ "p": a.p, "t": a.models.iter().map(|m| m.0).collect::<Vec<_>>(), "apply_bias": a.apply_bias, "options": options });
    rec.manifest.seeds = json!({ "master": a.seed });
    let manifest_path = out.join("manifest.json");
    let manifest = rec.finish(&manifest_path)?;
    Ok(Outcome { manifest, manifest_path })
}

/// Reconstruct and score one (t, p) set.
pub fn sweep_cell(
    model: &MaskedAutoencoder,
    stack: &[Cutout],
    t: f64,
    p: f64,
    seed: u64,
    apply_bias: bool,
    options: &EvalOptions,
) -> Result<SweepRow> {
    let score = |bias: f64| -> Result<EvalReport> {
        let batch = batch_reconstruct(model, stack, p, seed, bias);
        if let Some(e) = batch.failures.into_iter().next() {
            return Err(e);
        }
        let items: Vec<EvalItem> = batch.results.iter().map(EvalItem::from).collect();
        evaluate(&items, &model.config.grid(), options)
    };
    let report = score(0.0)?;
    let corrected = if apply_bias {
        Some(score(report.bias)?.mean_rmse)
    } else {
        None
    };
    Ok(SweepRow {
        t,
        p,
        images: report.images.len(),
        mean_rmse: report.mean_rmse,
        median_rmse: report.median_rmse,
        bias: report.bias,
        corrected_mean_rmse: corrected,
        border_mean_rmse: report.border_mean_rmse,
        interior_mean_rmse: report.interior_mean_rmse,
        spearman: report.complexity.as_ref().and_then(|c| c.spearman),
    })
}
