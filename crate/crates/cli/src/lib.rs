//! `lassr` command-line front end.

pub mod config;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lassr_core::checkpoint;
use lassr_core::classifier::{run_variant, Variant, VariantResult};
use lassr_core::data::{load_manifest, Split};
use lassr_core::evaluator::{
    artifact_audit, embed, fid, line_profile, mean_psnr, plot_bars, plot_profiles, super_resolve, SkippedPair,
};
use lassr_core::synth::{generate_corpus, SynthProfile};
use lassr_core::trainer::{latest_checkpoint, train, RunOptions, TrainState};
use lassr_core::{Error, Image};
use serde::Serialize;
use serde_json::{json, Value};

pub use config::RunConfig;

/// Machine-readable failure printed by the binary before a nonzero exit.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub error: String,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub problems: Vec<String>,
}

impl CliError {
    pub fn config(problems: Vec<String>) -> Self {
        Self { error: "invalid_config".into(), message: format!("{} configuration problem(s)", problems.len()), problems }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self { error: "usage".into(), message: message.into(), problems: Vec::new() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let problems = match &e {
            Error::Manifest { problems, .. } => problems.clone(),
            _ => Vec::new(),
        };
        Self { error: e.kind().into(), message: e.to_string(), problems }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.error, self.message)
    }
}

type CliResult<T> = Result<T, CliError>;

pub fn help_footer() -> String {
    format!(
        "Configuration keys (TOML or JSON file via --config or LASSR_CONFIG; override with --set key=value):\n{}",
        config::defaults_listing()
    )
}

#[derive(Debug, Parser)]
#[command(name = "lassr", version, about = "Artifact-suppressing 4x GAN super-resolution", after_long_help = help_footer(), after_help = help_footer())]
pub struct Cli {
    /// Run configuration file (.toml or .json).
    #[arg(long, global = true, env = "LASSR_CONFIG")]
    pub config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set train.epochs=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, String)>,

    #[command(subcommand)]
    pub command: Command,
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a seeded synthetic leaf corpus and its manifest.
    SynthData(SynthArgs),
    /// Train the GAN on the SR manifest's train split.
    Train(TrainArgs),
    /// Super-resolve PNG images with a trained checkpoint.
    Sr(SrArgs),
    /// Detect residual blobs between SR and HR images.
    Audit(AuditArgs),
    /// Frechet distance between two image folders' embeddings.
    Fid(FidArgs),
    /// Plot intensity along one row of several images.
    Profile(ProfileArgs),
    /// Train and test the disease classifier on each input variant.
    Classify(ClassifyArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProfileKind {
    Sr,
    Classify,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "sr")]
    pub profile: ProfileKind,
    /// Images in the SR profile.
    #[arg(long, default_value_t = 64)]
    pub n_images: usize,
    #[arg(long, default_value_t = 96)]
    pub image_size: usize,
    /// Held-out share of the SR profile.
    #[arg(long, default_value_t = 0.125)]
    pub test_fraction: f64,
    /// Field-dataset class counts are divided by this in the classify profile.
    #[arg(long, default_value_t = 100.0)]
    pub divisor: f64,
    /// Defaults to the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Defaults to data.manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory for log, checkpoints and plots; defaults to data.out_dir/train.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Continue from the newest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct SrArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A PNG file or a directory of PNGs.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Directory of SR PNGs; paired with HR files by name.
    #[arg(long)]
    pub sr: PathBuf,
    #[arg(long)]
    pub hr: PathBuf,
    /// Report path; defaults to data.out_dir/audit.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FidArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Images of equal width, e.g. HR, bicubic and SR.
    #[arg(long, num_args = 1.., required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub row: Option<usize>,
    /// Plot path; the sampled values go next to it as JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Defaults to data.classify_manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Comma-separated subset of lr, bicubic, noarm-sr, lassr, hr.
    #[arg(long, default_value = "lr,bicubic,noarm-sr,lassr,hr", value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Generator trained with the artifact term (for `lassr`).
    #[arg(long)]
    pub lassr_checkpoint: Option<PathBuf>,
    /// Generator trained without it (for `noarm-sr`).
    #[arg(long)]
    pub noarm_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolve the configuration (file, then `--set` overrides) and run.
pub fn run(cli: Cli) -> CliResult<Value> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = if cli.overrides.is_empty() { base } else { base.with_overrides(&cli.overrides)? };
    match cli.command {
        Command::SynthData(a) => cmd_synth_data(&cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Sr(a) => cmd_sr(&cfg, a),
        Command::Audit(a) => cmd_audit(&cfg, a),
        Command::Fid(a) => cmd_fid(&cfg, a),
        Command::Profile(a) => cmd_profile(&cfg, a),
        Command::Classify(a) => cmd_classify(&cfg, a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e).into())
}

/// PNG files directly inside `dir`, sorted by name.
fn png_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn cmd_synth_data(cfg: &RunConfig, a: SynthArgs) -> CliResult<Value> {
    let profile = match a.profile {
        ProfileKind::Sr => {
            SynthProfile::Sr { n_images: a.n_images, image_size: a.image_size, test_fraction: a.test_fraction }
        }
        ProfileKind::Classify => SynthProfile::Classify { divisor: a.divisor, image_size: a.image_size },
    };
    let seed = a.seed.unwrap_or(cfg.seed);
    let manifest = generate_corpus(&a.out, &profile, seed)?;
    Ok(json!({
        "command": "synth-data",
        "manifest": a.out.join("manifest.json"),
        "images": manifest.len(),
        "seed": seed,
        "profile": profile,
        "splits": manifest.summary(),
    }))
}

pub fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> CliResult<Value> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(m) = a.max_steps {
        cfg.train.max_steps = m;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    let cfg = RunConfig::from_value(cfg.to_value())?;
    let out = a.out.clone().unwrap_or_else(|| cfg.data.out_dir.join("train"));
    let ckpt_dir = out.join("checkpoints");
    create_dir(&out)?;

    let manifest = load_manifest(a.manifest.as_ref().unwrap_or(&cfg.data.manifest))?;
    let images = manifest.load_images(Split::Train)?;
    if images.is_empty() {
        return Err(CliError::usage("manifest has no train-split images"));
    }
    let fx = cfg.loss.extractor()?;
    let setup = cfg.train_setup();

    let mut state = match (a.resume, latest_checkpoint(&ckpt_dir)?) {
        (true, Some(path)) => {
            let state = checkpoint::load(&path)?;
            let mut expected = setup.clone();
            expected.train.epochs = state.setup.train.epochs;
            expected.train.max_steps = state.setup.train.max_steps;
            if state.setup != expected {
                return Err(CliError::usage(format!(
                    "{} was written with a different configuration; resume with the original one",
                    path.display()
                )));
            }
            let mut state = state;
            state.setup.train.epochs = setup.train.epochs;
            state.setup.train.max_steps = setup.train.max_steps;
            state
        }
        _ => TrainState::new(setup)?,
    };
    let resumed_from = state.step;

    let log_path = out.join("log.ndjson");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resumed_from > 0)
        .truncate(resumed_from == 0)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let records = train(
        &mut state,
        &images,
        fx.as_ref(),
        RunOptions { checkpoint_dir: Some(ckpt_dir.clone()), log: Some(&mut log), stop_at: None },
    )?;
    drop(log);

    if !records.is_empty() {
        let totals: Vec<f64> = records.iter().map(|r| r.total).collect();
        let (lo, hi) = totals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = (hi - lo).max(1e-12);
        let scaled: Vec<f64> = totals.iter().map(|v| (v - lo) / span).collect();
        plot_profiles(&[("total", &scaled)], out.join("loss_curve.png"))?;
    }
    let summary = json!({
        "command": "train",
        "steps": state.step,
        "resumed_from": resumed_from,
        "planned_steps": state.planned_steps(images.len()),
        "train_images": images.len(),
        "log": log_path,
        "checkpoint": latest_checkpoint(&ckpt_dir)?,
        "final": state.last,
        "config": cfg.to_value(),
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn cmd_sr(cfg: &RunConfig, a: SrArgs) -> CliResult<Value> {
    let generator = checkpoint::load_generator(&a.checkpoint)?;
    let inputs = if a.input.is_dir() { png_files(&a.input)? } else { vec![a.input.clone()] };
    create_dir(&a.out)?;
    let tiles = cfg.eval.tiles();
    let mut outputs = Vec::new();
    for path in &inputs {
        let lr = Image::load_png(path)?;
        let sr = super_resolve(&generator, &lr, &tiles)?;
        let dst = a.out.join(file_name(path));
        sr.save_png(&dst)?;
        outputs.push(json!({"input": path, "output": dst, "lr_size": [lr.height(), lr.width()], "sr_size": [sr.height(), sr.width()]}));
    }
    let summary = json!({"command": "sr", "checkpoint": a.checkpoint, "outputs": outputs, "config": {"eval": cfg.eval}});
    write_json(&a.out.join("sr_report.json"), &summary)?;
    Ok(summary)
}

pub fn cmd_audit(cfg: &RunConfig, a: AuditArgs) -> CliResult<Value> {
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for sr_path in png_files(&a.sr)? {
        let name = file_name(&sr_path);
        let hr_path = a.hr.join(&name);
        if !hr_path.is_file() {
            missing.push(SkippedPair { path: name, reason: "no HR image with this name".into() });
            continue;
        }
        pairs.push((name, Image::load_png(&sr_path)?, Image::load_png(&hr_path)?));
    }
    let mut report = artifact_audit(&pairs, &cfg.arm)?;
    let comparable: Vec<(Image, Image)> =
        pairs.into_iter().filter(|(_, s, h)| s.same_shape(h)).map(|(_, s, h)| (s, h)).collect();
    report.psnr_db = mean_psnr(&comparable)?;
    report.skipped.extend(missing);
    let out = a.out.unwrap_or_else(|| cfg.data.out_dir.join("audit.json"));
    write_json(&out, &report)?;
    let mut value = serde_json::to_value(&report).map_err(Error::from)?;
    value["command"] = json!("audit");
    value["report"] = json!(out);
    Ok(value)
}

fn load_dir(dir: &Path) -> CliResult<Vec<Image>> {
    png_files(dir)?.iter().map(|p| Image::load_png(p).map_err(CliError::from)).collect()
}

pub fn cmd_fid(cfg: &RunConfig, a: FidArgs) -> CliResult<Value> {
    let fx = cfg.loss.extractor()?;
    let ea = embed(&load_dir(&a.a)?, fx.as_ref())?;
    let eb = embed(&load_dir(&a.b)?, fx.as_ref())?;
    let value = fid(&ea, &eb)?;
    let summary = json!({
        "command": "fid",
        "fid": value,
        "a": {"dir": a.a, "images": ea.rows.len()},
        "b": {"dir": a.b, "images": eb.rows.len()},
        "descriptor": ea.descriptor,
        "dim": ea.dim(),
    });
    let out = a.out.unwrap_or_else(|| cfg.data.out_dir.join("fid.json"));
    write_json(&out, &summary)?;
    Ok(summary)
}

pub fn cmd_profile(cfg: &RunConfig, a: ProfileArgs) -> CliResult<Value> {
    let images: Vec<Image> = a.images.iter().map(Image::load_png).collect::<Result<_, _>>()?;
    let width = images[0].width();
    if let Some(bad) = images.iter().position(|i| i.width() != width) {
        return Err(CliError::usage(format!("{} has width {}, expected {width}", a.images[bad].display(), images[bad].width())));
    }
    let height = images.iter().map(Image::height).min().unwrap_or(0);
    let row = a.row.or(cfg.eval.profile_row).unwrap_or(height / 2);
    let mut curves = BTreeMap::new();
    let mut ordered = Vec::new();
    for (path, img) in a.images.iter().zip(&images) {
        let values = line_profile(img, row, cfg.eval.profile_channel)?;
        curves.insert(file_name(path), values.clone());
        ordered.push((file_name(path), values));
    }
    let refs: Vec<(&str, &[f64])> = ordered.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    plot_profiles(&refs, &a.out)?;
    let summary = json!({
        "command": "profile",
        "plot": a.out,
        "row": row,
        "channel": cfg.eval.profile_channel,
        "legend": ordered.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
        "profiles": curves,
    });
    write_json(&a.out.with_extension("json"), &summary)?;
    Ok(summary)
}

pub fn cmd_classify(cfg: &RunConfig, a: ClassifyArgs) -> CliResult<Value> {
    let variants: Vec<Variant> = a.variants.iter().map(|v| Variant::parse(v.trim())).collect::<Result<_, _>>()?;
    let manifest = load_manifest(a.manifest.as_ref().unwrap_or(&cfg.data.classify_manifest))?;
    if manifest.classes.is_empty() {
        return Err(CliError::usage("classification needs a labeled manifest"));
    }
    if manifest.image_size != cfg.classify.input_size {
        return Err(CliError::config(vec![format!(
            "classify.input_size: {} does not match the manifest's image size {}",
            cfg.classify.input_size, manifest.image_size
        )]));
    }
    let load_gen = |p: &Option<PathBuf>, v: Variant| -> CliResult<_> {
        match p {
            Some(p) => Ok(Some(checkpoint::load_generator(p)?)),
            None if variants.contains(&v) => {
                Err(CliError::usage(format!("variant {} needs a generator checkpoint", v.name())))
            }
            None => Ok(None),
        }
    };
    let lassr = load_gen(&a.lassr_checkpoint, Variant::Lassr)?;
    let noarm = load_gen(&a.noarm_checkpoint, Variant::NoArmSr)?;

    let train = manifest.load_labeled(Split::Train)?;
    let val = manifest.load_labeled(Split::Val)?;
    let test = manifest.load_labeled(Split::Test)?;
    let tiles = cfg.eval.tiles();
    let mut results: Vec<VariantResult> = Vec::new();
    for &v in &variants {
        let generator = match v {
            Variant::Lassr => lassr.as_ref(),
            Variant::NoArmSr => noarm.as_ref(),
            _ => None,
        };
        results.push(run_variant(
            &cfg.classify,
            v,
            generator,
            &tiles,
            &manifest.classes,
            [(&train.0, &train.1), (&val.0, &val.1), (&test.0, &test.1)],
            cfg.seed,
        )?);
    }
    let out = a.out.clone().unwrap_or_else(|| cfg.data.out_dir.join("classify"));
    create_dir(&out)?;
    plot_bars(&results.iter().map(|r| r.test.micro).collect::<Vec<_>>(), out.join("accuracy.png"))?;
    let summary = json!({
        "command": "classify",
        "micro": results.iter().map(|r| (r.variant.clone(), r.test.micro)).collect::<BTreeMap<_, _>>(),
        "macro": results.iter().map(|r| (r.variant.clone(), r.test.macro_avg)).collect::<BTreeMap<_, _>>(),
        "class_counts": {
            "train": manifest.class_counts(Split::Train),
            "val": manifest.class_counts(Split::Val),
            "test": manifest.class_counts(Split::Test),
        },
        "results": results,
        "config": {"seed": cfg.seed, "classify": cfg.classify, "eval": cfg.eval},
    });
    write_json(&out.join("results.json"), &summary)?;
    Ok(summary)
}
