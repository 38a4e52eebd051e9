//! `uvcgan-lab`: pretrain, train, translate, evaluate and report.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or usage error,
//! 3 dataset error, 4 KID subset larger than the test set.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use uvcgan::checkpoint::{load_generator, GeneratorSlot};
use uvcgan::config::{PretrainCorpus, RunConfig};
use uvcgan::data::{load_dataset, Split};
use uvcgan::metrics::{evaluate, self_evaluate, MetricManifest, MetricReport};
use uvcgan::session::{run_pretrain, run_training, summarize_log, translate_dir, RunOptions, LOG_FILE};
use uvcgan::trainer::PretrainSource;
use uvcgan::{Error, Result};

/// Relative output paths are resolved against this directory when set.
const OUT_ROOT_ENV: &str = "UVCGAN_LAB_OUT";

#[derive(Parser, Debug)]
#[command(name = "uvcgan-lab", version, about = "Unpaired image translation with UNet-ViT cycle GANs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked-patch pretraining of a generator.
    Pretrain(PretrainArgs),
    /// Cycle-consistent GAN training.
    Train(TrainArgs),
    /// Translate a folder of images with a checkpoint.
    Translate(TranslateArgs),
    /// FID/KID of a checkpoint on a test split.
    Evaluate(EvaluateArgs),
    /// Summarize run logs.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration (defaults are used for anything not set).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory. Relative paths go under $UVCGAN_LAB_OUT if set.
    #[arg(long, short)]
    out: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Override any config key, e.g. `--set train.pool_size=0`. Repeatable;
    /// applied after the file and before the dedicated flags below.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed (`seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset folder with trainA/ trainB/ testA/ testB/ (`data.root`).
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Divide every image size by this factor (`data.size_scale`).
    #[arg(long)]
    size_scale: Option<f64>,
    /// Number of steps (`pretrain.total_steps` or `train.total_iters`).
    #[arg(long)]
    iters: Option<u64>,
    /// Peak learning rate (`pretrain.lr` or `train.lr`).
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size (`pretrain.batch_size` or `train.batch_size`).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Checkpoint interval in steps, 0 for end only.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Print progress every this many steps.
    #[arg(long, default_value_t = 100)]
    progress_every: u64,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Pretraining images: both training domains or an external folder
    /// (`pretrain.corpus`).
    #[arg(long, value_enum)]
    corpus: Option<CorpusArg>,
    /// Folder of external images (`pretrain.external_root`).
    #[arg(long)]
    external_root: Option<PathBuf>,
    /// Patch side for masking (`pretrain.patch_size`).
    #[arg(long)]
    patch_size: Option<usize>,
    /// Masking probability (`pretrain.mask_prob`).
    #[arg(long)]
    mask_prob: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Disable the gradient penalty (`train.use_gp = false`).
    #[arg(long)]
    no_gp: bool,
    /// Disable the identity loss (`train.use_identity = false`).
    #[arg(long)]
    no_idt: bool,
    /// Generator initialization (`train.pretrain`).
    #[arg(long, value_enum)]
    pretrain: Option<SourceArg>,
    /// Pretraining checkpoint (`train.pretrained_checkpoint`).
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Fake-image pool size, 0 to disable (`train.pool_size`).
    #[arg(long)]
    pool_size: Option<usize>,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    /// Training or pretraining checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Folder of input images.
    #[arg(long)]
    input: PathBuf,
    /// Output folder (same file names, plus translation_grid.png).
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum)]
    direction: Direction,
    /// Resize the short side and centre-crop to this size first.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Training checkpoint directory (not needed with --self-eval).
    #[arg(long, required_unless_present = "self_eval")]
    checkpoint: Option<PathBuf>,
    /// Dataset folder with testA/ and testB/.
    #[arg(long)]
    data_root: PathBuf,
    /// Metric manifest (TOML, the fields of the `[metrics]` section).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Report file (JSON).
    #[arg(long, short)]
    out: PathBuf,
    /// Score each domain's test images against each other (no generator).
    #[arg(long)]
    self_eval: bool,
    /// Add valA/ valB/ to the test split.
    #[arg(long)]
    merge_validation: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories (containing log.jsonl) or metric report files.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CorpusArg {
    Same,
    External,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SourceArg {
    None,
    Same,
    External,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Direction {
    A2b,
    B2a,
}

fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Loads the config file (if any), applies `--set` overrides, then parses.
fn load_config(c: &Common) -> Result<RunConfig> {
    let text = match &c.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    if c.set.is_empty() {
        return RunConfig::from_toml_str(&text);
    }
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
    for s in &c.set {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut node = &mut table;
        for part in &parts[..parts.len() - 1] {
            let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("--set {key}: `{part}` is not a section")))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    }
    RunConfig::from_toml_str(&toml::to_string(&table).expect("table serializes"))
}

fn apply_common(cfg: &mut RunConfig, c: &Common) {
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = &c.data_root {
        cfg.data.root = Some(v.clone());
    }
    if let Some(v) = c.size_scale {
        cfg.data.size_scale = v;
    }
}

fn options(c: &Common) -> RunOptions {
    RunOptions { resume: c.resume, stop_after: None, progress_every: c.progress_every }
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let c = &a.common;
    let mut cfg = load_config(c)?;
    apply_common(&mut cfg, c);
    let p = &mut cfg.pretrain;
    if let Some(v) = c.iters {
        p.total_steps = v;
    }
    if let Some(v) = c.lr {
        p.lr = v;
    }
    if let Some(v) = c.batch_size {
        p.batch_size = v;
    }
    if let Some(v) = c.checkpoint_every {
        p.checkpoint_every = v;
    }
    if let Some(v) = a.corpus {
        p.corpus = match v {
            CorpusArg::Same => PretrainCorpus::Same,
            CorpusArg::External => PretrainCorpus::External,
        };
    }
    if let Some(v) = &a.external_root {
        p.external_root = Some(v.clone());
    }
    if let Some(v) = a.patch_size {
        p.patch_size = v;
    }
    if let Some(v) = a.mask_prob {
        p.mask_prob = v;
    }
    let out = out_path(&c.out);
    let s = run_pretrain(&cfg, &out, &options(c))?;
    println!("pretrained {} steps; checkpoint {}", s.steps_done, s.checkpoint.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let c = &a.common;
    let mut cfg = load_config(c)?;
    apply_common(&mut cfg, c);
    let t = &mut cfg.train;
    if let Some(v) = c.iters {
        t.total_iters = v;
    }
    if let Some(v) = c.lr {
        t.lr = v;
    }
    if let Some(v) = c.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = c.checkpoint_every {
        t.checkpoint_every = v;
    }
    if a.no_gp {
        t.use_gp = false;
    }
    if a.no_idt {
        t.use_identity = false;
    }
    if let Some(v) = a.pretrain {
        t.pretrain = match v {
            SourceArg::None => PretrainSource::None,
            SourceArg::Same => PretrainSource::Same,
            SourceArg::External => PretrainSource::External,
        };
        if t.pretrain == PretrainSource::None {
            t.pretrained_checkpoint = None;
        }
    }
    if let Some(v) = &a.pretrained {
        t.pretrained_checkpoint = Some(v.clone());
    }
    if let Some(v) = a.pool_size {
        t.pool_size = v;
    }
    let out = out_path(&c.out);
    let s = run_training(&cfg, &out, &options(c))?;
    println!("trained to iteration {} ({}); checkpoint {}", s.steps_done, cfg.train.ablation_label(), s.checkpoint.display());
    Ok(())
}

fn cmd_translate(a: &TranslateArgs) -> Result<()> {
    let slot = match a.direction {
        Direction::A2b => GeneratorSlot::AtoB,
        Direction::B2a => GeneratorSlot::BtoA,
    };
    let g = load_generator(&a.checkpoint, slot)?;
    let out = out_path(&a.out);
    let written = translate_dir(&g, &a.input, &out, a.size)?;
    println!("translated {} images into {}", written.len(), out.display());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let (manifest, source) = match &a.manifest {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", p.display())))?;
            let de = toml::de::Deserializer::parse(&text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
            let m: MetricManifest = serde_path_to_error::deserialize(de)
                .map_err(|e| Error::Config(format!("manifest at `{}`: {}", e.path(), e.inner().message().trim())))?;
            (m, Some(text))
        }
        None => (MetricManifest::default(), None),
    };
    manifest.validate()?;
    let test = load_dataset(&a.data_root, Split::Test, a.merge_validation)?;
    let mut report = if a.self_eval {
        self_evaluate(&test, &manifest)?
    } else {
        evaluate(&test, a.checkpoint.as_ref().expect("required by clap"), &manifest)?
    };
    report.manifest_source = source;
    let out = out_path(&a.out);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.to_path_buf(), source: e })?;
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&out, json + "\n").map_err(|e| Error::Io { path: out.clone(), source: e })?;
    for s in &report.scores {
        println!("{:7} FID {:10.4}  KIDx100 {:8.4} ± {:.4}", s.direction, s.fid, s.kid_x100_mean, s.kid_x100_std);
    }
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for p in &a.paths {
        if p.is_dir() {
            let s = summarize_log(&p.join(LOG_FILE))?;
            rows.push(serde_json::json!({ "path": p, "log": s }));
        } else {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
            let r: MetricReport = serde_json::from_str(&text)
                .map_err(|e| Error::Load(format!("{} is not a metric report: {e}", p.display())))?;
            rows.push(serde_json::json!({ "path": p, "metrics": r }));
        }
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rows).expect("serializes"));
        return Ok(());
    }
    for row in &rows {
        let path = row["path"].as_str().unwrap_or("?");
        if let Some(log) = row.get("log") {
            println!("{path}: {} [{}] {} steps, {} resumes", log["kind"], log["label"].as_str().unwrap_or(""), log["steps"], log["resumes"]);
            if let Some(m) = log["tail_mean"].as_object() {
                let parts: Vec<String> =
                    m.iter().map(|(k, v)| format!("{k}={:.4}", v.as_f64().unwrap_or(f64::NAN))).collect();
                println!("  tail mean: {}", parts.join(" "));
            }
        } else {
            let m = &row["metrics"];
            println!("{path}: extractor {}", m["extractor_id"].as_str().unwrap_or("?"));
            for s in m["scores"].as_array().into_iter().flatten() {
                println!(
                    "  {:7} FID {:10.4}  KIDx100 {:8.4} ± {:.4}",
                    s["direction"].as_str().unwrap_or("?"),
                    s["fid"].as_f64().unwrap_or(f64::NAN),
                    s["kid_x100_mean"].as_f64().unwrap_or(f64::NAN),
                    s["kid_x100_std"].as_f64().unwrap_or(f64::NAN)
                );
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Dataset(_) => 3,
        Error::SubsetTooLarge { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
