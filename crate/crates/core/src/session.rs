//! Whole runs driven by a [`RunConfig`]: data loading, the step loop,
//! JSONL logs and periodic checkpoints, with resume.
//!
//! Layout of an output directory:
//!
//! ```text
//! <out>/log.jsonl      header, then one record per step
//! <out>/checkpoint/    latest checkpoint
//! <out>/config.toml    the effective configuration
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use uvc_tensor::no_grad;

use crate::checkpoint::{
    load_generator, load_pretrain_checkpoint, load_train_checkpoint, save_pretrain_checkpoint, save_train_checkpoint,
    GeneratorSlot,
};
use crate::config::{PretrainCorpus, RunConfig};
use crate::data::{augment_pretrain, augment_train, batch, eval_preprocess, list_images, load_dataset, load_image};
use crate::data::{sample_unpaired, save_image, Image, Split, UnpairedSampler};
use crate::error::{Error, Result};
use crate::generator::{init_generator, Generator};
use crate::pretrain::{cosine_lr, pretrain_step, MaskSpec, PretrainState, PRETRAIN_ADAM};
use crate::rng::{step_stream, stream, Stream};
use crate::trainer::{init_train, train_iteration, IterMetrics, PretrainSource, TrainState};

pub const LOG_FILE: &str = "log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Pretrain,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub kind: RunKind,
    /// `pretrain=... gp=... idt=...` for training, the corpus for pretraining.
    pub label: String,
    pub config: RunConfig,
    pub dataset_root: Option<PathBuf>,
    /// Images per domain (training) or in the corpus (pretraining, in `.0`).
    pub image_counts: (usize, usize),
    pub version: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Header(Box<LogHeader>),
    /// Written when a run continues from its checkpoint.
    Resume { step: u64 },
    Pretrain { rec: PretrainRecord, elapsed_s: f64 },
    Train { iter: IterMetrics, elapsed_s: f64 },
}

impl LogRecord {
    /// Step number of a per-step record (1-based, after the update).
    pub fn step(&self) -> Option<u64> {
        match self {
            LogRecord::Pretrain { rec, .. } => Some(rec.step),
            LogRecord::Train { iter, .. } => Some(iter.iteration),
            _ => None,
        }
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Load(format!("{}:{}: bad log record: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

struct LogWriter {
    file: File,
    path: PathBuf,
}

impl LogWriter {
    fn create(path: &Path, header: LogHeader) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self { file, path: path.to_path_buf() };
        w.write(&LogRecord::Header(Box::new(header)))?;
        Ok(w)
    }

    /// Reopens an existing log, dropping records past `step` (written after
    /// the checkpoint being resumed from).
    fn resume(path: &Path, step: u64) -> Result<Self> {
        let kept: Vec<LogRecord> =
            read_log(path)?.into_iter().filter(|r| r.step().is_none_or(|s| s <= step)).collect();
        if !matches!(kept.first(), Some(LogRecord::Header(_))) {
            return Err(Error::Load(format!("{} does not start with a header", path.display())));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self { file, path: path.to_path_buf() };
        for r in &kept {
            w.write(r)?;
        }
        w.write(&LogRecord::Resume { step })?;
        Ok(w)
    }

    fn write(&mut self, rec: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("log records serialize");
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from `<out>/checkpoint` instead of starting fresh.
    pub resume: bool,
    /// Stop (after checkpointing) once this many steps are done, as if
    /// interrupted. The schedule still follows the configured total.
    pub stop_after: Option<u64>,
    /// Print a progress line every this many steps (0: silent).
    pub progress_every: u64,
}

/// Creates the output directory and writes the effective config. A fresh
/// run replaces any earlier run's log and checkpoint in the same place.
fn prepare_out_dir(cfg: &RunConfig, out: &Path, resume: bool) -> Result<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log = out.join(LOG_FILE);
    let ckpt = out.join(CHECKPOINT_DIR);
    if resume {
        if !ckpt.is_dir() || !log.is_file() {
            return Err(Error::Load(format!("no run to resume in {}", out.display())));
        }
    } else {
        if ckpt.exists() {
            std::fs::remove_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        }
        if log.exists() {
            std::fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
        }
    }
    let cpath = out.join(CONFIG_FILE);
    std::fs::write(&cpath, cfg.to_toml_string()).map_err(|e| Error::io(&cpath, e))?;
    Ok(log)
}

fn data_root(cfg: &RunConfig) -> Result<&Path> {
    cfg.data.root.as_deref().ok_or_else(|| Error::Config("data.root is not set".into()))
}

fn due(every: u64, step: u64) -> bool {
    every > 0 && step.is_multiple_of(every)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps_done: u64,
    pub last_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Masked-patch pretraining of one generator.
pub fn run_pretrain(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let p = &cfg.pretrain;
    let (images, root) = match p.corpus {
        PretrainCorpus::Same => {
            let root = data_root(cfg)?;
            let ds = load_dataset(root, Split::Train, false)?;
            (ds.domain_a.into_iter().chain(ds.domain_b).collect::<Vec<_>>(), root.to_path_buf())
        }
        PretrainCorpus::External => {
            let root = p.external_root.clone().expect("validated");
            let files = list_images(&root)?;
            if files.is_empty() {
                return Err(Error::Dataset(format!("no images in {}", root.display())));
            }
            (files, root)
        }
    };
    let log_path = prepare_out_dir(cfg, out, opts.resume)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    let (mut state, mut log) = if opts.resume {
        let state = load_pretrain_checkpoint(&ckpt)?;
        if state.generator.config != cfg.generator {
            return Err(Error::Load("checkpoint generator does not match the configuration".into()));
        }
        let log = LogWriter::resume(&log_path, state.step)?;
        (state, log)
    } else {
        let gen = init_generator(&cfg.generator, &mut stream(cfg.seed, Stream::InitGenAb))?;
        let header = LogHeader {
            kind: RunKind::Pretrain,
            label: format!("corpus={}", corpus_label(p.corpus)),
            config: cfg.clone(),
            dataset_root: Some(root),
            image_counts: (images.len(), 0),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        (PretrainState::new(gen, PRETRAIN_ADAM), LogWriter::create(&log_path, header)?)
    };
    let protocol = cfg.data.protocol();
    let start = Instant::now();
    let mut last = None;
    let stop = opts.stop_after.unwrap_or(p.total_steps).min(p.total_steps);
    while state.step < stop {
        let step = state.step;
        let mut rng = step_stream(cfg.seed, Stream::Data, step);
        let mut picked = Vec::with_capacity(p.batch_size);
        for _ in 0..p.batch_size {
            let img = load_image(&images[rng.random_range(0..images.len())])?;
            picked.push(augment_pretrain(&img, &protocol, &p.augment, &mut rng)?);
        }
        let spec = MaskSpec {
            patch_size: p.patch_size,
            mask_prob: p.mask_prob,
            seed: step_stream(cfg.seed, Stream::Mask, step).random(),
        };
        let lr = cosine_lr(step, p.total_steps, p.lr)?;
        let loss = pretrain_step(&mut state, &batch(&picked)?, &spec, lr)?;
        last = Some(loss);
        let elapsed_s = start.elapsed().as_secs_f64();
        log.write(&LogRecord::Pretrain { rec: PretrainRecord { step: state.step, lr, loss }, elapsed_s })?;
        if due(opts.progress_every, state.step) {
            eprintln!("pretrain step {}/{} loss {loss:.5} lr {lr:.3e} {elapsed_s:.1}s", state.step, p.total_steps);
        }
        if due(p.checkpoint_every, state.step) {
            save_pretrain_checkpoint(&state, &ckpt)?;
        }
    }
    save_pretrain_checkpoint(&state, &ckpt)?;
    Ok(RunSummary { steps_done: state.step, last_loss: last, checkpoint: ckpt, log: log_path })
}

fn corpus_label(c: PretrainCorpus) -> &'static str {
    match c {
        PretrainCorpus::Same => "same",
        PretrainCorpus::External => "external",
    }
}

/// Draws and augments one batch per domain.
fn next_batches(
    state: &mut TrainState,
    cfg: &RunConfig,
    ds: &crate::data::UnpairedDataset,
) -> Result<(uvc_tensor::Tensor, uvc_tensor::Tensor)> {
    let protocol = cfg.data.protocol();
    let sampler = state.sampler.as_mut().expect("sampler initialised");
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for _ in 0..cfg.train.batch_size {
        let (a, b) = sample_unpaired(ds, sampler, state.rng_data.rng())?;
        xs.push(augment_train(&a, &protocol, state.rng_aug.rng())?);
        ys.push(augment_train(&b, &protocol, state.rng_aug.rng())?);
    }
    Ok((batch(&xs)?, batch(&ys)?))
}

/// Unpaired translation training on `data.root`.
pub fn run_training(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let t = &cfg.train;
    let root = data_root(cfg)?;
    let ds = load_dataset(root, Split::Train, false)?;
    let log_path = prepare_out_dir(cfg, out, opts.resume)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    let (mut state, mut log) = if opts.resume {
        let state = load_train_checkpoint(&ckpt, &cfg.generator, &cfg.discriminator)?;
        if state.pool_a.capacity != t.pool_size {
            return Err(Error::Load(format!(
                "checkpoint pool capacity {} differs from train.pool_size {}",
                state.pool_a.capacity, t.pool_size
            )));
        }
        if let Some(s) = &state.sampler {
            if (s.a.len(), s.b.len()) != ds.counts() {
                return Err(Error::Dataset(format!(
                    "dataset changed since the checkpoint: {:?} images then, {:?} now",
                    (s.a.len(), s.b.len()),
                    ds.counts()
                )));
            }
        }
        let log = LogWriter::resume(&log_path, state.iteration)?;
        (state, log)
    } else {
        let pretrained = match t.pretrain {
            PretrainSource::None => None,
            PretrainSource::Same | PretrainSource::External => {
                let path = t.pretrained_checkpoint.as_ref().expect("validated");
                Some(load_generator(path, GeneratorSlot::AtoB)?)
            }
        };
        let state = init_train(t, &cfg.generator, &cfg.discriminator, pretrained.as_ref(), cfg.seed)?;
        let header = LogHeader {
            kind: RunKind::Train,
            label: t.ablation_label(),
            config: cfg.clone(),
            dataset_root: Some(root.to_path_buf()),
            image_counts: ds.counts(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        (state, LogWriter::create(&log_path, header)?)
    };
    if state.sampler.is_none() {
        state.sampler = Some(UnpairedSampler::new(&ds));
    }
    let start = Instant::now();
    let mut last = None;
    let stop = opts.stop_after.unwrap_or(t.total_iters).min(t.total_iters);
    while state.iteration < stop {
        let (a, b) = next_batches(&mut state, cfg, &ds)?;
        let m = train_iteration(&mut state, t, &cfg.loss, &a, &b)?;
        last = Some(m.gen.total);
        let elapsed_s = start.elapsed().as_secs_f64();
        log.write(&LogRecord::Train { iter: m, elapsed_s })?;
        if due(opts.progress_every, m.iteration) {
            eprintln!(
                "iter {}/{} gen {:.4} cyc {:.4}/{:.4} disc {:.4}/{:.4} lr {:.3e} {elapsed_s:.1}s",
                m.iteration, t.total_iters, m.gen.total, m.gen.cyc_a, m.gen.cyc_b, m.disc.loss_a, m.disc.loss_b, m.lr
            );
        }
        if due(t.checkpoint_every, m.iteration) {
            save_train_checkpoint(&state, &ckpt)?;
        }
    }
    save_train_checkpoint(&state, &ckpt)?;
    Ok(RunSummary { steps_done: state.iteration, last_loss: last, checkpoint: ckpt, log: log_path })
}

/// Per-run digest of a log, for the `report` command.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogSummary {
    pub kind: RunKind,
    pub label: String,
    pub steps: u64,
    pub resumes: usize,
    /// Mean over the last (up to) 100 records.
    pub tail_mean: std::collections::BTreeMap<String, f64>,
}

pub fn summarize_log(path: &Path) -> Result<LogSummary> {
    let recs = read_log(path)?;
    let Some(LogRecord::Header(h)) = recs.first() else {
        return Err(Error::Load(format!("{} does not start with a header", path.display())));
    };
    let steps: Vec<&LogRecord> = recs.iter().filter(|r| r.step().is_some()).collect();
    let tail = &steps[steps.len().saturating_sub(100)..];
    let mut sums = std::collections::BTreeMap::<String, f64>::new();
    for r in tail {
        let fields: Vec<(&str, f64)> = match r {
            LogRecord::Pretrain { rec, .. } => vec![("loss", rec.loss)],
            LogRecord::Train { iter, .. } => vec![
                ("gen_total", iter.gen.total),
                ("cyc_a", iter.gen.cyc_a),
                ("cyc_b", iter.gen.cyc_b),
                ("idt_a", iter.gen.idt_a),
                ("idt_b", iter.gen.idt_b),
                ("adv_ab", iter.gen.adv_ab),
                ("adv_ba", iter.gen.adv_ba),
                ("disc_a", iter.disc.loss_a),
                ("disc_b", iter.disc.loss_b),
                ("gp_a", iter.disc.gp_a),
                ("gp_b", iter.disc.gp_b),
            ],
            _ => vec![],
        };
        for (k, v) in fields {
            *sums.entry(k.to_string()).or_default() += v;
        }
    }
    let n = tail.len().max(1) as f64;
    Ok(LogSummary {
        kind: h.kind,
        label: h.label.clone(),
        steps: steps.last().and_then(|r| r.step()).unwrap_or(0),
        resumes: recs.iter().filter(|r| matches!(r, LogRecord::Resume { .. })).count(),
        tail_mean: sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
    })
}

/// File name of the side-by-side sheet written by [`translate_dir`].
pub const GRID_FILE: &str = "translation_grid.png";

/// Translates every image in `input` with `generator`, writing outputs
/// under the same file names in `output` plus an input|output grid.
/// With `size`, images are first resized and centre-cropped to it.
pub fn translate_dir(generator: &Generator, input: &Path, output: &Path, size: Option<usize>) -> Result<Vec<PathBuf>> {
    let files = list_images(input)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", input.display())));
    }
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let _guard = no_grad();
    let mut pairs = Vec::with_capacity(files.len());
    let mut written = Vec::with_capacity(files.len());
    for f in &files {
        let name = f.file_name().expect("listed files have names");
        if name == GRID_FILE {
            return Err(Error::Input(format!("input {} collides with the grid file name", f.display())));
        }
        let img = load_image(f)?;
        let img = match size {
            Some(s) => eval_preprocess(&img, s)?,
            None => img,
        };
        let out = Image::from_batch(&generator.forward(&img.to_tensor())?).remove(0);
        let dest = output.join(name);
        save_image(&dest, &out)?;
        written.push(dest);
        pairs.push((img, out));
    }
    save_image(&output.join(GRID_FILE), &grid(&pairs))?;
    Ok(written)
}

/// One row per pair, input left of output, on a white background.
fn grid(pairs: &[(Image, Image)]) -> Image {
    let cell_h = pairs.iter().map(|(a, _)| a.height).max().unwrap_or(0);
    let cell_w = pairs.iter().map(|(a, _)| a.width).max().unwrap_or(0);
    let (h, w) = (cell_h * pairs.len(), cell_w * 2);
    let mut sheet = Image::filled(3, h, w, 1.0);
    for (row, (a, b)) in pairs.iter().enumerate() {
        for (col, img) in [a, b].into_iter().enumerate() {
            for c in 0..3 {
                for y in 0..img.height {
                    let src = &img.data[(c * img.height + y) * img.width..][..img.width];
                    let start = (c * h + row * cell_h + y) * w + col * cell_w;
                    sheet.data[start..start + img.width].copy_from_slice(src);
                }
            }
        }
    }
    sheet
}
