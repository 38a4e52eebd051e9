//! Checkpoint directories: a JSON manifest plus one binary blob per tensor
//! group. Directories are written under a temporary name and renamed into
//! place, so a crash never leaves a half-written checkpoint at `path`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uvc_tensor::optim::{Adam, AdamConfig, Moments};

use crate::data::{Image, UnpairedSampler};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::params::{read_blob, write_blob, Params, RawTensors};
use crate::pretrain::PretrainState;
use crate::rng::{NamedRng, RngState};
use crate::trainer::{ImagePool, TrainState};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Pretrain,
    Train,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    config: AdamConfig,
    steps: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: CheckpointKind,
    iteration: u64,
    generator: GeneratorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    discriminator: Option<DiscriminatorConfig>,
    optimizers: BTreeMap<String, OptimizerMeta>,
    #[serde(default)]
    rng: Vec<RngState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sampler: Option<UnpairedSampler>,
    #[serde(default)]
    pool_capacity: usize,
    /// SHA-256 of every blob file, checked on load.
    blobs: BTreeMap<String, String>,
}

struct Writer {
    dir: PathBuf,
    blobs: BTreeMap<String, String>,
}

impl Writer {
    fn blob(&mut self, name: &str, raw: &RawTensors) -> Result<()> {
        let path = self.dir.join(format!("{name}.bin"));
        write_blob(&path, raw)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.blobs.insert(name.to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }
}

fn moments_raw(opt: &Adam) -> (RawTensors, RawTensors) {
    let mut m = RawTensors::new();
    let mut v = RawTensors::new();
    for (k, mo) in opt.moments() {
        m.insert(k.clone(), (vec![mo.m.len()], mo.m.clone()));
        v.insert(k.clone(), (vec![mo.v.len()], mo.v.clone()));
    }
    (m, v)
}

fn pool_raw(pool: &ImagePool) -> RawTensors {
    pool.images
        .iter()
        .enumerate()
        .map(|(i, im)| (format!("{i:06}"), (vec![im.channels, im.height, im.width], im.data.clone())))
        .collect()
}

fn pool_from_raw(raw: RawTensors, capacity: usize) -> Result<ImagePool> {
    let images = raw
        .into_values()
        .map(|(shape, data)| match shape.as_slice() {
            &[c, h, w] => Ok(Image::new(c, h, w, data)),
            _ => Err(Error::Load(format!("pool image with shape {shape:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if images.len() > capacity {
        return Err(Error::Load(format!("pool holds {} images, capacity {capacity}", images.len())));
    }
    Ok(ImagePool { capacity, images })
}

/// Writes through a sibling temp directory and renames it over `path`.
fn write_atomically(path: &Path, fill: impl FnOnce(&mut Writer) -> Result<Manifest>) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = path.file_name().ok_or_else(|| Error::Contract(format!("bad checkpoint path {}", path.display())))?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = Writer { dir: tmp.clone(), blobs: BTreeMap::new() };
    let mut manifest = fill(&mut w)?;
    manifest.blobs = w.blobs;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = tmp.join(MANIFEST);
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    if path.exists() {
        let old = parent.join(format!(".{}.old-{}", name.to_string_lossy(), std::process::id()));
        std::fs::rename(path, &old).map_err(|e| Error::io(path, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        std::fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let mpath = path.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", mpath.display())))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Load(format!("corrupt manifest {}: {e}", mpath.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Load(format!(
            "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

fn read_checked(path: &Path, m: &Manifest, name: &str) -> Result<RawTensors> {
    let file = path.join(format!("{name}.bin"));
    let expected = m.blobs.get(name).ok_or_else(|| Error::Load(format!("manifest does not list blob {name}")))?;
    let bytes = std::fs::read(&file).map_err(|e| Error::Load(format!("cannot read {}: {e}", file.display())))?;
    if &hex::encode(Sha256::digest(&bytes)) != expected {
        return Err(Error::Load(format!("checksum mismatch for {}", file.display())));
    }
    read_blob(&file)
}

fn load_params(path: &Path, m: &Manifest, name: &str, template: &Params) -> Result<Params> {
    let p = Params::from_raw(read_checked(path, m, name)?, true);
    template.check_compatible(&p, name)?;
    Ok(p)
}

fn load_optimizer(path: &Path, m: &Manifest, name: &str) -> Result<Adam> {
    let meta = m.optimizers.get(name).ok_or_else(|| Error::Load(format!("manifest lacks optimizer {name}")))?;
    let mr = read_checked(path, m, &format!("{name}.m"))?;
    let vr = read_checked(path, m, &format!("{name}.v"))?;
    if mr.len() != vr.len() {
        return Err(Error::Load(format!("optimizer {name}: moment tables differ")));
    }
    let mut moments = BTreeMap::new();
    for ((k, (_, m1)), (k2, (_, v1))) in mr.into_iter().zip(vr) {
        if k != k2 || m1.len() != v1.len() {
            return Err(Error::Load(format!("optimizer {name}: moment tables differ at {k}")));
        }
        moments.insert(k, Moments { m: m1, v: v1 });
    }
    Ok(Adam::from_state(meta.config, meta.steps, moments))
}

fn write_optimizer(w: &mut Writer, name: &str, opt: &Adam, metas: &mut BTreeMap<String, OptimizerMeta>) -> Result<()> {
    let (m, v) = moments_raw(opt);
    w.blob(&format!("{name}.m"), &m)?;
    w.blob(&format!("{name}.v"), &v)?;
    metas.insert(name.to_string(), OptimizerMeta { config: opt.config(), steps: opt.steps() });
    Ok(())
}

fn check_moments(opt: &Adam, prefix: &str, nets: &[(&str, &Params)]) -> Result<()> {
    for (k, mo) in opt.moments() {
        let ok = nets.iter().any(|(net, p)| {
            k.strip_prefix(&format!("{net}."))
                .and_then(|name| p.try_get(name))
                .is_some_and(|t| t.numel() == mo.m.len())
        });
        if !ok {
            return Err(Error::Load(format!("{prefix}: optimizer entry {k} matches no parameter")));
        }
    }
    Ok(())
}

pub fn save_train_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    write_atomically(path, |w| {
        w.blob("gen_ab", &state.gen_ab.params.to_raw())?;
        w.blob("gen_ba", &state.gen_ba.params.to_raw())?;
        w.blob("disc_a", &state.disc_a.params.to_raw())?;
        w.blob("disc_b", &state.disc_b.params.to_raw())?;
        let mut optimizers = BTreeMap::new();
        write_optimizer(w, "opt_gen", &state.opt_gen, &mut optimizers)?;
        write_optimizer(w, "opt_disc", &state.opt_disc, &mut optimizers)?;
        w.blob("pool_a", &pool_raw(&state.pool_a))?;
        w.blob("pool_b", &pool_raw(&state.pool_b))?;
        Ok(Manifest {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Train,
            iteration: state.iteration,
            generator: state.gen_ab.config.clone(),
            discriminator: Some(state.disc_a.config.clone()),
            optimizers,
            rng: vec![state.rng_data.state(), state.rng_aug.state(), state.rng_pool.state()],
            sampler: state.sampler.clone(),
            pool_capacity: state.pool_a.capacity,
            blobs: BTreeMap::new(),
        })
    })
}

/// Restores a training state. The stored architecture must equal the
/// expected configs.
pub fn load_train_checkpoint(
    path: &Path,
    gen_config: &GeneratorConfig,
    disc_config: &DiscriminatorConfig,
) -> Result<TrainState> {
    let m = read_manifest(path)?;
    if m.kind != CheckpointKind::Train {
        return Err(Error::Load(format!("{} is a {:?} checkpoint, not a training one", path.display(), m.kind)));
    }
    if &m.generator != gen_config {
        return Err(Error::Load(format!(
            "generator config mismatch: checkpoint has {:?}, run expects {:?}",
            m.generator, gen_config
        )));
    }
    let stored_disc = m.discriminator.clone().ok_or_else(|| Error::Load("manifest lacks discriminator".into()))?;
    if &stored_disc != disc_config {
        return Err(Error::Load(format!(
            "discriminator config mismatch: checkpoint has {stored_disc:?}, run expects {disc_config:?}"
        )));
    }
    // templates give the expected names and shapes
    let gt = crate::generator::init_generator(gen_config, &mut crate::rng::stream(0, crate::rng::Stream::InitGenAb))?;
    let dt = crate::discriminator::init_discriminator(
        disc_config,
        &mut crate::rng::stream(0, crate::rng::Stream::InitDiscA),
    )?;
    let generator = |name: &str| -> Result<Generator> {
        Ok(Generator { config: gen_config.clone(), params: load_params(path, &m, name, &gt.params)? })
    };
    let discriminator = |name: &str| -> Result<Discriminator> {
        Ok(Discriminator { config: disc_config.clone(), params: load_params(path, &m, name, &dt.params)? })
    };
    let state_rng = |i: usize| -> Result<NamedRng> {
        NamedRng::restore(m.rng.get(i).ok_or_else(|| Error::Load("manifest lacks rng state".into()))?)
    };
    let state = TrainState {
        gen_ab: generator("gen_ab")?,
        gen_ba: generator("gen_ba")?,
        disc_a: discriminator("disc_a")?,
        disc_b: discriminator("disc_b")?,
        opt_gen: load_optimizer(path, &m, "opt_gen")?,
        opt_disc: load_optimizer(path, &m, "opt_disc")?,
        iteration: m.iteration,
        pool_a: pool_from_raw(read_checked(path, &m, "pool_a")?, m.pool_capacity)?,
        pool_b: pool_from_raw(read_checked(path, &m, "pool_b")?, m.pool_capacity)?,
        rng_data: state_rng(0)?,
        rng_aug: state_rng(1)?,
        rng_pool: state_rng(2)?,
        sampler: m.sampler.clone(),
    };
    check_moments(&state.opt_gen, "opt_gen", &[("gen_ab", &state.gen_ab.params), ("gen_ba", &state.gen_ba.params)])?;
    check_moments(
        &state.opt_disc,
        "opt_disc",
        &[("disc_a", &state.disc_a.params), ("disc_b", &state.disc_b.params)],
    )?;
    Ok(state)
}

pub fn save_pretrain_checkpoint(state: &PretrainState, path: &Path) -> Result<()> {
    write_atomically(path, |w| {
        w.blob("generator", &state.generator.params.to_raw())?;
        let mut optimizers = BTreeMap::new();
        write_optimizer(w, "opt", &state.optimizer, &mut optimizers)?;
        Ok(Manifest {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Pretrain,
            iteration: state.step,
            generator: state.generator.config.clone(),
            discriminator: None,
            optimizers,
            rng: Vec::new(),
            sampler: None,
            pool_capacity: 0,
            blobs: BTreeMap::new(),
        })
    })
}

pub fn load_pretrain_checkpoint(path: &Path) -> Result<PretrainState> {
    let m = read_manifest(path)?;
    if m.kind != CheckpointKind::Pretrain {
        return Err(Error::Load(format!("{} is not a pretraining checkpoint", path.display())));
    }
    let gt = crate::generator::init_generator(&m.generator, &mut crate::rng::stream(0, crate::rng::Stream::InitGenAb))?;
    let generator = Generator { config: m.generator.clone(), params: load_params(path, &m, "generator", &gt.params)? };
    Ok(PretrainState { generator, optimizer: load_optimizer(path, &m, "opt")?, step: m.iteration })
}

/// Any checkpoint's generator for translation: the pretrained generator,
/// or `gen_ab` / `gen_ba` of a training checkpoint.
pub fn load_generator(path: &Path, which: GeneratorSlot) -> Result<Generator> {
    let m = read_manifest(path)?;
    let name = match (m.kind, which) {
        (CheckpointKind::Pretrain, _) => "generator",
        (CheckpointKind::Train, GeneratorSlot::AtoB) => "gen_ab",
        (CheckpointKind::Train, GeneratorSlot::BtoA) => "gen_ba",
    };
    let gt = crate::generator::init_generator(&m.generator, &mut crate::rng::stream(0, crate::rng::Stream::InitGenAb))?;
    Ok(Generator { config: m.generator.clone(), params: load_params(path, &m, name, &gt.params)?.frozen() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorSlot {
    AtoB,
    BtoA,
}

/// SHA-256 over the manifest and all blobs, identifying a checkpoint.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    let m = read_manifest(path)?;
    let mut h = Sha256::new();
    for (name, digest) in &m.blobs {
        h.update(name.as_bytes());
        h.update(digest.as_bytes());
    }
    h.update(serde_json::to_vec(&m.generator).expect("serializes"));
    h.update(m.iteration.to_le_bytes());
    Ok(hex::encode(h.finalize()))
}
