//! The cycle-consistent training iteration: translate, update both
//! discriminators, then update both generators against the freshly updated
//! (and frozen) discriminators.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};
use uvc_tensor::optim::{Adam, AdamConfig};
use uvc_tensor::{backward, Gradients, Tensor};

use crate::data::{batch, Image};
use crate::discriminator::{init_discriminator, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{init_generator, Generator, GeneratorConfig};
use crate::losses::{
    cycle_loss, discriminator_total, generator_total, gradient_penalty, identity_loss, lsgan_disc_adv, lsgan_gen_adv,
    LossWeights,
};
use crate::params::Params;
use crate::rng::{NamedRng, Stream};

/// Where the generators start from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainSource {
    /// Independent random initialization.
    None,
    /// Pretrained on the union of both training domains.
    Same,
    /// Pretrained on an unrelated image corpus.
    External,
}

impl PretrainSource {
    pub fn label(self) -> &'static str {
        match self {
            PretrainSource::None => "none",
            PretrainSource::Same => "same",
            PretrainSource::External => "external",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub use_identity: bool,
    pub use_gp: bool,
    pub pretrain: PretrainSource,
    /// Pretraining checkpoint directory; required unless `pretrain = none`.
    pub pretrained_checkpoint: Option<PathBuf>,
    pub pool_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Save a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 1_000_000,
            lr: 1e-4,
            batch_size: 1,
            use_identity: true,
            use_gp: true,
            pretrain: PretrainSource::None,
            pretrained_checkpoint: None,
            pool_size: 50,
            beta1: 0.5,
            beta2: 0.999,
            checkpoint_every: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::Config("train.total_iters must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1), got {b}")));
            }
        }
        match (self.pretrain, &self.pretrained_checkpoint) {
            (PretrainSource::None, Some(_)) => Err(Error::Config(
                "train.pretrained_checkpoint is set but train.pretrain = \"none\"".into(),
            )),
            (PretrainSource::Same | PretrainSource::External, None) => Err(Error::Config(format!(
                "train.pretrain = \"{}\" requires train.pretrained_checkpoint",
                self.pretrain.label()
            ))),
            _ => Ok(()),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: 1e-8 }
    }

    /// Short description of the ablation axes, written into every log.
    pub fn ablation_label(&self) -> String {
        let onoff = |b: bool| if b { "on" } else { "off" };
        format!("pretrain={} gp={} idt={}", self.pretrain.label(), onoff(self.use_gp), onoff(self.use_identity))
    }
}

/// Constant learning rate for the first half, then a linear decay that
/// reaches zero at `total`.
pub fn lr_schedule(step: u64, total: u64, lr: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::Contract(format!("lr_schedule: step {step} outside [0, {total}]")));
    }
    let half = total as f64 / 2.0;
    let s = step as f64;
    Ok(if s < half { lr } else { lr * (1.0 - (s - half) / half) })
}

/// History of generated images shown to the discriminators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImagePool {
    pub capacity: usize,
    pub images: Vec<Image>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, images: Vec::new() }
    }
}

/// Below capacity the fresh image is stored and returned. At capacity,
/// with probability 1/2 the fresh image is returned; otherwise it replaces a
/// uniformly chosen stored image, which is returned instead.
pub fn pool_sample<R: Rng>(pool: &mut ImagePool, fresh: Image, rng: &mut R) -> Image {
    if pool.capacity == 0 {
        return fresh;
    }
    if pool.images.len() < pool.capacity {
        pool.images.push(fresh.clone());
        return fresh;
    }
    if rng.random_bool(0.5) {
        fresh
    } else {
        let i = rng.random_range(0..pool.images.len());
        std::mem::replace(&mut pool.images[i], fresh)
    }
}

fn pool_batch<R: Rng>(pool: &mut ImagePool, fresh: &Tensor, rng: &mut R) -> Result<Tensor> {
    let images: Vec<Image> = Image::from_batch(fresh).into_iter().map(|im| pool_sample(pool, im, rng)).collect();
    batch(&images)
}

/// Everything a training run mutates.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub gen_ab: Generator,
    pub gen_ba: Generator,
    pub disc_a: Discriminator,
    pub disc_b: Discriminator,
    pub opt_gen: Adam,
    pub opt_disc: Adam,
    pub iteration: u64,
    pub pool_a: ImagePool,
    pub pool_b: ImagePool,
    pub rng_data: NamedRng,
    pub rng_aug: NamedRng,
    pub rng_pool: NamedRng,
    /// Per-domain sampling order, created on first use.
    pub sampler: Option<crate::data::UnpairedSampler>,
}

/// Builds the initial state. With a pretrained generator both generators
/// start as copies of it; otherwise each gets its own random stream.
pub fn init_train(
    config: &TrainConfig,
    gen_config: &GeneratorConfig,
    disc_config: &DiscriminatorConfig,
    pretrained: Option<&Generator>,
    seed: u64,
) -> Result<TrainState> {
    config.validate()?;
    let (gen_ab, gen_ba) = match pretrained {
        Some(g) => {
            if &g.config != gen_config {
                return Err(Error::Load(format!(
                    "pretrained generator config {:?} does not match {:?}",
                    g.config, gen_config
                )));
            }
            let copy = || Generator { config: g.config.clone(), params: g.params.trainable() };
            (copy(), copy())
        }
        None => (
            init_generator(gen_config, NamedRng::new(seed, Stream::InitGenAb).rng())?,
            init_generator(gen_config, NamedRng::new(seed, Stream::InitGenBa).rng())?,
        ),
    };
    Ok(TrainState {
        gen_ab,
        gen_ba,
        disc_a: init_discriminator(disc_config, NamedRng::new(seed, Stream::InitDiscA).rng())?,
        disc_b: init_discriminator(disc_config, NamedRng::new(seed, Stream::InitDiscB).rng())?,
        opt_gen: Adam::new(config.adam()),
        opt_disc: Adam::new(config.adam()),
        iteration: 0,
        pool_a: ImagePool::new(config.pool_size),
        pool_b: ImagePool::new(config.pool_size),
        rng_data: NamedRng::new(seed, Stream::Data),
        rng_aug: NamedRng::new(seed, Stream::Aug),
        rng_pool: NamedRng::new(seed, Stream::Pool),
        sampler: None,
    })
}

/// Outputs of the translation phase; they keep their autograd history.
#[derive(Clone, Debug)]
pub struct Translation {
    pub b_t: Tensor,
    pub a_t: Tensor,
    pub a_cyc: Tensor,
    pub b_cyc: Tensor,
    pub a_idt: Option<Tensor>,
    pub b_idt: Option<Tensor>,
}

/// All six translations: `b_t = G_ab(a)`, `a_t = G_ba(b)`, the two round
/// trips and the two same-domain (identity) passes.
pub fn translate_pass(state: &TrainState, a: &Tensor, b: &Tensor) -> Result<Translation> {
    translate_pass_with(state, a, b, true)
}

/// As [`translate_pass`], skipping the identity passes when not needed.
pub fn translate_pass_with(state: &TrainState, a: &Tensor, b: &Tensor, identity: bool) -> Result<Translation> {
    let b_t = state.gen_ab.forward(a)?;
    let a_t = state.gen_ba.forward(b)?;
    let a_cyc = state.gen_ba.forward(&b_t)?;
    let b_cyc = state.gen_ab.forward(&a_t)?;
    let (a_idt, b_idt) = if identity {
        (Some(state.gen_ba.forward(a)?), Some(state.gen_ab.forward(b)?))
    } else {
        (None, None)
    };
    Ok(Translation { b_t, a_t, a_cyc, b_cyc, a_idt, b_idt })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscMetrics {
    pub adv_a: f64,
    pub adv_b: f64,
    pub gp_a: f64,
    pub gp_b: f64,
    pub loss_a: f64,
    pub loss_b: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenMetrics {
    /// Adversarial loss of `G_ab` as judged by `D_b`.
    pub adv_ab: f64,
    pub adv_ba: f64,
    pub idt_a: f64,
    pub idt_b: f64,
    pub cyc_a: f64,
    pub cyc_b: f64,
    pub total: f64,
}

fn check_grads<'a>(grads: &Gradients, params: impl IntoIterator<Item = &'a Params>, what: &str) -> Result<()> {
    for p in params {
        if p.iter().any(|(_, t)| grads.get(t).is_some_and(|g| !g.all_finite())) {
            return Err(Error::Numeric(format!("non-finite {what} gradient")));
        }
    }
    Ok(())
}

fn named<'a>(prefix: &'a str, p: &'a mut Params) -> impl Iterator<Item = (String, &'a mut Tensor)> + 'a {
    p.iter_mut().map(move |(k, v)| (format!("{prefix}.{k}"), v))
}

/// Discriminator losses on real images and pooled fakes, with the gradient
/// penalty averaged over the real and fake batches.
fn disc_loss(
    d: &Discriminator,
    real: &Tensor,
    fake: &Tensor,
    use_gp: bool,
    w: &LossWeights,
) -> Result<(Tensor, f64, f64)> {
    let adv = lsgan_disc_adv(&d.forward(real)?, &d.forward(fake)?)?;
    let gp = if use_gp {
        let f = |x: &Tensor| d.forward_unchecked(x);
        (gradient_penalty(f, real, w.gamma)? + gradient_penalty(f, fake, w.gamma)?).mul_scalar(0.5)
    } else {
        Tensor::scalar(0.0)
    };
    let (adv_v, gp_v) = (adv.item(), gp.item());
    Ok((discriminator_total(&adv, &gp, w)?, adv_v, gp_v))
}

/// Updates both discriminators. `b_t` and `a_t` are detached here, pass
/// through the image pools, and never carry gradient to the generators.
#[allow(clippy::too_many_arguments)]
pub fn disc_step(
    state: &mut TrainState,
    config: &TrainConfig,
    weights: &LossWeights,
    a: &Tensor,
    b: &Tensor,
    b_t: &Tensor,
    a_t: &Tensor,
    lr: f64,
) -> Result<DiscMetrics> {
    let fake_a = pool_batch(&mut state.pool_a, &a_t.detach(), state.rng_pool.rng())?;
    let fake_b = pool_batch(&mut state.pool_b, &b_t.detach(), state.rng_pool.rng())?;
    let (loss_a, adv_a, gp_a) = disc_loss(&state.disc_a, a, &fake_a, config.use_gp, weights)?;
    let (loss_b, adv_b, gp_b) = disc_loss(&state.disc_b, b, &fake_b, config.use_gp, weights)?;
    let metrics = DiscMetrics { adv_a, adv_b, gp_a, gp_b, loss_a: loss_a.item(), loss_b: loss_b.item() };
    let total = loss_a + loss_b;
    if !total.all_finite() {
        return Err(Error::Numeric(format!("discriminator loss is {} at iteration {}", total.item(), state.iteration)));
    }
    let grads = backward(&total);
    check_grads(&grads, [&state.disc_a.params, &state.disc_b.params], "discriminator")?;
    let params = named("disc_a", &mut state.disc_a.params).chain(named("disc_b", &mut state.disc_b.params));
    state.opt_disc.step(lr, params, &grads);
    Ok(metrics)
}

/// Updates both generators on the cycle-consistent objective. The
/// discriminators enter as constants and are left untouched.
pub fn gen_step(
    state: &mut TrainState,
    config: &TrainConfig,
    weights: &LossWeights,
    a: &Tensor,
    b: &Tensor,
    tr: &Translation,
    lr: f64,
) -> Result<GenMetrics> {
    let (d_a, d_b) = (state.disc_a.frozen(), state.disc_b.frozen());
    let adv_ab = lsgan_gen_adv(&d_b.forward(&tr.b_t)?)?;
    let adv_ba = lsgan_gen_adv(&d_a.forward(&tr.a_t)?)?;
    let cyc_a = cycle_loss(a, &tr.a_cyc)?;
    let cyc_b = cycle_loss(b, &tr.b_cyc)?;
    let (idt_a, idt_b) = match (config.use_identity, &tr.a_idt, &tr.b_idt) {
        (true, Some(ai), Some(bi)) => (identity_loss(a, ai)?, identity_loss(b, bi)?),
        (true, _, _) => return Err(Error::Contract("identity loss enabled but identity passes missing".into())),
        (false, _, _) => (Tensor::scalar(0.0), Tensor::scalar(0.0)),
    };
    let adv = (&adv_ab + &adv_ba).mul_scalar(0.5);
    let idt = (&idt_a + &idt_b).mul_scalar(0.5);
    let cyc = (&cyc_a + &cyc_b).mul_scalar(0.5);
    let total = generator_total(&adv, &idt, &cyc, weights)?;
    let metrics = GenMetrics {
        adv_ab: adv_ab.item(),
        adv_ba: adv_ba.item(),
        idt_a: idt_a.item(),
        idt_b: idt_b.item(),
        cyc_a: cyc_a.item(),
        cyc_b: cyc_b.item(),
        total: total.item(),
    };
    if !total.all_finite() {
        return Err(Error::Numeric(format!("generator loss is {} at iteration {}", metrics.total, state.iteration)));
    }
    let grads = backward(&total);
    check_grads(&grads, [&state.gen_ab.params, &state.gen_ba.params], "generator")?;
    let params = named("gen_ab", &mut state.gen_ab.params).chain(named("gen_ba", &mut state.gen_ba.params));
    state.opt_gen.step(lr, params, &grads);
    Ok(metrics)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iteration: u64,
    pub lr: f64,
    pub disc: DiscMetrics,
    pub gen: GenMetrics,
}

/// One full iteration on a prepared batch pair. On error the state is
/// exactly as before the call.
pub fn train_iteration(
    state: &mut TrainState,
    config: &TrainConfig,
    weights: &LossWeights,
    a: &Tensor,
    b: &Tensor,
) -> Result<IterMetrics> {
    if state.iteration >= config.total_iters {
        return Err(Error::Contract(format!(
            "iteration {} has reached total_iters = {}",
            state.iteration, config.total_iters
        )));
    }
    let lr = lr_schedule(state.iteration, config.total_iters, config.lr)?;
    let backup = (
        state.disc_a.params.clone(),
        state.disc_b.params.clone(),
        state.opt_disc.clone(),
        state.pool_a.clone(),
        state.pool_b.clone(),
        state.rng_pool.clone(),
    );
    let result = (|| {
        let tr = translate_pass_with(state, a, b, config.use_identity)?;
        let disc = disc_step(state, config, weights, a, b, &tr.b_t, &tr.a_t, lr)?;
        let gen = gen_step(state, config, weights, a, b, &tr, lr)?;
        Ok((disc, gen))
    })();
    match result {
        Ok((disc, gen)) => {
            state.iteration += 1;
            Ok(IterMetrics { iteration: state.iteration, lr, disc, gen })
        }
        Err(e) => {
            (state.disc_a.params, state.disc_b.params, state.opt_disc, state.pool_a, state.pool_b, state.rng_pool) =
                backup;
            Err(e)
        }
    }
}
