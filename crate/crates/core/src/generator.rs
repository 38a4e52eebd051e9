//! UNet generator with a pixel-wise transformer bottleneck.
//!
//! Encoder level `i` runs a basic block `c[i-1] -> c[i]`, keeps the result as
//! a skip, then halves the resolution with a stride-2 2x2 convolution. The
//! channel ladder is `c = [f0, f0, 2 f0, 4 f0, ...]`, so the deepest skip and
//! the bottleneck both have `f = f0 * 2^(levels-1)` channels.

use rand::Rng;
use serde::{Deserialize, Serialize};
use uvc_tensor::Tensor;

use crate::error::{Error, Result};
use crate::nn::{conv, instance_norm};
use crate::params::{Init, Params};
use crate::vit;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub base_features: usize,
    pub levels: usize,
    pub token_features: usize,
    pub pe_features: usize,
    pub vit_features: usize,
    pub ffn_features: usize,
    pub vit_blocks: usize,
    pub heads: usize,
    pub leaky_slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_features: 48,
            levels: 4,
            token_features: 384,
            pe_features: 384,
            vit_features: 384,
            ffn_features: 1536,
            vit_blocks: 12,
            heads: 6,
            leaky_slope: 0.2,
        }
    }
}

impl GeneratorConfig {
    /// A narrow variant with the same topology, for fast CPU runs.
    pub fn small() -> Self {
        Self {
            base_features: 8,
            token_features: 64,
            pe_features: 32,
            vit_features: 48,
            ffn_features: 96,
            heads: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("in_channels", self.in_channels),
            ("base_features", self.base_features),
            ("levels", self.levels),
            ("token_features", self.token_features),
            ("pe_features", self.pe_features),
            ("vit_features", self.vit_features),
            ("ffn_features", self.ffn_features),
            ("vit_blocks", self.vit_blocks),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("generator.{name} must be positive")));
        }
        if self.levels > 8 {
            return Err(Error::Config(format!("generator.levels = {} is unreasonably deep", self.levels)));
        }
        let expect = self.base_features << (self.levels - 1);
        if self.token_features != expect {
            return Err(Error::Config(format!(
                "generator.token_features = {} but base_features * 2^(levels-1) = {expect}",
                self.token_features
            )));
        }
        if !self.vit_features.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "generator.vit_features = {} is not divisible by heads = {}",
                self.vit_features, self.heads
            )));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config("generator.leaky_slope must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Channels at encoder depth `i` (0 is the pre-process output).
    pub fn channels(&self, i: usize) -> usize {
        if i == 0 {
            self.base_features
        } else {
            self.base_features << (i - 1)
        }
    }

    /// Spatial dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }
}

/// Generator configuration together with its weights.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: Params,
}

pub fn init_generator<R: Rng>(config: &GeneratorConfig, rng: &mut R) -> Result<Generator> {
    config.validate()?;
    let mut init = Init::new(rng, INIT_STD);
    let conv_p = |init: &mut Init<R>, name: &str, cin: usize, cout: usize, k: usize| {
        init.weight(format!("{name}.weight"), &[cout, cin, k, k]);
        init.constant(format!("{name}.bias"), &[cout], 0.0);
    };
    let block_p = |init: &mut Init<R>, name: &str, cin: usize, cout: usize| {
        init.constant(format!("{name}.norm1.weight"), &[cin], 1.0);
        init.constant(format!("{name}.norm1.bias"), &[cin], 0.0);
        conv_p(init, &format!("{name}.conv1"), cin, cout, 3);
        init.constant(format!("{name}.norm2.weight"), &[cout], 1.0);
        init.constant(format!("{name}.norm2.bias"), &[cout], 0.0);
        conv_p(init, &format!("{name}.conv2"), cout, cout, 3);
    };
    conv_p(&mut init, "pre", config.in_channels, config.base_features, 3);
    for i in 1..=config.levels {
        let (cp, ci) = (config.channels(i - 1), config.channels(i));
        block_p(&mut init, &format!("enc{i}"), cp, ci);
        conv_p(&mut init, &format!("down{i}"), ci, ci, 2);
    }
    vit::init_params(&mut init, config);
    for i in (1..=config.levels).rev() {
        let (cp, ci) = (config.channels(i - 1), config.channels(i));
        conv_p(&mut init, &format!("up{i}"), ci, cp, 3);
        block_p(&mut init, &format!("dec{i}"), cp + ci, cp);
    }
    conv_p(&mut init, "post", config.base_features, config.in_channels, 1);
    Ok(Generator { config: config.clone(), params: init.finish() })
}

fn basic_block(p: &Params, name: &str, x: &Tensor, slope: f64) -> Tensor {
    let h = instance_norm(Some((p, &format!("{name}.norm1"))), x);
    let h = conv(p, &format!("{name}.conv1"), &h, 1, 1).leaky_relu(slope);
    let h = instance_norm(Some((p, &format!("{name}.norm2"))), &h);
    conv(p, &format!("{name}.conv2"), &h, 1, 1).leaky_relu(slope)
}

impl Generator {
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        if x.rank() != 4 {
            return Err(Error::Shape(format!("expected a (batch, channels, H, W) image, got {:?}", x.shape())));
        }
        if x.dim(1) != c.in_channels {
            return Err(Error::Shape(format!("expected {} channels, got {}", c.in_channels, x.dim(1))));
        }
        let d = c.divisor();
        if x.dim(0) == 0 || x.dim(2) == 0 || x.dim(3) == 0 || !x.dim(2).is_multiple_of(d) || !x.dim(3).is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "spatial size {}x{} must be positive and divisible by {d}",
                x.dim(2),
                x.dim(3)
            )));
        }
        if !x.all_finite() {
            return Err(Error::Input("image contains non-finite values".into()));
        }
        Ok(())
    }

    /// Encoding path: the bottleneck map and the pre-downsampling skips,
    /// shallowest first.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_input(x)?;
        Ok(self.encode_unchecked(x))
    }

    fn encode_unchecked(&self, x: &Tensor) -> (Tensor, Vec<Tensor>) {
        let (p, c) = (&self.params, &self.config);
        let mut h = conv(p, "pre", x, 1, 1).leaky_relu(c.leaky_slope);
        let mut skips = Vec::with_capacity(c.levels);
        for i in 1..=c.levels {
            h = basic_block(p, &format!("enc{i}"), &h, c.leaky_slope);
            skips.push(h.clone());
            h = conv(p, &format!("down{i}"), &h, 2, 0);
        }
        (h, skips)
    }

    pub fn vit_bottleneck(&self, feat: &Tensor) -> Result<Tensor> {
        vit::bottleneck(&self.params, &self.config, feat)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let (p, c) = (&self.params, &self.config);
        let (bottleneck, skips) = self.encode_unchecked(x);
        let mut h = vit::bottleneck(p, c, &bottleneck)?;
        for i in (1..=c.levels).rev() {
            h = conv(p, &format!("up{i}"), &h.upsample_nearest2x(), 1, 1);
            h = Tensor::concat(&[&h, &skips[i - 1]], 1);
            h = basic_block(p, &format!("dec{i}"), &h, c.leaky_slope);
        }
        Ok(conv(p, "post", &h, 1, 0).sigmoid())
    }

    /// Same architecture, weights cut off from the autograd graph.
    pub fn frozen(&self) -> Generator {
        Generator { config: self.config.clone(), params: self.params.frozen() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use uvc_tensor::no_grad;

    fn small() -> Generator {
        init_generator(&GeneratorConfig::small(), &mut stream(3, Stream::InitGenAb)).unwrap()
    }

    #[test]
    fn default_parameter_count() {
        // counted independently against a reference layer-by-layer model
        let g = init_generator(&GeneratorConfig::default(), &mut stream(0, Stream::InitGenAb)).unwrap();
        assert_eq!(g.params.num_scalars(), 27_881_103);
    }

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig::default().validate().is_ok());
        assert!(GeneratorConfig::small().validate().is_ok());
        let bad = GeneratorConfig { token_features: 100, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = GeneratorConfig { heads: 5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = GeneratorConfig { base_features: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(init_generator(&bad, &mut stream(0, Stream::InitGenAb)).is_err());
    }

    #[test]
    fn channel_ladder() {
        let c = GeneratorConfig::default();
        let ladder: Vec<_> = (0..=4).map(|i| c.channels(i)).collect();
        assert_eq!(ladder, vec![48, 48, 96, 192, 384]);
    }

    #[test]
    fn init_is_deterministic() {
        let a = small();
        let b = small();
        assert!(a.params.bit_eq(&b.params));
        let c = init_generator(&GeneratorConfig::small(), &mut stream(4, Stream::InitGenAb)).unwrap();
        assert!(!a.params.bit_eq(&c.params));
    }

    #[test]
    fn small_forward_shape_and_range() {
        let g = small();
        let _guard = no_grad();
        let x = Tensor::from_vec((0..2 * 3 * 32 * 48).map(|i| ((i * 37) % 101) as f64 / 100.0).collect(), &[2, 3, 32, 48]);
        let y = g.forward(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let (b, skips) = g.encode(&x).unwrap();
        assert_eq!(b.shape(), &[2, 64, 2, 3]);
        let sc: Vec<_> = skips.iter().map(|s| (s.dim(1), s.dim(2))).collect();
        assert_eq!(sc, vec![(8, 32), (16, 16), (32, 8), (64, 4)]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = small();
        let _guard = no_grad();
        assert!(matches!(g.forward(&Tensor::zeros(&[1, 3, 40, 32])), Err(Error::Shape(_))));
        assert!(matches!(g.forward(&Tensor::zeros(&[1, 1, 32, 32])), Err(Error::Shape(_))));
        assert!(matches!(g.forward(&Tensor::zeros(&[3, 32, 32])), Err(Error::Shape(_))));
        let mut v = vec![0.5; 3 * 32 * 32];
        v[17] = f64::NAN;
        assert!(matches!(g.forward(&Tensor::from_vec(v, &[1, 3, 32, 32])), Err(Error::Input(_))));
    }
}
