//! PatchGAN discriminator: a stack of 4x4 convolutions whose output is a
//! grid of raw (unbounded) realism scores, one per receptive-field patch.

use rand::Rng;
use serde::{Deserialize, Serialize};
use uvc_tensor::Tensor;

use crate::error::{Error, Result};
use crate::generator::INIT_STD;
use crate::nn::{conv, instance_norm};
use crate::params::{Init, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_layers: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { in_channels: 3, base_channels: 64, n_layers: 3, leaky_slope: 0.2 }
    }
}

impl DiscriminatorConfig {
    pub fn small() -> Self {
        Self { base_channels: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.n_layers == 0 {
            return Err(Error::Config("discriminator counts must be positive".into()));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config("discriminator.leaky_slope must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// (in, out, stride) of every convolution, head included.
    pub fn layers(&self) -> Vec<(usize, usize, usize)> {
        let width = |i: usize| self.base_channels * (1usize << i.min(3));
        let mut out = vec![(self.in_channels, width(0), 2)];
        for i in 1..self.n_layers {
            out.push((width(i - 1), width(i), 2));
        }
        out.push((width(self.n_layers - 1), width(self.n_layers), 1));
        out.push((width(self.n_layers), 1, 1));
        out
    }

    /// Spatial output size for an input of size `n` (None if it collapses).
    pub fn output_size(&self, n: usize) -> Option<usize> {
        self.layers().iter().try_fold(n, |s, &(_, _, stride)| (s + 2 >= 4).then(|| (s + 2 - 4) / stride + 1))
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: Params,
}

const KERNEL: usize = 4;
const PAD: usize = 1;

pub fn init_discriminator<R: Rng>(config: &DiscriminatorConfig, rng: &mut R) -> Result<Discriminator> {
    config.validate()?;
    let mut init = Init::new(rng, INIT_STD);
    for (i, (cin, cout, _)) in config.layers().into_iter().enumerate() {
        init.weight(format!("conv{i}.weight"), &[cout, cin, KERNEL, KERNEL]);
        init.constant(format!("conv{i}.bias"), &[cout], 0.0);
    }
    Ok(Discriminator { config: config.clone(), params: init.finish() })
}

impl Discriminator {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if x.rank() != 4 || x.dim(1) != c.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects (batch, {}, H, W), got {:?}",
                c.in_channels,
                x.shape()
            )));
        }
        if c.output_size(x.dim(2)).is_none() || c.output_size(x.dim(3)).is_none() {
            return Err(Error::Shape(format!("input {}x{} too small for the discriminator", x.dim(2), x.dim(3))));
        }
        if !x.all_finite() {
            return Err(Error::Input("discriminator input contains non-finite values".into()));
        }
        Ok(self.forward_unchecked(x))
    }

    /// Forward pass without input validation, for inner loops (the gradient
    /// penalty) where the input is already known to be valid.
    pub fn forward_unchecked(&self, x: &Tensor) -> Tensor {
        let layers = self.config.layers();
        let last = layers.len() - 1;
        let mut h = x.clone();
        for (i, &(_, _, stride)) in layers.iter().enumerate() {
            h = conv(&self.params, &format!("conv{i}"), &h, stride, PAD);
            if i == last {
                break;
            }
            if i > 0 {
                h = instance_norm(None, &h);
            }
            h = h.leaky_relu(self.config.leaky_slope);
        }
        h
    }

    pub fn frozen(&self) -> Discriminator {
        Discriminator { config: self.config.clone(), params: self.params.frozen() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use uvc_tensor::no_grad;

    #[test]
    fn layer_ladder_and_output_size() {
        let c = DiscriminatorConfig::default();
        assert_eq!(c.layers(), vec![(3, 64, 2), (64, 128, 2), (128, 256, 2), (256, 512, 1), (512, 1, 1)]);
        assert_eq!(c.output_size(256), Some(30));
        assert_eq!(c.output_size(70), Some(6));
        assert_eq!(c.output_size(64), Some(6));
        assert_eq!(c.output_size(8), None);
    }

    #[test]
    fn forward_shapes_and_errors() {
        let d = init_discriminator(&DiscriminatorConfig::small(), &mut stream(0, Stream::InitDiscA)).unwrap();
        let _g = no_grad();
        let y = d.forward(&Tensor::full(&[2, 3, 70, 70], 0.5)).unwrap();
        assert_eq!(y.shape(), &[2, 1, 6, 6]);
        assert!(matches!(d.forward(&Tensor::zeros(&[1, 1, 64, 64])), Err(Error::Shape(_))));
        let mut v = vec![0.1; 3 * 64 * 64];
        v[5] = f64::INFINITY;
        assert!(matches!(d.forward(&Tensor::from_vec(v, &[1, 3, 64, 64])), Err(Error::Input(_))));
    }
}
