//! Adversarial (least-squares), cycle, identity and gradient-penalty losses.

use serde::{Deserialize, Serialize};
use uvc_tensor::{grad, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_idt: f64,
    pub lambda_gp: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cyc: 10.0, lambda_idt: 5.0, lambda_gp: 0.1, gamma: 100.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_cyc", self.lambda_cyc), ("lambda_idt", self.lambda_idt), ("lambda_gp", self.lambda_gp)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss.{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.lambda_gp > 0.0 && !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Config(format!("loss.gamma must be positive when lambda_gp > 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

fn non_empty(t: &Tensor, what: &str) -> Result<()> {
    if t.numel() == 0 {
        return Err(Error::Contract(format!("{what}: empty score tensor")));
    }
    Ok(())
}

/// Generator side: `mean((s - 1)^2)`.
pub fn lsgan_gen_adv(fake_scores: &Tensor) -> Result<Tensor> {
    non_empty(fake_scores, "lsgan_gen_adv")?;
    Ok(fake_scores.add_scalar(-1.0).square().mean_all())
}

/// Discriminator side: `mean((r - 1)^2) / 2 + mean(f^2) / 2`.
pub fn lsgan_disc_adv(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    non_empty(real_scores, "lsgan_disc_adv")?;
    non_empty(fake_scores, "lsgan_disc_adv")?;
    let real = real_scores.add_scalar(-1.0).square().mean_all();
    let fake = fake_scores.square().mean_all();
    Ok((real + fake).mul_scalar(0.5))
}

fn l1(x: &Tensor, y: &Tensor, what: &str) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("{what}: shapes {:?} and {:?} differ", x.shape(), y.shape())));
    }
    if x.numel() == 0 {
        return Err(Error::Contract(format!("{what}: empty images")));
    }
    Ok((x - y).abs().mean_all())
}

/// Mean absolute difference between an image and its round trip.
pub fn cycle_loss(x: &Tensor, x_reconstructed: &Tensor) -> Result<Tensor> {
    l1(x, x_reconstructed, "cycle_loss")
}

/// Mean absolute difference between an image and its same-domain
/// translation.
pub fn identity_loss(x: &Tensor, x_identity: &Tensor) -> Result<Tensor> {
    l1(x, x_identity, "identity_loss")
}

/// Batch mean of `((|grad_x sum D(x)| - gamma) / gamma)^2`, with the norm
/// taken per sample. The result keeps its graph, so it can be
/// differentiated again with respect to the discriminator's parameters.
pub fn gradient_penalty(disc: impl Fn(&Tensor) -> Tensor, x: &Tensor, gamma: f64) -> Result<Tensor> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Contract(format!("gradient_penalty: gamma must be positive, got {gamma}")));
    }
    if x.rank() == 0 || x.dim(0) == 0 {
        return Err(Error::Contract("gradient_penalty: empty batch".into()));
    }
    let xr = x.detach().requires_grad_leaf();
    let out = disc(&xr).sum_all();
    let g = grad(&out, true).get_or_zeros(&xr);
    let n = x.dim(0);
    let per_sample = g.reshape(&[n, x.numel() / n]).square().sum_keepdim(&[1]).sqrt();
    Ok(per_sample.add_scalar(-gamma).mul_scalar(1.0 / gamma).square().mean_all())
}

fn finite(name: &str, v: &Tensor) -> Result<()> {
    if v.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{name} loss is not finite")))
    }
}

/// `adv + lambda_idt * idt + lambda_cyc * cyc`.
pub fn generator_total(adv: &Tensor, idt: &Tensor, cyc: &Tensor, w: &LossWeights) -> Result<Tensor> {
    finite("adversarial", adv)?;
    finite("identity", idt)?;
    finite("cycle", cyc)?;
    Ok(adv + &idt.mul_scalar(w.lambda_idt) + cyc.mul_scalar(w.lambda_cyc))
}

/// `adv + lambda_gp * gp`.
pub fn discriminator_total(adv: &Tensor, gp: &Tensor, w: &LossWeights) -> Result<Tensor> {
    finite("adversarial", adv)?;
    finite("gradient penalty", gp)?;
    Ok(adv + gp.mul_scalar(w.lambda_gp))
}
