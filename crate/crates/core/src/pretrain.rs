//! Masked-patch pretraining: zero random square patches of the input and
//! train the generator to restore the original image under an L1 loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uvc_tensor::optim::{Adam, AdamConfig};
use uvc_tensor::{backward, Tensor};

use crate::error::{Error, Result};
use crate::generator::Generator;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub patch_size: usize,
    pub mask_prob: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("pretrain.patch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("pretrain.mask_prob must lie in [0, 1], got {}", self.mask_prob)));
        }
        Ok(())
    }
}

/// Which patches were zeroed, per sample, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<bool>,
}

impl MaskGrid {
    pub fn is_masked(&self, b: usize, r: usize, c: usize) -> bool {
        self.cells[(b * self.rows + r) * self.cols + c]
    }

    pub fn masked_count(&self) -> usize {
        self.cells.iter().filter(|&&m| m).count()
    }
}

/// Zeroes each `patch_size` square of every sample independently with
/// probability `mask_prob`. Unmasked pixels are copied bit for bit.
pub fn mask_patches(x: &Tensor, spec: &MaskSpec) -> Result<(Tensor, MaskGrid)> {
    spec.validate()?;
    if x.rank() != 4 {
        return Err(Error::Shape(format!("expected (batch, channels, H, W), got {:?}", x.shape())));
    }
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let p = spec.patch_size;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("image {h}x{w} is not divisible into {p}x{p} patches")));
    }
    let (rows, cols) = (h / p, w / p);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cells: Vec<bool> = (0..b * rows * cols).map(|_| rng.random::<f64>() < spec.mask_prob).collect();
    let grid = MaskGrid { batch: b, rows, cols, cells };
    let mut data = x.to_vec();
    for s in 0..b {
        for ch in 0..c {
            let plane = &mut data[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
            for (y, row) in plane.chunks_mut(w).enumerate() {
                for pc in 0..cols {
                    if grid.is_masked(s, y / p, pc) {
                        row[pc * p..(pc + 1) * p].fill(0.0);
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(data, x.shape()), grid))
}

/// `lr_max * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::Contract(format!("cosine_lr: step {step} outside [0, {total}]")));
    }
    let t = step as f64 / total as f64;
    Ok(lr_max * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}

pub const PRETRAIN_ADAM: AdamConfig = AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 };

#[derive(Clone, Debug)]
pub struct PretrainState {
    pub generator: Generator,
    pub optimizer: Adam,
    pub step: u64,
}

impl PretrainState {
    pub fn new(generator: Generator, adam: AdamConfig) -> Self {
        Self { generator, optimizer: Adam::new(adam), step: 0 }
    }
}

/// One optimizer update on a masked batch. Returns the L1 loss over the
/// whole image. A non-finite loss or gradient leaves `state` untouched.
pub fn pretrain_step(state: &mut PretrainState, batch: &Tensor, spec: &MaskSpec, lr: f64) -> Result<f64> {
    let (masked, _) = mask_patches(batch, spec)?;
    let restored = state.generator.forward(&masked)?;
    let loss = (&restored - batch).abs().mean_all();
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("pretraining loss is {value} at step {}", state.step)));
    }
    let grads = backward(&loss);
    if state.generator.params.iter().any(|(_, p)| grads.get(p).is_some_and(|g| !g.all_finite())) {
        return Err(Error::Numeric(format!("non-finite gradient at pretraining step {}", state.step)));
    }
    let params = state.generator.params.iter_mut().map(|(k, v)| (k.clone(), v));
    state.optimizer.step(lr, params, &grads);
    state.step += 1;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(b: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec((0..b * 3 * h * w).map(|i| 0.1 + (i % 97) as f64 / 120.0).collect(), &[b, 3, h, w])
    }

    #[test]
    fn mask_extremes() {
        let x = ramp(2, 64, 32);
        let (m, g) = mask_patches(&x, &MaskSpec { patch_size: 16, mask_prob: 0.0, seed: 1 }).unwrap();
        assert_eq!(m.to_vec(), x.to_vec());
        assert_eq!((g.rows, g.cols, g.masked_count()), (4, 2, 0));
        let (m, g) = mask_patches(&x, &MaskSpec { patch_size: 16, mask_prob: 1.0, seed: 1 }).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        assert_eq!(g.masked_count(), 16);
        assert!(matches!(
            mask_patches(&ramp(1, 40, 32), &MaskSpec { patch_size: 32, mask_prob: 0.4, seed: 0 }),
            Err(Error::Shape(_))
        ));
        assert!(mask_patches(&x, &MaskSpec { patch_size: 16, mask_prob: 1.5, seed: 0 }).is_err());
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 2.0).unwrap(), 2.0);
        assert!(cosine_lr(100, 100, 2.0).unwrap().abs() < 1e-15);
        assert!((cosine_lr(50, 100, 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cosine_lr(101, 100, 2.0), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn mask_preserves_unmasked(seed in 0u64..10_000, prob in 0.0..1.0f64) {
            let x = ramp(2, 32, 48);
            let spec = MaskSpec { patch_size: 8, mask_prob: prob, seed };
            let (m, g) = mask_patches(&x, &spec).unwrap();
            for s in 0..2 {
                for c in 0..3 {
                    for y in 0..32 {
                        for xx in 0..48 {
                            let i = ((s * 3 + c) * 32 + y) * 48 + xx;
                            if g.is_masked(s, y / 8, xx / 8) {
                                prop_assert_eq!(m.data()[i], 0.0);
                            } else {
                                prop_assert_eq!(m.data()[i].to_bits(), x.data()[i].to_bits());
                            }
                        }
                    }
                }
            }
        }

        #[test]
        fn cosine_monotone(total in 1u64..500, lr in 1e-6..1.0f64) {
            let mut prev = f64::INFINITY;
            for s in 0..=total {
                let v = cosine_lr(s, total, lr).unwrap();
                prop_assert!(v <= prev);
                prev = v;
            }
        }
    }
}
