#![allow(dead_code)]

use std::path::Path;

use uvc_tensor::Tensor;
use uvcgan::config::RunConfig;
use uvcgan::data::{save_image, Image};
use uvcgan::discriminator::DiscriminatorConfig;
use uvcgan::generator::GeneratorConfig;

/// Smooth synthetic picture; domain 0 is stripes, domain 1 a disc on a
/// flat background.
pub fn synthetic(k: usize, domain: usize, size: usize) -> Image {
    let mut v = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 / size as f64, y as f64 / size as f64);
                let val = if domain == 0 {
                    0.5 + 0.4 * ((fx * (3 + k) as f64 + c as f64).sin() * (fy * (2 + k % 3) as f64).cos())
                } else {
                    let d = ((fx - 0.3 - 0.05 * k as f64).powi(2) + (fy - 0.5).powi(2)).sqrt();
                    if d < 0.25 {
                        0.2 + 0.3 * c as f64
                    } else {
                        0.8 - 0.2 * c as f64
                    }
                };
                v.push(val);
            }
        }
    }
    Image::new(3, size, size, v)
}

pub fn synthetic_tensor(k: usize, domain: usize, size: usize) -> Tensor {
    synthetic(k, domain, size).to_tensor()
}

/// Writes `trainA/ trainB/ testA/ testB/` with `n` PNGs each.
pub fn write_dataset(root: &Path, n: usize, size: usize) {
    for (dir, domain, offset) in [("trainA", 0, 0), ("trainB", 1, 0), ("testA", 0, 100), ("testB", 1, 100)] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).unwrap();
        for k in 0..n {
            save_image(&d.join(format!("{k:03}.png")), &synthetic(k + offset, domain, size)).unwrap();
        }
    }
}

/// A run configuration small enough to train for a few iterations in a
/// test: reduced networks and 64-pixel crops.
pub fn desk_config(root: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.generator = GeneratorConfig::small();
    c.discriminator = DiscriminatorConfig::small();
    c.data.root = Some(root.to_path_buf());
    c.data.size_scale = 4.0;
    c.train.total_iters = 20;
    c.train.checkpoint_every = 5;
    c.pretrain.total_steps = 6;
    c.pretrain.batch_size = 2;
    c.pretrain.patch_size = 8;
    c.pretrain.checkpoint_every = 3;
    c.metrics.eval_size = 64;
    c.metrics.kid_subset_size = 2;
    c.metrics.kid_n_subsets = 5;
    c
}
