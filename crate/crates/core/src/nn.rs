//! Layer functions over a [`Params`] store.
//!
//! Layers are plain functions keyed by a name prefix; the architecture code
//! decides the names at init time and looks them up again in `forward`.

use uvc_tensor::Tensor;

use crate::params::Params;

pub const NORM_EPS: f64 = 1e-5;

/// `x @ W^T + b` over the last axis, with `W` stored as (out, in).
pub fn linear(p: &Params, name: &str, x: &Tensor) -> Tensor {
    let w = p.get(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    let (out_f, in_f) = (w.dim(0), w.dim(1));
    let shape = x.shape();
    assert_eq!(*shape.last().unwrap(), in_f, "{name}: expected {in_f} input features, got {shape:?}");
    let rows = x.numel() / in_f;
    let y = x.reshape(&[rows, in_f]).matmul_t(w, false, true) + b;
    let mut out_shape = shape.to_vec();
    *out_shape.last_mut().unwrap() = out_f;
    y.reshape(&out_shape)
}

/// Convolution with bias.
pub fn conv(p: &Params, name: &str, x: &Tensor, stride: usize, pad: usize) -> Tensor {
    let w = p.get(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    x.conv2d(w, stride, pad) + b.reshape(&[1, w.dim(0), 1, 1])
}

/// Per-sample, per-channel normalization over the spatial axes, optionally
/// followed by a learned per-channel scale and shift.
pub fn instance_norm(p: Option<(&Params, &str)>, x: &Tensor) -> Tensor {
    let mean = x.mean_keepdim(&[2, 3]);
    let centered = x - &mean;
    let var = centered.square().mean_keepdim(&[2, 3]);
    let y = &centered / &var.add_scalar(NORM_EPS).sqrt();
    match p {
        None => y,
        Some((p, name)) => {
            let c = x.dim(1);
            let g = p.get(&format!("{name}.weight")).reshape(&[1, c, 1, 1]);
            let b = p.get(&format!("{name}.bias")).reshape(&[1, c, 1, 1]);
            &y * &g + b
        }
    }
}

/// Normalization over the last axis with learned gain and bias.
pub fn layer_norm(p: &Params, name: &str, x: &Tensor) -> Tensor {
    let last = x.rank() - 1;
    let mean = x.mean_keepdim(&[last]);
    let centered = x - &mean;
    let var = centered.square().mean_keepdim(&[last]);
    let y = &centered / &var.add_scalar(NORM_EPS).sqrt();
    &y * p.get(&format!("{name}.weight")) + p.get(&format!("{name}.bias"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(entries: &[(&str, &[f64], &[usize])]) -> Params {
        let mut p = Params::new();
        for (n, d, s) in entries {
            p.insert(*n, Tensor::from_slice(d, s));
        }
        p
    }

    #[test]
    fn linear_matches_hand_product() {
        let p = params(&[("l.weight", &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]), ("l.bias", &[0.5, -1.0], &[2])]);
        let x = Tensor::from_slice(&[1.0, 0.0, -1.0, 2.0, 1.0, 0.0], &[1, 2, 3]);
        let y = linear(&p, "l", &x);
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.to_vec(), vec![-1.5, -3.0, 4.5, 12.0]);
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x = Tensor::from_vec((0..32).map(|i| (i * i) as f64 * 0.1).collect(), &[2, 1, 4, 4]);
        let y = instance_norm(None, &x);
        for s in y.data().chunks(16) {
            let m = s.iter().sum::<f64>() / 16.0;
            let v = s.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_rows() {
        let p = params(&[("n.weight", &[2.0, 2.0], &[2]), ("n.bias", &[1.0, 1.0], &[2])]);
        let x = Tensor::from_slice(&[3.0, 5.0], &[1, 2]);
        let y = layer_norm(&p, "n", &x).to_vec();
        let s = 1.0 / (1.0 + NORM_EPS).sqrt();
        assert!((y[0] - (1.0 - 2.0 * s)).abs() < 1e-12);
        assert!((y[1] - (1.0 + 2.0 * s)).abs() < 1e-12);
    }
}
