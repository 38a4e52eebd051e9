//! Pixel-wise transformer used as the generator bottleneck: one token per
//! spatial cell, concatenated with a Fourier positional embedding.

use rand::Rng;
use uvc_tensor::Tensor;

use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::nn::{layer_norm, linear};
use crate::params::{Init, Params};

/// Tokens of a feature map, one row per cell in row-major order.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    /// (batch, h * w, features)
    pub tokens: Tensor,
    /// (h, w)
    pub grid: (usize, usize),
}

/// (B, C, h, w) -> (B, h*w, C).
pub fn flatten(x: &Tensor) -> TokenGrid {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    TokenGrid { tokens: x.reshape(&[b, c, h * w]).permute(&[0, 2, 1]), grid: (h, w) }
}

/// Inverse of [`flatten`].
pub fn unflatten(t: &TokenGrid) -> Tensor {
    let (b, n, c) = (t.tokens.dim(0), t.tokens.dim(1), t.tokens.dim(2));
    let (h, w) = t.grid;
    assert_eq!(n, h * w, "token count {n} does not match grid {h}x{w}");
    t.tokens.permute(&[0, 2, 1]).reshape(&[b, c, h, w])
}

fn linear_p<R: Rng>(init: &mut Init<R>, name: &str, cin: usize, cout: usize) {
    init.weight(format!("{name}.weight"), &[cout, cin]);
    init.constant(format!("{name}.bias"), &[cout], 0.0);
}

fn norm_p<R: Rng>(init: &mut Init<R>, name: &str, f: usize) {
    init.constant(format!("{name}.weight"), &[f], 1.0);
    init.constant(format!("{name}.bias"), &[f], 0.0);
}

pub(crate) fn init_params<R: Rng>(init: &mut Init<R>, c: &GeneratorConfig) {
    linear_p(init, "vit.pe", 2, c.pe_features);
    linear_p(init, "vit.input", c.token_features + c.pe_features, c.vit_features);
    for i in 0..c.vit_blocks {
        let b = format!("vit.block{i}");
        norm_p(init, &format!("{b}.norm1"), c.vit_features);
        for proj in ["q", "k", "v", "o"] {
            linear_p(init, &format!("{b}.attn.{proj}"), c.vit_features, c.vit_features);
        }
        norm_p(init, &format!("{b}.norm2"), c.vit_features);
        linear_p(init, &format!("{b}.ffn.fc1"), c.vit_features, c.ffn_features);
        linear_p(init, &format!("{b}.ffn.fc2"), c.ffn_features, c.vit_features);
        init.constant(format!("{b}.alpha"), &[1], 0.0);
    }
    linear_p(init, "vit.output", c.vit_features, c.token_features);
}

/// Cell centres of an `h x w` grid mapped affinely into [-1, 1], as
/// (h*w, 2) rows of (y, x) in row-major order.
pub fn grid_coordinates(h: usize, w: usize) -> Tensor {
    let centre = |i: usize, n: usize| (2 * i + 1) as f64 / n as f64 - 1.0;
    let mut data = Vec::with_capacity(2 * h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(centre(y, h));
            data.push(centre(x, w));
        }
    }
    Tensor::from_vec(data, &[h * w, 2])
}

/// `sin(Linear(2, f_p)(coords))`, shape (h*w, f_p).
pub fn fourier_position_embedding(p: &Params, h: usize, w: usize) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("positional grid {h}x{w} must be non-empty")));
    }
    Ok(linear(p, "vit.pe", &grid_coordinates(h, w)).sin())
}

fn attention(p: &Params, name: &str, x: &Tensor, heads: usize) -> Tensor {
    let (b, n, f) = (x.dim(0), x.dim(1), x.dim(2));
    let dh = f / heads;
    let split = |t: Tensor| t.reshape(&[b, n, heads, dh]).permute(&[0, 2, 1, 3]).reshape(&[b * heads, n, dh]);
    let q = split(linear(p, &format!("{name}.q"), x));
    let k = split(linear(p, &format!("{name}.k"), x));
    let v = split(linear(p, &format!("{name}.v"), x));
    let scores = q.matmul_t(&k, false, true).mul_scalar(1.0 / (dh as f64).sqrt());
    let ctx = scores.softmax_last().matmul(&v);
    let merged = ctx.reshape(&[b, heads, n, dh]).permute(&[0, 2, 1, 3]).reshape(&[b, n, f]);
    linear(p, &format!("{name}.o"), &merged)
}

fn encoder_block(p: &Params, name: &str, x: &Tensor, heads: usize) -> Tensor {
    let alpha = p.get(&format!("{name}.alpha"));
    let h = layer_norm(p, &format!("{name}.norm1"), x);
    let x = x + &(alpha * &attention(p, &format!("{name}.attn"), &h, heads));
    let h = layer_norm(p, &format!("{name}.norm2"), &x);
    let h = linear(p, &format!("{name}.ffn.fc1"), &h).gelu();
    let h = linear(p, &format!("{name}.ffn.fc2"), &h);
    &x + &(alpha * &h)
}

/// The stack of rezero encoder blocks on (B, N, f_v) tokens.
pub fn transformer(p: &Params, c: &GeneratorConfig, tokens: &Tensor) -> Tensor {
    let mut x = tokens.clone();
    for i in 0..c.vit_blocks {
        x = encoder_block(p, &format!("vit.block{i}"), &x, c.heads);
    }
    x
}

/// Tokens after positional concatenation and the input projection:
/// the transformer stack's input, (B, h*w, f_v).
pub fn embed(p: &Params, c: &GeneratorConfig, feat: &Tensor) -> Result<TokenGrid> {
    if feat.rank() != 4 || feat.dim(1) != c.token_features {
        return Err(Error::Shape(format!(
            "bottleneck expects (batch, {}, h, w), got {:?}",
            c.token_features,
            feat.shape()
        )));
    }
    let grid = flatten(feat);
    let (b, n) = (feat.dim(0), grid.tokens.dim(1));
    let (h, w) = grid.grid;
    let pe = fourier_position_embedding(p, h, w)?.reshape(&[1, n, c.pe_features]).broadcast_to(&[b, n, c.pe_features]);
    let joined = Tensor::concat(&[&grid.tokens, &pe], 2);
    Ok(TokenGrid { tokens: linear(p, "vit.input", &joined), grid: grid.grid })
}

pub fn bottleneck(p: &Params, c: &GeneratorConfig, feat: &Tensor) -> Result<Tensor> {
    let grid = embed(p, c, feat)?;
    let out = linear(p, "vit.output", &transformer(p, c, &grid.tokens));
    Ok(unflatten(&TokenGrid { tokens: out, grid: grid.grid }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::init_generator;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    #[test]
    fn coordinates_are_cell_centres() {
        let c = grid_coordinates(2, 4).to_vec();
        assert_eq!(&c[..4], &[-0.5, -0.75, -0.5, -0.25]);
        assert_eq!(&c[14..], &[0.5, 0.75]);
    }

    #[test]
    fn embedding_zero_weights_is_zero() {
        let mut p = Params::new();
        p.insert("vit.pe.weight", Tensor::zeros(&[5, 2]));
        p.insert("vit.pe.bias", Tensor::zeros(&[5]));
        let e = fourier_position_embedding(&p, 3, 4).unwrap();
        assert_eq!(e.shape(), &[12, 5]);
        assert!(e.data().iter().all(|&v| v == 0.0));
        assert!(fourier_position_embedding(&p, 0, 4).is_err());
    }

    #[test]
    fn embedding_default_shape() {
        let g = init_generator(&GeneratorConfig::default(), &mut stream(1, Stream::InitGenAb)).unwrap();
        let e = fourier_position_embedding(&g.params, 16, 16).unwrap();
        assert_eq!(e.shape(), &[256, 384]);
        assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_exact(b in 1usize..3, c in 1usize..5, h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
            let n = b * c * h * w;
            let data: Vec<f64> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 9973) as f64 / 97.0 - 50.0).collect();
            let x = Tensor::from_vec(data, &[b, c, h, w]);
            let t = flatten(&x);
            prop_assert_eq!(t.tokens.shape(), &[b, h * w, c]);
            // token (y, x) holds the channel vector of cell (y, x)
            let (yy, xx) = (h - 1, w / 2);
            for ch in 0..c {
                prop_assert_eq!(t.tokens.data()[(yy * w + xx) * c + ch], x.data()[(ch * h + yy) * w + xx]);
            }
            let back = unflatten(&t);
            prop_assert_eq!(back.shape(), x.shape());
            prop_assert!(back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn embedding_in_unit_range(seed in 0u64..50, h in 1usize..6, w in 1usize..6) {
            let g = init_generator(&GeneratorConfig::small(), &mut stream(seed, Stream::InitGenAb)).unwrap();
            let mut p = g.params.clone();
            let scaled: Vec<f64> = p.get("vit.pe.weight").data().iter().map(|v| v * 500.0).collect();
            p.set_data("vit.pe.weight", scaled);
            let e = fourier_position_embedding(&p, h, w).unwrap();
            prop_assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
