//! Two-domain image folders, augmentation and evaluation preprocessing.
//!
//! Images live in memory as planar `f64` RGB in [0, 1]. All resampling is
//! bilinear with half-pixel centres and edge clamping.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use uvc_tensor::Tensor;

use crate::error::{Error, Result};

/// Planar (C, H, W) image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "image buffer size mismatch");
        Self { channels, height, width, data }
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        Self::new(channels, height, width, vec![v; channels * height * width])
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Bilinear sample at continuous pixel coordinates, clamped to the edge.
    fn sample(&self, c: usize, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = self.at(c, y0, x0) * (1.0 - fx) + self.at(c, y0, x1) * fx;
        let bot = self.at(c, y1, x0) * (1.0 - fx) + self.at(c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.data, &[1, self.channels, self.height, self.width])
    }

    /// Splits a (B, C, H, W) tensor into images.
    pub fn from_batch(t: &Tensor) -> Vec<Image> {
        let (b, c, h, w) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
        t.data().chunks(c * h * w).take(b).map(|d| Image::new(c, h, w, d.to_vec())).collect()
    }
}

/// Stacks same-sized images into a (B, C, H, W) tensor.
pub fn batch(images: &[Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Contract("cannot batch zero images".into()))?;
    let dims = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for im in images {
        if (im.channels, im.height, im.width) != dims {
            return Err(Error::Shape(format!(
                "batch mixes image sizes {:?} and {:?}",
                dims,
                (im.channels, im.height, im.width)
            )));
        }
        data.extend_from_slice(&im.data);
    }
    Ok(Tensor::from_vec(data, &[images.len(), dims.0, dims.1, dims.2]))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Dataset(format!("cannot decode {}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(Image::new(3, h, w, data))
}

/// Writes an 8-bit RGB PNG (values clamped to [0, 1] and rounded).
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::Shape(format!("can only save 3-channel images, got {}", img.channels)));
    }
    let (h, w) = (img.height, img.width);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = (img.data[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Result<Image> {
    if img.height == 0 || img.width == 0 || height == 0 || width == 0 {
        return Err(Error::Shape(format!(
            "cannot resize {}x{} to {height}x{width}",
            img.height, img.width
        )));
    }
    if (height, width) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let mut out = Vec::with_capacity(img.channels * height * width);
    for c in 0..img.channels {
        for y in 0..height {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                out.push(img.sample(c, fy, (x as f64 + 0.5) * sx - 0.5));
            }
        }
    }
    Ok(Image::new(img.channels, height, width, out))
}

pub fn crop(img: &Image, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
    if top + height > img.height || left + width > img.width {
        return Err(Error::Shape(format!(
            "crop {height}x{width} at ({top}, {left}) exceeds image {}x{}",
            img.height, img.width
        )));
    }
    let mut out = Vec::with_capacity(img.channels * height * width);
    for c in 0..img.channels {
        for y in top..top + height {
            let row = (c * img.height + y) * img.width;
            out.extend_from_slice(&img.data[row + left..row + left + width]);
        }
    }
    Ok(Image::new(img.channels, height, width, out))
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    for row in out.data.chunks_mut(img.width) {
        row.reverse();
    }
    out
}

/// Rotation about the image centre by `degrees` (counter-clockwise), with
/// edge pixels replicated into the uncovered corners.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(img.data.len());
    for ch in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                // inverse map: rotate the output coordinate back
                let sx = c * dx - s * dy + cx;
                let sy = s * dx + c * dy + cy;
                out.push(img.sample(ch, sy, sx));
            }
        }
    }
    Image::new(img.channels, img.height, img.width, out)
}

fn luma(img: &Image, i: usize) -> f64 {
    let n = img.height * img.width;
    0.299 * img.data[i] + 0.587 * img.data[n + i] + 0.114 * img.data[2 * n + i]
}

/// Brightness, contrast and saturation scaling by the given factors (1 is
/// a no-op), in that order, clamped to [0, 1]. RGB only.
pub fn color_jitter(img: &Image, brightness: f64, contrast: f64, saturation: f64) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::Shape("colour jitter needs an RGB image".into()));
    }
    let n = img.height * img.width;
    let mut out = img.clone();
    for v in &mut out.data {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let mean = (0..n).map(|i| luma(&out, i)).sum::<f64>() / n as f64;
    for v in &mut out.data {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    for i in 0..n {
        let g = luma(&out, i);
        for c in 0..3 {
            let v = &mut out.data[c * n + i];
            *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// 256x256 sources enlarged to 286 and cropped back to 256.
    Square,
    /// 178x218 (WxH) portraits enlarged to 256x313 and cropped to 256x256.
    Celeba,
}

/// Image sizes of a training protocol, optionally shrunk by `size_scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Protocol {
    pub task: Task,
    pub size_scale: f64,
    /// Reject inputs of unexpected size instead of resizing them.
    pub strict: bool,
}

fn scaled(v: usize, scale: f64) -> usize {
    ((v as f64 / scale).round() as usize).max(1)
}

impl Protocol {
    /// Expected source size (height, width).
    pub fn input_size(&self) -> (usize, usize) {
        match self.task {
            Task::Square => (scaled(256, self.size_scale), scaled(256, self.size_scale)),
            Task::Celeba => (scaled(218, self.size_scale), scaled(178, self.size_scale)),
        }
    }

    /// Size after the enlarging resize (height, width).
    pub fn enlarged_size(&self) -> (usize, usize) {
        match self.task {
            Task::Square => (scaled(286, self.size_scale), scaled(286, self.size_scale)),
            Task::Celeba => (scaled(313, self.size_scale), scaled(256, self.size_scale)),
        }
    }

    /// Side of the square training crop.
    pub fn crop_size(&self) -> usize {
        scaled(256, self.size_scale)
    }
}

/// Random choices of one training augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

pub fn draw_augment<R: Rng>(p: &Protocol, rng: &mut R) -> AugmentDraw {
    let (eh, ew) = p.enlarged_size();
    let cs = p.crop_size();
    AugmentDraw { top: rng.random_range(0..=eh - cs), left: rng.random_range(0..=ew - cs), flip: rng.random_bool(0.5) }
}

/// Conforms `img` to the protocol's source size, resizing in lenient mode.
/// Returns whether a resize was needed.
pub fn conform_input(img: &Image, p: &Protocol) -> Result<(Image, bool)> {
    let (h, w) = p.input_size();
    if (img.height, img.width) == (h, w) {
        return Ok((img.clone(), false));
    }
    if p.strict {
        return Err(Error::Shape(format!(
            "expected a {h}x{w} (HxW) source image, got {}x{}",
            img.height, img.width
        )));
    }
    Ok((resize_bilinear(img, h, w)?, true))
}

/// Enlarge, random crop, random horizontal flip.
pub fn augment_train<R: Rng>(img: &Image, p: &Protocol, rng: &mut R) -> Result<Image> {
    let (img, _) = conform_input(img, p)?;
    let (eh, ew) = p.enlarged_size();
    let big = resize_bilinear(&img, eh, ew)?;
    let d = draw_augment(p, rng);
    let cs = p.crop_size();
    let out = crop(&big, d.top, d.left, cs, cs)?;
    Ok(if d.flip { flip_horizontal(&out) } else { out })
}

/// Extra augmentation used only for pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainAugment {
    pub rotation_degrees: f64,
    pub jitter: f64,
}

impl Default for PretrainAugment {
    fn default() -> Self {
        Self { rotation_degrees: 10.0, jitter: 0.2 }
    }
}

/// Random rotation and colour jitter, then the training augmentation.
pub fn augment_pretrain<R: Rng>(img: &Image, p: &Protocol, extra: &PretrainAugment, rng: &mut R) -> Result<Image> {
    let (img, _) = conform_input(img, p)?;
    let mut factor = || if extra.jitter > 0.0 { 1.0 + rng.random_range(-extra.jitter..=extra.jitter) } else { 1.0 };
    let (b, c, s) = (factor(), factor(), factor());
    let angle = if extra.rotation_degrees > 0.0 {
        rng.random_range(-extra.rotation_degrees..=extra.rotation_degrees)
    } else {
        0.0
    };
    let img = rotate(&img, angle);
    let img = if img.channels == 3 { color_jitter(&img, b, c, s)? } else { img };
    augment_train(&img, p, rng)
}

/// Aspect-preserving resize of the shorter side to `size`, then a central
/// `size x size` crop.
pub fn eval_preprocess(img: &Image, size: usize) -> Result<Image> {
    if img.height == 0 || img.width == 0 || size == 0 {
        return Err(Error::Shape(format!("cannot preprocess a {}x{} image to {size}", img.height, img.width)));
    }
    let short = img.height.min(img.width);
    let img = if short == size {
        img.clone()
    } else {
        let scale = size as f64 / short as f64;
        let h = if img.height == short { size } else { (img.height as f64 * scale).round() as usize };
        let w = if img.width == short { size } else { (img.width as f64 * scale).round() as usize };
        resize_bilinear(img, h, w)?
    };
    crop(&img, (img.height - size) / 2, (img.width - size) / 2, size, size)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn dir(self, domain: char) -> String {
        match self {
            Split::Train => format!("train{domain}"),
            Split::Test => format!("test{domain}"),
        }
    }
}

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Sorted, deduplicated image files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut files = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            files.insert(path);
        }
    }
    Ok(files.into_iter().collect())
}

#[derive(Clone, Debug)]
pub struct UnpairedDataset {
    pub root: PathBuf,
    pub split: Split,
    pub domain_a: Vec<PathBuf>,
    pub domain_b: Vec<PathBuf>,
}

impl UnpairedDataset {
    pub fn counts(&self) -> (usize, usize) {
        (self.domain_a.len(), self.domain_b.len())
    }
}

/// Reads `trainA/ trainB/ testA/ testB/` under `root`. With
/// `merge_validation`, images in `valA/ valB/` join the test split.
pub fn load_dataset(root: &Path, split: Split, merge_validation: bool) -> Result<UnpairedDataset> {
    let domain = |d: char| -> Result<Vec<PathBuf>> {
        let dir = root.join(split.dir(d));
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("missing directory {}", dir.display())));
        }
        let mut files = list_images(&dir)?;
        let val = root.join(format!("val{d}"));
        if merge_validation && split == Split::Test && val.is_dir() {
            files.extend(list_images(&val)?);
            files.sort();
            files.dedup();
        }
        if files.is_empty() {
            return Err(Error::Dataset(format!("no images in {}", dir.display())));
        }
        Ok(files)
    };
    Ok(UnpairedDataset { root: root.to_path_buf(), split, domain_a: domain('A')?, domain_b: domain('B')? })
}

/// Epoch-wise shuffled index stream over one domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    pub fn new(len: usize) -> Self {
        assert!(len > 0, "cannot sample from an empty domain");
        // cursor at the end forces a shuffle on first use
        Self { order: (0..len).collect(), cursor: len }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn next_index<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Independent samplers for the two domains.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnpairedSampler {
    pub a: EpochSampler,
    pub b: EpochSampler,
}

impl UnpairedSampler {
    pub fn new(ds: &UnpairedDataset) -> Self {
        Self { a: EpochSampler::new(ds.domain_a.len()), b: EpochSampler::new(ds.domain_b.len()) }
    }
}

/// Draws one image from each domain; the two draws share nothing but the
/// generator's stream position.
pub fn sample_unpaired<R: Rng>(ds: &UnpairedDataset, s: &mut UnpairedSampler, rng: &mut R) -> Result<(Image, Image)> {
    let ia = s.a.next_index(rng);
    let ib = s.b.next_index(rng);
    Ok((load_image(&ds.domain_a[ia])?, load_image(&ds.domain_b[ib])?))
}
