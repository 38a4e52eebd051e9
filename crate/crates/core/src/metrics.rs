//! FID and KID with every score-affecting choice pinned in a manifest.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uvc_tensor::no_grad;

use crate::checkpoint::{checkpoint_hash, load_generator, GeneratorSlot};
use crate::data::{eval_preprocess, load_image, resize_bilinear, Image, UnpairedDataset};
use crate::error::{Error, Result};
use crate::generator::Generator;

/// Eigenvalues of the FID cross term below this fraction of the largest
/// one are treated as zero (they are rounding noise on a PSD matrix).
pub const EIG_CLIP_REL: f64 = 1e-8;

/// Row-major feature matrix with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: DMatrix<f64>,
    pub extractor_id: String,
    pub preprocess_id: String,
}

impl FeatureSet {
    pub fn from_rows(rows: &[Vec<f64>], extractor_id: &str, preprocess_id: &str) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows have different lengths".into()));
        }
        let features = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(Self { features, extractor_id: extractor_id.into(), preprocess_id: preprocess_id.into() })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Sample mean and unbiased (n - 1) covariance.
pub fn gaussian_stats(f: &FeatureSet) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = f.len();
    if n < 2 {
        return Err(Error::Contract(format!("gaussian_stats needs at least 2 samples, got {n}")));
    }
    let mu = f.features.row_mean().transpose();
    let mut centered = f.features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let sigma = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mu, sigma))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Square root of a symmetric positive semi-definite matrix.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let roots = eig.eigenvalues.map(|l| if l > EIG_CLIP_REL * top { l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Frechet distance between two Gaussians:
/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`, clamped at 0.
pub fn fid(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::Shape("fid: mean and covariance dimensions disagree".into()));
    }
    let all = mu1.iter().chain(mu2.iter()).chain(s1.iter()).chain(s2.iter());
    if all.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("fid: non-finite statistics".into()));
    }
    let (s1, s2) = (symmetrize(s1), symmetrize(s2));
    let r1 = psd_sqrt(&s1);
    let cross = SymmetricEigen::new(symmetrize(&(&r1 * &s2 * &r1))).eigenvalues;
    let top = cross.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tr_sqrt: f64 = cross.iter().map(|&l| if l > EIG_CLIP_REL * top { l.sqrt() } else { 0.0 }).sum();
    let diff = mu1 - mu2;
    let v = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(v.max(0.0))
}

fn poly_kernel(u: &[f64], v: &[f64]) -> f64 {
    let d = u.len() as f64;
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD^2 between two equally sized samples under the cubic
/// polynomial kernel (diagonal self-similarities excluded).
pub fn mmd2_unbiased(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let m = x.len();
    if m < 2 || y.len() != m {
        return Err(Error::Contract(format!("mmd2 needs two samples of equal size >= 2, got {m} and {}", y.len())));
    }
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                acc += poly_kernel(&s[i], &s[j]);
            }
        }
        2.0 * acc / (m * (m - 1)) as f64
    };
    let mut cross = 0.0;
    for u in x {
        for v in y {
            cross += poly_kernel(u, v);
        }
    }
    Ok(within(x) + within(y) - 2.0 * cross / (m * m) as f64)
}

fn rows(f: &FeatureSet) -> Vec<Vec<f64>> {
    f.features.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Mean and population standard deviation of MMD^2 over random subsets.
/// Subset `i` draws from its own stream so subsets are independent of
/// evaluation order.
pub fn kid(x: &FeatureSet, y: &FeatureSet, manifest: &MetricManifest) -> Result<(f64, f64)> {
    let m = manifest.kid_subset_size;
    if m < 2 {
        return Err(Error::Config(format!("metrics.kid_subset_size must be at least 2, got {m}")));
    }
    if manifest.kid_n_subsets == 0 {
        return Err(Error::Config("metrics.kid_n_subsets must be positive".into()));
    }
    let available = x.len().min(y.len());
    if m > available {
        return Err(Error::SubsetTooLarge { subset: m, available });
    }
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!("kid: feature dims {} and {} differ", x.dim(), y.dim())));
    }
    let (xr, yr) = (rows(x), rows(y));
    let mut values = Vec::with_capacity(manifest.kid_n_subsets);
    for i in 0..manifest.kid_n_subsets {
        let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
        rng.set_stream(i as u64);
        let xi: Vec<_> = rand::seq::index::sample(&mut rng, xr.len(), m).iter().map(|k| xr[k].clone()).collect();
        let yi: Vec<_> = rand::seq::index::sample(&mut rng, yr.len(), m).iter().map(|k| yr[k].clone()).collect();
        values.push(mmd2_unbiased(&xi, &yi)?);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// A fixed embedding of preprocessed images.
pub trait FeatureExtractor: Send + Sync {
    /// Identifier that changes whenever the features would.
    fn id(&self) -> String;
    fn extract(&self, img: &Image) -> Result<Vec<f64>>;
}

/// Raw pixels, flattened channel-major.
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn id(&self) -> String {
        "identity".into()
    }
    fn extract(&self, img: &Image) -> Result<Vec<f64>> {
        Ok(img.data.clone())
    }
}

const RP_SIDE: usize = 32;
const RP_HIDDEN: usize = 256;
const RP_OUT: usize = 64;
const RP_SEED: u64 = 0x5eed_f1d0;

struct RandomProjectionWeights {
    w1: DMatrix<f64>,
    w2: DMatrix<f64>,
    hash: String,
}

fn rp_weights() -> &'static RandomProjectionWeights {
    static W: OnceLock<RandomProjectionWeights> = OnceLock::new();
    W.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(RP_SEED);
        let input = 3 * RP_SIDE * RP_SIDE;
        let mut gauss = |r: usize, c: usize, scale: f64| {
            DMatrix::from_fn(r, c, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
        };
        let w1 = gauss(RP_HIDDEN, input, (1.0 / input as f64).sqrt());
        let w2 = gauss(RP_OUT, RP_HIDDEN, (1.0 / RP_HIDDEN as f64).sqrt());
        let mut h = Sha256::new();
        for v in w1.iter().chain(w2.iter()) {
            h.update(v.to_le_bytes());
        }
        RandomProjectionWeights { w1, w2, hash: hex::encode(h.finalize()) }
    })
}

/// Two-layer random network: resize to 32x32, centre, project to 256 with
/// `tanh`, project to 64. Weights come from a fixed seed and are pinned by
/// their SHA-256 in the extractor id.
pub struct RandomProjectionExtractor;

impl RandomProjectionExtractor {
    pub const NAME: &'static str = "random-projection-v1";

    pub fn weight_hash() -> &'static str {
        &rp_weights().hash
    }
}

impl FeatureExtractor for RandomProjectionExtractor {
    fn id(&self) -> String {
        format!("{}:{}", Self::NAME, &Self::weight_hash()[..16])
    }

    fn extract(&self, img: &Image) -> Result<Vec<f64>> {
        if img.channels != 3 {
            return Err(Error::Shape(format!("{} expects RGB images", Self::NAME)));
        }
        let small = resize_bilinear(img, RP_SIDE, RP_SIDE)?;
        let x = DVector::from_iterator(small.data.len(), small.data.iter().map(|v| v - 0.5));
        let w = rp_weights();
        let h = (&w.w1 * x).map(f64::tanh);
        Ok((&w.w2 * h).iter().copied().collect())
    }
}

/// Looks up a registered extractor by name.
pub fn extractor(name: &str) -> Result<Box<dyn FeatureExtractor>> {
    match name {
        "identity" => Ok(Box::new(IdentityExtractor)),
        RandomProjectionExtractor::NAME => Ok(Box::new(RandomProjectionExtractor)),
        other => Err(Error::Config(format!(
            "unknown feature extractor {other:?} (registered: identity, {})",
            RandomProjectionExtractor::NAME
        ))),
    }
}

pub fn extract_features(images: &[Image], ex: &dyn FeatureExtractor, preprocess_id: &str) -> Result<FeatureSet> {
    let rows = images.iter().map(|im| ex.extract(im)).collect::<Result<Vec<_>>>()?;
    FeatureSet::from_rows(&rows, &ex.id(), preprocess_id)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidSamplePolicy {
    FullTestSet,
}

/// Everything that changes an FID/KID number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricManifest {
    pub fid_sample_policy: FidSamplePolicy,
    pub kid_subset_size: usize,
    pub kid_n_subsets: usize,
    /// Side of the central evaluation crop.
    pub eval_size: usize,
    pub extractor: String,
    pub seed: u64,
}

impl Default for MetricManifest {
    fn default() -> Self {
        Self {
            fid_sample_policy: FidSamplePolicy::FullTestSet,
            kid_subset_size: 50,
            kid_n_subsets: 100,
            eval_size: 256,
            extractor: RandomProjectionExtractor::NAME.into(),
            seed: 0,
        }
    }
}

impl MetricManifest {
    /// Subset size used for portrait-style (large test set) tasks.
    pub const LARGE_KID_SUBSET: usize = 1000;

    pub fn validate(&self) -> Result<()> {
        if self.kid_subset_size < 2 {
            return Err(Error::Config(format!("metrics.kid_subset_size must be at least 2, got {}", self.kid_subset_size)));
        }
        if self.kid_n_subsets == 0 {
            return Err(Error::Config("metrics.kid_n_subsets must be positive".into()));
        }
        if self.eval_size == 0 {
            return Err(Error::Config("metrics.eval_size must be positive".into()));
        }
        extractor(&self.extractor).map(|_| ())
    }

    pub fn preprocess_id(&self) -> String {
        format!("short-side-bilinear-halfpixel+center-crop-{}", self.eval_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionScores {
    /// `a2b` compares translated A images against real B images; in
    /// self-evaluation `a_vs_a` compares two halves of domain A.
    pub direction: String,
    pub n_generated: usize,
    pub n_reference: usize,
    pub fid: f64,
    pub kid_mean: f64,
    pub kid_std: f64,
    pub kid_x100_mean: f64,
    pub kid_x100_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub manifest: MetricManifest,
    /// The manifest file exactly as given, when one was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_source: Option<String>,
    pub extractor_id: String,
    pub preprocess_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
    pub dataset_root: PathBuf,
    pub test_counts: (usize, usize),
    pub self_evaluation: bool,
    pub scores: Vec<DirectionScores>,
}

fn preprocessed(paths: &[PathBuf], size: usize) -> Result<Vec<Image>> {
    paths.iter().map(|p| eval_preprocess(&load_image(p)?, size)).collect()
}

fn translate_all(g: &Generator, images: &[Image]) -> Result<Vec<Image>> {
    let _guard = no_grad();
    images
        .iter()
        .map(|im| Ok(Image::from_batch(&g.forward(&im.to_tensor())?).remove(0)))
        .collect()
}

fn score(
    direction: &str,
    generated: &FeatureSet,
    reference: &FeatureSet,
    manifest: &MetricManifest,
) -> Result<DirectionScores> {
    let (kid_mean, kid_std) = kid(generated, reference, manifest)?;
    let (m1, s1) = gaussian_stats(generated)?;
    let (m2, s2) = gaussian_stats(reference)?;
    Ok(DirectionScores {
        direction: direction.into(),
        n_generated: generated.len(),
        n_reference: reference.len(),
        fid: fid(&m1, &s1, &m2, &s2)?,
        kid_mean,
        kid_std,
        kid_x100_mean: 100.0 * kid_mean,
        kid_x100_std: 100.0 * kid_std,
    })
}

fn check_sizes(manifest: &MetricManifest, available: usize) -> Result<()> {
    if manifest.kid_subset_size > available {
        return Err(Error::SubsetTooLarge { subset: manifest.kid_subset_size, available });
    }
    Ok(())
}

/// Translates the whole test split in both directions and scores each
/// direction against the real images of its target domain.
pub fn evaluate(test: &UnpairedDataset, checkpoint: &Path, manifest: &MetricManifest) -> Result<MetricReport> {
    manifest.validate()?;
    let (na, nb) = test.counts();
    check_sizes(manifest, na.min(nb))?;
    let ex = extractor(&manifest.extractor)?;
    let pid = manifest.preprocess_id();
    let real_a = preprocessed(&test.domain_a, manifest.eval_size)?;
    let real_b = preprocessed(&test.domain_b, manifest.eval_size)?;
    let g_ab = load_generator(checkpoint, GeneratorSlot::AtoB)?;
    let g_ba = load_generator(checkpoint, GeneratorSlot::BtoA)?;
    let fa = extract_features(&real_a, ex.as_ref(), &pid)?;
    let fb = extract_features(&real_b, ex.as_ref(), &pid)?;
    let fake_b = extract_features(&translate_all(&g_ab, &real_a)?, ex.as_ref(), &pid)?;
    let fake_a = extract_features(&translate_all(&g_ba, &real_b)?, ex.as_ref(), &pid)?;
    Ok(MetricReport {
        manifest: manifest.clone(),
        manifest_source: None,
        extractor_id: ex.id(),
        preprocess_id: pid,
        checkpoint: Some(checkpoint.to_path_buf()),
        checkpoint_hash: Some(checkpoint_hash(checkpoint)?),
        dataset_root: test.root.clone(),
        test_counts: (na, nb),
        self_evaluation: false,
        scores: vec![score("a2b", &fake_b, &fb, manifest)?, score("b2a", &fake_a, &fa, manifest)?],
    })
}

fn halves(f: &FeatureSet) -> (FeatureSet, FeatureSet) {
    let pick = |parity: usize| {
        let idx: Vec<usize> = (0..f.len()).filter(|i| i % 2 == parity).collect();
        FeatureSet {
            features: f.features.select_rows(idx.iter()),
            extractor_id: f.extractor_id.clone(),
            preprocess_id: f.preprocess_id.clone(),
        }
    };
    (pick(0), pick(1))
}

/// Calibration run: each domain's test images split into even and odd
/// halves and scored against each other. No generator involved.
pub fn self_evaluate(test: &UnpairedDataset, manifest: &MetricManifest) -> Result<MetricReport> {
    manifest.validate()?;
    let (na, nb) = test.counts();
    check_sizes(manifest, na.min(nb) / 2)?;
    let ex = extractor(&manifest.extractor)?;
    let pid = manifest.preprocess_id();
    let mut scores = Vec::new();
    for (name, paths) in [("a_vs_a", &test.domain_a), ("b_vs_b", &test.domain_b)] {
        let f = extract_features(&preprocessed(paths, manifest.eval_size)?, ex.as_ref(), &pid)?;
        let (x, y) = halves(&f);
        scores.push(score(name, &x, &y, manifest)?);
    }
    Ok(MetricReport {
        manifest: manifest.clone(),
        manifest_source: None,
        extractor_id: ex.id(),
        preprocess_id: pid,
        checkpoint: None,
        checkpoint_hash: None,
        dataset_root: test.root.clone(),
        test_counts: (na, nb),
        self_evaluation: true,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fs(rows: &[&[f64]]) -> FeatureSet {
        FeatureSet::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), "t", "t").unwrap()
    }

    #[test]
    fn stats_examples() {
        let (mu, s) = gaussian_stats(&fs(&[&[0.0, 0.0], &[2.0, 2.0]])).unwrap();
        assert_eq!(mu.as_slice(), &[1.0, 1.0]);
        assert_eq!(s.as_slice(), &[2.0, 2.0, 2.0, 2.0]);
        let (_, s) = gaussian_stats(&fs(&[&[1.0, 3.0], &[1.0, 3.0], &[1.0, 3.0]])).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
        assert!(matches!(gaussian_stats(&fs(&[&[1.0]])), Err(Error::Contract(_))));
    }

    #[test]
    fn extractor_registry() {
        assert_eq!(extractor("identity").unwrap().id(), "identity");
        assert!(extractor("random-projection-v1").unwrap().id().starts_with("random-projection-v1:"));
        assert!(matches!(extractor("inception"), Err(Error::Config(_))));
        let img = Image::new(3, 2, 2, (0..12).map(|v| v as f64 / 12.0).collect());
        assert_eq!(IdentityExtractor.extract(&img).unwrap(), img.data);
        let a = RandomProjectionExtractor.extract(&img).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, RandomProjectionExtractor.extract(&img).unwrap());
    }

    #[test]
    fn kid_subset_errors() {
        let x = fs(&[&[0.0], &[1.0], &[2.0]]);
        let m = MetricManifest { kid_subset_size: 4, ..Default::default() };
        assert!(matches!(kid(&x, &x, &m), Err(Error::SubsetTooLarge { subset: 4, available: 3 })));
    }

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(v))
    }

    #[test]
    fn fid_closed_forms() {
        let z = DVector::from_row_slice(&[0.0, 0.0]);
        let e = DVector::from_row_slice(&[1.0, 0.0]);
        let s = DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.7]);
        assert!(fid(&z, &s, &z, &s).unwrap().abs() < 1e-6);
        assert!((fid(&z, &s, &e, &s).unwrap() - 1.0).abs() < 1e-6);
        assert!((fid(&z, &diag(&[1.0, 1.0]), &z, &diag(&[4.0, 4.0])).unwrap() - 2.0).abs() < 1e-6);
        assert!((fid(&e, &diag(&[1.0, 1.0]), &z, &diag(&[4.0, 4.0])).unwrap() - 3.0).abs() < 1e-6);
    }

    #[test]
    fn fid_matches_reference_on_non_commuting_covariances() {
        // reference value from scipy.linalg.sqrtm on the same inputs
        let m1 = DVector::from_row_slice(&[0.5, -1.0, 2.0]);
        let m2 = DVector::from_row_slice(&[0.0, 0.0, 1.0]);
        let s1 = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 0.5]);
        let s2 = DMatrix::from_row_slice(3, 3, &[1.0, -0.4, 0.0, -0.4, 1.5, 0.3, 0.0, 0.3, 0.8]);
        assert!((fid(&m1, &s1, &m2, &s2).unwrap() - 2.7023345496260234).abs() < 1e-9);
        assert!((fid(&m2, &s2, &m1, &s1).unwrap() - 2.7023345496260234).abs() < 1e-9);
    }

    #[test]
    fn fid_rejects_bad_input() {
        let z = DVector::from_row_slice(&[0.0, f64::NAN]);
        let i = diag(&[1.0, 1.0]);
        assert!(matches!(fid(&z, &i, &z, &i), Err(Error::Numeric(_))));
        let z3 = DVector::from_row_slice(&[0.0, 0.0, 0.0]);
        assert!(matches!(fid(&z3, &i, &z3, &i), Err(Error::Shape(_))));
    }

    #[test]
    fn mmd_hand_cases() {
        let zeros = vec![vec![0.0], vec![0.0]];
        let ones = vec![vec![1.0], vec![1.0]];
        assert_eq!(mmd2_unbiased(&zeros, &zeros).unwrap(), 0.0);
        assert_eq!(mmd2_unbiased(&zeros, &ones).unwrap(), 7.0);
        let x = fs(&[&[0.0], &[0.0]]);
        let y = fs(&[&[1.0], &[1.0]]);
        let m = MetricManifest { kid_subset_size: 2, kid_n_subsets: 5, ..Default::default() };
        assert_eq!(kid(&x, &y, &m).unwrap(), (7.0, 0.0));
        assert_eq!(kid(&x, &x, &m).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn kid_is_deterministic_per_seed() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
        let x = FeatureSet::from_rows(&rows[..20], "t", "t").unwrap();
        let y = FeatureSet::from_rows(&rows[20..], "t", "t").unwrap();
        let m = MetricManifest { kid_subset_size: 10, kid_n_subsets: 7, ..Default::default() };
        assert_eq!(kid(&x, &y, &m).unwrap(), kid(&x, &y, &m).unwrap());
        let other = kid(&x, &y, &MetricManifest { seed: 1, ..m.clone() }).unwrap();
        assert_ne!(other, kid(&x, &y, &m).unwrap());
    }

    fn spd(v: &[f64]) -> DMatrix<f64> {
        let a = DMatrix::from_row_slice(3, 3, v);
        &a * a.transpose() + DMatrix::identity(3, 3) * 0.1
    }

    proptest::proptest! {
        #[test]
        fn fid_symmetric_nonnegative(
            a in proptest::collection::vec(-2.0f64..2.0, 9),
            b in proptest::collection::vec(-2.0f64..2.0, 9),
            mu in proptest::collection::vec(-3.0f64..3.0, 6),
        ) {
            let (s1, s2) = (spd(&a), spd(&b));
            let m1 = DVector::from_row_slice(&mu[..3]);
            let m2 = DVector::from_row_slice(&mu[3..]);
            let f12 = fid(&m1, &s1, &m2, &s2).unwrap();
            let f21 = fid(&m2, &s2, &m1, &s1).unwrap();
            proptest::prop_assert!(f12 >= -1e-6);
            proptest::prop_assert!((f12 - f21).abs() <= 1e-6 * f12.abs().max(1.0));
        }

        #[test]
        fn fid_grows_with_mean_separation(
            a in proptest::collection::vec(-2.0f64..2.0, 9),
            b in proptest::collection::vec(-2.0f64..2.0, 9),
            d in proptest::collection::vec(-3.0f64..3.0, 3),
            c in 1.1f64..4.0,
        ) {
            proptest::prop_assume!(d.iter().map(|v| v * v).sum::<f64>() > 1e-2);
            let (s1, s2) = (spd(&a), spd(&b));
            let z = DVector::zeros(3);
            let dm = DVector::from_row_slice(&d);
            let near = fid(&z, &s1, &dm, &s2).unwrap();
            let far = fid(&z, &s1, &(&dm * c), &s2).unwrap();
            proptest::prop_assert!(far > near);
        }
    }
}
