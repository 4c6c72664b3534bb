//! Generative-quality metrics: Gaussian Fréchet distance between feature
//! corpora, a patch-level perceptual distance, and feature diversity.
//!
//! The feature extractors are small desk-scale networks: the toy classifier's
//! penultimate layer (clip level), the same network on frame differences
//! (dynamics), and a frozen random 2D convolution stack (perceptual patches).
//! Fréchet fits need at least two clips per corpus; with fewer clips than
//! feature dimensions the covariance is rank-deficient and the reported
//! distance leans on the `1e-6` diagonal shrinkage, so corpora of at least
//! the feature dimension are recommended.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::clips_to_tensor;
use crate::classifier::{csv_error, ClassifierModel};
use crate::error::{LddmError, Result};
use crate::graph::Graph;
use crate::nn::{conv, init_conv, ParamStore};
use crate::tensor::Tensor;
use crate::video::VideoClip;

/// Diagonal shrinkage added to every fitted covariance in [`corpus_distance`].
pub const COVARIANCE_SHRINKAGE: f64 = 1e-6;

/// Mean and covariance of a feature corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    /// Checks symmetry, numerical PSD and finiteness.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(LddmError::ShapeMismatch {
                expected: vec![d, d],
                found: vec![covariance.nrows(), covariance.ncols()],
            });
        }
        if count < 2 {
            return Err(LddmError::InvalidArgument(format!(
                "Gaussian fit needs at least 2 samples, got {count}"
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(LddmError::InvalidArgument("non-finite statistics".into()));
        }
        let asym = (&covariance - covariance.transpose()).abs().max();
        if asym > 1e-8 {
            return Err(LddmError::InvalidArgument(format!(
                "covariance asymmetric by {asym:e}"
            )));
        }
        let min_eig = SymmetricEigen::new(covariance.clone()).eigenvalues.min();
        if d > 0 && min_eig < -1e-8 {
            return Err(LddmError::InvalidArgument(format!(
                "covariance has eigenvalue {min_eig:e}"
            )));
        }
        Ok(Self { mean, covariance, count })
    }

    /// Sample mean and unbiased covariance of the rows of `features`.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(LddmError::InvalidArgument(format!(
                "corpus of {n} clips is too small for a Gaussian fit (need >= 2)"
            )));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(LddmError::InvalidArgument("feature rows differ in length".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let mut centered = x;
        for j in 0..d {
            let m = mean[j];
            centered.column_mut(j).add_scalar_mut(-m);
        }
        let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
        cov = (&cov + cov.transpose()) * 0.5;
        Self::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn shrunk(&self, eps: f64) -> Self {
        let d = self.dim();
        Self {
            mean: self.mean.clone(),
            covariance: &self.covariance + DMatrix::identity(d, d) * eps,
            count: self.count,
        }
    }
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^{1/2})`. The trace of the product root
/// is taken through the symmetric form `(√Σa Σb √Σa)^{1/2}`, with negative
/// eigenvalues clamped to zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(LddmError::ShapeMismatch {
            expected: vec![a.dim()],
            found: vec![b.dim()],
        });
    }
    let diff = &a.mean - &b.mean;
    let sa = sqrt_psd(&a.covariance);
    let inner = &sa * &b.covariance * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let d = diff.norm_squared() + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_root;
    if !d.is_finite() {
        return Err(LddmError::InvalidArgument("non-finite Fréchet distance".into()));
    }
    Ok(d.max(0.0))
}

/// Deterministic clip → vector map.
pub trait FeatureExtractor {
    /// Human-readable provenance of the features.
    fn descriptor(&self) -> String;
    fn dim(&self) -> usize;
    fn extract(&self, clips: &[&VideoClip]) -> Result<Vec<Vec<f64>>>;
}

/// What the classifier extractor looks at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureView {
    /// The clip itself.
    Clip,
    /// Temporal differences `v[t+1] − v[t]`, with a zero final frame.
    FrameDifference,
}

/// Penultimate-layer features of a trained [`ClassifierModel`].
pub struct ClassifierFeatures<'a> {
    pub model: &'a ClassifierModel,
    pub view: FeatureView,
}

const EXTRACT_CHUNK: usize = 64;

/// Channel-first frame differences `[N, C, Γ, H, W]` with a zero last frame.
pub fn frame_differences(clips: &[&VideoClip]) -> Result<Tensor> {
    let x = clips_to_tensor(clips)?;
    let s = x.shape().to_vec();
    let (frames, hw) = (s[2], s[3] * s[4]);
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data().chunks(frames * hw).zip(out.chunks_mut(frames * hw)) {
        for t in 0..frames.saturating_sub(1) {
            for k in 0..hw {
                dst[t * hw + k] = src[(t + 1) * hw + k] - src[t * hw + k];
            }
        }
    }
    Tensor::new(s, out)
}

impl FeatureExtractor for ClassifierFeatures<'_> {
    fn descriptor(&self) -> String {
        match self.view {
            FeatureView::Clip => "toy-classifier penultimate layer".into(),
            FeatureView::FrameDifference => {
                "toy-classifier penultimate layer on frame differences".into()
            }
        }
    }

    fn dim(&self) -> usize {
        self.model.feature_dim()
    }

    fn extract(&self, clips: &[&VideoClip]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(EXTRACT_CHUNK) {
            match self.view {
                FeatureView::Clip => out.extend(self.model.features(chunk)?),
                FeatureView::FrameDifference => {
                    for c in chunk {
                        if c.shape() != self.model.config().clip_shape {
                            return Err(LddmError::Geometry(format!(
                                "clip {:?} does not match extractor input {:?}",
                                c.shape(),
                                self.model.config().clip_shape
                            )));
                        }
                    }
                    let (f, _) = self.model.run_tensor(frame_differences(chunk)?)?;
                    out.extend(f.data().chunks(self.dim()).map(<[f64]>::to_vec));
                }
            }
        }
        Ok(out)
    }
}

/// Frozen random per-frame convolution features for the patch distance.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomPatchFeatures {
    params: ParamStore,
    channels: usize,
    features: usize,
    seed: u64,
}

impl RandomPatchFeatures {
    pub fn new(channels: usize, features: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_conv(&mut params, "lp.c1", channels, features, [1, 3, 3], &mut rng);
        init_conv(&mut params, "lp.c2", features, features, [1, 3, 3], &mut rng);
        Self {
            params,
            channels,
            features,
            seed,
        }
    }

    pub fn descriptor(&self) -> String {
        format!(
            "frozen random 2-layer 3x3 conv, {} features, seed {}",
            self.features, self.seed
        )
    }

    /// Feature maps `[F, Γ, H/2, W/2]` with every spatial feature vector
    /// scaled to unit length.
    pub fn feature_maps(&self, clip: &VideoClip) -> Result<Tensor> {
        if clip.shape()[3] != self.channels {
            return Err(LddmError::Geometry(format!(
                "clip has {} channels, extractor expects {}",
                clip.shape()[3],
                self.channels
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(clips_to_tensor(&[clip])?);
        let h = conv(&mut g, &p, "lp.c1", x, [1, 1, 1], [0, 1, 1])?;
        let h = g.silu(h);
        let h = conv(&mut g, &p, "lp.c2", h, [1, 2, 2], [0, 1, 1])?;
        let mut t = g.value(h).clone();
        let s = t.shape().to_vec();
        let (f, sites) = (s[1], s[2] * s[3] * s[4]);
        let data = t.data_mut();
        for site in 0..sites {
            let norm = (0..f).map(|k| data[k * sites + site].powi(2)).sum::<f64>().sqrt();
            let inv = 1.0 / (norm + 1e-10);
            for k in 0..f {
                data[k * sites + site] *= inv;
            }
        }
        t.reshape(&s[1..])
    }
}

/// Mean over frames and spatial sites of the squared distance between
/// unit-normalised feature vectors.
pub fn perceptual_patch_distance(
    a: &VideoClip,
    b: &VideoClip,
    extractor: &RandomPatchFeatures,
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(LddmError::Geometry(format!(
            "cannot compare {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let fa = extractor.feature_maps(a)?;
    let fb = extractor.feature_maps(b)?;
    let f = fa.shape()[0];
    let sites = fa.len() / f;
    let mut total = 0.0;
    for site in 0..sites {
        let mut d = 0.0;
        for k in 0..f {
            let x = fa.data()[k * sites + site] - fb.data()[k * sites + site];
            d += x * x;
        }
        total += d;
    }
    Ok(total / sites as f64)
}

fn check_corpus(name: &'static str, clips: &[&VideoClip]) -> Result<[usize; 4]> {
    if clips.len() < 2 {
        return Err(LddmError::InvalidArgument(format!(
            "{name} corpus has {} clips; at least 2 required",
            clips.len()
        )));
    }
    let shape = clips[0].shape();
    if clips.iter().any(|c| c.shape() != shape) {
        return Err(LddmError::Geometry(format!("{name} corpus mixes clip geometries")));
    }
    Ok(shape)
}

/// Fréchet distance between Gaussian fits of the two corpora's features.
pub fn corpus_distance(
    real: &[&VideoClip],
    generated: &[&VideoClip],
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    let sr = check_corpus("real", real)?;
    let sg = check_corpus("generated", generated)?;
    if sr != sg {
        return Err(LddmError::Geometry(format!(
            "corpora differ in geometry: {sr:?} vs {sg:?}"
        )));
    }
    let a = GaussianStats::fit(&extractor.extract(real)?)?.shrunk(COVARIANCE_SHRINKAGE);
    let b = GaussianStats::fit(&extractor.extract(generated)?)?.shrunk(COVARIANCE_SHRINKAGE);
    frechet_distance(&a, &b)
}

/// Mean pairwise Euclidean distance between feature vectors.
pub fn feature_diversity(features: &[Vec<f64>]) -> Result<f64> {
    let n = features.len();
    if n < 2 {
        return Err(LddmError::InvalidArgument(format!(
            "diversity needs at least 2 videos, got {n}"
        )));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += features[i]
                .iter()
                .zip(&features[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

pub fn diversity_score(videos: &[&VideoClip], extractor: &dyn FeatureExtractor) -> Result<f64> {
    if videos.len() < 2 {
        return Err(LddmError::InvalidArgument(format!(
            "diversity needs at least 2 videos, got {}",
            videos.len()
        )));
    }
    feature_diversity(&extractor.extract(videos)?)
}

/// One metric value in a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub extractor: String,
    pub corpus_a: String,
    pub corpus_b: String,
    pub value: f64,
    pub size_a: usize,
    pub size_b: usize,
}

pub fn write_metric_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
