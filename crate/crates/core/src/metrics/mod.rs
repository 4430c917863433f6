//! Evaluation: feature statistics and Fréchet distance, reconstruction
//! distances, distance histograms and population effect maps.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Grid;
use crate::error::{contract, Error, Result};
use crate::imagery::{heatmap_png, ImageTile};
use crate::model::{GrowthState, LatentCode, Scalae};
use crate::tensor::{Graph, Tensor};

/// Seed of the extractor used by every evaluation in this crate.
pub const FEATURE_SEED: u64 = 0xF1D_5EED;
pub const FEATURE_DIM: usize = 64;
pub const DEFAULT_EFFECT_STYLES: usize = 20;
const EXTRACTOR_CHANNELS: [usize; 5] = [3, 16, 32, 64, 64];
const EXTRACTOR_SLOPE: f64 = 0.2;
const EXTRACT_CHUNK: usize = 64;

/// Untrained convolutional network with weights drawn once from a seed.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    seed: u64,
    layers: Vec<(Tensor, Tensor)>,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(FEATURE_SEED)
    }
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = EXTRACTOR_CHANNELS
            .windows(2)
            .map(|c| {
                let (cin, cout) = (c[0], c[1]);
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let mut w = Tensor::zeros(&[cout, cin, 3, 3]);
                for v in w.data_mut() {
                    *v = rng.sample::<f64, _>(StandardNormal) * std;
                }
                let mut b = Tensor::zeros(&[cout]);
                for v in b.data_mut() {
                    *v = rng.sample::<f64, _>(StandardNormal) * 0.1;
                }
                (w, b)
            })
            .collect();
        Self { seed, layers }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// One 64-dimensional feature vector per image.
    pub fn features(&self, images: &[ImageTile]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EXTRACT_CHUNK) {
            let (h, w) = (chunk[0].height(), chunk[0].width());
            if chunk.iter().any(|im| im.height() != h || im.width() != w) {
                return Err(contract!("feature extraction needs images of one size"));
            }
            let data = chunk.iter().flat_map(|im| im.pixels().iter().copied()).collect();
            let mut g = Graph::new();
            let mut x = g.constant(Tensor::new(vec![chunk.len(), 3, h, w], data)?);
            for (wt, b) in &self.layers {
                let wv = g.constant(wt.clone());
                let bv = g.constant(b.clone());
                x = g.conv2d(x, wv, Some(bv), 1, 1)?;
                x = g.leaky_relu(x, EXTRACTOR_SLOPE);
                let s = g.shape(x).to_vec();
                if s[2] % 2 == 0 && s[3] % 2 == 0 {
                    x = g.avg_pool(x, 2)?;
                }
            }
            let s = g.shape(x).to_vec();
            let pooled = g.sum_to(x, &[s[0], s[1], 1, 1])?;
            let area = (s[2] * s[3]) as f64;
            out.extend(g.value(pooled).data().chunks(FEATURE_DIM).map(|f| f.iter().map(|v| v / area).collect()));
        }
        Ok(out)
    }
}

/// Mean and unbiased covariance of a feature sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub n: usize,
    pub mean: Vec<f64>,
    /// Row-major `D×D`.
    pub cov: Vec<f64>,
}

impl FeatureStats {
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(contract!("feature statistics need at least 2 samples, got {n}"));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(contract!("feature vectors differ in length"));
        }
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for f in features {
            for i in 0..d {
                let di = f[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (f[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Self { n, mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn feature_stats(images: &[ImageTile], extractor: &FeatureExtractor) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(contract!("feature statistics need at least 2 images, got {}", images.len()));
    }
    FeatureStats::from_features(&extractor.features(images)?)
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let root = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance between Gaussian fits, clamped at zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.cov.len() != d * d || b.cov.len() != d * d {
        return Err(contract!("feature dimensions differ: {} vs {}", a.dim(), b.dim()));
    }
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let ra = psd_sqrt(sa.clone());
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let shift: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let value = shift + sa.trace() + sb.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::NonFinite("frechet distance".into()));
    }
    Ok(value.max(0.0))
}

fn same_shape(a: &ImageTile, b: &ImageTile) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(contract!(
            "image shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ));
    }
    Ok(())
}

/// Euclidean norm of the flattened difference.
pub fn pixel_distance(a: &ImageTile, b: &ImageTile) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// Euclidean distance between extractor features.
pub fn semantic_distance(a: &ImageTile, b: &ImageTile, extractor: &FeatureExtractor) -> Result<f64> {
    same_shape(a, b)?;
    let f = extractor.features(&[a.clone(), b.clone()])?;
    Ok(f[0].iter().zip(&f[1]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// Per-pixel mean absolute change, averaged over channels and styles.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

pub const EFFECT_MAGIC: &[u8; 4] = b"SEM1";

impl EffectMap {
    /// Means over pixels inside and outside `mask` (same size as the map).
    pub fn region_means(&self, mask: &[bool]) -> Result<(f64, f64)> {
        if mask.len() != self.values.len() {
            return Err(contract!("mask has {} cells, map has {}", mask.len(), self.values.len()));
        }
        let mean = |inside: bool| {
            let sel: Vec<f64> = self.values.iter().zip(mask).filter(|(_, m)| **m == inside).map(|(v, _)| *v).collect();
            if sel.is_empty() {
                0.0
            } else {
                sel.iter().sum::<f64>() / sel.len() as f64
            }
        };
        Ok((mean(true), mean(false)))
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        heatmap_png(self.height, self.width, &self.values)
    }

    /// `"SEM1"`, u32 height, u32 width, then `f32` values, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        out.extend_from_slice(EFFECT_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }
}

/// Cells where two grids differ, nearest-upsampled to `size×size`.
pub fn edit_mask(pop_a: &Grid, pop_b: &Grid, size: usize) -> Result<Vec<bool>> {
    if pop_a.height() != pop_b.height() || pop_a.width() != pop_b.width() {
        return Err(contract!("population grids differ in size"));
    }
    let diff: Vec<f64> = pop_a
        .data()
        .iter()
        .zip(pop_b.data())
        .map(|(a, b)| if a != b { 1.0 } else { 0.0 })
        .collect();
    let grid = Grid::new(pop_a.height(), pop_a.width(), diff)?;
    if size < grid.height() || size < grid.width() {
        return Err(contract!("mask size {size} is smaller than the grid"));
    }
    Ok(grid.resample(size, size)?.data().iter().map(|v| *v > 0.0).collect())
}

/// Mean over `k` seeded styles of `|synthesize(w, pop_a) − synthesize(w, pop_b)|`.
pub fn population_effect_map(model: &Scalae, pop_a: &Grid, pop_b: &Grid, k: usize, seed: u64, growth: GrowthState) -> Result<EffectMap> {
    if pop_a.height() != pop_b.height() || pop_a.width() != pop_b.width() {
        return Err(contract!(
            "population grids differ in size: {}x{} vs {}x{}",
            pop_a.height(),
            pop_a.width(),
            pop_b.height(),
            pop_b.width()
        ));
    }
    if k == 0 {
        return Err(contract!("effect map needs at least one style"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zs: Vec<LatentCode> = (0..k).map(|_| model.sample_latent(&mut rng)).collect();
    let ws = model.map_latents(&zs)?;
    let a = model.synthesize_batch(&ws, &vec![pop_a.clone(); k], growth)?;
    let b = model.synthesize_batch(&ws, &vec![pop_b.clone(); k], growth)?;
    let (h, w) = (a[0].height(), a[0].width());
    let plane = h * w;
    let mut values = vec![0.0; plane];
    for (x, y) in a.iter().zip(&b) {
        for c in 0..3 {
            for (v, (p, q)) in values.iter_mut().zip(x.channel(c).iter().zip(y.channel(c))) {
                *v += (p - q).abs();
            }
        }
    }
    let denom = (3 * k) as f64;
    values.iter_mut().for_each(|v| *v /= denom);
    Ok(EffectMap { height: h, width: w, values })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Uniform bins over `[min, max]`; the maximum falls in the last bin.
pub fn histogram(values: &[f64], n_bins: usize) -> Result<Histogram> {
    if values.is_empty() {
        return Err(contract!("histogram of an empty list"));
    }
    if n_bins == 0 {
        return Err(contract!("histogram needs at least one bin"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(contract!("histogram values must be finite"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        hi = lo + 1e-9;
    }
    let width = (hi - lo) / n_bins as f64;
    let edges = (0..=n_bins)
        .map(|i| if i == n_bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0; n_bins];
    for v in values {
        let i = (((v - lo) / width) as usize).min(n_bins - 1);
        counts[i] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Reconstruction distances of one held-out tile.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairDistance {
    pub tile_id: String,
    pub pixel_l2: f64,
    pub semantic_l2: f64,
}

/// `tile_id,pixel_l2,semantic_l2` rows followed by a `mean` row.
pub fn pairs_csv(rows: &[PairDistance]) -> String {
    let mut out = String::from("tile_id,pixel_l2,semantic_l2\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.tile_id, r.pixel_l2, r.semantic_l2));
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mp = rows.iter().map(|r| r.pixel_l2).sum::<f64>() / n;
        let ms = rows.iter().map(|r| r.semantic_l2).sum::<f64>() / n;
        out.push_str(&format!("mean,{mp},{ms}\n"));
    }
    out
}
