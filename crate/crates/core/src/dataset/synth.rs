//! Procedural stand-in for paired satellite / population tiles.
//!
//! Population is a sum of Gaussian settlements; imagery is value-noise
//! terrain in a saturated green/brown palette, overpainted with
//! low-saturation gray "built-up" pixels whose probability grows with the
//! normalized population of the underlying cell. The gray/terrain split is
//! what [`builtup_score`] measures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, Grid, PopNorm, Provenance, TileRecord};
use crate::error::{contract, Error, Result};
use crate::imagery::ImageTile;

/// Pixel classifier for built-up (gray) pixels in `[−1, 1]` space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuiltupThresholds {
    /// Upper bound on `max(rgb) − min(rgb)`.
    pub max_spread: f64,
    pub lum_min: f64,
    pub lum_max: f64,
}

impl Default for BuiltupThresholds {
    fn default() -> Self {
        Self {
            max_spread: 0.15,
            lum_min: -0.3,
            lum_max: 0.6,
        }
    }
}

impl BuiltupThresholds {
    pub fn is_builtup(&self, rgb: [f64; 3]) -> bool {
        let max = rgb.iter().copied().fold(f64::MIN, f64::max);
        let min = rgb.iter().copied().fold(f64::MAX, f64::min);
        let lum = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
        max - min < self.max_spread && (self.lum_min..=self.lum_max).contains(&lum)
    }
}

/// Fraction of masked pixels classified as built-up.
pub fn builtup_score(image: &ImageTile, mask: &[bool], thresholds: &BuiltupThresholds) -> Result<f64> {
    if mask.len() != image.height() * image.width() {
        return Err(contract!("mask has {} cells, image {}", mask.len(), image.height() * image.width()));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask[y * image.width() + x] {
                total += 1;
                hits += thresholds.is_builtup(image.rgb(y, x)) as usize;
            }
        }
    }
    if total == 0 {
        return Err(contract!("built-up score needs a non-empty mask"));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_tiles: usize,
    pub resolution: usize,
    /// How many of the tiles are held out for evaluation (taken from the end).
    pub heldout: usize,
    /// Population grid side is `resolution / pop_downscale`.
    pub pop_downscale: usize,
}

impl WorldConfig {
    pub fn new(seed: u64, n_tiles: usize, resolution: usize) -> Self {
        Self {
            seed,
            n_tiles,
            resolution,
            heldout: n_tiles.div_ceil(10).min(n_tiles.saturating_sub(1)),
            pop_downscale: 4,
        }
    }
}

const GREEN: [f64; 3] = [-0.55, 0.15, -0.65];
const BROWN: [f64; 3] = [0.25, -0.15, -0.6];
const FOREST: [f64; 3] = [-0.75, -0.2, -0.8];
const MIN_CORRELATION: f64 = 0.5;

/// Bilinear value noise with `cells` lattice cells across the tile.
fn value_noise(rng: &mut ChaCha8Rng, res: usize, cells: usize) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(res * res);
    for y in 0..res {
        let fy = (y as f64 + 0.5) / res as f64 * cells as f64;
        let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..res {
            let fx = (x as f64 + 0.5) / res as f64 * cells as f64;
            let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |yy: usize, xx: usize| lattice[yy * n + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn fractal_noise(rng: &mut ChaCha8Rng, res: usize) -> Vec<f64> {
    let mut acc = vec![0.0; res * res];
    for (cells, amp) in [(2, 0.5), (4, 0.3), (8, 0.2)] {
        for (a, v) in acc.iter_mut().zip(value_noise(rng, res, cells)) {
            *a += amp * v;
        }
    }
    acc
}

fn settlements(rng: &mut ChaCha8Rng, side: usize) -> Grid {
    let blobs = rng.random_range(0..=4);
    let mut data = vec![0.0; side * side];
    for _ in 0..blobs {
        let cy = rng.random_range(0.0..side as f64);
        let cx = rng.random_range(0.0..side as f64);
        let sigma = rng.random_range(0.08..0.3) * side as f64;
        let peak = rng.random_range(10f64.ln()..5000f64.ln()).exp();
        for y in 0..side {
            for x in 0..side {
                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                data[y * side + x] += peak * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    for v in &mut data {
        // sub-person densities are treated as empty land
        *v = if *v < 0.5 { 0.0 } else { (*v as f32) as f64 };
    }
    Grid::new(side, side, data).expect("square grid")
}

fn paint_tile(rng: &mut ChaCha8Rng, res: usize, pop_norm_full: &Grid) -> ImageTile {
    let brightness = rng.random_range(0.65..1.0);
    let dryness = rng.random_range(-0.6..0.6);
    let forest_bias = rng.random_range(-0.8..0.2);
    let terrain = fractal_noise(rng, res);
    let canopy = fractal_noise(rng, res);
    let plane = res * res;
    let mut pixels = vec![0.0; 3 * plane];
    for i in 0..plane {
        let t = (0.5 + 0.9 * terrain[i] + dryness).clamp(0.0, 1.0);
        let f = (1.5 * canopy[i] + forest_bias).clamp(0.0, 1.0);
        let n = pop_norm_full.data()[i];
        let p_built = 0.95 * ((n + 1.0) / 2.0).powf(1.5);
        let rgb: [f64; 3] = if rng.random::<f64>() < p_built {
            let v = 0.15 + rng.random_range(-0.15..0.15);
            [0, 1, 2].map(|_| v + rng.random_range(-0.03..0.03))
        } else {
            [0, 1, 2].map(|c| {
                let base = GREEN[c] * (1.0 - t) + BROWN[c] * t;
                let base = base * (1.0 - f) + FOREST[c] * f;
                let lit = (base + 1.0) * 0.5 * brightness * 2.0 - 1.0;
                (lit + rng.random_range(-0.03..0.03)).clamp(-1.0, 1.0)
            })
        };
        for c in 0..3 {
            pixels[c * plane + i] = rgb[c];
        }
    }
    ImageTile::new(res, res, pixels).expect("3 channels")
}

/// Pearson correlation, over every population cell of `records`, between
/// the cell's normalized population and the built-up score of its pixels.
pub fn builtup_correlation(records: &[TileRecord], norm: &PopNorm, thresholds: &BuiltupThresholds) -> Result<f64> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in records {
        let image = rec.image();
        let pop = norm.normalize(&rec.pop())?;
        let (res, side) = (rec.resolution(), rec.pop_resolution());
        let k = res / side;
        for cy in 0..side {
            for cx in 0..side {
                let mut mask = vec![false; res * res];
                for y in cy * k..(cy + 1) * k {
                    for x in cx * k..(cx + 1) * k {
                        mask[y * res + x] = true;
                    }
                }
                xs.push(pop.get(cy, cx));
                ys.push(builtup_score(&image, &mask, thresholds)?);
            }
        }
    }
    Ok(pearson(&xs, &ys))
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Generate a deterministic synthetic dataset.
///
/// Fails if the emitted tiles do not show a population/built-up
/// correlation of at least 0.5.
pub fn synthesize_world(cfg: &WorldConfig) -> Result<Dataset> {
    let res = cfg.resolution;
    if cfg.n_tiles == 0 {
        return Err(contract!("synthetic world needs at least one tile"));
    }
    if res < 32 || !res.is_power_of_two() {
        return Err(contract!("resolution must be a power of two >= 32, got {res}"));
    }
    if cfg.pop_downscale == 0 || res % cfg.pop_downscale != 0 {
        return Err(contract!("population downscale {} does not divide {res}", cfg.pop_downscale));
    }
    if cfg.heldout >= cfg.n_tiles {
        return Err(contract!("held-out count {} leaves no training tiles", cfg.heldout));
    }
    let side = res / cfg.pop_downscale;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pops: Vec<Grid> = (0..cfg.n_tiles).map(|_| settlements(&mut rng, side)).collect();

    let min = pops.iter().flat_map(|g| g.data()).copied().fold(f64::MAX, f64::min);
    let max = pops.iter().flat_map(|g| g.data()).copied().fold(0.0, f64::max);
    let pop_log_min = min.ln_1p();
    // an all-empty world still needs a non-degenerate scale
    let pop_log_max = max.ln_1p().max(pop_log_min + std::f64::consts::LN_2);
    let norm = PopNorm::new(pop_log_min, pop_log_max)?;

    let thresholds = BuiltupThresholds::default();
    let mut records = Vec::with_capacity(cfg.n_tiles);
    for (i, pop) in pops.iter().enumerate() {
        let full = norm.normalize(pop)?.resample(res, res)?;
        let image = paint_tile(&mut rng, res, &full);
        records.push(TileRecord::from_tile(format!("tile-{i:05}"), &image, pop)?);
    }

    let corr = builtup_correlation(&records, &norm, &thresholds)?;
    if corr < MIN_CORRELATION {
        return Err(Error::Validation(format!(
            "synthetic world self-check failed: population/built-up correlation {corr:.3} < {MIN_CORRELATION}"
        )));
    }

    let heldout = records.split_off(cfg.n_tiles - cfg.heldout);
    let name = |r: &TileRecord| format!("{}.scr", r.tile_id);
    let manifest = DatasetManifest {
        full_resolution: res,
        pop_resolution: side,
        pop_log_min,
        pop_log_max,
        records: records.iter().map(name).collect(),
        heldout: heldout.iter().map(name).collect(),
        builtup: thresholds,
        provenance: Provenance {
            generator: format!("scalae synthetic world v{}", env!("CARGO_PKG_VERSION")),
            seed: Some(cfg.seed),
        },
    };
    Ok(Dataset {
        manifest,
        train: records,
        heldout,
    })
}
