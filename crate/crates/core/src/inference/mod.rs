//! Checkpoints and the user-facing workflows: reconstruction, repopulation
//! and style interpolation.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Grid;
use crate::error::{contract, Result};
use crate::imagery::ImageTile;
use crate::model::{Scalae, StyleVector};

/// Style for a user-facing seed: one latent drawn from ChaCha8 and mapped.
pub fn seeded_style(model: &Scalae, seed: u64) -> Result<StyleVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = model.sample_latent(&mut rng);
    model.map_latent(&z)
}

/// Per-pixel `|a − b|` averaged over channels, row-major.
pub fn pixel_delta(a: &ImageTile, b: &ImageTile) -> Result<Vec<f64>> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(contract!("images differ in size"));
    }
    let mut out = vec![0.0; a.height() * a.width()];
    for c in 0..3 {
        for (v, (p, q)) in out.iter_mut().zip(a.channel(c).iter().zip(b.channel(c))) {
            *v += (p - q).abs() / 3.0;
        }
    }
    Ok(out)
}

/// One encoder pass followed by synthesis under the same population.
pub fn reconstruct(model: &Scalae, image: &ImageTile, pop: &Grid) -> Result<ImageTile> {
    let growth = model.growth();
    let w = model.encode(image, pop, growth)?;
    model.synthesize(&w, pop, growth)
}

/// Style read with the original population, imagery regenerated under the new one.
pub fn repopulate(model: &Scalae, image: &ImageTile, pop_orig: &Grid, pop_new: &Grid) -> Result<ImageTile> {
    if pop_orig.height() != pop_new.height() || pop_orig.width() != pop_new.width() {
        return Err(contract!(
            "population grids differ in size: {}x{} vs {}x{}",
            pop_orig.height(),
            pop_orig.width(),
            pop_new.height(),
            pop_new.width()
        ));
    }
    let growth = model.growth();
    let w = model.encode(image, pop_orig, growth)?;
    model.synthesize(&w, pop_new, growth)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpolationMode {
    Linear,
    Spherical,
}

impl std::str::FromStr for InterpolationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "spherical" => Ok(Self::Spherical),
            other => Err(format!("unknown interpolation mode {other:?} (linear or spherical)")),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn interpolate_styles(w1: &StyleVector, w2: &StyleVector, t: f64, mode: InterpolationMode) -> Result<StyleVector> {
    if w1.dim() != w2.dim() {
        return Err(contract!("style dimensions differ: {} vs {}", w1.dim(), w2.dim()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(contract!("t = {t} outside [0, 1]"));
    }
    let (a, b) = (w1.as_slice(), w2.as_slice());
    let linear = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect() };
    match mode {
        InterpolationMode::Linear => StyleVector::new(linear(a, b)),
        InterpolationMode::Spherical => {
            let (ra, rb) = (norm(a), norm(b));
            if ra == 0.0 || rb == 0.0 {
                return Err(contract!("spherical interpolation of a zero style"));
            }
            if t == 0.0 {
                return Ok(w1.clone());
            }
            if t == 1.0 {
                return Ok(w2.clone());
            }
            let ua: Vec<f64> = a.iter().map(|x| x / ra).collect();
            let ub: Vec<f64> = b.iter().map(|x| x / rb).collect();
            let cos = ua.iter().zip(&ub).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0);
            let theta = cos.acos();
            let dir: Vec<f64> = if theta.sin() < 1e-12 {
                if cos < 0.0 {
                    return Err(contract!("opposite styles have no unique great circle"));
                }
                ua
            } else {
                let (sa, sb) = (((1.0 - t) * theta).sin() / theta.sin(), (t * theta).sin() / theta.sin());
                ua.iter().zip(&ub).map(|(x, y)| sa * x + sb * y).collect()
            };
            let dn = norm(&dir);
            let r = (1.0 - t) * ra + t * rb;
            StyleVector::new(dir.iter().map(|x| x / dn * r).collect())
        }
    }
}
