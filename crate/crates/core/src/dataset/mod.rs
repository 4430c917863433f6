//! Tile records, population normalization, grid resampling, and the
//! procedural synthetic world used for training and conditioning tests.

mod grid;
mod record;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use grid::{is_normalized, Grid, PopNorm};
pub use record::{TileRecord, RECORD_MAGIC};
pub use synth::{builtup_correlation, builtup_score, synthesize_world, BuiltupThresholds, WorldConfig};

use crate::error::{contract, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: Option<u64>,
}

/// JSON index of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub full_resolution: usize,
    pub pop_resolution: usize,
    pub pop_log_min: f64,
    pub pop_log_max: f64,
    /// Training record files, relative to the manifest.
    pub records: Vec<String>,
    /// Held-out record files used only for evaluation.
    #[serde(default)]
    pub heldout: Vec<String>,
    pub builtup: BuiltupThresholds,
    pub provenance: Provenance,
}

impl DatasetManifest {
    pub fn pop_norm(&self) -> Result<PopNorm> {
        PopNorm::new(self.pop_log_min, self.pop_log_max)
    }
}

/// A manifest together with its loaded records.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<TileRecord>,
    pub heldout: Vec<TileRecord>,
}

impl Dataset {
    pub fn pop_norm(&self) -> Result<PopNorm> {
        self.manifest.pop_norm()
    }

    /// Held-out tiles, or every training tile when none were held out.
    pub fn eval_records(&self) -> &[TileRecord] {
        if self.heldout.is_empty() {
            &self.train
        } else {
            &self.heldout
        }
    }

    /// Writes `<tile_id>.scr` files and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let all = self.manifest.records.iter().zip(&self.train);
        let held = self.manifest.heldout.iter().zip(&self.heldout);
        for (name, rec) in all.chain(held) {
            rec.write(&dir.join(name))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest)?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        manifest.pop_norm()?;
        let load_all = |names: &[String]| -> Result<Vec<TileRecord>> {
            names
                .iter()
                .map(|n| {
                    let rec = TileRecord::load(&record_path(dir, n))?;
                    if rec.resolution() != manifest.full_resolution || rec.pop_resolution() != manifest.pop_resolution {
                        return Err(Error::Validation(format!(
                            "{n}: resolution {}/{} differs from manifest {}/{}",
                            rec.resolution(),
                            rec.pop_resolution(),
                            manifest.full_resolution,
                            manifest.pop_resolution
                        )));
                    }
                    Ok(rec)
                })
                .collect()
        };
        let train = load_all(&manifest.records)?;
        let heldout = load_all(&manifest.heldout)?;
        if train.is_empty() {
            return Err(contract!("dataset {} lists no training records", dir.display()));
        }
        Ok(Self {
            manifest,
            train,
            heldout,
        })
    }
}

fn record_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
