use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Row-major 2-D grid of values (population counts or their normalized form).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() {
            return Err(contract!("grid {height}x{width} needs {} values, got {}", height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Builds a grid from nested rows; rows must be equally long.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if height == 0 || width == 0 {
            return Err(contract!("grid must be non-empty"));
        }
        if rows.iter().any(|r| r.len() != width) {
            return Err(contract!("grid rows have unequal lengths"));
        }
        Ok(Self {
            height,
            width,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.width.max(1)).map(<[f64]>::to_vec).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Resample to `height × width`: area average where the source is finer,
    /// nearest-neighbour replication where it is coarser. Each axis must be
    /// related by an integer factor.
    pub fn resample(&self, height: usize, width: usize) -> Result<Grid> {
        let (ry, ry_up) = axis_ratio(self.height, height)?;
        let (rx, rx_up) = axis_ratio(self.width, width)?;
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let mut out = Vec::with_capacity(height * width);
        for ty in 0..height {
            let rows = if ry_up { ty / ry..ty / ry + 1 } else { ty * ry..(ty + 1) * ry };
            for tx in 0..width {
                let cols = if rx_up { tx / rx..tx / rx + 1 } else { tx * rx..(tx + 1) * rx };
                let mut acc = 0.0;
                let mut count = 0usize;
                for y in rows.clone() {
                    for x in cols.clone() {
                        acc += self.get(y, x);
                        count += 1;
                    }
                }
                out.push(acc / count as f64);
            }
        }
        Ok(Grid {
            height,
            width,
            data: out,
        })
    }
}

/// (factor, is_upsampling) between a source and target axis length.
fn axis_ratio(src: usize, dst: usize) -> Result<(usize, bool)> {
    if src == 0 || dst == 0 {
        return Err(contract!("cannot resample an empty axis ({src} -> {dst})"));
    }
    if src % dst == 0 {
        Ok((src / dst, false))
    } else if dst % src == 0 {
        Ok((dst / src, true))
    } else {
        Err(contract!("non-integer resampling ratio {src} -> {dst}"))
    }
}

/// Dataset-level log-scaling constants for population counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopNorm {
    pub pop_log_min: f64,
    pub pop_log_max: f64,
}

impl PopNorm {
    pub fn new(pop_log_min: f64, pop_log_max: f64) -> Result<Self> {
        let n = Self {
            pop_log_min,
            pop_log_max,
        };
        n.validate()?;
        Ok(n)
    }

    /// Constants spanning raw counts `min..=max`.
    pub fn from_range(min: f64, max: f64) -> Result<Self> {
        Self::new(min.ln_1p(), max.ln_1p())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pop_log_min.is_finite() && self.pop_log_max.is_finite()) || self.pop_log_max <= self.pop_log_min {
            return Err(contract!(
                "population constants need pop_log_min < pop_log_max (got {} and {})",
                self.pop_log_min,
                self.pop_log_max
            ));
        }
        Ok(())
    }

    /// Smallest raw count the constants represent.
    pub fn raw_min(&self) -> f64 {
        self.pop_log_min.exp_m1()
    }

    pub fn raw_max(&self) -> f64 {
        self.pop_log_max.exp_m1()
    }

    pub fn normalize_value(&self, p: f64) -> f64 {
        let span = self.pop_log_max - self.pop_log_min;
        (2.0 * (p.ln_1p() - self.pop_log_min) / span - 1.0).clamp(-1.0, 1.0)
    }

    pub fn denormalize_value(&self, n: f64) -> f64 {
        let span = self.pop_log_max - self.pop_log_min;
        (((n + 1.0) / 2.0) * span + self.pop_log_min).exp_m1()
    }

    /// `2·(ln(1+p) − lo)/(hi − lo) − 1`, clamped to `[−1, 1]`.
    pub fn normalize(&self, raw: &Grid) -> Result<Grid> {
        self.validate()?;
        if raw.data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(contract!("raw population must be finite and non-negative"));
        }
        let data = raw.data.iter().map(|&p| self.normalize_value(p)).collect();
        Grid::new(raw.height, raw.width, data)
    }

    pub fn denormalize(&self, normalized: &Grid) -> Result<Grid> {
        self.validate()?;
        if !is_normalized(normalized) {
            return Err(contract!("normalized population must lie in [-1, 1]"));
        }
        let data = normalized.data.iter().map(|&n| self.denormalize_value(n)).collect();
        Grid::new(normalized.height, normalized.width, data)
    }
}

pub fn is_normalized(grid: &Grid) -> bool {
    grid.data.iter().all(|v| (-1.0..=1.0).contains(v))
}
