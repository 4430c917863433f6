//! The SCALAE networks: mapping F, spatial conditional style SCS, synthesis G,
//! encoder E and the discriminator head, composed as G∘SCS∘F and D∘E.

pub(crate) mod layers;
pub(crate) mod networks;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{is_normalized, Grid};
use crate::error::{contract, Error, Result};
use crate::imagery::ImageTile;
use crate::tensor::{Graph, ParamStore, Tensor};

pub use layers::Pass;
pub(crate) use networks::{Networks, PopInputs};

/// Largest batch evaluated in one graph by the inference helpers.
const INFERENCE_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub base_resolution: usize,
    pub max_stage: usize,
    pub channels_per_stage: Vec<usize>,
    pub mapping_layers: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            z_dim: 64,
            w_dim: 64,
            base_resolution: 4,
            max_stage: 3,
            channels_per_stage: vec![64, 64, 32, 32],
            mapping_layers: 4,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.z_dim == 0 || self.w_dim == 0 || self.base_resolution == 0 || self.mapping_layers == 0 {
            return Err(contract!("model dimensions must be positive"));
        }
        if self.channels_per_stage.len() != self.max_stage + 1 {
            return Err(contract!(
                "channels_per_stage has {} entries, max_stage {} needs {}",
                self.channels_per_stage.len(),
                self.max_stage,
                self.max_stage + 1
            ));
        }
        if self.channels_per_stage.contains(&0) {
            return Err(contract!("channel counts must be positive"));
        }
        if self.max_stage > 10 {
            return Err(contract!("max_stage {} is out of range", self.max_stage));
        }
        if !(self.leaky_slope.is_finite() && (0.0..1.0).contains(&self.leaky_slope)) {
            return Err(contract!("leaky_slope must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn resolution(&self, stage: usize) -> usize {
        self.base_resolution << stage
    }

    pub fn full_resolution(&self) -> usize {
        self.resolution(self.max_stage)
    }
}

/// Progressive-growing position: active stage and fade-in weight of its newest block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthState {
    pub stage: usize,
    pub alpha: f64,
}

impl GrowthState {
    pub fn new(stage: usize, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(contract!("alpha {alpha} outside [0, 1]"));
        }
        if stage == 0 && alpha != 1.0 {
            return Err(contract!("stage 0 has no block to fade in; alpha must be 1"));
        }
        Ok(Self { stage, alpha })
    }

    /// Fully blended stage.
    pub fn settled(stage: usize) -> Self {
        Self { stage, alpha: 1.0 }
    }
}

/// Gaussian input noise `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentCode(Vec<f64>);

impl LatentCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(contract!("latent code has non-finite entries"));
        }
        Ok(Self(values))
    }

    pub fn sample<R: Rng>(rng: &mut R, dim: usize) -> Self {
        Self((0..dim).map(|_| rng.sample(StandardNormal)).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Intermediate style `w`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StyleVector(Vec<f64>);

impl StyleVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(contract!("style vector has non-finite entries"));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Parameters and layout of one SCALAE model.
#[derive(Clone, Debug)]
pub struct Scalae {
    config: ModelConfig,
    params: ParamStore,
    growth: GrowthState,
    nets: Networks,
}

impl Scalae {
    /// Freshly initialized model at stage 0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = Networks::build(&config, &mut params, &mut rng);
        Ok(Self {
            config,
            params,
            growth: GrowthState::settled(0),
            nets,
        })
    }

    /// Rebuilds a model from named tensors; every parameter must appear exactly once
    /// with the shape the configuration implies.
    pub fn from_parameters(config: ModelConfig, growth: GrowthState, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.set_growth(growth)?;
        let mut seen = vec![false; model.params.len()];
        for (name, value) in tensors {
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if seen[id.index()] {
                return Err(Error::Format(format!("parameter {name} appears twice")));
            }
            seen[id.index()] = true;
            let p = model.params.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, config implies {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        if let Some((_, p)) = model.params.iter().find(|(id, _)| !seen[id.index()]) {
            return Err(Error::Format(format!("missing parameter {}", p.name)));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn nets(&self) -> &Networks {
        &self.nets
    }

    pub fn growth(&self) -> GrowthState {
        self.growth
    }

    pub fn set_growth(&mut self, growth: GrowthState) -> Result<()> {
        self.check_growth(growth)?;
        self.growth = growth;
        Ok(())
    }

    /// Image side length at the current growth stage.
    pub fn resolution(&self) -> usize {
        self.config.resolution(self.growth.stage)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn encoder_input_channels(&self) -> usize {
        self.nets.encoder_input_channels(&self.params)
    }

    pub(crate) fn check_growth(&self, growth: GrowthState) -> Result<()> {
        GrowthState::new(growth.stage, growth.alpha)?;
        if growth.stage > self.config.max_stage {
            return Err(contract!("stage {} exceeds max_stage {}", growth.stage, self.config.max_stage));
        }
        Ok(())
    }

    pub fn sample_latent<R: Rng>(&self, rng: &mut R) -> LatentCode {
        LatentCode::sample(rng, self.config.z_dim)
    }

    /// Stacks normalized population grids, resampled to every level up to `stage`.
    pub(crate) fn pop_inputs(&self, g: &mut Graph, pops: &[Grid], stage: usize) -> Result<PopInputs> {
        if pops.iter().any(|p| !is_normalized(p)) {
            return Err(contract!("population grid is not normalized to [-1, 1]"));
        }
        let mut levels = Vec::with_capacity(stage + 1);
        for l in 0..=stage {
            let r = self.config.resolution(l);
            let mut data = Vec::with_capacity(pops.len() * r * r);
            for p in pops {
                data.extend_from_slice(p.resample(r, r)?.data());
            }
            levels.push(g.constant(Tensor::new(vec![pops.len(), 1, r, r], data)?));
        }
        Ok(PopInputs { levels })
    }

    pub(crate) fn image_tensor(&self, images: &[ImageTile], resolution: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * 3 * resolution * resolution);
        for im in images {
            if im.height() != resolution || im.width() != resolution {
                return Err(contract!(
                    "image is {}x{}, stage resolution is {resolution}x{resolution}",
                    im.height(),
                    im.width()
                ));
            }
            data.extend_from_slice(im.pixels());
        }
        Ok(Tensor::new(vec![images.len(), 3, resolution, resolution], data)?)
    }

    fn style_tensor(&self, ws: &[StyleVector]) -> Result<Tensor> {
        let d = self.config.w_dim;
        if let Some(w) = ws.iter().find(|w| w.dim() != d) {
            return Err(contract!("style vector has {} entries, model expects {d}", w.dim()));
        }
        let data = ws.iter().flat_map(|w| w.as_slice().iter().copied()).collect();
        Ok(Tensor::new(vec![ws.len(), d], data)?)
    }

    fn rows_to_styles(t: &Tensor) -> Result<Vec<StyleVector>> {
        let d = t.shape()[1];
        t.data()
            .chunks(d)
            .map(|c| {
                StyleVector::new(c.to_vec()).map_err(|_| Error::NonFinite("style computation".into()))
            })
            .collect()
    }

    fn tensor_to_images(t: &Tensor) -> Result<Vec<ImageTile>> {
        let (r, plane) = (t.shape()[2], 3 * t.shape()[2] * t.shape()[3]);
        if !t.is_finite() {
            return Err(Error::NonFinite("synthesis".into()));
        }
        t.data().chunks(plane).map(|c| ImageTile::new(r, r, c.to_vec())).collect()
    }

    pub fn map_latents(&self, zs: &[LatentCode]) -> Result<Vec<StyleVector>> {
        let d = self.config.z_dim;
        let mut out = Vec::with_capacity(zs.len());
        for chunk in zs.chunks(INFERENCE_CHUNK) {
            if let Some(z) = chunk.iter().find(|z| z.0.len() != d) {
                return Err(contract!("latent code has {} entries, model expects {d}", z.0.len()));
            }
            let data = chunk.iter().flat_map(|z| z.0.iter().copied()).collect();
            let mut p = Pass::new(&self.params, &[]);
            let z = p.g.constant(Tensor::new(vec![chunk.len(), d], data)?);
            let w = self.nets.map(&mut p, z)?;
            out.extend(Self::rows_to_styles(p.g.value(w))?);
        }
        Ok(out)
    }

    pub fn map_latent(&self, z: &LatentCode) -> Result<StyleVector> {
        Ok(self.map_latents(std::slice::from_ref(z))?.remove(0))
    }

    pub fn synthesize_batch(&self, ws: &[StyleVector], pops: &[Grid], growth: GrowthState) -> Result<Vec<ImageTile>> {
        self.check_growth(growth)?;
        if ws.len() != pops.len() {
            return Err(contract!("{} styles but {} population grids", ws.len(), pops.len()));
        }
        let mut out = Vec::with_capacity(ws.len());
        for (wc, pc) in ws.chunks(INFERENCE_CHUNK).zip(pops.chunks(INFERENCE_CHUNK)) {
            let mut p = Pass::new(&self.params, &[]);
            let w = p.g.constant(self.style_tensor(wc)?);
            let pop = self.pop_inputs(&mut p.g, pc, growth.stage)?;
            let x = self.nets.synthesize(&mut p, w, &pop, growth)?;
            out.extend(Self::tensor_to_images(p.g.value(x))?);
        }
        Ok(out)
    }

    pub fn synthesize(&self, w: &StyleVector, pop: &Grid, growth: GrowthState) -> Result<ImageTile> {
        Ok(self
            .synthesize_batch(std::slice::from_ref(w), std::slice::from_ref(pop), growth)?
            .remove(0))
    }

    /// `synthesize(map_latent(z), pop)`.
    pub fn generate(&self, z: &LatentCode, pop: &Grid, growth: GrowthState) -> Result<ImageTile> {
        self.synthesize(&self.map_latent(z)?, pop, growth)
    }

    fn encode_chunks(&self, images: &[ImageTile], pops: &[Grid], growth: GrowthState, head: bool) -> Result<Tensor> {
        self.check_growth(growth)?;
        if images.len() != pops.len() {
            return Err(contract!("{} images but {} population grids", images.len(), pops.len()));
        }
        let r = self.config.resolution(growth.stage);
        let mut shape = vec![0, if head { 1 } else { self.config.w_dim }];
        let mut data = Vec::new();
        for (ic, pc) in images.chunks(INFERENCE_CHUNK).zip(pops.chunks(INFERENCE_CHUNK)) {
            let mut p = Pass::new(&self.params, &[]);
            let x = p.g.constant(self.image_tensor(ic, r)?);
            let pop = self.pop_inputs(&mut p.g, pc, growth.stage)?;
            let mut w = self.nets.encode(&mut p, x, &pop, growth)?;
            if head {
                w = self.nets.head(&mut p, w)?;
            }
            data.extend_from_slice(p.g.value(w).data());
            shape[0] += ic.len();
        }
        let t = Tensor::new(shape, data)?;
        if !t.is_finite() {
            return Err(Error::NonFinite("encoding".into()));
        }
        Ok(t)
    }

    pub fn encode_batch(&self, images: &[ImageTile], pops: &[Grid], growth: GrowthState) -> Result<Vec<StyleVector>> {
        Self::rows_to_styles(&self.encode_chunks(images, pops, growth, false)?)
    }

    pub fn encode(&self, image: &ImageTile, pop: &Grid, growth: GrowthState) -> Result<StyleVector> {
        Ok(self
            .encode_batch(std::slice::from_ref(image), std::slice::from_ref(pop), growth)?
            .remove(0))
    }

    /// One logit per image.
    pub fn discriminate_batch(&self, images: &[ImageTile], pops: &[Grid], growth: GrowthState) -> Result<Vec<f64>> {
        Ok(self.encode_chunks(images, pops, growth, true)?.into_data())
    }

    pub fn discriminate(&self, image: &ImageTile, pop: &Grid, growth: GrowthState) -> Result<f64> {
        Ok(self.discriminate_batch(std::slice::from_ref(image), std::slice::from_ref(pop), growth)?[0])
    }

    /// Scale and bias maps, each `[C, H, W]`, for modulation site `site` (0 or 1) of `level`.
    pub fn scs_modulation(&self, w: &StyleVector, pop: &Grid, level: usize, site: usize) -> Result<(Tensor, Tensor)> {
        if level > self.config.max_stage || site > 1 {
            return Err(contract!("no modulation site {site} at level {level}"));
        }
        let mut p = Pass::new(&self.params, &[]);
        let wv = p.g.constant(self.style_tensor(std::slice::from_ref(w))?);
        let pops = self.pop_inputs(&mut p.g, std::slice::from_ref(pop), level)?;
        let (s, b) = self.nets.modulation(&mut p, wv, pops.levels[level], level, site)?;
        let unbatch = |t: &Tensor| t.clone().reshape(&t.shape()[1..]);
        Ok((unbatch(p.g.value(s))?, unbatch(p.g.value(b))?))
    }
}
