//! ALAE optimization: discriminator, generator and latent reciprocity steps,
//! the progressive growing schedule, and the epoch loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Grid, PopNorm, TileRecord};
use crate::error::{contract, Error, Result};
use crate::imagery::ImageTile;
use crate::model::{GrowthState, LatentCode, ModelConfig, Pass, Scalae};
use crate::tensor::{Adam, AdamConfig, ParamGroup, Tensor, Var};

pub const D_STEP_GROUPS: &[ParamGroup] = &[ParamGroup::Encoder, ParamGroup::DiscHead];
pub const G_STEP_GROUPS: &[ParamGroup] = &[ParamGroup::Mapping, ParamGroup::Synthesis, ParamGroup::Scs];
pub const RECIPROCITY_GROUPS: &[ParamGroup] = &[ParamGroup::Synthesis, ParamGroup::Scs, ParamGroup::Encoder];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_per_stage: usize,
    pub total_epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub r1_gamma: f64,
    pub alpha_ramp_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_stage: 16,
            total_epochs: 64,
            base_lr: 0.002,
            batch_size: 16,
            r1_gamma: 10.0,
            alpha_ramp_fraction: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_stage == 0 {
            return Err(contract!("epochs_per_stage must be positive"));
        }
        if self.batch_size < 2 {
            return Err(contract!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(contract!("learning rate must be positive, got {}", self.base_lr));
        }
        if !(self.r1_gamma.is_finite() && self.r1_gamma >= 0.0) {
            return Err(contract!("r1_gamma must be non-negative, got {}", self.r1_gamma));
        }
        if !(self.alpha_ramp_fraction > 0.0 && self.alpha_ramp_fraction <= 1.0) {
            return Err(contract!("alpha_ramp_fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.base_lr,
            ..AdamConfig::default()
        }
    }
}

/// Stage and fade-in weight for `epoch`.
pub fn growth_schedule(epoch: usize, cfg: &TrainConfig, max_stage: usize) -> GrowthState {
    let stage = (epoch / cfg.epochs_per_stage).min(max_stage);
    if stage == 0 {
        return GrowthState::settled(0);
    }
    let within = (epoch - stage * cfg.epochs_per_stage) as f64;
    let ramp = cfg.alpha_ramp_fraction * cfg.epochs_per_stage as f64;
    GrowthState {
        stage,
        alpha: (within / ramp).min(1.0),
    }
}

/// Real tiles at the stage resolution with their normalized population.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Vec<ImageTile>,
    pub pops: Vec<Grid>,
}

impl Batch {
    /// Downsamples records to the stage resolution; while a block fades in, the
    /// image is blended with its coarser version the same way the generator blends.
    pub fn from_records(records: &[&TileRecord], norm: &PopNorm, model: &ModelConfig, growth: GrowthState) -> Result<Self> {
        let r = model.resolution(growth.stage);
        let mut images = Vec::with_capacity(records.len());
        let mut pops = Vec::with_capacity(records.len());
        for rec in records {
            let full = rec.image();
            if full.height() % r != 0 {
                return Err(contract!("tile {} of side {} cannot feed stage resolution {r}", rec.tile_id, full.height()));
            }
            let x = full.downsample(full.height() / r)?;
            let x = if growth.alpha < 1.0 {
                let coarse = x.downsample(2)?.upsample(2)?;
                let a = growth.alpha;
                let px = x.pixels().iter().zip(coarse.pixels()).map(|(f, c)| a * f + (1.0 - a) * c).collect();
                ImageTile::new(r, r, px)?
            } else {
                x
            };
            images.push(x);
            pops.push(norm.normalize(&rec.pop())?);
        }
        Ok(Self { images, pops })
    }

    pub fn len(&self) -> usize {
        self.pops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pops.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DStepLoss {
    /// Adversarial part plus the weighted penalty.
    pub total: f64,
    pub adversarial: f64,
    /// Mean squared input-gradient norm at real samples (unweighted).
    pub r1: f64,
}

fn latents(model: &Scalae, p: &mut Pass, rng: &mut impl Rng, n: usize) -> Result<Var> {
    let d = model.config().z_dim;
    let data = (0..n).flat_map(|_| LatentCode::sample(rng, d).as_slice().to_vec()).collect();
    Ok(p.g.constant(Tensor::new(vec![n, d], data)?))
}

fn finite(step: &str, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{step}: loss is {loss}")))
    }
}

fn apply(model: &mut Scalae, opt: &mut Adam, grads: Vec<(crate::tensor::ParamId, Tensor)>) -> Result<()> {
    let store = model.params_mut();
    store.zero_grad();
    let ids: Vec<_> = grads.iter().map(|(id, _)| *id).collect();
    for (id, g) in &grads {
        store.accumulate_grad(*id, g)?;
    }
    opt.step(store, &ids)?;
    Ok(())
}

/// Updates E and the D head on real tiles against fresh fakes.
pub fn d_step(model: &mut Scalae, opt: &mut Adam, batch: &Batch, growth: GrowthState, r1_gamma: f64, rng: &mut impl Rng) -> Result<DStepLoss> {
    model.check_growth(growth)?;
    let n = batch.len();
    let (loss, grads) = {
        let mut p = Pass::new(model.params(), D_STEP_GROUPS);
        let nets = model.nets();
        let r = model.config().resolution(growth.stage);
        let x = p.g.leaf(model.image_tensor(&batch.images, r)?, r1_gamma > 0.0);
        let pops = model.pop_inputs(&mut p.g, &batch.pops, growth.stage)?;
        let z = latents(model, &mut p, rng, n)?;
        let w = nets.map(&mut p, z)?;
        let fake = nets.synthesize(&mut p, w, &pops, growth)?;

        let real_w = nets.encode(&mut p, x, &pops, growth)?;
        let real_logit = nets.head(&mut p, real_w)?;
        let fake_w = nets.encode(&mut p, fake, &pops, growth)?;
        let fake_logit = nets.head(&mut p, fake_w)?;
        let neg = p.g.neg(real_logit);
        let lr = p.g.softplus(neg);
        let lr = p.g.mean(lr);
        let lf = p.g.softplus(fake_logit);
        let lf = p.g.mean(lf);
        let adv = p.g.add(lr, lf)?;
        let (total, r1) = if r1_gamma > 0.0 {
            let gn = p.g.grad_norm_sq(real_logit, x)?;
            let r1 = p.g.mean(gn);
            let pen = p.g.scale(r1, r1_gamma / 2.0);
            (p.g.add(adv, pen)?, p.g.value(r1).data()[0])
        } else {
            (adv, 0.0)
        };
        let loss = DStepLoss {
            total: p.g.value(total).data()[0],
            adversarial: p.g.value(adv).data()[0],
            r1,
        };
        finite("d_step", loss.total)?;
        (loss, p.gradients(total)?)
    };
    apply(model, opt, grads)?;
    Ok(loss)
}

/// Updates F, G and SCS to fool the current discriminator.
pub fn g_step(model: &mut Scalae, opt: &mut Adam, pops: &[Grid], growth: GrowthState, rng: &mut impl Rng) -> Result<f64> {
    model.check_growth(growth)?;
    let (loss, grads) = {
        let mut p = Pass::new(model.params(), G_STEP_GROUPS);
        let nets = model.nets();
        let pin = model.pop_inputs(&mut p.g, pops, growth.stage)?;
        let z = latents(model, &mut p, rng, pops.len())?;
        let w = nets.map(&mut p, z)?;
        let fake = nets.synthesize(&mut p, w, &pin, growth)?;
        let fw = nets.encode(&mut p, fake, &pin, growth)?;
        let logit = nets.head(&mut p, fw)?;
        let neg = p.g.neg(logit);
        let sp = p.g.softplus(neg);
        let l = p.g.mean(sp);
        let loss = p.g.value(l).data()[0];
        finite("g_step", loss)?;
        (loss, p.gradients(l)?)
    };
    apply(model, opt, grads)?;
    Ok(loss)
}

/// Pulls E∘G towards the identity on styles: the mean over batch and style
/// entries of `(w − E(G(w, pop), pop))²`.
pub fn reciprocity_step(model: &mut Scalae, opt: &mut Adam, pops: &[Grid], growth: GrowthState, rng: &mut impl Rng) -> Result<f64> {
    model.check_growth(growth)?;
    let n = pops.len();
    let (loss, grads) = {
        let mut p = Pass::new(model.params(), RECIPROCITY_GROUPS);
        let nets = model.nets();
        let pin = model.pop_inputs(&mut p.g, pops, growth.stage)?;
        let z = latents(model, &mut p, rng, n)?;
        let w = nets.map(&mut p, z)?;
        let x = nets.synthesize(&mut p, w, &pin, growth)?;
        let back = nets.encode(&mut p, x, &pin, growth)?;
        let d = p.g.sub(w, back)?;
        let sq = p.g.mul(d, d)?;
        let l = p.g.mean(sq);
        let loss = p.g.value(l).data()[0];
        finite("reciprocity_step", loss)?;
        (loss, p.gradients(l)?)
    };
    apply(model, opt, grads)?;
    Ok(loss)
}

/// Per-epoch averages of the step losses.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: usize,
    pub alpha: f64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_r: f64,
    pub r1: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,stage,alpha,loss_d,loss_g,loss_r,r1,wall_seconds";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.3}\n",
            m.epoch, m.stage, m.alpha, m.loss_d, m.loss_g, m.loss_r, m.r1, m.wall_seconds
        ));
    }
    out
}

/// Failure during training; `model` holds the parameters from the start of the failing epoch.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub model: Box<Scalae>,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains a fresh model seeded from `cfg.seed`.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    model_cfg: ModelConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> std::result::Result<(Scalae, Vec<EpochMetrics>), Box<TrainFailure>> {
    let fail = |error: Error, model: Scalae, metrics: Vec<EpochMetrics>| {
        Box::new(TrainFailure {
            error,
            model: Box::new(model),
            metrics,
        })
    };
    let mut model = match Scalae::new(model_cfg, cfg.seed) {
        Ok(m) => m,
        Err(e) => {
            let placeholder = Scalae::new(ModelConfig::default(), cfg.seed).expect("default config is valid");
            return Err(fail(e, placeholder, Vec::new()));
        }
    };
    match train_model(cfg, data, &mut model, on_epoch) {
        Ok(metrics) => Ok((model, metrics)),
        Err((e, metrics)) => Err(fail(e, model, metrics)),
    }
}

/// Runs the epoch loop on `model`. On error the model is rolled back to the
/// start of the failing epoch and the completed epochs' metrics are returned.
pub fn train_model(
    cfg: &TrainConfig,
    data: &Dataset,
    model: &mut Scalae,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> std::result::Result<Vec<EpochMetrics>, (Error, Vec<EpochMetrics>)> {
    let mut metrics = Vec::new();
    if let Err(e) = check_inputs(cfg, data, model.config()) {
        return Err((e, metrics));
    }
    let norm = match data.pop_norm() {
        Ok(n) => n,
        Err(e) => return Err((e, metrics)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5CA1_AE00);
    let mut opt = Adam::new(cfg.adam());
    let start = Instant::now();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..cfg.total_epochs {
        let growth = growth_schedule(epoch, cfg, model.config().max_stage);
        let snapshot = model.params().clone();
        match run_epoch(cfg, data, &norm, model, &mut opt, &mut rng, &mut order, growth) {
            Ok(sums) => {
                let m = EpochMetrics {
                    epoch,
                    stage: growth.stage,
                    alpha: growth.alpha,
                    loss_d: sums[0],
                    loss_g: sums[1],
                    loss_r: sums[2],
                    r1: sums[3],
                    wall_seconds: start.elapsed().as_secs_f64(),
                };
                on_epoch(&m);
                metrics.push(m);
            }
            Err(e) => {
                *model.params_mut() = snapshot;
                return Err((e, metrics));
            }
        }
    }
    if cfg.total_epochs > 0 {
        let last = growth_schedule(cfg.total_epochs - 1, cfg, model.config().max_stage);
        model.set_growth(last).map_err(|e| (e, metrics.clone()))?;
    }
    Ok(metrics)
}

fn check_inputs(cfg: &TrainConfig, data: &Dataset, model: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    model.validate()?;
    if data.train.is_empty() {
        return Err(contract!("dataset has no training tiles"));
    }
    if data.train.len() < 2 {
        return Err(contract!("training needs at least 2 tiles"));
    }
    let full = model.full_resolution();
    if data.manifest.full_resolution % full != 0 {
        return Err(contract!(
            "dataset resolution {} is not a multiple of the model resolution {full}",
            data.manifest.full_resolution
        ));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    cfg: &TrainConfig,
    data: &Dataset,
    norm: &PopNorm,
    model: &mut Scalae,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
    order: &mut [usize],
    growth: GrowthState,
) -> Result<[f64; 4]> {
    model.set_growth(growth)?;
    order.shuffle(rng);
    let mut sums = [0.0; 4];
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let recs: Vec<&TileRecord> = chunk.iter().map(|&i| &data.train[i]).collect();
        let batch = Batch::from_records(&recs, norm, model.config(), growth)?;
        let d = d_step(model, opt, &batch, growth, cfg.r1_gamma, rng)?;
        let g = g_step(model, opt, &batch.pops, growth, rng)?;
        let r = reciprocity_step(model, opt, &batch.pops, growth, rng)?;
        sums[0] += d.total;
        sums[1] += g;
        sums[2] += r;
        sums[3] += d.r1;
        batches += 1;
    }
    if batches > 0 {
        for s in &mut sums {
            *s /= batches as f64;
        }
    }
    Ok(sums)
}
