//! HTTP facade over the inference pipeline for interactive population
//! what-if queries.
//!
//! Populations travel as raw persons-per-cell grids and are normalized here
//! with the checkpoint's constants. Requests run one at a time against the
//! shared model, so concurrent clients see the same bytes as serial ones.

mod error;
mod request;

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use scalae_core::dataset::Grid;
use scalae_core::imagery::{heatmap_png, ImageTile};
use scalae_core::inference::{interpolate_styles, pixel_delta, seeded_style, Checkpoint, InterpolationMode};
use scalae_core::metrics::{edit_mask, population_effect_map, DEFAULT_EFFECT_STYLES};
use scalae_core::model::StyleVector;
use serde_json::{json, Value};

pub use error::ApiError;
use request::{encode_png, Fields};

/// Upper bound on `k_styles` for one effect-map request.
pub const MAX_EFFECT_STYLES: usize = 256;

pub struct LoadedModel {
    pub checkpoint: Checkpoint,
    pub id: String,
}

impl LoadedModel {
    pub fn new(checkpoint: Checkpoint) -> scalae_core::Result<Self> {
        let id = checkpoint.id()?;
        Ok(Self { checkpoint, id })
    }

    fn normalize(&self, raw: &Grid, field: &str) -> Result<Grid, ApiError> {
        let model = &self.checkpoint.model;
        let stage = model.growth().stage;
        for s in 0..=stage {
            let r = model.config().resolution(s);
            if raw.resample(r, r).is_err() {
                return Err(ApiError::unprocessable(
                    Some(field),
                    format!(
                        "`{field}` grid {}x{} cannot be resampled to the model's {r}x{r} level",
                        raw.height(),
                        raw.width()
                    ),
                ));
            }
        }
        self.checkpoint
            .pop_norm
            .normalize(raw)
            .map_err(|e| ApiError::from_core(e, Some(field)))
    }

    fn style(&self, raw: Vec<f64>, field: &str) -> Result<StyleVector, ApiError> {
        let dim = self.checkpoint.model.config().w_dim;
        if raw.len() != dim {
            return Err(ApiError::unprocessable(
                Some(field),
                format!("`{field}` has {} entries, the model's style has {dim}", raw.len()),
            ));
        }
        StyleVector::new(raw).map_err(|e| ApiError::from_core(e, Some(field)))
    }

    fn check_image(&self, image: &ImageTile, field: &str) -> Result<(), ApiError> {
        let r = self.checkpoint.model.resolution();
        if image.height() != r || image.width() != r {
            return Err(ApiError::unprocessable(
                Some(field),
                format!("`{field}` is {}x{}, the model renders {r}x{r}", image.height(), image.width()),
            ));
        }
        Ok(())
    }
}

/// Shared handle to the (optional) loaded model.
#[derive(Clone, Default)]
pub struct AppState {
    slot: Arc<Mutex<Option<LoadedModel>>>,
}

impl AppState {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_checkpoint(checkpoint: Checkpoint) -> scalae_core::Result<Self> {
        let state = Self::empty();
        state.load(checkpoint)?;
        Ok(state)
    }

    /// Replaces the served model and returns the new checkpoint id.
    pub fn load(&self, checkpoint: Checkpoint) -> scalae_core::Result<String> {
        let loaded = LoadedModel::new(checkpoint)?;
        let id = loaded.id.clone();
        *self.lock() = Some(loaded);
        Ok(id)
    }

    pub fn unload(&self) {
        *self.lock() = None;
    }

    pub fn checkpoint_id(&self) -> Option<String> {
        self.lock().as_ref().map(|m| m.id.clone())
    }

    /// Runs `f` against the loaded model, if any, holding the lock.
    pub fn with_model<R>(&self, f: impl FnOnce(&LoadedModel) -> R) -> Option<R> {
        self.lock().as_ref().map(f)
    }

    // Requests never mutate the model, so a poisoned lock still guards valid state.
    fn lock(&self) -> MutexGuard<'_, Option<LoadedModel>> {
        self.slot.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Runs `f` with exclusive access to the model on the blocking pool.
    async fn run<F>(&self, f: F) -> Result<Json<Value>, ApiError>
    where
        F: FnOnce(&LoadedModel) -> Result<Value, ApiError> + Send + 'static,
    {
        let state = self.clone();
        tokio::task::spawn_blocking(move || {
            let guard = state.lock();
            let model = guard.as_ref().ok_or_else(ApiError::unavailable)?;
            let started = Instant::now();
            let mut body = f(model)?;
            if let Value::Object(map) = &mut body {
                map.insert("checkpoint_id".into(), Value::String(model.id.clone()));
                map.insert("timing_ms".into(), json!(started.elapsed().as_secs_f64() * 1e3));
            }
            Ok(Json(body))
        })
        .await
        .map_err(|e| ApiError::internal(format!("inference task failed: {e}")))?
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/model", get(model_info))
        .route("/api/generate", post(generate))
        .route("/api/reconstruct", post(reconstruct))
        .route("/api/repopulate", post(repopulate))
        .route("/api/effect-map", post(effect_map))
        .route("/api/interpolate", post(interpolate))
        .with_state(state)
}

/// Binds `addr` and serves until the process is interrupted.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn png_field(bytes: scalae_core::Result<Vec<u8>>) -> Result<String, ApiError> {
    bytes.map(|b| encode_png(&b)).map_err(|e| ApiError::internal(e.to_string()))
}

async fn healthz(State(state): State<AppState>) -> Json<Value> {
    let id = state.checkpoint_id();
    Json(json!({ "status": "ok", "model_loaded": id.is_some(), "checkpoint_id": id }))
}

async fn model_info(State(state): State<AppState>) -> Result<Json<Value>, ApiError> {
    state
        .run(|m| {
            let model = &m.checkpoint.model;
            let norm = m.checkpoint.pop_norm;
            Ok(json!({
                "config": model.config(),
                "growth": model.growth(),
                "resolution": model.resolution(),
                "parameter_count": model.parameter_count(),
                "pop_norm": {
                    "pop_log_min": norm.pop_log_min,
                    "pop_log_max": norm.pop_log_max,
                    "raw_min": norm.raw_min(),
                    "raw_max": norm.raw_max(),
                },
                "default_k_styles": DEFAULT_EFFECT_STYLES,
            }))
        })
        .await
}

async fn generate(State(state): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let mut f = Fields::parse(&body, &["seed", "style", "pop"])?;
    let seed: Option<u64> = f.opt("seed")?;
    let style: Option<Vec<f64>> = f.opt("style")?;
    let pop = f.grid("pop")?;
    if seed.is_some() == style.is_some() {
        return Err(ApiError::bad_request(Some("seed"), "give exactly one of `seed` or `style`"));
    }
    state
        .run(move |m| {
            let model = &m.checkpoint.model;
            let pop = m.normalize(&pop, "pop")?;
            let w = match (seed, style) {
                (Some(s), _) => seeded_style(model, s).map_err(|e| ApiError::from_core(e, Some("seed")))?,
                (_, Some(raw)) => m.style(raw, "style")?,
                _ => unreachable!("checked above"),
            };
            let image = model
                .synthesize(&w, &pop, model.growth())
                .map_err(|e| ApiError::from_core(e, None))?;
            Ok(json!({ "png": png_field(image.to_png())?, "style": w.as_slice() }))
        })
        .await
}

async fn reconstruct(State(state): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let mut f = Fields::parse(&body, &["image", "pop"])?;
    let image = f.image("image")?;
    let pop = f.grid("pop")?;
    state
        .run(move |m| {
            let model = &m.checkpoint.model;
            m.check_image(&image, "image")?;
            let pop = m.normalize(&pop, "pop")?;
            let growth = model.growth();
            let w = model.encode(&image, &pop, growth).map_err(|e| ApiError::from_core(e, None))?;
            let out = model.synthesize(&w, &pop, growth).map_err(|e| ApiError::from_core(e, None))?;
            Ok(json!({ "png": png_field(out.to_png())?, "style": w.as_slice() }))
        })
        .await
}

async fn repopulate(State(state): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let mut f = Fields::parse(&body, &["image", "pop_orig", "pop_new"])?;
    let image = f.image("image")?;
    let pop_orig = f.grid("pop_orig")?;
    let pop_new = f.grid("pop_new")?;
    if pop_orig.height() != pop_new.height() || pop_orig.width() != pop_new.width() {
        return Err(ApiError::unprocessable(
            Some("pop_new"),
            format!(
                "`pop_new` is {}x{} but `pop_orig` is {}x{}",
                pop_new.height(),
                pop_new.width(),
                pop_orig.height(),
                pop_orig.width()
            ),
        ));
    }
    state
        .run(move |m| {
            let model = &m.checkpoint.model;
            m.check_image(&image, "image")?;
            let orig = m.normalize(&pop_orig, "pop_orig")?;
            let new = m.normalize(&pop_new, "pop_new")?;
            let growth = model.growth();
            let core = |e| ApiError::from_core(e, None);
            let w = model.encode(&image, &orig, growth).map_err(core)?;
            let out = model
                .synthesize_batch(&[w.clone(), w.clone()], &[orig, new], growth)
                .map_err(core)?;
            let (recon, edited) = (&out[0], &out[1]);
            let delta = pixel_delta(edited, recon).map_err(core)?;
            Ok(json!({
                "png": png_field(edited.to_png())?,
                "pixel_delta_png": png_field(heatmap_png(edited.height(), edited.width(), &delta))?,
                "style": w.as_slice(),
            }))
        })
        .await
}

async fn effect_map(State(state): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let mut f = Fields::parse(&body, &["pop_a", "pop_b", "k_styles", "seed", "mask"])?;
    let pop_a = f.grid("pop_a")?;
    let pop_b = f.grid("pop_b")?;
    let k: usize = f.opt("k_styles")?.unwrap_or(DEFAULT_EFFECT_STYLES);
    let seed: u64 = f.opt("seed")?.unwrap_or(0);
    let mask: Option<Vec<Vec<bool>>> = f.opt("mask")?;
    if k == 0 || k > MAX_EFFECT_STYLES {
        return Err(ApiError::bad_request(
            Some("k_styles"),
            format!("`k_styles` must lie in 1..={MAX_EFFECT_STYLES}"),
        ));
    }
    if pop_a.height() != pop_b.height() || pop_a.width() != pop_b.width() {
        return Err(ApiError::unprocessable(Some("pop_b"), "`pop_a` and `pop_b` differ in size"));
    }
    state
        .run(move |m| {
            let model = &m.checkpoint.model;
            let a = m.normalize(&pop_a, "pop_a")?;
            let b = m.normalize(&pop_b, "pop_b")?;
            let map = population_effect_map(model, &a, &b, k, seed, model.growth())
                .map_err(|e| ApiError::from_core(e, None))?;
            let region = match mask {
                None => edit_mask(&pop_a, &pop_b, map.height),
                Some(rows) => mask_from_rows(&rows, &pop_a, map.height),
            }
            .map_err(|e| ApiError::from_core(e, Some("mask")))?;
            let (inside, outside) = map.region_means(&region).map_err(|e| ApiError::from_core(e, Some("mask")))?;
            Ok(json!({
                "heatmap_png": png_field(map.to_png())?,
                "stats": { "mean_inside": inside, "mean_outside": outside },
                "k_styles": k,
                "seed": seed,
            }))
        })
        .await
}

/// A caller-supplied region at population resolution, upsampled like `edit_mask`.
fn mask_from_rows(rows: &[Vec<bool>], like: &Grid, size: usize) -> scalae_core::Result<Vec<bool>> {
    let numeric: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    let grid = Grid::from_rows(&numeric)?;
    if grid.height() != like.height() || grid.width() != like.width() {
        return Err(scalae_core::Error::Contract(format!(
            "mask is {}x{}, populations are {}x{}",
            grid.height(),
            grid.width(),
            like.height(),
            like.width()
        )));
    }
    Ok(grid.resample(size, size)?.data().iter().map(|v| *v > 0.5).collect())
}

async fn interpolate(State(state): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let mut f = Fields::parse(&body, &["style_a", "style_b", "t", "mode", "pop"])?;
    let a: Vec<f64> = f.req("style_a")?;
    let b: Vec<f64> = f.req("style_b")?;
    let t: f64 = f.req("t")?;
    let mode: InterpolationMode = f.opt("mode")?.unwrap_or(InterpolationMode::Linear);
    let pop = f.opt_grid("pop")?;
    if !(0.0..=1.0).contains(&t) {
        return Err(ApiError::bad_request(Some("t"), format!("`t` = {t} lies outside [0, 1]")));
    }
    state
        .run(move |m| {
            let model = &m.checkpoint.model;
            let wa = m.style(a, "style_a")?;
            let wb = m.style(b, "style_b")?;
            let w = interpolate_styles(&wa, &wb, t, mode).map_err(|e| ApiError::from_core(e, Some("style_b")))?;
            let mut body = json!({ "style": w.as_slice(), "t": t, "mode": mode });
            if let Some(pop) = pop {
                let pop = m.normalize(&pop, "pop")?;
                let image = model
                    .synthesize(&w, &pop, model.growth())
                    .map_err(|e| ApiError::from_core(e, None))?;
                body["png"] = Value::String(png_field(image.to_png())?);
            }
            Ok(body)
        })
        .await
}
