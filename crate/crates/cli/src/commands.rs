use std::fmt::Display;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scalae_core::dataset::{synthesize_world, Dataset, Grid, TileRecord, WorldConfig};
use scalae_core::imagery::{heatmap_png, ImageTile};
use scalae_core::inference::{pixel_delta, seeded_style, Checkpoint};
use scalae_core::metrics::{
    edit_mask, feature_stats, frechet_distance, histogram, pairs_csv, pixel_distance, population_effect_map, semantic_distance,
    FeatureExtractor, PairDistance,
};
use scalae_core::model::{ModelConfig, StyleVector};
use scalae_core::training::{metrics_csv, train, TrainConfig};
use serde_json::json;

use crate::error::{CliError, FlagContext, Result};
use crate::{
    Command, EffectMapArgs, EvalArgs, GenerateArgs, ReconstructArgs, RepopulateArgs, ServeArgs, SynthDataArgs, TrainArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Generate(a) => generate(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Repopulate(a) => repopulate(a),
        Command::Eval(a) => eval(a),
        Command::EffectMap(a) => effect_map(a),
        Command::Serve(a) => serve(a),
    }
}

fn shown(path: &Path) -> impl Display + '_ {
    path.display()
}

fn write(flag: &'static str, path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).flag(flag, shown(path))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).flag("--ckpt", shown(path))
}

/// Raw population from JSON rows or from the grid inside a `.scr` record.
fn load_pop(flag: &'static str, path: &Path) -> Result<Grid> {
    if path.extension().is_some_and(|e| e == "scr") {
        return Ok(TileRecord::load(path).flag(flag, shown(path))?.pop());
    }
    let text = std::fs::read_to_string(path).flag(flag, shown(path))?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text).flag(flag, shown(path))?;
    let grid = Grid::from_rows(&rows).flag(flag, shown(path))?;
    if let Some(v) = grid.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(CliError::Invalid {
            flag,
            message: format!("{}: population value {v} is not a non-negative count", path.display()),
        });
    }
    Ok(grid)
}

fn normalized(ckpt: &Checkpoint, flag: &'static str, path: &Path, raw: &Grid) -> Result<Grid> {
    ckpt.pop_norm.normalize(raw).flag(flag, shown(path))
}

/// Brings a record image to the model's resolution by block averaging.
fn fit_image(image: ImageTile, res: usize, flag: &'static str, path: &Path) -> Result<ImageTile> {
    if image.height() == res {
        return Ok(image);
    }
    if image.height() < res || image.height() % res != 0 {
        return Err(CliError::Invalid {
            flag,
            message: format!("{}: {}px tile does not reduce to the model's {res}px", path.display(), image.height()),
        });
    }
    let k = image.height() / res;
    image.downsample(k).flag(flag, shown(path))
}

fn style_json(w: &StyleVector) -> String {
    serde_json::to_string(w.as_slice()).expect("finite floats serialize") + "\n"
}

fn synth_data(a: SynthDataArgs) -> Result<()> {
    if a.tiles == 0 {
        return Err(CliError::Invalid {
            flag: "--tiles",
            message: "at least one tile is required".into(),
        });
    }
    let mut cfg = WorldConfig::new(a.seed, a.tiles, a.resolution);
    if let Some(h) = a.heldout {
        cfg.heldout = h;
    }
    let flag = if a.heldout.is_some_and(|h| h >= a.tiles) { "--heldout" } else { "--resolution" };
    let ds = synthesize_world(&cfg).flag(flag, a.resolution)?;
    ds.save(&a.out).flag("--out", shown(&a.out))?;
    eprintln!(
        "wrote {} training and {} held-out tiles to {}",
        ds.train.len(),
        ds.heldout.len(),
        a.out.display()
    );
    Ok(())
}

/// Default channel widths trimmed or padded to the data's number of stages.
fn model_config(full_resolution: usize, channels: Option<Vec<usize>>) -> Result<ModelConfig> {
    let base = ModelConfig::default();
    let ratio = full_resolution / base.base_resolution;
    if full_resolution % base.base_resolution != 0 || !ratio.is_power_of_two() {
        return Err(CliError::Invalid {
            flag: "--data",
            message: format!("resolution {full_resolution} is not {} times a power of two", base.base_resolution),
        });
    }
    let max_stage = ratio.trailing_zeros() as usize;
    let channels_per_stage = match channels {
        Some(c) => c,
        None => (0..=max_stage)
            .map(|s| base.channels_per_stage[s.min(base.channels_per_stage.len() - 1)])
            .collect(),
    };
    let cfg = ModelConfig {
        max_stage,
        channels_per_stage,
        ..base
    };
    cfg.validate().flag("--channels", format!("{:?}", cfg.channels_per_stage))?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.data).flag("--data", shown(&a.data))?;
    let model_cfg = model_config(data.manifest.full_resolution, a.channels)?;
    let cfg = TrainConfig {
        epochs_per_stage: a.epochs_per_stage,
        total_epochs: a.epochs,
        base_lr: a.lr,
        batch_size: a.batch,
        r1_gamma: a.r1_gamma,
        seed: a.seed,
        ..TrainConfig::default()
    };
    if let Err(e) = cfg.validate() {
        let flag = if a.epochs_per_stage == 0 {
            "--epochs-per-stage"
        } else if a.batch < 2 {
            "--batch"
        } else if !(a.lr.is_finite() && a.lr > 0.0) {
            "--lr"
        } else {
            "--r1-gamma"
        };
        return Err(CliError::Invalid {
            flag,
            message: e.to_string(),
        });
    }
    let mut progress = |m: &scalae_core::training::EpochMetrics| {
        eprintln!(
            "epoch {:>3} stage {} alpha {:.2}  loss_d {:.4}  loss_g {:.4}  loss_r {:.4}  r1 {:.4}",
            m.epoch, m.stage, m.alpha, m.loss_d, m.loss_g, m.loss_r, m.r1
        );
    };
    let (model, metrics) = train(&cfg, &data, model_cfg, &mut progress).map_err(|f| CliError::Training {
        epochs: f.metrics.len(),
        source: f.error,
    })?;
    let mut ckpt = Checkpoint::new(model, data.pop_norm().flag("--data", shown(&a.data))?);
    let meta = [
        ("train.seed", a.seed.to_string()),
        ("train.epochs", a.epochs.to_string()),
        ("train.epochs_per_stage", a.epochs_per_stage.to_string()),
        ("train.batch", a.batch.to_string()),
        ("train.lr", a.lr.to_string()),
        ("train.r1_gamma", a.r1_gamma.to_string()),
        ("data.tiles", data.train.len().to_string()),
        ("data.generator", data.manifest.provenance.generator.clone()),
    ];
    for (k, v) in meta {
        ckpt.metadata.insert(k.into(), v);
    }
    if let Some(seed) = data.manifest.provenance.seed {
        ckpt.metadata.insert("data.seed".into(), seed.to_string());
    }
    ckpt.save(&a.out).flag("--out", shown(&a.out))?;
    if let Some(path) = &a.metrics {
        write("--metrics", path, metrics_csv(&metrics))?;
    }
    eprintln!("saved {} ({})", a.out.display(), ckpt.id().flag("--out", shown(&a.out))?);
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let model = &ckpt.model;
    let pop = normalized(&ckpt, "--pop", &a.pop, &load_pop("--pop", &a.pop)?)?;
    let w = match (&a.seed, &a.style_file) {
        (Some(seed), _) => seeded_style(model, *seed).flag("--seed", seed)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).flag("--style-file", shown(path))?;
            let raw: Vec<f64> = serde_json::from_str(&text).flag("--style-file", shown(path))?;
            if raw.len() != model.config().w_dim {
                return Err(CliError::Invalid {
                    flag: "--style-file",
                    message: format!("{}: {} entries, the model expects {}", path.display(), raw.len(), model.config().w_dim),
                });
            }
            StyleVector::new(raw).flag("--style-file", shown(path))?
        }
        (None, None) => unreachable!("clap requires --seed or --style-file"),
    };
    let image = model.synthesize(&w, &pop, model.growth()).flag("--pop", shown(&a.pop))?;
    write("--out", &a.out, image.to_png().flag("--out", shown(&a.out))?)?;
    if let Some(path) = &a.style_out {
        write("--style-out", path, style_json(&w))?;
    }
    Ok(())
}

fn load_record(ckpt: &Checkpoint, path: &Path) -> Result<(ImageTile, Grid)> {
    let rec = TileRecord::load(path).flag("--record", shown(path))?;
    let image = fit_image(rec.image(), ckpt.model.resolution(), "--record", path)?;
    let pop = normalized(ckpt, "--record", path, &rec.pop())?;
    Ok((image, pop))
}

fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let model = &ckpt.model;
    let (image, pop) = load_record(&ckpt, &a.record)?;
    let w = model.encode(&image, &pop, model.growth()).flag("--record", shown(&a.record))?;
    let out = model.synthesize(&w, &pop, model.growth()).flag("--record", shown(&a.record))?;
    write("--out", &a.out, out.to_png().flag("--out", shown(&a.out))?)?;
    if let Some(path) = &a.style_out {
        write("--style-out", path, style_json(&w))?;
    }
    Ok(())
}

fn repopulate(a: RepopulateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let model = &ckpt.model;
    let (image, pop) = load_record(&ckpt, &a.record)?;
    let new = normalized(&ckpt, "--pop-new", &a.pop_new, &load_pop("--pop-new", &a.pop_new)?)?;
    if new.height() != pop.height() || new.width() != pop.width() {
        return Err(CliError::Invalid {
            flag: "--pop-new",
            message: format!(
                "{}: grid is {}x{}, the record's is {}x{}",
                a.pop_new.display(),
                new.height(),
                new.width(),
                pop.height(),
                pop.width()
            ),
        });
    }
    let growth = model.growth();
    let w = model.encode(&image, &pop, growth).flag("--record", shown(&a.record))?;
    let out = model
        .synthesize_batch(&[w.clone(), w], &[pop, new], growth)
        .flag("--pop-new", shown(&a.pop_new))?;
    write("--out", &a.out, out[1].to_png().flag("--out", shown(&a.out))?)?;
    if let Some(path) = &a.delta_out {
        let delta = pixel_delta(&out[1], &out[0]).flag("--delta-out", shown(path))?;
        let png = heatmap_png(out[1].height(), out[1].width(), &delta).flag("--delta-out", shown(path))?;
        write("--delta-out", path, png)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let data = Dataset::load(&a.data).flag("--data", shown(&a.data))?;
    let model = &ckpt.model;
    let (run_pairs, run_fid) = if a.pairs || a.fid { (a.pairs, a.fid) } else { (true, true) };
    if a.hist_bins == 0 {
        return Err(CliError::Invalid {
            flag: "--hist-bins",
            message: "needs at least one bin".into(),
        });
    }
    let records = data.eval_records();
    let res = model.resolution();
    let mut images = Vec::with_capacity(records.len());
    let mut pops = Vec::with_capacity(records.len());
    for (rec, name) in records.iter().zip(data.manifest.heldout.iter().chain(&data.manifest.records)) {
        let path = a.data.join(name);
        images.push(fit_image(rec.image(), res, "--data", &path)?);
        pops.push(normalized(&ckpt, "--data", &path, &rec.pop())?);
    }
    let extractor = FeatureExtractor::default();
    let growth = model.growth();
    let mut report = json!({
        "checkpoint_id": ckpt.id().flag("--ckpt", shown(&a.ckpt))?,
        "tiles": records.len(),
        "resolution": res,
    });
    let mut csv = String::new();

    if run_pairs {
        let ws = model.encode_batch(&images, &pops, growth).flag("--data", shown(&a.data))?;
        let recon = model.synthesize_batch(&ws, &pops, growth).flag("--data", shown(&a.data))?;
        let mut rows = Vec::with_capacity(records.len());
        for ((rec, real), out) in records.iter().zip(&images).zip(&recon) {
            rows.push(PairDistance {
                tile_id: rec.tile_id.clone(),
                pixel_l2: pixel_distance(real, out).flag("--data", shown(&a.data))?,
                semantic_l2: semantic_distance(real, out, &extractor).flag("--data", shown(&a.data))?,
            });
        }
        let pixel: Vec<f64> = rows.iter().map(|r| r.pixel_l2).collect();
        let semantic: Vec<f64> = rows.iter().map(|r| r.semantic_l2).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        report["pairs"] = json!({
            "mean_pixel_l2": mean(&pixel),
            "mean_semantic_l2": mean(&semantic),
            "pixel_l2_histogram": histogram(&pixel, a.hist_bins).flag("--hist-bins", a.hist_bins)?,
            "semantic_l2_histogram": histogram(&semantic, a.hist_bins).flag("--hist-bins", a.hist_bins)?,
        });
        csv = pairs_csv(&rows);
    }

    if run_fid {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let zs: Vec<_> = pops.iter().map(|_| model.sample_latent(&mut rng)).collect();
        let ws = model.map_latents(&zs).flag("--seed", a.seed)?;
        let generated = model.synthesize_batch(&ws, &pops, growth).flag("--data", shown(&a.data))?;
        let real = feature_stats(&images, &extractor).flag("--data", shown(&a.data))?;
        let fake = feature_stats(&generated, &extractor).flag("--data", shown(&a.data))?;
        let fid = frechet_distance(&fake, &real).flag("--data", shown(&a.data))?;
        report["fid"] = json!({ "generated_vs_heldout": fid, "seed": a.seed });
        if !run_pairs {
            csv = format!("metric,value\nfid,{fid}\n");
        }
    }

    write("--out-csv", &a.out_csv, csv)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    if let Some(path) = &a.report {
        write("--report", path, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn effect_map(a: EffectMapArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let model = &ckpt.model;
    let raw_a = load_pop("--pop-a", &a.pop_a)?;
    let raw_b = load_pop("--pop-b", &a.pop_b)?;
    if raw_a.height() != raw_b.height() || raw_a.width() != raw_b.width() {
        return Err(CliError::Invalid {
            flag: "--pop-b",
            message: format!("{}: grid size differs from --pop-a", a.pop_b.display()),
        });
    }
    if a.k == 0 {
        return Err(CliError::Invalid {
            flag: "--k",
            message: "needs at least one style".into(),
        });
    }
    let pa = normalized(&ckpt, "--pop-a", &a.pop_a, &raw_a)?;
    let pb = normalized(&ckpt, "--pop-b", &a.pop_b, &raw_b)?;
    let map = population_effect_map(model, &pa, &pb, a.k, a.seed, model.growth()).flag("--pop-a", shown(&a.pop_a))?;
    let mask = edit_mask(&raw_a, &raw_b, map.height).flag("--pop-b", shown(&a.pop_b))?;
    let (inside, outside) = map.region_means(&mask).flag("--pop-b", shown(&a.pop_b))?;
    write("--out", &a.out, map.to_png().flag("--out", shown(&a.out))?)?;
    if let Some(path) = &a.raw {
        write("--raw", path, map.to_bytes())?;
    }
    let stats = json!({ "mean_inside": inside, "mean_outside": outside, "k": a.k, "seed": a.seed });
    println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let state = scalae_service::AppState::with_checkpoint(ckpt).flag("--ckpt", shown(&a.ckpt))?;
    let addr = std::net::SocketAddr::new(a.host, a.port);
    let runtime = tokio::runtime::Runtime::new().flag("serve", "runtime")?;
    eprintln!("serving {} on http://{addr}", state.checkpoint_id().unwrap_or_default());
    runtime
        .block_on(scalae_service::serve(state, addr))
        .flag("--port", a.port)
}
