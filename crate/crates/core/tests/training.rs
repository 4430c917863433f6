use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalae_core::dataset::{synthesize_world, Dataset, WorldConfig};
use scalae_core::inference::Checkpoint;
use scalae_core::model::{GrowthState, ModelConfig, Scalae};
use scalae_core::tensor::{Adam, AdamConfig, ParamGroup};
use scalae_core::training::*;
use scalae_core::Error;

const ALL: [ParamGroup; 5] = [
    ParamGroup::Mapping,
    ParamGroup::Synthesis,
    ParamGroup::Scs,
    ParamGroup::Encoder,
    ParamGroup::DiscHead,
];

fn small() -> ModelConfig {
    ModelConfig {
        z_dim: 16,
        w_dim: 16,
        channels_per_stage: vec![8, 8, 6, 4],
        mapping_layers: 2,
        ..ModelConfig::default()
    }
}

fn world(n: usize) -> Dataset {
    synthesize_world(&WorldConfig::new(11, n, 32)).unwrap()
}

fn batch(data: &Dataset, model: &ModelConfig, growth: GrowthState, n: usize) -> Batch {
    let recs: Vec<_> = data.train.iter().take(n).collect();
    Batch::from_records(&recs, &data.pop_norm().unwrap(), model, growth).unwrap()
}

fn randomize(model: &mut Scalae, group: ParamGroup, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = model.params_mut();
    for id in store.ids_in(&[group]) {
        for v in store.get_mut(id).value.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

fn checksums(model: &Scalae) -> Vec<u64> {
    ALL.iter().map(|g| model.params().checksum(&[*g])).collect()
}

/// Groups whose checksum changed.
fn touched(before: &[u64], after: &[u64]) -> Vec<ParamGroup> {
    ALL.iter().zip(before.iter().zip(after)).filter(|(_, (a, b))| a != b).map(|(g, _)| *g).collect()
}

#[test]
fn schedule_reference_points() {
    let cfg = TrainConfig::default();
    assert_eq!(growth_schedule(0, &cfg, 3), GrowthState { stage: 0, alpha: 1.0 });
    assert_eq!(growth_schedule(16, &cfg, 3), GrowthState { stage: 1, alpha: 0.0 });
    assert_eq!(growth_schedule(24, &cfg, 3), GrowthState { stage: 1, alpha: 1.0 });
    assert_eq!(growth_schedule(20, &cfg, 3), GrowthState { stage: 1, alpha: 0.5 });
    assert_eq!(growth_schedule(63, &cfg, 3).stage, 3);
    assert_eq!(growth_schedule(500, &cfg, 3), GrowthState { stage: 3, alpha: 1.0 });
}

#[test]
fn schedule_is_monotone_and_piecewise_linear() {
    let cfg = TrainConfig {
        epochs_per_stage: 6,
        alpha_ramp_fraction: 0.5,
        ..TrainConfig::default()
    };
    let states: Vec<_> = (0..40).map(|e| growth_schedule(e, &cfg, 3)).collect();
    for (e, w) in states.windows(2).enumerate() {
        assert!(w[1].stage >= w[0].stage);
        if w[1].stage == w[0].stage {
            assert!(w[1].alpha >= w[0].alpha, "alpha fell within a stage at epoch {}", e + 1);
            assert!(w[1].alpha - w[0].alpha <= 1.0 / 3.0 + 1e-12);
        }
        assert!(GrowthState::new(w[1].stage, w[1].alpha).is_ok());
    }
}

#[test]
fn first_d_step_with_zero_head_is_two_ln_two() {
    let data = world(8);
    let mut model = Scalae::new(small(), 1).unwrap();
    let g = GrowthState::settled(2);
    let b = batch(&data, &small(), g, 4);
    let mut opt = Adam::new(AdamConfig::default());
    let loss = d_step(&mut model, &mut opt, &b, g, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!((loss.adversarial - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
    assert_eq!(loss.total, loss.adversarial);
}

#[test]
fn first_g_step_with_zero_head_is_ln_two() {
    let data = world(8);
    let mut model = Scalae::new(small(), 1).unwrap();
    let g = GrowthState::settled(1);
    let b = batch(&data, &small(), g, 4);
    let mut opt = Adam::new(AdamConfig::default());
    let loss = g_step(&mut model, &mut opt, &b.pops, g, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn steps_respect_the_parameter_partition() {
    let data = world(8);
    let mut model = Scalae::new(small(), 2).unwrap();
    randomize(&mut model, ParamGroup::DiscHead, 3);
    let mut opt = Adam::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for g in [GrowthState::settled(0), GrowthState::new(2, 0.5).unwrap(), GrowthState::settled(3)] {
        model.set_growth(g).unwrap();
        let b = batch(&data, &small(), g, 4);

        let before = checksums(&model);
        let d = d_step(&mut model, &mut opt, &b, g, 10.0, &mut rng).unwrap();
        assert!(d.r1 >= 0.0 && d.total >= d.adversarial);
        let t = touched(&before, &checksums(&model));
        assert!(t.iter().all(|x| D_STEP_GROUPS.contains(x)), "d_step touched {t:?}");
        assert!(t.contains(&ParamGroup::Encoder) && t.contains(&ParamGroup::DiscHead));

        let before = checksums(&model);
        g_step(&mut model, &mut opt, &b.pops, g, &mut rng).unwrap();
        let t = touched(&before, &checksums(&model));
        assert!(t.iter().all(|x| G_STEP_GROUPS.contains(x)), "g_step touched {t:?}");
        assert!(t.contains(&ParamGroup::Synthesis));

        let before = checksums(&model);
        reciprocity_step(&mut model, &mut opt, &b.pops, g, &mut rng).unwrap();
        let t = touched(&before, &checksums(&model));
        assert!(t.iter().all(|x| RECIPROCITY_GROUPS.contains(x)), "reciprocity touched {t:?}");
        assert!(t.contains(&ParamGroup::Encoder) && t.contains(&ParamGroup::Synthesis));
    }
}

#[test]
fn generator_loss_falls_against_a_frozen_discriminator() {
    let data = world(8);
    let mut model = Scalae::new(small(), 5).unwrap();
    randomize(&mut model, ParamGroup::DiscHead, 6);
    let g = GrowthState::settled(1);
    let b = batch(&data, &small(), g, 8);
    let mut opt = Adam::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let frozen = model.params().checksum(&[ParamGroup::Encoder, ParamGroup::DiscHead]);
    let losses: Vec<f64> = (0..50)
        .map(|_| g_step(&mut model, &mut opt, &b.pops, g, &mut rng).unwrap())
        .collect();
    assert_eq!(frozen, model.params().checksum(&[ParamGroup::Encoder, ParamGroup::DiscHead]));
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "first {head}, last {tail}");
}

#[test]
fn reciprocity_loss_is_the_mean_squared_style_error() {
    let data = world(8);
    let mut model = Scalae::new(small(), 12).unwrap();
    randomize(&mut model, ParamGroup::Scs, 13);
    let g = GrowthState::settled(1);
    model.set_growth(g).unwrap();
    let b = batch(&data, &small(), g, 3);

    // Same latents through the inference API.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let zs: Vec<_> = b.pops.iter().map(|_| model.sample_latent(&mut rng)).collect();
    let ws = model.map_latents(&zs).unwrap();
    let images = model.synthesize_batch(&ws, &b.pops, g).unwrap();
    let back = model.encode_batch(&images, &b.pops, g).unwrap();
    let diffs: Vec<f64> = ws
        .iter()
        .zip(&back)
        .flat_map(|(w, e)| w.as_slice().iter().zip(e.as_slice()).map(|(a, b)| (a - b) * (a - b)).collect::<Vec<_>>())
        .collect();
    let expected = diffs.iter().sum::<f64>() / diffs.len() as f64;

    let mut opt = Adam::new(AdamConfig::default());
    let loss = reciprocity_step(&mut model, &mut opt, &b.pops, g, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    assert!((loss - expected).abs() <= 1e-9 * expected.max(1.0), "{loss} vs {expected}");
}

#[test]
fn reciprocity_loss_falls_on_a_fixed_batch() {
    let data = world(8);
    let mut model = Scalae::new(small(), 8).unwrap();
    let g = GrowthState::settled(1);
    let b = batch(&data, &small(), g, 4);
    let mut opt = Adam::new(AdamConfig {
        lr: 5e-4,
        ..AdamConfig::default()
    });
    let losses: Vec<f64> = (0..100)
        .map(|_| reciprocity_step(&mut model, &mut opt, &b.pops, g, &mut ChaCha8Rng::seed_from_u64(9)).unwrap())
        .collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss rose from {} to {}", w[0], w[1]);
    }
}

#[test]
fn fading_batches_blend_with_the_coarse_image() {
    let data = world(4);
    let cfg = small();
    let rec = &data.train[0];
    let faded = batch(&data, &cfg, GrowthState::new(2, 0.0).unwrap(), 1);
    let coarse = rec.image().downsample(2).unwrap().downsample(2).unwrap().upsample(2).unwrap();
    assert_eq!(faded.images[0], coarse);
    let settled = batch(&data, &cfg, GrowthState::settled(2), 1);
    assert_eq!(settled.images[0], rec.image().downsample(2).unwrap());
    assert_eq!(settled.pops[0], data.pop_norm().unwrap().normalize(&rec.pop()).unwrap());
}

fn smoke_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs_per_stage: 1,
        total_epochs: 2,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn two_epoch_smoke_run_is_finite_and_loadable() {
    let data = world(64);
    let mut seen = 0;
    let (model, rows) = train(&smoke_config(3), &data, small(), &mut |_| seen += 1).map_err(|f| f.error).unwrap();
    assert_eq!(seen, 2);
    assert_eq!(rows.len(), 2);
    assert_eq!(model.growth(), GrowthState::new(1, 0.0).unwrap());
    for r in &rows {
        assert!(r.loss_d.is_finite() && r.loss_g.is_finite() && r.loss_r.is_finite() && r.r1 >= 0.0);
    }
    let csv = metrics_csv(&rows);
    assert_eq!(csv.lines().next(), Some("epoch,stage,alpha,loss_d,loss_g,loss_r,r1,wall_seconds"));
    assert_eq!(csv.lines().count(), 3);
    let ck = Checkpoint::new(model, data.pop_norm().unwrap());
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(back.model.params().checksum(&ALL), ck.model.params().checksum(&ALL));
}

#[test]
fn training_is_deterministic() {
    let data = world(32);
    let run = || {
        let (m, rows) = train(&smoke_config(5), &data, small(), &mut |_| {}).map_err(|f| f.error).unwrap();
        (m.params().checksum(&ALL), rows.iter().map(|r| (r.loss_d, r.loss_g, r.loss_r)).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn empty_dataset_is_rejected() {
    let mut data = world(4);
    data.train.clear();
    let err = train(&smoke_config(1), &data, small(), &mut |_| {}).unwrap_err();
    assert!(matches!(err.error, Error::Contract(_)));
}

#[test]
fn invalid_config_is_rejected() {
    let data = world(4);
    let cfg = TrainConfig {
        batch_size: 1,
        ..smoke_config(1)
    };
    assert!(train(&cfg, &data, small(), &mut |_| {}).is_err());
}

#[test]
fn non_finite_training_stops_and_keeps_the_epoch_start() {
    let data = world(16);
    let mut model = Scalae::new(small(), 1).unwrap();
    let id = model.params().find("head.2.weight").unwrap();
    model.params_mut().get_mut(id).value.data_mut()[0] = f64::NAN;
    let before = model.params().checksum(&ALL);
    let (err, rows) = train_model(&smoke_config(1), &data, &mut model, &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(rows.is_empty());
    assert_eq!(model.params().checksum(&ALL), before);
}
