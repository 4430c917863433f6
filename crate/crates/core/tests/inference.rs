use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalae_core::dataset::{Grid, PopNorm};
use scalae_core::imagery::ImageTile;
use scalae_core::inference::*;
use scalae_core::model::{GrowthState, ModelConfig, Scalae, StyleVector};
use scalae_core::tensor::ParamGroup;
use scalae_core::Error;

fn model() -> Scalae {
    let cfg = ModelConfig {
        channels_per_stage: vec![8, 8, 6, 4],
        mapping_layers: 2,
        ..ModelConfig::default()
    };
    let mut m = Scalae::new(cfg, 4).unwrap();
    m.set_growth(GrowthState::new(3, 0.75).unwrap()).unwrap();
    m
}

fn checkpoint() -> Checkpoint {
    let mut ck = Checkpoint::new(model(), PopNorm::new(0.0, 8.517_193_191_416_238).unwrap());
    ck.metadata.insert("dataset_seed".into(), "7".into());
    ck
}

fn random_pop(seed: u64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid::new(8, 8, (0..64).map(|_| rng.random_range(-1.0..=1.0)).collect()).unwrap()
}

fn random_image(seed: u64) -> ImageTile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTile::new(32, 32, (0..3072).map(|_| rng.random_range(-1.0..=1.0)).collect()).unwrap()
}

fn style(m: &Scalae, seed: u64) -> StyleVector {
    m.map_latent(&m.sample_latent(&mut ChaCha8Rng::seed_from_u64(seed))).unwrap()
}

const ALL: [ParamGroup; 5] = [
    ParamGroup::Mapping,
    ParamGroup::Synthesis,
    ParamGroup::Scs,
    ParamGroup::Encoder,
    ParamGroup::DiscHead,
];

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let ck = checkpoint();
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.pop_norm, ck.pop_norm);
    assert_eq!(back.metadata, ck.metadata);
    assert_eq!(back.model.config(), ck.model.config());
    assert_eq!(back.model.growth(), ck.model.growth());
    assert_eq!(back.model.params().checksum(&ALL), ck.model.params().checksum(&ALL));
    let w = style(&ck.model, 1);
    let pop = random_pop(1);
    let g = ck.model.growth();
    assert_eq!(ck.model.synthesize(&w, &pop, g).unwrap(), back.model.synthesize(&w, &pop, g).unwrap());
    assert_eq!(back.model.config().z_dim, 64);
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sck");
    let ck = checkpoint();
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.id().unwrap(), ck.id().unwrap());
    assert!(matches!(Checkpoint::load(&dir.path().join("missing.sck")), Err(Error::Io { .. })));
}

#[test]
fn layout_starts_with_magic_and_version() {
    let bytes = checkpoint().to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"SCK1");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
    assert!(header["tensors"].as_array().unwrap().len() > 10);
    assert_eq!(header["config"]["z_dim"], 64);
}

#[test]
fn corrupted_header_length_is_a_format_error() {
    let mut bytes = checkpoint().to_bytes().unwrap();
    bytes[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    let mut bytes = checkpoint().to_bytes().unwrap();
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    bytes[8..16].copy_from_slice(&(hlen - 3).to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
}

#[test]
fn other_versions_are_unsupported() {
    let mut bytes = checkpoint().to_bytes().unwrap();
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(Error::UnsupportedVersion { found: 2, expected: 1 })
    ));
}

#[test]
fn missing_tensor_is_a_format_error() {
    let bytes = checkpoint().to_bytes().unwrap();
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
    let tensors = header["tensors"].as_array_mut().unwrap();
    let last = tensors.pop().unwrap();
    let dropped = last["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).product::<u64>() as usize * 8;
    let json = serde_json::to_vec(&header).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[16 + hlen..bytes.len() - dropped]);
    match Checkpoint::from_bytes(&out) {
        Err(Error::Format(m)) => assert!(m.contains("missing parameter"), "{m}"),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn truncated_payload_is_a_format_error() {
    let bytes = checkpoint().to_bytes().unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::from_bytes(b"SCK"), Err(Error::Format(_))));
}

#[test]
fn checkpoint_id_tracks_parameters() {
    let a = checkpoint();
    let mut b = checkpoint();
    assert_eq!(a.id().unwrap(), b.id().unwrap());
    let id = b.model.params().find("synthesis.const").unwrap();
    b.model.params_mut().get_mut(id).value.data_mut()[0] += 1.0;
    assert_ne!(a.id().unwrap(), b.id().unwrap());
}

#[test]
fn reconstruction_is_shaped_and_deterministic() {
    let m = model();
    let (x, pop) = (random_image(1), random_pop(2));
    let (x0, p0) = (x.clone(), pop.clone());
    let a = reconstruct(&m, &x, &pop).unwrap();
    let b = reconstruct(&m, &x, &pop).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.height(), a.width()), (32, 32));
    assert_eq!((x, pop), (x0, p0));
    let small = ImageTile::filled(16, 16, [0.0; 3]);
    assert!(matches!(reconstruct(&m, &small, &random_pop(2)), Err(Error::Contract(_))));
}

#[test]
fn unchanged_population_repopulates_to_the_reconstruction() {
    let m = model();
    let (x, pop) = (random_image(3), random_pop(4));
    assert_eq!(repopulate(&m, &x, &pop, &pop).unwrap(), reconstruct(&m, &x, &pop).unwrap());
    let new = random_pop(5);
    assert_eq!(repopulate(&m, &x, &pop, &new).unwrap(), repopulate(&m, &x, &pop, &new).unwrap());
    let r = repopulate(&m, &x, &pop, &Grid::filled(4, 4, 0.0));
    assert!(matches!(r, Err(Error::Contract(_))));
}

fn sv(v: &[f64]) -> StyleVector {
    StyleVector::new(v.to_vec()).unwrap()
}

#[test]
fn interpolation_endpoints_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = sv(&(0..16).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
    let b = sv(&(0..16).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
    for mode in [InterpolationMode::Linear, InterpolationMode::Spherical] {
        assert_eq!(interpolate_styles(&a, &b, 0.0, mode).unwrap(), a);
        assert_eq!(interpolate_styles(&a, &b, 1.0, mode).unwrap(), b);
    }
    let mid = interpolate_styles(&a, &b, 0.5, InterpolationMode::Linear).unwrap();
    for ((m, x), y) in mid.as_slice().iter().zip(a.as_slice()).zip(b.as_slice()) {
        assert!((m - (x + y) / 2.0).abs() < 1e-15);
    }
}

#[test]
fn spherical_interpolation_follows_the_great_circle() {
    let r = 3.0;
    let (a, b) = (sv(&[r, 0.0]), sv(&[0.0, r]));
    for i in 0..=20 {
        let t = i as f64 / 20.0;
        let got = interpolate_styles(&a, &b, t, InterpolationMode::Spherical).unwrap();
        let angle = t * std::f64::consts::FRAC_PI_2;
        assert!((got.as_slice()[0] - r * angle.cos()).abs() < 1e-12);
        assert!((got.as_slice()[1] - r * angle.sin()).abs() < 1e-12);
    }
}

#[test]
fn spherical_interpolation_preserves_equal_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let mut a: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut b: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = rng.random_range(0.5..5.0);
        for v in [&mut a, &mut b] {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x *= r / n);
        }
        let t = rng.random_range(0.0..=1.0);
        let w = interpolate_styles(&sv(&a), &sv(&b), t, InterpolationMode::Spherical).unwrap();
        let n = w.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - r).abs() < 1e-9);
    }
}

#[test]
fn interpolation_rejects_bad_arguments() {
    let a = sv(&[1.0, 2.0]);
    let z = sv(&[0.0, 0.0]);
    assert!(matches!(interpolate_styles(&a, &a, 1.5, InterpolationMode::Linear), Err(Error::Contract(_))));
    assert!(matches!(interpolate_styles(&a, &a, -0.1, InterpolationMode::Spherical), Err(Error::Contract(_))));
    assert!(matches!(interpolate_styles(&a, &z, 0.5, InterpolationMode::Spherical), Err(Error::Contract(_))));
    assert!(matches!(interpolate_styles(&a, &sv(&[1.0]), 0.5, InterpolationMode::Linear), Err(Error::Contract(_))));
    assert_eq!("spherical".parse::<InterpolationMode>().unwrap(), InterpolationMode::Spherical);
    assert!("cubic".parse::<InterpolationMode>().is_err());
}
