use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalae_core::dataset::*;
use scalae_core::imagery::ImageTile;
use scalae_core::Error;

#[test]
fn normalization_round_trips_ten_thousand_values() {
    let norm = PopNorm::from_range(0.0, 5000.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let p: f64 = rng.random_range(0.0..=5000.0);
        let back = norm.denormalize_value(norm.normalize_value(p));
        worst = worst.max((back - p).abs() / p.abs().max(1e-12));
    }
    assert!(worst < 1e-9, "worst relative error {worst}");
}

#[test]
fn normalization_examples() {
    let norm = PopNorm::new(0.0, 2.0).unwrap();
    let e = std::f64::consts::E;
    assert!(norm.normalize_value(e - 1.0).abs() < 1e-15);
    assert!((norm.denormalize_value(0.0) - (e - 1.0)).abs() < 1e-12);
    assert_eq!(norm.normalize_value(0.0), -1.0);
    assert!((norm.normalize_value(e * e - 1.0) - 1.0).abs() < 1e-12);
    assert!((norm.denormalize_value(-1.0)).abs() < 1e-15);
    assert!(matches!(PopNorm::new(1.0, 1.0), Err(Error::Contract(_))));
    let grid = Grid::from_rows(&[vec![0.0, 1.0], vec![-1.0, 2.0]]).unwrap();
    assert!(norm.normalize(&grid).is_err());
}

#[test]
fn grid_round_trip_through_normalization() {
    let norm = PopNorm::from_range(0.0, 3000.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let raw = Grid::new(8, 8, (0..64).map(|_| rng.random_range(0.0..3000.0)).collect()).unwrap();
    let n = norm.normalize(&raw).unwrap();
    assert!(is_normalized(&n));
    let back = norm.denormalize(&n).unwrap();
    for (a, b) in raw.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }
}

#[test]
fn downsampling_matches_block_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let vals: Vec<f64> = (0..16).map(|_| rng.random_range(-5.0..5.0)).collect();
        let g = Grid::new(4, 4, vals.clone()).unwrap();
        let r = g.resample(2, 2).unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                let mut s = 0.0;
                for y in 0..2 {
                    for x in 0..2 {
                        s += vals[(2 * by + y) * 4 + 2 * bx + x];
                    }
                }
                assert_eq!(r.get(by, bx), s / 4.0);
            }
        }
    }
}

#[test]
fn downsampling_preserves_the_global_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Grid::new(8, 8, (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    for side in [4, 2, 1] {
        assert!((g.resample(side, side).unwrap().mean() - g.mean()).abs() < 1e-12);
    }
}

#[test]
fn constant_grids_are_resampling_fixed_points() {
    let g = Grid::filled(4, 4, 2.5);
    for side in [1, 2, 4, 8, 16] {
        assert!(g.resample(side, side).unwrap().data().iter().all(|v| *v == 2.5));
    }
    assert!(matches!(g.resample(3, 3), Err(Error::Contract(_))));
}

fn record_strategy() -> impl Strategy<Value = TileRecord> {
    (1usize..5, 1usize..4, "[a-z0-9-]{0,12}").prop_flat_map(|(r, rp, id)| {
        let rp = rp.min(r);
        (
            prop::collection::vec(-1.0f32..=1.0, 3 * r * r),
            prop::collection::vec(0.0f32..1e6, rp * rp),
        )
            .prop_map(move |(img, pop)| TileRecord::new(id.clone(), r, img, rp, pop).unwrap())
    })
}

proptest! {
    #[test]
    fn records_round_trip_bit_exactly(rec in record_strategy()) {
        let bytes = rec.to_bytes();
        let back = TileRecord::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, rec);
    }
}

#[test]
fn record_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthesize_world(&WorldConfig::new(5, 3, 32)).unwrap();
    let rec = &data.train[0];
    let path = dir.path().join("a.scr");
    rec.write(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), rec.to_bytes());
    assert_eq!(&TileRecord::load(&path).unwrap(), rec);
}

/// Structural corruptions: every one must be rejected.
fn corrupt(bytes: &[u8], kind: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut b = bytes.to_vec();
    let r = u32::from_le_bytes(b[4..8].try_into().unwrap()) as usize;
    let rp = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
    let image_at = |i: usize| 12 + 4 * i;
    let pop_at = |i: usize| 12 + 4 * (3 * r * r + i);
    let id_len_at = 12 + 4 * (3 * r * r + rp * rp);
    match kind {
        0 => b.truncate(rng.random_range(0..b.len())),
        1 => {
            let i = rng.random_range(0..4);
            b[i] ^= rng.random_range(1..=255u8);
        }
        2 => {
            let bump = rng.random_range(1..4u32);
            b[4..8].copy_from_slice(&((r as u32) + bump).to_le_bytes());
        }
        3 => {
            let v = if rng.random_bool(0.5) { r as u32 + 1 } else { 0 };
            b[8..12].copy_from_slice(&v.to_le_bytes());
        }
        4 => {
            let i = rng.random_range(0..3 * r * r);
            let v = [f32::NAN, 1.5, -1.25, f32::INFINITY][rng.random_range(0..4)];
            b[image_at(i)..image_at(i) + 4].copy_from_slice(&v.to_le_bytes());
        }
        5 => {
            let i = rng.random_range(0..rp * rp);
            let v = [f32::NAN, -1.0, f32::NEG_INFINITY, f32::INFINITY][rng.random_range(0..4)];
            b[pop_at(i)..pop_at(i) + 4].copy_from_slice(&v.to_le_bytes());
        }
        6 => {
            let len = u16::from_le_bytes(b[id_len_at..id_len_at + 2].try_into().unwrap());
            let v = len + rng.random_range(1..100u16);
            b[id_len_at..id_len_at + 2].copy_from_slice(&v.to_le_bytes());
        }
        7 => b.extend((0..rng.random_range(1..9)).map(|_| rng.random::<u8>())),
        _ => {
            let last = b.len() - 1;
            b[last] = 0xFF;
        }
    }
    b
}

#[test]
fn corrupted_records_never_parse() {
    let data = synthesize_world(&WorldConfig::new(6, 4, 32)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in 0..100 {
        let rec = &data.train[n % data.train.len()];
        let bytes = corrupt(&rec.to_bytes(), n % 9, &mut rng);
        let parsed = TileRecord::from_bytes(&bytes);
        assert!(
            matches!(parsed, Err(Error::Format(_)) | Err(Error::Validation(_))),
            "mutation {n} (kind {}) parsed",
            n % 9
        );
    }
}

#[test]
fn corruption_errors_are_classified() {
    let data = synthesize_world(&WorldConfig::new(6, 2, 32)).unwrap();
    let bytes = data.train[0].to_bytes();
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    assert!(matches!(TileRecord::from_bytes(&bad), Err(Error::Format(_))));
    assert!(matches!(TileRecord::from_bytes(&bytes[..bytes.len() / 2]), Err(Error::Format(_))));
    let mut hot = bytes;
    hot[12..16].copy_from_slice(&2.0f32.to_le_bytes());
    assert!(matches!(TileRecord::from_bytes(&hot), Err(Error::Validation(_))));
}

#[test]
fn synthetic_world_is_deterministic_and_valid() {
    let cfg = WorldConfig::new(9, 24, 32);
    let a = synthesize_world(&cfg).unwrap();
    let b = synthesize_world(&cfg).unwrap();
    let bytes = |d: &Dataset| d.train.iter().chain(&d.heldout).map(|r| r.to_bytes()).collect::<Vec<_>>();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(a.manifest, b.manifest);
    assert_eq!(a.train.len() + a.heldout.len(), 24);
    assert_eq!(a.heldout.len(), 3);
    for r in a.train.iter().chain(&a.heldout) {
        assert!(r.pop().data().iter().all(|v| *v >= 0.0));
        assert!(r.image().pixels().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(r.pop_resolution(), 8);
    }
    let norm = a.pop_norm().unwrap();
    let all: Vec<_> = a.train.iter().chain(&a.heldout).cloned().collect();
    assert!(builtup_correlation(&all, &norm, &a.manifest.builtup).unwrap() >= 0.5);
    let seen_max = all.iter().flat_map(|r| r.pop().data().to_vec()).fold(0.0, f64::max);
    assert!((norm.raw_max() - seen_max).abs() <= 1e-9 * seen_max.max(1.0));
}

#[test]
fn different_seeds_give_different_worlds() {
    let a = synthesize_world(&WorldConfig::new(1, 4, 32)).unwrap();
    let b = synthesize_world(&WorldConfig::new(2, 4, 32)).unwrap();
    assert_ne!(a.train[0], b.train[0]);
}

#[test]
fn invalid_world_requests_are_rejected() {
    assert!(synthesize_world(&WorldConfig::new(1, 0, 32)).is_err());
    assert!(synthesize_world(&WorldConfig::new(1, 4, 48)).is_err());
    assert!(synthesize_world(&WorldConfig::new(1, 4, 16)).is_err());
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthesize_world(&WorldConfig::new(3, 10, 32)).unwrap();
    data.save(dir.path()).unwrap();
    let files = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(files, 11);
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.manifest, data.manifest);
    assert_eq!(back.train, data.train);
    assert_eq!(back.heldout, data.heldout);
    assert_eq!(back.eval_records().len(), 1);
}

#[test]
fn dataset_with_missing_record_fails_to_load() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthesize_world(&WorldConfig::new(3, 4, 32)).unwrap();
    data.save(dir.path()).unwrap();
    std::fs::remove_file(dir.path().join(&data.manifest.records[0])).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn builtup_score_of_uniform_images() {
    let th = BuiltupThresholds::default();
    let mask = vec![true; 64];
    assert_eq!(builtup_score(&ImageTile::filled(8, 8, [-0.6, 0.3, -0.7]), &mask, &th).unwrap(), 0.0);
    assert_eq!(builtup_score(&ImageTile::filled(8, 8, [0.0, 0.0, 0.0]), &mask, &th).unwrap(), 1.0);
    assert!(builtup_score(&ImageTile::filled(8, 8, [0.0; 3]), &[false; 64], &th).is_err());
}
