use bandsel::raster::{
    compose, load_raster, ndvi, select_bands, Channel, MultibandRaster, Pca, RasterError,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("B{i}")).collect()
}

fn random_raster(w: usize, h: usize, b: usize, seed: u64) -> MultibandRaster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Correlated bands so PCA has structure.
    let base: Vec<f32> = (0..w * h).map(|_| rng.random()).collect();
    let planes = (0..b)
        .map(|k| {
            base.iter()
                .map(|&v| v * (k as f32 + 1.0) + rng.random::<f32>() * 0.3)
                .collect()
        })
        .collect();
    MultibandRaster::from_bands(w, h, names(b), planes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn save_load_roundtrip_is_bit_exact(
        w in 1usize..12,
        h in 1usize..12,
        b in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..w * h * b).map(|_| rng.random_range(-1e6f32..1e6)).collect();
        let r = MultibandRaster::new(w, h, names(b), data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.save(dir.path()).unwrap();
        let back = load_raster(dir.path()).unwrap();
        prop_assert_eq!(back.band_names(), r.band_names());
        let same = back.data().iter().zip(r.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn select_bands_picks_planes(order in proptest::sample::subsequence(vec![0usize, 1, 2, 3, 4], 1..5)) {
        let r = random_raster(5, 4, 5, 3);
        let s = select_bands(&r, &order).unwrap();
        for (k, &src) in order.iter().enumerate() {
            prop_assert_eq!(s.band(k), r.band(src));
        }
    }
}

#[test]
fn non_finite_values_are_rejected_with_offset() {
    let r = random_raster(4, 4, 2, 1);
    let dir = tempfile::tempdir().unwrap();
    r.save(dir.path()).unwrap();
    let path = dir.path().join("band_2.f32");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    match load_raster(dir.path()) {
        Err(RasterError::NonFinite { offset, .. }) => assert_eq!(offset, 20),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn missing_band_file_is_reported() {
    let r = random_raster(3, 3, 3, 2);
    let dir = tempfile::tempdir().unwrap();
    r.save(dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("band_3.f32")).unwrap();
    assert!(matches!(
        load_raster(dir.path()),
        Err(RasterError::MissingBand(3))
    ));
}

#[test]
fn pca_full_reconstruction_and_variance_order() {
    for seed in 0..5 {
        let r = random_raster(20, 15, 6, seed);
        let pca = Pca::fit(&r).unwrap();
        let scores = pca.project(&r, 6);
        let back = pca.reconstruct(&scores);
        for k in 0..6 {
            for (p, &v) in r.band(k).iter().enumerate() {
                assert!((back[k][p] - v as f64).abs() < 1e-6);
            }
        }
        // Variance of unscaled scores equals the eigenvalues, descending.
        let var: Vec<f64> = scores
            .iter()
            .map(|s| {
                let m = s.iter().sum::<f64>() / s.len() as f64;
                s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / s.len() as f64
            })
            .collect();
        for c in 1..6 {
            assert!(var[c] <= var[c - 1] * (1.0 + 1e-9));
        }
        let ratio: f64 = pca.explained_variance_ratio().iter().sum();
        assert!((ratio - 1.0).abs() < 1e-9);
        // Loadings are orthonormal.
        for a in 0..6 {
            for b in 0..6 {
                let dot: f64 = (0..6)
                    .map(|k| pca.components[a][k] * pca.components[b][k])
                    .sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn ndvi_matches_formula_and_composites_stack_in_order() {
    let r = random_raster(6, 5, 7, 9);
    let v = ndvi(&r, 4, 3).unwrap();
    for p in 0..30 {
        let (nir, red) = (r.band(4)[p] as f64, r.band(3)[p] as f64);
        assert!((v.band(0)[p] as f64 - (nir - red) / (nir + red)).abs() < 1e-6);
    }
    let c = compose(&r, &[Channel::Band(3), Channel::Pc(1), Channel::Ndvi]).unwrap();
    assert_eq!(c.raster.band_names(), ["B4", "PC1", "NDVI"]);
    assert_eq!(c.raster.band(0), r.band(3));
    for k in 1..3 {
        let b = c.raster.band(k);
        let lo = b.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = b.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert!(lo == 0.0 && hi == 1.0);
    }
}
