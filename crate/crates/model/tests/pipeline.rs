use std::fs;

use hoi_autograd::Tensor;
use hoi_core::eval::{map_report, EvalConfig};
use hoi_core::io::ImagePredictions;
use hoi_core::{BBox, Detection, SplitSpec};
use hoi_model::checkpoint::{Checkpoint, ModelConfig, GROUPS};
use hoi_model::inference::{
    benchmark_latency, detect_hoi, run_image, BackendKind, FeatureCache, GroundTruthOracle, InferenceConfig,
    LatencyInput, ModelScorer, ScoringMode,
};
use hoi_model::training::whitened_projection;
use hoi_model::ModelError;
use hoi_toyworld::{ToySceneSpec, BALL, PERSON};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fresh() -> Checkpoint {
    Checkpoint::init(ModelConfig::default(), hoi_toyworld::taxonomy()).unwrap()
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let mut ck = fresh();
    ck.trained_stages.push(1);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ck.save(a.path()).unwrap();
    let loaded = Checkpoint::load(a.path()).unwrap();
    assert_eq!(loaded, ck);
    loaded.save(b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), GROUPS.len() + 3);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn corrupted_blob_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fresh().save(dir.path()).unwrap();
    let path = dir.path().join("sap.bin");
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
    let err = Checkpoint::load(dir.path()).unwrap_err();
    assert!(matches!(err, ModelError::Checkpoint { .. }), "{err}");
}

fn corpus(n: usize, seed: u64) -> hoi_toyworld::ToyDataset {
    hoi_toyworld::generate(&ToySceneSpec { seed, ..Default::default() }, n).unwrap()
}

#[test]
fn oracle_pipeline_is_perfect() {
    let data = corpus(50, 0);
    let gt: Vec<_> = data.images.iter().map(|i| i.gt.clone()).collect();
    let oracle = GroundTruthOracle::new(&data.taxonomy, &gt);
    let cfg = InferenceConfig::default();
    let preds: Vec<ImagePredictions> = data
        .images
        .iter()
        .enumerate()
        .map(|(k, img)| {
            let dets = hoi_toyworld::detections(&data.spec, k, img, 0.0);
            ImagePredictions {
                id: img.id.clone(),
                triplets: detect_hoi(&oracle, &img.id, &img.image, &dets.detections, &cfg).unwrap(),
            }
        })
        .collect();
    let report = map_report(&preds, &gt, &data.taxonomy, &SplitSpec::full(), &EvalConfig::default()).unwrap();
    assert_eq!(report.aggregates.full, Some(1.0));
}

fn one_pair_scene() -> (RgbImage, Vec<Detection>) {
    let image = RgbImage::from_pixel(40, 48, image::Rgb([20, 20, 20]));
    let dets = vec![
        Detection::new(BBox::from_corners(4.0, 8.0, 16.0, 36.0).unwrap(), PERSON, 0.9).unwrap(),
        Detection::new(BBox::from_corners(18.0, 18.0, 25.0, 25.0).unwrap(), BALL, 0.8).unwrap(),
    ];
    (image, dets)
}

#[test]
fn backend_calls_per_mode() {
    let ck = fresh();
    let (image, dets) = one_pair_scene();
    let m = ck.taxonomy.all_candidates(BALL).len();
    for (mode, lambda, expected) in [
        (ScoringMode::Generation, 0.0, m),
        (ScoringMode::Matching, 0.0, 1),
        (ScoringMode::Generation, 1.0, 0),
        (ScoringMode::Matching, 1.0, 0),
    ] {
        let cfg = InferenceConfig {
            mode,
            lambda,
            backend: BackendKind::Stub,
            ..Default::default()
        };
        let scorer = ModelScorer::new(&ck, &ck.taxonomy, &cfg).unwrap().with_cache(None);
        let out = run_image(&scorer, "x", &image, &dets, &cfg).unwrap();
        assert_eq!(out.pairs, 1);
        assert_eq!(out.backend_calls, expected, "{mode:?} lambda {lambda}");
        let sample = [LatencyInput {
            id: "x",
            image: &image,
            detections: &dets,
        }];
        let report = benchmark_latency(&scorer, &sample, &cfg).unwrap();
        assert_eq!(report.backend_calls, expected);
    }
}

#[test]
fn batched_scoring_matches_sequential() {
    let ck = fresh();
    let data = corpus(6, 3);
    for img in &data.images {
        let dets = hoi_toyworld::detections(&data.spec, 0, img, 1.0).detections;
        let run = |batch_pairs| {
            let cfg = InferenceConfig {
                lambda: 0.0,
                final_threshold: 0.0,
                batch_pairs,
                ..Default::default()
            };
            let scorer = ModelScorer::new(&ck, &ck.taxonomy, &cfg).unwrap().with_cache(None);
            detect_hoi(&scorer, &img.id, &img.image, &dets, &cfg).unwrap()
        };
        assert_eq!(run(false), run(true));
    }
}

#[test]
fn feature_cache_reuses_encodings() {
    let ck = fresh();
    let dir = tempfile::tempdir().unwrap();
    let cache = FeatureCache::new(dir.path());
    let (image, dets) = one_pair_scene();
    let cfg = InferenceConfig::default();
    let plain = ModelScorer::new(&ck, &ck.taxonomy, &cfg).unwrap().with_cache(None);
    let cached = ModelScorer::new(&ck, &ck.taxonomy, &cfg).unwrap().with_cache(Some(cache.clone()));
    let expected = detect_hoi(&plain, "x", &image, &dets, &cfg).unwrap();
    assert_eq!(detect_hoi(&cached, "x", &image, &dets, &cfg).unwrap(), expected);
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    // Second run reads the stored map.
    assert_eq!(detect_hoi(&cached, "x", &image, &dets, &cfg).unwrap(), expected);
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    let other = RgbImage::from_pixel(40, 48, image::Rgb([21, 20, 20]));
    assert_ne!(FeatureCache::key(b"enc", &image), FeatureCache::key(b"enc", &other));
    assert_ne!(FeatureCache::key(b"enc", &image), FeatureCache::key(b"enc2", &image));
}

#[test]
fn whitening_gives_identity_covariance() {
    let (n, d) = (400, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Strongly anisotropic, correlated features with an offset.
    let mix = [
        [50.0, 0.0, 0.0, 0.0, 0.0],
        [1.0, 0.1, 0.0, 0.0, 0.0],
        [0.0, 0.3, 0.01, 0.0, 0.0],
        [2.0, 0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 0.5, 0.2],
    ];
    let features: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
            (0..d).map(|j| 3.0 + (0..d).map(|i| z[i] * mix[i][j]).sum::<f64>()).collect()
        })
        .collect();
    let (w, b) = whitened_projection(&features, &Tensor::identity(d), &Tensor::zeros(1, d)).unwrap();
    let out: Vec<Vec<f64>> = features
        .iter()
        .map(|f| (0..d).map(|j| b.get(0, j) + (0..d).map(|i| f[i] * w.get(i, j)).sum::<f64>()).collect())
        .collect();
    for j in 0..d {
        let mean = out.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        for k in 0..d {
            let cov = out.iter().map(|r| r[j] * r[k]).sum::<f64>() / (n - 1) as f64;
            let want = if j == k { 1.0 } else { 0.0 };
            assert!((cov - want).abs() < 1e-8, "cov[{j}][{k}] = {cov}");
        }
    }
    assert!(whitened_projection(&features[..1], &Tensor::identity(d), &Tensor::zeros(1, d)).is_err());
}
