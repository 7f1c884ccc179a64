use std::path::Path;

use midpose_core::binning::BinSpec;
use midpose_core::datasets::{synth_generate, synth_mesh, Dataset, SynthConfig, SYNTH_CATEGORIES};
use midpose_core::posenet::{
    evaluate, oracle_stage1, prepare_samples, select_pose, top_k_candidates, train_stage1, train_stage2,
    ConstantPredictor, DmaskLibrary, Fusion, ModelBundle, OraclePredictor, PreparedSample, Retrieval, Stage1Net,
    Stage2Net, TwoStagePredictor, FUSED_CHANNELS, FUSED_SIZE, STAGE2_THRESHOLD,
};
use midpose_core::silhouette::{default_intrinsics, generate_dmasks, Mask};
use midpose_core::tensorkit::{Tensor, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn specs() -> (BinSpec, BinSpec) {
    (BinSpec::azimuth(9).unwrap(), BinSpec::elevation(5).unwrap())
}

fn small_set(dir: &Path, n: usize) -> Vec<PreparedSample> {
    let cfg = SynthConfig {
        n_samples: n,
        ..Default::default()
    };
    synth_generate(&cfg, dir).unwrap();
    let ds = Dataset::load(dir).unwrap();
    let refs: Vec<_> = ds.samples.iter().collect();
    let (az, el) = specs();
    prepare_samples(&Fusion::new(0), &refs, &az, &el).unwrap()
}

fn library() -> DmaskLibrary {
    let (az, el) = specs();
    let k = default_intrinsics(128);
    let mut lib = DmaskLibrary::new();
    for cat in SYNTH_CATEGORIES {
        for i in 0..3 {
            let mesh = synth_mesh(cat, i, 0).unwrap();
            lib.insert(cat, generate_dmasks(&mesh, &az, &el, &k).unwrap());
        }
    }
    lib
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        max_epochs: epochs,
        batch_size: 8,
        ..Default::default()
    }
}

/// Scores every candidate by `[p2 >= t] * p1` and keeps the first maximum;
/// an all-zero score vector falls back to the top-1 candidate.
fn select_oracle(entries: &[(usize, f64)], p2: &[f64], t: f64) -> usize {
    let scores: Vec<f64> = entries.iter().zip(p2).map(|(e, &q)| if q >= t { e.1 } else { 0.0 }).collect();
    let best = scores.iter().cloned().fold(0.0, f64::max);
    if best == 0.0 {
        return entries[0].0;
    }
    entries[scores.iter().position(|&s| s == best).unwrap()].0
}

#[test]
fn select_pose_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for pattern in 0..8u32 {
        for _ in 0..10_000 {
            let logits: Vec<f32> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c = top_k_candidates(&logits, 3).unwrap();
            let p2: Vec<f64> = (0..3)
                .map(|i| {
                    if pattern >> i & 1 == 1 {
                        rng.random_range(STAGE2_THRESHOLD..=1.0)
                    } else {
                        rng.random_range(0.0..STAGE2_THRESHOLD)
                    }
                })
                .collect();
            let got = select_pose(&c, &p2, STAGE2_THRESHOLD);
            mismatches += usize::from(got != select_oracle(c.entries(), &p2, STAGE2_THRESHOLD));
            assert!(c.contains(got));
        }
    }
    assert_eq!(mismatches, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn top_k_matches_sort(logits in prop::collection::vec(-5.0f32..5.0, 3..20), k in 1usize..4) {
        let c = top_k_candidates(&logits, k).unwrap();
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        prop_assert_eq!(c.bins(), order[..k].to_vec());
        let p: Vec<f64> = c.entries().iter().map(|e| e.1).collect();
        prop_assert!(p.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn untrained_losses_are_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let samples = small_set(&dir.path().join("d"), 24);
    let (az, el) = specs();
    let h1 = train_stage1(&mut Stage1Net::new(9, 5, 0.5, 3).unwrap(), &samples, &[], &az, &el, &quick(1)).unwrap();
    let uniform1 = 9f64.ln() + 5f64.ln();
    assert!((h1.initial_loss - uniform1).abs() < 0.02, "{} vs {uniform1}", h1.initial_loss);
    let h2 = train_stage2(&mut Stage2Net::new(3), &samples[..8], &library(), None, 9, &quick(1)).unwrap();
    assert!((h2.initial_loss - 2f64.ln()).abs() < 0.01, "{}", h2.initial_loss);
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let samples = small_set(&dir.path().join("d"), 24);
    let (az, el) = specs();
    let run = || {
        let mut net = Stage1Net::new(9, 5, 0.5, 4).unwrap();
        let h = train_stage1(&mut net, &samples[..18], &samples[18..], &az, &el, &quick(2)).unwrap();
        let bundle = ModelBundle {
            fusion: Fusion::new(0),
            stage1: net,
            stage2: None,
        };
        (h, bundle.to_checkpoint().encode())
    };
    let (h1, c1) = run();
    let (h2, c2) = run();
    assert_eq!(h1, h2);
    assert_eq!(c1, c2);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let samples = small_set(&dir.path().join("d"), 16);
    let (az, el) = specs();
    let mut net = Stage1Net::new(9, 5, 0.5, 5).unwrap();
    train_stage1(&mut net, &samples, &[], &az, &el, &quick(1)).unwrap();
    let bundle = ModelBundle {
        fusion: Fusion::new(0),
        stage1: net,
        stage2: Some(Stage2Net::new(5)),
    };
    let path = dir.path().join("m.ckpt");
    bundle.save(&path).unwrap();
    let back = ModelBundle::load(&path).unwrap();
    let lib = library();
    let predict = |b: &ModelBundle| {
        let p = TwoStagePredictor {
            stage1: b.stage1.clone(),
            stage2: Some((b.stage2.clone().unwrap(), &lib, Retrieval::GroundTruth)),
        };
        evaluate(&p, &samples, &az, &el).unwrap().predictions
    };
    assert_eq!(predict(&bundle), predict(&back));
}

/// Samples on a 1-degree azimuth grid whose fused channels 0 and 1 carry
/// the bins, which is what the hand-set oracle network reads.
fn grid_samples(az: &BinSpec, el: &BinSpec) -> Vec<PreparedSample> {
    (0..360)
        .map(|d| {
            let a = d as f64;
            let e = (d % 90) as f64;
            let ab = midpose_core::binning::assign_bin(a, az).unwrap().bin;
            let eb = midpose_core::binning::assign_bin(e, el).unwrap().bin;
            let fused = Tensor::from_fn(&[FUSED_SIZE, FUSED_SIZE, FUSED_CHANNELS], |i| match i % FUSED_CHANNELS {
                0 => ab as f32,
                1 => eb as f32,
                _ => 0.0,
            });
            PreparedSample {
                sample_id: format!("g{d:03}"),
                category: if d % 2 == 0 { "chair".into() } else { "sofa".into() },
                mesh_id: "chair_0".into(),
                azimuth_deg: a,
                elevation_deg: e,
                az_bin: ab,
                el_bin: eb,
                fused,
                mask: Mask::new(128, 128),
            }
        })
        .collect()
}

#[test]
fn oracle_and_constant_predictors() {
    let (az, el) = specs();
    let samples = grid_samples(&az, &el);
    let r = evaluate(&OraclePredictor, &samples, &az, &el).unwrap();
    assert_eq!(r.mean().az_acc(), 100.0);
    assert_eq!(r.mean().el_acc(), 100.0);

    let (_, net) = oracle_stage1(9, 5).unwrap();
    let r = evaluate(&TwoStagePredictor { stage1: net, stage2: None }, &samples, &az, &el).unwrap();
    assert_eq!(r.mean().az_acc(), 100.0, "{}", r.to_csv());
    assert_eq!(r.mean().el_acc(), 100.0);

    // Azimuth bin 0 covers [-22.5, 22.5]: 45 grid points out of 360.
    // Elevation bin 0 covers [0, 18]: 19 points in each of four 90-degree cycles.
    let r = evaluate(&ConstantPredictor { az_bin: 0, el_bin: 0 }, &samples, &az, &el).unwrap();
    assert_eq!(r.mean().az_correct, 45);
    assert_eq!(r.mean().el_correct, 76);
    let csv = r.to_csv();
    assert!(csv.starts_with("category,n,az_acc,el_acc\nchair,180,"), "{csv}");
    assert!(csv.ends_with("mean,360,12.50,21.11\n"), "{csv}");
}

#[test]
fn two_stage_prediction_stays_in_top3() {
    let dir = tempfile::tempdir().unwrap();
    let samples = small_set(&dir.path().join("d"), 20);
    let (az, el) = specs();
    let lib = library();
    for seed in 0..3 {
        let p = TwoStagePredictor {
            stage1: Stage1Net::new(9, 5, 0.5, seed).unwrap(),
            stage2: Some((Stage2Net::new(seed), &lib, Retrieval::TemplateMatch)),
        };
        let r = evaluate(&p, &samples, &az, &el).unwrap();
        assert_eq!(r.outside_candidates, 0);
        for (s, pred) in samples.iter().zip(&r.predictions) {
            let mesh = pred.retrieved_mesh.as_deref().unwrap();
            assert!(mesh.starts_with(&s.category), "{mesh} for {}", s.category);
        }
    }
}
