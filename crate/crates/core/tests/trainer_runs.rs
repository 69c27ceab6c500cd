use std::path::Path;
use std::time::Instant;

use derefl::datasets::{write_linear_synthetic_set, DatasetManifest, Split};
use derefl::depthrange::PseudoDepth;
use derefl::error::Error;
use derefl::losses::FeatureExtractor;
use derefl::networks::{init_model, IdentityModel, ModelBundle, UNetConfig};
use derefl::trainer::{
    cosine_lr, train, validate, TrainConfig, TrainContext, UpgradeMode, UpgradePolicy, LAST_CHECKPOINT,
};
use serde_json::Value;

fn bundle(seed: u64) -> ModelBundle {
    init_model(
        UNetConfig::rcnn().with_size(5, 8),
        UNetConfig::tcnn().with_size(5, 8),
        seed,
    )
    .unwrap()
}

fn data(dir: &Path, n: usize, size: usize) -> DatasetManifest {
    write_linear_synthetic_set(dir, n, size, 42, Split::Train).unwrap()
}

fn base_config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, lr0: 1e-3, seed: 3, ..Default::default() }
}

fn iteration_lines(log: &[String]) -> Vec<Value> {
    log.iter()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v.get("iter").is_some())
        .collect()
}

fn val_lines(log: &[String]) -> Vec<Value> {
    log.iter()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v.get("val_psnr").is_some())
        .collect()
}

#[test]
fn two_epoch_smoke_run_emits_validation_records() {
    let dir = tempfile::tempdir().unwrap();
    let m = data(dir.path(), 4, 64);
    let ext = FeatureExtractor::test_default();
    let ctx = TrainContext { train: &m, val: &m, depth: &PseudoDepth, extractor: &ext };
    let out_dir = dir.path().join("run");
    let cfg = TrainConfig { out_dir: Some(out_dir.clone()), ..base_config(2) };
    let mut b = bundle(1);
    let start = Instant::now();
    let out = train(&mut b, &ctx, &cfg, None).unwrap();
    let per_iter = start.elapsed().as_secs_f64() / 8.0;
    println!("train iteration (64x64, base 8, M=2) ~ {:.3} s including validation", per_iter);
    assert_eq!(out.state.val_history.len(), 2);
    assert_eq!(val_lines(&out.log).len(), 2);
    assert_eq!(iteration_lines(&out.log).len(), 8);
    assert!(out_dir.join("train.jsonl").is_file());
    assert!(out.best_checkpoint.unwrap().is_file());
    assert!(out.last_checkpoint.unwrap().is_file());
    let first: Value = serde_json::from_str(&out.log[0]).unwrap();
    assert!(first.get("config").is_some());
    for line in iteration_lines(&out.log) {
        assert!(line["total"].as_f64().unwrap().is_finite());
        assert_eq!(line["steps"].as_array().unwrap().len(), 2);
    }
    let saved = ModelBundle::load(&out_dir.join("best.ckpt")).unwrap();
    assert_eq!(saved.k, 4);
}

#[test]
fn fixed_epoch_upgrade_switches_m() {
    let dir = tempfile::tempdir().unwrap();
    let m = data(dir.path(), 2, 32);
    let ext = FeatureExtractor::test_default();
    let ctx = TrainContext { train: &m, val: &m, depth: &PseudoDepth, extractor: &ext };
    let cfg = TrainConfig {
        upgrade: UpgradePolicy { mode: UpgradeMode::FixedEpoch, epoch: 1, ..Default::default() },
        ..base_config(3)
    };
    let out = train(&mut bundle(2), &ctx, &cfg, None).unwrap();
    let ms: Vec<u64> = iteration_lines(&out.log).iter().map(|v| v["M"].as_u64().unwrap()).collect();
    assert_eq!(ms, vec![2, 2, 3, 3, 3, 3]);
    assert_eq!(out.state.current_m, 3);
}

#[test]
fn lr_follows_cosine_at_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let m = data(dir.path(), 1, 16);
    let ext = FeatureExtractor::test_default();
    let ctx = TrainContext { train: &m, val: &m, depth: &PseudoDepth, extractor: &ext };
    let cfg = base_config(4);
    let out = train(&mut bundle(3), &ctx, &cfg, None).unwrap();
    for v in val_lines(&out.log) {
        let e = v["epoch"].as_u64().unwrap() as usize;
        assert_eq!(v["lr"].as_f64().unwrap(), cosine_lr(e, 4, cfg.lr0).unwrap());
    }
}

#[test]
fn both_networks_move_after_one_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let m = data(dir.path(), 1, 32);
    let ext = FeatureExtractor::test_default();
    let ctx = TrainContext { train: &m, val: &m, depth: &PseudoDepth, extractor: &ext };
    let mut b = bundle(4);
    let before = (b.rcnn.params().snapshot(), b.tcnn.params().snapshot());
    train(&mut b, &ctx, &base_config(1), None).unwrap();
    let max_delta = |a: &std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)>, store: &derefl_autograd::ParamStore| {
        let now = store.snapshot();
        a.iter()
            .flat_map(|(k, (_, v))| v.iter().zip(&now[k].1).map(|(x, y)| (x - y).abs()))
            .fold(0.0f32, f32::max)
    };
    assert!(max_delta(&before.0, b.rcnn.params()) > 0.0);
    assert!(max_delta(&before.1, b.tcnn.params()) > 0.0);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let m = data(dir.path(), 3, 32);
    let ext = FeatureExtractor::test_default();
    let ctx = TrainContext { train: &m, val: &m, depth: &PseudoDepth, extractor: &ext };
    let cfg = TrainConfig { crop: Some(24), hflip_prob: 0.5, ..base_config(2) };
    let a = train(&mut bundle(5), &ctx, &cfg, None).unwrap();
    let b = train(&mut bundle(5), &ctx, &cfg, None).unwrap();
    let (la, lb) = (iteration_lines(&a.log), iteration_lines(&b.log));
    assert_eq!(la.len(), lb.len());
    for (x, y) in la.iter().zip(&lb) {
        let (tx, ty) = (x["total"].as_f64().unwrap(), y["total"].as_f64().unwrap());
        assert!((tx - ty).abs() <= 1e-6 * tx.abs().max(1.0));
    }
}

#[test]
fn resume_matches_straight_through() {
    let dir = tempfile::tempdir().unwrap();
    let m = data(dir.path(), 3, 32);
    let ext = FeatureExtractor::test_default();
    let ctx = TrainContext { train: &m, val: &m, depth: &PseudoDepth, extractor: &ext };
    let straight = train(&mut bundle(6), &ctx, &base_config(2), None).unwrap();

    let run = dir.path().join("split");
    let first = TrainConfig { out_dir: Some(run.clone()), stop_after_epochs: Some(1), ..base_config(2) };
    let part = train(&mut bundle(6), &ctx, &first, None).unwrap();
    assert_eq!(part.state.epoch, 1);
    let second = TrainConfig { out_dir: Some(run.clone()), ..base_config(2) };
    let mut fresh = bundle(99);
    let resumed = train(&mut fresh, &ctx, &second, Some(&run.join(LAST_CHECKPOINT))).unwrap();

    let a = straight.state.val_history.last().unwrap();
    let b = resumed.state.val_history.last().unwrap();
    assert_eq!(resumed.state.val_history.len(), 2);
    assert!((a.psnr - b.psnr).abs() <= 1e-4, "{} vs {}", a.psnr, b.psnr);
    assert!((a.ssim - b.ssim).abs() <= 1e-4);
    assert_eq!(straight.state.global_iter, resumed.state.global_iter);
}

#[test]
fn validate_with_stub_models() {
    let dir = tempfile::tempdir().unwrap();
    let m = data(dir.path(), 2, 24);
    let aux = Default::default();
    let (p, s) = validate(&IdentityModel, aux, &m, &PseudoDepth).unwrap();
    let mut bp = 0.0;
    let mut bs = 0.0;
    for i in 0..m.len() {
        let sample = m.load_entry(i).unwrap();
        bp += derefl::evalbench::psnr(&sample.ambient, &sample.transmission).unwrap();
        bs += derefl::evalbench::ssim(&sample.ambient, &sample.transmission).unwrap();
    }
    assert!((p - bp / 2.0).abs() < 1e-12);
    assert!((s - bs / 2.0).abs() < 1e-12);
    assert_eq!(validate(&IdentityModel, aux, &m, &PseudoDepth).unwrap(), (p, s));
}

#[test]
fn missing_file_aborts_with_sample_id() {
    let dir = tempfile::tempdir().unwrap();
    let m = data(dir.path(), 2, 16);
    std::fs::remove_file(dir.path().join("ambient/syn00001.png")).unwrap();
    let ext = FeatureExtractor::test_default();
    let ctx = TrainContext { train: &m, val: &m, depth: &PseudoDepth, extractor: &ext };
    match train(&mut bundle(7), &ctx, &base_config(1), None) {
        Err(Error::DataError { id, .. }) => assert_eq!(id, "syn00001"),
        other => panic!("expected DataError, got {other:?}"),
    }
}
