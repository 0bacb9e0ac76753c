mod common;

use std::path::Path;

use image::{GrayImage, Luma, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdmmf::metrics::{aggregate, score_frame, MeanFMode};
use stdmmf::pipeline::checkpoint::Checkpoint;
use stdmmf::pipeline::dataset::{group_clips, make_batch};
use stdmmf::pipeline::evaluate::evaluate;
use stdmmf::pipeline::infer::infer;
use stdmmf::pipeline::synthetic::{disk_samples, write_disk_dataset};
use stdmmf::pipeline::{load_dataset, ModelConfig, Split, Stdmmf, TrainConfig, Trainer};
use stdmmf::Error;
use stdmmf_tensor::EntryKind;

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::tiny();
    c.clip_len = 2;
    c
}

fn params(model: &Stdmmf) -> Vec<Vec<f64>> {
    model.store.entries().iter().filter(|e| e.kind == EntryKind::Parameter).map(|e| e.data.clone()).collect()
}

fn save_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)])).save(path).unwrap();
}

// dataset

#[test]
fn empty_root_gives_no_samples() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(dir.path(), Split::Train, 32).unwrap().is_empty());
}

#[test]
fn missing_root_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_dataset(&dir.path().join("nope"), Split::Train, 32).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn frames_without_flow_are_skipped_and_masks_binarised() {
    let dir = tempfile::tempdir().unwrap();
    write_disk_dataset(dir.path(), 1, 5, 24, 0).unwrap();
    let s = load_dataset(dir.path(), Split::Train, 16).unwrap();
    assert_eq!(s.len(), 4);
    assert_eq!(s[0].stem, "00001");
    assert_eq!(s[0].original_size, (24, 24));
    for x in &s {
        let gt = x.gt.as_ref().unwrap();
        assert_eq!(gt.len(), 256);
        assert!(gt.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(gt.contains(&1.0));
        assert_eq!(x.frame.len(), 3 * 256);
    }
}

#[test]
fn split_subdirectory_is_preferred() {
    let dir = tempfile::tempdir().unwrap();
    write_disk_dataset(&dir.path().join("train"), 2, 3, 16, 1).unwrap();
    assert_eq!(load_dataset(dir.path(), Split::Train, 16).unwrap().len(), 4);
}

#[test]
fn mask_of_wrong_size_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    write_disk_dataset(dir.path(), 1, 2, 16, 2).unwrap();
    save_gray(&dir.path().join("video00/gt/00001.png"), 8, 8, |_, _| 0);
    let err = load_dataset(dir.path(), Split::Train, 16).unwrap_err();
    assert!(matches!(&err, Error::Data(m) if m.contains("video00/00001")), "{err}");
}

#[test]
fn masks_are_optional_only_for_test_split() {
    let dir = tempfile::tempdir().unwrap();
    write_disk_dataset(dir.path(), 1, 3, 16, 3).unwrap();
    std::fs::remove_dir_all(dir.path().join("video00/gt")).unwrap();
    assert!(matches!(load_dataset(dir.path(), Split::Train, 16), Err(Error::Data(_))));
    let s = load_dataset(dir.path(), Split::Test, 16).unwrap();
    assert_eq!(s.len(), 2);
    assert!(s.iter().all(|x| x.gt.is_none()));
}

#[test]
fn clips_stay_within_one_video() {
    let s = disk_samples(2, 5, 16, 0);
    let groups = group_clips(&s, 2);
    assert_eq!(groups.iter().map(Vec::len).collect::<Vec<_>>(), [2, 2, 1, 2, 2, 1]);
    for g in &groups {
        assert!(g.iter().all(|&i| s[i].video_id == s[g[0]].video_id));
    }
}

// training

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = tiny_config();
    cfg.learning_rate = 0.0;
    cfg.weight_decay = 0.0;
    let samples = disk_samples(1, 2, 32, 0);
    let mut t = Trainer::new(cfg).unwrap();
    let before = params(&t.model);
    t.train_step(&make_batch(&samples, &[0, 1]).unwrap()).unwrap();
    assert_eq!(before, params(&t.model));
}

#[test]
fn plain_sgd_step_moves_against_the_gradient() {
    let mut cfg = tiny_config();
    cfg.momentum = 0.0;
    cfg.weight_decay = 0.0;
    cfg.learning_rate = 1e-3;
    let samples = disk_samples(1, 2, 32, 1);
    let mut t = Trainer::new(cfg).unwrap();
    let before = params(&t.model);
    t.train_step(&make_batch(&samples, &[0, 1]).unwrap()).unwrap();
    let mut checked = 0;
    let params_after = t.model.store.entries().iter().filter(|e| e.kind == EntryKind::Parameter);
    for (e, b) in params_after.zip(&before) {
        for i in 0..e.data.len() {
            let g = e.grad.get(i).copied().unwrap_or(0.0);
            assert!((e.data[i] - (b[i] - 1e-3 * g)).abs() <= 1e-15, "{}", e.name);
            checked += usize::from(g != 0.0);
        }
    }
    assert!(checked > 1000);
}

#[test]
fn non_finite_parameters_are_reported() {
    let samples = disk_samples(1, 2, 32, 2);
    let mut t = Trainer::new(tiny_config()).unwrap();
    let e = t.model.store.entries_mut().iter_mut().find(|e| e.name == "decoder.head_conv.weight").unwrap();
    e.data[0] = f64::NAN;
    let err = t.train_step(&make_batch(&samples, &[0, 1]).unwrap()).unwrap_err();
    match err {
        Error::NonFinite { step, diagnostics } => {
            assert_eq!(step, 0);
            assert!(diagnostics.contains("largest weights"));
        }
        other => panic!("{other}"),
    }
}

// checkpoints

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let samples = disk_samples(1, 2, 32, 3);
    let mut t = Trainer::new(tiny_config()).unwrap();
    t.run_epoch(&samples, |_, _| {}).unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    t.checkpoint().save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let samples = disk_samples(2, 2, 32, 4);
    let mut full = Trainer::new(tiny_config()).unwrap();
    full.run_epoch(&samples, |_, _| {}).unwrap();
    let ck = full.checkpoint();
    full.run_epoch(&samples, |_, _| {}).unwrap();

    let bytes = ck.to_bytes();
    let mut resumed = Trainer::resume(tiny_config(), &Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!((resumed.epoch, resumed.step), (1, 2));
    resumed.run_epoch(&samples, |_, _| {}).unwrap();
    assert_eq!(params(&full.model), params(&resumed.model));
    assert_eq!(full.history[2..], resumed.history[..]);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let t = Trainer::new(tiny_config()).unwrap();
    let bytes = t.checkpoint().to_bytes();
    for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn failed_apply_leaves_the_model_untouched() {
    let src = Trainer::new(tiny_config()).unwrap();
    let mut ck = src.checkpoint();
    ck.tensors.retain(|t| t.name != "decoder.head_conv.weight");
    let mut other = TrainConfig::tiny();
    other.seed = 9;
    let mut dst = Stdmmf::new(ModelConfig::from_train(&other), 9).unwrap();
    let before = params(&dst);
    let err = ck.apply(&mut dst.store, None).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
    assert_eq!(before, params(&dst));
}

#[test]
fn unknown_tensor_is_rejected() {
    let src = Trainer::new(tiny_config()).unwrap();
    let mut ck = src.checkpoint();
    let mut extra = ck.tensors[0].clone();
    extra.name = "nonexistent.weight".into();
    ck.tensors.push(extra);
    let mut dst = Stdmmf::new(ModelConfig::tiny(), 0).unwrap();
    match ck.apply(&mut dst.store, None).unwrap_err() {
        Error::Checkpoint { issues } => assert!(issues.iter().any(|i| i.contains("nonexistent.weight"))),
        other => panic!("{other}"),
    }
}

// inference

fn half_model() -> Stdmmf {
    let mut m = Stdmmf::new(ModelConfig::tiny(), 0).unwrap();
    for e in m.store.entries_mut() {
        if e.kind == EntryKind::Parameter {
            e.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    m
}

#[test]
fn constant_model_writes_128_at_original_resolution() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_disk_dataset(data.path(), 1, 3, 40, 5).unwrap();
    let samples = load_dataset(data.path(), Split::Test, 32).unwrap();
    let mut m = half_model();
    let written = infer(&mut m, &samples, 4, out.path(), false).unwrap();
    assert_eq!(written.len(), 2);
    let first: Vec<Vec<u8>> = written.iter().map(|p| std::fs::read(p).unwrap()).collect();
    for p in &written {
        let img = image::open(p).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (40, 40));
        assert!(img.pixels().all(|q| q[0] == 128));
    }
    assert!(!out.path().join("overlay").exists());
    let again = infer(&mut m, &samples, 4, out.path(), true).unwrap();
    assert_eq!(first, again.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>());
    assert!(out.path().join("overlay/video00/00001.png").is_file());
}

// evaluation

fn write_masks(root: &Path, maps: &[(String, Vec<u8>)], w: u32, h: u32) {
    for (rel, px) in maps {
        save_gray(&root.join(rel), w, h, |x, y| px[(y * w + x) as usize]);
    }
}

#[test]
fn self_comparison_is_perfect() {
    let gt = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let maps: Vec<(String, Vec<u8>)> = (0..3).map(|i| (format!("v/{i}.png"), (0..48).map(|k| if k % 5 < 2 || rng.random::<bool>() { 255 } else { 0 }).collect())).collect();
    write_masks(gt.path(), &maps, 8, 6);
    let e = evaluate(gt.path(), gt.path(), MeanFMode::Curve).unwrap();
    assert!(e.complete());
    let r = e.aggregate.report;
    assert_eq!(r.mae, 0.0);
    assert!((r.max_f - 1.0).abs() < 1e-12);
    assert!((r.sm - 1.0).abs() < 1e-6, "{}", r.sm);
    assert!((r.max_em - 1.0).abs() < 1e-6);
}

#[test]
fn half_prediction_against_half_mask() {
    let pred = tempfile::tempdir().unwrap();
    let gt = tempfile::tempdir().unwrap();
    save_gray(&pred.path().join("v/0.png"), 8, 8, |_, _| 128);
    save_gray(&gt.path().join("v/gt/0.png"), 8, 8, |x, _| if x < 4 { 255 } else { 0 });
    let r = evaluate(pred.path(), gt.path(), MeanFMode::Curve).unwrap().aggregate.report;
    assert!((r.mae - 0.5).abs() < 0.5 / 255.0 + 1e-12, "{}", r.mae);
}

#[test]
fn random_pairs_match_the_oracle_aggregation() {
    let pred = tempfile::tempdir().unwrap();
    let gt = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (w, h) = (9u32, 7u32);
    let n = (w * h) as usize;
    let mut oracle = Vec::new();
    for i in 0..10 {
        let (p, g) = common::random_pair(&mut rng, n);
        let pq: Vec<u8> = p.iter().map(|v| (v * 255.0).round() as u8).collect();
        let gq: Vec<u8> = g.iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
        write_masks(pred.path(), &[(format!("vid{}/{i:03}.png", i % 3), pq.clone())], w, h);
        write_masks(gt.path(), &[(format!("vid{}/{i:03}.png", i % 3), gq)], w, h);
        let pv: Vec<f64> = pq.iter().map(|&v| v as f64 / 255.0).collect();
        oracle.push((pv, g));
    }
    let got = evaluate(pred.path(), gt.path(), MeanFMode::Curve).unwrap().aggregate;

    let k = oracle.len() as f64;
    let mut f = vec![0.0; 256];
    let mut em = vec![0.0; 256];
    let (mut mae, mut sm) = (0.0, 0.0);
    for (p, g) in &oracle {
        for (acc, v) in f.iter_mut().zip(common::f_curve(p, g)) {
            *acc += v / k;
        }
        for (acc, v) in em.iter_mut().zip(common::em_curve(p, g)) {
            *acc += v / k;
        }
        mae += common::mae(p, g) / k;
        sm += common::s_measure(p, g, h as usize, w as usize) / k;
    }
    let max = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / 256.0;
    let r = got.report;
    let expect = [mae, max(&f), mean(&f), max(&em), mean(&em), sm];
    for (a, b) in r.values().iter().zip(expect) {
        assert!((a - b).abs() < 1e-9, "{:?} vs {:?}", r.values(), expect);
    }

    // the same frames scored in memory, in reverse order
    let rev: Vec<_> = oracle.iter().rev().map(|(p, g)| score_frame(p, g, h as usize, w as usize).unwrap()).collect();
    let again = aggregate(&rev, MeanFMode::Curve).unwrap().report;
    for (a, b) in r.values().iter().zip(again.values()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn unmatched_files_are_listed() {
    let pred = tempfile::tempdir().unwrap();
    let gt = tempfile::tempdir().unwrap();
    save_gray(&pred.path().join("v/0.png"), 4, 4, |_, _| 200);
    save_gray(&pred.path().join("v/1.png"), 4, 4, |_, _| 200);
    save_gray(&pred.path().join("overlay/v/0.png"), 4, 4, |_, _| 0);
    save_gray(&gt.path().join("v/gt/0.png"), 4, 4, |_, _| 255);
    save_gray(&gt.path().join("w/gt/5.png"), 4, 4, |_, _| 255);
    let e = evaluate(pred.path(), gt.path(), MeanFMode::Curve).unwrap();
    assert!(!e.complete());
    assert_eq!(e.unmatched_pred, ["v/1.png"]);
    assert_eq!(e.unmatched_gt, ["w/5.png"]);
    assert_eq!(e.aggregate.frames, 1);
}

#[test]
fn overlay_export_blends_red() {
    let pred = tempfile::tempdir().unwrap();
    let frames = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    save_gray(&pred.path().join("v/0.png"), 4, 4, |_, _| 255);
    let fp = frames.path().join("v/frames/0.png");
    std::fs::create_dir_all(fp.parent().unwrap()).unwrap();
    RgbImage::from_pixel(4, 4, image::Rgb([0, 100, 200])).save(&fp).unwrap();
    let n = stdmmf::pipeline::infer::export_overlay(pred.path(), frames.path(), out.path()).unwrap();
    assert_eq!(n, 1);
    let img = image::open(out.path().join("v/0.png")).unwrap().to_rgb8();
    assert_eq!(img.get_pixel(0, 0).0, [153, 40, 80]);
}
