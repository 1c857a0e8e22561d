use mfennet::data::{synth_dataset, AugmentConfig, Dataset};
use mfennet::engine::{Shape4, Tensor4};
use mfennet::model::{Model, ModelConfig, ModelGraph};
use mfennet::train::{
    decode, dice, encode, evaluate, iou, load_checkpoint, load_into, overlaps, save_checkpoint, train,
    TrainConfig, Trainer, FORMAT_VERSION,
};
use mfennet::Error;
use proptest::prelude::*;

fn small() -> ModelConfig {
    ModelConfig {
        stage_widths: vec![4, 8, 8, 16, 16],
        blocks_per_stage: vec![1, 1, 1, 1, 0],
        spp_bins: vec![1, 2],
        ..ModelConfig::default()
    }
}

fn model(seed: u64) -> Model<f32> {
    Model::new(ModelGraph::mfennet(&small()).unwrap(), seed)
}

fn data() -> Dataset {
    synth_dataset(6, 32, 7).unwrap()
}

fn quick(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        lr,
        ..TrainConfig::default()
    }
}

fn mask(bits: &[bool]) -> Tensor4<f32> {
    Tensor4::from_vec(Shape4::new(1, 1, 16, 16), bits.iter().map(|&b| b as u8 as f32).collect()).unwrap()
}

fn brute_force(pred: &[bool], truth: &[bool]) -> (f64, f64) {
    let inter = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count();
    let union = pred.iter().zip(truth).filter(|(p, t)| **p || **t).count();
    let sizes = pred.iter().filter(|p| **p).count() + truth.iter().filter(|t| **t).count();
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    let dice = if sizes == 0 { 1.0 } else { 2.0 * inter as f64 / sizes as f64 };
    (iou, dice)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn metrics_match_pixel_counting(
        pred in prop::collection::vec(any::<bool>(), 256),
        truth in prop::collection::vec(any::<bool>(), 256),
        margin in 0.01f32..20.0,
    ) {
        let logits = mask(&pred).map(|v| if v == 1.0 { margin } else { -margin });
        let (want_iou, want_dice) = brute_force(&pred, &truth);
        let got_iou = iou(&logits, &mask(&truth), 0.5).unwrap();
        let got_dice = dice(&logits, &mask(&truth), 0.5).unwrap();
        prop_assert_eq!(got_iou, want_iou);
        prop_assert_eq!(got_dice, want_dice);
        prop_assert!((got_dice - 2.0 * got_iou / (1.0 + got_iou)).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>()) {
        let m = model(seed);
        let bytes = encode(&m);
        let (config, params) = decode(&bytes).unwrap();
        prop_assert!(config.contains("model.stage_widths = 4,8,8,16,16"));
        let back = Model::from_parts(m.graph().clone(), params).unwrap();
        prop_assert_eq!(encode(&back), bytes);
    }
}

#[test]
fn metrics_average_over_batch_items() {
    let truth = Tensor4::from_fn(Shape4::new(2, 1, 2, 2), |n, _, h, _| (n == 0 && h == 0) as u8 as f32);
    let logits = Tensor4::from_fn(Shape4::new(2, 1, 2, 2), |_, _, h, w| if h == 0 && w == 0 { 3.0 } else { -3.0 });
    let o = overlaps(&logits, &truth, 0.5).unwrap();
    assert_eq!(o[0].iou(), 0.5);
    assert_eq!(o[1].iou(), 0.0);
    assert_eq!(iou(&logits, &truth, 0.5).unwrap(), 0.25);
}

#[test]
fn zero_learning_rate_keeps_parameters_bit_identical() {
    let ds = data();
    let m = model(3);
    let before = m.params().fingerprint();
    let (after, history) = train(m, &ds, &ds, &quick(2, 0.0), &AugmentConfig::default()).unwrap();
    assert_eq!(after.params().fingerprint(), before);
    assert_eq!(history.len(), 2);
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let ds = data();
    let run = || {
        let (m, h) = train(model(11), &ds, &ds, &quick(2, 1e-3), &AugmentConfig::default()).unwrap();
        (encode(&m), h.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>())
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert!(a == b, "checkpoints differ");
    let (c, _) = {
        let (m, h) = train(model(12), &ds, &ds, &quick(2, 1e-3), &AugmentConfig::default()).unwrap();
        (encode(&m), h)
    };
    assert!(a != c, "a different seed should change the run");
}

#[test]
fn training_lowers_the_loss() {
    let ds = data();
    let cfg = TrainConfig {
        augment: false,
        ..quick(8, 3e-3)
    };
    let (_, h) = train(model(0), &ds, &ds, &cfg, &AugmentConfig::default()).unwrap();
    assert!(h.last().unwrap().loss < h[0].loss, "{h:?}");
}

#[test]
fn fit_saves_best_and_validates_on_schedule() {
    let ds = data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        eval_every: 2,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..quick(3, 1e-3)
    };
    let mut t = Trainer::new(model(1), cfg, AugmentConfig::default()).unwrap();
    let mut seen = Vec::new();
    let h = t.fit(&ds, &ds, |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    assert!(h[0].iou.is_none() && h[1].iou.is_some() && h[2].iou.is_some());
    assert_eq!(t.steps(), 6);
    let best = load_checkpoint(&dir.path().join("best.ckpt")).unwrap();
    let (best_iou, _) = evaluate(&best, &ds, 0.5).unwrap();
    assert_eq!(Some(best_iou), t.best_iou());
}

#[test]
fn evaluation_does_not_touch_parameters() {
    let ds = data();
    let m = model(5);
    let before = m.params().fingerprint();
    let a = evaluate(&m, &ds, 0.5).unwrap();
    let b = evaluate(&m, &ds, 0.5).unwrap();
    assert_eq!(a, b);
    assert_eq!(m.params().fingerprint(), before);
}

#[test]
fn saved_checkpoint_reloads_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model(9);
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    let x = Tensor4::full(Shape4::new(1, 3, 32, 32), 0.25);
    assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
}

#[test]
fn mismatched_graph_is_rejected_with_the_shape() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model(0), &path).unwrap();
    let wider = ModelConfig {
        stage_widths: vec![8, 8, 8, 16, 16],
        ..small()
    };
    let err = load_into(&path, ModelGraph::mfennet(&wider).unwrap()).unwrap_err();
    let text = err.to_string();
    assert!(matches!(err, Error::ParamShape { .. }), "{text}");
    assert!(text.contains("enc0") && text.contains('4') && text.contains('8'), "{text}");
}

#[test]
fn corrupted_checkpoints_fail_cleanly() {
    let bytes = encode(&model(0));
    let mut wrong_version = bytes.clone();
    wrong_version[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        decode(&wrong_version),
        Err(Error::VersionMismatch { found, expected }) if found == FORMAT_VERSION + 1 && expected == FORMAT_VERSION
    ));
    assert!(matches!(decode(b"PNG\0rest"), Err(Error::BadMagic)));
    for cut in [3, 6, 10, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode(&bytes[..cut]), Err(Error::BadMagic | Error::Truncated { .. })), "cut {cut}");
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let at = text.find("enc0").unwrap();
    let mut renamed = bytes.clone();
    renamed[at..at + 4].copy_from_slice(b"encX");
    std::fs::write(&path, &renamed).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(err.to_string().contains("encX"), "{err}");
}

#[test]
fn non_finite_loss_stops_training() {
    let mut m = model(0);
    for p in m.params_mut().iter_mut() {
        p.value.iter_mut().for_each(|v| *v = f32::NAN);
    }
    let mut t = Trainer::new(m, quick(1, 1e-3), AugmentConfig::default()).unwrap();
    let err = t.train_epoch(&data(), 1).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    assert!(err.to_string().contains("epoch 1"), "{err}");
}

#[test]
fn invalid_recipes_are_rejected() {
    for cfg in [quick(0, 1e-3), quick(1, -1.0), quick(1, f64::NAN), TrainConfig { batch_size: 0, ..quick(1, 1e-3) }] {
        assert!(Trainer::new(model(0), cfg, AugmentConfig::default()).is_err());
    }
}
