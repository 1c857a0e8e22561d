use std::path::Path;
use std::process::{Command, Output};

use mfennet::data::pnm;
use mfennet::engine::{Shape4, Tensor4};

fn mfennet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfennet"))
        .args(args)
        .env_remove("MFEN_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: [&str; 16] = [
    "--model.stage_widths", "4,8,8,16,16",
    "--model.blocks_per_stage", "1,1,0,1,0",
    "--model.spp_bins", "1,2",
    "--data", "synth",
    "--size", "32",
    "--data.synth_n", "4",
    "--batch-size", "2",
    "--epochs", "2",
];

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend(TINY);
    args.extend(extra);
    mfennet(&args)
}

fn total_flops(csv_out: &str) -> f64 {
    let line = csv_out.lines().find(|l| l.starts_with("total,")).expect("csv total row");
    line.rsplit(',').next().unwrap().parse().unwrap()
}

#[test]
fn synth_then_eval_against_its_own_masks_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let o = mfennet(&["synth", "--n", "3", "--size", "32", "--seed", "2", "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("images/synth_0002.ppm").exists());
    let masks = data.join("masks");
    let o = mfennet(&["eval", "--data", data.to_str().unwrap(), "--pred-masks", masks.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "iou=1.000000 dice=1.000000 n=3");
}

#[test]
fn train_writes_artifacts_then_eval_and_predict_use_them() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train_tiny(&out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.txt", "init.ckpt", "best.ckpt", "final.ckpt", "history.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,loss,iou,dice,seconds"));
    assert_eq!(stdout(&o).trim(), history.trim());

    let data = dir.path().join("d");
    assert!(mfennet(&["synth", "--n", "2", "--size", "32", "--out", data.to_str().unwrap()]).status.success());
    let ckpt = out.join("final.ckpt");
    let o = mfennet(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("iou="), "{}", stdout(&o));

    let image = dir.path().join("odd.ppm");
    let t = Tensor4::from_fn(Shape4::new(1, 3, 24, 40), |_, c, h, w| ((c * 3 + h + w) % 7) as f32 / 7.0);
    pnm::write(&image, &t).unwrap();
    let pred = dir.path().join("pred");
    let o = mfennet(&["predict", "--checkpoint", ckpt.to_str().unwrap(), "--image", image.to_str().unwrap(), "--out", pred.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["odd_mask.pgm", "odd_prob.pgm"] {
        let r = pnm::read(&pred.join(f)).unwrap();
        assert_eq!((r.width, r.height, r.channels), (40, 24, 1), "{f}");
    }
    let mask = pnm::read(&pred.join("odd_mask.pgm")).unwrap();
    assert!(mask.data.iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn repeated_training_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train_tiny(&a, &["--seed", "4"]).status.success());
    assert!(train_tiny(&b, &["--seed", "4"]).status.success());
    assert_eq!(std::fs::read(a.join("final.ckpt")).unwrap(), std::fs::read(b.join("final.ckpt")).unwrap());
    let losses = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p.join("history.csv"))
            .unwrap()
            .lines()
            .map(|l| l.split(',').take(4).collect::<Vec<_>>().join(","))
            .collect()
    };
    assert_eq!(losses(&a), losses(&b));
}

#[test]
fn seed_env_var_is_a_fallback_only() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--out", out.to_str().unwrap()];
        args.extend(TINY);
        args.extend(["--epochs", "1"]);
        args.extend(extra);
        let o = Command::new(env!("CARGO_BIN_EXE_mfennet")).args(&args).env("MFEN_SEED", "77").output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(out.join("config.txt")).unwrap()
    };
    assert!(run(&dir.path().join("env"), &[]).contains("train.seed = 77"));
    assert!(run(&dir.path().join("flag"), &["--seed", "3"]).contains("train.seed = 3"));
}

#[test]
fn train_rejects_bad_arguments_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = train_tiny(&out, &["--model.depth", "3"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("model.depth"), "{}", stderr(&o));
    let o = train_tiny(&out, &["--size", "40"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("data.size"), "{}", stderr(&o));
    let o = train_tiny(&out, &["--data", dir.path().join("nowhere").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn count_reports_delta_and_scales() {
    let o = mfennet(&["count", "--model", "mfennet"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("reference 11.14M / 17.13G"), "{text}");
    assert!(text.contains("MAC_AS_ONE"));
    let unet = |input: &str| total_flops(&stdout(&mfennet(&["count", "--model", "unet", "--input", input])));
    assert_eq!(unet("256"), 4.0 * unet("128"));
    let two = stdout(&mfennet(&["count", "--model", "unet", "--convention", "mac-as-two"]));
    assert!(total_flops(&two) > 1.9 * unet("256"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.cfg");
    std::fs::write(&cfg, "model.blocks_per_stage = 0,0,0,0,0\n").unwrap();
    let o = mfennet(&["count", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(dir.path().join("count.csv")).unwrap().starts_with("name,params,flops"));
    assert!(!stdout(&o).contains(".block0."));
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let o = mfennet(&["gradcheck", "--size", "4", "--probes", "8", "--model-probes", "24"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("model"));
    let o = mfennet(&["gradcheck", "--size", "4", "--probes", "8", "--model-probes", "4", "--inject-fault", "channel_layernorm"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("channel_layernorm"), "{}", stderr(&o));
    let o = mfennet(&["gradcheck", "--inject-fault", "nonsense"]);
    assert!(!o.status.success());
}
