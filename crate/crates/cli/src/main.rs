use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mfennet::check::{run_suites, SuiteConfig, TOLERANCE};
use mfennet::complexity::{report, Convention, Reference, REFERENCE_MFENNET, REFERENCE_UNET};
use mfennet::config::{ArchKind, DataSource, RunConfig};
use mfennet::data::{
    self, binarize, load_dataset, pnm, probe_size, resize_bilinear, save_dataset, synth_dataset, Dataset,
};
use mfennet::engine::{inject_backward_fault, sigmoid, OpKind, Shape4, Tensor4};
use mfennet::model::{Model, ModelGraph};
use mfennet::train::{
    evaluate, load_checkpoint, overlaps, save_checkpoint, MetricsRecord, Overlap, Trainer,
};
use mfennet::Error;

#[derive(Parser)]
#[command(name = "mfennet", version, about = "MetaFormer-encoder U-Net for binary segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a config file plus `--section.key value` overrides.
    ///
    /// Shorthands: --data (data.source), --epochs, --lr, --seed,
    /// --batch-size, --size (data.size), --augment. `MFEN_SEED` sets
    /// train.seed when neither the file nor the overrides do.
    Train {
        /// `[--config FILE] [--out DIR] [--key value]...`
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "ARGS")]
        args: Vec<String>,
    },
    /// Print mean per-image IoU and Dice of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory (`images/`, `masks/`).
        #[arg(long)]
        data: PathBuf,
        /// Load size; defaults to the side of the first image.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Score saved `<id>.pgm` masks from this directory instead of a
        /// checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        pred_masks: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one image; writes `<stem>_mask.pgm` and `<stem>_prob.pgm`.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Parameter and FLOP report.
    Count {
        #[arg(long, value_enum, default_value_t = ModelArg::Mfennet)]
        model: ModelArg,
        /// Square input side.
        #[arg(long, default_value_t = 256)]
        input: usize,
        #[arg(long, value_enum, default_value_t = ConventionArg::MacAsOne)]
        convention: ConventionArg,
        /// Model section of a run config (`model.*` keys).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write `count.txt` and `count.csv` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient suites in f64; exits non-zero on failure.
    Gradcheck {
        /// Per-op input side; the network check rounds up to a multiple of 16.
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        probes: usize,
        #[arg(long, default_value_t = 240)]
        model_probes: usize,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write a synthetic dataset (`images/*.ppm`, `masks/*.pgm`).
    Synth {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Mfennet,
    Unet,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    MacAsOne,
    MacAsTwo,
}

type CliResult<T = ()> = Result<T, String>;

fn err(e: Error) -> String {
    e.to_string()
}

fn env_seed() -> Option<String> {
    std::env::var("MFEN_SEED").ok()
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| format!("{}: {e}", path.display()))
}

const SHORTHANDS: [(&str, &str); 7] = [
    ("data", "data.source"),
    ("epochs", "train.epochs"),
    ("lr", "train.lr"),
    ("seed", "train.seed"),
    ("batch-size", "train.batch_size"),
    ("size", "data.size"),
    ("augment", "train.augment"),
];

struct TrainArgs {
    config: Option<PathBuf>,
    out: PathBuf,
    overrides: Vec<(String, String)>,
}

fn parse_train_args(args: &[String]) -> CliResult<TrainArgs> {
    let mut parsed = TrainArgs {
        config: None,
        out: PathBuf::from("out"),
        overrides: Vec::new(),
    };
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let flag = arg
            .strip_prefix("--")
            .ok_or_else(|| format!("unexpected argument `{arg}` (expected --key value)"))?;
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| format!("--{flag} needs a value"))?;
                (flag.to_string(), v.clone())
            }
        };
        match key.as_str() {
            "config" => parsed.config = Some(PathBuf::from(value)),
            "out" => parsed.out = PathBuf::from(value),
            k => {
                let key = SHORTHANDS
                    .iter()
                    .find(|(short, _)| *short == k)
                    .map_or(k, |(_, long)| long);
                parsed.overrides.push((key.to_string(), value));
            }
        }
    }
    Ok(parsed)
}

fn load_data(cfg: &RunConfig) -> CliResult<Dataset> {
    match &cfg.data.source {
        DataSource::Synth => synth_dataset(cfg.data.synth_n, cfg.data.size, cfg.data.synth_seed).map_err(err),
        DataSource::Dir(dir) => load_dataset(dir, cfg.data.size).map_err(err),
    }
}

fn cmd_train(args: &[String]) -> CliResult {
    let a = parse_train_args(args)?;
    let file = match &a.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?),
        None => None,
    };
    let mut cfg = RunConfig::resolve(file.as_deref(), &a.overrides, env_seed().as_deref()).map_err(err)?;
    if cfg.train.checkpoint_dir.is_none() {
        cfg.train.checkpoint_dir = Some(a.out.clone());
    }
    let ds = load_data(&cfg)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("config.txt"), cfg.to_text())?;

    let (train_ds, mut val_ds) = data::split(&ds, cfg.data.train_frac, cfg.data.split_seed).map_err(err)?;
    if train_ds.is_empty() {
        return Err("training split is empty; raise data.train_frac".into());
    }
    if val_ds.is_empty() {
        eprintln!("validation split is empty; validating on the training split");
        val_ds = train_ds.clone();
    }
    let graph = ModelGraph::build(&cfg.arch()).map_err(err)?;
    graph
        .infer_shapes(Shape4::new(1, cfg.arch().in_channels(), cfg.data.size, cfg.data.size))
        .map_err(err)?;
    let model = Model::new(graph, cfg.train.seed);
    save_checkpoint(&model, &a.out.join("init.ckpt")).map_err(err)?;

    let history_path = a.out.join("history.csv");
    let mut history = fs::File::create(&history_path).map_err(|e| format!("{}: {e}", history_path.display()))?;
    writeln!(history, "{}", MetricsRecord::CSV_HEADER).map_err(|e| e.to_string())?;
    println!("{}", MetricsRecord::CSV_HEADER);
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.data.augment.clone()).map_err(err)?;
    let mut io_error = None;
    let result = trainer.fit(&train_ds, &val_ds, |r| {
        let row = r.to_csv();
        println!("{row}");
        if let Err(e) = writeln!(history, "{row}").and_then(|_| history.flush()) {
            io_error.get_or_insert(e);
        }
    });
    if let Some(e) = io_error {
        return Err(format!("{}: {e}", history_path.display()));
    }
    result.map_err(err)?;
    save_checkpoint(trainer.model(), &a.out.join("final.ckpt")).map_err(err)?;
    Ok(())
}

fn cmd_eval(
    checkpoint: Option<PathBuf>,
    dir: &Path,
    size: Option<usize>,
    threshold: f64,
    pred_masks: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CliResult {
    let size = match size {
        Some(s) => s,
        None => probe_size(dir).map_err(err)?,
    };
    let ds = load_dataset(dir, size).map_err(err)?;
    let (iou, dice) = match (checkpoint, pred_masks) {
        (_, Some(pred_dir)) => score_masks(&ds, &pred_dir)?,
        (Some(ckpt), None) => evaluate(&load_checkpoint(&ckpt).map_err(err)?, &ds, threshold).map_err(err)?,
        (None, None) => return Err("eval needs --checkpoint or --pred-masks".into()),
    };
    let line = format!("iou={iou:.6} dice={dice:.6} n={}", ds.len());
    println!("{line}");
    if let Some(out) = out {
        create_dir(&out)?;
        write_file(&out.join("eval.txt"), format!("{line}\n"))?;
    }
    Ok(())
}

/// Binary masks on disk as confident logits, scored like a model.
fn score_masks(ds: &Dataset, pred_dir: &Path) -> CliResult<(f64, f64)> {
    let mut all: Vec<Overlap> = Vec::new();
    for s in ds.samples() {
        let path = pred_dir.join(format!("{}.pgm", s.id));
        let raster = pnm::read(&path).map_err(err)?;
        let shape = s.mask.shape();
        let pred = data::resize_mask(&raster.into_tensor(), shape.h, shape.w);
        let logits = pred.map(|v| if v == 1.0 { 20.0 } else { -20.0 });
        all.extend(overlaps(&logits, &s.mask, 0.5).map_err(err)?);
    }
    let n = all.len() as f64;
    Ok((
        all.iter().map(Overlap::iou).sum::<f64>() / n,
        all.iter().map(Overlap::dice).sum::<f64>() / n,
    ))
}

fn cmd_predict(checkpoint: &Path, image: &Path, out: &Path, threshold: f64) -> CliResult {
    let model = load_checkpoint(checkpoint).map_err(err)?;
    let raster = pnm::read(image).map_err(err)?;
    let (h, w) = (raster.height, raster.width);
    let mut x = raster.into_tensor();
    if x.shape().c == 1 {
        let g = x.clone();
        x = Tensor4::from_fn(g.shape().with_c(3), |n, _, y, xx| g.at(n, 0, y, xx));
    }
    let (ph, pw) = (h.div_ceil(16) * 16, w.div_ceil(16) * 16);
    let input = resize_bilinear(&x, ph, pw);
    let logits = model.predict(&input).map_err(err)?;
    let prob = resize_bilinear(&logits.map(sigmoid), h, w);
    let mask = prob.map(|p| if f64::from(p) > threshold { 1.0 } else { 0.0 });
    create_dir(out)?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("pred");
    let mask_path = out.join(format!("{stem}_mask.pgm"));
    pnm::write(&mask_path, &binarize(&mask)).map_err(err)?;
    pnm::write(&out.join(format!("{stem}_prob.pgm")), &prob).map_err(err)?;
    println!("{}", mask_path.display());
    Ok(())
}

fn cmd_count(
    model: ModelArg,
    input: usize,
    convention: ConventionArg,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CliResult {
    let mut cfg = match &config {
        Some(p) => RunConfig::parse(&fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?)
            .map_err(err)?,
        None => RunConfig::default(),
    };
    cfg.arch = match model {
        ModelArg::Mfennet => ArchKind::MfenNet,
        ModelArg::Unet => ArchKind::UNet,
    };
    let convention = match convention {
        ConventionArg::MacAsOne => Convention::MacAsOne,
        ConventionArg::MacAsTwo => Convention::MacAsTwo,
    };
    let arch = cfg.arch();
    let graph = ModelGraph::build(&arch).map_err(err)?;
    let r = report(&graph, Shape4::new(1, arch.in_channels(), input, input), convention).map_err(err)?;
    let reference: &Reference = match model {
        ModelArg::Mfennet => &REFERENCE_MFENNET,
        ModelArg::Unet => &REFERENCE_UNET,
    };
    let mut text = r.to_table();
    if input == 256 {
        let (dp, df) = r.delta(reference);
        text.push_str(&format!(
            "reference {:.2}M / {:.2}G: params delta {:+.2}%, FLOPs delta {:+.2}% ({})\n",
            reference.params / 1e6,
            reference.flops / 1e9,
            100.0 * dp,
            100.0 * df,
            convention.name()
        ));
    } else {
        text.push_str("reference figures are for 256x256 inputs; no delta at this size\n");
    }
    let csv = r.to_csv();
    print!("{text}\n{csv}");
    if let Some(out) = out {
        create_dir(&out)?;
        write_file(&out.join("count.txt"), &text)?;
        write_file(&out.join("count.csv"), &csv)?;
    }
    Ok(())
}

fn cmd_gradcheck(size: usize, seed: u64, probes: usize, model_probes: usize, fault: Option<String>) -> CliResult {
    if let Some(name) = &fault {
        let kind = OpKind::from_name(name).ok_or_else(|| format!("unknown op `{name}`"))?;
        inject_backward_fault(Some(kind));
    }
    let cfg = SuiteConfig {
        size,
        seed,
        probes_per_op: probes,
        model_probes,
        model: None,
    };
    let results = run_suites(&cfg).map_err(err)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<20} max_rel_error {:.3e}  {status}", r.name, r.max_rel_error());
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all suites below {TOLERANCE:e}");
        Ok(())
    } else {
        Err(format!("gradient check failed for: {}", failed.join(", ")))
    }
}

fn cmd_synth(n: usize, size: usize, seed: Option<u64>, out: &Path) -> CliResult {
    let seed = match seed {
        Some(s) => s,
        None => match env_seed() {
            Some(s) => s.parse().map_err(|_| format!("MFEN_SEED: cannot parse `{s}`"))?,
            None => 7,
        },
    };
    let ds = synth_dataset(n, size, seed).map_err(err)?;
    save_dataset(&ds, out).map_err(err)?;
    println!("wrote {n} samples ({size}x{size}, seed {seed}) to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { args } => cmd_train(&args),
        Cmd::Eval {
            checkpoint,
            data,
            size,
            threshold,
            pred_masks,
            out,
        } => cmd_eval(checkpoint, &data, size, threshold, pred_masks, out),
        Cmd::Predict {
            checkpoint,
            image,
            out,
            threshold,
        } => cmd_predict(&checkpoint, &image, &out, threshold),
        Cmd::Count {
            model,
            input,
            convention,
            config,
            out,
        } => cmd_count(model, input, convention, config, out),
        Cmd::Gradcheck {
            size,
            seed,
            probes,
            model_probes,
            inject_fault,
        } => cmd_gradcheck(size, seed, probes, model_probes, inject_fault),
        Cmd::Synth { n, size, seed, out } => cmd_synth(n, size, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
