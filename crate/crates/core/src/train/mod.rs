//! Training loop, evaluation and checkpoints.

mod checkpoint;
mod metrics;

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{decode, encode, load_checkpoint, load_into, save_checkpoint, FORMAT_VERSION, MAGIC};
pub use metrics::{dice, iou, overlaps, Overlap, DEFAULT_THRESHOLD};

use crate::data::{augment, collate, AugmentConfig, Batcher, Dataset};
use crate::engine::{bce_with_logits, AdamState, Tape, Tensor4};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment: bool,
    /// Validate every this many epochs (the last epoch always validates).
    pub eval_every: usize,
    /// Where `best.ckpt` goes; `None` keeps checkpoints in memory only.
    pub checkpoint_dir: Option<PathBuf>,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            lr: 1e-4,
            seed: 0,
            augment: true,
            eval_every: 1,
            checkpoint_dir: None,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("train.eval_every must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("train.threshold must be in (0,1), got {}", self.threshold)));
        }
        Ok(())
    }
}

/// One history row. `iou`/`dice` are `None` on epochs without validation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss: f64,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub seconds: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "epoch,loss,iou,dice,seconds";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{},{},{:.3}",
            self.epoch,
            self.loss,
            opt(self.iou),
            opt(self.dice),
            self.seconds
        )
    }
}

/// Mean per-image `(IoU, Dice)`; batches run in sequence.
pub fn evaluate(model: &Model<f32>, ds: &Dataset, threshold: f64) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let mut all = Vec::with_capacity(ds.len());
    for chunk in ds.samples().chunks(8) {
        let (images, masks) = collate(chunk)?;
        let logits = model.predict(&images)?;
        all.extend(overlaps(&logits, &masks, threshold)?);
    }
    let n = all.len() as f64;
    Ok((
        all.iter().map(Overlap::iou).sum::<f64>() / n,
        all.iter().map(Overlap::dice).sum::<f64>() / n,
    ))
}

/// Owns a model and its optimizer state for one run.
#[derive(Debug)]
pub struct Trainer {
    model: Model<f32>,
    adam: AdamState,
    cfg: TrainConfig,
    augment_cfg: AugmentConfig,
    augment_rng: ChaCha8Rng,
    steps: u64,
    best_iou: Option<f64>,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig, augment_cfg: AugmentConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(cfg.lr)?;
        let mut augment_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        augment_rng.set_stream(1);
        Ok(Trainer {
            model,
            adam,
            cfg,
            augment_cfg,
            augment_rng,
            steps: 0,
            best_iou: None,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn best_iou(&self) -> Option<f64> {
        self.best_iou
    }

    /// One optimizer step on a batch; returns the mean BCE before the update.
    pub fn step(&mut self, images: &Tensor4<f32>, masks: &Tensor4<f32>) -> Result<f64> {
        self.step_with_logits(images, masks).map(|(loss, _)| loss)
    }

    /// [`Trainer::step`], also returning the batch logits computed before
    /// the update.
    pub fn step_with_logits(&mut self, images: &Tensor4<f32>, masks: &Tensor4<f32>) -> Result<(f64, Tensor4<f32>)> {
        let mut tape = Tape::new();
        let x = tape.input(images.clone());
        let out = self.model.forward(&mut tape, x)?;
        let (loss, grad) = bce_with_logits(tape.value(out.logits), masks)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("step {}", self.steps + 1),
            });
        }
        tape.backward(out.logits, grad, self.model.params_mut())?;
        self.adam.step(self.model.params_mut());
        self.steps += 1;
        Ok((loss, tape.value(out.logits).clone()))
    }

    /// Shuffle, augment and step through one epoch; returns the mean batch
    /// loss.
    pub fn train_epoch(&mut self, ds: &Dataset, epoch: usize) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::Dataset("cannot train on an empty dataset".into()));
        }
        let batcher = Batcher::new(ds, self.cfg.batch_size, self.cfg.seed)?;
        let batches = batcher.index_batches(epoch as u64);
        let mut total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let samples: Vec<_> = idx
                .iter()
                .map(|&i| {
                    let s = &ds.samples()[i];
                    match self.cfg.augment {
                        true => augment(s, &self.augment_cfg, &mut self.augment_rng),
                        false => s.clone(),
                    }
                })
                .collect();
            let (images, masks) = collate(&samples)?;
            total += self.step(&images, &masks).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss {
                    context: format!("epoch {epoch} batch {b}"),
                },
                e => e,
            })?;
        }
        Ok(total / batches.len() as f64)
    }

    /// Full run: every epoch trains, validates on schedule, keeps the best
    /// checkpoint and hands each history row to `sink` as it is produced.
    pub fn fit(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        mut sink: impl FnMut(&MetricsRecord),
    ) -> Result<Vec<MetricsRecord>> {
        let start = Instant::now();
        let mut history = Vec::with_capacity(self.cfg.epochs);
        for epoch in 1..=self.cfg.epochs {
            let loss = self.train_epoch(train, epoch)?;
            let validate = epoch % self.cfg.eval_every == 0 || epoch == self.cfg.epochs;
            let (iou, dice) = match validate && !val.is_empty() {
                true => {
                    let (i, d) = evaluate(&self.model, val, self.cfg.threshold)?;
                    (Some(i), Some(d))
                }
                false => (None, None),
            };
            if let Some(i) = iou {
                if self.best_iou.is_none_or(|b| i > b) {
                    self.best_iou = Some(i);
                    if let Some(dir) = &self.cfg.checkpoint_dir {
                        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                        save_checkpoint(&self.model, &dir.join("best.ckpt"))?;
                    }
                }
            }
            let record = MetricsRecord {
                epoch,
                loss,
                iou,
                dice,
                seconds: start.elapsed().as_secs_f64(),
            };
            sink(&record);
            history.push(record);
        }
        Ok(history)
    }
}

/// Train `model` with `cfg` and return it with its history.
pub fn train(
    model: Model<f32>,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
    augment_cfg: &AugmentConfig,
) -> Result<(Model<f32>, Vec<MetricsRecord>)> {
    let mut t = Trainer::new(model, cfg.clone(), augment_cfg.clone())?;
    let history = t.fit(train_ds, val_ds, |_| {})?;
    Ok((t.into_model(), history))
}
