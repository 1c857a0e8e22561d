//! Flat `key = value` run configuration with `model.`, `train.` and `data.`
//! sections. `#` starts a comment; blank lines are ignored.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::{Arch, ModelConfig, UNetConfig};
use crate::train::TrainConfig;

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Generated with [`crate::data::synth_dataset`].
    Synth,
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub size: usize,
    pub train_frac: f64,
    pub split_seed: u64,
    pub synth_n: usize,
    pub synth_seed: u64,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth,
            size: 256,
            train_frac: 0.8,
            split_seed: 0,
            synth_n: 16,
            synth_seed: 7,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub arch: ArchKind,
    pub model: ModelConfig,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ArchKind {
    #[default]
    MfenNet,
    UNet,
}

impl FromStr for ArchKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mfennet" => Ok(ArchKind::MfenNet),
            "unet" => Ok(ArchKind::UNet),
            _ => Err("expected `mfennet` or `unet`".into()),
        }
    }
}

impl Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArchKind::MfenNet => "mfennet",
            ArchKind::UNet => "unet",
        })
    }
}

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    let value = value.trim();
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| scalar(key, v)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn arch_kind(key: &str, value: &str) -> Result<ArchKind> {
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: {e}, got `{value}`")))
}

/// `model.*` keys shared by run configs and checkpoints.
fn set_model(arch: &mut ArchKind, m: &mut ModelConfig, u: &mut UNetConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "model.arch" => *arch = arch_kind(key, v)?,
        "model.stage_widths" => m.stage_widths = list(key, v)?,
        "model.blocks_per_stage" => m.blocks_per_stage = list(key, v)?,
        "model.mixer_kernel" => m.mixer_kernel = scalar(key, v)?,
        "model.ffn_ratio" => m.ffn_ratio = scalar(key, v)?,
        "model.spp_bins" => m.spp_bins = list(key, v)?,
        "model.norm_eps" => m.norm_eps = scalar(key, v)?,
        "model.mixer_subtract_input" => m.mixer_subtract_input = scalar(key, v)?,
        "model.in_channels" => {
            m.in_channels = scalar(key, v)?;
            u.in_channels = m.in_channels;
        }
        "model.out_channels" => {
            m.out_channels = scalar(key, v)?;
            u.out_channels = m.out_channels;
        }
        "model.unet_widths" => u.widths = list(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn model_entries(arch: ArchKind, m: &ModelConfig, u: &UNetConfig) -> Vec<(String, String)> {
    let mut e: Vec<(&str, String)> = vec![("model.arch", arch.to_string())];
    match arch {
        ArchKind::MfenNet => e.extend([
            ("model.stage_widths", join(&m.stage_widths)),
            ("model.blocks_per_stage", join(&m.blocks_per_stage)),
            ("model.mixer_kernel", m.mixer_kernel.to_string()),
            ("model.ffn_ratio", m.ffn_ratio.to_string()),
            ("model.spp_bins", join(&m.spp_bins)),
            ("model.norm_eps", m.norm_eps.to_string()),
            ("model.mixer_subtract_input", m.mixer_subtract_input.to_string()),
            ("model.in_channels", m.in_channels.to_string()),
            ("model.out_channels", m.out_channels.to_string()),
        ]),
        ArchKind::UNet => e.extend([
            ("model.unet_widths", join(&u.widths)),
            ("model.in_channels", u.in_channels.to_string()),
            ("model.out_channels", u.out_channels.to_string()),
        ]),
    }
    e.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn render(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Text form of an architecture, as stored in checkpoints.
pub fn arch_to_text(arch: &Arch) -> String {
    let entries = match arch {
        Arch::MfenNet(m) => model_entries(ArchKind::MfenNet, m, &UNetConfig::default()),
        Arch::UNet(u) => model_entries(ArchKind::UNet, &ModelConfig::default(), u),
    };
    render(&entries)
}

pub fn arch_from_text(text: &str) -> Result<Arch> {
    let (mut kind, mut m, mut u) = (ArchKind::default(), ModelConfig::default(), UNetConfig::default());
    for (k, v) in parse_lines(text)? {
        if !set_model(&mut kind, &mut m, &mut u, &k, &v)? {
            return Err(Error::UnknownKey(k));
        }
    }
    Ok(match kind {
        ArchKind::MfenNet => Arch::MfenNet(m),
        ArchKind::UNet => Arch::UNet(u),
    })
}

impl RunConfig {
    pub fn arch(&self) -> Arch {
        match self.arch {
            ArchKind::MfenNet => Arch::MfenNet(self.model.clone()),
            ArchKind::UNet => Arch::UNet(self.unet.clone()),
        }
    }

    /// Set one dotted key; unknown keys are an error naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if set_model(&mut self.arch, &mut self.model, &mut self.unet, key, value)? {
            return Ok(());
        }
        let (t, d, v) = (&mut self.train, &mut self.data, value);
        match key {
            "train.epochs" => t.epochs = scalar(key, v)?,
            "train.batch_size" => t.batch_size = scalar(key, v)?,
            "train.lr" => t.lr = scalar(key, v)?,
            "train.seed" => t.seed = scalar(key, v)?,
            "train.augment" => t.augment = scalar(key, v)?,
            "train.eval_every" => t.eval_every = scalar(key, v)?,
            "train.threshold" => t.threshold = scalar(key, v)?,
            "train.checkpoint_dir" => {
                t.checkpoint_dir = match v.trim() {
                    "" => None,
                    p => Some(PathBuf::from(p)),
                }
            }
            "data.source" => {
                d.source = match v.trim() {
                    "synth" => DataSource::Synth,
                    p => DataSource::Dir(PathBuf::from(p)),
                }
            }
            "data.size" => d.size = scalar(key, v)?,
            "data.train_frac" => d.train_frac = scalar(key, v)?,
            "data.split_seed" => d.split_seed = scalar(key, v)?,
            "data.synth_n" => d.synth_n = scalar(key, v)?,
            "data.synth_seed" => d.synth_seed = scalar(key, v)?,
            "data.hflip_prob" => d.augment.hflip_prob = scalar(key, v)?,
            "data.vflip_prob" => d.augment.vflip_prob = scalar(key, v)?,
            "data.crop_frac" => d.augment.crop_frac = scalar(key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let (t, d) = (&self.train, &self.data);
        let mut e = model_entries(self.arch, &self.model, &self.unet);
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let rest: Vec<(&str, String)> = vec![
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.augment", t.augment.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.threshold", t.threshold.to_string()),
            ("train.checkpoint_dir", path(&t.checkpoint_dir)),
            (
                "data.source",
                match &d.source {
                    DataSource::Synth => "synth".to_string(),
                    DataSource::Dir(p) => p.display().to_string(),
                },
            ),
            ("data.size", d.size.to_string()),
            ("data.train_frac", d.train_frac.to_string()),
            ("data.split_seed", d.split_seed.to_string()),
            ("data.synth_n", d.synth_n.to_string()),
            ("data.synth_seed", d.synth_seed.to_string()),
            ("data.hflip_prob", d.augment.hflip_prob.to_string()),
            ("data.vflip_prob", d.augment.vflip_prob.to_string()),
            ("data.crop_frac", d.augment.crop_frac.to_string()),
        ];
        e.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        e
    }

    /// Effective configuration in the file format; parsing it back yields an
    /// equal config.
    pub fn to_text(&self) -> String {
        render(&self.entries())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_lines(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// File, then overrides, in order. `env_seed` fills `train.seed` only
    /// when neither source sets it.
    pub fn resolve(file: Option<&str>, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let file_entries = file.map(parse_lines).transpose()?.unwrap_or_default();
        let mut seed_set = false;
        for (k, v) in file_entries.iter().chain(overrides) {
            cfg.set(k, v)?;
            seed_set |= k == "train.seed";
        }
        if let (false, Some(s)) = (seed_set, env_seed) {
            cfg.set("train.seed", s)
                .map_err(|_| Error::Config(format!("MFEN_SEED: cannot parse `{s}`")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.arch {
            ArchKind::MfenNet => self.model.validate()?,
            ArchKind::UNet => self.unet.validate()?,
        }
        self.train.validate()?;
        let d = &self.data;
        if d.size == 0 || !d.size.is_multiple_of(16) {
            return Err(Error::Config(format!("data.size must be a positive multiple of 16, got {}", d.size)));
        }
        if !(0.0..=1.0).contains(&d.train_frac) {
            return Err(Error::Config(format!("data.train_frac must be in [0,1], got {}", d.train_frac)));
        }
        if d.synth_n == 0 {
            return Err(Error::Config("data.synth_n must be >= 1".into()));
        }
        let a = &d.augment;
        if !(0.0..=1.0).contains(&a.hflip_prob) || !(0.0..=1.0).contains(&a.vflip_prob) {
            return Err(Error::Config("flip probabilities must be in [0,1]".into()));
        }
        if !(a.crop_frac > 0.0 && a.crop_frac <= 1.0) {
            return Err(Error::Config(format!("data.crop_frac must be in (0,1], got {}", a.crop_frac)));
        }
        Ok(())
    }
}
