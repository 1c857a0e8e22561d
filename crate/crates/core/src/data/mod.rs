//! Image/mask datasets on disk (`images/*.ppm`, `masks/*.pgm`), transforms,
//! a synthetic generator and seeded batching.
//!
//! Only binary 8-bit PPM/PGM are read; convert PNG or JPEG first, e.g.
//! `convert in.png out.ppm`.

pub mod pnm;
mod synth;
mod transform;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use synth::{synth_dataset, synth_dataset_with_shapes, Ellipse, MAX_FOREGROUND, MIN_FOREGROUND};
pub use transform::{
    augment, binarize, crop, flip_horizontal, flip_vertical, resize_bilinear, resize_mask,
    resize_nearest, AugmentConfig,
};

use crate::engine::Tensor4;
use crate::error::{Error, Result};

/// One image (`1x3xHxW` in `[0,1]`) and its binary mask (`1x1xHxW`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor4<f32>,
    pub mask: Tensor4<f32>,
    pub id: String,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let (i, m) = (self.image.shape(), self.mask.shape());
        if i.n != 1 || i.c != 3 || m.n != 1 || m.c != 1 || (i.h, i.w) != (m.h, m.w) {
            return Err(Error::Dataset(format!(
                "sample `{}`: image {i} and mask {m} do not form a 1x3xHxW / 1x1xHxW pair",
                self.id
            )));
        }
        if !self.image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Dataset(format!("sample `{}`: image outside [0,1]", self.id)));
        }
        if !self.mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::Dataset(format!("sample `{}`: mask is not binary", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Dir(PathBuf),
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    pub split: Split,
    pub source: Source,
}

impl Dataset {
    /// Validates every sample and id uniqueness.
    pub fn new(samples: Vec<Sample>, split: Split, source: Source) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            s.validate()?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(Dataset {
            samples,
            split,
            source,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    fn subset(&self, idx: &[usize], split: Split) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            split,
            source: self.source.clone(),
        }
    }
}

fn list(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn load_image(path: &Path, size: usize) -> Result<Tensor4<f32>> {
    let raster = pnm::read(path)?;
    let t = match raster.channels {
        3 => raster.into_tensor(),
        _ => {
            let g = raster.into_tensor();
            let s = g.shape();
            Tensor4::from_fn(s.with_c(3), |n, _, y, x| g.at(n, 0, y, x))
        }
    };
    Ok(resize_bilinear(&t, size, size))
}

fn load_mask(path: &Path, size: usize) -> Result<Tensor4<f32>> {
    let raster = pnm::read(path)?;
    if raster.channels != 1 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            reason: "mask must be a single-channel PGM".into(),
        });
    }
    Ok(resize_mask(&raster.into_tensor(), size, size))
}

/// Load `dir/images/*.ppm` with `dir/masks/*.pgm` matched by basename,
/// resized to `size x size`.
pub fn load_dataset(dir: &Path, size: usize) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("data directory {} not found", dir.display())));
    }
    if size == 0 {
        return Err(Error::Dataset("size must be >= 1".into()));
    }
    let images = list(&dir.join("images"), "ppm")?;
    let masks = list(&dir.join("masks"), "pgm")?;
    let orphans: Vec<String> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .map(|k| format!("images/{k}.ppm"))
        .chain(
            masks
                .keys()
                .filter(|k| !images.contains_key(*k))
                .map(|k| format!("masks/{k}.pgm")),
        )
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Dataset(format!(
            "unmatched files in {}: {}",
            dir.display(),
            orphans.join(", ")
        )));
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("no samples found in {}", dir.display())));
    }
    let samples = images
        .par_iter()
        .map(|(id, img)| {
            Ok(Sample {
                image: load_image(img, size)?,
                mask: load_mask(&masks[id], size)?,
                id: id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, Split::All, Source::Dir(dir.to_path_buf()))
}

/// Side of the first image in `dir/images` (by basename order), for
/// loading a dataset at its native square size.
pub fn probe_size(dir: &Path) -> Result<usize> {
    let images = list(&dir.join("images"), "ppm")?;
    let (_, first) = images
        .iter()
        .next()
        .ok_or_else(|| Error::Dataset(format!("no samples found in {}", dir.display())))?;
    let r = pnm::read(first)?;
    Ok(r.width.max(r.height))
}

/// Write the on-disk layout read by [`load_dataset`].
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in ds.samples() {
        pnm::write(&dir.join("images").join(format!("{}.ppm", s.id)), &s.image)?;
        pnm::write(&dir.join("masks").join(format!("{}.pgm", s.id)), &s.mask)?;
    }
    Ok(())
}

/// Seeded shuffle, then the first `round(len * train_frac)` samples train.
pub fn split(ds: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.is_empty() {
        return Err(Error::Dataset("cannot split an empty dataset".into()));
    }
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must be in [0,1], got {train_frac}"
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = (ds.len() as f64 * train_frac).round() as usize;
    Ok((ds.subset(&idx[..k], Split::Train), ds.subset(&idx[k..], Split::Val)))
}

/// Stack samples into `(images bx3xHxW, masks bx1xHxW)`.
pub fn collate<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
    let (images, masks): (Vec<_>, Vec<_>) = samples.into_iter().map(|s| (&s.image, &s.mask)).unzip();
    Ok((Tensor4::stack(&images)?, Tensor4::stack(&masks)?))
}

/// One mini-batch and the dataset indices it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor4<f32>,
    pub masks: Tensor4<f32>,
    pub indices: Vec<usize>,
}

/// Seeded per-epoch shuffling; the final partial batch is kept.
#[derive(Debug, Clone)]
pub struct Batcher<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
}

impl<'a> Batcher<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(Batcher {
            dataset,
            batch_size,
            seed,
        })
    }

    /// Visiting order for `epoch`.
    pub fn order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut idx: Vec<usize> = (0..self.dataset.len()).collect();
        idx.shuffle(&mut rng);
        idx
    }

    pub fn index_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        self.order(epoch).chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Batch> + 'a {
        let ds = self.dataset;
        self.index_batches(epoch).into_iter().map(move |indices| {
            let (images, masks) = collate(indices.iter().map(|&i| &ds.samples()[i]))
                .expect("dataset samples share one shape");
            Batch {
                images,
                masks,
                indices,
            }
        })
    }
}
