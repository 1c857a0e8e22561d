use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Sample, Source, Split};
use crate::engine::{Shape4, Tensor4};
use crate::error::{Error, Result};

/// Filled ellipse in pixel coordinates; pixel `(x, y)` is sampled at its
/// center `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    /// Rotation of the `rx` axis, radians.
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        u * u + v * v <= 1.0
    }
}

/// Foreground fraction bounds enforced by rejection.
pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.6;

fn draw_shapes(size: usize, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let s = size as f64;
    let count = rng.gen_range(1..=3);
    (0..count)
        .map(|_| Ellipse {
            cx: rng.gen_range(0.15..0.85) * s,
            cy: rng.gen_range(0.15..0.85) * s,
            rx: rng.gen_range(0.07..0.28) * s,
            ry: rng.gen_range(0.07..0.28) * s,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            intensity: rng.gen_range(0.65..0.9),
        })
        .collect()
}

fn render(size: usize, shapes: &[Ellipse], rng: &mut ChaCha8Rng) -> (Tensor4<f32>, Tensor4<f32>) {
    let mask = Tensor4::from_fn(Shape4::new(1, 1, size, size), |_, _, y, x| {
        shapes.iter().any(|e| e.contains(x, y)) as u8 as f32
    });
    let tint: [f64; 3] = [rng.gen_range(0.8..1.0), rng.gen_range(0.8..1.0), rng.gen_range(0.8..1.0)];
    let (fx, fy, phase) = (
        rng.gen_range(1.0..4.0),
        rng.gen_range(1.0..4.0),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let mut noise = vec![0.0f64; 3 * size * size];
    noise.iter_mut().for_each(|v| *v = rng.gen_range(-0.05..0.05));
    let image = Tensor4::from_fn(Shape4::new(1, 3, size, size), |_, c, y, x| {
        let u = x as f64 / size as f64;
        let v = y as f64 / size as f64;
        let texture = 0.25
            + 0.08 * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin()
            + 0.04 * (std::f64::consts::TAU * 3.0 * fx * u * v).cos();
        let base = shapes
            .iter()
            .rev()
            .find(|e| e.contains(x, y))
            .map_or(texture, |e| e.intensity);
        let n = noise[(c * size + y) * size + x];
        ((base * tint[c] + n).clamp(0.0, 1.0)) as f32
    });
    (image, mask)
}

/// As [`synth_dataset`], also returning the ellipses behind every mask.
pub fn synth_dataset_with_shapes(
    n: usize,
    size: usize,
    seed: u64,
) -> Result<(Dataset, Vec<Vec<Ellipse>>)> {
    if n == 0 {
        return Err(Error::Dataset("synthetic dataset needs n >= 1".into()));
    }
    if size == 0 || !size.is_multiple_of(16) {
        return Err(Error::Dataset(format!(
            "synthetic image size must be a positive multiple of 16, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (size * size) as f64;
    let mut samples = Vec::with_capacity(n);
    let mut all_shapes = Vec::with_capacity(n);
    for i in 0..n {
        let shapes = loop {
            let shapes = draw_shapes(size, &mut rng);
            let fg = (0..size * size)
                .filter(|p| shapes.iter().any(|e| e.contains(p % size, p / size)))
                .count() as f64
                / pixels;
            if (MIN_FOREGROUND..MAX_FOREGROUND).contains(&fg) {
                break shapes;
            }
        };
        let (image, mask) = render(size, &shapes, &mut rng);
        samples.push(Sample {
            image,
            mask,
            id: format!("synth_{i:04}"),
        });
        all_shapes.push(shapes);
    }
    let ds = Dataset::new(samples, Split::All, Source::Synthetic { seed })?;
    Ok((ds, all_shapes))
}

/// `n` images of 1-3 filled ellipses over a textured background, fully
/// determined by `seed`.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    Ok(synth_dataset_with_shapes(n, size, seed)?.0)
}
