//! Binary 8-bit PGM (`P5`) and PPM (`P6`).

use std::fs;
use std::path::Path;

use crate::engine::{Shape4, Tensor4};
use crate::error::{Error, Result};

/// Decoded raster, values scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    /// Interleaved, row-major.
    pub data: Vec<f32>,
}

impl Raster {
    /// `1 x channels x height x width`, planar.
    pub fn into_tensor(self) -> Tensor4<f32> {
        let (c, w) = (self.channels, self.width);
        Tensor4::from_fn(Shape4::new(1, c, self.height, w), |_, ch, y, x| {
            self.data[(y * w + x) * c + ch]
        })
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Option<usize> {
    loop {
        match bytes.get(*pos)? {
            b'#' => {
                while *bytes.get(*pos)? != b'\n' {
                    *pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()?.parse().ok()
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Raster> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad(path, "not a binary PGM/PPM (expected P5 or P6)")),
    };
    let mut pos = 2;
    let mut next = |what: &str| header_token(bytes, &mut pos).ok_or_else(|| bad(path, format!("bad {what}")));
    let width = next("width")?;
    let height = next("height")?;
    let maxval = next("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad(path, "zero-sized image"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad(path, format!("maxval {maxval} unsupported (8-bit only)")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let len = width * height * channels;
    let raster = bytes
        .get(start..start + len)
        .ok_or_else(|| bad(path, format!("raster truncated, need {len} bytes")))?;
    Ok(Raster {
        channels,
        width,
        height,
        data: raster.iter().map(|&b| (b as f32 / maxval as f32).min(1.0)).collect(),
    })
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

/// Encode item 0 of a 1- or 3-channel tensor in `[0, 1]`.
pub fn encode(t: &Tensor4<f32>) -> Result<Vec<u8>> {
    let s = t.shape();
    let magic = match s.c {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::InvalidArgument(format!(
                "PNM needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                let v = t.at(0, c, y, x);
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn write(path: &Path, t: &Tensor4<f32>) -> Result<()> {
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}
