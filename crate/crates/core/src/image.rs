//! Grayscale images with intensities in [0,1] and binary PGM (P5) I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("data length {len} does not match {width}x{height}")]
    BadLength { len: usize, width: usize, height: usize },
    #[error("intensity {value} at pixel {index} outside [0,1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("image dimensions must be positive")]
    ZeroSize,
    #[error("pgm parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major grayscale image, intensities in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroSize);
        }
        if data.len() != width * height {
            return Err(ImageError::BadLength { len: data.len(), width, height });
        }
        for (index, &value) in data.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(ImageError::OutOfRange { index, value });
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at a continuous position, coordinates clamped to the
    /// valid pixel-center range.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bot = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Quantizes to the 8-bit grid used by the PGM container, so in-memory
    /// intensities equal what a write/read round-trip would produce.
    pub fn quantized(&self) -> GrayImage {
        let data = self.data.iter().map(|&v| quantize(v) as f64 / 255.0).collect();
        GrayImage { width: self.width, height: self.height, data }
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), ImageError> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self, ImageError> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        parse_pgm(&bytes)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // with '#' comments running to end of line.
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Parse("truncated header".into()));
        }
        fields.push(&bytes[start..pos]);
    }
    // Exactly one whitespace byte separates the maxval from the raster.
    pos += 1;

    if fields[0] != b"P5" {
        return Err(ImageError::Parse("not a binary PGM (P5)".into()));
    }
    let dim = |b: &[u8], what: &str| -> Result<usize, ImageError> {
        std::str::from_utf8(b)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Parse(format!("bad {what}")))
    };
    let width = dim(fields[1], "width")?;
    let height = dim(fields[2], "height")?;
    let maxval = dim(fields[3], "maxval")?;
    if maxval != 255 {
        return Err(ImageError::Parse(format!("unsupported maxval {maxval}")));
    }
    let raster = bytes
        .get(pos..pos + width * height)
        .ok_or_else(|| ImageError::Parse("truncated raster".into()))?;
    GrayImage::new(width, height, raster.iter().map(|&b| b as f64 / 255.0).collect())
}
