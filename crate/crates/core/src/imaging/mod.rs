//! Image ingestion, standardization and exposure QC.

mod exposure;
mod ops;
mod pipeline;
mod pnm;
mod splits;

pub use exposure::{classify_exposure, Exposure, ExposurePrototype, PROTOTYPES};
pub use ops::{intensity_histogram, resize_bilinear, standardize, to_grayscale, DEFAULT_SIDE};
pub use pipeline::{parallel_preprocess, preprocess_one, IndexedError, PreprocessOutput};
pub use pnm::{decode_image, encode_pgm, PgmDepth};
pub use splits::{organize_splits, Split, SplitReport};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("image format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("degenerate image: standard deviation {std:e} is too small to standardize")]
    Degenerate { std: f64 },
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Single channel image with intensities in `[0, 1]`, row major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::Invalid(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(ImagingError::Invalid(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(ImagingError::Invalid(format!("pixel {p} outside [0, 1]")));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Mean and population standard deviation of the intensities.
    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.pixels)
    }
}

/// A zero-mean, unit-variance image ready to feed the network.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub source_mean: f64,
    pub source_std: f64,
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
