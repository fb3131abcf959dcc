//! Seeded synthetic chest-film stand-ins.
//!
//! Each class owns one cell of a 4×4 grid. A positive label paints a disc
//! in that cell filled with a grating whose orientation and period are
//! specific to the class, over a graded, noisy background. The texture
//! keeps labels recoverable after global average pooling.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{render_metadata, DatasetError, LabelVector, LabeledSet, SampleRecord};
use crate::imaging::{encode_pgm, standardize, GrayImage, ImagingError, PgmDepth};
use crate::nn::NUM_CLASSES;

/// Seed of the held-out set that pairs with a training set of seed `seed`.
pub fn held_out_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x5eed)
}

/// Probability of each finding being present.
const PREVALENCE: f64 = 0.3;

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub record: SampleRecord,
    pub image: GrayImage,
}

pub fn render(labels: &LabelVector, side: usize, rng: &mut impl Rng) -> GrayImage {
    let cell = side as f64 / 4.0;
    let radius = cell * 0.45;
    let mut pixels = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let base = 0.25 + 0.2 * y as f64 / side as f64 + rng.random_range(-0.04..0.04);
            let (cx, cy) = ((x as f64 / cell) as usize, (y as f64 / cell) as usize);
            let k = cy.min(3) * 4 + cx.min(3);
            let mut v = base;
            if k < NUM_CLASSES && labels[k] == 1 {
                let dx = x as f64 + 0.5 - (cx as f64 + 0.5) * cell;
                let dy = y as f64 + 0.5 - (cy as f64 + 0.5) * cell;
                if dx * dx + dy * dy <= radius * radius {
                    let (theta, period) = grating(k);
                    let u = x as f64 * theta.cos() + y as f64 * theta.sin();
                    v += 0.1 + 0.15 * (1.0 + (TAU * u / period).sin());
                }
            }
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    GrayImage::new(side, side, pixels).expect("pixels clamped to [0, 1]")
}

/// Orientation (radians) and period (pixels) of class `k`'s texture:
/// seven orientations at two periods.
fn grating(k: usize) -> (f64, f64) {
    let theta = (k % 7) as f64 * std::f64::consts::PI / 7.0;
    let period = if k < 7 { 3.0 } else { 6.0 };
    (theta, period)
}

/// `n` samples; two consecutive images share a patient.
pub fn generate(n: usize, side: usize, seed: u64) -> Vec<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut labels = [0u8; NUM_CLASSES];
            for l in &mut labels {
                *l = u8::from(rng.random_bool(PREVALENCE));
            }
            let image = render(&labels, side, &mut rng);
            SyntheticSample {
                record: SampleRecord {
                    image_id: format!("img{i:05}.pgm"),
                    patient_id: format!("p{:04}", i / 2),
                    labels,
                    split: None,
                },
                image,
            }
        })
        .collect()
}

/// Standardized in-memory set of `n` synthetic images at `side × side`.
pub fn labeled_set(n: usize, side: usize, seed: u64) -> Result<LabeledSet, DatasetError> {
    let mut set = LabeledSet::new(side);
    for s in generate(n, side, seed) {
        set.push(s.record.image_id, standardize(&s.image)?, s.record.labels)?;
    }
    Ok(set)
}

/// Write `n` 8-bit PGMs and a `metadata.csv` into `dir`.
pub fn write_fixture(dir: &Path, n: usize, side: usize, seed: u64) -> Result<Vec<SampleRecord>, DatasetError> {
    let io = |path: &Path, source| ImagingError::Io {
        path: path.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let samples = generate(n, side, seed);
    for s in &samples {
        let path = dir.join(&s.record.image_id);
        std::fs::write(&path, encode_pgm(&s.image, PgmDepth::Eight)).map_err(|e| io(&path, e))?;
    }
    let records: Vec<SampleRecord> = samples.into_iter().map(|s| s.record).collect();
    let meta = dir.join("metadata.csv");
    std::fs::write(&meta, render_metadata(&records)).map_err(|e| io(&meta, e))?;
    Ok(records)
}
