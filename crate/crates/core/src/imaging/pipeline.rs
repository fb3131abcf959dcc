use rayon::prelude::*;

use super::{decode_image, resize_bilinear, standardize, ImagingError, StandardizedImage};

#[derive(Debug)]
pub struct IndexedError {
    pub index: usize,
    pub error: ImagingError,
}

#[derive(Debug, Default)]
pub struct PreprocessOutput {
    /// Successfully processed images with their input index, in input order.
    pub images: Vec<(usize, StandardizedImage)>,
    pub errors: Vec<IndexedError>,
}

/// decode → grayscale → resize → standardize for one encoded image.
pub fn preprocess_one(bytes: &[u8], side: usize) -> Result<StandardizedImage, ImagingError> {
    let img = decode_image(bytes)?;
    let img = resize_bilinear(&img, side)?;
    standardize(&img)
}

/// Run [`preprocess_one`] over `inputs` on a pool of `workers` threads.
///
/// Output order follows input order and is identical for every worker
/// count. A failing image does not stop the others.
pub fn parallel_preprocess<B>(
    inputs: &[B],
    side: usize,
    workers: usize,
) -> Result<PreprocessOutput, ImagingError>
where
    B: AsRef<[u8]> + Sync,
{
    if workers == 0 {
        return Err(ImagingError::Invalid("workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ImagingError::Invalid(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<StandardizedImage, ImagingError>> = pool.install(|| {
        inputs
            .par_iter()
            .map(|bytes| preprocess_one(bytes.as_ref(), side))
            .collect()
    });
    let mut out = PreprocessOutput::default();
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(img) => out.images.push((index, img)),
            Err(error) => out.errors.push(IndexedError { index, error }),
        }
    }
    Ok(out)
}
