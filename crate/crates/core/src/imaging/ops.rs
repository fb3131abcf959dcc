use super::{GrayImage, ImagingError, StandardizedImage};

/// Network input side used when none is configured.
pub const DEFAULT_SIDE: usize = 32;

/// Rec. 709 luma.
const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

pub fn to_grayscale(width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<GrayImage, ImagingError> {
    let pixels = rgb
        .iter()
        .map(|[r, g, b]| (LUMA[0] * r + LUMA[1] * g + LUMA[2] * b).clamp(0.0, 1.0))
        .collect();
    GrayImage::new(width, height, pixels)
}

/// Shift to zero mean and scale to unit (population) standard deviation.
pub fn standardize(img: &GrayImage) -> Result<StandardizedImage, ImagingError> {
    if img.pixels().len() < 2 {
        return Err(ImagingError::Degenerate { std: 0.0 });
    }
    let (mean, std) = img.mean_std();
    if !(std > 1e-8) {
        return Err(ImagingError::Degenerate { std });
    }
    Ok(StandardizedImage {
        width: img.width(),
        height: img.height(),
        pixels: img.pixels().iter().map(|p| (p - mean) / std).collect(),
        source_mean: mean,
        source_std: std,
    })
}

/// Bilinear resample to `side × side` with half-pixel centers.
pub fn resize_bilinear(img: &GrayImage, side: usize) -> Result<GrayImage, ImagingError> {
    if side == 0 {
        return Err(ImagingError::Invalid("resize side must be at least 1".into()));
    }
    let (w, h) = (img.width(), img.height());
    if w == side && h == side {
        return Ok(img.clone());
    }
    let axis = |out: usize, extent: usize| -> (usize, usize, f64) {
        let scale = extent as f64 / side as f64;
        let src = ((out as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(extent - 1);
        (lo, hi, src - lo as f64)
    };
    let mut pixels = Vec::with_capacity(side * side);
    for i in 0..side {
        let (y0, y1, fy) = axis(i, h);
        for j in 0..side {
            let (x0, x1, fx) = axis(j, w);
            let corners = [img.at(x0, y0), img.at(x1, y0), img.at(x0, y1), img.at(x1, y1)];
            let top = corners[0] + (corners[1] - corners[0]) * fx;
            let bottom = corners[2] + (corners[3] - corners[2]) * fx;
            let v = top + (bottom - top) * fy;
            let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            pixels.push(v.clamp(lo, hi));
        }
    }
    GrayImage::new(side, side, pixels)
}

/// Counts per bin; bin `k` covers `[k/bins, (k+1)/bins)` and the last bin
/// also takes 1.0.
pub fn intensity_histogram(img: &GrayImage, bins: usize) -> Result<Vec<u64>, ImagingError> {
    if bins == 0 {
        return Err(ImagingError::Invalid("histogram needs at least one bin".into()));
    }
    let mut counts = vec![0u64; bins];
    for &p in img.pixels() {
        let k = ((p * bins as f64) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::imaging::mean_std;

    fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn standardize_symmetric_triple() {
        let img = GrayImage::new(3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        let s = standardize(&img).unwrap();
        let k = 1.224744871391589;
        assert!((s.pixels[0] + k).abs() < 1e-12);
        assert_eq!(s.pixels[1], 0.0);
        assert!((s.pixels[2] - k).abs() < 1e-12);
        assert_eq!(s.source_mean, 0.5);
    }

    #[test]
    fn constant_image_is_degenerate() {
        let img = GrayImage::new(4, 4, vec![0.3; 16]).unwrap();
        assert!(matches!(standardize(&img), Err(ImagingError::Degenerate { .. })));
        let one = GrayImage::new(1, 1, vec![0.3]).unwrap();
        assert!(standardize(&one).is_err());
    }

    #[test]
    fn standardized_statistics() {
        let s = standardize(&random_image(16, 16, 5)).unwrap();
        let (m, sd) = mean_std(&s.pixels);
        assert!(m.abs() < 1e-12, "{m}");
        assert!((sd - 1.0).abs() < 1e-12, "{sd}");
    }

    #[test]
    fn resize_identity_and_center_sample() {
        let img = random_image(7, 7, 2);
        assert_eq!(resize_bilinear(&img, 7).unwrap(), img);
        let checker = GrayImage::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(resize_bilinear(&checker, 1).unwrap().pixels(), &[0.5]);
    }

    #[test]
    fn resize_non_square_source() {
        let img = random_image(40, 24, 8);
        let out = resize_bilinear(&img, 32).unwrap();
        assert_eq!((out.width(), out.height()), (32, 32));
        assert!(resize_bilinear(&img, 0).is_err());
    }

    #[test]
    fn histogram_boundaries() {
        let zeros = GrayImage::new(3, 3, vec![0.0; 9]).unwrap();
        let h = intensity_histogram(&zeros, 256).unwrap();
        assert_eq!(h[0], 9);
        let img = GrayImage::new(3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(intensity_histogram(&img, 2).unwrap(), vec![1, 2]);
        assert!(intensity_histogram(&img, 0).is_err());
    }

    proptest! {
        #[test]
        fn resize_stays_within_input_range(w in 1usize..12, h in 1usize..12, side in 1usize..20, seed in any::<u64>()) {
            let img = random_image(w, h, seed);
            let out = resize_bilinear(&img, side).unwrap();
            let lo = img.pixels().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = img.pixels().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.pixels().iter().all(|&p| p >= lo && p <= hi));
        }

        #[test]
        fn histogram_conserves_pixels(w in 1usize..20, h in 1usize..20, bins in 1usize..300, seed in any::<u64>()) {
            let img = random_image(w, h, seed);
            let counts = intensity_histogram(&img, bins).unwrap();
            prop_assert_eq!(counts.iter().sum::<u64>(), (w * h) as u64);
        }

        #[test]
        fn standardize_ignores_positive_affine_maps(
            seed in any::<u64>(),
            slope in 0.05f64..1.0,
            offset in 0.0f64..0.5,
        ) {
            let img = random_image(8, 8, seed);
            let slope = slope * (1.0 - offset);
            let mapped = GrayImage::new(8, 8, img.pixels().iter().map(|p| offset + slope * p).collect()).unwrap();
            let a = standardize(&img).unwrap();
            let b = standardize(&mapped).unwrap();
            for (x, y) in a.pixels.iter().zip(&b.pixels) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
