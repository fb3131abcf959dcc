//! Binary netpbm: `P5` graymaps and `P6` pixmaps, 8 or 16 bits per sample.

use super::ops::to_grayscale;
use super::{GrayImage, ImagingError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmDepth {
    Eight,
    Sixteen,
}

struct Header {
    color: bool,
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn fail(offset: usize, message: impl Into<String>) -> ImagingError {
    ImagingError::Format {
        offset,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header, ImagingError> {
    let color = match bytes.get(..2) {
        Some(b"P5") => false,
        Some(b"P6") => true,
        _ => return Err(fail(0, "expected P5 or P6 magic")),
    };
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // whitespace and comments between tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(fail(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fail(pos, "expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(start, "number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fail(pos, "expected whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fail(2, format!("empty image {width}x{height}")));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(fail(2, format!("maxval {maxval} outside 1..=65535")));
    }
    Ok(Header {
        color,
        width: width as usize,
        height: height as usize,
        maxval,
        data_start: pos,
    })
}

/// Decode a binary PGM or PPM into a grayscale image scaled by `1/maxval`.
pub fn decode_image(bytes: &[u8]) -> Result<GrayImage, ImagingError> {
    let h = parse_header(bytes)?;
    let wide = h.maxval > 255;
    let sample_bytes = if wide { 2 } else { 1 };
    let channels = if h.color { 3 } else { 1 };
    let needed = h.width * h.height * channels * sample_bytes;
    let raster = &bytes[h.data_start..];
    if raster.len() < needed {
        return Err(fail(
            h.data_start + raster.len(),
            format!("truncated raster: need {needed} bytes, have {}", raster.len()),
        ));
    }
    let maxval = f64::from(h.maxval);
    let mut samples = Vec::with_capacity(h.width * h.height * channels);
    for i in 0..h.width * h.height * channels {
        let v = if wide {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as u32
        } else {
            raster[i] as u32
        };
        if v > h.maxval {
            return Err(fail(
                h.data_start + i * sample_bytes,
                format!("sample {v} exceeds maxval {}", h.maxval),
            ));
        }
        samples.push(f64::from(v) / maxval);
    }
    if h.color {
        let rgb: Vec<[f64; 3]> = samples.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        to_grayscale(h.width, h.height, &rgb)
    } else {
        GrayImage::new(h.width, h.height, samples)
    }
}

/// Encode as a binary PGM. Intensities are rounded to the nearest level.
pub fn encode_pgm(img: &GrayImage, depth: PgmDepth) -> Vec<u8> {
    let maxval: u32 = match depth {
        PgmDepth::Eight => 255,
        PgmDepth::Sixteen => 65535,
    };
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval).into_bytes();
    for &p in img.pixels() {
        let level = (p * f64::from(maxval)).round() as u32;
        match depth {
            PgmDepth::Eight => out.push(level as u8),
            PgmDepth::Sixteen => out.extend_from_slice(&(level as u16).to_be_bytes()),
        }
    }
    out
}
