//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::path::Path;

use crate::encoders::RawImage;
use crate::error::{Error, Result};

pub fn encode_ppm(img: &RawImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Reads the next whitespace-delimited header field, skipping `#` comments.
fn header_field(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("bad PPM header".into()))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RawImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Format("not a binary PPM (P6) image".into()));
    }
    let mut pos = 2;
    let width = header_field(bytes, &mut pos)?;
    let height = header_field(bytes, &mut pos)?;
    let maxval = header_field(bytes, &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the samples.
    pos += 1;
    let n = width * height * 3;
    if width == 0 || height == 0 || bytes.len() < pos + n {
        return Err(Error::Format("truncated PPM data".into()));
    }
    let pixels = bytes[pos..pos + n]
        .iter()
        .map(|&b| f64::from(b) / maxval as f64)
        .collect();
    RawImage::new(height, width, pixels)
}

pub fn read_ppm(path: &Path) -> Result<RawImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_on_8bit_values() {
        let pixels: Vec<f64> = (0..2 * 3 * 3).map(|i| f64::from((i * 37 % 256) as u8) / 255.0).collect();
        let img = RawImage::new(2, 3, pixels).unwrap();
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P6 # c\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.2]);
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0").is_err());
    }

    #[test]
    fn pgm_header() {
        let bytes = encode_pgm(2, 1, &[0.0, 1.0]);
        assert_eq!(bytes, b"P5\n2 1\n255\n\x00\xff");
    }
}
