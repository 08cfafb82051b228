//! Binary PGM (P5, maxval 255) reader and writer.

use super::DataError;
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

/// Scale raw byte values (0..255, as floats) into [0, 1] by dividing by 255.
pub fn normalize(raw: &Tensor) -> Result<Tensor, DataError> {
    if let Some(&bad) = raw.data().iter().find(|&&v| !(0.0..=255.0).contains(&v)) {
        return Err(DataError::RawPixelOutOfRange { value: bad });
    }
    let data: Vec<f64> = raw.data().iter().map(|v| v / 255.0).collect();
    Ok(Tensor::new(raw.shape().to_vec(), data)?)
}

/// Load a binary PGM into a [1 x H x W] tensor of [0, 1] pixels.
pub fn load_pgm(path: &Path) -> Result<Tensor, DataError> {
    let io_err = |source| DataError::Io { path: path.to_path_buf(), source };
    let bytes = fs::read(path).map_err(io_err)?;

    let mut pos = 0;
    let magic = header_token(&bytes, &mut pos);
    if magic != b"P5" {
        return Err(DataError::PgmBadMagic {
            path: path.to_path_buf(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let bad_header = || DataError::PgmBadHeader { path: path.to_path_buf() };
    let width: usize = parse_token(&bytes, &mut pos).ok_or_else(bad_header)?;
    let height: usize = parse_token(&bytes, &mut pos).ok_or_else(bad_header)?;
    let maxval: u32 = parse_token(&bytes, &mut pos).ok_or_else(bad_header)?;
    if maxval != 255 {
        return Err(DataError::PgmBadMaxval { path: path.to_path_buf(), maxval });
    }
    if width == 0 || height == 0 {
        return Err(bad_header());
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad_header());
    }
    pos += 1;

    let expected = width * height;
    let raster = &bytes[pos..];
    if raster.len() != expected {
        return Err(DataError::PgmTruncated {
            path: path.to_path_buf(),
            expected,
            actual: raster.len(),
        });
    }
    let raw: Vec<f64> = raster.iter().map(|&b| b as f64).collect();
    normalize(&Tensor::new(vec![1, height, width], raw)?)
}

/// Write [0, 1] pixels as a binary PGM; each pixel becomes
/// round(p * 255) clamped to [0, 255].
pub fn save_pgm(pixels: &Tensor, path: &Path) -> Result<(), DataError> {
    let shape = pixels.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(DataError::BadImageShape { shape: shape.to_vec() });
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.data().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    fs::write(path, out).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

// Reads the next whitespace-delimited header token, skipping '#' comments.
fn header_token(bytes: &[u8], pos: &mut usize) -> Vec<u8> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    bytes[start..*pos].to_vec()
}

fn parse_token<T: std::str::FromStr>(bytes: &[u8], pos: &mut usize) -> Option<T> {
    let token = header_token(bytes, pos);
    std::str::from_utf8(&token).ok()?.parse().ok()
}
