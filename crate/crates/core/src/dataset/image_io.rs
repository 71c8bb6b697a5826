//! Minimal image I/O: binary PPM (P6) read/write natively, PNG through the
//! `image` crate. PPM is the default interchange format — dependency-free to
//! parse and bit-exact.

use std::path::Path;

use crate::error::DataError;
use crate::tensor::Tensor;

fn io_err(path: &Path, e: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn bad(path: &Path, detail: impl Into<String>) -> DataError {
    DataError::BadImage {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Writes an 8-bit binary PPM. `rgb` is row-major RGBRGB..., length 3*w*h.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), DataError> {
    assert_eq!(rgb.len(), 3 * width * height, "rgb buffer size mismatch");
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Reads an 8-bit binary PPM; returns (width, height, rgb).
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if !bytes.starts_with(b"P6") {
        return Err(bad(path, "missing P6 magic"));
    }
    // Header: three whitespace-separated tokens (width, height, maxval),
    // with '#' comments allowed, then exactly one whitespace byte.
    let mut pos = 2;
    let mut tokens = [0usize; 3];
    for slot in tokens.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad(path, "malformed header"));
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(path, "malformed header number"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad(path, "header not terminated"));
    }
    pos += 1;
    let [width, height, maxval] = tokens;
    if maxval != 255 {
        return Err(bad(path, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(bad(path, "zero extent"));
    }
    let need = 3 * width * height;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| bad(path, "truncated pixel data"))?;
    Ok((width, height, data.to_vec()))
}

/// Reads PPM or PNG by extension; returns (width, height, rgb).
pub fn read_image(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path),
        _ => {
            let img = image::open(path)
                .map_err(|e| bad(path, e.to_string()))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            Ok((w, h, img.into_raw()))
        }
    }
}

/// Writes PPM or PNG by extension.
pub fn write_image(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), DataError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => write_ppm(path, width, height, rgb),
        _ => {
            let img: image::RgbImage =
                image::ImageBuffer::from_raw(width as u32, height as u32, rgb.to_vec())
                    .ok_or_else(|| bad(path, "rgb buffer size mismatch"))?;
            img.save(path).map_err(|e| bad(path, e.to_string()))
        }
    }
}

/// Reads an image file into a 3xHxW tensor scaled to [0,1] (v/255).
pub fn read_image_tensor(path: &Path) -> Result<Tensor<f32>, DataError> {
    let (w, h, rgb) = read_image(path)?;
    Ok(rgb_bytes_to_tensor(w, h, &rgb))
}

/// Row-major RGB bytes -> 3xHxW float tensor in [0,1].
pub fn rgb_bytes_to_tensor(width: usize, height: usize, rgb: &[u8]) -> Tensor<f32> {
    Tensor::from_fn(&[3, height, width], |i| {
        let (c, rest) = (i / (height * width), i % (height * width));
        let (r, col) = (rest / width, rest % width);
        rgb[(r * width + col) * 3 + c] as f32 / 255.0
    })
}
