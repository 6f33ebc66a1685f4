//! Minimal binary PPM (P6) reader/writer for the folder loader.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn malformed(reason: impl Into<String>) -> Error {
    Error::MalformedFile {
        path: "<ppm>".into(),
        reason: reason.into(),
    }
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    fn skip_separators(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
    }

    fn next_number(&mut self) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while let Some(b) = self.bytes.get(self.pos) {
            if b.is_ascii_digit() {
                self.pos += 1;
            } else {
                break;
            }
        }
        if start == self.pos {
            return Err(malformed("expected a decimal number in header"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse::<usize>()
            .map_err(|_| malformed(format!("header number {:?} out of range", text)))
    }
}

/// Parse a binary P6 image into a `[3,H,W]` tensor in `[0,1]`.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(malformed("missing P6 magic"));
    }
    let mut scanner = HeaderScanner { bytes, pos: 2 };
    let width = scanner.next_number()?;
    let height = scanner.next_number()?;
    let maxval = scanner.next_number()?;
    if width == 0 || height == 0 {
        return Err(malformed("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(malformed(format!("unsupported maxval {}", maxval)));
    }
    // exactly one whitespace byte separates the header from pixel data
    match bytes.get(scanner.pos) {
        Some(b) if b.is_ascii_whitespace() => scanner.pos += 1,
        _ => return Err(malformed("missing separator before pixel data")),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| malformed("image dimensions overflow"))?;
    let data = &bytes[scanner.pos..];
    if data.len() != expected {
        return Err(malformed(format!(
            "expected {} pixel bytes, found {}",
            expected,
            data.len()
        )));
    }
    // interleaved RGB -> channel planes
    let mut out = vec![0.0f32; expected];
    let maxval = maxval as f32;
    for (i, px) in data.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            out[ch * width * height + i] = px[ch] as f32 / maxval;
        }
    }
    Ok(Tensor::from_vec(&[3, height, width], out))
}

/// Serialize a `[3,H,W]` tensor in `[0,1]` as binary P6 with maxval 255.
pub fn write_ppm(pixels: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    let data = pixels.data();
    for i in 0..h * w {
        for ch in 0..3 {
            out.push((data[ch * h * w + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}
