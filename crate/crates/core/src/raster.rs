//! Minimal binary PGM (16-bit) and PPM (8-bit) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A row-major 16-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray16 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

impl Gray16 {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }
}

/// Encodes as `P5`, maxval 65535, big-endian samples.
pub fn encode_pgm16(img: &Gray16) -> Vec<u8> {
    let header = format!("P5\n{} {}\n65535\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.data.len() * 2);
    out.extend_from_slice(header.as_bytes());
    for v in &img.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn write_pgm16(path: &Path, img: &Gray16) -> Result<()> {
    fs::write(path, encode_pgm16(img)).map_err(|e| Error::io(path, e))
}

/// Splits off the next whitespace-delimited header token, skipping `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
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
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn decode_pgm16(bytes: &[u8]) -> std::result::Result<Gray16, String> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos).ok_or("missing magic")?;
    if magic != b"P5" {
        return Err(format!("bad magic {:?}", String::from_utf8_lossy(magic)));
    }
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        let t = next_token(bytes, &mut pos).ok_or(format!("missing {what}"))?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(format!("bad {what}"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 65535 {
        return Err(format!("expected maxval 65535, got {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 2;
    let raster = bytes.get(pos..).ok_or("truncated")?;
    if raster.len() != need {
        return Err(format!("expected {need} raster bytes, got {}", raster.len()));
    }
    let data = raster
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok(Gray16 {
        width,
        height,
        data,
    })
}

pub fn read_pgm16(path: &Path) -> Result<Gray16> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm16(&bytes).map_err(|r| Error::malformed(path, r))
}

/// Binary `P6` with 8-bit channels.
pub fn encode_ppm(width: usize, height: usize, rgb: &[[u8; 3]]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height);
    let header = format!("P6\n{width} {height}\n255\n");
    let mut out = Vec::with_capacity(header.len() + rgb.len() * 3);
    out.extend_from_slice(header.as_bytes());
    for px in rgb {
        out.extend_from_slice(px);
    }
    out
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    fs::write(path, encode_ppm(width, height, rgb)).map_err(|e| Error::io(path, e))
}

/// Deterministic ID colour: hue advances by the golden-ratio conjugate per ID.
/// ID 0 is black.
pub fn palette(id: u32) -> [u8; 3] {
    if id == 0 {
        return [0, 0, 0];
    }
    const PHI_CONJ: f64 = 0.618_033_988_749_895;
    let hue = (id as f64 * PHI_CONJ).fract();
    hsv_to_rgb(hue, 0.65, 0.95)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    let c = |x: f64| (x * 255.0).round() as u8;
    [c(r), c(g), c(b)]
}
