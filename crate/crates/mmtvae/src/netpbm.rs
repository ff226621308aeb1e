//! Binary PPM (P6) and PGM (P5) at 8 bits per sample.

use mmtvae_core::Tensor;

use crate::error::{format_err, Result};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode a (3, H, W) tensor with values in [0, 1].
pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(format_err(format!("PPM needs a (3, H, W) tensor, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = t.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        out.extend_from_slice(&[quantize(d[i]), quantize(d[plane + i]), quantize(d[2 * plane + i])]);
    }
    Ok(out)
}

/// Encode a (1, H, W) or (H, W) tensor with values in [0, 1].
pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match t.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(format_err(format!("PGM needs a (1, H, W) tensor, got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub pixels: Vec<u8>,
}

/// Parse a binary P5/P6 file with `maxval <= 255`. Comments are allowed in
/// the header.
pub fn decode(bytes: &[u8]) -> Result<Pnm> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(format_err("not a binary PGM/PPM file")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err("malformed netpbm header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err("malformed netpbm header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(format_err(format!("unsupported maxval {maxval}")));
    }
    let n = width * height * channels;
    let pixels = bytes
        .get(pos..pos + n)
        .ok_or_else(|| format_err("truncated netpbm raster"))?
        .to_vec();
    Ok(Pnm {
        channels,
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}
