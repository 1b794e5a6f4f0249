//! Binary netpbm images: P6 (RGB) and P5 (grayscale), maxval 255.

use std::path::Path;

use crate::error::{Error, ImageError, Result};
use crate::tensor::{Float, Tensor};

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    /// Offset of the first pixel byte.
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, ImageError> {
    let malformed = |m: &str| ImageError::MalformedHeader(m.to_string());
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(malformed("missing P magic"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments may precede every field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(malformed("header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(["width", "height", "maxval"][i]));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| malformed("number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(malformed("no whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(malformed("zero image size"));
    }
    if maxval != 255 {
        return Err(ImageError::UnsupportedMaxval(maxval.min(u32::MAX as usize) as u32));
    }
    Ok(Header {
        magic,
        width,
        height,
        data_start: pos,
    })
}

fn pixels<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8], ImageError> {
    let expected = header
        .width
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| ImageError::MalformedHeader("image too large".into()))?;
    let data = &bytes[header.data_start..];
    if data.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: data.len(),
        });
    }
    Ok(&data[..expected])
}

fn expect_variant(bytes: &[u8], want: &[u8; 2]) -> Result<Header, ImageError> {
    if bytes.len() >= 2 && bytes[0] == b'P' && bytes[1].is_ascii_digit() && bytes[1] != want[1] {
        return Err(ImageError::UnsupportedVariant(
            String::from_utf8_lossy(&bytes[..2]).into_owned(),
        ));
    }
    let header = parse_header(bytes)?;
    if &header.magic != want {
        return Err(ImageError::UnsupportedVariant(
            String::from_utf8_lossy(&header.magic).into_owned(),
        ));
    }
    Ok(header)
}

/// Decodes a P6 image into a `[3, h, w]` tensor scaled to `[0, 1]`.
pub fn decode_ppm<T: Float>(bytes: &[u8]) -> Result<Tensor<T>> {
    let header = expect_variant(bytes, b"P6")?;
    let data = pixels(bytes, &header, 3)?;
    let (h, w) = (header.height, header.width);
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        T::from_f64(data[p * 3 + c] as f64 / 255.0)
    })
}

/// Decodes a P5 image into an `[h, w]` tensor scaled to `[0, 1]`.
pub fn decode_pgm<T: Float>(bytes: &[u8]) -> Result<Tensor<T>> {
    let header = expect_variant(bytes, b"P5")?;
    let data = pixels(bytes, &header, 1)?;
    Tensor::from_fn([header.height, header.width], |i| T::from_f64(data[i] as f64 / 255.0))
}

/// Encodes a `[3, h, w]` tensor with values in `[0, 1]` (clamped) as P6.
pub fn encode_ppm<T: Float>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() != 3 || t.shape()[0] != 3 {
        return Err(Error::invalid(
            "encode_ppm",
            format!("expected [3, h, w], got {:?}", t.shape()),
        ));
    }
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = t.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + p].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Encodes a 2-D tensor as P5, mapping its minimum to 0 and maximum to
/// 255. A constant tensor encodes as all zeros.
pub fn encode_pgm<T: Float>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() != 2 {
        return Err(Error::invalid(
            "encode_pgm",
            format!("expected [h, w], got {:?}", t.shape()),
        ));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let (lo, hi) = t.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v.as_f64()), hi.max(v.as_f64()))
    });
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|v| {
        if span > 0.0 {
            ((v.as_f64() - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn read_image_ppm<T: Float>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_ppm(&super::read_file(path.as_ref())?)
}

pub fn write_ppm<T: Float>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    super::write_file(path.as_ref(), &encode_ppm(t)?)
}

pub fn read_pgm<T: Float>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_pgm(&super::read_file(path.as_ref())?)
}

pub fn write_pgm<T: Float>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    super::write_file(path.as_ref(), &encode_pgm(t)?)
}
