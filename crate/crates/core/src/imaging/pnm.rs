//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::path::Path;

use super::{Image, LabelMap};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * n);
    for i in 0..n {
        for c in 0..3 {
            out.push(quantize(img.channel(c)[i]));
        }
    }
    out
}

pub fn encode_pgm(width: usize, height: usize, values: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode_ppm(img))
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    write_atomic(
        path,
        &encode_pgm(labels.width(), labels.height(), labels.data()),
    )
}

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!(
            "expected magic {}",
            std::str::from_utf8(magic).unwrap_or("?")
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header number")?;
    }
    // exactly one whitespace byte before the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err("missing whitespace after maxval".into());
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if width == 0 || height == 0 {
        return Err("zero-sized image".into());
    }
    Ok(Header {
        width,
        height,
        data_start: pos + 1,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let header = parse_header(bytes, b"P6").map_err(|m| Error::format(path, m))?;
    let n = header.width * header.height;
    let raster = &bytes[header.data_start..];
    if raster.len() != 3 * n {
        return Err(Error::format(
            path,
            format!("expected {} raster bytes, found {}", 3 * n, raster.len()),
        ));
    }
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = raster[3 * i + c] as f64 / 255.0;
        }
    }
    Image::new(header.height, header.width, data)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&read_bytes(path)?, path)
}

/// Reads a P5 file as a label map, validating every value against `num_classes`.
pub fn read_pgm(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let bytes = read_bytes(path)?;
    let header = parse_header(&bytes, b"P5").map_err(|m| Error::format(path, m))?;
    let n = header.width * header.height;
    let raster = &bytes[header.data_start..];
    if raster.len() != n {
        return Err(Error::format(
            path,
            format!("expected {n} raster bytes, found {}", raster.len()),
        ));
    }
    LabelMap::new(header.height, header.width, raster.to_vec(), num_classes)
        .map_err(|e| Error::format(path, e.to_string()))
}
