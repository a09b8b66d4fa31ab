//! Binary PPM (P6), PGM (P5) and PBM (P4) encoding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let s = img.side();
    let mut out = format!("P6\n{s} {s}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    out
}

pub fn encode_pgm(width: usize, height: usize, values: &[u8]) -> Vec<u8> {
    assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

/// Rows padded to whole bytes, most significant bit first; set bits are true.
pub fn encode_pbm(width: usize, height: usize, cells: &[bool]) -> Vec<u8> {
    assert_eq!(cells.len(), width * height);
    let mut out = format!("P4\n{width} {height}\n").into_bytes();
    for row in cells.chunks(width) {
        for byte in row.chunks(8) {
            out.push(byte.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << (7 - i))));
        }
    }
    out
}

struct Header<'a> {
    magic: &'a [u8],
    fields: Vec<usize>,
    body: &'a [u8],
}

fn header(bytes: &[u8], nfields: usize) -> Result<Header<'_>> {
    let bad = |m: &str| Error::Format(format!("netpbm header: {m}"));
    if bytes.len() < 2 {
        return Err(bad("truncated"));
    }
    let magic = &bytes[..2];
    let mut pos = 2;
    let mut fields = Vec::with_capacity(nfields);
    while fields.len() < nfields {
        match bytes.get(pos) {
            None => return Err(bad("truncated")),
            Some(b'#') => {
                while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                    pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => pos += 1,
            Some(c) if c.is_ascii_digit() => {
                let start = pos;
                while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                    pos += 1;
                }
                let s = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
                fields.push(s.parse().map_err(|_| bad("number out of range"))?);
            }
            Some(_) => return Err(bad("unexpected byte")),
        }
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator before data"));
    }
    Ok(Header { magic, fields, body: &bytes[pos + 1..] })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let h = header(bytes, 3)?;
    let (w, ht, max) = (h.fields[0], h.fields[1], h.fields[2]);
    if h.magic != b"P6" || max != 255 {
        return Err(Error::Format("expected 8-bit binary PPM".into()));
    }
    if w != ht {
        return Err(Error::Format(format!("image is {w}x{ht}, expected square")));
    }
    if h.body.len() != w * ht * 3 {
        return Err(Error::Format(format!("PPM body has {} bytes, expected {}", h.body.len(), w * ht * 3)));
    }
    Image::new(w, h.body.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn decode_pbm(bytes: &[u8]) -> Result<(usize, usize, Vec<bool>)> {
    let h = header(bytes, 2)?;
    let (w, ht) = (h.fields[0], h.fields[1]);
    if h.magic != b"P4" {
        return Err(Error::Format("expected binary PBM".into()));
    }
    let stride = w.div_ceil(8);
    if h.body.len() != stride * ht {
        return Err(Error::Format(format!("PBM body has {} bytes, expected {}", h.body.len(), stride * ht)));
    }
    let mut cells = Vec::with_capacity(w * ht);
    for row in h.body.chunks(stride) {
        for x in 0..w {
            cells.push(row[x / 8] & (1 << (7 - x % 8)) != 0);
        }
    }
    Ok((w, ht, cells))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_pbm(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    decode_pbm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
