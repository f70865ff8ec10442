//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::path::Path;

use crate::error::{format_err, PathContext, Result};

/// Decoded image: `height x width x channels` bytes, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode(magic: &str, width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(format_err(path, "RGB buffer does not match the image size"));
    }
    std::fs::write(path, encode("P6", width, height, rgb)).at(path)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(format_err(path, "gray buffer does not match the image size"));
    }
    std::fs::write(path, encode("P5", width, height, gray)).at(path)
}

/// Parses a P5 or P6 file with maxval 255; `#` comments in the header are skipped.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Pnm> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err(path, "header is not ASCII"))?);
    }
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format_err(path, format!("unsupported magic {m:?}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad header field {s:?}")));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(format_err(path, format!("maxval {maxval} is not 255")));
    }
    pos += 1;
    let len = width * height * channels;
    if bytes.len() < pos + len {
        return Err(format_err(path, "truncated pixel data"));
    }
    Ok(Pnm { width, height, channels, data: bytes[pos..pos + len].to_vec() })
}

pub fn read(path: &Path) -> Result<Pnm> {
    decode(&std::fs::read(path).at(path)?, path)
}

pub fn read_ppm(path: &Path) -> Result<Pnm> {
    let img = read(path)?;
    if img.channels != 3 {
        return Err(format_err(path, "expected a P6 image"));
    }
    Ok(img)
}

pub fn read_pgm(path: &Path) -> Result<Pnm> {
    let img = read(path)?;
    if img.channels != 1 {
        return Err(format_err(path, "expected a P5 image"));
    }
    Ok(img)
}
