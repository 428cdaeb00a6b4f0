//! Binary netpbm codecs: P5 (grayscale) and P6 (RGB), 8-bit.
//!
//! The encoder always writes `P5\n<w> <h>\n255\n` (resp. `P6`) followed by the
//! raw samples, so decode-then-encode of our own files is byte-identical.

use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit image with `channels` interleaved samples per pixel (1 or 3).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ByteImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Argument(format!(
                "unsupported channel count {channels}"
            )));
        }
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(Error::Argument(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(ByteImage {
            width,
            height,
            channels,
            data,
        })
    }
}

pub fn encode(img: &ByteImage) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("netpbm header: bad {what} at byte {start}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ByteImage> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Format("not a netpbm file".into()));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        m => {
            return Err(Error::Format(format!(
                "unsupported netpbm variant P{}",
                m as char
            )))
        }
    };
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if hdr.pos >= bytes.len() || !bytes[hdr.pos].is_ascii_whitespace() {
        return Err(Error::Format("missing whitespace after maxval".into()));
    }
    let start = hdr.pos + 1;
    let need = width * height * channels;
    if bytes.len() - start < need {
        return Err(Error::Format(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len() - start
        )));
    }
    let mut data = bytes[start..start + need].to_vec();
    if maxval != 255 {
        for v in &mut data {
            if *v as usize > maxval {
                return Err(Error::Format(format!("sample {v} exceeds maxval {maxval}")));
            }
            *v = ((*v as usize * 255 + maxval / 2) / maxval) as u8;
        }
    }
    ByteImage::new(width, height, channels, data)
}

pub fn read(path: &Path) -> Result<ByteImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write(path: &Path, img: &ByteImage) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

/// Quantizes a value in [0,1] to a byte (round half away from zero).
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0
}
