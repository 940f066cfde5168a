//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::RgbImage;

/// A decoded P5 or P6 image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub data: Vec<u8>,
}

impl Pnm {
    /// `[1, channels, h, w]` with samples scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, plane) = (self.channels, self.width * self.height);
        Tensor::from_fn(&[1, c, self.height, self.width], |i| {
            let (ch, p) = (i / plane, i % plane);
            self.data[p * c + ch] as f64 / 255.0
        })
    }

    pub fn into_rgb(self) -> RgbImage {
        let data = match self.channels {
            3 => self.data,
            _ => self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        };
        RgbImage {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    /// Skips whitespace and `#` comments running to end of line.
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Parse {
                offset: start,
                message: format!("{what} is too large"),
            })
    }
}

/// Decodes a binary P5/P6 file held in memory.
pub fn decode_pnm(bytes: &[u8]) -> Result<Pnm> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            return Err(Error::Parse {
                offset: 0,
                message: "bad magic: expected P5 or P6".to_string(),
            })
        }
    };
    let mut cur = Cursor { bytes, pos: 2 };
    if !cur.bytes.get(2).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.err("expected whitespace after magic"));
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = {
        cur.skip_space();
        cur.pos
    };
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.err(format!("empty image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            message: format!("maxval {maxval} unsupported (only 255)"),
        });
    }
    if !cur.bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.err("expected a single whitespace byte before the raster"));
    }
    let start = cur.pos + 1;
    let needed = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| cur.err("image dimensions overflow"))?;
    let available = bytes.len() - start;
    if available < needed {
        return Err(Error::Truncated {
            offset: start,
            needed,
            available,
        });
    }
    Ok(Pnm {
        width,
        height,
        channels,
        data: bytes[start..start + needed].to_vec(),
    })
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}

/// Reads a P5 or P6 file as a `[1, channels, h, w]` tensor in `[0, 1]`.
pub fn read_pgm_ppm(path: &Path) -> Result<Tensor> {
    Ok(read_pnm(path)?.to_tensor())
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// 8-bit grayscale samples as P5.
pub fn encode_pgm(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    if data.len() != width * height || data.is_empty() {
        return Err(Error::shape(
            "encode_pgm",
            "data",
            format!("{} samples for {width}x{height}", data.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    Ok(out)
}

pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(width: usize, height: usize, data: &[u8], path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, data)?).map_err(|e| Error::io(path, e))
}
