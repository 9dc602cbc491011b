//! Binary PPM (P6) and PGM (P5) reading and writing.
//!
//! Writers emit the canonical header `P6\n<w> <h>\n255\n` so that a
//! write-read-write cycle is byte-identical. The reader accepts arbitrary
//! whitespace and `#` comments in the header and reports parse failures
//! with the byte offset of the offending data.

use crate::error::{Result, SegError};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 (P5) or 3 (P6).
    pub channels: usize,
    /// Row-major, interleaved channels, maxval 255.
    pub data: Vec<u8>,
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    encode(width, height, 3, rgb, b"P6")
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>> {
    encode(width, height, 1, gray, b"P5")
}

fn encode(width: usize, height: usize, channels: usize, data: &[u8], magic: &[u8]) -> Result<Vec<u8>> {
    if data.len() != width * height * channels {
        return Err(SegError::Data(format!(
            "{}x{} image with {} channels needs {} bytes, got {}",
            width,
            height,
            channels,
            width * height * channels,
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(data.len() + 32);
    out.extend_from_slice(magic);
    out.push(b'\n');
    out.extend_from_slice(format!("{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(data);
    Ok(out)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    std::fs::write(path, encode_ppm(width, height, rgb)?)?;
    Ok(())
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, gray)?)?;
    Ok(())
}

pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    decode_pnm(&std::fs::read(path)?)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<PnmImage> {
    let mut p = Parser { bytes, pos: 0 };
    let channels = match p.take_magic()? {
        b'5' => 1,
        b'6' => 3,
        other => {
            return Err(p.err(format!("unsupported PNM type P{}", other as char)));
        }
    };
    let width = p.take_number()?;
    let height = p.take_number()?;
    let maxval = p.take_number()?;
    if maxval == 0 || maxval > 255 {
        return Err(p.err(format!("maxval {maxval} out of supported range 1..=255")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    p.take_single_whitespace()?;
    let expected = width * height * channels;
    let payload = &p.bytes[p.pos..];
    if payload.len() < expected {
        return Err(p.err(format!(
            "payload truncated: need {expected} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(p.err(format!(
            "trailing garbage: payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    Ok(PnmImage {
        width,
        height,
        channels,
        data: payload.to_vec(),
    })
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, message: impl Into<String>) -> SegError {
        SegError::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take_magic(&mut self) -> Result<u8> {
        if self.bytes.len() < 2 || self.bytes[0] != b'P' {
            return Err(self.err("missing PNM magic"));
        }
        self.pos = 2;
        Ok(self.bytes[1])
    }

    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn take_number(&mut self) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected a decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("number out of range"))
    }

    fn take_single_whitespace(&mut self) -> Result<()> {
        if self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err("expected whitespace before payload"))
        }
    }
}
