//! Binary PPM/PGM reading and writing.
//!
//! Rasters are P6 with maxval 255, label images P5 with maxval 255, and
//! region maps 16-bit P5 with maxval 65535 stored big-endian as the format
//! requires. Round trips are bit-exact; parse failures report the byte
//! offset.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PnmImage {
    Rgb8 { width: usize, height: usize, data: Vec<u8> },
    Gray8 { width: usize, height: usize, data: Vec<u8> },
    Gray16 { width: usize, height: usize, data: Vec<u16> },
}

impl PnmImage {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            PnmImage::Rgb8 { width, height, .. }
            | PnmImage::Gray8 { width, height, .. }
            | PnmImage::Gray16 { width, height, .. } => (*width, *height),
        }
    }
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::shape("write_ppm", format!("{} bytes for {width}x{height}", rgb.len())));
    }
    let mut out = Vec::with_capacity(rgb.len() + 32);
    write!(out, "P6\n{width} {height}\n255\n").unwrap();
    out.extend_from_slice(rgb);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_pgm8(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::shape("write_pgm8", format!("{} bytes for {width}x{height}", gray.len())));
    }
    let mut out = Vec::with_capacity(gray.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n").unwrap();
    out.extend_from_slice(gray);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// 16-bit grayscale; samples are written most significant byte first.
pub fn write_pgm16(path: &Path, width: usize, height: usize, gray: &[u16]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::shape("write_pgm16", format!("{} values for {width}x{height}", gray.len())));
    }
    let mut out = Vec::with_capacity(gray.len() * 2 + 32);
    write!(out, "P5\n{width} {height}\n65535\n").unwrap();
    for &v in gray {
        out.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Scanner<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Scanner<'_> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse { offset: self.pos, message: message.into() })
    }

    /// Skip whitespace and `#` comments between header tokens.
    fn skip_separators(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return self.fail("expected an unsigned decimal number");
        }
        let s = std::str::from_utf8(&self.buf[start..self.pos]).unwrap();
        s.parse().map_err(|_| Error::Parse {
            offset: start,
            message: format!("number '{s}' out of range"),
        })
    }
}

pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&buf)
}

pub fn parse_pnm(buf: &[u8]) -> Result<PnmImage> {
    let mut s = Scanner { buf, pos: 0 };
    if buf.len() < 2 {
        return s.fail("file too short for a PNM magic");
    }
    let magic = &buf[..2];
    s.pos = 2;
    let is_ppm = match magic {
        b"P6" => true,
        b"P5" => false,
        _ => {
            s.pos = 0;
            return s.fail("unsupported magic, expected P5 or P6");
        }
    };
    let width = s.number()?;
    let height = s.number()?;
    let maxval = s.number()?;
    if width == 0 || height == 0 {
        return s.fail("zero image dimension");
    }
    if maxval == 0 || maxval > 65535 {
        return s.fail(format!("maxval {maxval} outside [1, 65535]"));
    }
    // exactly one whitespace byte separates the header from the samples
    if s.pos >= buf.len() || !matches!(buf[s.pos], b' ' | b'\t' | b'\r' | b'\n') {
        return s.fail("missing whitespace after maxval");
    }
    s.pos += 1;
    let channels = if is_ppm { 3 } else { 1 };
    let wide = maxval > 255;
    let need = width * height * channels * if wide { 2 } else { 1 };
    let avail = buf.len() - s.pos;
    if avail < need {
        s.pos = buf.len();
        return s.fail(format!("truncated sample data: expected {need} bytes, found {avail}"));
    }
    let body = &buf[s.pos..s.pos + need];
    match (is_ppm, wide) {
        (true, false) => Ok(PnmImage::Rgb8 { width, height, data: body.to_vec() }),
        (false, false) => Ok(PnmImage::Gray8 { width, height, data: body.to_vec() }),
        (false, true) => {
            // maxval > 255: big-endian 16-bit samples per the PGM standard
            let data = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
            Ok(PnmImage::Gray16 { width, height, data })
        }
        (true, true) => s.fail("16-bit PPM rasters are not used by this format"),
    }
}
