//! Binary 8-bit Netpbm: P5 (grayscale PGM) and P6 (RGB PPM).

use std::path::Path;

use crate::error::{Result, SegError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    /// Samples per pixel: 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub maxval: u16,
    pub data: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, reason: impl Into<String>) -> SegError {
        SegError::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
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
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.fail(format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Image8> {
    decode_with_offset(bytes, path).map(|(img, _)| img)
}

/// Also returns the byte offset at which the raster starts.
pub fn decode_with_offset(bytes: &[u8], path: &Path) -> Result<(Image8, usize)> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(cur.fail("expected binary netpbm magic P5 or P6")),
    };
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.fail("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(cur.fail(format!("maxval {maxval} is not an 8-bit depth")));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.fail("expected whitespace before raster"));
    }
    cur.pos += 1;
    let need = width * height * channels;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        cur.pos = bytes.len();
        return Err(cur.fail(format!(
            "raster truncated: {} of {need} bytes present",
            raster.len()
        )));
    }
    let image = Image8 {
        width,
        height,
        channels,
        maxval: maxval as u16,
        data: raster[..need].to_vec(),
    };
    Ok((image, cur.pos))
}

pub fn encode(image: &Image8) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n{}\n", image.width, image.height, image.maxval).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn read(path: &Path) -> Result<Image8> {
    let bytes = std::fs::read(path).map_err(|e| SegError::io(path, e))?;
    decode(&bytes, path)
}

fn write(path: &Path, image: &Image8) -> Result<()> {
    std::fs::write(path, encode(image)).map_err(|e| SegError::io(path, e))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    assert_eq!(data.len(), width * height);
    write(
        path,
        &Image8 {
            width,
            height,
            channels: 1,
            maxval: 255,
            data: data.to_vec(),
        },
    )
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    write(
        path,
        &Image8 {
            width,
            height,
            channels: 3,
            maxval: 255,
            data: rgb.to_vec(),
        },
    )
}
