//! Grayscale image files.
//!
//! Reads PGM (P2/P5, any maxval) and grayscale PNG (8/16 bit), normalizing
//! samples to `[0, 1]`. Writes 8-bit PGM or PNG, and a raw float format for
//! signed fields:
//!
//! ```text
//! offset  size  content
//! 0       4     magic "WFR1"
//! 4       4     u32 LE rows (m1)
//! 8       4     u32 LE columns (m2)
//! 12      4     reserved, zero
//! 16      4*m   f32 LE values, row-major
//! ```

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Image, Lattice};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];
const RAW_MAGIC: &[u8; 4] = b"WFR1";

/// Reads a PGM or grayscale PNG image, scaling samples by the format maximum.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(&bytes, path)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        decode_pgm(&bytes, path)
    } else {
        Err(Error::UnsupportedFormat(format!(
            "{}: not a PGM (P2/P5) or PNG file",
            path.display()
        )))
    }
}

/// Writes an image with values in `[0, 1]` as 8-bit grayscale; out-of-range
/// values are clamped. The format follows the extension (`.png`, otherwise PGM P5).
pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png {
        encode_png(img).map_err(|e| Error::corrupt(path, e.to_string()))?
    } else {
        encode_pgm(img)
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// 8-bit quantization used by the writers.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let l = img.lattice();
    let mut out = format!("P5\n{} {}\n255\n", l.cols(), l.rows()).into_bytes();
    out.extend(img.values().iter().map(|&v| quantize_u8(v)));
    out
}

fn encode_png(img: &Image) -> std::result::Result<Vec<u8>, png::EncodingError> {
    let l = img.lattice();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, l.cols() as u32, l.rows() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        let data: Vec<u8> = img.values().iter().map(|&v| quantize_u8(v)).collect();
        writer.write_image_data(&data)?;
    }
    Ok(out)
}

fn lattice_for(width: usize, height: usize, path: &Path) -> Result<Lattice> {
    if width == 0 || height == 0 {
        return Err(Error::corrupt(path, "zero image dimension"));
    }
    Lattice::new(height, width)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()?
            .parse()
            .ok()
    }
}

fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Image> {
    let binary = bytes[1] == b'5';
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let header_err = || Error::corrupt(path, "malformed PGM header");
    let width = cur.number().ok_or_else(header_err)?;
    let height = cur.number().ok_or_else(header_err)?;
    let maxval = cur.number().ok_or_else(header_err)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::corrupt(path, format!("invalid maxval {maxval}")));
    }
    let lattice = lattice_for(width, height, path)?;
    let n = lattice.len();
    let scale = maxval as f64;

    let mut values = Vec::with_capacity(n);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
            return Err(header_err());
        }
        let data = &bytes[cur.pos + 1..];
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        if data.len() < need {
            return Err(Error::corrupt(path, "truncated raster"));
        }
        if wide {
            values.extend(
                data[..need]
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale),
            );
        } else {
            values.extend(data[..n].iter().map(|&b| b as f64 / scale));
        }
    } else {
        for _ in 0..n {
            let v = cur
                .number()
                .ok_or_else(|| Error::corrupt(path, "truncated ASCII raster"))?;
            values.push(v as f64 / scale);
        }
    }
    if values.iter().any(|&v| v > 1.0) {
        return Err(Error::corrupt(path, "sample exceeds maxval"));
    }
    Image::new(lattice, values)
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Image> {
    let corrupt = |e: png::DecodingError| Error::corrupt(path, e.to_string());
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(corrupt)?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if color != png::ColorType::Grayscale {
        return Err(Error::UnsupportedFormat(format!(
            "{}: PNG color type {color:?} is not grayscale",
            path.display()
        )));
    }
    if !matches!(depth, png::BitDepth::Eight | png::BitDepth::Sixteen) {
        return Err(Error::UnsupportedFormat(format!(
            "{}: PNG bit depth {depth:?} (need 8 or 16)",
            path.display()
        )));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::corrupt(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(corrupt)?;
    let lattice = lattice_for(frame.width as usize, frame.height as usize, path)?;
    let data = &buf[..frame.buffer_size()];
    let values = match frame.bit_depth {
        png::BitDepth::Sixteen => data
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        _ => data.iter().map(|&b| b as f64 / 255.0).collect(),
    };
    Image::new(lattice, values)
}

/// Encodes a signed field in the raw float format.
pub fn encode_raw_f32(img: &Image) -> Vec<u8> {
    let l = img.lattice();
    let mut out = Vec::with_capacity(16 + 4 * l.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(l.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(l.cols() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &v in img.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_raw_f32(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_raw_f32(img)).map_err(|e| Error::io(path, e))
}

pub fn read_raw_f32(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::UnsupportedFormat(format!(
            "{}: missing WFR1 header",
            path.display()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let lattice = lattice_for(word(8), word(4), path)?;
    let payload = &bytes[16..];
    if payload.len() != 4 * lattice.len() {
        return Err(Error::corrupt(path, "payload size does not match header"));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Image::new(lattice, values)
}
