//! Binary embedding / MLP dumps and PGM/PPM images.
//!
//! Embedding dump, little endian:
//!
//! ```text
//! "SASPEMB1" | u32 n_tokens | u32 dim | u32 img_w | u32 img_h
//!            | n_tokens*dim f32 (row-major) | u32 d_raw | d_raw f32
//! ```
//!
//! MLP dump, little endian:
//!
//! ```text
//! "SASPMLP1" | u32 layers | per layer: u32 rows | u32 cols | rows*cols f32 | cols f32
//! ```
//!
//! `rows` is the layer input width and `cols` its output width.

use std::path::Path;

use crate::embed::{Activation, MlpLayer, MlpProjection, TokenGrid};
use crate::error::{Result, SaspError};
use crate::mask::BinaryMask;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"SASPEMB1";
pub const MLP_MAGIC: &[u8; 8] = b"SASPMLP1";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            SaspError::format(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            )
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, want: &[u8; 8]) -> Result<()> {
        let got = self.take(8, "magic")?;
        if got != want {
            return Err(SaspError::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(want)
                ),
            ));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| SaspError::format(start, "size overflow"))?, what)?;
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(SaspError::format(start + 4 * k, format!("non-finite value in {what}")));
        }
        Ok(values)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(SaspError::format(
                self.pos,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Contents of an embedding dump: the token grid and the raw seg embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub grid: TokenGrid,
    pub seg_raw: Vec<f64>,
}

pub fn decode_embedding(bytes: &[u8]) -> Result<EmbeddingDump> {
    let mut r = Reader::new(bytes);
    r.magic(EMBEDDING_MAGIC)?;
    let header_at = r.pos;
    let n_tokens = r.u32("n_tokens")?;
    let dim = r.u32("dim")?;
    let img_w = r.u32("img_w")?;
    let img_h = r.u32("img_h")?;
    let data = r.f32s(n_tokens * dim, "token embeddings")?;
    let d_raw = r.u32("d_raw")?;
    let seg_raw = r.f32s(d_raw, "seg embedding")?;
    r.finish()?;
    if d_raw == 0 {
        return Err(SaspError::format(r.pos, "empty seg embedding"));
    }
    let grid = TokenGrid::new(data, n_tokens, dim, img_w, img_h)
        .map_err(|e| SaspError::format(header_at, e.to_string()))?;
    Ok(EmbeddingDump { grid, seg_raw })
}

pub fn encode_embedding(grid: &TokenGrid, seg_raw: &[f64]) -> Vec<u8> {
    let g = grid.geometry();
    let mut out = Vec::with_capacity(32 + 4 * (grid.data().len() + seg_raw.len()));
    out.extend_from_slice(EMBEDDING_MAGIC);
    put_u32(&mut out, grid.n_tokens());
    put_u32(&mut out, grid.dim());
    put_u32(&mut out, g.img_w);
    put_u32(&mut out, g.img_h);
    put_f32s(&mut out, grid.data());
    put_u32(&mut out, seg_raw.len());
    put_f32s(&mut out, seg_raw);
    out
}

pub fn decode_mlp(bytes: &[u8], activation: Activation) -> Result<MlpProjection> {
    let mut r = Reader::new(bytes);
    r.magic(MLP_MAGIC)?;
    let n_layers = r.u32("layer count")?;
    if n_layers == 0 {
        return Err(SaspError::format(8, "mlp has no layers"));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let at = r.pos;
        let rows = r.u32("layer rows")?;
        let cols = r.u32("layer cols")?;
        let weight = r.f32s(rows * cols, "layer weights")?;
        let bias = r.f32s(cols, "layer bias")?;
        layers.push(MlpLayer::new(rows, cols, weight, bias).map_err(|e| SaspError::format(at, e.to_string()))?);
    }
    r.finish()?;
    MlpProjection::new(layers, activation).map_err(|e| SaspError::format(12, e.to_string()))
}

pub fn encode_mlp(mlp: &MlpProjection) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MLP_MAGIC);
    put_u32(&mut out, mlp.layers().len());
    for l in mlp.layers() {
        put_u32(&mut out, l.in_dim);
        put_u32(&mut out, l.out_dim);
        put_f32s(&mut out, &l.weight);
        put_f32s(&mut out, &l.bias);
    }
    out
}

pub fn read_embedding(path: &Path) -> Result<EmbeddingDump> {
    decode_embedding(&std::fs::read(path)?)
}

pub fn read_mlp(path: &Path, activation: Activation) -> Result<MlpProjection> {
    decode_mlp(&std::fs::read(path)?, activation)
}

/// 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Maps values in [0, 1] to 0..=255.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Self {
        let pixels = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self { width, height, pixels }
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            width: mask.width(),
            height: mask.height(),
            pixels: mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    /// Pixels must be exactly 0 or 255.
    pub fn to_mask(&self) -> Result<BinaryMask> {
        let data = self
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| match p {
                0 => Ok(false),
                255 => Ok(true),
                v => Err(SaspError::format(i, format!("mask pixel value {v} is neither 0 nor 255"))),
            })
            .collect::<Result<Vec<_>>>()?;
        BinaryMask::new(self.width, self.height, data)
    }
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Parses binary PGM (P5) with maxval up to 255. Pixel values are rescaled
/// to 0..=255 when maxval is smaller.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(SaspError::format(0, "not a binary PGM (missing P5 magic)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(SaspError::format(pos, "expected a number in PGM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| SaspError::format(start, "PGM header number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(SaspError::format(pos, format!("unsupported PGM maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(SaspError::format(pos, "missing whitespace after PGM header"));
    }
    pos += 1;
    let n = width * height;
    let data = bytes
        .get(pos..pos + n)
        .ok_or_else(|| SaspError::format(pos, format!("PGM raster truncated: need {n} bytes")))?;
    if pos + n != bytes.len() {
        return Err(SaspError::format(pos + n, "trailing bytes after PGM raster"));
    }
    let pixels = if maxval == 255 {
        data.to_vec()
    } else {
        data.iter()
            .map(|&v| ((v as usize).min(maxval) * 255 / maxval) as u8)
            .collect()
    };
    Ok(GrayImage { width, height, pixels })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&std::fs::read(path)?)
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    read_pgm(path)?.to_mask()
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_pgm(path, &GrayImage::from_mask(mask))
}

/// 8-bit RGB image, written as binary PPM (P6).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = color;
        }
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for px in &img.pixels {
        out.extend_from_slice(px);
    }
    out
}
