//! 8-bit RGB images and binary masks, their PPM (P6) / PGM (P5) encodings,
//! and the affine map between bytes and model values in `[-1, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        RgbImage {
            width,
            height,
            data: fill.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[3, H, W]` tensor with `v = u / 127.5 - 1`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; 3 * h * w];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * h * w + p] = px[c] as f32 / 127.5 - 1.0;
            }
        }
        Tensor::from_vec(&[3, h, w], out).expect("consistent shape")
    }

    /// Inverse of [`Self::to_tensor`], clamping to `[-1, 1]` first.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let &[3, h, w] = t.shape() else {
            return Err(Error::dim("from_tensor", t.shape(), &[3, 0, 0]));
        };
        let mut data = vec![0; 3 * h * w];
        for c in 0..3 {
            for p in 0..h * w {
                data[p * 3 + c] = to_byte(t.data()[c * h * w + p] as f64);
            }
        }
        Ok(RgbImage {
            width: w,
            height: h,
            data,
        })
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let (width, height, body) = parse_header(bytes, b"P6", 3)?;
        Ok(RgbImage {
            width,
            height,
            data: body.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode_ppm(&fs::read(path)?)
    }
}

/// Model value to byte: `(v + 1) * 127.5`, rounded half away from zero and
/// clamped to `0..=255`.
pub fn to_byte(v: f64) -> u8 {
    let x = (v.clamp(-1.0, 1.0) + 1.0) * 127.5;
    x.round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    /// `false` outside the image.
    pub fn get_signed(&self, row: isize, col: isize) -> bool {
        row >= 0
            && col >= 0
            && (row as usize) < self.height
            && (col as usize) < self.width
            && self.get(row as usize, col as usize)
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// `(row_min, row_max, col_min, col_max)`, inclusive.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    bb = Some(match bb {
                        None => (r, r, c, c),
                        Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                    });
                }
            }
        }
        bb
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| if *v { 255 } else { 0 }));
        out
    }

    /// Any nonzero byte counts as in-mask.
    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let (width, height, body) = parse_header(bytes, b"P5", 1)?;
        Ok(Mask {
            width,
            height,
            data: body.iter().map(|b| *b != 0).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_pgm())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode_pgm(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    /// Skips whitespace and `#` comments.
    fn skip_blank(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|b| *b != b'\n') {
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
        self.skip_blank();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.fail(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        match text.parse() {
            Ok(v) => Ok(v),
            Err(_) => {
                self.pos = start;
                self.fail(format!("{what} out of range"))
            }
        }
    }
}

fn parse_header<'a>(bytes: &'a [u8], magic: &[u8], channels: usize) -> Result<(usize, usize, &'a [u8])> {
    let mut cur = Cursor { bytes, pos: 0 };
    if !bytes.starts_with(magic) {
        return cur.fail(format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    cur.pos = magic.len();
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let max_at = {
        cur.skip_blank();
        cur.pos
    };
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        cur.pos = max_at;
        return cur.fail(format!("maxval {maxval} unsupported (need 255)"));
    }
    if !cur.bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return cur.fail("expected single whitespace after maxval");
    }
    cur.pos += 1;
    if width == 0 || height == 0 {
        return cur.fail("empty image");
    }
    let need = width * height * channels;
    let body = &bytes[cur.pos..];
    if body.len() < need {
        cur.pos = bytes.len();
        return cur.fail(format!("raster truncated: {} of {need} bytes", body.len()));
    }
    Ok((width, height, &body[..need]))
}
