//! Binary PGM (P5) and PPM (P6) images with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rec. 601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmKind {
    Gray,
    Rgb,
}

impl PnmKind {
    fn channels(self) -> usize {
        match self {
            PnmKind::Gray => 1,
            PnmKind::Rgb => 3,
        }
    }

    fn magic(self) -> &'static [u8; 2] {
        match self {
            PnmKind::Gray => b"P5",
            PnmKind::Rgb => b"P6",
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_whitespace_and_comments(&mut self) {
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

    fn header_number(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("{what} out of range")))
    }
}

/// Decodes a P5/P6 byte stream into a `1×C×H×W` tensor scaled to `[0, 1]`.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<(PnmKind, Tensor)> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let kind = match bytes.get(..2) {
        Some(b"P5") => PnmKind::Gray,
        Some(b"P6") => PnmKind::Rgb,
        _ => return Err(cur.err("bad magic: expected P5 or P6")),
    };
    cur.pos = 2;
    let width = cur.header_number("width")?;
    let height = cur.header_number("height")?;
    cur.skip_whitespace_and_comments();
    let maxval_at = cur.pos;
    let maxval = cur.header_number("maxval")?;
    if maxval != 255 {
        cur.pos = maxval_at;
        return Err(cur.err(format!("unsupported maxval {maxval}, only 255")));
    }
    if width == 0 || height == 0 {
        return Err(cur.err("zero image extent"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("missing whitespace after maxval")),
    }
    let channels = kind.channels();
    let need = width * height * channels;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        cur.pos = bytes.len();
        return Err(cur.err(format!(
            "truncated payload: need {need} bytes, found {}",
            raster.len()
        )));
    }
    // interleaved RGB -> planar channels
    let plane = width * height;
    let mut data = vec![0.0; need];
    for (i, px) in raster[..need].chunks_exact(channels).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            data[c * plane + i] = b as f32 / 255.0;
        }
    }
    Ok((kind, Tensor::new([1, channels, height, width], data)?))
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<(PnmKind, Tensor)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

fn read_kind(path: &Path, expected: PnmKind) -> Result<Tensor> {
    let (kind, t) = read_pnm(path)?;
    if kind != expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: format!(
                "bad magic: expected {}",
                String::from_utf8_lossy(expected.magic())
            ),
        });
    }
    Ok(t)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    read_kind(path.as_ref(), PnmKind::Gray)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    read_kind(path.as_ref(), PnmKind::Rgb)
}

/// Round-half-up quantization of a clamped `[0, 1]` value.
pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Encodes a `1×1×H×W` or `1×3×H×W` tensor as P5/P6.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = image.dims4("encode_pnm")?;
    if n != 1 {
        return Err(Error::shape("encode_pnm", "batch", 1, n));
    }
    let kind = match c {
        1 => PnmKind::Gray,
        3 => PnmKind::Rgb,
        _ => return Err(Error::shape("encode_pnm", "channels", 1, c)),
    };
    let header = format!("{}\n{w} {h}\n255\n", String::from_utf8_lossy(kind.magic()));
    let mut out = Vec::with_capacity(header.len() + c * h * w);
    out.extend_from_slice(header.as_bytes());
    let plane = h * w;
    let data = image.data();
    for i in 0..plane {
        for ch in 0..c {
            out.push(quantize(data[ch * plane + i]));
        }
    }
    Ok(out)
}

fn write_checked(image: &Tensor, path: &Path, channels: usize) -> Result<()> {
    let (_, c, _, _) = image.dims4("write_pnm")?;
    if c != channels {
        return Err(Error::shape("write_pnm", "channels", channels, c));
    }
    let bytes = encode_pnm(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_checked(image, path.as_ref(), 1)
}

pub fn write_ppm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_checked(image, path.as_ref(), 3)
}

/// `Y = 0.299 R + 0.587 G + 0.114 B` on a `N×3×H×W` tensor.
pub fn rgb_to_luma(rgb: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = rgb.dims4("rgb_to_luma")?;
    if c != 3 {
        return Err(Error::shape("rgb_to_luma", "channels", 3, c));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * plane);
    for px in rgb.data().chunks_exact(3 * plane) {
        for i in 0..plane {
            data.push(LUMA[0] * px[i] + LUMA[1] * px[plane + i] + LUMA[2] * px[2 * plane + i]);
        }
    }
    Tensor::new([n, 1, h, w], data)
}

/// Replaces the luma of `rgb` with `luma` while keeping its BT.601 chroma
/// (Cb, Cr), then converts back to RGB clamped to `[0, 1]`.
pub fn replace_luma(rgb: &Tensor, luma: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = rgb.dims4("replace_luma")?;
    if c != 3 {
        return Err(Error::shape("replace_luma", "channels", 3, c));
    }
    let (ln, lc, lh, lw) = luma.dims4("replace_luma")?;
    for (name, e, a) in [("batch", n, ln), ("channels", 1, lc), ("height", h, lh), ("width", w, lw)] {
        if e != a {
            return Err(Error::shape("replace_luma", name, e, a));
        }
    }
    let plane = h * w;
    let mut out = vec![0.0; n * 3 * plane];
    for b in 0..n {
        let src = &rgb.data()[b * 3 * plane..(b + 1) * 3 * plane];
        let y_new = &luma.data()[b * plane..(b + 1) * plane];
        let dst = &mut out[b * 3 * plane..(b + 1) * 3 * plane];
        for i in 0..plane {
            let (r, g, bl) = (src[i], src[plane + i], src[2 * plane + i]);
            let y = LUMA[0] * r + LUMA[1] * g + LUMA[2] * bl;
            let cb = (bl - y) * 0.564;
            let cr = (r - y) * 0.713;
            let y = y_new[i];
            dst[i] = (y + 1.403 * cr).clamp(0.0, 1.0);
            dst[plane + i] = (y - 0.344 * cb - 0.714 * cr).clamp(0.0, 1.0);
            dst[2 * plane + i] = (y + 1.773 * cb).clamp(0.0, 1.0);
        }
    }
    Tensor::new([n, 3, h, w], out)
}
