//! Raster types, binary PNM (P5/P6) I/O and color transforms.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("unsupported PNM format: {0}")]
    UnsupportedFormat(String),
    #[error("PNM data truncated: expected {expected} samples, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed PNM header: {0}")]
    BadHeader(String),
    #[error("invalid image geometry: {0}")]
    InvalidGeometry(String),
    #[error("expected a {expected}-channel image, got {actual} channels")]
    WrongChannels { expected: usize, actual: usize },
}

/// An 8-bit raster with 1 (gray) or 3 (RGB) interleaved channels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::InvalidGeometry(format!("{width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::InvalidGeometry(format!("{channels} channels")));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(ImageError::InvalidGeometry(format!(
                "data length {} != {width}*{height}*{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    /// A uniformly filled RGB image.
    pub fn filled_rgb(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be nonzero");
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, channels: 3, data }
    }

    /// A uniformly filled gray image.
    pub fn filled_gray(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be nonzero");
        Self { width, height, channels: 1, data: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn is_rgb(&self) -> bool {
        self.channels == 3
    }

    /// Sample of a gray image.
    #[inline]
    pub fn gray(&self, x: usize, y: usize) -> u8 {
        debug_assert_eq!(self.channels, 1);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        debug_assert_eq!(self.channels, 3);
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_rgb(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        debug_assert_eq!(self.channels, 3);
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// RGB copy of this image; gray samples are replicated.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image { width: self.width, height: self.height, channels: 3, data }
    }
}

/// Row-major per-pixel boolean mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, ImageError> {
        if bits.len() != width * height {
            return Err(ImageError::InvalidGeometry(format!("mask length {} != {width}*{height}", bits.len())));
        }
        Ok(Self { width, height, bits })
    }

    /// Builds a mask from rows of `'#'` (set) and any other character (clear).
    /// Handy for tests and fixtures.
    pub fn from_ascii(rows: &[&str]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        let mut bits = Vec::with_capacity(width * height);
        for row in rows {
            assert_eq!(row.chars().count(), width, "ragged ascii mask");
            bits.extend(row.chars().map(|c| c == '#'));
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Out-of-bounds coordinates read as background.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.bits[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Copy of the inclusive rectangle `(x0, y0)..=(x1, y1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        let w = x1 - x0 + 1;
        let h = y1 - y0 + 1;
        let mut out = BinaryMask::new(w, h);
        for y in 0..h {
            let src = (y0 + y) * self.width + x0;
            out.bits[y * w..(y + 1) * w].copy_from_slice(&self.bits[src..src + w]);
        }
        out
    }

    /// Copy surrounded by `pad` rows/columns of background.
    pub fn padded(&self, pad: usize) -> BinaryMask {
        let w = self.width + 2 * pad;
        let h = self.height + 2 * pad;
        let mut out = BinaryMask::new(w, h);
        for y in 0..self.height {
            let dst = (y + pad) * w + pad;
            out.bits[dst..dst + self.width].copy_from_slice(&self.bits[y * self.width..(y + 1) * self.width]);
        }
        out
    }

    /// Pastes `self` into a `width`×`height` background mask at `(x0, y0)`.
    pub fn embedded(&self, width: usize, height: usize, x0: usize, y0: usize) -> BinaryMask {
        assert!(x0 + self.width <= width && y0 + self.height <= height);
        let mut out = BinaryMask::new(width, height);
        for y in 0..self.height {
            let dst = (y0 + y) * width + x0;
            out.bits[dst..dst + self.width].copy_from_slice(&self.bits[y * self.width..(y + 1) * self.width]);
        }
        out
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| (i % w, i / w))
    }
}

fn skip_ws_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' && bytes[pos] != b'\r' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize, ImageError> {
    *pos = skip_ws_and_comments(bytes, *pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImageError::BadHeader(format!("missing {what}")));
    }
    let token =
        std::str::from_utf8(&bytes[start..*pos]).map_err(|_| ImageError::BadHeader(format!("non-ASCII {what}")))?;
    if !token.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ImageError::BadHeader(format!("non-numeric {what}: {token:?}")));
    }
    token.parse().map_err(|_| ImageError::BadHeader(format!("{what} out of range: {token}")))
}

/// Decodes a binary P5 (gray) or P6 (RGB) file with maxval 255.
pub fn load_pnm(bytes: &[u8]) -> Result<Image, ImageError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(m) => return Err(ImageError::UnsupportedFormat(format!("magic {:?}", String::from_utf8_lossy(m)))),
        None => return Err(ImageError::UnsupportedFormat("missing magic".into())),
    };
    let mut pos = 2;
    if pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
        return Err(ImageError::UnsupportedFormat("magic not followed by whitespace".into()));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(ImageError::BadHeader(format!("zero dimension {width}x{height}")));
    }
    if maxval != 255 {
        return Err(ImageError::UnsupportedFormat(format!("maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => return Err(ImageError::BadHeader("no separator after maxval".into())),
        None => return Err(ImageError::Truncated { expected: width * height * channels, found: 0 }),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| ImageError::BadHeader("dimensions overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated { expected, found: payload.len() });
    }
    Ok(Image { width, height, channels, data: payload[..expected].to_vec() })
}

/// Encodes `img` in canonical form: `P5|P6 \n w h \n 255 \n` then raw samples.
pub fn save_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let header = format!("{magic}\n{} {}\n255\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.data.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&img.data);
    out
}

/// Luma of one RGB pixel: round(0.299 R + 0.587 G + 0.114 B), halves up.
#[inline]
pub fn luma(rgb: [u8; 3]) -> u8 {
    // Integer form of the weights avoids binary rounding of 0.299 etc.
    let weighted = 299 * rgb[0] as u32 + 587 * rgb[1] as u32 + 114 * rgb[2] as u32;
    ((weighted + 500) / 1000) as u8
}

/// Single-channel luma image. Gray input is returned unchanged.
pub fn to_grayscale(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img.data.chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).collect();
    Image { width: img.width, height: img.height, channels: 1, data }
}

/// Normalized rg chromaticity. Black maps to (1/3, 1/3).
#[inline]
pub fn rgb_to_chroma(r: u8, g: u8, b: u8) -> (f64, f64) {
    let s = r as u32 + g as u32 + b as u32;
    if s == 0 {
        return (1.0 / 3.0, 1.0 / 3.0);
    }
    let s = s as f64;
    (r as f64 / s, g as f64 / s)
}
