//! 8-bit RGB rasters and their on-disk codecs.
//!
//! Binary PPM (P6, maxval 255) is always available and bit-exact. PNG, TIFF
//! and JPEG inputs are decoded through the `image` crate so that public
//! patch datasets can be read without conversion.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB raster, three bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Raster {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} raster needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Raster {
            width,
            height,
            pixels,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Raster {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the `w×h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Raster> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Shape(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(3 * w * h);
        for y in y0..y0 + h {
            let start = 3 * (y * self.width + x0);
            pixels.extend_from_slice(&self.pixels[start..start + 3 * w]);
        }
        Ok(Raster {
            width: w,
            height: h,
            pixels,
        })
    }

    /// Per-channel mean over all pixels, in 8-bit units.
    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut acc = [0u64; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as u64;
            }
        }
        let n = self.pixel_count().max(1) as f64;
        [acc[0] as f64 / n, acc[1] as f64 / n, acc[2] as f64 / n]
    }
}

/// Encodes `r` as binary PPM (P6, maxval 255).
pub fn encode_ppm(r: &Raster) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", r.width, r.height);
    let mut out = Vec::with_capacity(header.len() + r.pixels.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&r.pixels);
    out
}

/// Decodes a binary PPM with maxval 255. Header comments are skipped.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // Skip whitespace and comments.
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(format!("unsupported magic {:?}", fields[0]));
    }
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} {s:?}"));
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (need 255)"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = 3 * width * height;
    if bytes.len() < pos + need {
        return Err(format!(
            "expected {need} pixel bytes, found {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    Raster::new(width, height, bytes[pos..pos + need].to_vec()).map_err(|e| e.to_string())
}

pub fn write_ppm(path: &Path, r: &Raster) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_ppm(r)).map_err(|e| Error::io(path, e))
}

/// File extensions recognised as rasters when enumerating directories.
pub const RASTER_EXTENSIONS: &[&str] = &["ppm", "pnm", "png", "tif", "tiff", "jpg", "jpeg"];

pub fn is_raster_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| RASTER_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Reads a raster, dispatching on the file header.
pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        return decode_ppm(&bytes).map_err(|detail| Error::Format {
            path: path.to_path_buf(),
            detail,
        });
    }
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Raster::new(w as usize, h as usize, rgb.into_raw())
}
