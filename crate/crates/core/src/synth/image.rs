//! 8-bit raster images with binary PGM/PPM encoding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub data: Vec<u8>,
}

pub type Rgb = [u8; 3];

impl Image {
    pub fn new_rgb(width: usize, height: usize, fill: Rgb) -> Self {
        let data = (0..width * height).flat_map(|_| fill).collect();
        Image { width, height, channels: 3, data }
    }

    pub fn new_gray(width: usize, height: usize, fill: u8) -> Self {
        Image { width, height, channels: 1, data: vec![fill; width * height] }
    }

    /// Pixel as RGB (gray is replicated).
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * self.channels;
        if self.channels == 1 {
            [self.data[i]; 3]
        } else {
            [self.data[i], self.data[i + 1], self.data[i + 2]]
        }
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * self.channels;
        if self.channels == 1 {
            self.data[i] = c[0];
        } else {
            self.data[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize, c: Rgb) {
        for yy in y..(y + h).min(self.height) {
            for xx in x..(x + w).min(self.width) {
                self.set(xx, yy, c);
            }
        }
    }

    /// Binary `P5`/`P6` bytes.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Encoding(format!("invalid PNM: {m}"));
        let mut fields = Vec::with_capacity(4);
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
                if bytes[i] == b'#' {
                    while i < bytes.len() && bytes[i] != b'\n' {
                        i += 1;
                    }
                } else {
                    i += 1;
                }
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not ASCII"))?);
        }
        // Exactly one whitespace byte separates the header from the raster.
        i += 1;
        let channels = match fields[0] {
            "P5" => 1,
            "P6" => 3,
            other => return Err(bad(&format!("unsupported magic {other}"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number {s:?}")));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit images are supported"));
        }
        let n = width * height * channels;
        let data = bytes.get(i..i + n).ok_or_else(|| bad("raster shorter than header declares"))?;
        Ok(Image { width, height, channels, data: data.to_vec() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pnm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pnm(&bytes)
    }

    /// `[H, W, 3]` tensor scaled to `[0, 1]`.
    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        let mut data = Vec::with_capacity(self.width * self.height * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                data.extend(self.get(x, y).iter().map(|&v| R::of(v as f64 / 255.0)));
            }
        }
        Tensor::new(&[self.height, self.width, 3], data).expect("image shape")
    }

    /// Halves both sides by averaging 2×2 blocks (rounding to nearest).
    pub fn downsample2(&self) -> Result<Image> {
        if self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::dim(format!("cannot halve {}x{}", self.width, self.height)));
        }
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = Image { width: w, height: h, channels: self.channels, data: vec![0; w * h * self.channels] };
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let at = |xx: usize, yy: usize| self.data[(yy * self.width + xx) * self.channels + c] as u32;
                    let s = at(2 * x, 2 * y) + at(2 * x + 1, 2 * y) + at(2 * x, 2 * y + 1) + at(2 * x + 1, 2 * y + 1);
                    out.data[(y * w + x) * self.channels + c] = ((s + 2) / 4) as u8;
                }
            }
        }
        Ok(out)
    }

    /// Repeatedly halves until the side equals `size`.
    pub fn downsample_to(&self, size: usize) -> Result<Image> {
        let mut img = self.clone();
        while img.width > size {
            img = img.downsample2()?;
        }
        if img.width != size || img.height != size {
            return Err(Error::dim(format!(
                "cannot reduce {}x{} to {size}x{size} by halving",
                self.width, self.height
            )));
        }
        Ok(img)
    }
}
