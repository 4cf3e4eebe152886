//! Channels-last float images in `[0, 1]` and their PNG representation.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `H × W × C` image, row-major, channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Contract(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    /// `[C, H, W]` tensor view.
    pub fn to_chw(&self) -> Tensor {
        let (h, w, c) = self.dims();
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.get(y, x, ch);
                }
            }
        }
        Tensor::new(&[c, h, w], out)
    }

    pub fn from_chw(t: &Tensor) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 3, "expected [C, H, W], got {s:?}");
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = t.data();
        Self::from_fn(h, w, c, |y, x, ch| d[(ch * h + y) * w + x])
    }

    /// Stacks images into an `[N, C, H, W]` batch.
    pub fn batch(images: &[Image]) -> Tensor {
        let parts: Vec<Tensor> = images.iter().map(Image::to_chw).collect();
        Tensor::stack(&parts)
    }

    /// Splits an `[N, C, H, W]` batch back into images.
    pub fn unbatch(t: &Tensor) -> Vec<Image> {
        (0..t.shape()[0])
            .map(|i| Image::from_chw(&t.index0(i)))
            .collect()
    }

    /// SHA-256 of the raw sample bytes and dimensions.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in [self.height, self.width, self.channels] {
            h.update((d as u64).to_le_bytes());
        }
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Bicubic resize (Keys kernel, a = -0.5, pixel-centre aligned, border
    /// replication), clamped to `[0, 1]`.
    pub fn resize_bicubic(&self, height: usize, width: usize) -> Image {
        fn kernel(t: f64) -> f64 {
            let a = -0.5;
            let t = t.abs();
            if t <= 1.0 {
                (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
            } else if t < 2.0 {
                a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
            } else {
                0.0
            }
        }
        let taps = |dst: usize, src_size: usize, dst_size: usize| -> [(usize, f64); 4] {
            let pos = (dst as f64 + 0.5) * src_size as f64 / dst_size as f64 - 0.5;
            let base = pos.floor();
            let mut out = [(0usize, 0.0); 4];
            for (k, slot) in out.iter_mut().enumerate() {
                let idx = base as isize + k as isize - 1;
                let clamped = idx.clamp(0, src_size as isize - 1) as usize;
                *slot = (clamped, kernel(pos - (base + k as f64 - 1.0)));
            }
            out
        };
        let rows: Vec<_> = (0..height).map(|y| taps(y, self.height, height)).collect();
        let cols: Vec<_> = (0..width).map(|x| taps(x, self.width, width)).collect();
        Image::from_fn(height, width, self.channels, |y, x, c| {
            let mut acc = 0.0;
            for &(sy, wy) in &rows[y] {
                for &(sx, wx) in &cols[x] {
                    acc += wy * wx * self.get(sy, sx, c);
                }
            }
            acc.clamp(0.0, 1.0)
        })
    }

    /// Writes an 8-bit RGB or grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::Contract(format!("cannot write {c}-channel PNG"))),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(
            BufWriter::new(file),
            self.width as u32,
            self.height as u32,
        );
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let image_err = |e: png::EncodingError| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut writer = encoder.write_header().map_err(image_err)?;
        writer.write_image_data(&bytes).map_err(image_err)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decode_err = |e: png::DecodingError| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(decode_err)?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(decode_err)?;
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => {
                return Err(Error::Image {
                    path: path.to_path_buf(),
                    message: format!("unsupported color type {other:?}"),
                })
            }
        };
        let n = info.width as usize * info.height as usize * channels;
        let data = buf[..n].iter().map(|&b| b as f64 / 255.0).collect();
        Image::new(info.height as usize, info.width as usize, channels, data)
    }
}

/// Lays images out left-to-right into one strip (all must share a height).
pub fn hconcat(images: &[Image]) -> Image {
    let h = images.iter().map(Image::height).max().unwrap_or(0);
    let w: usize = images.iter().map(Image::width).sum();
    let c = images.first().map_or(3, Image::channels);
    let mut out = Image::filled(h, w, c, 0.0);
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height() {
            for x in 0..img.width() {
                for ch in 0..c {
                    out.set(y, x0 + x, ch, img.get(y, x, ch.min(img.channels() - 1)));
                }
            }
        }
        x0 += img.width();
    }
    out
}
