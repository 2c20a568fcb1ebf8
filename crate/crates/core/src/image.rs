//! 8-bit images, PNG I/O, search-region sampling and heat-map export.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Tensor};

/// Interleaved 8-bit image with 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::Data(format!("cannot write {c}-channel png"))),
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&self.data)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf)?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Data(format!("{}: expected 8-bit png", path.display())));
        }
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => return Err(Error::Data(format!("{}: unsupported color {other:?}", path.display()))),
        };
        buf.truncate(info.buffer_size());
        Ok(Self {
            width: info.width as usize,
            height: info.height as usize,
            channels,
            data: buf,
        })
    }

    /// Raw layout: 3 little-endian u32 (width, height, channels) then pixels.
    pub fn to_raw(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len());
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_raw(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Data("raw image header truncated".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (width, height, channels) = (word(0), word(1), word(2));
        let data = bytes[12..].to_vec();
        if data.len() != width * height * channels {
            return Err(Error::Data("raw image size mismatch".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }
}

/// Sample a square region of side `side` centered at `(cx, cy)` into a
/// `(1, out_channels, size, size)` tensor with bilinear interpolation.
/// Pixels outside the image read as zero before normalization; values are
/// mapped to `v / 255 - 0.5`. Gray images are replicated across channels.
pub fn sample_region(img: &Image, cx: f64, cy: f64, side: f64, size: usize, out_channels: usize) -> Tensor {
    let scale = side / size as f64;
    let x0 = cx - side / 2.0;
    let y0 = cy - side / 2.0;
    let mut t = Tensor::zeros(&[1, out_channels, size, size]);
    let read = |x: isize, y: isize, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= img.width as isize || y >= img.height as isize {
            0.0
        } else {
            img.get(x as usize, y as usize, c) as f64
        }
    };
    let data = t.data_mut();
    for oy in 0..size {
        // Pixel centers sit at integer + 0.5.
        let sy = y0 + (oy as f64 + 0.5) * scale - 0.5;
        let fy = sy.floor();
        let wy = sy - fy;
        for ox in 0..size {
            let sx = x0 + (ox as f64 + 0.5) * scale - 0.5;
            let fx = sx.floor();
            let wx = sx - fx;
            let (ix, iy) = (fx as isize, fy as isize);
            for c in 0..out_channels {
                let src_c = if img.channels == 1 { 0 } else { c.min(img.channels - 1) };
                let v = (1.0 - wy) * ((1.0 - wx) * read(ix, iy, src_c) + wx * read(ix + 1, iy, src_c))
                    + wy * ((1.0 - wx) * read(ix, iy + 1, src_c) + wx * read(ix + 1, iy + 1, src_c));
                data[(c * size + oy) * size + ox] = v / 255.0 - 0.5;
            }
        }
    }
    t
}

/// Per-channel-mean heat map of sample 0, min-max normalized to 0..255.
pub fn heatmap(f: &FeatureMap) -> Image {
    let [_, c, h, w] = f.dims();
    let mut mean = vec![0.0; h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                mean[y * w + x] += f.at(0, ch, y, x) / c as f64;
            }
        }
    }
    let lo = mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = Image::new(w, h, 1);
    for (px, m) in img.data.iter_mut().zip(&mean) {
        *px = (((m - lo) / span) * 255.0).round() as u8;
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_raw_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(5, 3, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 7 % 256) as u8;
        }
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);
        assert_eq!(Image::from_raw(&img.to_raw()).unwrap(), img);
    }

    #[test]
    fn identity_sampling_reproduces_pixels() {
        let mut img = Image::new(4, 4, 1);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 10) as u8;
        }
        let t = sample_region(&img, 2.0, 2.0, 4.0, 4, 3);
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let want = img.get(x, y, 0) as f64 / 255.0 - 0.5;
                    assert!((t.at4(0, c, y, x) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn heatmap_spans_full_range() {
        let f = FeatureMap::from_data([1, 2, 2, 2], vec![0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let img = heatmap(&f);
        assert_eq!(img.data, vec![0, 85, 170, 255]);
    }
}
