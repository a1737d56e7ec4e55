//! Pixel-space containers shared by the codec, data pipeline and inference.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// An RGB frame stored channel-major (3, H, W) with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageFrame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "frame buffer of {} values for 3x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Shape(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut frame = Self::zeros(height, width);
        for c in 0..3 {
            frame.channel_mut(c).fill(rgb[c]);
        }
        frame
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let w = self.width;
        let h = self.height;
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    /// Hex SHA-256 of the raw little-endian pixel buffer.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.height as u64).to_le_bytes());
        hasher.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (3, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Stacks frames into an (F, 3, H, W) tensor.
    pub fn stack(frames: &[ImageFrame], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("empty frame sequence".into()))?;
        let (h, w) = (first.height, first.width);
        let mut buf = Vec::with_capacity(frames.len() * 3 * h * w);
        for f in frames {
            if (f.height, f.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "frame {}x{} in a sequence of {h}x{w}",
                    f.height, f.width
                )));
            }
            buf.extend_from_slice(&f.data);
        }
        let t = Tensor::from_vec(buf, (frames.len(), 3, h, w), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Splits an (F, 3, H, W) tensor into frames, clamping into [0, 1].
    pub fn unstack(t: &Tensor) -> Result<Vec<ImageFrame>> {
        let (f, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(Error::ChannelMismatch {
                expected: 3,
                got: c,
            });
        }
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(flat
            .chunks_exact(3 * h * w)
            .take(f)
            .map(|chunk| ImageFrame {
                height: h,
                width: w,
                data: chunk.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            })
            .collect())
    }

    /// Quantizes to 8 bits per channel, as stored on disk.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| (v * 255.0).round() / 255.0)
                .collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = self.rgb(y, x).map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut frame = Self::zeros(h, w);
        for (x, y, px) in img.enumerate_pixels() {
            let rgb = px.0.map(|v| v as f32 / 255.0);
            frame.set_rgb(y as usize, x as usize, rgb);
        }
        Ok(frame)
    }
}

/// A binary pixel mask, 1 marks foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    /// Downsamples by `factor` with a majority vote per cell; the result stays binary.
    pub fn downsample(&self, factor: usize) -> Result<Mask> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::NotDivisible {
                height: self.height,
                width: self.width,
                factor,
            });
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let cell = factor * factor;
        Ok(Mask::from_fn(h, w, |y, x| {
            let mut on = 0;
            for dy in 0..factor {
                for dx in 0..factor {
                    on += self.get(y * factor + dy, x * factor + dx) as usize;
                }
            }
            2 * on >= cell
        }))
    }

    /// (1, H, W) tensor of 0.0 / 1.0.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.data.iter().map(|b| *b as f32).collect();
        Ok(Tensor::from_vec(v, (1, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        });
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Mask::from_fn(h, w, |y, x| {
            img.get_pixel(x as u32, y as u32).0[0] >= 128
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(ImageFrame::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(ImageFrame::new(1, 1, vec![0.0, 0.5, f32::NAN]).is_err());
        assert!(ImageFrame::new(1, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn mask_downsample_stays_binary() {
        let m = Mask::from_fn(8, 8, |y, x| y < 4 && x < 6);
        let d = m.downsample(4).unwrap();
        assert_eq!((d.height(), d.width()), (2, 2));
        assert!(d.get(0, 0));
        // 4x2 of 16 pixels on: exactly half, majority rule keeps it.
        assert!(d.get(0, 1));
        assert!(!d.get(1, 0));
        assert!(m.downsample(3).is_err());
    }

    #[test]
    fn png_roundtrip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let mut f = ImageFrame::zeros(4, 5);
        for (i, v) in f.data_mut().iter_mut().enumerate() {
            *v = (i as f32 * 0.037) % 1.0;
        }
        let q = f.quantized();
        q.save_png(&path).unwrap();
        assert_eq!(ImageFrame::load_png(&path).unwrap(), q);
    }
}
