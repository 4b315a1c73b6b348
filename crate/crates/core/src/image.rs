//! Single-channel images in the model domain [-1, 1] and their PNG encoding.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grayscale image, row-major, values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("pixel {v} outside [-1, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Build from values clamped into [-1, 1]; non-finite values are rejected.
    pub fn from_clamped(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite pixel".into()));
        }
        Self::new(height, width, data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
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

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }

    /// Intensity mapped to [0, 1].
    pub fn unit(&self, r: usize, c: usize) -> f64 {
        (f64::from(self.get(r, c)) + 1.0) / 2.0
    }

    /// 8-bit quantization used for storage: `round((x + 1) / 2 * 255)`.
    pub fn quantized(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| ((f64::from(v) + 1.0) / 2.0 * 255.0).round() as u8)
            .collect()
    }

    pub fn from_quantized(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f32::from(b) / 255.0 * 2.0 - 1.0).collect();
        Self::new(height, width, data)
    }

    /// The stored form of this image (quantize then dequantize).
    pub fn requantized(&self) -> Self {
        Self::from_quantized(self.height, self.width, &self.quantized()).expect("same shape")
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
            w.write_image_data(&self.quantized())
                .map_err(|e| Error::Png(e.to_string()))?;
        }
        Ok(out)
    }

    /// Decode an 8-bit PNG. Color images are reduced to the mean of their channels.
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let mut dec = png::Decoder::new(Cursor::new(bytes));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Png("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let color = match info.color_type {
            png::ColorType::GrayscaleAlpha => 1,
            png::ColorType::Rgba => 3,
            _ => channels,
        };
        let gray: Vec<u8> = buf[..info.buffer_size()]
            .chunks(channels)
            .map(|px| {
                let s: u32 = px[..color].iter().map(|&v| u32::from(v)).sum();
                ((f64::from(s) / color as f64).round()) as u8
            })
            .collect();
        Self::from_quantized(h, w, &gray)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png(&bytes)
    }

    /// Stack into an `[n, 1, h, w]` batch.
    pub fn stack(images: &[ImageTensor]) -> Result<Tensor<f32>> {
        let first = images.first().ok_or_else(|| Error::Empty("image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if (img.height, img.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "mixed image sizes {h}x{w} and {}x{}",
                    img.height, img.width
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Tensor::from_vec(&[images.len(), 1, h, w], data)
    }

    /// Split an `[n, 1, h, w]` batch back into images (values clamped into [-1, 1]).
    pub fn unstack(batch: &Tensor<f32>) -> Result<Vec<ImageTensor>> {
        let (n, c, h, w) = batch.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("expected one channel, got {c}")));
        }
        (0..n)
            .map(|i| Self::from_clamped(h, w, batch.row(i).to_vec()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let data: Vec<f32> = (0..64).map(|i| (i as f32 / 63.0) * 2.0 - 1.0).collect();
        let img = ImageTensor::new(8, 8, data).unwrap().requantized();
        let back = ImageTensor::from_png(&img.to_png().unwrap()).unwrap();
        assert_eq!(img, back);
        assert_eq!(back.to_png().unwrap(), img.to_png().unwrap());
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        assert!(ImageTensor::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(ImageTensor::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ImageTensor::from_clamped(1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn quantization_endpoints() {
        let img = ImageTensor::new(1, 3, vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(img.quantized(), vec![0, 128, 255]);
    }
}
