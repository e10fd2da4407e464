//! Linear RGB images with values in `[0, 1]` and binary PPM I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ::image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use ::image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};

/// Row-major RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Image { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::DegenerateInput(format!(
                "{} samples do not fill a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width * 3..(y + 1) * self.width * 3]
    }

    pub fn ensure_same_size(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::SizeMismatch {
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }

    /// 8-bit encoding: `round(clamp(v, 0, 1) * 255)`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Self::from_data(width, height, data)
    }

    /// Rounds every sample to the nearest 8-bit level, so the image survives
    /// a PPM round trip unchanged.
    pub fn quantized(&self) -> Image {
        Image::from_rgb8(self.width, self.height, &self.to_rgb8()).expect("same size")
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let encoder =
            PnmEncoder::new(BufWriter::new(file)).with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
        encoder
            .write_image(
                &self.to_rgb8(),
                self.width as u32,
                self.height as u32,
                ExtendedColorType::Rgb8,
            )
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoded = ::image::load(BufReader::new(file), ImageFormat::Pnm).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let rgb = decoded.to_rgb8();
        Image::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
    }
}

/// Per-frame supervision images, all the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    images: Vec<Image>,
}

impl FrameSet {
    pub fn new(images: Vec<Image>) -> Result<Self> {
        if images.len() < 2 {
            return Err(Error::DegenerateInput(format!("at least 2 frames are required, got {}", images.len())));
        }
        for img in &images[1..] {
            images[0].ensure_same_size(img)?;
        }
        if images.iter().any(|img| img.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::DegenerateInput("frame holds non-finite samples".into()));
        }
        Ok(FrameSet { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.images[0].dims()
    }

    pub fn get(&self, frame: usize) -> Result<&Image> {
        self.images.get(frame).ok_or(Error::IndexOutOfRange {
            index: frame,
            len: self.images.len(),
        })
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Image> {
        self.images.iter()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }
}

fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_of_quantized_image() {
        let mut img = Image::new(5, 3);
        for y in 0..3 {
            for x in 0..5 {
                img.set_pixel(x, y, [x as f64 / 4.0, y as f64 / 2.0, 0.37]);
            }
        }
        let img = img.quantized();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        img.write_ppm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6"));
        assert_eq!(Image::read_ppm(&path).unwrap(), img);
    }

    #[test]
    fn quantization_clamps_and_rounds() {
        let img = Image::from_data(1, 1, vec![-0.2, 0.5, 1.7]).unwrap();
        assert_eq!(img.to_rgb8(), vec![0, 128, 255]);
    }
}
