//! Image representation and lossless PNG I/O.
//!
//! Pixels are stored as real values in `[0, 255]` so that network outputs,
//! watermark targets and metric computations share one representation. All
//! file I/O is 8-bit RGB PNG; lossy formats are refused because they destroy
//! the embedded watermark.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use image::codecs::png::{CompressionType, FilterType, PngDecoder, PngEncoder};
use image::{ColorType, ImageDecoder, ImageEncoder};
use ndarray::{Array3, Zip};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// H×W×3 RGB image with channel values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<S: Scalar> {
    pub pixels: Array3<S>,
}

pub type ImageF = Image<f32>;

impl<S: Scalar> Image<S> {
    pub fn new(pixels: Array3<S>) -> Result<Self> {
        if pixels.shape()[2] != 3 {
            return Err(Error::InvalidImage(format!(
                "expected 3 channels, got {}",
                pixels.shape()[2]
            )));
        }
        if pixels.shape()[0] == 0 || pixels.shape()[1] == 0 {
            return Err(Error::InvalidImage("empty image".into()));
        }
        Ok(Image { pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            pixels: Array3::zeros((height, width, 3)),
        }
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::zeros(height, width);
        for c in 0..3 {
            img.pixels
                .slice_mut(ndarray::s![.., .., c])
                .fill(S::from_f64_(rgb[c]));
        }
        img
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn same_size(&self, other: &Self) -> bool {
        self.height() == other.height() && self.width() == other.width()
    }

    /// Round and clamp into exact 8-bit values.
    pub fn quantize(&self) -> Self {
        let mut out = self.clone();
        out.pixels.mapv_inplace(|v| {
            let q = v.to_f64_().round().clamp(0.0, 255.0);
            S::from_f64_(q)
        });
        out
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| v.to_f64_().round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, data: &[u8]) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::InvalidImage(format!(
                "buffer length {} does not match {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        let pixels = Array3::from_shape_vec(
            (height, width, 3),
            data.iter().map(|&b| S::from_f64_(b as f64)).collect(),
        )
        .expect("shape checked");
        Ok(Image { pixels })
    }

    /// BT.601 luma, in `[0, 255]`.
    pub fn luma(&self) -> ndarray::Array2<S> {
        let (h, w) = (self.height(), self.width());
        let mut out = ndarray::Array2::zeros((h, w));
        let kr = S::from_f64_(0.299);
        let kg = S::from_f64_(0.587);
        let kb = S::from_f64_(0.114);
        Zip::indexed(&mut out).for_each(|(r, c), o| {
            *o = kr * self.pixels[[r, c, 0]]
                + kg * self.pixels[[r, c, 1]]
                + kb * self.pixels[[r, c, 2]];
        });
        out
    }
}

pub fn load_image<S: Scalar>(path: impl AsRef<Path>) -> Result<Image<S>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = PngDecoder::new(BufReader::new(file))
        .map_err(|e| Error::InvalidImage(format!("{}: {}", path.display(), e)))?;
    let (w, h) = decoder.dimensions();
    match decoder.color_type() {
        ColorType::Rgb8 => {
            let mut buf = vec![0u8; decoder.total_bytes() as usize];
            decoder
                .read_image(&mut buf)
                .map_err(|e| Error::InvalidImage(format!("{}: {}", path.display(), e)))?;
            Image::from_u8(h as usize, w as usize, &buf)
        }
        ColorType::L8 => {
            let mut buf = vec![0u8; decoder.total_bytes() as usize];
            decoder
                .read_image(&mut buf)
                .map_err(|e| Error::InvalidImage(format!("{}: {}", path.display(), e)))?;
            let rgb: Vec<u8> = buf.iter().flat_map(|&v| [v, v, v]).collect();
            Image::from_u8(h as usize, w as usize, &rgb)
        }
        other => Err(Error::InvalidImage(format!(
            "{}: unsupported color type {:?} (8-bit RGB PNG required)",
            path.display(),
            other
        ))),
    }
}

pub fn save_image<S: Scalar>(img: &Image<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder = PngEncoder::new_with_quality(
        BufWriter::new(file),
        CompressionType::Default,
        FilterType::Adaptive,
    );
    encoder
        .write_image(
            &img.to_u8(),
            img.width() as u32,
            img.height() as u32,
            ColorType::Rgb8,
        )
        .map_err(|e| Error::InvalidImage(format!("{}: {}", path.display(), e)))?;
    Ok(())
}
