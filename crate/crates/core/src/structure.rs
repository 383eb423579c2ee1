//! Physical structure extraction: the binary mask M that carries the
//! watermark color. Global edges come from Sobel (default, automatic Otsu
//! threshold) or Canny; semantic region masks are supplied as files.

use crate::error::{Error, Result};
use crate::image_core::Image;
use crate::scalar::Scalar;
use image::codecs::png::{PngDecoder, PngEncoder};
use image::{ColorType, ImageDecoder, ImageEncoder};
use ndarray::Array2;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    Sobel,
    Canny,
    SemanticFile,
}

/// H×W binary structure map.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMask {
    pub mask: Array2<u8>,
    pub source: MaskSource,
}

impl StructureMask {
    pub fn new(mask: Array2<u8>, source: MaskSource) -> Result<Self> {
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::InvalidMask("mask values must be 0/1".into()));
        }
        let m = StructureMask { mask, source };
        let ratio = m.foreground_ratio();
        if ratio <= 0.0 || ratio >= 0.9 {
            log::warn!(
                "structure mask foreground ratio {ratio:.3} outside (0, 0.9); weak for watermarking"
            );
        }
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().map(|&v| v as usize).sum()
    }

    pub fn background(&self) -> usize {
        self.mask.len() - self.foreground()
    }

    pub fn foreground_ratio(&self) -> f64 {
        self.foreground() as f64 / self.mask.len() as f64
    }

    pub fn iou(&self, other: &StructureMask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.mask.iter().zip(other.mask.iter()) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Luma gradient magnitude with the 3x3 Sobel kernels, reflect border.
pub fn sobel_magnitude<S: Scalar>(img: &Image<S>) -> Array2<f64> {
    let luma = img.luma().mapv(|v| v.to_f64_());
    let (h, w) = (img.height(), img.width());
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let i = if i < 0 { -i - 1 } else { i };
        let i = if i >= n { 2 * n - 1 - i } else { i };
        i as usize
    };
    let mut mag = Array2::zeros((h, w));
    for r in 0..h as isize {
        for c in 0..w as isize {
            let p = |dr: isize, dc: isize| luma[[reflect(r + dr, h), reflect(c + dc, w)]];
            let gx = -p(-1, -1) + p(-1, 1) - 2.0 * p(0, -1) + 2.0 * p(0, 1) - p(1, -1) + p(1, 1);
            let gy = -p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1) + p(1, -1) + 2.0 * p(1, 0) + p(1, 1);
            mag[[r as usize, c as usize]] = (gx * gx + gy * gy).sqrt();
        }
    }
    mag
}

/// Otsu threshold over a 256-bin histogram of gradient magnitudes.
pub fn otsu_threshold(mag: &Array2<f64>) -> f64 {
    let max = mag.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return f64::INFINITY; // constant image: no structure anywhere
    }
    const BINS: usize = 256;
    let mut hist = [0u64; BINS];
    for &v in mag.iter() {
        let bin = ((v / max) * (BINS as f64 - 1.0)).round() as usize;
        hist[bin.min(BINS - 1)] += 1;
    }
    let total: u64 = hist.iter().sum();
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &n)| i as f64 * n as f64)
        .sum();
    let mut sum_b = 0.0;
    let mut w_b = 0u64;
    let mut best = (0.0f64, 0usize);
    for (i, &n) in hist.iter().enumerate() {
        w_b += n;
        if w_b == 0 {
            continue;
        }
        let w_f = total - w_b;
        if w_f == 0 {
            break;
        }
        sum_b += i as f64 * n as f64;
        let m_b = sum_b / w_b as f64;
        let m_f = (sum_all - sum_b) / w_f as f64;
        let between = w_b as f64 * w_f as f64 * (m_b - m_f) * (m_b - m_f);
        if between > best.0 {
            best = (between, i);
        }
    }
    best.1 as f64 / (BINS as f64 - 1.0) * max
}

/// Sobel edge mask at an explicit gradient-magnitude threshold.
pub fn sobel_mask_at<S: Scalar>(img: &Image<S>, threshold: f64) -> Result<StructureMask> {
    let mag = sobel_magnitude(img);
    let mask = mag.mapv(|v| u8::from(v > threshold));
    StructureMask::new(mask, MaskSource::Sobel)
}

/// Default Sobel extractor: per-image automatic Otsu threshold.
pub fn sobel_mask<S: Scalar>(img: &Image<S>) -> Result<StructureMask> {
    let mag = sobel_magnitude(img);
    let threshold = otsu_threshold(&mag);
    let mask = mag.mapv(|v| u8::from(v > threshold));
    StructureMask::new(mask, MaskSource::Sobel)
}

/// Standard Canny: Gaussian smooth, Sobel gradient, non-maximum suppression,
/// double-threshold hysteresis.
pub fn canny_mask<S: Scalar>(img: &Image<S>, low: f64, high: f64) -> Result<StructureMask> {
    if !(low < high) || low < 0.0 {
        return Err(Error::InvalidMask(format!(
            "canny thresholds need 0 <= low < high, got {low} / {high}"
        )));
    }
    let luma = img.luma().mapv(|v| v.to_f64_());
    let (h, w) = (img.height(), img.width());
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let i = if i < 0 { -i - 1 } else { i };
        let i = if i >= n { 2 * n - 1 - i } else { i };
        i as usize
    };

    // 5x5 Gaussian, sigma 1.4.
    let sigma = 1.4f64;
    let k: Vec<f64> = (-2..=2)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / ksum).collect();
    let mut tmp = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w as isize {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * luma[[r, reflect(c + j as isize - 2, w)]];
            }
            tmp[[r, c as usize]] = acc;
        }
    }
    let mut smooth = Array2::zeros((h, w));
    for r in 0..h as isize {
        for c in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * tmp[[reflect(r + j as isize - 2, h), c]];
            }
            smooth[[r as usize, c]] = acc;
        }
    }

    let mut mag = Array2::zeros((h, w));
    let mut dir = Array2::zeros((h, w));
    for r in 0..h as isize {
        for c in 0..w as isize {
            let p = |dr: isize, dc: isize| smooth[[reflect(r + dr, h), reflect(c + dc, w)]];
            let gx = -p(-1, -1) + p(-1, 1) - 2.0 * p(0, -1) + 2.0 * p(0, 1) - p(1, -1) + p(1, 1);
            let gy = -p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1) + p(1, -1) + 2.0 * p(1, 0) + p(1, 1);
            mag[[r as usize, c as usize]] = (gx * gx + gy * gy).sqrt();
            dir[[r as usize, c as usize]] = gy.atan2(gx);
        }
    }

    // Non-maximum suppression along the quantized gradient direction.
    let mut thin = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let m = mag[[r, c]];
            if m == 0.0 {
                continue;
            }
            let angle = dir[[r, c]].to_degrees().rem_euclid(180.0);
            let (dr, dc): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let n1 = mag[[
                reflect(r as isize + dr, h),
                reflect(c as isize + dc, w),
            ]];
            let n2 = mag[[
                reflect(r as isize - dr, h),
                reflect(c as isize - dc, w),
            ]];
            if m >= n1 && m >= n2 {
                thin[[r, c]] = m;
            }
        }
    }

    // Hysteresis: strong seeds grow into connected weak pixels.
    let mut state = Array2::<u8>::zeros((h, w)); // 0 none, 1 weak, 2 strong
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let m = thin[[r, c]];
            if m >= high {
                state[[r, c]] = 2;
                stack.push((r, c));
            } else if m >= low {
                state[[r, c]] = 1;
            }
        }
    }
    while let Some((r, c)) = stack.pop() {
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let rr = r as isize + dr;
                let cc = c as isize + dc;
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let (rr, cc) = (rr as usize, cc as usize);
                if state[[rr, cc]] == 1 {
                    state[[rr, cc]] = 2;
                    stack.push((rr, cc));
                }
            }
        }
    }
    StructureMask::new(state.mapv(|v| u8::from(v == 2)), MaskSource::Canny)
}

/// Load a user-supplied semantic region mask (1-channel 0/255 PNG).
pub fn semantic_mask<S: Scalar>(img: &Image<S>, mask_path: impl AsRef<Path>) -> Result<StructureMask> {
    let mut m = load_mask(mask_path)?;
    if m.height() != img.height() || m.width() != img.width() {
        return Err(Error::DimensionMismatch(format!(
            "semantic mask {}x{} vs image {}x{}",
            m.height(),
            m.width(),
            img.height(),
            img.width()
        )));
    }
    m.source = MaskSource::SemanticFile;
    Ok(m)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<StructureMask> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = PngDecoder::new(BufReader::new(file))
        .map_err(|e| Error::InvalidMask(format!("{}: {}", path.display(), e)))?;
    let (w, h) = decoder.dimensions();
    if decoder.color_type() != ColorType::L8 {
        return Err(Error::InvalidMask(format!(
            "{}: masks must be 1-channel 8-bit PNG",
            path.display()
        )));
    }
    let mut buf = vec![0u8; decoder.total_bytes() as usize];
    decoder
        .read_image(&mut buf)
        .map_err(|e| Error::InvalidMask(format!("{}: {}", path.display(), e)))?;
    let bits: Result<Vec<u8>> = buf
        .iter()
        .map(|&v| match v {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(Error::InvalidMask(format!(
                "{}: non-binary mask value {other}",
                path.display()
            ))),
        })
        .collect();
    let mask = Array2::from_shape_vec((h as usize, w as usize), bits?).expect("shape");
    StructureMask::new(mask, MaskSource::SemanticFile)
}

pub fn save_mask(mask: &StructureMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let data: Vec<u8> = mask.mask.iter().map(|&v| v * 255).collect();
    PngEncoder::new(BufWriter::new(file))
        .write_image(
            &data,
            mask.width() as u32,
            mask.height() as u32,
            ColorType::L8,
        )
        .map_err(|e| Error::InvalidMask(format!("{}: {}", path.display(), e)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_core::ImageF;
    use ndarray::s;
    use tempfile::tempdir;

    fn step_edge(h: usize, w: usize, k: usize) -> ImageF {
        let mut img = ImageF::zeros(h, w);
        img.pixels.slice_mut(s![.., k.., ..]).fill(200.0);
        img
    }

    #[test]
    fn constant_image_gives_empty_masks() {
        let img = ImageF::constant(32, 32, [80.0, 80.0, 80.0]);
        assert_eq!(sobel_mask(&img).unwrap().foreground(), 0);
        assert_eq!(canny_mask(&img, 10.0, 30.0).unwrap().foreground(), 0);
    }

    #[test]
    fn vertical_step_edge_confined_to_kernel_support() {
        let img = step_edge(32, 32, 16);
        let m = sobel_mask(&img).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                if m.mask[[r, c]] == 1 {
                    assert!((15..=17).contains(&c), "foreground at column {c}");
                }
            }
        }
        assert!(m.foreground() > 0);
    }

    #[test]
    fn sobel_matches_scalar_convolution_oracle() {
        // Textured image; compare interior pixels against a direct oracle.
        let data: Vec<u8> = (0..24 * 24 * 3).map(|i| (i * 31 % 256) as u8).collect();
        let img = Image::<f64>::from_u8(24, 24, &data).unwrap();
        let mag = sobel_magnitude(&img);
        let luma: Vec<f64> = img
            .to_u8()
            .chunks(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect();
        let at = |r: usize, c: usize| luma[r * 24 + c];
        for r in 1..23 {
            for c in 1..23 {
                let gx = -at(r - 1, c - 1) + at(r - 1, c + 1) - 2.0 * at(r, c - 1)
                    + 2.0 * at(r, c + 1)
                    - at(r + 1, c - 1)
                    + at(r + 1, c + 1);
                let gy = -at(r - 1, c - 1) - 2.0 * at(r - 1, c) - at(r - 1, c + 1)
                    + at(r + 1, c - 1)
                    + 2.0 * at(r + 1, c)
                    + at(r + 1, c + 1);
                let expected = (gx * gx + gy * gy).sqrt();
                assert!((mag[[r, c]] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn canny_thin_response_on_ideal_edge() {
        let img = step_edge(32, 32, 16);
        let m = canny_mask(&img, 20.0, 60.0).unwrap();
        // Non-max suppression: at most one foreground pixel per row in the
        // interior (edge is vertical and ideal).
        for r in 4..28 {
            let count: usize = (0..32).map(|c| m.mask[[r, c]] as usize).sum();
            assert!(count <= 1, "row {r} has {count} edge pixels");
        }
        assert!(m.foreground() > 0);
    }

    #[test]
    fn canny_invalid_thresholds() {
        let img = step_edge(16, 16, 8);
        assert!(canny_mask(&img, 30.0, 10.0).is_err());
        assert!(canny_mask(&img, 10.0, 10.0).is_err());
    }

    #[test]
    fn semantic_mask_passthrough_and_size_check() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut arr = Array2::<u8>::zeros((16, 16));
        arr.slice_mut(s![4..8, 4..12]).fill(1);
        let m = StructureMask::new(arr.clone(), MaskSource::SemanticFile).unwrap();
        save_mask(&m, &path).unwrap();

        let img = ImageF::zeros(16, 16);
        let loaded = semantic_mask(&img, &path).unwrap();
        assert_eq!(loaded.mask, arr);

        let small = ImageF::zeros(8, 8);
        assert!(semantic_mask(&small, &path).is_err());
    }

    #[test]
    fn non_binary_mask_content_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let file = File::create(&path).unwrap();
        let data = vec![128u8; 16 * 16];
        PngEncoder::new(BufWriter::new(file))
            .write_image(&data, 16, 16, ColorType::L8)
            .unwrap();
        assert!(load_mask(&path).is_err());
    }

    #[test]
    fn all_ones_mask_file_loads_full_foreground() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ones.png");
        let m = StructureMask {
            mask: Array2::ones((16, 16)),
            source: MaskSource::SemanticFile,
        };
        save_mask(&m, &path).unwrap();
        let loaded = load_mask(&path).unwrap();
        assert_eq!(loaded.foreground(), 256);
    }
}
