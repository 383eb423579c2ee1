//! Watermark synthesis: fill the codeword color into the structure
//! foreground and the reserved blank elsewhere. Also the unified-watermark
//! baseline (one fixed logo composited identically into every cover) used
//! by the comparison rows.

use crate::codec::{CodecConfig, ColorValue, BLANK};
use crate::error::{Error, Result};
use crate::image_core::Image;
use crate::scalar::Scalar;
use crate::structure::StructureMask;
use ndarray::{Array2, Array3};
use rand::Rng;

/// Ground-truth structure-aligned watermark W = C (x) M.
#[derive(Debug, Clone)]
pub struct WatermarkImage<S: Scalar> {
    pub image: Image<S>,
    pub color: ColorValue,
}

pub fn synthesize<S: Scalar>(color: &ColorValue, mask: &StructureMask) -> Result<WatermarkImage<S>> {
    if color.rgb() == BLANK {
        return Err(Error::InvalidCodec(
            "blank (255,255,255) is the unwatermarked indicator, not a codeword".into(),
        ));
    }
    let (h, w) = (mask.height(), mask.width());
    let fg: [S; 3] = [
        S::from_f64_(color.r as f64),
        S::from_f64_(color.g as f64),
        S::from_f64_(color.b as f64),
    ];
    let blank = S::from_f64_(255.0);
    let mut pixels = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            if mask.mask[[r, c]] == 1 {
                for ch in 0..3 {
                    pixels[[r, c, ch]] = fg[ch];
                }
            } else {
                for ch in 0..3 {
                    pixels[[r, c, ch]] = blank;
                }
            }
        }
    }
    Ok(WatermarkImage {
        image: Image::new(pixels)?,
        color: *color,
    })
}

/// Uniform draw over the full codeword grid.
pub fn random_color<R: Rng>(cfg: &CodecConfig, rng: &mut R) -> Result<ColorValue> {
    let n = cfg.codebook_size();
    let index = rng.gen_range(0..n);
    ColorValue::from_index(index, cfg)
}

/// Fixed RGBA logo overlay, identical position and content for every cover.
#[derive(Debug, Clone)]
pub struct UnifiedWatermark<S: Scalar> {
    pub logo: Array3<S>,
    pub alpha: Array2<S>,
    pub position: (usize, usize),
}

impl<S: Scalar> UnifiedWatermark<S> {
    pub fn height(&self) -> usize {
        self.logo.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.logo.shape()[1]
    }

    /// Procedural default logo: a ring plus a diagonal bar, half-opaque.
    pub fn default_logo(size: usize) -> Self {
        let mut logo = Array3::zeros((size, size, 3));
        let mut alpha = Array2::zeros((size, size));
        let c = (size as f64 - 1.0) / 2.0;
        let r_out = size as f64 * 0.42;
        let r_in = size as f64 * 0.28;
        for r in 0..size {
            for col in 0..size {
                let d = ((r as f64 - c).powi(2) + (col as f64 - c).powi(2)).sqrt();
                let on_ring = d <= r_out && d >= r_in;
                let on_bar = (r as isize - col as isize).unsigned_abs() <= size / 10;
                if on_ring || on_bar {
                    alpha[[r, col]] = S::from_f64_(0.5);
                    logo[[r, col, 0]] = S::from_f64_(if on_ring { 30.0 } else { 220.0 });
                    logo[[r, col, 1]] = S::from_f64_(60.0);
                    logo[[r, col, 2]] = S::from_f64_(if on_ring { 200.0 } else { 40.0 });
                }
            }
        }
        UnifiedWatermark {
            logo,
            alpha,
            position: (0, 0),
        }
    }
}

/// Composite the same logo at the same position into a cover image.
pub fn synthesize_unified<S: Scalar>(
    cover: &Image<S>,
    wm: &UnifiedWatermark<S>,
) -> Result<Image<S>> {
    let (r0, c0) = wm.position;
    if r0 + wm.height() > cover.height() || c0 + wm.width() > cover.width() {
        return Err(Error::DimensionMismatch(format!(
            "logo {}x{} at ({},{}) overflows cover {}x{}",
            wm.height(),
            wm.width(),
            r0,
            c0,
            cover.height(),
            cover.width()
        )));
    }
    let mut out = cover.clone();
    let one = S::one();
    for r in 0..wm.height() {
        for c in 0..wm.width() {
            let a = wm.alpha[[r, c]];
            if a == S::zero() {
                continue;
            }
            for ch in 0..3 {
                let v = a * wm.logo[[r, c, ch]] + (one - a) * out.pixels[[r0 + r, c0 + c, ch]];
                out.pixels[[r0 + r, c0 + c, ch]] = v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_core::ImageF;
    use crate::structure::MaskSource;
    use ndarray::s;

    fn color(r: u8, g: u8, b: u8) -> ColorValue {
        ColorValue { r, g, b }
    }

    fn mask_from(arr: Array2<u8>) -> StructureMask {
        StructureMask {
            mask: arr,
            source: MaskSource::Sobel,
        }
    }

    #[test]
    fn empty_mask_gives_all_blank() {
        let m = mask_from(Array2::zeros((8, 8)));
        let w: WatermarkImage<f32> = synthesize(&color(20, 40, 60), &m).unwrap();
        assert!(w.image.pixels.iter().all(|&v| v == 255.0));
    }

    #[test]
    fn full_mask_gives_constant_color() {
        let m = mask_from(Array2::ones((8, 8)));
        let w: WatermarkImage<f32> = synthesize(&color(20, 40, 60), &m).unwrap();
        for px in w.image.pixels.outer_iter() {
            for p in px.outer_iter() {
                assert_eq!([p[0], p[1], p[2]], [20.0, 40.0, 60.0]);
            }
        }
    }

    #[test]
    fn checkerboard_verified_cellwise() {
        let mut arr = Array2::zeros((8, 8));
        for r in 0..8 {
            for c in 0..8 {
                arr[[r, c]] = ((r + c) % 2) as u8;
            }
        }
        let m = mask_from(arr.clone());
        let w: WatermarkImage<f32> = synthesize(&color(0, 0, 0), &m).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let expected = if arr[[r, c]] == 1 { 0.0 } else { 255.0 };
                for ch in 0..3 {
                    assert_eq!(w.image.pixels[[r, c, ch]], expected);
                }
            }
        }
    }

    #[test]
    fn at_most_two_distinct_colors() {
        let mut arr = Array2::zeros((8, 8));
        arr.slice_mut(s![2..5, 1..7]).fill(1);
        let m = mask_from(arr);
        let w: WatermarkImage<f32> = synthesize(&color(40, 80, 120), &m).unwrap();
        let mut colors = std::collections::BTreeSet::new();
        for r in 0..8 {
            for c in 0..8 {
                colors.insert([
                    w.image.pixels[[r, c, 0]] as u8,
                    w.image.pixels[[r, c, 1]] as u8,
                    w.image.pixels[[r, c, 2]] as u8,
                ]);
            }
        }
        assert!(colors.len() <= 2);
        assert!(colors.contains(&[40, 80, 120]));
    }

    #[test]
    fn foreground_mean_recovers_color_with_zero_variance() {
        let mut arr = Array2::zeros((8, 8));
        arr.slice_mut(s![3.., ..4]).fill(1);
        let m = mask_from(arr);
        let w: WatermarkImage<f32> = synthesize(&color(60, 100, 140), &m).unwrap();
        for ch in 0..3 {
            let vals: Vec<f32> = (0..8)
                .flat_map(|r| (0..8).map(move |c| (r, c)))
                .filter(|&(r, c)| m.mask[[r, c]] == 1)
                .map(|(r, c)| w.image.pixels[[r, c, ch]])
                .collect();
            let mean: f32 = vals.iter().sum::<f32>() / vals.len() as f32;
            assert_eq!(mean, [60.0, 100.0, 140.0][ch]);
            assert!(vals.iter().all(|&v| v == mean));
        }
    }

    #[test]
    fn blank_color_rejected() {
        let m = mask_from(Array2::ones((4, 4)));
        assert!(synthesize::<f32>(&color(255, 255, 255), &m).is_err());
    }

    #[test]
    fn unified_residual_is_identical_across_covers() {
        let wm = UnifiedWatermark::<f32>::default_logo(16);
        let a = ImageF::constant(32, 32, [10.0, 20.0, 30.0]);
        let b = ImageF::constant(32, 32, [200.0, 100.0, 50.0]);
        let wa = synthesize_unified(&a, &wm).unwrap();
        let wb = synthesize_unified(&b, &wm).unwrap();
        // alpha-lerp residual depends on the cover, but the blended logo
        // content alpha*logo + (1-alpha)*cover minus (1-alpha)*cover is
        // alpha*logo: identical for every cover.
        for r in 0..16 {
            for c in 0..16 {
                let al = wm.alpha[[r, c]];
                for ch in 0..3 {
                    let ra = wa.pixels[[r, c, ch]] - (1.0 - al) * a.pixels[[r, c, ch]];
                    let rb = wb.pixels[[r, c, ch]] - (1.0 - al) * b.pixels[[r, c, ch]];
                    assert!((ra - rb).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn blank_logo_is_identity() {
        let wm = UnifiedWatermark::<f32> {
            logo: Array3::zeros((8, 8, 3)),
            alpha: Array2::zeros((8, 8)),
            position: (0, 0),
        };
        let cover = ImageF::constant(16, 16, [90.0, 90.0, 90.0]);
        let out = synthesize_unified(&cover, &wm).unwrap();
        assert_eq!(out.pixels, cover.pixels);
    }

    #[test]
    fn opaque_logo_appears_verbatim_on_black() {
        let mut wm = UnifiedWatermark::<f32>::default_logo(16);
        wm.alpha.mapv_inplace(|a| if a > 0.0 { 1.0 } else { 0.0 });
        let cover = ImageF::zeros(32, 32);
        let out = synthesize_unified(&cover, &wm).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                if wm.alpha[[r, c]] == 1.0 {
                    for ch in 0..3 {
                        assert_eq!(out.pixels[[r, c, ch]], wm.logo[[r, c, ch]]);
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_logo_rejected() {
        let wm = UnifiedWatermark::<f32>::default_logo(32);
        let cover = ImageF::zeros(16, 16);
        assert!(synthesize_unified(&cover, &wm).is_err());
    }
}
