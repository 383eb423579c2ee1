//! Parameterized augmentation ops applied consistently to aligned
//! image/mask/watermark tuples, plus policy sampling. Geometric parameters
//! are shared by every member of a tuple; photometric ops touch images only.
//!
//! Geometry is expressed as an inverse map from output to input coordinates
//! so the same resolved transform drives image warps here and the
//! differentiable augmentation layer during training. Rotation fills exposed
//! corners by edge replication so no fake blank region is introduced.

use crate::error::{Error, Result};
use crate::image_core::Image;
use crate::scalar::Scalar;
use crate::structure::StructureMask;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    Flip,
    Rotate,
    Crop,
    Resize,
    Noise,
    Blur,
    Hue,
    Saturation,
    Contrast,
}

/// One concrete transform with fixed parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AugmentOp {
    Identity,
    FlipH,
    FlipV,
    Rotate { degrees: f64 },
    Crop { height: usize, width: usize, row: usize, col: usize },
    Resize { height: usize, width: usize },
    Noise { sigma: f64, seed: u64 },
    Blur { sigma: f64 },
    Hue { degrees: f64 },
    Saturation { scale: f64 },
    Contrast { scale: f64 },
}

impl AugmentOp {
    pub fn kind(&self) -> Option<AugmentKind> {
        match self {
            AugmentOp::Identity => None,
            AugmentOp::FlipH | AugmentOp::FlipV => Some(AugmentKind::Flip),
            AugmentOp::Rotate { .. } => Some(AugmentKind::Rotate),
            AugmentOp::Crop { .. } => Some(AugmentKind::Crop),
            AugmentOp::Resize { .. } => Some(AugmentKind::Resize),
            AugmentOp::Noise { .. } => Some(AugmentKind::Noise),
            AugmentOp::Blur { .. } => Some(AugmentKind::Blur),
            AugmentOp::Hue { .. } => Some(AugmentKind::Hue),
            AugmentOp::Saturation { .. } => Some(AugmentKind::Saturation),
            AugmentOp::Contrast { .. } => Some(AugmentKind::Contrast),
        }
    }

    pub fn is_geometric(&self) -> bool {
        matches!(
            self,
            AugmentOp::Identity
                | AugmentOp::FlipH
                | AugmentOp::FlipV
                | AugmentOp::Rotate { .. }
                | AugmentOp::Crop { .. }
                | AugmentOp::Resize { .. }
        )
    }
}

/// A geometric op resolved against concrete input dimensions.
#[derive(Debug, Clone, Copy)]
pub struct ResolvedGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    // Inverse affine: src = A * (dst - out_center) + in_center + shift.
    a: [[f64; 2]; 2],
    shift: [f64; 2],
    centered: bool,
}

impl ResolvedGeom {
    pub fn resolve(op: &AugmentOp, in_h: usize, in_w: usize) -> Result<Option<ResolvedGeom>> {
        let g = match *op {
            AugmentOp::Identity => ResolvedGeom {
                in_h,
                in_w,
                out_h: in_h,
                out_w: in_w,
                a: [[1.0, 0.0], [0.0, 1.0]],
                shift: [0.0, 0.0],
                centered: false,
            },
            AugmentOp::FlipH => ResolvedGeom {
                in_h,
                in_w,
                out_h: in_h,
                out_w: in_w,
                a: [[1.0, 0.0], [0.0, -1.0]],
                shift: [0.0, in_w as f64 - 1.0],
                centered: false,
            },
            AugmentOp::FlipV => ResolvedGeom {
                in_h,
                in_w,
                out_h: in_h,
                out_w: in_w,
                a: [[-1.0, 0.0], [0.0, 1.0]],
                shift: [in_h as f64 - 1.0, 0.0],
                centered: false,
            },
            AugmentOp::Rotate { degrees } => {
                let th = degrees.to_radians();
                let (s, c) = (th.sin(), th.cos());
                // Content rotated by `degrees`; inverse rotates back.
                ResolvedGeom {
                    in_h,
                    in_w,
                    out_h: in_h,
                    out_w: in_w,
                    a: [[c, s], [-s, c]],
                    shift: [0.0, 0.0],
                    centered: true,
                }
            }
            AugmentOp::Crop { height, width, row, col } => {
                if row + height > in_h || col + width > in_w || height == 0 || width == 0 {
                    return Err(Error::InvalidAugment(format!(
                        "crop {height}x{width}+{row}+{col} exceeds image {in_h}x{in_w}"
                    )));
                }
                ResolvedGeom {
                    in_h,
                    in_w,
                    out_h: height,
                    out_w: width,
                    a: [[1.0, 0.0], [0.0, 1.0]],
                    shift: [row as f64, col as f64],
                    centered: false,
                }
            }
            AugmentOp::Resize { height, width } => {
                if height == 0 || width == 0 {
                    return Err(Error::InvalidAugment("resize to zero size".into()));
                }
                let sr = in_h as f64 / height as f64;
                let sc = in_w as f64 / width as f64;
                // Half-pixel-center convention.
                ResolvedGeom {
                    in_h,
                    in_w,
                    out_h: height,
                    out_w: width,
                    a: [[sr, 0.0], [0.0, sc]],
                    shift: [0.5 * sr - 0.5, 0.5 * sc - 0.5],
                    centered: false,
                }
            }
            _ => return Ok(None),
        };
        Ok(Some(g))
    }

    /// Source coordinates (row, col) for an output pixel.
    #[inline]
    pub fn src(&self, out_r: usize, out_c: usize) -> (f64, f64) {
        let (mut r, mut c) = (out_r as f64, out_c as f64);
        if self.centered {
            let ocr = (self.out_h as f64 - 1.0) / 2.0;
            let occ = (self.out_w as f64 - 1.0) / 2.0;
            let icr = (self.in_h as f64 - 1.0) / 2.0;
            let icc = (self.in_w as f64 - 1.0) / 2.0;
            r -= ocr;
            c -= occ;
            let sr = self.a[0][0] * r + self.a[0][1] * c + icr;
            let sc = self.a[1][0] * r + self.a[1][1] * c + icc;
            (sr, sc)
        } else {
            let sr = self.a[0][0] * r + self.a[0][1] * c + self.shift[0];
            let sc = self.a[1][0] * r + self.a[1][1] * c + self.shift[1];
            (sr, sc)
        }
    }

    /// Bilinear taps (clamped to bounds, i.e. edge replication).
    #[inline]
    pub fn taps(&self, out_r: usize, out_c: usize) -> [(usize, usize, f64); 4] {
        let (sr, sc) = self.src(out_r, out_c);
        let r0 = sr.floor();
        let c0 = sc.floor();
        let fr = sr - r0;
        let fc = sc - c0;
        let clamp_r = |v: f64| (v.max(0.0) as usize).min(self.in_h - 1);
        let clamp_c = |v: f64| (v.max(0.0) as usize).min(self.in_w - 1);
        [
            (clamp_r(r0), clamp_c(c0), (1.0 - fr) * (1.0 - fc)),
            (clamp_r(r0), clamp_c(c0 + 1.0), (1.0 - fr) * fc),
            (clamp_r(r0 + 1.0), clamp_c(c0), fr * (1.0 - fc)),
            (clamp_r(r0 + 1.0), clamp_c(c0 + 1.0), fr * fc),
        ]
    }

    #[inline]
    pub fn nearest(&self, out_r: usize, out_c: usize) -> (usize, usize) {
        let (sr, sc) = self.src(out_r, out_c);
        (
            ((sr + 0.5).floor().max(0.0) as usize).min(self.in_h - 1),
            ((sc + 0.5).floor().max(0.0) as usize).min(self.in_w - 1),
        )
    }
}

fn warp_image<S: Scalar>(g: &ResolvedGeom, img: &Image<S>) -> Image<S> {
    let mut out = Array3::zeros((g.out_h, g.out_w, 3));
    for r in 0..g.out_h {
        for c in 0..g.out_w {
            let taps = g.taps(r, c);
            for ch in 0..3 {
                let mut acc = 0.0f64;
                for &(ir, ic, w) in &taps {
                    acc += w * img.pixels[[ir, ic, ch]].to_f64_();
                }
                out[[r, c, ch]] = S::from_f64_(acc);
            }
        }
    }
    Image { pixels: out }
}

fn warp_mask(g: &ResolvedGeom, m: &StructureMask) -> StructureMask {
    // Nearest neighbor then re-binarize at 0.5 (nearest keeps values 0/1).
    let mut out = Array2::zeros((g.out_h, g.out_w));
    for r in 0..g.out_h {
        for c in 0..g.out_w {
            let (ir, ic) = g.nearest(r, c);
            out[[r, c]] = m.mask[[ir, ic]];
        }
    }
    StructureMask {
        mask: out,
        source: m.source,
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let (r, g, b) = (r / 255.0, g / 255.0, b / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / d).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let h6 = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    ((r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0)
}

fn photometric<S: Scalar>(op: &AugmentOp, img: &Image<S>) -> Image<S> {
    let mut out = img.clone();
    match *op {
        AugmentOp::Noise { sigma, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Box-Muller; two uniforms per normal draw.
            out.pixels.mapv_inplace(|v| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen::<f64>();
                let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                S::from_f64_((v.to_f64_() + sigma * n).clamp(0.0, 255.0))
            });
        }
        AugmentOp::Blur { sigma } => {
            let radius = (3.0 * sigma).ceil().max(1.0) as isize;
            let mut k: Vec<f64> = (-radius..=radius)
                .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
                .collect();
            let sum: f64 = k.iter().sum();
            k.iter_mut().for_each(|v| *v /= sum);
            let (h, w) = (img.height(), img.width());
            let clamp = |v: isize, n: usize| (v.clamp(0, n as isize - 1)) as usize;
            let mut tmp = Array3::<f64>::zeros((h, w, 3));
            for r in 0..h {
                for c in 0..w {
                    for ch in 0..3 {
                        let mut acc = 0.0;
                        for (j, kv) in k.iter().enumerate() {
                            let cc = clamp(c as isize + j as isize - radius, w);
                            acc += kv * img.pixels[[r, cc, ch]].to_f64_();
                        }
                        tmp[[r, c, ch]] = acc;
                    }
                }
            }
            for r in 0..h {
                for c in 0..w {
                    for ch in 0..3 {
                        let mut acc = 0.0;
                        for (j, kv) in k.iter().enumerate() {
                            let rr = clamp(r as isize + j as isize - radius, h);
                            acc += kv * tmp[[rr, c, ch]];
                        }
                        out.pixels[[r, c, ch]] = S::from_f64_(acc);
                    }
                }
            }
        }
        AugmentOp::Hue { degrees } => {
            let (h, w) = (img.height(), img.width());
            for r in 0..h {
                for c in 0..w {
                    let (hh, ss, vv) = rgb_to_hsv(
                        img.pixels[[r, c, 0]].to_f64_(),
                        img.pixels[[r, c, 1]].to_f64_(),
                        img.pixels[[r, c, 2]].to_f64_(),
                    );
                    let (nr, ng, nb) = hsv_to_rgb(hh + degrees, ss, vv);
                    out.pixels[[r, c, 0]] = S::from_f64_(nr.clamp(0.0, 255.0));
                    out.pixels[[r, c, 1]] = S::from_f64_(ng.clamp(0.0, 255.0));
                    out.pixels[[r, c, 2]] = S::from_f64_(nb.clamp(0.0, 255.0));
                }
            }
        }
        AugmentOp::Saturation { scale } => {
            let luma = img.luma();
            let (h, w) = (img.height(), img.width());
            for r in 0..h {
                for c in 0..w {
                    let l = luma[[r, c]].to_f64_();
                    for ch in 0..3 {
                        let v = img.pixels[[r, c, ch]].to_f64_();
                        out.pixels[[r, c, ch]] =
                            S::from_f64_((l + scale * (v - l)).clamp(0.0, 255.0));
                    }
                }
            }
        }
        AugmentOp::Contrast { scale } => {
            let mean = img.luma().iter().map(|v| v.to_f64_()).sum::<f64>()
                / (img.height() * img.width()) as f64;
            out.pixels
                .mapv_inplace(|v| S::from_f64_((mean + scale * (v.to_f64_() - mean)).clamp(0.0, 255.0)));
        }
        _ => {}
    }
    out
}

pub fn apply_image<S: Scalar>(op: &AugmentOp, img: &Image<S>) -> Result<Image<S>> {
    match ResolvedGeom::resolve(op, img.height(), img.width())? {
        Some(g) => Ok(warp_image(&g, img)),
        None => Ok(photometric(op, img)),
    }
}

/// Masks pass through photometric ops unchanged.
pub fn apply_mask(op: &AugmentOp, m: &StructureMask) -> Result<StructureMask> {
    match ResolvedGeom::resolve(op, m.height(), m.width())? {
        Some(g) => Ok(warp_mask(&g, m)),
        None => Ok(m.clone()),
    }
}

/// Apply one op to an image and its aligned companions with identical
/// geometric parameters.
pub fn apply<S: Scalar>(
    op: &AugmentOp,
    img: &Image<S>,
    companion_images: &[&Image<S>],
    companion_masks: &[&StructureMask],
) -> Result<(Image<S>, Vec<Image<S>>, Vec<StructureMask>)> {
    for ci in companion_images {
        if !ci.same_size(img) {
            return Err(Error::DimensionMismatch(
                "companion image size differs".into(),
            ));
        }
    }
    for cm in companion_masks {
        if cm.height() != img.height() || cm.width() != img.width() {
            return Err(Error::DimensionMismatch(
                "companion mask size differs".into(),
            ));
        }
    }
    let out = apply_image(op, img)?;
    let imgs = companion_images
        .iter()
        .map(|ci| apply_image(op, ci))
        .collect::<Result<Vec<_>>>()?;
    let masks = companion_masks
        .iter()
        .map(|cm| apply_mask(op, cm))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, imgs, masks))
}

pub fn apply_all<S: Scalar>(ops: &[AugmentOp], img: &Image<S>) -> Result<Image<S>> {
    let mut cur = img.clone();
    for op in ops {
        cur = apply_image(op, &cur)?;
    }
    Ok(cur)
}

/// Numeric ranges for sampled ops. Crop and resize are expressed as
/// fractions of the nominal training resolution so the published absolute
/// ranges (crop 64..256, resize 1/2..2 at 256 px) carry over to desk scale.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AugmentParams {
    pub rotate_range: (f64, f64),
    pub crop_frac: (f64, f64),
    pub resize_scale: (f64, f64),
    /// Sampled sizes are rounded to this multiple (network stride product).
    pub size_multiple: usize,
    pub noise_sigma: f64,
    pub blur_sigma: (f64, f64),
    pub hue_max_deg: f64,
    pub saturation_range: (f64, f64),
    pub contrast_range: (f64, f64),
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            rotate_range: (-90.0, 90.0),
            crop_frac: (0.25, 1.0),
            resize_scale: (0.5, 2.0),
            size_multiple: 1,
            noise_sigma: 5.0,
            blur_sigma: (0.5, 1.5),
            hue_max_deg: 10.0,
            saturation_range: (0.8, 1.2),
            contrast_range: (0.8, 1.2),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AugmentPolicy {
    pub harmless: Vec<AugmentKind>,
    pub harmful: Vec<AugmentKind>,
    pub params: AugmentParams,
    /// Composition length upper bound for [`sample_composition`].
    pub max_ops: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            harmless: vec![
                AugmentKind::Flip,
                AugmentKind::Rotate,
                AugmentKind::Crop,
                AugmentKind::Resize,
            ],
            harmful: vec![
                AugmentKind::Noise,
                AugmentKind::Blur,
                AugmentKind::Hue,
                AugmentKind::Saturation,
                AugmentKind::Contrast,
            ],
            params: AugmentParams::default(),
            max_ops: 2,
        }
    }
}

fn round_to_multiple(v: f64, m: usize) -> usize {
    if m <= 1 {
        return v.round().max(1.0) as usize;
    }
    let k = (v / m as f64).round().max(1.0) as usize;
    k * m
}

/// Sample one concrete op of the given kind for an HxW input.
pub fn sample_kind<R: Rng>(
    kind: AugmentKind,
    params: &AugmentParams,
    h: usize,
    w: usize,
    rng: &mut R,
) -> AugmentOp {
    match kind {
        AugmentKind::Flip => {
            if rng.gen::<bool>() {
                AugmentOp::FlipH
            } else {
                AugmentOp::FlipV
            }
        }
        AugmentKind::Rotate => AugmentOp::Rotate {
            degrees: rng.gen_range(params.rotate_range.0..=params.rotate_range.1),
        },
        AugmentKind::Crop => {
            let frac = rng.gen_range(params.crop_frac.0..=params.crop_frac.1);
            let side = round_to_multiple(frac * h.min(w) as f64, params.size_multiple)
                .clamp(params.size_multiple.max(1), h.min(w));
            let row = rng.gen_range(0..=(h - side));
            let col = rng.gen_range(0..=(w - side));
            AugmentOp::Crop {
                height: side,
                width: side,
                row,
                col,
            }
        }
        AugmentKind::Resize => {
            let scale = rng.gen_range(params.resize_scale.0..=params.resize_scale.1);
            AugmentOp::Resize {
                height: round_to_multiple(scale * h as f64, params.size_multiple),
                width: round_to_multiple(scale * w as f64, params.size_multiple),
            }
        }
        AugmentKind::Noise => AugmentOp::Noise {
            sigma: params.noise_sigma,
            seed: rng.gen(),
        },
        AugmentKind::Blur => AugmentOp::Blur {
            sigma: rng.gen_range(params.blur_sigma.0..=params.blur_sigma.1),
        },
        AugmentKind::Hue => AugmentOp::Hue {
            degrees: rng.gen_range(-params.hue_max_deg..=params.hue_max_deg),
        },
        AugmentKind::Saturation => AugmentOp::Saturation {
            scale: rng.gen_range(params.saturation_range.0..=params.saturation_range.1),
        },
        AugmentKind::Contrast => AugmentOp::Contrast {
            scale: rng.gen_range(params.contrast_range.0..=params.contrast_range.1),
        },
    }
}

/// Sample a single harmless op, uniform over the policy's harmless kinds.
pub fn sample_op<R: Rng>(policy: &AugmentPolicy, h: usize, w: usize, rng: &mut R) -> AugmentOp {
    if policy.harmless.is_empty() {
        return AugmentOp::Identity;
    }
    let kind = policy.harmless[rng.gen_range(0..policy.harmless.len())];
    sample_kind(kind, &policy.params, h, w, rng)
}

/// Sample a composition of 1..=max_ops harmless ops.
pub fn sample_composition<R: Rng>(
    policy: &AugmentPolicy,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Vec<AugmentOp> {
    if policy.harmless.is_empty() {
        return vec![AugmentOp::Identity];
    }
    let n = rng.gen_range(1..=policy.max_ops.max(1));
    let mut ops = Vec::with_capacity(n);
    let (mut ch, mut cw) = (h, w);
    for _ in 0..n {
        let op = sample_op(policy, ch, cw, rng);
        if let Ok(Some(g)) = ResolvedGeom::resolve(&op, ch, cw) {
            ch = g.out_h;
            cw = g.out_w;
        }
        ops.push(op);
    }
    ops
}
