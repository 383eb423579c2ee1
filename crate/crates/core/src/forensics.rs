//! Forensic verification: recover the hidden color from an extracted
//! watermark using the probe image's own structure as position guidance,
//! decode bits, and aggregate success / false-positive statistics.

use crate::codec::{decode_color, encode_bits, CodecConfig, ColorValue, DecodeOutcome};
use crate::error::{Error, Result};
use crate::image_core::Image;
use crate::scalar::Scalar;
use crate::structure::{canny_mask, sobel_mask, MaskSource, StructureMask};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ForensicsConfig {
    /// Max per-channel absolute error for a success verdict (TH).
    pub error_threshold: f64,
    /// Structure source used to build the guidance mask from the probe.
    pub guidance: MaskSource,
    /// Below this many guidance foreground pixels: insufficient structure.
    pub min_foreground: usize,
}

impl Default for ForensicsConfig {
    fn default() -> Self {
        ForensicsConfig {
            error_threshold: 10.0,
            guidance: MaskSource::Sobel,
            min_foreground: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Success,
    Failure,
    Unwatermarked,
    InsufficientStructure,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForensicsVerdict {
    pub recovered: [f64; 3],
    /// Max per-channel absolute deviation from the claimed color (or, with
    /// no claim, from the nearest codeword).
    pub error: f64,
    pub success: bool,
    pub outcome: Outcome,
    pub foreground: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodedBits {
    pub outcome: BitsOutcome,
    /// Set when the verdict error reaches t/2: the recovered color may snap
    /// to a neighboring codeword even though the verdict succeeded.
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BitsOutcome {
    Bits { hex: String, bits: Vec<u8> },
    Unwatermarked,
}

fn guidance_mask<S: Scalar>(probe: &Image<S>, cfg: &ForensicsConfig) -> Result<StructureMask> {
    match cfg.guidance {
        MaskSource::Sobel => sobel_mask(probe),
        MaskSource::Canny => canny_mask(probe, 30.0, 90.0),
        MaskSource::SemanticFile => Err(Error::InvalidConfig(
            "semantic guidance requires an explicit mask; use recover_color_with_mask".into(),
        )),
    }
}

/// Color recovery against an explicit guidance mask.
pub fn recover_color_with_mask<S: Scalar>(
    extracted: &Image<S>,
    mask: &StructureMask,
    claimed: Option<&ColorValue>,
    cfg: &ForensicsConfig,
    codec: &CodecConfig,
) -> Result<ForensicsVerdict> {
    if extracted.height() != mask.height() || extracted.width() != mask.width() {
        return Err(Error::DimensionMismatch(format!(
            "extracted {}x{} vs mask {}x{}",
            extracted.height(),
            extracted.width(),
            mask.height(),
            mask.width()
        )));
    }
    let fg = mask.foreground();
    if fg < cfg.min_foreground {
        return Ok(ForensicsVerdict {
            recovered: [0.0; 3],
            error: f64::INFINITY,
            success: false,
            outcome: Outcome::InsufficientStructure,
            foreground: fg,
        });
    }
    let mut sums = [0.0f64; 3];
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.mask[[r, c]] == 1 {
                for ch in 0..3 {
                    sums[ch] += extracted.pixels[[r, c, ch]].to_f64_();
                }
            }
        }
    }
    let recovered = [
        sums[0] / fg as f64,
        sums[1] / fg as f64,
        sums[2] / fg as f64,
    ];
    let th = cfg.error_threshold;
    let blank_dev = recovered
        .iter()
        .map(|&v| (v - 255.0).abs())
        .fold(0.0, f64::max);
    if blank_dev <= th {
        return Ok(ForensicsVerdict {
            recovered,
            error: blank_dev,
            success: false,
            outcome: Outcome::Unwatermarked,
            foreground: fg,
        });
    }
    let reference: [f64; 3] = match claimed {
        Some(c) => [c.r as f64, c.g as f64, c.b as f64],
        None => match decode_color(recovered, codec)? {
            DecodeOutcome::Bits(bits) => {
                let c = encode_bits(&bits, codec)?;
                [c.r as f64, c.g as f64, c.b as f64]
            }
            DecodeOutcome::Unwatermarked => [255.0; 3],
        },
    };
    let error = recovered
        .iter()
        .zip(reference.iter())
        .map(|(&v, &r)| (v - r).abs())
        .fold(0.0, f64::max);
    let success = error <= th;
    Ok(ForensicsVerdict {
        recovered,
        error,
        success,
        outcome: if success {
            Outcome::Success
        } else {
            Outcome::Failure
        },
        foreground: fg,
    })
}

/// Color recovery with guidance extracted from the probe image itself.
pub fn recover_color<S: Scalar>(
    extracted: &Image<S>,
    probe: &Image<S>,
    claimed: Option<&ColorValue>,
    cfg: &ForensicsConfig,
    codec: &CodecConfig,
) -> Result<ForensicsVerdict> {
    if !extracted.same_size(probe) {
        return Err(Error::DimensionMismatch(format!(
            "extracted {}x{} vs probe {}x{}",
            extracted.height(),
            extracted.width(),
            probe.height(),
            probe.width()
        )));
    }
    let mask = guidance_mask(probe, cfg)?;
    recover_color_with_mask(extracted, &mask, claimed, cfg, codec)
}

/// Decode the recovered color of a verdict into bits.
pub fn decode_verdict(
    verdict: &ForensicsVerdict,
    codec: &CodecConfig,
) -> Result<DecodedBits> {
    match verdict.outcome {
        Outcome::Unwatermarked => Ok(DecodedBits {
            outcome: BitsOutcome::Unwatermarked,
            ambiguous: false,
        }),
        Outcome::InsufficientStructure => Err(Error::Degenerate(
            "cannot decode an insufficient-structure verdict".into(),
        )),
        Outcome::Success | Outcome::Failure => {
            let ambiguous = verdict.error >= codec.color_step as f64 / 2.0;
            match decode_color(verdict.recovered, codec)? {
                DecodeOutcome::Bits(bits) => Ok(DecodedBits {
                    outcome: BitsOutcome::Bits {
                        hex: bits.to_hex(),
                        bits: bits.bits.clone(),
                    },
                    ambiguous,
                }),
                DecodeOutcome::Unwatermarked => Ok(DecodedBits {
                    outcome: BitsOutcome::Unwatermarked,
                    ambiguous,
                }),
            }
        }
    }
}

/// One item of a verdict batch: the extracted watermark, the probe image it
/// came from, the claimed color (None for clean images), and its name.
pub struct BatchItem<'a, S: Scalar> {
    pub name: String,
    pub extracted: &'a Image<S>,
    pub probe: &'a Image<S>,
    pub claimed: Option<ColorValue>,
    pub watermarked: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchReport {
    pub watermarked_total: usize,
    pub successes: usize,
    /// Successful extracting rate on the watermarked subset, percent.
    pub sr_percent: f64,
    pub clean_total: usize,
    pub false_positives: usize,
    pub fp_percent: f64,
    pub verdicts: Vec<NamedVerdict>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedVerdict {
    pub image: String,
    pub recovered_rgb: [f64; 3],
    pub error: f64,
    pub success: bool,
    pub outcome: Outcome,
    pub bits_hex: Option<String>,
}

pub fn verdict_batch<S: Scalar>(
    items: &[BatchItem<'_, S>],
    cfg: &ForensicsConfig,
    codec: &CodecConfig,
) -> Result<BatchReport> {
    if items.is_empty() {
        return Err(Error::InvalidConfig("empty forensics batch".into()));
    }
    let mut wm_total = 0usize;
    let mut successes = 0usize;
    let mut clean_total = 0usize;
    let mut fp = 0usize;
    let mut verdicts = Vec::with_capacity(items.len());
    for item in items {
        let v = recover_color(item.extracted, item.probe, item.claimed.as_ref(), cfg, codec)?;
        if item.watermarked {
            wm_total += 1;
            if v.success {
                successes += 1;
            }
        } else {
            clean_total += 1;
            if v.outcome != Outcome::Unwatermarked {
                fp += 1;
            }
        }
        let bits_hex = match v.outcome {
            Outcome::Success => match decode_verdict(&v, codec)?.outcome {
                BitsOutcome::Bits { hex, .. } => Some(hex),
                BitsOutcome::Unwatermarked => None,
            },
            _ => None,
        };
        verdicts.push(NamedVerdict {
            image: item.name.clone(),
            recovered_rgb: v.recovered,
            error: v.error,
            success: v.success,
            outcome: v.outcome,
            bits_hex,
        });
    }
    Ok(BatchReport {
        watermarked_total: wm_total,
        successes,
        sr_percent: if wm_total == 0 {
            0.0
        } else {
            100.0 * successes as f64 / wm_total as f64
        },
        clean_total,
        false_positives: fp,
        fp_percent: if clean_total == 0 {
            0.0
        } else {
            100.0 * fp as f64 / clean_total as f64
        },
        verdicts,
    })
}

/// Plain normalized correlation, used only for the unified-baseline rows.
pub fn normalized_correlation<S: Scalar>(a: &Image<S>, b: &Image<S>) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::DimensionMismatch("nc: size mismatch".into()));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.pixels.iter().zip(b.pixels.iter()) {
        let (x, y) = (x.to_f64_(), y.to_f64_());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("nc of an all-zero image".into()));
    }
    Ok(dot / (na * nb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::BitSequence;
    use crate::data::generate_clean_image;
    use crate::nn::layers::seeded_rng;
    use crate::watermark::synthesize;
    use rand::Rng;

    type Img = Image<f32>;

    fn edge_probe(seed: u64) -> (Img, StructureMask) {
        let img: Img = generate_clean_image(48, 48, &mut seeded_rng(seed));
        let mask = sobel_mask(&img).unwrap();
        (img, mask)
    }

    #[test]
    fn exact_watermark_recovers_with_zero_error() {
        let (probe, mask) = edge_probe(1);
        assert!(mask.foreground() >= 200);
        let color = ColorValue { r: 40, g: 80, b: 120 };
        let wm: crate::watermark::WatermarkImage<f32> = synthesize(&color, &mask).unwrap();
        let v = recover_color(
            &wm.image,
            &probe,
            Some(&color),
            &ForensicsConfig::default(),
            &CodecConfig::default(),
        )
        .unwrap();
        assert_eq!(v.outcome, Outcome::Success);
        assert!(v.error < 1e-6, "error {}", v.error);
    }

    #[test]
    fn blank_extraction_is_unwatermarked() {
        let (probe, _) = edge_probe(2);
        let blank = Img::constant(48, 48, [255.0; 3]);
        let v = recover_color(
            &blank,
            &probe,
            None,
            &ForensicsConfig::default(),
            &CodecConfig::default(),
        )
        .unwrap();
        assert_eq!(v.outcome, Outcome::Unwatermarked);
        let d = decode_verdict(&v, &CodecConfig::default()).unwrap();
        assert_eq!(d.outcome, BitsOutcome::Unwatermarked);
    }

    #[test]
    fn insufficient_structure_verdict_on_flat_probe() {
        let probe = Img::constant(48, 48, [128.0; 3]);
        let blank = Img::constant(48, 48, [255.0; 3]);
        let v = recover_color(
            &blank,
            &probe,
            None,
            &ForensicsConfig::default(),
            &CodecConfig::default(),
        )
        .unwrap();
        assert_eq!(v.outcome, Outcome::InsufficientStructure);
        assert!(decode_verdict(&v, &CodecConfig::default()).is_err());
    }

    #[test]
    fn codec_sweep_all_1024_codewords_roundtrip() {
        // End-to-end identity without networks, every codeword at t=20.
        let codec = CodecConfig::default();
        let cfg = ForensicsConfig::default();
        let (_, mask) = edge_probe(3);
        for index in 0..codec.codebook_size() {
            let bits = BitSequence::from_index(index, codec.capacity().unwrap());
            let color = encode_bits(&bits, &codec).unwrap();
            let wm: crate::watermark::WatermarkImage<f32> = synthesize(&color, &mask).unwrap();
            let v = recover_color_with_mask(&wm.image, &mask, Some(&color), &cfg, &codec)
                .unwrap();
            assert_eq!(v.outcome, Outcome::Success, "index {index}");
            let d = decode_verdict(&v, &codec).unwrap();
            match d.outcome {
                BitsOutcome::Bits { bits: got, .. } => assert_eq!(got, bits.bits, "index {index}"),
                BitsOutcome::Unwatermarked => panic!("index {index} decoded as unwatermarked"),
            }
        }
    }

    #[test]
    fn noisy_mean_concentrates_within_two() {
        // Uniform +-8 noise per pixel over >=500 foreground pixels: the
        // channel mean stays within 2 of the codeword in every trial.
        let codec = CodecConfig::default();
        let cfg = ForensicsConfig::default();
        let mut mask = ndarray::Array2::zeros((30, 30));
        for r in 0..20 {
            for c in 0..30 {
                mask[[r, c]] = 1;
            }
        }
        let mask = StructureMask::new(mask, MaskSource::Sobel).unwrap();
        assert!(mask.foreground() >= 500);
        let color = ColorValue { r: 100, g: 60, b: 140 };
        let base: crate::watermark::WatermarkImage<f32> = synthesize(&color, &mask).unwrap();
        let mut rng = seeded_rng(17);
        for trial in 0..1000 {
            let mut noisy = base.image.clone();
            for v in noisy.pixels.iter_mut() {
                *v += rng.gen_range(-8.0f32..8.0);
            }
            let v = recover_color_with_mask(&noisy, &mask, Some(&color), &cfg, &codec).unwrap();
            assert!(v.error <= 2.0, "trial {trial}: error {}", v.error);
            assert!(v.success);
        }
    }

    #[test]
    fn decode_examples_from_codec_oracle() {
        let codec = CodecConfig::default();
        let v = ForensicsVerdict {
            recovered: [20.0, 0.0, 20.0],
            error: 0.0,
            success: true,
            outcome: Outcome::Success,
            foreground: 500,
        };
        let d = decode_verdict(&v, &codec).unwrap();
        let expected = BitSequence::from_index(145, codec.capacity().unwrap());
        match d.outcome {
            BitsOutcome::Bits { bits, .. } => assert_eq!(bits, expected.bits),
            _ => panic!("expected bits"),
        }
        assert!(!d.ambiguous);

        // Within +-9 of the codeword: same bits, and ambiguity only at >= 10.
        let v9 = ForensicsVerdict {
            recovered: [29.0, 9.0, 11.0],
            error: 9.0,
            success: true,
            outcome: Outcome::Success,
            foreground: 500,
        };
        let d9 = decode_verdict(&v9, &codec).unwrap();
        match d9.outcome {
            BitsOutcome::Bits { bits, .. } => assert_eq!(bits, expected.bits),
            _ => panic!("expected bits"),
        }
        assert!(!d9.ambiguous);

        let v10 = ForensicsVerdict {
            error: 10.0,
            ..v9
        };
        assert!(decode_verdict(&v10, &codec).unwrap().ambiguous);
    }

    #[test]
    fn batch_statistics_and_fp_rule() {
        let (probe, mask) = edge_probe(4);
        let color = ColorValue { r: 60, g: 100, b: 20 };
        let wm: crate::watermark::WatermarkImage<f32> = synthesize(&color, &mask).unwrap();
        let blank = Img::constant(48, 48, [255.0; 3]);
        let items = vec![
            BatchItem {
                name: "good".into(),
                extracted: &wm.image,
                probe: &probe,
                claimed: Some(color),
                watermarked: true,
            },
            BatchItem {
                name: "failed".into(),
                extracted: &blank,
                probe: &probe,
                claimed: Some(color),
                watermarked: true,
            },
            BatchItem {
                name: "clean".into(),
                extracted: &blank,
                probe: &probe,
                claimed: None,
                watermarked: false,
            },
        ];
        let report = verdict_batch(&items, &ForensicsConfig::default(), &CodecConfig::default())
            .unwrap();
        assert_eq!(report.watermarked_total, 2);
        assert_eq!(report.successes, 1);
        assert_eq!(report.sr_percent, 50.0);
        assert_eq!(report.clean_total, 1);
        assert_eq!(report.false_positives, 0);
        assert_eq!(report.fp_percent, 0.0);
        assert!(report.verdicts[0].bits_hex.is_some());
        assert!(report.verdicts[2].bits_hex.is_none());
    }

    #[test]
    fn sr_monotone_in_threshold() {
        let (probe, mask) = edge_probe(5);
        let color = ColorValue { r: 120, g: 40, b: 200 };
        let base: crate::watermark::WatermarkImage<f32> = synthesize(&color, &mask).unwrap();
        let mut rng = seeded_rng(6);
        let noisy: Vec<Img> = (0..20)
            .map(|_| {
                let mut img = base.image.clone();
                let scale: f32 = rng.gen_range(0.0..25.0);
                for v in img.pixels.iter_mut() {
                    *v += rng.gen_range(-scale..scale.max(1e-3));
                }
                img
            })
            .collect();
        let codec = CodecConfig::default();
        let mut prev_sr = -1.0;
        for th in [2.0, 5.0, 10.0, 20.0, 40.0] {
            let cfg = ForensicsConfig {
                error_threshold: th,
                ..Default::default()
            };
            let items: Vec<BatchItem<'_, f32>> = noisy
                .iter()
                .enumerate()
                .map(|(i, img)| BatchItem {
                    name: format!("{i}"),
                    extracted: img,
                    probe: &probe,
                    claimed: Some(color),
                    watermarked: true,
                })
                .collect();
            let sr = verdict_batch(&items, &cfg, &codec).unwrap().sr_percent;
            assert!(sr >= prev_sr, "SR dropped from {prev_sr} to {sr} at TH={th}");
            prev_sr = sr;
        }
    }

    #[test]
    fn nc_basics() {
        let a = Img::constant(8, 8, [100.0, 50.0, 25.0]);
        assert!((normalized_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let z = Img::zeros(8, 8);
        assert!(normalized_correlation(&a, &z).is_err());
    }
}
