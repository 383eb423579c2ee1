//! Watermark bit codec: maps a bit sequence to a quantized RGB codeword and
//! back. The grid has `levels = floor(255/t)` points per channel at spacing
//! `t`; pure white (255,255,255) is reserved as the unwatermarked indicator
//! and is never a codeword. The mapping is mixed-radix so decoding is exact.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const BLANK: [u8; 3] = [255, 255, 255];

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CodecConfig {
    /// Color step `t` between adjacent grid points.
    pub color_step: u32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { color_step: 20 }
    }
}

impl CodecConfig {
    pub fn new(color_step: u32) -> Result<Self> {
        let cfg = CodecConfig { color_step };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.color_step == 0 {
            return Err(Error::InvalidCodec("color step must be >= 1".into()));
        }
        if self.levels() < 2 {
            return Err(Error::InvalidCodec(format!(
                "color step {} leaves a degenerate codebook ({} level per channel)",
                self.color_step,
                self.levels()
            )));
        }
        Ok(())
    }

    /// Grid points per channel: floor(255 / t).
    pub fn levels(&self) -> u32 {
        255 / self.color_step
    }

    /// Total codewords n = levels^3.
    pub fn codebook_size(&self) -> u64 {
        (self.levels() as u64).pow(3)
    }

    /// Max bit sequence length: floor(log2(levels^3)).
    pub fn capacity(&self) -> Result<usize> {
        self.validate()?;
        Ok(63 - self.codebook_size().leading_zeros() as usize)
    }
}

/// Ordered watermark bits, most significant first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitSequence {
    pub bits: Vec<u8>,
}

impl BitSequence {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidCodec("bits must be 0 or 1".into()));
        }
        Ok(BitSequence { bits })
    }

    pub fn from_index(index: u64, len: usize) -> Self {
        let bits = (0..len)
            .rev()
            .map(|i| ((index >> i) & 1) as u8)
            .collect();
        BitSequence { bits }
    }

    pub fn to_index(&self) -> u64 {
        self.bits.iter().fold(0u64, |acc, &b| (acc << 1) | b as u64)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Parse a CLI bit argument: either a binary string ("1010...") or hex
    /// ("0x2a"); hex payloads are zero-extended to `len` bits.
    pub fn parse(s: &str, len: usize) -> Result<Self> {
        if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
            let v = u64::from_str_radix(hex, 16)
                .map_err(|e| Error::InvalidCodec(format!("bad hex bits {s:?}: {e}")))?;
            if len < 64 && v >= (1u64 << len) {
                return Err(Error::CapacityOverflow {
                    len: 64 - v.leading_zeros() as usize,
                    capacity: len,
                });
            }
            Ok(Self::from_index(v, len))
        } else {
            let bits: Result<Vec<u8>> = s
                .chars()
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    _ => Err(Error::InvalidCodec(format!("bad binary bits {s:?}"))),
                })
                .collect();
            Self::new(bits?)
        }
    }

    pub fn to_hex(&self) -> String {
        format!("0x{:x}", self.to_index())
    }
}

impl std::fmt::Display for BitSequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// RGB codeword on the quantized grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorValue {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl ColorValue {
    pub fn rgb(&self) -> [u8; 3] {
        [self.r, self.g, self.b]
    }

    pub fn from_index(index: u64, cfg: &CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.levels() as u64;
        if index >= levels * levels * levels {
            return Err(Error::InvalidCodec(format!(
                "codeword index {index} out of range"
            )));
        }
        let t = cfg.color_step as u64;
        let r_idx = index / (levels * levels);
        let g_idx = (index / levels) % levels;
        let b_idx = index % levels;
        Ok(ColorValue {
            r: (r_idx * t) as u8,
            g: (g_idx * t) as u8,
            b: (b_idx * t) as u8,
        })
    }

    pub fn codeword_index(&self, cfg: &CodecConfig) -> u64 {
        let levels = cfg.levels() as u64;
        let t = cfg.color_step as u64;
        (self.r as u64 / t) * levels * levels + (self.g as u64 / t) * levels + self.b as u64 / t
    }
}

/// Result of decoding a possibly noisy color.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeOutcome {
    Bits(BitSequence),
    /// At least one channel sits nearer the reserved blank than any codeword.
    Unwatermarked,
}

pub fn encode_bits(s: &BitSequence, cfg: &CodecConfig) -> Result<ColorValue> {
    let capacity = cfg.capacity()?;
    if s.len() > capacity {
        return Err(Error::CapacityOverflow {
            len: s.len(),
            capacity,
        });
    }
    ColorValue::from_index(s.to_index(), cfg)
}

/// Snap one channel to the nearest grid point, ties toward the lower point.
/// Returns None when the value is strictly nearer to the reserved 255.
fn snap_channel(v: f64, cfg: &CodecConfig) -> Option<u32> {
    let t = cfg.color_step as f64;
    let max_idx = cfg.levels() - 1;
    // Round half down so ties break toward the lower grid point.
    let idx = ((v / t) - 0.5).ceil().max(0.0) as u32;
    let idx = idx.min(max_idx);
    let grid = (idx * cfg.color_step) as f64;
    if (v - 255.0).abs() < (v - grid).abs() {
        None
    } else {
        Some(idx)
    }
}

/// Decode a possibly off-grid color into bits of full capacity length.
pub fn decode_color(rgb: [f64; 3], cfg: &CodecConfig) -> Result<DecodeOutcome> {
    let capacity = cfg.capacity()?;
    let levels = cfg.levels() as u64;
    let mut idx = [0u64; 3];
    for (i, &v) in rgb.iter().enumerate() {
        match snap_channel(v, cfg) {
            Some(k) => idx[i] = k as u64,
            None => return Ok(DecodeOutcome::Unwatermarked),
        }
    }
    let index = idx[0] * levels * levels + idx[1] * levels + idx[2];
    Ok(DecodeOutcome::Bits(BitSequence::from_index(index, capacity)))
}
