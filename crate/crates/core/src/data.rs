//! Paired-dataset management plus a toy paired task: procedurally generated
//! edge-rich clean images with deterministic synthetic degradations standing
//! in for the protected model's restoration domain.

use crate::error::{Error, Result};
use crate::image_core::{load_image, save_image, Image};
use crate::scalar::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    WatermarkTrain,
    AdversarialStage,
    Test,
    SurrogateTrain,
}

pub const ALL_SPLITS: [Split; 4] = [
    Split::WatermarkTrain,
    Split::AdversarialStage,
    Split::Test,
    Split::SurrogateTrain,
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairEntry {
    pub input: PathBuf,
    pub target: PathBuf,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedDataset {
    pub pairs: Vec<PairEntry>,
    /// FNV-1a over pair file contents; fixed by generator seed.
    pub content_hash: String,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Degradation {
    None,
    /// Bright diagonal streaks; density = expected streaks per 1000 px².
    SyntheticStreaks { density: f64 },
    /// Seeded Gaussian noise on top of a low-frequency sinusoidal pattern.
    AdditiveStructuredNoise { sigma: f64 },
}

/// Procedural clean image: smooth background gradient plus random filled
/// shapes, lightly blurred so Sobel structure is wide enough to survive
/// geometric augmentation.
pub fn generate_clean_image<S: Scalar>(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image<S> {
    let mut px = ndarray::Array3::<f64>::zeros((h, w, 3));
    let base: [f64; 3] = [
        rng.gen_range(40.0..200.0),
        rng.gen_range(40.0..200.0),
        rng.gen_range(40.0..200.0),
    ];
    let grad: [f64; 3] = [
        rng.gen_range(-40.0..40.0),
        rng.gen_range(-40.0..40.0),
        rng.gen_range(-40.0..40.0),
    ];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                px[[r, c, ch]] =
                    base[ch] + grad[ch] * (r as f64 / h as f64 + c as f64 / w as f64) / 2.0;
            }
        }
    }
    let shapes = rng.gen_range(4..8);
    for _ in 0..shapes {
        let color: [f64; 3] = [
            rng.gen_range(10.0..245.0),
            rng.gen_range(10.0..245.0),
            rng.gen_range(10.0..245.0),
        ];
        let cr = rng.gen_range(0..h) as isize;
        let cc = rng.gen_range(0..w) as isize;
        let size = rng.gen_range(h.min(w) / 8..h.min(w) / 3).max(2) as isize;
        let circle = rng.gen_bool(0.5);
        for r in (cr - size).max(0)..(cr + size).min(h as isize) {
            for c in (cc - size).max(0)..(cc + size).min(w as isize) {
                let inside = if circle {
                    (r - cr).pow(2) + (c - cc).pow(2) <= size * size
                } else {
                    true
                };
                if inside {
                    for ch in 0..3 {
                        px[[r as usize, c as usize, ch]] = color[ch];
                    }
                }
            }
        }
    }
    // 3x3 box blur to soften shape boundaries into multi-pixel edges.
    let mut out = ndarray::Array3::<S>::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dr in -1i32..=1 {
                    for dc in -1i32..=1 {
                        let rr = r as i32 + dr;
                        let cc2 = c as i32 + dc;
                        if rr >= 0 && cc2 >= 0 && (rr as usize) < h && (cc2 as usize) < w {
                            acc += px[[rr as usize, cc2 as usize, ch]];
                            cnt += 1.0;
                        }
                    }
                }
                out[[r, c, ch]] = S::from_f64_((acc / cnt).clamp(0.0, 255.0));
            }
        }
    }
    Image { pixels: out }
}

/// Deterministic degraded copy of a clean target.
pub fn degrade<S: Scalar>(clean: &Image<S>, deg: &Degradation, rng: &mut ChaCha8Rng) -> Image<S> {
    let (h, w) = (clean.height(), clean.width());
    let mut img = clean.clone();
    match *deg {
        Degradation::None => {}
        Degradation::SyntheticStreaks { density } => {
            let count = ((h * w) as f64 / 1000.0 * density).round() as usize;
            for _ in 0..count {
                let r0 = rng.gen_range(0..h) as isize;
                let c0 = rng.gen_range(0..w) as isize;
                let len = rng.gen_range(h / 4..h.max(2)) as isize;
                let gain = rng.gen_range(60.0..120.0);
                for t in 0..len {
                    let r = r0 + t;
                    let c = c0 + t / 2;
                    if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                        break;
                    }
                    for ch in 0..3 {
                        let v = img.pixels[[r as usize, c as usize, ch]].to_f64_();
                        img.pixels[[r as usize, c as usize, ch]] =
                            S::from_f64_((v + gain).min(255.0));
                    }
                }
            }
        }
        Degradation::AdditiveStructuredNoise { sigma } => {
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            for r in 0..h {
                for c in 0..w {
                    let wave = 18.0 * ((r as f64 * 0.35 + c as f64 * 0.2 + phase).sin());
                    for ch in 0..3 {
                        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                        let u2: f64 = rng.gen();
                        let n = (-2.0 * u1.ln()).sqrt()
                            * (std::f64::consts::TAU * u2).cos()
                            * sigma;
                        let v = img.pixels[[r, c, ch]].to_f64_();
                        img.pixels[[r, c, ch]] = S::from_f64_((v + wave + n).clamp(0.0, 255.0));
                    }
                }
            }
        }
    }
    img
}

/// Generate `count` paired PNGs under `out_dir` (inputs/ and targets/).
pub fn generate_toy_task(
    out_dir: impl AsRef<Path>,
    count: usize,
    height: usize,
    width: usize,
    degradation: Degradation,
    seed: u64,
) -> Result<PairedDataset> {
    if count < 200 {
        return Err(Error::Dataset(format!(
            "toy task requires at least 200 clean images, got {count}"
        )));
    }
    let out_dir = out_dir.as_ref();
    let inputs = out_dir.join("inputs");
    let targets = out_dir.join("targets");
    for d in [&inputs, &targets] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = crate::nn::layers::seeded_rng(seed);
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let clean: Image<crate::Real> = generate_clean_image(height, width, &mut rng);
        let clean = clean.quantize();
        let degraded = degrade(&clean, &degradation, &mut rng).quantize();
        let tp = targets.join(format!("{i:05}.png"));
        let ip = inputs.join(format!("{i:05}.png"));
        save_image(&clean, &tp)?;
        save_image(&degraded, &ip)?;
        pairs.push(PairEntry {
            input: ip,
            target: tp,
            split: None,
        });
    }
    let mut ds = PairedDataset {
        pairs,
        content_hash: String::new(),
    };
    ds.content_hash = ds.compute_hash()?;
    Ok(ds)
}

impl PairedDataset {
    /// FNV-1a 64 over every pair's file bytes, in manifest order.
    pub fn compute_hash(&self) -> Result<String> {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        for p in &self.pairs {
            for path in [&p.input, &p.target] {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                feed(&bytes);
            }
        }
        Ok(format!("{hash:016x}"))
    }

    /// Deterministic disjoint splits; ratios ordered as `ALL_SPLITS`.
    pub fn split(&mut self, ratios: [f64; 4], seed: u64) -> Result<()> {
        let sum: f64 = ratios.iter().sum();
        if sum > 1.0 + 1e-9 || ratios.iter().any(|&r| r < 0.0) {
            return Err(Error::Dataset(format!(
                "split ratios must be non-negative and sum to <= 1, got {ratios:?}"
            )));
        }
        let n = self.pairs.len();
        let counts: Vec<usize> = ratios.iter().map(|r| (r * n as f64).floor() as usize).collect();
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Dataset(format!(
                "a split would be empty: counts {counts:?} from {n} pairs"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        // Fisher-Yates with the seeded stream for reproducibility.
        let mut rng = crate::nn::layers::seeded_rng(seed);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for p in &mut self.pairs {
            p.split = None;
        }
        let mut cursor = 0usize;
        for (split, &count) in ALL_SPLITS.iter().zip(&counts) {
            for &idx in &order[cursor..cursor + count] {
                self.pairs[idx].split = Some(*split);
            }
            cursor += count;
        }
        Ok(())
    }

    pub fn subset(&self, split: Split) -> Vec<&PairEntry> {
        self.pairs
            .iter()
            .filter(|p| p.split == Some(split))
            .collect()
    }

    pub fn save_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&json)?)
    }
}

/// Load one pair, verifying dimension match.
pub fn load_pair(entry: &PairEntry) -> Result<(Image<crate::Real>, Image<crate::Real>)> {
    let a = load_image(&entry.input)?;
    let b = load_image(&entry.target)?;
    if !a.same_size(&b) {
        return Err(Error::Dataset(format!(
            "pair dimension mismatch: {} vs {}",
            entry.input.display(),
            entry.target.display()
        )));
    }
    Ok((a, b))
}
