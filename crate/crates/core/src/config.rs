//! Experiment configuration: one JSON file captures every knob so a run is
//! reproducible from config + seeds alone.

use crate::attack::SurrogateSpec;
use crate::augment::AugmentParams;
use crate::codec::CodecConfig;
use crate::data::Degradation;
use crate::error::{Error, Result};
use crate::forensics::ForensicsConfig;
use crate::loss::TrainWeights;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub manifest: PathBuf,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub degradation: Degradation,
    /// Ratios for (watermark-train, adversarial-stage, test, surrogate-train).
    pub split_ratios: [f64; 4],
    pub generator_seed: u64,
    pub split_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Width multiplier for every network (desk-scale knob).
    pub network_scale: f64,
    /// Per-stage validation gate: SR percent at the forensics threshold.
    pub gate_sr_percent: f64,
    pub stage_max_epochs: usize,
    /// Fraction of the watermark-train split held out for stage gating.
    pub val_fraction: f64,
    /// Epoch budget for the mimic surrogate in the adversarial stage.
    pub mimic_epochs: usize,
    pub exnet_finetune_epochs: usize,
    /// Mimic quality floor (PSNR dB); below it the stage is vacuous.
    pub mimic_psnr_floor: f64,
    /// Ablation: enroll every augmentation at once instead of incrementally.
    pub from_scratch_ablation: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub codec: CodecConfig,
    pub forensics: ForensicsConfig,
    pub augment: AugmentParams,
    pub weights: TrainWeights,
    pub train: TrainConfig,
    pub surrogates: Vec<SurrogateSpec>,
    /// Deployed payload (hex); random per-sample colors are used in training.
    pub claimed_bits: Option<String>,
    /// NC success threshold for unified-baseline rows.
    pub nc_threshold: f64,
}

impl ExperimentConfig {
    /// Desk-scale defaults sized for CPU-only runs.
    pub fn desk_default(out_dir: impl Into<PathBuf>) -> Self {
        let out_dir = out_dir.into();
        ExperimentConfig {
            seed: 1,
            dataset: DatasetConfig {
                manifest: out_dir.join("data/manifest.json"),
                count: 260,
                height: 96,
                width: 96,
                degradation: Degradation::SyntheticStreaks { density: 1.5 },
                split_ratios: [0.45, 0.25, 0.1, 0.2],
                generator_seed: 11,
                split_seed: 12,
            },
            codec: CodecConfig::default(),
            forensics: ForensicsConfig::default(),
            augment: AugmentParams {
                size_multiple: 16,
                rotate_range: (-30.0, 30.0),
                crop_frac: (0.6, 1.0),
                resize_scale: (0.5, 1.5),
                ..AugmentParams::default()
            },
            // Desk scale sees ~100x fewer optimizer updates per epoch than a
            // full-size run; a larger step compensates (Adam's update
            // magnitude is ~lr per step regardless of gradient scale), but
            // too large a step destroys the identity-initialized embedder.
            weights: TrainWeights {
                lr_main: 5e-4,
                // Let the extraction objective outweigh fidelity 3:1 in the
                // embedder's gradient; with the trust-region cap this sets
                // how far the embedder may drift from its identity start to
                // strengthen the watermark imprint.
                lambda: 3.0,
                lr_exnet: Some(2e-3),
                ..TrainWeights::default()
            },
            train: TrainConfig {
                // Small batches maximize optimizer updates per epoch, the
                // scarce resource at desk scale.
                batch_size: 4,
                network_scale: 0.5,
                gate_sr_percent: 90.0,
                stage_max_epochs: 150,
                val_fraction: 0.15,
                mimic_epochs: 30,
                exnet_finetune_epochs: 20,
                mimic_psnr_floor: 24.0,
                from_scratch_ablation: false,
            },
            surrogates: SurrogateSpec::default_matrix(),
            claimed_bits: Some("0x291".into()),
            nc_threshold: 0.95,
            out_dir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train.val_fraction) || self.train.val_fraction == 0.0 {
            return Err(Error::InvalidConfig(format!(
                "val_fraction must be in (0,1), got {}",
                self.train.val_fraction
            )));
        }
        if !(0.0..=100.0).contains(&self.train.gate_sr_percent) {
            return Err(Error::InvalidConfig("gate_sr_percent out of range".into()));
        }
        if self.forensics.error_threshold < 0.0 {
            return Err(Error::InvalidConfig("error_threshold must be >= 0".into()));
        }
        if let Some(bits) = &self.claimed_bits {
            crate::codec::BitSequence::parse(bits, self.codec.capacity()?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&json)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
