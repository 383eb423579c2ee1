//! Training losses. All image terms are mean-square distances in pixel
//! units ([0,255]); adversarial terms are logit BCE. Each loss returns its
//! scalar value together with analytic gradients w.r.t. the network outputs.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;
use crate::structure::StructureMask;
use serde::{Deserialize, Serialize};

/// Blank / unwatermarked indicator pixel value (all channels).
pub const BLANK: f64 = 255.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainWeights {
    /// Weight of the extraction objective in the total loss.
    pub lambda: f64,
    /// Embedding fidelity weight.
    pub lambda1: f64,
    /// Adversarial (generator) weight; 0 until the adversarial-loss phase.
    pub lambda2: f64,
    /// Watermarked-branch extraction weight.
    pub lambda3: f64,
    /// Clean-branch extraction weight.
    pub lambda4: f64,
    /// Adaptive foreground weight from `compute_lambda5`.
    pub lambda5: f64,
    pub lr_main: f64,
    /// Extractor learning rate during joint training; defaults to `lr_main`
    /// when unset. The extractor tolerates (and benefits from) a larger
    /// step than the identity-initialized embedder.
    #[serde(default)]
    pub lr_exnet: Option<f64>,
    pub lr_exnet_finetune: f64,
}

impl Default for TrainWeights {
    fn default() -> Self {
        TrainWeights {
            lambda: 1.0,
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
            lr_main: 2e-4,
            lr_exnet: None,
            lr_exnet_finetune: 2e-5,
        }
    }
}

impl TrainWeights {
    /// Weights after adversarial-loss enrollment.
    pub fn adversarial_phase(mut self) -> Self {
        self.lambda2 = 0.01;
        self.lambda = 10.0;
        self
    }
}

/// λ5 = Σ|M̄_i| / Σ|M_i| over a sample of training masks.
pub fn compute_lambda5(masks: &[&StructureMask]) -> Result<f64> {
    if masks.is_empty() {
        return Err(Error::InvalidMask("empty mask sample for lambda5".into()));
    }
    let fg: usize = masks.iter().map(|m| m.foreground()).sum();
    let bg: usize = masks.iter().map(|m| m.background()).sum();
    if fg == 0 {
        return Err(Error::Degenerate(
            "lambda5 undefined: zero total foreground".into(),
        ));
    }
    if bg == 0 {
        log::warn!("all-foreground mask sample: lambda5 = 0 (degenerate)");
    }
    Ok(bg as f64 / fg as f64)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub struct EmbedLoss<S: Scalar> {
    pub total: f64,
    pub fidelity: f64,
    pub adversarial: f64,
    /// d total / d b_w (pixel units).
    pub grad_bw: Tensor<S>,
    /// d total / d d_scores, for backprop through the discriminator.
    pub grad_scores: Option<Tensor<S>>,
}

/// L_H = λ1·mean‖b − b_w‖² + λ2·mean softplus(−D(b_w)).
pub fn loss_embed<S: Scalar>(
    b: &Tensor<S>,
    b_w: &Tensor<S>,
    d_scores: Option<&Tensor<S>>,
    w: &TrainWeights,
) -> Result<EmbedLoss<S>> {
    if b.dim() != b_w.dim() {
        return Err(Error::DimensionMismatch(format!(
            "loss_embed: {:?} vs {:?}",
            b.dim(),
            b_w.dim()
        )));
    }
    let n = b.len() as f64;
    let mut fid = 0.0f64;
    let mut grad = Tensor::zeros(b_w.raw_dim());
    ndarray::Zip::from(&mut grad)
        .and(b_w)
        .and(b)
        .for_each(|g, &bw, &bb| {
            let d = bw.to_f64_() - bb.to_f64_();
            fid += d * d;
            *g = S::from_f64_(w.lambda1 * 2.0 * d / n);
        });
    fid = w.lambda1 * fid / n;
    let mut adv = 0.0;
    let mut grad_scores = None;
    if w.lambda2 != 0.0 {
        let scores = d_scores.ok_or_else(|| {
            Error::Training("lambda2 != 0 requires discriminator scores".into())
        })?;
        let m = scores.len() as f64;
        let mut acc = 0.0;
        let mut gs = Tensor::zeros(scores.raw_dim());
        ndarray::Zip::from(&mut gs).and(scores).for_each(|g, &s| {
            let x = s.to_f64_();
            acc += softplus(-x);
            *g = S::from_f64_(w.lambda2 * (-sigmoid(-x)) / m);
        });
        adv = w.lambda2 * acc / m;
        grad_scores = Some(gs);
    }
    Ok(EmbedLoss {
        total: fid + adv,
        fidelity: fid,
        adversarial: adv,
        grad_bw: grad,
        grad_scores,
    })
}

pub struct ExtractLoss<S: Scalar> {
    pub total: f64,
    pub foreground: f64,
    pub background: f64,
    /// d total / d extracted (pixel units).
    pub grad: Tensor<S>,
}

/// Watermarked branch: λ3·[λ5·mean_fg ‖ext⊗M − W‖² + mean_bg ‖ext⊗M̄ − O‖²].
/// Clean branch: λ4·mean‖ext − O‖². Mask is (N,1,H,W) with 0/1 entries.
pub fn loss_extract<S: Scalar>(
    extracted: &Tensor<S>,
    target: Option<&Tensor<S>>,
    mask: &Tensor<S>,
    is_watermarked: bool,
    w: &TrainWeights,
) -> Result<ExtractLoss<S>> {
    let (n, c, h, wd) = extracted.dim();
    let blank = BLANK;
    let mut grad = Tensor::zeros(extracted.raw_dim());
    if !is_watermarked {
        let total_elems = extracted.len() as f64;
        let mut acc = 0.0;
        ndarray::Zip::from(&mut grad).and(extracted).for_each(|g, &e| {
            let d = e.to_f64_() - blank;
            acc += d * d;
            *g = S::from_f64_(w.lambda4 * 2.0 * d / total_elems);
        });
        let bg = w.lambda4 * acc / total_elems;
        return Ok(ExtractLoss {
            total: bg,
            foreground: 0.0,
            background: bg,
            grad,
        });
    }
    let target = target.ok_or_else(|| {
        Error::Training("watermarked branch requires a target watermark".into())
    })?;
    if target.dim() != extracted.dim() {
        return Err(Error::DimensionMismatch(format!(
            "loss_extract: extracted {:?} vs target {:?}",
            extracted.dim(),
            target.dim()
        )));
    }
    if mask.dim() != (n, 1, h, wd) {
        return Err(Error::DimensionMismatch(format!(
            "loss_extract: mask {:?} for extracted {:?}",
            mask.dim(),
            extracted.dim()
        )));
    }
    let mut fg_count = 0usize;
    for v in mask.iter() {
        if v.to_f64_() > 0.5 {
            fg_count += 1;
        }
    }
    let bg_count = mask.len() - fg_count;
    let fg_elems = (fg_count * c) as f64;
    let bg_elems = (bg_count * c) as f64;
    let mut fg_acc = 0.0;
    let mut bg_acc = 0.0;
    for i in 0..n {
        for r in 0..h {
            for col in 0..wd {
                let inside = mask[[i, 0, r, col]].to_f64_() > 0.5;
                for ch in 0..c {
                    let e = extracted[[i, ch, r, col]].to_f64_();
                    if inside {
                        let d = e - target[[i, ch, r, col]].to_f64_();
                        fg_acc += d * d;
                        grad[[i, ch, r, col]] =
                            S::from_f64_(w.lambda3 * w.lambda5 * 2.0 * d / fg_elems);
                    } else {
                        let d = e - blank;
                        bg_acc += d * d;
                        grad[[i, ch, r, col]] = S::from_f64_(w.lambda3 * 2.0 * d / bg_elems);
                    }
                }
            }
        }
    }
    let fg_term = if fg_count == 0 {
        0.0
    } else {
        w.lambda3 * w.lambda5 * fg_acc / fg_elems
    };
    let bg_term = if bg_count == 0 {
        0.0
    } else {
        w.lambda3 * bg_acc / bg_elems
    };
    Ok(ExtractLoss {
        total: fg_term + bg_term,
        foreground: fg_term,
        background: bg_term,
        grad,
    })
}

pub struct DiscLoss<S: Scalar> {
    pub total: f64,
    pub grad_real: Tensor<S>,
    pub grad_fake: Tensor<S>,
}

/// Discriminator BCE on logits: real → 1, fake → 0 (halved per side).
pub fn loss_disc<S: Scalar>(real: &Tensor<S>, fake: &Tensor<S>) -> DiscLoss<S> {
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    let mut total = 0.0;
    let mut grad_real = Tensor::zeros(real.raw_dim());
    let mut grad_fake = Tensor::zeros(fake.raw_dim());
    ndarray::Zip::from(&mut grad_real).and(real).for_each(|g, &s| {
        let x = s.to_f64_();
        total += 0.5 * softplus(-x) / nr;
        *g = S::from_f64_(0.5 * (-sigmoid(-x)) / nr);
    });
    ndarray::Zip::from(&mut grad_fake).and(fake).for_each(|g, &s| {
        let x = s.to_f64_();
        total += 0.5 * softplus(x) / nf;
        *g = S::from_f64_(0.5 * sigmoid(x) / nf);
    });
    DiscLoss {
        total,
        grad_real,
        grad_fake,
    }
}

/// Eq. 4 recombination: L = L_H + λ·L_EX.
pub fn total_loss(embed: f64, extract: f64, w: &TrainWeights) -> f64 {
    embed + w.lambda * extract
}
