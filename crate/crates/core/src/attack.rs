//! Attacker simulation: surrogate models trained on harvested
//! (input, watermarked output) pairs, with configurable architecture, loss,
//! attacker-side augmentation, data mixing, and fine-tuning circumvention.

use crate::augment::{apply_image, AugmentOp};
use crate::codec::{CodecConfig, ColorValue};
use crate::error::{Error, Result};
use crate::forensics::{recover_color, ForensicsConfig, Outcome};
use crate::image_core::Image;
use crate::metrics::psnr;
use crate::networks::{forward_extract, NetKind, Network, NetworkSpec};
use crate::nn::layers::seeded_rng;
use crate::nn::{images_to_batch, images_to_pixel_batch, Adam, Tensor};
use crate::Real;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

type Img = Image<Real>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurrogateLoss {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MixSpec {
    None,
    /// Fraction of samples whose target is replaced by the clean target.
    Clean { ratio: f64 },
    /// Fraction whose watermarked target gets a harmful op (noise) applied.
    Harmful { ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub arch: NetKind,
    pub loss: SurrogateLoss,
    pub use_augmentation: bool,
    pub mix: MixSpec,
    pub seed: u64,
    pub epochs: usize,
}

impl SurrogateSpec {
    pub fn new(arch: NetKind) -> Self {
        SurrogateSpec {
            arch,
            loss: SurrogateLoss::L2,
            use_augmentation: true,
            mix: MixSpec::None,
            seed: 77,
            epochs: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.arch {
            NetKind::Cnet | NetKind::Res9 | NetKind::Res16 | NetKind::UnetSm => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "{} is not a surrogate architecture",
                    other.as_str()
                )))
            }
        }
        match self.mix {
            MixSpec::Clean { ratio } | MixSpec::Harmful { ratio } => {
                if !(0.0..=1.0).contains(&ratio) {
                    return Err(Error::InvalidConfig(format!("mix ratio {ratio} invalid")));
                }
            }
            MixSpec::None => {}
        }
        Ok(())
    }

    /// The architecture sweep at fixed L2 loss.
    pub fn default_matrix() -> Vec<SurrogateSpec> {
        [NetKind::UnetSm, NetKind::Cnet, NetKind::Res9, NetKind::Res16]
            .into_iter()
            .map(SurrogateSpec::new)
            .collect()
    }
}

/// Controlled-variable discipline: across an arch sweep every non-arch field
/// must match; a loss sweep must fix arch = unet-sm.
pub fn check_controlled(specs: &[SurrogateSpec]) -> Result<()> {
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            if a.arch != b.arch {
                let (mut a2, b2) = (*a, *b);
                a2.arch = b2.arch;
                a2.seed = b2.seed;
                if a2 != b2 {
                    return Err(Error::InvalidConfig(format!(
                        "arch sweep not controlled: {a:?} vs {b:?}"
                    )));
                }
            }
            if a.loss != b.loss && !(a.arch == NetKind::UnetSm && b.arch == NetKind::UnetSm) {
                return Err(Error::InvalidConfig(
                    "loss sweep must fix arch = unet-sm".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Attacker-side augmentation, desk-scaled from the published absolute
/// settings (rotation ±30°, crop 224/256, resize 128/256).
pub fn attacker_da_op(h: usize, w: usize, multiple: usize, rng: &mut ChaCha8Rng) -> AugmentOp {
    let round = |v: f64| -> usize {
        if multiple <= 1 {
            v.round().max(1.0) as usize
        } else {
            ((v / multiple as f64).round().max(1.0) as usize) * multiple
        }
    };
    match rng.gen_range(0..4u8) {
        0 => AugmentOp::Identity,
        1 => AugmentOp::Rotate {
            degrees: rng.gen_range(-30.0..30.0),
        },
        2 => {
            let ch = round(h as f64 * 0.75).min(h);
            let cw = round(w as f64 * 0.75).min(w);
            AugmentOp::Crop {
                height: ch,
                width: cw,
                row: rng.gen_range(0..=h - ch),
                col: rng.gen_range(0..=w - cw),
            }
        }
        _ => AugmentOp::Resize {
            height: round(h as f64 * 0.5),
            width: round(w as f64 * 0.5),
        },
    }
}

fn pixel_loss_and_grad(
    out: &Tensor<Real>,
    target: &Tensor<Real>,
    loss: SurrogateLoss,
) -> (f64, Tensor<Real>) {
    let n = out.len() as f64;
    let mut acc = 0.0f64;
    let mut grad = Tensor::zeros(out.raw_dim());
    ndarray::Zip::from(&mut grad)
        .and(out)
        .and(target)
        .for_each(|g, &o, &t| {
            let d = (o - t) as f64;
            match loss {
                SurrogateLoss::L2 => {
                    acc += d * d;
                    *g = (2.0 * d / n) as Real;
                }
                SurrogateLoss::L1 => {
                    acc += d.abs();
                    *g = (d.signum() / n) as Real;
                }
            }
        });
    (acc / n, grad)
}

/// Generic supervised image-to-image training with optional attacker DA
/// applied jointly to input and target. Returns the final-epoch mean loss.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised(
    net: &mut Network<Real>,
    inputs: &[Img],
    targets: &[Img],
    epochs: usize,
    batch: usize,
    lr: f64,
    loss: SurrogateLoss,
    use_da: bool,
    seed: u64,
) -> Result<f64> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::Dataset("supervised pairs empty or mismatched".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut opt = Adam::new(lr);
    let mut last = 0.0;
    let multiple = net.spec.stride_multiple();
    for _epoch in 0..epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let (h, w) = (inputs[chunk[0]].height(), inputs[chunk[0]].width());
            let op = if use_da {
                attacker_da_op(h, w, multiple.max(2), &mut rng)
            } else {
                AugmentOp::Identity
            };
            let mut xs = Vec::with_capacity(chunk.len());
            let mut ys = Vec::with_capacity(chunk.len());
            for &i in chunk {
                xs.push(apply_image(&op, &inputs[i])?);
                ys.push(apply_image(&op, &targets[i])?);
            }
            let x = images_to_batch(&xs.iter().collect::<Vec<_>>());
            let y = images_to_pixel_batch(&ys.iter().collect::<Vec<_>>());
            let out = net.forward(&x, true);
            let (l, grad) = pixel_loss_and_grad(&out, &y, loss);
            net.backward(&grad);
            opt.step(&mut net.params_mut());
            net.zero_grad();
            epoch_loss += l;
            batches += 1;
        }
        last = epoch_loss / batches.max(1) as f64;
    }
    Ok(last)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub spec: SurrogateSpec,
    pub final_loss: f64,
    /// Attacker utility: PSNR of SM outputs against clean ground truth.
    pub psnr_vs_clean: f64,
}

/// Train a surrogate on harvested (input, watermarked-output) pairs.
/// `clean_targets` supplies mixing material and the utility reference.
pub fn train_surrogate(
    spec: &SurrogateSpec,
    inputs: &[Img],
    wm_targets: &[Img],
    clean_targets: &[Img],
    scale: f64,
    batch: usize,
) -> Result<(Network<Real>, SurrogateReport)> {
    spec.validate()?;
    if inputs.len() != wm_targets.len() || inputs.len() != clean_targets.len() {
        return Err(Error::Dataset("surrogate pair lists mismatched".into()));
    }
    let mut net = Network::build(NetworkSpec::new(spec.arch).with_scale(scale), spec.seed)?;
    let mut rng = seeded_rng(spec.seed ^ 0x51ab);
    // Resolve mixing into concrete per-sample targets up front.
    let mut targets: Vec<Img> = wm_targets.to_vec();
    match spec.mix {
        MixSpec::None => {}
        MixSpec::Clean { ratio } => {
            let k = (ratio * targets.len() as f64).round() as usize;
            let mut idx: Vec<usize> = (0..targets.len()).collect();
            idx.shuffle(&mut rng);
            for &i in &idx[..k] {
                targets[i] = clean_targets[i].clone();
            }
        }
        MixSpec::Harmful { ratio } => {
            let k = (ratio * targets.len() as f64).round() as usize;
            let mut idx: Vec<usize> = (0..targets.len()).collect();
            idx.shuffle(&mut rng);
            for &i in &idx[..k] {
                let op = AugmentOp::Noise {
                    sigma: 5.0,
                    seed: rng.gen(),
                };
                targets[i] = apply_image(&op, &targets[i])?;
            }
        }
    }
    let final_loss = train_supervised(
        &mut net,
        inputs,
        &targets,
        spec.epochs,
        batch,
        2e-4,
        spec.loss,
        spec.use_augmentation,
        spec.seed ^ 0x7ea1,
    )?;
    let psnr_vs_clean = mean_psnr(&mut net, inputs, clean_targets)?;
    let report = SurrogateReport {
        spec: *spec,
        final_loss,
        psnr_vs_clean,
    };
    Ok((net, report))
}

/// Mean PSNR of net(inputs) against references.
pub fn mean_psnr(net: &mut Network<Real>, inputs: &[Img], refs: &[Img]) -> Result<f64> {
    let mut acc = 0.0;
    for (a, b) in inputs.iter().zip(refs) {
        let out = infer(net, a);
        acc += psnr(&out, b)?;
    }
    Ok(acc / inputs.len() as f64)
}

/// Single-image eval-mode inference.
pub fn infer(net: &mut Network<Real>, img: &Img) -> Img {
    forward_extract(net, img)
}

/// Supervised fine-tuning on clean pairs (the circumvention attack).
/// Zero epochs leaves the checkpoint untouched.
pub fn finetune_attack(
    sm: &mut Network<Real>,
    clean_inputs: &[Img],
    clean_targets: &[Img],
    epochs: usize,
    seed: u64,
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    train_supervised(
        sm,
        clean_inputs,
        clean_targets,
        epochs,
        8,
        2e-4,
        SurrogateLoss::L2,
        false,
        seed,
    )?;
    Ok(())
}

/// SR of the extractor over a surrogate's outputs on held-out inputs, plus
/// the clean-image false-positive rate on ground-truth targets.
pub fn evaluate_extraction(
    sm: &mut Network<Real>,
    exnet: &mut Network<Real>,
    eval_inputs: &[Img],
    eval_clean: &[Img],
    claimed: &ColorValue,
    forensics: &ForensicsConfig,
    codec: &CodecConfig,
) -> Result<(f64, f64)> {
    let mut successes = 0usize;
    for a in eval_inputs {
        let out = infer(sm, a);
        let extracted = forward_extract(exnet, &out);
        let v = recover_color(&extracted, &out, Some(claimed), forensics, codec)?;
        if v.success {
            successes += 1;
        }
    }
    let sr = 100.0 * successes as f64 / eval_inputs.len() as f64;
    let mut fp = 0usize;
    for b in eval_clean {
        let extracted = forward_extract(exnet, b);
        let v = recover_color(&extracted, b, None, forensics, codec)?;
        if v.outcome != Outcome::Unwatermarked && v.outcome != Outcome::InsufficientStructure {
            fp += 1;
        }
    }
    let fp_rate = 100.0 * fp as f64 / eval_clean.len().max(1) as f64;
    Ok((sr, fp_rate))
}

/// Harvested data an attack cell needs.
pub struct Harvest {
    /// Surrogate-train inputs and the watermarked outputs they map to.
    pub train_inputs: Vec<Img>,
    pub train_wm: Vec<Img>,
    pub train_clean: Vec<Img>,
    /// Held-out inputs and their clean targets for evaluation.
    pub eval_inputs: Vec<Img>,
    pub eval_clean: Vec<Img>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub exnet_label: String,
    pub spec: SurrogateSpec,
    pub sr_percent: f64,
    pub fp_percent: f64,
    pub sm_psnr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackMatrix {
    pub cells: Vec<CellResult>,
}

/// Run every spec against every extractor variant (e.g. with/without the
/// adversarial stage). One surrogate is trained per spec and shared across
/// extractor variants.
#[allow(clippy::too_many_arguments)]
pub fn attack_matrix(
    specs: &[SurrogateSpec],
    harvest: &Harvest,
    exnets: &mut [(String, &mut Network<Real>)],
    claimed: &ColorValue,
    forensics: &ForensicsConfig,
    codec: &CodecConfig,
    scale: f64,
    batch: usize,
) -> Result<AttackMatrix> {
    check_controlled(specs)?;
    let mut cells = Vec::new();
    for spec in specs {
        let (mut sm, report) = train_surrogate(
            spec,
            &harvest.train_inputs,
            &harvest.train_wm,
            &harvest.train_clean,
            scale,
            batch,
        )?;
        for (label, exnet) in exnets.iter_mut() {
            let (sr, fp) = evaluate_extraction(
                &mut sm,
                exnet,
                &harvest.eval_inputs,
                &harvest.eval_clean,
                claimed,
                forensics,
                codec,
            )?;
            cells.push(CellResult {
                exnet_label: label.clone(),
                spec: *spec,
                sr_percent: sr,
                fp_percent: fp,
                sm_psnr: report.psnr_vs_clean,
            });
        }
    }
    Ok(AttackMatrix { cells })
}

/// Unified-baseline cell: the surrogate is trained against additively
/// watermarked targets; extraction success is judged by normalized
/// correlation of the output residual against the fixed watermark residual.
pub fn unified_baseline_cell(
    spec: &SurrogateSpec,
    train_inputs: &[Img],
    train_unified: &[Img],
    train_clean: &[Img],
    eval_inputs: &[Img],
    eval_clean: &[Img],
    unified_residual: &Img,
    nc_threshold: f64,
    scale: f64,
    batch: usize,
) -> Result<(CellResult, f64)> {
    let (mut sm, report) = train_surrogate(
        spec,
        train_inputs,
        train_unified,
        train_clean,
        scale,
        batch,
    )?;
    let mut successes = 0usize;
    let mut nc_sum = 0.0;
    for (a, clean) in eval_inputs.iter().zip(eval_clean) {
        let out = infer(&mut sm, a);
        let mut residual = Img::zeros(out.height(), out.width());
        ndarray::Zip::from(&mut residual.pixels)
            .and(&out.pixels)
            .and(&clean.pixels)
            .for_each(|r, &o, &c| *r = o - c);
        let nc = crate::forensics::normalized_correlation(&residual, unified_residual)
            .unwrap_or(0.0);
        nc_sum += nc;
        if nc >= nc_threshold {
            successes += 1;
        }
    }
    let sr = 100.0 * successes as f64 / eval_inputs.len() as f64;
    let mean_nc = nc_sum / eval_inputs.len() as f64;
    Ok((
        CellResult {
            exnet_label: "unified-baseline".into(),
            spec: *spec,
            sr_percent: sr,
            fp_percent: 0.0,
            sm_psnr: report.psnr_vs_clean,
        },
        mean_nc,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_clean_image;

    fn tiny_pairs(n: usize, seed: u64) -> (Vec<Img>, Vec<Img>) {
        let mut rng = seeded_rng(seed);
        let covers: Vec<Img> = (0..n).map(|_| generate_clean_image(24, 24, &mut rng)).collect();
        let inputs = covers
            .iter()
            .map(|c| {
                let mut i = c.clone();
                for v in i.pixels.iter_mut() {
                    *v = (*v * 0.8 + 20.0).min(255.0);
                }
                i
            })
            .collect();
        (inputs, covers)
    }

    #[test]
    fn spec_validation() {
        assert!(SurrogateSpec::new(NetKind::UnetSm).validate().is_ok());
        assert!(SurrogateSpec::new(NetKind::HnetUnet).validate().is_err());
        let mut s = SurrogateSpec::new(NetKind::Cnet);
        s.mix = MixSpec::Clean { ratio: 1.5 };
        assert!(s.validate().is_err());
    }

    #[test]
    fn controlled_discipline_enforced() {
        let ok = SurrogateSpec::default_matrix();
        check_controlled(&ok).unwrap();
        let mut bad = SurrogateSpec::default_matrix();
        bad[1].use_augmentation = false;
        assert!(check_controlled(&bad).is_err());
        // Loss sweep on unet-sm is allowed.
        let mut a = SurrogateSpec::new(NetKind::UnetSm);
        let b = SurrogateSpec::new(NetKind::UnetSm);
        a.loss = SurrogateLoss::L1;
        check_controlled(&[a, b]).unwrap();
        // Loss sweep across archs is not.
        let mut c = SurrogateSpec::new(NetKind::Cnet);
        c.loss = SurrogateLoss::L1;
        assert!(check_controlled(&[c, b]).is_err());
    }

    #[test]
    fn supervised_training_reduces_loss() {
        let (inputs, targets) = tiny_pairs(12, 1);
        let mut net = Network::build(
            NetworkSpec::new(NetKind::Cnet).with_scale(0.25),
            3,
        )
        .unwrap();
        let l0 = train_supervised(
            &mut net, &inputs, &targets, 1, 4, 2e-4, SurrogateLoss::L2, false, 5,
        )
        .unwrap();
        let l1 = train_supervised(
            &mut net, &inputs, &targets, 10, 4, 2e-4, SurrogateLoss::L2, false, 5,
        )
        .unwrap();
        assert!(l1 < l0, "loss did not decrease: {l0} -> {l1}");
    }

    #[test]
    fn fixed_seed_reproduces_sm_outputs() {
        let (inputs, targets) = tiny_pairs(8, 2);
        let spec = SurrogateSpec {
            epochs: 2,
            ..SurrogateSpec::new(NetKind::UnetSm)
        };
        let (mut a, ra) =
            train_surrogate(&spec, &inputs, &targets, &targets, 0.25, 4).unwrap();
        let (mut b, rb) =
            train_surrogate(&spec, &inputs, &targets, &targets, 0.25, 4).unwrap();
        assert_eq!(ra.psnr_vs_clean, rb.psnr_vs_clean);
        let pa = infer(&mut a, &inputs[0]);
        let pb = infer(&mut b, &inputs[0]);
        assert_eq!(pa.pixels, pb.pixels);
    }

    #[test]
    fn zero_epoch_finetune_is_identity() {
        let (inputs, targets) = tiny_pairs(8, 3);
        let spec = SurrogateSpec {
            epochs: 1,
            ..SurrogateSpec::new(NetKind::Cnet)
        };
        let (mut sm, _) = train_surrogate(&spec, &inputs, &targets, &targets, 0.25, 4).unwrap();
        let before: Vec<Vec<f32>> = sm
            .params()
            .iter()
            .map(|p| p.value.iter().cloned().collect())
            .collect();
        finetune_attack(&mut sm, &inputs, &targets, 0, 9).unwrap();
        let after: Vec<Vec<f32>> = sm
            .params()
            .iter()
            .map(|p| p.value.iter().cloned().collect())
            .collect();
        assert_eq!(before, after);
        finetune_attack(&mut sm, &inputs, &targets, 1, 9).unwrap();
        let changed: Vec<Vec<f32>> = sm
            .params()
            .iter()
            .map(|p| p.value.iter().cloned().collect())
            .collect();
        assert_ne!(before, changed);
    }

    #[test]
    fn mixing_changes_training_targets() {
        let (inputs, targets) = tiny_pairs(10, 4);
        let base = SurrogateSpec {
            epochs: 2,
            ..SurrogateSpec::new(NetKind::Cnet)
        };
        let mixed = SurrogateSpec {
            mix: MixSpec::Clean { ratio: 0.5 },
            ..base
        };
        let clean: Vec<Img> = inputs.clone();
        let (mut a, _) = train_surrogate(&base, &inputs, &targets, &clean, 0.25, 4).unwrap();
        let (mut b, _) = train_surrogate(&mixed, &inputs, &targets, &clean, 0.25, 4).unwrap();
        assert_ne!(infer(&mut a, &inputs[0]).pixels, infer(&mut b, &inputs[0]).pixels);
    }
}
