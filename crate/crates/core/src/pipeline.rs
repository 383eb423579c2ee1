//! End-to-end orchestration shared by the command-line interface and the
//! acceptance suite: dataset preparation, the two-phase training run,
//! attack-harvest construction, and the comparison/mixing/fine-tune
//! experiments.

use crate::attack::{
    attack_matrix, evaluate_extraction, finetune_attack, train_surrogate, unified_baseline_cell,
    AttackMatrix, Harvest, MixSpec, SurrogateSpec,
};
use crate::codec::ColorValue;
use crate::config::ExperimentConfig;
use crate::data::{generate_toy_task, load_pair, PairedDataset, Split};
use crate::error::{Error, Result};
use crate::networks::{forward_embed, Network};
use crate::report::{save_json, Table1Cell, Table1Report, Table2Report, Table2Row};
use crate::structure::sobel_mask;
use crate::training::{
    adversarial_stage, claimed_color, load_system, run_curriculum, save_system, AdvStageReport,
    TrainedSystem,
};
use crate::watermark::{synthesize, synthesize_unified, UnifiedWatermark};
use crate::{Img, Real};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Generate the toy paired dataset, split it, and write the manifest.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PairedDataset> {
    let data_dir = cfg
        .dataset
        .manifest
        .parent()
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.out_dir.join("data"));
    let mut ds = generate_toy_task(
        &data_dir,
        cfg.dataset.count,
        cfg.dataset.height,
        cfg.dataset.width,
        cfg.dataset.degradation,
        cfg.dataset.generator_seed,
    )?;
    ds.split(cfg.dataset.split_ratios, cfg.dataset.split_seed)?;
    ds.save_manifest(&cfg.dataset.manifest)?;
    Ok(ds)
}

/// Load the dataset manifest, with an actionable error when it is missing.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<PairedDataset> {
    if !cfg.dataset.manifest.exists() {
        return Err(Error::MissingArtifact(format!(
            "dataset manifest {} not found; run `prepare-data` first",
            cfg.dataset.manifest.display()
        )));
    }
    PairedDataset::load_manifest(&cfg.dataset.manifest)
}

pub fn final_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("checkpoints/final.ckpt")
}

/// Checkpoint taken after the curriculum but before the adversarial
/// training stage (the "ours without stage" comparison row).
pub fn no_stage_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("checkpoints/pre-adv-stage.ckpt")
}

pub struct TrainOutcome {
    pub system: TrainedSystem,
    pub adv: AdvStageReport,
}

/// Full training run: incremental curriculum, then the adversarial stage.
/// Saves the pre-stage and final checkpoints plus a JSON stage report.
pub fn train_full(cfg: &ExperimentConfig, dataset: &PairedDataset) -> Result<TrainOutcome> {
    let mut system = run_curriculum(cfg, dataset)?;
    save_system(
        &system.hnet,
        &system.exnet,
        &system.disc,
        no_stage_checkpoint(cfg),
        "pre-adv-stage",
    )?;
    let adv = adversarial_stage(
        cfg,
        dataset,
        &mut system.hnet,
        &mut system.exnet,
        &system.weights,
    )?;
    save_system(
        &system.hnet,
        &system.exnet,
        &system.disc,
        final_checkpoint(cfg),
        "final",
    )?;
    save_json(&adv, cfg.out_dir.join("adv_stage.json"))?;
    Ok(TrainOutcome { system, adv })
}

/// Load a saved system, with an actionable error when it is missing.
pub fn load_trained(
    cfg: &ExperimentConfig,
    path: PathBuf,
) -> Result<(Network<Real>, Network<Real>, Network<Real>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "checkpoint {} not found; run `train` first",
            path.display()
        )));
    }
    let (h, e, d, _) = load_system(path, cfg.train.network_scale)?;
    Ok((h, e, d))
}

/// Build attacker-visible data: watermarked outputs over the
/// surrogate-train split and held-out evaluation pairs from the test
/// split. Clean targets are also returned for baselines and mixing.
pub fn build_harvest(
    cfg: &ExperimentConfig,
    dataset: &PairedDataset,
    hnet: &mut Network<Real>,
) -> Result<Harvest> {
    let color = claimed_color(cfg)?;
    let mut train_inputs = Vec::new();
    let mut train_wm = Vec::new();
    let mut train_clean = Vec::new();
    for entry in dataset.subset(Split::SurrogateTrain) {
        let (input, cover) = load_pair(entry)?;
        let mask = sobel_mask(&cover)?;
        let wm = synthesize(&color, &mask)?;
        train_wm.push(forward_embed(hnet, &cover, &wm)?);
        train_inputs.push(input);
        train_clean.push(cover);
    }
    let mut eval_inputs = Vec::new();
    let mut eval_clean = Vec::new();
    for entry in dataset.subset(Split::Test) {
        let (input, cover) = load_pair(entry)?;
        eval_inputs.push(input);
        eval_clean.push(cover);
    }
    if train_inputs.is_empty() || eval_inputs.is_empty() {
        return Err(Error::Dataset(
            "surrogate-train or test split is empty".into(),
        ));
    }
    Ok(Harvest {
        train_inputs,
        train_wm,
        train_clean,
        eval_inputs,
        eval_clean,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnifiedRow {
    pub with_da: bool,
    pub sr_percent: f64,
    pub mean_nc: f64,
    pub sm_psnr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub pre_sr: f64,
    pub post_sr: f64,
    /// post as a percentage of pre (100 = no degradation).
    pub retention_percent: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    pub table1: Table1Report,
    pub matrices: Vec<AttackMatrix>,
    pub unified: Vec<UnifiedRow>,
    pub table2: Table2Report,
    pub finetune: FinetuneReport,
}

const FINETUNE_ATTACK_EPOCHS: usize = 10;

/// Unified-baseline materials: additively watermarked train targets plus
/// the reference residual of the fixed logo over a mid-gray cover.
fn unified_materials(harvest: &Harvest) -> Result<(Vec<Img>, Img)> {
    let (h, w) = (
        harvest.train_clean[0].height(),
        harvest.train_clean[0].width(),
    );
    let logo = UnifiedWatermark::<Real>::default_logo(h.min(w) / 2);
    let train_unified: Vec<Img> = harvest
        .train_clean
        .iter()
        .map(|c| synthesize_unified(c, &logo))
        .collect::<Result<_>>()?;
    let gray = Img::constant(h, w, [128.0; 3]);
    let marked = synthesize_unified(&gray, &logo)?;
    let mut residual = Img::zeros(h, w);
    ndarray::Zip::from(&mut residual.pixels)
        .and(&marked.pixels)
        .and(&gray.pixels)
        .for_each(|r, &m, &g| *r = m - g);
    Ok((train_unified, residual))
}

/// The full surrogate-attack comparison: every configured spec under both
/// augmentation settings against the extractor with and without the
/// adversarial stage, the unified additive baseline, the data-mixing
/// experiment, and the fine-tuning circumvention attack.
pub fn run_attack(
    cfg: &ExperimentConfig,
    harvest: &Harvest,
    exnet_final: &mut Network<Real>,
    exnet_no_stage: &mut Network<Real>,
) -> Result<AttackReport> {
    let claimed = claimed_color(cfg)?;
    let scale = cfg.train.network_scale;
    let batch = cfg.train.batch_size;
    let mut cells = Vec::new();
    let mut matrices = Vec::new();
    for with_da in [false, true] {
        let specs: Vec<SurrogateSpec> = cfg
            .surrogates
            .iter()
            .map(|s| {
                let mut s = *s;
                s.use_augmentation = with_da;
                s
            })
            .collect();
        let mut exnets = [
            ("ours".to_string(), &mut *exnet_final),
            ("ours-no-stage".to_string(), &mut *exnet_no_stage),
        ];
        let m = attack_matrix(
            &specs,
            harvest,
            &mut exnets,
            &claimed,
            &cfg.forensics,
            &cfg.codec,
            scale,
            batch,
        )?;
        for c in &m.cells {
            cells.push(Table1Cell {
                method: c.exnet_label.clone(),
                with_da,
                column: c.spec.arch.as_str().into(),
                sr_percent: c.sr_percent,
                fp_percent: c.fp_percent,
            });
        }
        matrices.push(m);
    }

    // Unified additive baseline, judged by normalized correlation. The
    // extractor plays no role here, so there is no with/without-stage split.
    let (train_unified, residual) = unified_materials(harvest)?;
    let base_spec = cfg
        .surrogates
        .first()
        .copied()
        .unwrap_or_else(|| SurrogateSpec::new(crate::networks::NetKind::UnetSm));
    let mut unified = Vec::new();
    for with_da in [false, true] {
        let mut spec = base_spec;
        spec.use_augmentation = with_da;
        let (cell, mean_nc) = unified_baseline_cell(
            &spec,
            &harvest.train_inputs,
            &train_unified,
            &harvest.train_clean,
            &harvest.eval_inputs,
            &harvest.eval_clean,
            &residual,
            cfg.nc_threshold,
            scale,
            batch,
        )?;
        cells.push(Table1Cell {
            method: "unified".into(),
            with_da,
            column: spec.arch.as_str().into(),
            sr_percent: cell.sr_percent,
            fp_percent: cell.fp_percent,
        });
        unified.push(UnifiedRow {
            with_da,
            sr_percent: cell.sr_percent,
            mean_nc,
            sm_psnr: cell.sm_psnr,
        });
    }

    // Data-mixing experiment on the with-DA first spec (clean and harmful
    // 10% mixes vs the unmixed baseline).
    let mut mix_spec = base_spec;
    mix_spec.use_augmentation = true;
    let mut table2 = Vec::new();
    for (label, mix) in [
        ("none", MixSpec::None),
        ("clean-10", MixSpec::Clean { ratio: 0.1 }),
        ("harmful-10", MixSpec::Harmful { ratio: 0.1 }),
    ] {
        let mut spec = mix_spec;
        spec.mix = mix;
        let (mut sm, report) = train_surrogate(
            &spec,
            &harvest.train_inputs,
            &harvest.train_wm,
            &harvest.train_clean,
            scale,
            batch,
        )?;
        let (sr, _) = evaluate_extraction(
            &mut sm,
            exnet_final,
            &harvest.eval_inputs,
            &harvest.eval_clean,
            &claimed,
            &cfg.forensics,
            &cfg.codec,
        )?;
        table2.push(Table2Row {
            mix: label.into(),
            sr_percent: sr,
            sm_psnr: report.psnr_vs_clean,
        });
    }

    // Fine-tuning circumvention: the attacker fine-tunes their surrogate
    // on a small clean set and hopes the watermark washes out.
    let (mut sm, _) = train_surrogate(
        &mix_spec,
        &harvest.train_inputs,
        &harvest.train_wm,
        &harvest.train_clean,
        scale,
        batch,
    )?;
    let (pre_sr, _) = evaluate_extraction(
        &mut sm,
        exnet_final,
        &harvest.eval_inputs,
        &harvest.eval_clean,
        &claimed,
        &cfg.forensics,
        &cfg.codec,
    )?;
    finetune_attack(
        &mut sm,
        &harvest.train_inputs,
        &harvest.train_clean,
        FINETUNE_ATTACK_EPOCHS,
        cfg.seed ^ 0x5eed,
    )?;
    let (post_sr, _) = evaluate_extraction(
        &mut sm,
        exnet_final,
        &harvest.eval_inputs,
        &harvest.eval_clean,
        &claimed,
        &cfg.forensics,
        &cfg.codec,
    )?;
    let retention = if pre_sr > 0.0 {
        100.0 * post_sr / pre_sr
    } else {
        0.0
    };

    Ok(AttackReport {
        table1: Table1Report { cells },
        matrices,
        unified,
        table2: Table2Report { rows: table2 },
        finetune: FinetuneReport {
            pre_sr,
            post_sr,
            retention_percent: retention,
        },
    })
}

pub fn save_attack_report(cfg: &ExperimentConfig, report: &AttackReport) -> Result<()> {
    save_json(report, cfg.out_dir.join("attack_report.json"))?;
    let text = format!(
        "{}\n{}\nfine-tune attack: pre {:.1}% post {:.1}% (retention {:.1}%)\n",
        report.table1.render_text(),
        report.table2.render_text(),
        report.finetune.pre_sr,
        report.finetune.post_sr,
        report.finetune.retention_percent
    );
    std::fs::write(cfg.out_dir.join("attack_table.txt"), &text)
        .map_err(|e| Error::io(cfg.out_dir.join("attack_table.txt"), e))
}

/// Embed the claimed watermark into every test-split cover and report a
/// per-image forensics verdict; used by the `embed`/`forensics` commands.
pub fn claimed(cfg: &ExperimentConfig) -> Result<ColorValue> {
    claimed_color(cfg)
}
