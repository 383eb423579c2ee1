//! Acceptance gate: one test, eight criteria, one printed PASS/FAIL line
//! per criterion. Criteria 4–7 share a single trained system; tolerances
//! are pinned in the constants below.

use std::path::PathBuf;
use structmark::attack::{evaluate_extraction, train_surrogate};
use structmark::augment::{apply_image, apply_mask, sample_kind, AugmentKind, AugmentOp};
use structmark::codec::{encode_bits, BitSequence, CodecConfig};
use structmark::config::ExperimentConfig;
use structmark::data::{generate_clean_image, load_pair, Split};
use structmark::forensics::{
    decode_verdict, recover_color, recover_color_with_mask, BitsOutcome, ForensicsConfig, Outcome,
};
use structmark::loss::{compute_lambda5, loss_embed, loss_extract, TrainWeights};
use structmark::metrics::{psnr, ssim};
use structmark::networks::{forward_embed, forward_extract};
use structmark::nn::layers::seeded_rng;
use structmark::nn::Tensor;
use structmark::pipeline;
use structmark::structure::{sobel_mask, MaskSource, StructureMask};
use structmark::training::claimed_color;
use structmark::watermark::{random_color, synthesize};
use structmark::{Img, Real};

// Pinned tolerances.
const CODEC_STEP: u32 = 20;
const MASK_IOU_MIN: f64 = 0.7;
const LOSS_ORACLE_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-3;
const LAMBDA5_REL_TOL: f64 = 0.01;
const PSNR_MIN_DB: f64 = 30.0;
const SSIM_MIN: f64 = 0.90;
const SR_MIN_PERCENT: f64 = 95.0;
const FP_CLEAN_COUNT: usize = 100;
const ATTACK_SR_MIN: f64 = 60.0;
const NO_STAGE_SR_MAX: f64 = 10.0;
const UNIFIED_SR_MAX: f64 = 10.0;
const MIX_SR_MIN: f64 = 60.0;
const MIX_PSNR_TOL_DB: f64 = 1.0;
const FINETUNE_RETENTION_MIN: f64 = 50.0;
const DETERMINISM_SR_TOL: f64 = 3.0;

struct Gate {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn gate(gates: &mut Vec<Gate>, name: &'static str, pass: bool, detail: String) {
    gates.push(Gate { name, pass, detail });
}

/// Criterion 1: exhaustive codec round-trip through synthesis and
/// mask-guided recovery, no networks involved.
fn criterion1(gates: &mut Vec<Gate>) {
    let codec = CodecConfig::default();
    assert_eq!(codec.color_step, CODEC_STEP);
    let capacity = codec.capacity().unwrap();
    assert_eq!(capacity, 10);
    let forensics = ForensicsConfig::default();
    let mut rng = seeded_rng(2024);
    let img: Img = generate_clean_image(48, 48, &mut rng);
    let mask = sobel_mask(&img).unwrap();
    let mut failures = 0usize;
    let start = std::time::Instant::now();
    for index in 0..(1u64 << capacity) {
        let bits = BitSequence::from_index(index, capacity);
        let color = encode_bits(&bits, &codec).unwrap();
        let wm = synthesize::<Real>(&color, &mask).unwrap();
        let v = recover_color_with_mask(&wm.image, &mask, None, &forensics, &codec).unwrap();
        let decoded = decode_verdict(&v, &codec).unwrap();
        match decoded.outcome {
            BitsOutcome::Bits { bits: got, .. } if got == bits.bits => {}
            _ => failures += 1,
        }
    }
    let elapsed = start.elapsed();
    let pass = failures == 0 && elapsed.as_secs() < 60;
    gate(
        gates,
        "1 codec exhaustiveness",
        pass,
        format!("1024 patterns, {failures} failures, {:.1}s", elapsed.as_secs_f64()),
    );
}

/// Criterion 2: flip/rot90 commutation exact; general rotation/resize
/// mean IoU over 50 images.
fn criterion2(gates: &mut Vec<Gate>) {
    let start = std::time::Instant::now();
    let mut rng = seeded_rng(7);
    let mut exact_failures = 0usize;
    let mut iou_sum = 0.0;
    let mut iou_n = 0usize;
    for _ in 0..50 {
        let img: Img = generate_clean_image(64, 64, &mut rng);
        let m = sobel_mask(&img).unwrap();
        for op in [
            AugmentOp::FlipH,
            AugmentOp::FlipV,
            AugmentOp::Rotate { degrees: 90.0 },
        ] {
            let a = sobel_mask(&apply_image(&op, &img).unwrap()).unwrap();
            let b = apply_mask(&op, &m).unwrap();
            if a.mask != b.mask {
                exact_failures += 1;
            }
        }
        for op in [
            AugmentOp::Rotate { degrees: 20.0 },
            AugmentOp::Resize {
                height: 48,
                width: 48,
            },
        ] {
            let a = sobel_mask(&apply_image(&op, &img).unwrap()).unwrap();
            let b = apply_mask(&op, &m).unwrap();
            iou_sum += a.iou(&b);
            iou_n += 1;
        }
    }
    let mean_iou = iou_sum / iou_n as f64;
    let elapsed = start.elapsed();
    let pass = exact_failures == 0 && mean_iou >= MASK_IOU_MIN && elapsed.as_secs() < 300;
    gate(
        gates,
        "2 structure consistency",
        pass,
        format!(
            "exact failures {exact_failures}, mean IoU {mean_iou:.3} (min {MASK_IOU_MIN}), {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn probe_tensor(vals: &[f64], b: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_shape_vec((b, c, h, w), vals.to_vec()).unwrap()
}

/// Deterministic pseudo-random probe values in a pixel-ish range.
fn probe_vals(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            lo + (hi - lo) * ((state >> 11) as f64 / (1u64 << 53) as f64)
        })
        .collect()
}

/// Criterion 3: loss oracles on fixed 4x4 probes, finite-difference
/// gradient agreement, and the lambda5 balance oracle.
fn criterion3(gates: &mut Vec<Gate>) -> (bool, String) {
    let start = std::time::Instant::now();
    let w = TrainWeights::default();
    let mut ok = true;
    let mut notes = Vec::new();

    // loss_embed oracle: fidelity term is the plain mean squared error.
    let b = probe_tensor(&probe_vals(48, 1, 0.0, 255.0), 1, 3, 4, 4);
    let bw = probe_tensor(&probe_vals(48, 2, 0.0, 255.0), 1, 3, 4, 4);
    let oracle: f64 = b
        .iter()
        .zip(bw.iter())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / 48.0;
    let embed = loss_embed(&b, &bw, None, &w).unwrap();
    if (embed.total - oracle).abs() > LOSS_ORACLE_TOL * oracle.max(1.0) {
        ok = false;
        notes.push(format!("embed oracle {oracle:.6} got {:.6}", embed.total));
    }

    // loss_extract oracle: per-region means with lambda5 on the foreground.
    let ext = probe_tensor(&probe_vals(48, 3, 0.0, 255.0), 1, 3, 4, 4);
    let target = probe_tensor(&probe_vals(48, 4, 0.0, 255.0), 1, 3, 4, 4);
    let mut mask = Tensor::<f64>::zeros((1, 1, 4, 4));
    for (i, v) in mask.iter_mut().enumerate() {
        if i % 3 == 0 {
            *v = 1.0;
        }
    }
    let mut w5 = w;
    w5.lambda5 = 2.5;
    let mut fg = 0.0;
    let mut bg = 0.0;
    let (mut nfg, mut nbg) = (0usize, 0usize);
    for r in 0..4 {
        for c in 0..4 {
            let m = mask[[0, 0, r, c]] as f64;
            for ch in 0..3 {
                let e = ext[[0, ch, r, c]];
                if m > 0.5 {
                    fg += (e * m - target[[0, ch, r, c]] * m).powi(2);
                    nfg += 1;
                } else {
                    bg += (e - 255.0).powi(2);
                    nbg += 1;
                }
            }
        }
    }
    let oracle2 = w5.lambda3 * (w5.lambda5 * fg / nfg as f64 + bg / nbg as f64);
    let lx = loss_extract(&ext, Some(&(&target * &mask)), &mask, true, &w5).unwrap();
    if (lx.total - oracle2).abs() > LOSS_ORACLE_TOL * oracle2.max(1.0) {
        ok = false;
        notes.push(format!("extract oracle {oracle2:.6} got {:.6}", lx.total));
    }

    // Finite-difference gradient agreement on both losses.
    let mut max_rel = 0.0f64;
    {
        let eps = 1e-4f64;
        for i in 0..8 {
            let mut bw_p = bw.clone();
            let mut bw_m = bw.clone();
            bw_p.as_slice_mut().unwrap()[i * 5] += eps;
            bw_m.as_slice_mut().unwrap()[i * 5] -= eps;
            let lp = loss_embed(&b, &bw_p, None, &w).unwrap().total;
            let lm = loss_embed(&b, &bw_m, None, &w).unwrap().total;
            let fd = (lp - lm) / (2.0 * eps);
            let an = embed.grad_bw.as_slice().unwrap()[i * 5];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        for i in 0..8 {
            let mut e_p = ext.clone();
            let mut e_m = ext.clone();
            e_p.as_slice_mut().unwrap()[i * 5] += eps;
            e_m.as_slice_mut().unwrap()[i * 5] -= eps;
            let lp = loss_extract(&e_p, Some(&(&target * &mask)), &mask, true, &w5)
                .unwrap()
                .total;
            let lm = loss_extract(&e_m, Some(&(&target * &mask)), &mask, true, &w5)
                .unwrap()
                .total;
            let fd = (lp - lm) / (2.0 * eps);
            let an = lx.grad.as_slice().unwrap()[i * 5];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    if max_rel > GRAD_REL_TOL {
        ok = false;
        notes.push(format!("max FD rel err {max_rel:.2e}"));
    }

    // lambda5 oracle: |background| / |foreground| on a known mask set.
    let mut m1 = ndarray::Array2::<u8>::zeros((4, 4));
    for r in 0..4 {
        m1[[r, 0]] = 1;
    }
    let masks = [StructureMask::new(m1, MaskSource::Sobel).unwrap()];
    let refs: Vec<&StructureMask> = masks.iter().collect();
    let l5 = compute_lambda5(&refs).unwrap();
    let l5_oracle = 12.0 / 4.0;
    if (l5 - l5_oracle).abs() > LAMBDA5_REL_TOL * l5_oracle {
        ok = false;
        notes.push(format!("lambda5 oracle {l5_oracle} got {l5}"));
    }
    let elapsed = start.elapsed();
    if elapsed.as_secs() >= 300 {
        ok = false;
        notes.push("runtime budget exceeded".into());
    }
    let detail = if notes.is_empty() {
        format!("oracles within 1e-6, FD rel {max_rel:.2e}, lambda5 exact, {:.1}s", elapsed.as_secs_f64())
    } else {
        notes.join("; ")
    };
    gates.push(Gate {
        name: "3 loss/gradient suite",
        pass: ok,
        detail: detail.clone(),
    });
    (ok, detail)
}

fn acceptance_config() -> ExperimentConfig {
    let out: PathBuf = std::env::var("STRUCTMARK_ACCEPT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|_| {
            PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-run")
        });
    ExperimentConfig::desk_default(out)
}

struct HeavyState {
    cfg: ExperimentConfig,
    report: pipeline::AttackReport,
    train_err: Option<String>,
    c4: (bool, String),
}

/// Criterion 4 evaluation on the trained system plus the full attack run
/// used by criteria 5-7.
fn run_heavy() -> Result<HeavyState, String> {
    let cfg = acceptance_config();
    if cfg.out_dir.exists() {
        let _ = std::fs::remove_dir_all(&cfg.out_dir);
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| e.to_string())?;
    let ds = pipeline::prepare_data(&cfg).map_err(|e| e.to_string())?;
    assert!(ds.pairs.len() >= 200, "acceptance dataset must have >=200 pairs");

    let outcome = pipeline::train_full(&cfg, &ds);
    let (mut outcome, train_err) = match outcome {
        Ok(o) => (o, None),
        Err(e) => return Err(format!("training failed: {e}")),
    };

    // Criterion 4: fidelity + robustness on held-out covers, FP on fresh
    // clean images.
    let mut rng = seeded_rng(cfg.seed ^ 0xacce);
    let kinds = [
        AugmentKind::Flip,
        AugmentKind::Rotate,
        AugmentKind::Crop,
        AugmentKind::Resize,
    ];
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut trials = 0usize;
    let mut successes = 0usize;
    let test_entries = ds.subset(Split::Test);
    let mut n_pairs = 0usize;
    for entry in &test_entries {
        let (_, cover) = load_pair(entry).map_err(|e| e.to_string())?;
        let mask = sobel_mask(&cover).map_err(|e| e.to_string())?;
        let color = random_color(&cfg.codec, &mut rng).map_err(|e| e.to_string())?;
        let wm = synthesize(&color, &mask).map_err(|e| e.to_string())?;
        let marked =
            forward_embed(&mut outcome.system.hnet, &cover, &wm).map_err(|e| e.to_string())?;
        psnr_sum += psnr(&cover, &marked).map_err(|e| e.to_string())?;
        ssim_sum += ssim(&cover, &marked).map_err(|e| e.to_string())?;
        n_pairs += 1;
        for kind in kinds {
            use rand::Rng;
            let op = if rng.gen_bool(0.2) {
                AugmentOp::Identity
            } else {
                sample_kind(kind, &cfg.augment, marked.height(), marked.width(), &mut rng)
            };
            let probe = apply_image(&op, &marked).map_err(|e| e.to_string())?;
            let extracted = forward_extract(&mut outcome.system.exnet, &probe);
            let v = recover_color(&extracted, &probe, Some(&color), &cfg.forensics, &cfg.codec)
                .map_err(|e| e.to_string())?;
            trials += 1;
            if v.success {
                successes += 1;
            }
        }
    }
    let mean_psnr = psnr_sum / n_pairs as f64;
    let mean_ssim = ssim_sum / n_pairs as f64;
    let sr = 100.0 * successes as f64 / trials as f64;
    let mut fp = 0usize;
    let mut fp_rng = seeded_rng(cfg.seed ^ 0xc1ea);
    for _ in 0..FP_CLEAN_COUNT {
        let clean: Img =
            generate_clean_image(cfg.dataset.height, cfg.dataset.width, &mut fp_rng);
        let extracted = forward_extract(&mut outcome.system.exnet, &clean);
        let v = recover_color(&extracted, &clean, None, &cfg.forensics, &cfg.codec)
            .map_err(|e| e.to_string())?;
        if v.outcome != Outcome::Unwatermarked && v.outcome != Outcome::InsufficientStructure {
            fp += 1;
        }
    }
    let c4_pass =
        mean_psnr >= PSNR_MIN_DB && mean_ssim >= SSIM_MIN && sr >= SR_MIN_PERCENT && fp == 0;
    let c4_detail = format!(
        "PSNR {mean_psnr:.2} dB (min {PSNR_MIN_DB}), SSIM {mean_ssim:.3} (min {SSIM_MIN}), \
         SR {sr:.1}% over {trials} augmented trials (min {SR_MIN_PERCENT}%), \
         FP {fp}/{FP_CLEAN_COUNT} (must be 0)"
    );

    // Criteria 5-7 share the attack run.
    let (_, mut exnet_ns, _) = pipeline::load_trained(&cfg, pipeline::no_stage_checkpoint(&cfg))
        .map_err(|e| e.to_string())?;
    let harvest = pipeline::build_harvest(&cfg, &ds, &mut outcome.system.hnet)
        .map_err(|e| e.to_string())?;
    let report = pipeline::run_attack(&cfg, &harvest, &mut outcome.system.exnet, &mut exnet_ns)
        .map_err(|e| e.to_string())?;
    pipeline::save_attack_report(&cfg, &report).map_err(|e| e.to_string())?;

    // Criterion 8 (heavy half): retrain the with-DA surrogate with the same
    // seed and check the SR agrees within the pinned tolerance.
    let spec = {
        let mut s = cfg.surrogates[0];
        s.use_augmentation = true;
        s
    };
    let (mut sm2, _) = train_surrogate(
        &spec,
        &harvest.train_inputs,
        &harvest.train_wm,
        &harvest.train_clean,
        cfg.train.network_scale,
        cfg.train.batch_size,
    )
    .map_err(|e| e.to_string())?;
    let claimed = claimed_color(&cfg).map_err(|e| e.to_string())?;
    let (sr2, _) = evaluate_extraction(
        &mut sm2,
        &mut outcome.system.exnet,
        &harvest.eval_inputs,
        &harvest.eval_clean,
        &claimed,
        &cfg.forensics,
        &cfg.codec,
    )
    .map_err(|e| e.to_string())?;
    let sr1 = report
        .table1
        .cells
        .iter()
        .find(|c| c.method == "ours" && c.with_da && c.column == "unet-sm")
        .map(|c| c.sr_percent)
        .unwrap_or(f64::NAN);
    std::fs::write(
        cfg.out_dir.join("determinism_sr.txt"),
        format!("{sr1} {sr2}"),
    )
    .map_err(|e| e.to_string())?;

    Ok(HeavyState {
        cfg,
        report,
        train_err,
        c4: (c4_pass, c4_detail),
    })
}

fn table1_sr(state: &HeavyState, method: &str, with_da: bool) -> f64 {
    state
        .report
        .table1
        .cells
        .iter()
        .find(|c| c.method == method && c.with_da == with_da && c.column == "unet-sm")
        .map(|c| c.sr_percent)
        .unwrap_or(f64::NAN)
}

/// Fast subset for development: `cargo test --test acceptance -- --ignored`.
#[test]
#[ignore]
fn light_criteria_only() {
    let mut gates = Vec::new();
    criterion1(&mut gates);
    criterion2(&mut gates);
    criterion3(&mut gates);
    let mut all = true;
    for g in &gates {
        println!(
            "CRITERION {}: {} — {}",
            g.name,
            if g.pass { "PASS" } else { "FAIL" },
            g.detail
        );
        all &= g.pass;
    }
    assert!(all);
}

#[test]
fn acceptance() {
    let mut gates: Vec<Gate> = Vec::new();
    criterion1(&mut gates);
    criterion2(&mut gates);
    let (c3_ok_a, c3_detail_a) = criterion3(&mut gates);
    gates.pop(); // replaced below after the determinism re-run

    let heavy = run_heavy();
    match &heavy {
        Ok(state) => {
            if let Some(err) = &state.train_err {
                gate(&mut gates, "4 desk-scale training", false, err.clone());
            } else {
                let (pass, detail) = state.c4.clone();
                gate(&mut gates, "4 desk-scale training", pass, detail);
            }
            let ours = table1_sr(state, "ours", true);
            let no_stage = table1_sr(state, "ours-no-stage", true);
            let unified = table1_sr(state, "unified", true);
            let c5 = ours >= ATTACK_SR_MIN
                && no_stage <= NO_STAGE_SR_MAX
                && unified <= UNIFIED_SR_MAX;
            gate(
                &mut gates,
                "5 directional attack table",
                c5,
                format!(
                    "with-stage SR {ours:.1}% (min {ATTACK_SR_MIN}), \
                     no-stage SR {no_stage:.1}% (max {NO_STAGE_SR_MAX}), \
                     unified SR {unified:.1}% (max {UNIFIED_SR_MAX})"
                ),
            );
            let rows = &state.report.table2.rows;
            let base = rows.iter().find(|r| r.mix == "none");
            let clean = rows.iter().find(|r| r.mix == "clean-10");
            let harmful = rows.iter().find(|r| r.mix == "harmful-10");
            let c6 = match (base, clean, harmful) {
                (Some(b), Some(c), Some(h)) => {
                    let pass = c.sr_percent >= MIX_SR_MIN
                        && h.sr_percent >= MIX_SR_MIN
                        && (c.sm_psnr - b.sm_psnr).abs() <= MIX_PSNR_TOL_DB
                        && (h.sm_psnr - b.sm_psnr).abs() <= MIX_PSNR_TOL_DB;
                    (
                        pass,
                        format!(
                            "clean-10 SR {:.1}% PSNR {:+.2} dB vs unmixed; \
                             harmful-10 SR {:.1}% PSNR {:+.2} dB (SR min {MIX_SR_MIN}, dPSNR max {MIX_PSNR_TOL_DB})",
                            c.sr_percent,
                            c.sm_psnr - b.sm_psnr,
                            h.sr_percent,
                            h.sm_psnr - b.sm_psnr
                        ),
                    )
                }
                _ => (false, "mixing rows missing from table 2".into()),
            };
            gate(&mut gates, "6 data-mixing table", c6.0, c6.1);
            let ft = &state.report.finetune;
            gate(
                &mut gates,
                "7 fine-tune circumvention",
                ft.retention_percent >= FINETUNE_RETENTION_MIN,
                format!(
                    "pre {:.1}% post {:.1}% retention {:.1}% (min {FINETUNE_RETENTION_MIN}%)",
                    ft.pre_sr, ft.post_sr, ft.retention_percent
                ),
            );

            // Criterion 8: light criteria re-run byte-identically; heavy SR
            // reproduces within the pinned band.
            let mut gates1 = Vec::new();
            criterion1(&mut gates1);
            criterion2(&mut gates1);
            let (c3_ok_b, c3_detail_b) = criterion3(&mut gates1);
            let light_repro = c3_ok_a == c3_ok_b && c3_detail_a.split(", 0").next()
                == c3_detail_b.split(", 0").next();
            let det = std::fs::read_to_string(state.cfg.out_dir.join("determinism_sr.txt"))
                .unwrap_or_default();
            let parts: Vec<f64> = det
                .split_whitespace()
                .filter_map(|s| s.parse().ok())
                .collect();
            let heavy_repro = parts.len() == 2 && (parts[0] - parts[1]).abs() <= DETERMINISM_SR_TOL;
            gate(
                &mut gates,
                "8 determinism",
                light_repro && heavy_repro,
                format!(
                    "light criteria reproduce: {light_repro}; attack SR rerun delta {} (max {DETERMINISM_SR_TOL})",
                    if parts.len() == 2 {
                        format!("{:.1}", (parts[0] - parts[1]).abs())
                    } else {
                        "n/a".into()
                    }
                ),
            );
        }
        Err(e) => {
            for name in [
                "4 desk-scale training",
                "5 directional attack table",
                "6 data-mixing table",
                "7 fine-tune circumvention",
                "8 determinism",
            ] {
                gates.push(Gate {
                    name: match name {
                        "4 desk-scale training" => "4 desk-scale training",
                        "5 directional attack table" => "5 directional attack table",
                        "6 data-mixing table" => "6 data-mixing table",
                        "7 fine-tune circumvention" => "7 fine-tune circumvention",
                        _ => "8 determinism",
                    },
                    pass: false,
                    detail: format!("heavy pipeline failed: {e}"),
                });
            }
        }
    }

    // Re-insert criterion 3 at its place for ordered reporting.
    gates.insert(
        2,
        Gate {
            name: "3 loss/gradient suite",
            pass: c3_ok_a,
            detail: c3_detail_a,
        },
    );

    let mut all_pass = true;
    for g in &gates {
        let status = if g.pass { "PASS" } else { "FAIL" };
        println!("CRITERION {}: {} — {}", g.name, status, g.detail);
        all_pass &= g.pass;
    }
    assert!(all_pass, "one or more acceptance criteria failed (see lines above)");
}
