use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use structmark::codec::{encode_bits, BitSequence};
use structmark::config::ExperimentConfig;
use structmark::data::{load_pair, Split};
use structmark::error::{Error, Result};
use structmark::forensics::{decode_verdict, recover_color, BitsOutcome};
use structmark::image_core::{load_image, save_image};
use structmark::metrics::{psnr, ssim};
use structmark::networks::{forward_embed, forward_extract};
use structmark::pipeline;
use structmark::report::{figure_grid, save_json, FigureRow};
use structmark::structure::sobel_mask;
use structmark::watermark::synthesize;
use structmark::Img;

#[derive(Parser)]
#[command(
    name = "structmark",
    about = "Structure-aligned deep model watermarking: train, embed, attack, verify"
)]
struct Cli {
    /// Experiment config JSON; defaults to the committed desk-scale config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker count for parallelizable phases (this build runs 1).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the toy paired dataset and write its split manifest.
    PrepareData,
    /// Run the incremental curriculum plus the adversarial training stage.
    Train {
        /// Train with every augmentation enabled from the start instead of
        /// the curriculum; completes regardless of gates and reports the
        /// color-drift diagnostic.
        #[arg(long)]
        from_scratch_ablation: bool,
    },
    /// Watermark every PNG in a directory with the trained embedder.
    Embed {
        /// Directory of cover images.
        #[arg(long)]
        input: PathBuf,
        /// Where watermarked images are written.
        #[arg(long)]
        output: PathBuf,
        /// Hex payload to embed; defaults to the config's claimed bits.
        #[arg(long)]
        bits: Option<String>,
    },
    /// Run the surrogate attack matrix, mixing, and fine-tune experiments.
    Attack,
    /// Verify a directory of images against the (claimed) payload.
    Forensics {
        /// Directory of probe images.
        #[arg(long)]
        dir: PathBuf,
        /// Hex payload claimed for verification; defaults to the config's.
        #[arg(long)]
        bits: Option<String>,
    },
    /// Render attack tables and qualitative figure grids from saved runs.
    Report,
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs/desk"));
            ExperimentConfig::desk_default(out)
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    if let Ok(device) = std::env::var("STRUCTMARK_DEVICE") {
        if device != "cpu" {
            return Err(Error::InvalidConfig(format!(
                "STRUCTMARK_DEVICE={device} unsupported; this build is CPU-only"
            )));
        }
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    Ok(cfg)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|s| s.to_str()) == Some("png"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no PNG files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

fn payload_color(
    cfg: &ExperimentConfig,
    bits: &Option<String>,
) -> Result<structmark::codec::ColorValue> {
    match bits {
        Some(hex) => {
            let seq = BitSequence::parse(hex, cfg.codec.capacity()?)?;
            encode_bits(&seq, &cfg.codec)
        }
        None => pipeline::claimed(cfg),
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    if cli.jobs > 1 {
        log::warn!("--jobs {} requested; this build executes serially", cli.jobs);
    }
    match &cli.cmd {
        Cmd::PrepareData => {
            let ds = pipeline::prepare_data(&cfg)?;
            cfg.save(cfg.out_dir.join("config.json"))?;
            println!(
                "dataset ready: {} pairs, manifest {}",
                ds.pairs.len(),
                cfg.dataset.manifest.display()
            );
        }
        Cmd::Train {
            from_scratch_ablation,
        } => {
            let mut cfg = cfg;
            cfg.train.from_scratch_ablation |= *from_scratch_ablation;
            let ds = pipeline::load_dataset(&cfg)?;
            if cfg.train.from_scratch_ablation {
                let sys = structmark::training::run_curriculum(&cfg, &ds)?;
                println!(
                    "from-scratch ablation complete; gated={} color-drift={:.2}",
                    sys.gated,
                    sys.color_drift.unwrap_or(f64::NAN)
                );
            } else {
                let outcome = pipeline::train_full(&cfg, &ds)?;
                println!(
                    "training complete; mimic PSNR {:.2} dB, adversarial-stage SR {:.1}% -> {:.1}%",
                    outcome.adv.mimic_psnr_vs_bw, outcome.adv.pre_sr, outcome.adv.post_sr
                );
            }
        }
        Cmd::Embed {
            input,
            output,
            bits,
        } => {
            let (mut hnet, _, _) = pipeline::load_trained(&cfg, pipeline::final_checkpoint(&cfg))?;
            let color = payload_color(&cfg, bits)?;
            std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
            let mut reports = Vec::new();
            for path in png_files(input)? {
                let cover: Img = load_image(&path)?;
                let mask = sobel_mask(&cover)?;
                let wm = synthesize(&color, &mask)?;
                let marked = forward_embed(&mut hnet, &cover, &wm)?;
                let name = path.file_name().unwrap();
                let dest = output.join(name);
                save_image(&marked, &dest)?;
                reports.push(serde_json::json!({
                    "path": dest.display().to_string(),
                    "psnr": psnr(&cover, &marked)?,
                    "ssim": ssim(&cover, &marked)?,
                }));
            }
            save_json(&reports, output.join("embed_report.json"))?;
            println!(
                "embedded {} images with payload rgb {:?}",
                reports.len(),
                color.rgb()
            );
        }
        Cmd::Attack => {
            let ds = pipeline::load_dataset(&cfg)?;
            let (mut hnet, mut exnet, _) =
                pipeline::load_trained(&cfg, pipeline::final_checkpoint(&cfg))?;
            let (_, mut exnet_ns, _) =
                pipeline::load_trained(&cfg, pipeline::no_stage_checkpoint(&cfg))?;
            let harvest = pipeline::build_harvest(&cfg, &ds, &mut hnet)?;
            let report = pipeline::run_attack(&cfg, &harvest, &mut exnet, &mut exnet_ns)?;
            pipeline::save_attack_report(&cfg, &report)?;
            println!("{}", report.table1.render_text());
            println!("{}", report.table2.render_text());
        }
        Cmd::Forensics { dir, bits } => {
            let (_, mut exnet, _) =
                pipeline::load_trained(&cfg, pipeline::final_checkpoint(&cfg))?;
            let color = payload_color(&cfg, bits)?;
            let mut lines = Vec::new();
            let mut successes = 0usize;
            let files = png_files(dir)?;
            for path in &files {
                let probe: Img = load_image(path)?;
                let extracted = forward_extract(&mut exnet, &probe);
                let v = recover_color(&extracted, &probe, Some(&color), &cfg.forensics, &cfg.codec)?;
                let bits_hex = match decode_verdict(&v, &cfg.codec) {
                    Ok(d) => match d.outcome {
                        BitsOutcome::Bits { hex, .. } => Some(hex),
                        BitsOutcome::Unwatermarked => None,
                    },
                    Err(_) => None,
                };
                if v.success {
                    successes += 1;
                }
                let line = serde_json::json!({
                    "image": path.display().to_string(),
                    "recovered_rgb": v.recovered,
                    "error": v.error,
                    "success": v.success,
                    "outcome": v.outcome,
                    "bits_hex": bits_hex,
                });
                println!("{line}");
                lines.push(line);
            }
            save_json(&lines, cfg.out_dir.join("forensics_report.json"))?;
            println!(
                "success rate: {:.1}% ({}/{})",
                100.0 * successes as f64 / files.len() as f64,
                successes,
                files.len()
            );
        }
        Cmd::Report => {
            let report_path = cfg.out_dir.join("attack_report.json");
            if report_path.exists() {
                let report: pipeline::AttackReport = serde_json::from_str(
                    &std::fs::read_to_string(&report_path)
                        .map_err(|e| Error::io(&report_path, e))?,
                )?;
                println!("{}", report.table1.render_text());
                println!("{}", report.table2.render_text());
                println!(
                    "fine-tune attack: pre {:.1}% post {:.1}% (retention {:.1}%)",
                    report.finetune.pre_sr,
                    report.finetune.post_sr,
                    report.finetune.retention_percent
                );
            } else {
                println!("no attack report at {}; skipping tables", report_path.display());
            }
            // Qualitative grid from a few test-split pairs.
            let ds = pipeline::load_dataset(&cfg)?;
            let (mut hnet, mut exnet, _) =
                pipeline::load_trained(&cfg, pipeline::final_checkpoint(&cfg))?;
            let color = pipeline::claimed(&cfg)?;
            let mut rows_data = Vec::new();
            for entry in ds.subset(Split::Test).into_iter().take(4) {
                let (_, cover) = load_pair(entry)?;
                let mask = sobel_mask(&cover)?;
                let wm = synthesize(&color, &mask)?;
                let marked = forward_embed(&mut hnet, &cover, &wm)?;
                let extracted = forward_extract(&mut exnet, &marked);
                rows_data.push((cover, marked, wm.image, extracted));
            }
            if rows_data.is_empty() {
                return Err(Error::MissingArtifact(
                    "test split is empty; cannot render figures".into(),
                ));
            }
            let rows: Vec<FigureRow<'_, structmark::Real>> = rows_data
                .iter()
                .map(|(c, m, w, e)| FigureRow {
                    cover: c,
                    watermarked: m,
                    watermark_truth: w,
                    extracted: e,
                })
                .collect();
            let fig = cfg.out_dir.join("figure_grid.png");
            figure_grid(&rows, &fig)?;
            println!("figure grid written to {}", fig.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
