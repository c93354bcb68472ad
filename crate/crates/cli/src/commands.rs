use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use prism::ablation::ablate;
use prism::checkpoint;
use prism::config::RunConfig;
use prism::data::{generate_dataset, list_pngs, load_image, save_image, Manifest, PairedSample, RainConfig};
use prism::metrics::{psnr_y, ssim_y};
use prism::pipeline::Prism;
use prism::train::{evaluate, train};
use prism::verify::{self, Coverage, Options};

use crate::{Command, RunArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] prism::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) | CliError::Core(prism::Error::Config(_)) => ExitCode::from(2),
            _ => ExitCode::from(3),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

const CHECK_FAILED: u8 = 1;

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

fn log_config(cfg: &RunConfig) {
    log::info!("resolved configuration:");
    for line in cfg.to_string().lines() {
        log::info!("  {line}");
    }
}

fn load_manifest(cfg: &RunConfig) -> Result<Vec<PairedSample>> {
    let path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::Usage("no dataset: set `manifest` in the config or with --set manifest=PATH".into()))?;
    Ok(Manifest::read(path)?.load_all()?)
}

pub fn run(args: &RunArgs, command: Command) -> Result<ExitCode> {
    let cfg = resolve(args)?;
    match command {
        Command::Verify { suite, corrupt_backward } => cmd_verify(&suite, corrupt_backward),
        Command::GenData { out, count, size } => {
            log_config(&cfg);
            let rain = RainConfig {
                seed: cfg.seed,
                ..RainConfig::default()
            };
            let m = generate_dataset(count, size, size, &rain, &out)?;
            println!("wrote {} pairs and {}", m.len(), out.join("manifest.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train => cmd_train(&cfg),
        Command::Derain {
            checkpoint,
            input,
            output,
            all_stages,
        } => {
            log_config(&cfg);
            let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint.clone());
            let n = cmd_derain(&cfg, &ckpt, &input, &output, all_stages)?;
            println!("restored {n} images into {}", output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Metrics { pred, gt, csv } => cmd_metrics(&pred, &gt, csv.as_deref()),
        Command::Ablate { held_out } => {
            log_config(&cfg);
            let all = load_manifest(&cfg)?;
            if held_out == 0 || held_out >= all.len() {
                return Err(CliError::Usage(format!(
                    "--held-out {held_out} must leave training pairs out of {}",
                    all.len()
                )));
            }
            let (data, eval) = all.split_at(all.len() - held_out);
            let table = ablate(cfg.pipeline(), &cfg.train(), data, eval)?;
            println!("{table}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn cmd_verify(suite: &str, corrupt_backward: Option<String>) -> Result<ExitCode> {
    let reports = verify::run(suite, &Options { corrupt_backward })?;
    for r in &reports {
        println!("{r}");
    }
    let cov = verify::coverage(&reports);
    println!("checklist:");
    let mut missing = 0;
    for (item, status) in &cov {
        let tag = match status {
            Coverage::Passed => "covered",
            Coverage::Failed => "FAILED",
            Coverage::Missing => {
                missing += 1;
                "not run"
            }
            Coverage::External => item.elsewhere.unwrap_or("elsewhere"),
        };
        println!("  [{tag}] {}: {}", item.module, item.invariant);
    }
    let checks: usize = reports.iter().map(|r| r.checks.len()).sum();
    let failed: usize = reports.iter().map(|r| r.failures().count()).sum();
    let covered = cov.iter().filter(|(_, s)| *s == Coverage::Passed).count();
    println!(
        "{checks} checks, {failed} failed; {covered} of {} checklist items covered, {missing} not run",
        cov.len()
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(CHECK_FAILED)
    })
}

fn cmd_train(cfg: &RunConfig) -> Result<ExitCode> {
    log_config(cfg);
    let data = load_manifest(cfg)?;
    let (model, mut store) = Prism::build(cfg.pipeline(), cfg.seed)?;
    log::info!("{} parameters, {} training pairs", store.num_scalars(), data.len());
    if let Some(dir) = cfg.loss_log.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut log_file = BufWriter::new(File::create(&cfg.loss_log)?);
    let hist = train(&model, &mut store, &data, &cfg.train(), Some(&mut log_file))?;
    log_file.flush()?;
    checkpoint::save(&cfg.checkpoint, &store, Some(cfg.seed))?;
    if let (Some(first), Some(last)) = (hist.first(), hist.last()) {
        println!("total loss {:.6} -> {:.6} over {} steps", first.total, last.total, hist.len());
    }
    let report = evaluate(&model, &store, &data)?;
    println!(
        "training pairs: PSNR {:.2} dB (rainy {:.2} dB), SSIM {:.4} (rainy {:.4})",
        report.psnr_restored, report.psnr_rainy, report.ssim_restored, report.ssim_rainy
    );
    println!("checkpoint {}, loss log {}", cfg.checkpoint.display(), cfg.loss_log.display());
    Ok(ExitCode::SUCCESS)
}

/// Restores every PNG in `input`; returns how many were written.
pub fn cmd_derain(cfg: &RunConfig, ckpt: &Path, input: &Path, output: &Path, all_stages: bool) -> Result<usize> {
    let (model, mut store) = Prism::build(cfg.pipeline(), cfg.seed)?;
    checkpoint::load_into(ckpt, &mut store)?;
    let values = store.values::<f32>();
    let files = list_pngs(input)?;
    for path in &files {
        let name = path.file_name().expect("listed files have names");
        let outs = model.infer(&values, &load_image(path)?)?;
        let last = outs.iter().rev().flatten().next().expect("at least one stage");
        save_image(&output.join(name), last)?;
        if all_stages {
            for (s, out) in outs.iter().enumerate() {
                if let Some(o) = out {
                    save_image(&output.join(format!("stage{}", s + 1)).join(name), o)?;
                }
            }
        }
    }
    Ok(files.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub file: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Pairs PNGs by file name; names present on only one side are returned
/// separately.
pub fn compare_dirs(pred: &Path, gt: &Path) -> Result<(Vec<MetricsRow>, Vec<String>)> {
    let name = |p: &PathBuf| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let preds = list_pngs(pred)?;
    let gts: Vec<String> = list_pngs(gt)?.iter().map(name).collect();
    let mut rows = Vec::new();
    let mut unmatched: Vec<String> = gts.iter().filter(|g| !preds.iter().any(|p| &name(p) == *g)).cloned().collect();
    for p in &preds {
        let file = name(p);
        if !gts.contains(&file) {
            unmatched.push(file);
            continue;
        }
        let (a, b) = (load_image(p)?, load_image(&gt.join(&file))?);
        rows.push(MetricsRow {
            psnr: psnr_y(&a, &b)?,
            ssim: ssim_y(&a, &b)?,
            file,
        });
    }
    unmatched.sort();
    Ok((rows, unmatched))
}

fn cmd_metrics(pred: &Path, gt: &Path, csv_path: Option<&Path>) -> Result<ExitCode> {
    let (rows, unmatched) = compare_dirs(pred, gt)?;
    for u in &unmatched {
        log::warn!("skipping `{u}`: no counterpart");
    }
    if rows.is_empty() {
        log::error!("no matched pairs between {} and {}", pred.display(), gt.display());
        return Ok(ExitCode::from(CHECK_FAILED));
    }
    let sink: Box<dyn Write> = match csv_path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout()),
    };
    let mut wr = csv::Writer::from_writer(sink);
    wr.write_record(["file", "psnr_y", "ssim_y"])?;
    for r in &rows {
        wr.write_record([r.file.clone(), format!("{:.6}", r.psnr), format!("{:.6}", r.ssim)])?;
    }
    wr.flush()?;
    let n = rows.len() as f64;
    println!(
        "mean over {} pairs: PSNR {:.4} dB, SSIM {:.6}",
        rows.len(),
        rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        rows.iter().map(|r| r.ssim).sum::<f64>() / n
    );
    Ok(ExitCode::SUCCESS)
}
