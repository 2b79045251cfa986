//! The `xmodal` command line. Exit codes: 0 success, 1 usage or config
//! error, 2 data or I/O error, 3 numerical or gradient-check failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::autodiff::gradcheck::{GradCheckReport, MODEL_TOLERANCE};
use crate::autodiff::suite::run_op_suite;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::CliConfig;
use crate::data::{generate_synthetic, load_manifest, subject_kfold, write_dataset, LoadMode, PairedSample};
use crate::error::{Error, Result};
use crate::gradcheck_model::check_model_gradient;
use crate::image::{GrayImage, ImageTensor};
use crate::model::CrossModalModel;
use crate::train::{evaluate, prepare, run_experiment, EPOCH_LOG_HEADER};
use crate::vit::{argmax, Modality, Vit};

#[derive(Debug, Parser)]
#[command(
    name = "xmodal",
    version,
    about = "Cross-modal consistency training for a shared vision transformer"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// key=value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Ops,
    Model,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference checks of every op and/or the full loss.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        scope: Scope,
        /// Random instances per op.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Parameter coordinates checked in the model scope.
        #[arg(long, default_value_t = 20)]
        coords: usize,
    },
    /// Write a synthetic paired dataset (manifest plus PPM files).
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated training; writes reports and checkpoints under `out`.
    Train,
    /// WL accuracy of a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest; defaults to the `data` config key.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Last-layer class attention of one image as an 8-bit PGM.
    Attnmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also export the alignment response map for this modality.
        #[arg(long, value_enum)]
        response_map: Option<ModalityArg>,
    },
    /// Class-token features of every WL image as CSV.
    EmbedDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Wl,
    Nbi,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Wl => Modality::Wl,
            ModalityArg::Nbi => Modality::Nbi,
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = CliConfig::load(cli.global.config.as_deref(), &cli.global.set, cli.global.seed)?;
    eprintln!("# resolved config");
    eprint!("{}", cfg.to_kv());
    match &cli.command {
        Command::Gradcheck { scope, trials, coords } => cmd_gradcheck(&cfg, *scope, *trials, *coords),
        Command::Synth { out } => cmd_synth(&cfg, out),
        Command::Train => cmd_train(&cfg),
        Command::Eval { checkpoint, data } => {
            cmd_eval(&cfg, checkpoint, data.as_deref()).map(|acc| println!("accuracy {acc:.6}"))
        }
        Command::Attnmap {
            checkpoint,
            image,
            out,
            response_map,
        } => cmd_attnmap(checkpoint, image, out, response_map.map(Modality::from)),
        Command::EmbedDump { checkpoint, data, out } => cmd_embed_dump(&cfg, checkpoint, data.as_deref(), out),
    }
}

fn print_report(r: &GradCheckReport) {
    println!(
        "{:<24} max_rel_error={:.3e} coords={} tol={:.0e} {}",
        r.name,
        r.max_rel_error,
        r.coordinates,
        r.tolerance,
        if r.passed() { "PASS" } else { "FAIL" }
    );
}

pub fn cmd_gradcheck(cfg: &CliConfig, scope: Scope, trials: usize, coords: usize) -> Result<()> {
    let mut reports = Vec::new();
    if scope != Scope::Model {
        reports.extend(run_op_suite(cfg.train.seed, trials)?);
    }
    if scope != Scope::Ops {
        let mut model_cfg = crate::vit::ModelConfig::desk();
        model_cfg.layers = cfg.train.model.layers;
        reports.push(check_model_gradient(
            &model_cfg,
            &cfg.train.align,
            cfg.train.lambda,
            cfg.train.seed,
            coords,
            MODEL_TOLERANCE,
        )?);
    }
    for r in &reports {
        print_report(r);
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        println!("all {} checks passed", reports.len());
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

pub fn cmd_synth(cfg: &CliConfig, out: &Path) -> Result<()> {
    let samples = generate_synthetic(&cfg.synth)?;
    let manifest = write_dataset(&samples, out)?;
    let adenomatous = samples.iter().filter(|s| s.label == 1).count();
    println!("wrote {} ({} pairs)", manifest.display(), samples.len());
    println!("adenomatous {adenomatous}");
    println!("hyperplastic {}", samples.len() - adenomatous);
    println!("subjects {}", crate::data::subjects(&samples).len());
    Ok(())
}

/// The configured manifest, or synthetic data when none is set.
pub fn load_data(cfg: &CliConfig, override_path: Option<&Path>) -> Result<Vec<PairedSample>> {
    let mode = if cfg.strict {
        LoadMode::Strict
    } else {
        LoadMode::Lenient
    };
    match override_path.or(cfg.data.as_deref()) {
        Some(p) => load_manifest(p, mode),
        None => {
            log::info!("no data path set, generating synthetic data");
            generate_synthetic(&cfg.synth)
        }
    }
}

pub fn cmd_train(cfg: &CliConfig) -> Result<()> {
    let samples = load_data(cfg, None)?;
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let split = subject_kfold(&samples, cfg.folds, cfg.train.seed)?;
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join("config.txt"), cfg.to_kv()).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("epochs.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{EPOCH_LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    let modes = cfg.modes.modes();
    let (report, results) = run_experiment(&cfg.train, &samples, &split, &modes, Some(&mut log))?;
    for (mode, folds) in modes.iter().zip(&results) {
        for r in folds {
            let base = out.join("checkpoints").join(format!("{mode}_fold{}", r.fold + 1));
            save_checkpoint(&r.best_model, &base.with_extension("ckpt"))?;
            save_checkpoint(&r.best_model.pruned(), &base.with_extension("pruned.ckpt"))?;
        }
    }
    let csv = report.to_csv();
    let report_path = out.join("report.csv");
    fs::write(&report_path, &csv).map_err(|e| Error::io(&report_path, e))?;
    print!("{csv}");
    Ok(())
}

pub fn cmd_eval(cfg: &CliConfig, checkpoint: &Path, data: Option<&Path>) -> Result<f64> {
    let model = load_checkpoint(checkpoint)?;
    let samples = load_data(cfg, data)?;
    evaluate(&model, &samples)
}

/// Nearest-neighbour upsampling of a square `side x side` map to
/// `width x height`, min-max scaled to `0..=255`. A constant map is all 0.
pub fn heatmap(values: &[f64], width: usize, height: usize) -> Result<GrayImage> {
    let side = (values.len() as f64).sqrt().round() as usize;
    if side * side != values.len() || side == 0 {
        return Err(Error::Shape(format!(
            "{} values do not form a square map",
            values.len()
        )));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let v = values[(y * side / height) * side + x * side / width];
            let p = if span > 0.0 {
                ((v - lo) / span * 255.0).round()
            } else {
                0.0
            };
            pixels.push(p as u8);
        }
    }
    Ok(GrayImage { width, height, pixels })
}

fn response_map_path(out: &Path, modality: Modality) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}_response_{modality}.pgm"))
}

pub fn cmd_attnmap(checkpoint: &Path, image: &Path, out: &Path, response: Option<Modality>) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    if response.is_some() && model.is_pruned() {
        return Err(Error::Usage(format!(
            "{} is pruned: it has no alignment parameters, so no response map",
            checkpoint.display()
        )));
    }
    let img = ImageTensor::read_ppm(image)?;
    let size = model.config().image_size;
    let input = img.resize(size, size);
    let inf = model.infer(&input)?;
    let attn = Vit::last_layer_cls_attention(&inf);
    heatmap(&attn, img.width(), img.height())?.write_pgm(out)?;
    println!("wrote {}", out.display());
    if let Some(m) = response {
        let map = model.response_map(&input, m)?;
        let path = response_map_path(out, m);
        heatmap(&map.values, img.width(), img.height())?.write_pgm(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn cmd_embed_dump(cfg: &CliConfig, checkpoint: &Path, data: Option<&Path>, out: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let samples = load_data(cfg, data)?;
    let prepared = prepare(&samples, model.config().image_size)?;
    let csv = embed_csv(&model, &prepared)?;
    fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    println!("wrote {} rows to {}", prepared.len(), out.display());
    Ok(())
}

/// `id,label,prediction,c0..c{d-1}` for each sample's WL image.
pub fn embed_csv(model: &CrossModalModel, samples: &[PairedSample]) -> Result<String> {
    let d = model.config().embed_dim;
    let mut out = String::from("id,label,prediction");
    for i in 0..d {
        let _ = write!(out, ",c{i}");
    }
    out.push('\n');
    for s in samples {
        let inf = model.infer(&s.wl)?;
        let id = if s.id.contains([',', '"', '\n']) {
            format!("\"{}\"", s.id.replace('"', "\"\""))
        } else {
            s.id.clone()
        };
        let _ = write!(out, "{id},{},{}", s.label, argmax(&inf.logits));
        for v in &inf.class_feature {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_black() {
        let g = heatmap(&[0.25; 4], 4, 4).unwrap();
        assert!(g.pixels.iter().all(|&p| p == 0));
    }

    #[test]
    fn heatmap_is_monotone_and_upsampled() {
        let g = heatmap(&[0.1, 0.2, 0.3, 0.4], 4, 2).unwrap();
        assert_eq!((g.width, g.height), (4, 2));
        assert_eq!(g.pixels, [0, 0, 85, 85, 170, 170, 255, 255]);
        assert!(heatmap(&[1.0, 2.0, 3.0], 3, 3).is_err());
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(["xmodal", "frobnicate"]), 1);
        assert_eq!(run(["xmodal", "--set", "nope=1", "synth", "--out", "/nonexistent"]), 1);
        assert_eq!(run(["xmodal", "--help"]), 0);
    }
}
