//! Command-line surface: train, restore, degrade, analyze, gradcheck, and
//! selftest subcommands over the library modules.
//!
//! Contract: exit 0 on success; 2 for usage/config problems, 3 for numeric
//! failures, 4 for I/O failures, each with a one-line stderr reason. Outputs
//! are deterministic given identical inputs and seeds. The SFIM_THREADS
//! environment variable caps kernel parallelism for every command.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analyze;
use crate::check;
use crate::degrade::{
    aperture_to_psf, degrade_image, make_dataset, ApertureMask, CleanSource, DatasetSpec,
    DegradationSpec,
};
use crate::error::{Result, SfimError};
use crate::imgio;
use crate::rng::{derive_seed, Rng};
use crate::runtime::restore::{read_image, restore_file};
use crate::runtime::{train, RestoreOptions, RunConfig, TrainOptions};
use crate::tensor::kernels::configure_threads;

#[derive(Debug, Parser)]
#[command(
    name = "sfim",
    about = "Spatial/frequency multi-level image restoration toolkit",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run-configuration file.
    Train {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory in the configuration.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint to resume from; must match the configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Restore one image with a trained checkpoint.
    Restore {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image (.png or .sftn).
        #[arg(long = "in")]
        input: PathBuf,
        /// Reference image; when given, quality metrics are printed.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Output image path; the extension selects the format.
        #[arg(long)]
        out: PathBuf,
        /// Tile edge for large inputs (0 disables tiling).
        #[arg(long)]
        tile: Option<usize>,
    },
    /// Generate degraded/clean training pairs plus a manifest.
    Degrade {
        /// Degrade this one image instead of generating scenes.
        #[arg(long = "in", conflicts_with = "procedural")]
        input: Option<PathBuf>,
        /// Number of procedural pairs to generate.
        #[arg(long)]
        procedural: Option<usize>,
        /// Dataset recipe (TOML); defaults cover the desk-scale setup.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory for pairs and manifest.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a degraded image against its reference in space and frequency.
    Analyze {
        /// Degraded image (.png or .sftn).
        #[arg(long)]
        deg: PathBuf,
        /// Clean reference image.
        #[arg(long)]
        gt: PathBuf,
        /// Output directory for maps and report.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run gradient and oracle suites; nonzero exit on any violation.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scope::Blocks)]
        scope: Scope,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Reduced-depth pass over every verification suite.
    Selftest,
}

/// What the gradcheck command verifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    /// Finite differences through each tensor primitive.
    Tensor,
    /// Finite differences through every architecture block.
    Blocks,
    /// Finite differences through the compact 2-level width-8 model.
    Model,
}

/// Parses `std::env::args`, runs the command, and returns the process exit
/// code. Errors are reported as one line on stderr.
pub fn main_entry() -> u8 {
    let cli = Cli::parse();
    configure_threads(None);
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Executes one parsed command. Split from [`main_entry`] so tests can drive
/// commands without spawning a process.
pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, seed, out, resume } => cmd_train(&config, seed, out, resume),
        Command::Restore { ckpt, input, gt, out, tile } => {
            cmd_restore(&ckpt, &input, gt.as_deref(), &out, tile)
        }
        Command::Degrade { input, procedural, spec, seed, out } => {
            cmd_degrade(input.as_deref(), procedural, spec.as_deref(), seed, &out)
        }
        Command::Analyze { deg, gt, out } => cmd_analyze(&deg, &gt, &out),
        Command::Gradcheck { scope, seed } => cmd_gradcheck(scope, seed),
        Command::Selftest => cmd_selftest(),
    }
}

// ---------------------------------------------------------------------------
// train

fn cmd_train(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.paths.out = o;
    }
    let summary = train(&cfg, &TrainOptions { resume, max_steps: None })?;
    println!("training complete");
    println!("  steps_run={}", summary.steps_run);
    println!("  global_step={}", summary.global_step);
    println!("  final_loss={:.9e}", summary.final_loss);
    println!("  best_val_psnr={:.6}", summary.best_val_psnr);
    println!("  final_val_psnr={:.6}", summary.final_val_psnr);
    println!("  final_val_ssim={:.6}", summary.final_val_ssim);
    println!("  checkpoint={}", summary.final_checkpoint.display());
    println!("  log={}", summary.log_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// restore

fn cmd_restore(
    ckpt: &Path,
    input: &Path,
    gt: Option<&Path>,
    out: &Path,
    tile: Option<usize>,
) -> Result<()> {
    let mut opts = RestoreOptions::default();
    match tile {
        Some(0) => opts.tile = None,
        Some(t) => opts.tile = Some(t),
        None => {}
    }
    let quality = restore_file(ckpt, input, gt, out, &opts)?;
    println!("restored {} -> {}", input.display(), out.display());
    if let Some(q) = quality {
        for line in q.log_lines() {
            println!("{line}");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// degrade

/// Aperture geometries expressible in a dataset recipe file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApertureKind {
    Open,
    VerticalSlit,
    HorizontalSlit,
    Grid,
}

/// On-disk dataset recipe (TOML). Every field has a desk-scale default, so
/// an empty file is a valid recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpecFile {
    /// Extents of generated scenes; ignored when degrading a given image.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Fraction of procedural scenes dominated by saturated point lights.
    pub flare_fraction: f64,
    pub aperture: ApertureKind,
    /// Aperture raster edge in samples.
    pub aperture_edge: usize,
    /// Slit width/height or grid period, depending on `aperture`.
    pub aperture_param: usize,
    /// Odd edge of the rendered point-spread kernel.
    pub psf_support: usize,
    /// Uniform sampling ranges per generated item.
    pub noise_sigma: (f64, f64),
    pub blur_sigma: (f64, f64),
    pub transmittance: (f64, f64),
    pub saturation: f64,
    pub highlight_boost: f64,
}

impl Default for DatasetSpecFile {
    fn default() -> Self {
        DatasetSpecFile {
            channels: 3,
            height: 64,
            width: 64,
            flare_fraction: 0.5,
            aperture: ApertureKind::VerticalSlit,
            aperture_edge: 64,
            aperture_param: 3,
            psf_support: 31,
            noise_sigma: (0.005, 0.02),
            blur_sigma: (0.5, 1.5),
            transmittance: (0.6, 0.85),
            saturation: 0.9,
            highlight_boost: 8.0,
        }
    }
}

impl DatasetSpecFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            SfimError::config(format!("cannot read dataset spec {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let spec: DatasetSpecFile = toml::from_str(text)
            .map_err(|e| SfimError::config(format!("invalid dataset spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("noise_sigma", self.noise_sigma),
            ("blur_sigma", self.blur_sigma),
            ("transmittance", self.transmittance),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(SfimError::config(format!(
                    "{name} range must be finite with low <= high, got ({lo}, {hi})"
                )));
            }
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(SfimError::config("scene extents must be positive"));
        }
        Ok(())
    }

    fn mask(&self) -> ApertureMask {
        match self.aperture {
            ApertureKind::Open => ApertureMask::open(self.aperture_edge),
            ApertureKind::VerticalSlit => {
                ApertureMask::vertical_slit(self.aperture_edge, self.aperture_param)
            }
            ApertureKind::HorizontalSlit => {
                ApertureMask::horizontal_slit(self.aperture_edge, self.aperture_param)
            }
            ApertureKind::Grid => ApertureMask::grid(self.aperture_edge, self.aperture_param),
        }
    }

    /// Dataset recipe with procedural scenes at the file's extents.
    pub fn to_dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            source: CleanSource::Procedural { flare_fraction: self.flare_fraction },
            channels: self.channels,
            height: self.height,
            width: self.width,
            psf: aperture_to_psf(&self.mask(), self.psf_support)?,
            noise_sigma: self.noise_sigma,
            blur_sigma: self.blur_sigma,
            transmittance: self.transmittance,
            saturation: self.saturation,
            highlight_boost: self.highlight_boost,
        })
    }

    /// One concrete degradation, ranges sampled with `rng`.
    pub fn sample_degradation(&self, rng: &mut Rng) -> Result<DegradationSpec> {
        let spec = DegradationSpec {
            psf: aperture_to_psf(&self.mask(), self.psf_support)?,
            noise_sigma: rng.uniform(self.noise_sigma.0, self.noise_sigma.1),
            blur_sigma: rng.uniform(self.blur_sigma.0, self.blur_sigma.1),
            transmittance: rng.uniform(self.transmittance.0, self.transmittance.1),
            saturation: self.saturation,
            highlight_boost: self.highlight_boost,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn cmd_degrade(
    input: Option<&Path>,
    procedural: Option<usize>,
    spec: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let recipe = match spec {
        Some(path) => DatasetSpecFile::load(path)?,
        None => DatasetSpecFile::default(),
    };
    match (input, procedural) {
        (Some(img_path), None) => degrade_one(img_path, &recipe, seed, out),
        (None, Some(n)) => {
            if n == 0 {
                return Err(SfimError::config("--procedural needs at least one pair"));
            }
            let ds = recipe.to_dataset_spec()?;
            let records = make_dataset(out, &ds, n, seed)?;
            println!(
                "wrote {} pairs to {} (manifest.txt)",
                records.len(),
                out.display()
            );
            Ok(())
        }
        _ => Err(SfimError::config("pass exactly one of --in IMG or --procedural N")),
    }
}

/// Degrades one given image at its native extents, writing the same layout
/// `make_dataset` produces: tensors, a PNG preview, and manifest.txt.
fn degrade_one(img_path: &Path, recipe: &DatasetSpecFile, seed: u64, out: &Path) -> Result<()> {
    let clean = read_image(img_path)?;
    let item_seed = derive_seed(seed, 0);
    let mut rng = Rng::new(item_seed);
    let spec = recipe.sample_degradation(&mut rng)?;
    let degraded = degrade_image(&clean, &spec, derive_seed(item_seed, 2))?;

    fs::create_dir_all(out)?;
    let clean_path = out.join("00000_clean.sftn");
    let degraded_path = out.join("00000_degraded.sftn");
    clean.save(&clean_path)?;
    degraded.save(&degraded_path)?;
    imgio::save_png(&out.join("00000_degraded.png"), &degraded)?;

    let manifest = format!(
        "dataset n=1 seed={seed}\npair id=00000 kind=file clean={} degraded={} noise_sigma={:.6} blur_sigma={:.6} transmittance={:.6}\n",
        clean_path.file_name().unwrap().to_string_lossy(),
        degraded_path.file_name().unwrap().to_string_lossy(),
        spec.noise_sigma,
        spec.blur_sigma,
        spec.transmittance
    );
    fs::write(out.join("manifest.txt"), manifest)?;
    println!("wrote 1 pair to {} (manifest.txt)", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze

fn cmd_analyze(deg: &Path, gt: &Path, out: &Path) -> Result<()> {
    let degraded = read_image(deg)?;
    let clean = read_image(gt)?;
    fs::create_dir_all(out)?;

    let spatial = analyze::spatial_diff_map(&degraded, &clean)?;
    analyze::export_heatmap(&spatial, &out.join("spatial_diff.png"), false)?;

    let map = analyze::spectral_diff(&degraded, &clean)?;
    analyze::export_heatmap(&map.summary, &out.join("spectral_diff.png"), true)?;

    let score = analyze::flare_prior_score(&map);
    let quality = analyze::quality(&degraded, &clean)?;

    let mut lines = vec![format!("flare_prior_score={score:.6}")];
    lines.extend(quality.log_lines());
    for line in &lines {
        println!("{line}");
    }
    fs::write(out.join("report.txt"), lines.join("\n") + "\n")?;
    println!(
        "wrote spatial_diff.png, spectral_diff.png, report.txt to {}",
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck and selftest

fn report_outcomes(outcomes: &[check::CheckOutcome], context: &str) -> Result<()> {
    for o in outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    if failed > 0 {
        return Err(SfimError::Numeric(format!(
            "{failed} of {} {context} checks failed",
            outcomes.len()
        )));
    }
    println!("{context}: {} checks passed", outcomes.len());
    Ok(())
}

fn cmd_gradcheck(scope: Scope, seed: u64) -> Result<()> {
    let outcomes = match scope {
        Scope::Tensor => check::tensor_gradient_suite(seed, 24)?,
        Scope::Blocks => {
            let outcomes = check::block_gradient_suite(seed, 40)?;
            println!(
                "coverage: {} of {} block types",
                outcomes.len(),
                check::BLOCK_NAMES.len()
            );
            outcomes
        }
        Scope::Model => vec![check::model_gradient_check(seed, 30)?],
    };
    report_outcomes(&outcomes, "gradcheck")
}

fn cmd_selftest() -> Result<()> {
    let outcomes = check::selftest(11)?;
    report_outcomes(&outcomes, "selftest")
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_tree_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flags_are_rejected() {
        let r = Cli::try_parse_from(["sfim", "selftest", "--bogus"]);
        assert!(r.is_err());
        let r = Cli::try_parse_from(["sfim", "restore", "--ckpt", "a", "--in", "b", "--out", "c", "--frobnicate"]);
        assert!(r.is_err());
    }

    #[test]
    fn flags_parse_into_commands() {
        let cli = Cli::try_parse_from([
            "sfim", "train", "--config", "run.toml", "--seed", "5", "--out", "runs/x",
        ])
        .unwrap();
        match cli.command {
            Command::Train { config, seed, out, resume } => {
                assert_eq!(config, PathBuf::from("run.toml"));
                assert_eq!(seed, Some(5));
                assert_eq!(out, Some(PathBuf::from("runs/x")));
                assert!(resume.is_none());
            }
            other => panic!("parsed {other:?}"),
        }
        let cli = Cli::try_parse_from(["sfim", "gradcheck", "--scope", "model"]).unwrap();
        match cli.command {
            Command::Gradcheck { scope, seed } => {
                assert_eq!(scope, Scope::Model);
                assert_eq!(seed, 17);
            }
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn in_and_procedural_conflict() {
        let r = Cli::try_parse_from([
            "sfim", "degrade", "--in", "a.png", "--procedural", "3", "--out", "d",
        ]);
        assert!(r.is_err(), "--in and --procedural must conflict");
        let r = Cli::try_parse_from(["sfim", "degrade", "--out", "d"]).unwrap();
        match r.command {
            Command::Degrade { input, procedural, .. } => {
                assert!(input.is_none() && procedural.is_none());
            }
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn empty_spec_file_is_a_valid_recipe() {
        let spec: DatasetSpecFile = toml::from_str("").unwrap();
        spec.validate().unwrap();
        let ds = spec.to_dataset_spec().unwrap();
        assert_eq!(ds.height, 64);
        let bad: std::result::Result<DatasetSpecFile, _> = toml::from_str("unknown_knob = 3");
        assert!(bad.is_err(), "unknown keys must be rejected");
    }

    #[test]
    fn spec_range_validation_rejects_inverted_ranges() {
        let spec: DatasetSpecFile = toml::from_str("noise_sigma = [0.5, 0.1]").unwrap();
        let err = spec.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
