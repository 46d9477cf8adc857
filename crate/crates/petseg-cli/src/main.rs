//! `petseg` command-line interface.
//!
//! Pipeline stages communicate only through files (NIfTI volumes, CSV tables,
//! key=value configs). Exit codes: 0 success, 1 contract/parse errors, 2 I/O
//! errors. Every run logs its resolved configuration to stderr.

mod commands;
mod external;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "petseg",
    about = "Whole-body PET/CT lesion segmentation pipeline",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    /// Seed for every randomized stage.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Verbose logging on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Worker threads for per-case / per-window parallelism.
    #[arg(long, global = true, default_value_t = 1, env = "PETSEG_JOBS")]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BlendArg {
    Constant,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PredictorArg {
    /// Built-in SUV-threshold stub.
    Stub,
    /// Shell out to --external-cmd per window.
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutKindArg {
    Mask,
    Prob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetArg {
    /// Lesion wherever PET+CT features lie above a fixed plane.
    Separable,
    /// Negative-control data: every target voxel is background.
    Background,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print header and intensity statistics of a NIfTI volume.
    Info {
        /// Input volume (.nii or .nii.gz).
        #[arg(long)]
        input: PathBuf,
    },

    /// Non-randomized transforms: SUV, clip, normalize, body crop, resample.
    Preprocess {
        /// PET volume in Bq/ml (or SUV with --assume-suv).
        #[arg(long)]
        pet: PathBuf,
        /// CT volume in HU.
        #[arg(long)]
        ct: PathBuf,
        /// Optional label mask transformed alongside.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Output directory (pet.nii.gz, ct.nii.gz, mask.nii.gz).
        #[arg(long)]
        out_dir: PathBuf,
        /// Key=value sidecar with dose_bq, weight_g, delay_s, half_life_s.
        #[arg(long)]
        suv_meta: Option<PathBuf>,
        /// Injected dose in Bq (alternative to --suv-meta).
        #[arg(long)]
        dose_bq: Option<f64>,
        /// Patient weight in grams.
        #[arg(long)]
        weight_g: Option<f64>,
        /// Injection-to-scan delay in seconds.
        #[arg(long)]
        delay_s: Option<f64>,
        /// Tracer half-life in seconds.
        #[arg(long, default_value_t = 6586.2)]
        half_life_s: f64,
        /// Treat the PET input as already converted to SUV.
        #[arg(long, default_value_t = false)]
        assume_suv: bool,
        /// Isotropic target spacing in mm ("2.0" or "sx,sy,sz").
        #[arg(long, default_value = "2.0")]
        spacing: String,
        /// Body threshold on CT in HU.
        #[arg(long, default_value_t = -800.0)]
        ct_threshold: f32,
        /// Body threshold on PET in SUV.
        #[arg(long, default_value_t = 0.1)]
        pet_threshold: f32,
    },

    /// Randomized training transforms; emits augmented patches for QA.
    Augment {
        #[arg(long)]
        pet: PathBuf,
        #[arg(long)]
        ct: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Output directory (pet.nii.gz, ct.nii.gz, mask.nii.gz).
        #[arg(long)]
        out_dir: PathBuf,
        /// Cubic patch edge in voxels.
        #[arg(long, default_value_t = 192)]
        patch_size: usize,
        /// Key=value file overriding any augmentation field.
        #[arg(long)]
        config: Option<PathBuf>,
    },

    /// Cohort-stratified k-fold split.
    Split {
        /// Input CSV: case_id,patient_id,cohort.
        #[arg(long)]
        cases: PathBuf,
        /// Output CSV: case_id,fold.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Deal images independently instead of grouping by patient.
        #[arg(long, default_value_t = false)]
        per_image: bool,
    },

    /// Train the built-in per-voxel model on synthetic data.
    TrainToy {
        /// Output CSV of epoch records: epoch,loss,val_dsc.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 600)]
        train_cases: usize,
        #[arg(long, default_value_t = 16)]
        val_cases: usize,
        /// Patch edge in voxels.
        #[arg(long, default_value_t = 4)]
        patch: usize,
        #[arg(long, value_enum, default_value_t = DatasetArg::Separable)]
        dataset: DatasetArg,
        /// Peak learning rate of the cosine schedule.
        #[arg(long, default_value_t = 1e-3)]
        lr_max: f64,
        /// Mini-batch size.
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
    },

    /// Print loss values and a gradient-check report on random batches.
    Losscheck {
        #[arg(long, default_value_t = 100)]
        batches: usize,
        /// Largest mini-batch size drawn.
        #[arg(long, default_value_t = 4)]
        max_batch: usize,
        /// Largest patch edge drawn.
        #[arg(long, default_value_t = 4)]
        max_dim: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        /// Maximum acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },

    /// Sliding-window inference over preprocessed PET/CT volumes.
    Infer {
        /// Preprocessed PET volume (SUV).
        #[arg(long)]
        pet: PathBuf,
        /// Preprocessed CT volume (normalized).
        #[arg(long)]
        ct: PathBuf,
        /// Output volume path.
        #[arg(long)]
        out: PathBuf,
        /// Cubic window edge in voxels.
        #[arg(long, default_value_t = 192)]
        window: usize,
        /// Window overlap fraction.
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        #[arg(long, value_enum, default_value_t = BlendArg::Constant)]
        blend: BlendArg,
        #[arg(long, value_enum, default_value_t = PredictorArg::Stub)]
        predictor: PredictorArg,
        /// Command invoked per window: CMD PET CT OUT_FG [OUT_BG].
        #[arg(long)]
        external_cmd: Option<String>,
        /// Mask threshold when --out-kind mask.
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        #[arg(long, value_enum, default_value_t = OutKindArg::Mask)]
        out_kind: OutKindArg,
        /// Resample the output mask onto this volume's grid (nearest-neighbor).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Stub predictor logit gain.
        #[arg(long, default_value_t = 10.0)]
        stub_gain: f32,
        /// Stub predictor SUV threshold.
        #[arg(long, default_value_t = 2.5)]
        stub_suv: f32,
    },

    /// Weighted voxelwise average of probability maps, then threshold.
    Ensemble {
        /// Probability-map inputs.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// One non-negative weight per input (default: uniform).
        #[arg(long, num_args = 1..)]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        #[arg(long, value_enum, default_value_t = OutKindArg::Mask)]
        out_kind: OutKindArg,
        /// Resample the output mask onto this volume's grid (nearest-neighbor).
        #[arg(long)]
        reference: Option<PathBuf>,
    },

    /// Per-case DSC/FPV/FNV between equally-named mask files.
    Evaluate {
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        pred_dir: PathBuf,
        /// Output CSV: case_id,dsc,fpv_ml,fnv_ml plus a mean row.
        #[arg(long)]
        out: PathBuf,
        /// Component connectivity (6, 18, or 26).
        #[arg(long, default_value_t = 18)]
        connectivity: u8,
    },

    /// Aggregate several metric CSVs into the challenge ranking.
    Rank {
        /// Metric CSVs as written by `evaluate` (mean row required).
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Algorithm names (default: file stems).
        #[arg(long, num_args = 1..)]
        names: Option<Vec<String>>,
        /// Output CSV of the ranking table.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not errors
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// 2 for I/O failures, 1 for everything else (contract/parse).
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<petseg::Error>() {
            if matches!(e, petseg::Error::Io(_)) {
                return 2;
            }
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<csv::Error>() {
            if matches!(e.kind(), csv::ErrorKind::Io(_)) {
                return 2;
            }
        }
    }
    1
}
