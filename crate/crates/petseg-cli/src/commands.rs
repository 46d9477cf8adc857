//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use petseg::infer::{binarize, ensemble, infer, plan_windows, BlendMode, StubPredictor};
use petseg::loss::{gradient_check, LossBatch, LossConfig};
use petseg::metrics::{dsc, fnv, fpv, rank_aggregate, AlgorithmMetrics, Connectivity};
use petseg::nifti::{read_volume_from_path, write_volume_to_path};
use petseg::preprocess::{
    body_bounding_box, clip_ct, minmax_normalize, resample, resample_to_reference, to_suv,
    BodyBoxConfig, Interpolation, SuvParams,
};
use petseg::rng;
use petseg::splits::{stratified_split, CaseRecord, SplitMode};
use petseg::train::{train, ScheduleConfig, ToyDataset, TrainConfig};
use petseg::volume::{crop, Volume3D, VolumeKind};
use rand::Rng;

use crate::{BlendArg, Cli, Command, DatasetArg, OutKindArg, PredictorArg};

/// Format with 6 significant digits, the precision of the metric tables.
fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exponent = x.abs().log10().floor() as i32;
    let decimals = (5 - exponent).max(0) as usize;
    format!("{x:.decimals$}")
}

fn log_config(subcommand: &str, pairs: &[(&str, String)]) {
    let mut line = format!("config: subcommand={subcommand}");
    for (k, v) in pairs {
        line.push_str(&format!(" {k}={v}"));
    }
    eprintln!("{line}");
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let verbose = cli.verbose;
    let jobs = cli.jobs.max(1);
    match cli.command {
        Command::Info { input } => info(&input),
        Command::Preprocess {
            pet,
            ct,
            mask,
            out_dir,
            suv_meta,
            dose_bq,
            weight_g,
            delay_s,
            half_life_s,
            assume_suv,
            spacing,
            ct_threshold,
            pet_threshold,
        } => preprocess(PreprocessArgs {
            pet,
            ct,
            mask,
            out_dir,
            suv_meta,
            dose_bq,
            weight_g,
            delay_s,
            half_life_s,
            assume_suv,
            spacing,
            ct_threshold,
            pet_threshold,
            verbose,
        }),
        Command::Augment { pet, ct, mask, out_dir, patch_size, config } => {
            augment_cmd(&pet, &ct, &mask, &out_dir, patch_size, config.as_deref(), seed)
        }
        Command::Split { cases, out, k, per_image } => split(&cases, &out, k, per_image, seed),
        Command::TrainToy {
            out,
            epochs,
            train_cases,
            val_cases,
            patch,
            dataset,
            lr_max,
            batch_size,
        } => train_toy(&out, epochs, train_cases, val_cases, patch, dataset, lr_max, batch_size, seed),
        Command::Losscheck { batches, max_batch, max_dim, step, tolerance } => {
            losscheck(batches, max_batch, max_dim, step, tolerance, seed)
        }
        Command::Infer {
            pet,
            ct,
            out,
            window,
            overlap,
            blend,
            predictor,
            external_cmd,
            threshold,
            out_kind,
            reference,
            stub_gain,
            stub_suv,
        } => infer_cmd(InferArgs {
            pet,
            ct,
            out,
            window,
            overlap,
            blend,
            predictor,
            external_cmd,
            threshold,
            out_kind,
            reference,
            stub_gain,
            stub_suv,
            jobs,
        }),
        Command::Ensemble { inputs, weights, out, threshold, out_kind, reference } => {
            ensemble_cmd(&inputs, weights.as_deref(), &out, threshold, out_kind, reference.as_deref())
        }
        Command::Evaluate { gt_dir, pred_dir, out, connectivity } => {
            evaluate(&gt_dir, &pred_dir, &out, connectivity, jobs, verbose)
        }
        Command::Rank { inputs, names, out } => rank(&inputs, names, &out),
    }
}

// ---------------------------------------------------------------------------
// info
// ---------------------------------------------------------------------------

fn info(input: &Path) -> Result<()> {
    log_config("info", &[("input", input.display().to_string())]);
    let (volume, header) = read_volume_from_path(input)?;
    let shape = volume.shape();
    let spacing = volume.spacing();
    let origin = volume.origin();
    println!("file: {}", input.display());
    println!("shape: {} x {} x {}", shape[0], shape[1], shape[2]);
    println!("spacing_mm: {} {} {}", spacing[0], spacing[1], spacing[2]);
    println!("origin_mm: {} {} {}", origin[0], origin[1], origin[2]);
    println!("datatype_code: {}", header.datatype);
    println!("endianness: {}", if header.big_endian { "big" } else { "little" });
    println!("scl_slope: {} scl_inter: {}", header.scl_slope, header.scl_inter);
    let values = volume.to_f32_vec();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut sum = 0.0f64;
    for &v in &values {
        let v = f64::from(v);
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
    }
    println!("min: {} max: {} mean: {}", sig6(lo), sig6(hi), sig6(sum / values.len() as f64));
    Ok(())
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

struct PreprocessArgs {
    pet: PathBuf,
    ct: PathBuf,
    mask: Option<PathBuf>,
    out_dir: PathBuf,
    suv_meta: Option<PathBuf>,
    dose_bq: Option<f64>,
    weight_g: Option<f64>,
    delay_s: Option<f64>,
    half_life_s: f64,
    assume_suv: bool,
    spacing: String,
    ct_threshold: f32,
    pet_threshold: f32,
    verbose: u8,
}

fn parse_spacing(text: &str) -> Result<[f32; 3]> {
    let parts: Vec<&str> = text.split(',').collect();
    let values: Vec<f32> = parts
        .iter()
        .map(|p| p.trim().parse::<f32>().with_context(|| format!("bad spacing component {p}")))
        .collect::<Result<_>>()?;
    match values.as_slice() {
        [s] => Ok([*s; 3]),
        [x, y, z] => Ok([*x, *y, *z]),
        _ => bail!("spacing must be one value or three comma-separated values, got {text}"),
    }
}

/// Parse a flat key=value text file (# comments and blank lines allowed).
fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value, got {line:?}", path.display(), lineno + 1);
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn suv_params_from(args: &PreprocessArgs) -> Result<Option<SuvParams>> {
    if args.assume_suv {
        return Ok(None);
    }
    if let Some(meta) = &args.suv_meta {
        let kv = parse_kv_file(meta)?;
        let get = |key: &str| -> Result<f64> {
            kv.get(key)
                .with_context(|| format!("{} is missing {key}", meta.display()))?
                .parse::<f64>()
                .with_context(|| format!("bad {key} in {}", meta.display()))
        };
        return Ok(Some(SuvParams {
            injected_dose_bq: get("dose_bq")?,
            patient_weight_g: get("weight_g")?,
            delay_seconds: get("delay_s")?,
            half_life_seconds: kv
                .get("half_life_s")
                .map(|v| v.parse::<f64>())
                .transpose()
                .context("bad half_life_s")?
                .unwrap_or(args.half_life_s),
        }));
    }
    match (args.dose_bq, args.weight_g, args.delay_s) {
        (Some(dose), Some(weight), Some(delay)) => Ok(Some(SuvParams {
            injected_dose_bq: dose,
            patient_weight_g: weight,
            delay_seconds: delay,
            half_life_seconds: args.half_life_s,
        })),
        (None, None, None) => bail!(
            "SUV parameters required: pass --suv-meta FILE, or --dose-bq/--weight-g/--delay-s, \
             or --assume-suv"
        ),
        _ => bail!("--dose-bq, --weight-g, and --delay-s must be given together"),
    }
}

fn preprocess(args: PreprocessArgs) -> Result<()> {
    let target = parse_spacing(&args.spacing)?;
    log_config(
        "preprocess",
        &[
            ("pet", args.pet.display().to_string()),
            ("ct", args.ct.display().to_string()),
            ("mask", args.mask.as_ref().map(|m| m.display().to_string()).unwrap_or_default()),
            ("out_dir", args.out_dir.display().to_string()),
            ("assume_suv", args.assume_suv.to_string()),
            ("spacing", format!("{},{},{}", target[0], target[1], target[2])),
            ("ct_threshold", args.ct_threshold.to_string()),
            ("pet_threshold", args.pet_threshold.to_string()),
        ],
    );
    let params = suv_params_from(&args)?;

    let (pet_raw, _) = read_volume_from_path(&args.pet)?;
    let (ct_raw, _) = read_volume_from_path(&args.ct)?;
    let ct_hu = ct_raw.with_kind(VolumeKind::CtHu)?;

    let suv = match &params {
        Some(p) => to_suv(&pet_raw, p)?,
        None => pet_raw.with_kind(VolumeKind::PetSuv)?,
    };
    let ct_clipped = clip_ct(&ct_hu)?;
    let box_cfg = BodyBoxConfig {
        ct_hu_threshold: args.ct_threshold,
        pet_suv_threshold: args.pet_threshold,
    };
    let body = body_bounding_box(&suv, &ct_clipped, &box_cfg)?;
    if body.empty_foreground {
        eprintln!("warning: no voxel passed the body thresholds; keeping the whole volume");
    }
    if args.verbose > 0 {
        eprintln!(
            "body box: start {:?} size {:?}",
            body.region.start, body.region.size
        );
    }
    let ct_norm = minmax_normalize(&ct_clipped)?;

    let pet_out = resample(&crop(&suv, &body.region)?, target, Interpolation::Trilinear)?;
    let ct_out = resample(&crop(&ct_norm, &body.region)?, target, Interpolation::Trilinear)?;

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("cannot create {}", args.out_dir.display()))?;
    write_volume_to_path(&pet_out, None, args.out_dir.join("pet.nii.gz"))?;
    write_volume_to_path(&ct_out, None, args.out_dir.join("ct.nii.gz"))?;

    if let Some(mask_path) = &args.mask {
        let (mask_raw, _) = read_volume_from_path(mask_path)?;
        let mask = mask_raw.into_mask()?;
        let mask_out =
            resample(&crop(&mask, &body.region)?, target, Interpolation::Nearest)?;
        write_volume_to_path(&mask_out, None, args.out_dir.join("mask.nii.gz"))?;
    }
    eprintln!(
        "preprocess: wrote {} at {:?} voxels",
        args.out_dir.display(),
        pet_out.shape()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// augment
// ---------------------------------------------------------------------------

fn augment_config_from_kv(
    base: petseg::augment::AugmentConfig,
    kv: &BTreeMap<String, String>,
) -> Result<petseg::augment::AugmentConfig> {
    let mut cfg = base;
    for (key, value) in kv {
        let parse_f64 =
            || value.parse::<f64>().with_context(|| format!("bad {key}={value}"));
        let parse_usize =
            || value.parse::<usize>().with_context(|| format!("bad {key}={value}"));
        let parse_bool =
            || value.parse::<bool>().with_context(|| format!("bad {key}={value}"));
        match key.as_str() {
            "patch_size" => cfg.patch_size = parse_usize()?,
            "translate_lo" => cfg.translate_range.0 = parse_f64()? as i64,
            "translate_hi" => cfg.translate_range.1 = parse_f64()? as i64,
            "rotate_lo" => cfg.rotate_range.0 = parse_f64()?,
            "rotate_hi" => cfg.rotate_range.1 = parse_f64()?,
            "scale_factor" => cfg.scale_factor = parse_f64()?,
            "elastic_sigma_lo" => cfg.elastic_sigma_range.0 = parse_f64()?,
            "elastic_sigma_hi" => cfg.elastic_sigma_range.1 = parse_f64()?,
            "elastic_offset_lo" => cfg.elastic_offset_range.0 = parse_f64()?,
            "elastic_offset_hi" => cfg.elastic_offset_range.1 = parse_f64()?,
            "elastic_grid_spacing" => cfg.elastic_grid_spacing = parse_usize()?,
            "gamma_lo" => cfg.gamma_range.0 = parse_f64()?,
            "gamma_hi" => cfg.gamma_range.1 = parse_f64()?,
            "noise_mean" => cfg.noise_mean = parse_f64()?,
            "noise_sigma" => cfg.noise_sigma = parse_f64()?,
            "intensity_aug_pet" => cfg.intensity_aug_pet = parse_bool()?,
            "intensity_aug_ct" => cfg.intensity_aug_ct = parse_bool()?,
            "seed" => cfg.seed = value.parse().with_context(|| format!("bad seed {value}"))?,
            other => bail!("unknown augmentation config key {other}"),
        }
    }
    Ok(cfg)
}

fn augment_cmd(
    pet: &Path,
    ct: &Path,
    mask: &Path,
    out_dir: &Path,
    patch_size: usize,
    config: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let mut cfg = petseg::augment::AugmentConfig {
        patch_size,
        seed,
        ..petseg::augment::AugmentConfig::default()
    };
    if let Some(path) = config {
        cfg = augment_config_from_kv(cfg, &parse_kv_file(path)?)?;
    }
    log_config(
        "augment",
        &[
            ("pet", pet.display().to_string()),
            ("ct", ct.display().to_string()),
            ("mask", mask.display().to_string()),
            ("out_dir", out_dir.display().to_string()),
            ("patch_size", cfg.patch_size.to_string()),
            ("seed", cfg.seed.to_string()),
        ],
    );
    let (pet_raw, _) = read_volume_from_path(pet)?;
    let (ct_raw, _) = read_volume_from_path(ct)?;
    let (mask_raw, _) = read_volume_from_path(mask)?;
    let pet_vol = pet_raw.with_kind(VolumeKind::PetSuv)?;
    let mask_vol = mask_raw.into_mask()?;

    let (pet_aug, ct_aug, mask_aug) =
        petseg::augment::augment(&pet_vol, &ct_raw, &mask_vol, &cfg)?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    write_volume_to_path(&pet_aug, None, out_dir.join("pet.nii.gz"))?;
    write_volume_to_path(&ct_aug, None, out_dir.join("ct.nii.gz"))?;
    write_volume_to_path(&mask_aug, None, out_dir.join("mask.nii.gz"))?;
    eprintln!("augment: wrote patches of shape {:?}", pet_aug.shape());
    Ok(())
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

fn split(cases_path: &Path, out: &Path, k: usize, per_image: bool, seed: u64) -> Result<()> {
    log_config(
        "split",
        &[
            ("cases", cases_path.display().to_string()),
            ("out", out.display().to_string()),
            ("k", k.to_string()),
            ("per_image", per_image.to_string()),
            ("seed", seed.to_string()),
        ],
    );
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(cases_path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("input CSV lacks a {name} column"))
    };
    let id_col = col("case_id")?;
    let patient_col = headers.iter().position(|h| h == "patient_id");
    let cohort_col = col("cohort")?;
    let mut cases = Vec::new();
    for record in reader.records() {
        let record = record?;
        let patient = patient_col
            .and_then(|c| record.get(c))
            .map(str::to_string)
            .filter(|p| !p.is_empty());
        cases.push(CaseRecord {
            case_id: record.get(id_col).unwrap_or_default().to_string(),
            patient_id: patient,
            cohort: record.get(cohort_col).unwrap_or_default().to_string(),
        });
    }
    let mode = if per_image { SplitMode::PerImage } else { SplitMode::PerPatient };
    let assignment = stratified_split(&cases, k, seed, mode)?;
    for warning in assignment.warnings() {
        eprintln!("warning: {warning}");
    }
    let mut writer = csv::Writer::from_path(out)?;
    writer.write_record(["case_id", "fold"])?;
    for (case_id, fold) in assignment.entries() {
        writer.write_record([case_id, &fold.to_string()])?;
    }
    writer.flush()?;
    eprintln!("split: assigned {} cases to {k} folds", assignment.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-toy
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn train_toy(
    out: &Path,
    epochs: usize,
    train_cases: usize,
    val_cases: usize,
    patch: usize,
    dataset_kind: DatasetArg,
    lr_max: f64,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    log_config(
        "train-toy",
        &[
            ("out", out.display().to_string()),
            ("epochs", epochs.to_string()),
            ("train_cases", train_cases.to_string()),
            ("val_cases", val_cases.to_string()),
            ("patch", patch.to_string()),
            ("dataset", format!("{dataset_kind:?}").to_lowercase()),
            ("lr_max", lr_max.to_string()),
            ("batch_size", batch_size.to_string()),
            ("seed", seed.to_string()),
        ],
    );
    let shape = [patch; 3];
    let (dataset, loss_cfg) = match dataset_kind {
        DatasetArg::Separable => (
            ToyDataset::separable(seed, train_cases, val_cases, shape),
            LossConfig::default(),
        ),
        // negative controls have no foreground anywhere; give the absent
        // class the max finite weight so the Dice term still constrains it
        DatasetArg::Background => (
            ToyDataset::all_background(seed, train_cases, val_cases, shape),
            LossConfig {
                absent_class: petseg::loss::AbsentClassWeight::MaxFinite,
                ..LossConfig::default()
            },
        ),
    };
    let cfg = TrainConfig {
        schedule: ScheduleConfig { lr_max, total_epochs: epochs },
        epochs,
        batch_size,
        loss: loss_cfg,
        ..TrainConfig::default()
    };
    let outcome = train(&dataset, &cfg)?;
    let mut writer = csv::Writer::from_path(out)?;
    writer.write_record(["epoch", "loss", "val_dsc"])?;
    for r in &outcome.records {
        writer.write_record([
            r.epoch.to_string(),
            sig6(r.train_loss),
            sig6(r.val_dsc),
        ])?;
    }
    writer.flush()?;
    let best = outcome.records[outcome.best_epoch];
    println!(
        "best_epoch {} val_dsc {} params {:?}",
        outcome.best_epoch,
        sig6(best.val_dsc),
        outcome.model.params
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// losscheck
// ---------------------------------------------------------------------------

fn losscheck(
    batches: usize,
    max_batch: usize,
    max_dim: usize,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<()> {
    log_config(
        "losscheck",
        &[
            ("batches", batches.to_string()),
            ("max_batch", max_batch.to_string()),
            ("max_dim", max_dim.to_string()),
            ("step", step.to_string()),
            ("tolerance", tolerance.to_string()),
            ("seed", seed.to_string()),
        ],
    );
    let cfg = LossConfig::default();
    let mut worst = 0.0f64;
    for b in 0..batches {
        let mut r = rng::stream(seed, 0x10c + b as u64);
        let n_b = r.gen_range(1..=max_batch.max(1));
        let shape = [
            r.gen_range(1..=max_dim.max(1)),
            r.gen_range(1..=max_dim.max(1)),
            r.gen_range(1..=max_dim.max(1)),
        ];
        let voxels = shape[0] * shape[1] * shape[2];
        let logits: Vec<f64> =
            (0..n_b * 2 * voxels).map(|_| r.gen_range(-2.5..2.5)).collect();
        let fg: Vec<u8> = (0..n_b * voxels).map(|_| r.gen_range(0..2u8)).collect();
        let batch = LossBatch::from_mask(n_b, shape, logits, &fg)?;
        if b == 0 {
            let report = petseg::loss::evaluate(&batch, &cfg);
            println!(
                "batch 0: n_b {} shape {:?} gdl {} fl {} gdfl {}",
                n_b,
                shape,
                sig6(report.gdl),
                sig6(report.fl),
                sig6(report.gdfl)
            );
        }
        let check = gradient_check(&batch, &cfg, step);
        worst = worst.max(check.max_rel_error);
    }
    println!("gradient check: max relative error {worst:.3e} over {batches} batches");
    if worst > tolerance {
        bail!("gradient check failed: {worst:.3e} exceeds tolerance {tolerance:.1e}");
    }
    println!("gradient check: PASS (tolerance {tolerance:.1e})");
    Ok(())
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

struct InferArgs {
    pet: PathBuf,
    ct: PathBuf,
    out: PathBuf,
    window: usize,
    overlap: f64,
    blend: BlendArg,
    predictor: PredictorArg,
    external_cmd: Option<String>,
    threshold: f32,
    out_kind: OutKindArg,
    reference: Option<PathBuf>,
    stub_gain: f32,
    stub_suv: f32,
    jobs: usize,
}

fn infer_cmd(args: InferArgs) -> Result<()> {
    log_config(
        "infer",
        &[
            ("pet", args.pet.display().to_string()),
            ("ct", args.ct.display().to_string()),
            ("out", args.out.display().to_string()),
            ("window", args.window.to_string()),
            ("overlap", args.overlap.to_string()),
            ("blend", format!("{:?}", args.blend).to_lowercase()),
            ("predictor", format!("{:?}", args.predictor).to_lowercase()),
            ("threshold", args.threshold.to_string()),
            ("out_kind", format!("{:?}", args.out_kind).to_lowercase()),
            ("jobs", args.jobs.to_string()),
        ],
    );
    let (pet_raw, _) = read_volume_from_path(&args.pet)?;
    let (ct_raw, _) = read_volume_from_path(&args.ct)?;
    let pet = pet_raw.with_kind(VolumeKind::PetSuv)?;

    let plan = plan_windows(pet.shape(), args.window, args.overlap)?;
    let blend = match args.blend {
        BlendArg::Constant => BlendMode::Constant,
        BlendArg::Gaussian => BlendMode::Gaussian,
    };
    let prob = match args.predictor {
        PredictorArg::Stub => {
            let stub = StubPredictor { gain: args.stub_gain, suv_threshold: args.stub_suv };
            infer(&pet, &ct_raw, &stub, &plan, blend, args.jobs)?
        }
        PredictorArg::External => {
            let command = args
                .external_cmd
                .as_deref()
                .context("--predictor external requires --external-cmd")?;
            let external = crate::external::ExternalPredictor::new(command)?;
            // external processes run serially; the command may parallelize internally
            infer(&pet, &ct_raw, &external, &plan, blend, 1)?
        }
    };
    write_thresholded(&prob, args.threshold, args.out_kind, args.reference.as_deref(), &args.out)?;
    eprintln!(
        "infer: {} windows over shape {:?} -> {}",
        plan.regions().len(),
        pet.shape(),
        args.out.display()
    );
    Ok(())
}

/// Shared output stage: keep the probability map or threshold it into a
/// mask, optionally resampled onto a reference grid.
fn write_thresholded(
    prob: &Volume3D,
    threshold: f32,
    out_kind: OutKindArg,
    reference: Option<&Path>,
    out: &Path,
) -> Result<()> {
    match out_kind {
        OutKindArg::Prob => {
            if reference.is_some() {
                bail!("--reference applies to mask output only");
            }
            write_volume_to_path(prob, None, out)?;
        }
        OutKindArg::Mask => {
            let mut mask = binarize(prob, threshold)?;
            if let Some(ref_path) = reference {
                let (ref_raw, _) = read_volume_from_path(ref_path)?;
                mask = resample_to_reference(&mask, &ref_raw)?;
            }
            write_volume_to_path(&mask, None, out)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ensemble
// ---------------------------------------------------------------------------

fn ensemble_cmd(
    inputs: &[PathBuf],
    weights: Option<&[f64]>,
    out: &Path,
    threshold: f32,
    out_kind: OutKindArg,
    reference: Option<&Path>,
) -> Result<()> {
    log_config(
        "ensemble",
        &[
            ("inputs", inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")),
            (
                "weights",
                weights
                    .map(|w| w.iter().map(f64::to_string).collect::<Vec<_>>().join(","))
                    .unwrap_or_else(|| "uniform".into()),
            ),
            ("out", out.display().to_string()),
            ("threshold", threshold.to_string()),
            ("out_kind", format!("{out_kind:?}").to_lowercase()),
        ],
    );
    let mut maps = Vec::with_capacity(inputs.len());
    for path in inputs {
        let (raw, _) = read_volume_from_path(path)?;
        maps.push(raw.with_kind(VolumeKind::Prob)?);
    }
    let combined = ensemble(&maps, weights)?;
    write_thresholded(&combined, threshold, out_kind, reference, out)?;
    eprintln!("ensemble: combined {} maps -> {}", maps.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn nifti_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in
        std::fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))?
    {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn evaluate(
    gt_dir: &Path,
    pred_dir: &Path,
    out: &Path,
    connectivity: u8,
    jobs: usize,
    verbose: u8,
) -> Result<()> {
    log_config(
        "evaluate",
        &[
            ("gt_dir", gt_dir.display().to_string()),
            ("pred_dir", pred_dir.display().to_string()),
            ("out", out.display().to_string()),
            ("connectivity", connectivity.to_string()),
            ("jobs", jobs.to_string()),
        ],
    );
    let conn = Connectivity::from_u8(connectivity)
        .with_context(|| format!("connectivity must be 6, 18, or 26, got {connectivity}"))?;
    // conventions that shape the numbers, stated up front
    eprintln!(
        "conventions: {connectivity}-connectivity components; DSC of two empty masks = 1.0"
    );
    let gt_files = nifti_files(gt_dir)?;
    let mut pairs = Vec::new();
    for gt_path in &gt_files {
        let name = gt_path.file_name().unwrap();
        let pred_path = pred_dir.join(name);
        if !pred_path.exists() {
            bail!(
                "prediction for {} not found in {}",
                name.to_string_lossy(),
                pred_dir.display()
            );
        }
        pairs.push((gt_path.clone(), pred_path));
    }

    let score_case = |(gt_path, pred_path): &(PathBuf, PathBuf)| -> Result<(String, f64, f64, f64)> {
        let (gt_raw, _) = read_volume_from_path(gt_path)?;
        let (pred_raw, _) = read_volume_from_path(pred_path)?;
        let gt = gt_raw.into_mask().with_context(|| {
            format!("{} is not a binary mask", gt_path.display())
        })?;
        let pred = pred_raw.into_mask().with_context(|| {
            format!("{} is not a binary mask", pred_path.display())
        })?;
        let case_id = gt_path
            .file_name()
            .unwrap()
            .to_string_lossy()
            .trim_end_matches(".nii.gz")
            .trim_end_matches(".nii")
            .to_string();
        Ok((
            case_id,
            dsc(&gt, &pred)?,
            fpv(&gt, &pred, conn)?,
            fnv(&gt, &pred, conn)?,
        ))
    };

    let rows: Vec<(String, f64, f64, f64)> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
        pool.install(|| pairs.par_iter().map(score_case).collect::<Result<Vec<_>>>())?
    } else {
        pairs.iter().map(score_case).collect::<Result<Vec<_>>>()?
    };

    let mut writer = csv::Writer::from_path(out)?;
    writer.write_record(["case_id", "dsc", "fpv_ml", "fnv_ml"])?;
    for (case_id, d, fp, fn_) in &rows {
        if verbose > 0 {
            eprintln!("case {case_id}: dsc {d} fpv {fp} fnv {fn_}");
        }
        writer.write_record([case_id.clone(), sig6(*d), sig6(*fp), sig6(*fn_)])?;
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mean_d = rows.iter().map(|r| r.1).sum::<f64>() / n;
        let mean_fp = rows.iter().map(|r| r.2).sum::<f64>() / n;
        let mean_fn = rows.iter().map(|r| r.3).sum::<f64>() / n;
        writer.write_record([
            "mean".to_string(),
            sig6(mean_d),
            sig6(mean_fp),
            sig6(mean_fn),
        ])?;
    }
    writer.flush()?;
    eprintln!("evaluate: scored {} cases -> {}", rows.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// rank
// ---------------------------------------------------------------------------

fn rank(inputs: &[PathBuf], names: Option<Vec<String>>, out: &Path) -> Result<()> {
    log_config(
        "rank",
        &[
            ("inputs", inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")),
            ("out", out.display().to_string()),
        ],
    );
    if let Some(names) = &names {
        if names.len() != inputs.len() {
            bail!("got {} names for {} inputs", names.len(), inputs.len());
        }
    }
    let mut entries = Vec::new();
    for (i, path) in inputs.iter().enumerate() {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let mut mean_row: Option<(f64, f64, f64)> = None;
        for record in reader.records() {
            let record = record?;
            if record.get(0) == Some("mean") {
                let parse = |i: usize| -> Result<f64> {
                    record
                        .get(i)
                        .with_context(|| format!("{}: short mean row", path.display()))?
                        .parse::<f64>()
                        .with_context(|| format!("{}: bad mean row", path.display()))
                };
                mean_row = Some((parse(1)?, parse(2)?, parse(3)?));
            }
        }
        let (mean_dsc, mean_fpv, mean_fnv) = mean_row
            .with_context(|| format!("{} has no mean summary row", path.display()))?;
        let name = names
            .as_ref()
            .map(|n| n[i].clone())
            .unwrap_or_else(|| {
                path.file_stem().unwrap_or_default().to_string_lossy().to_string()
            });
        entries.push(AlgorithmMetrics {
            name,
            mean_dsc,
            mean_fpv_ml: mean_fpv,
            mean_fnv_ml: mean_fnv,
        });
    }
    let ranking = rank_aggregate(&entries)?;
    let mut writer = csv::Writer::from_path(out)?;
    writer.write_record([
        "algorithm",
        "rank_dsc",
        "rank_fpv",
        "rank_fnv",
        "score",
        "final_rank",
    ])?;
    for row in &ranking {
        writer.write_record([
            row.name.clone(),
            sig6(row.rank_dsc),
            sig6(row.rank_fpv),
            sig6(row.rank_fnv),
            sig6(row.score),
            sig6(row.final_rank),
        ])?;
        println!(
            "{}: score {} (ranks {}/{}/{})",
            row.name,
            sig6(row.score),
            row.rank_dsc,
            row.rank_fpv,
            row.rank_fnv
        );
    }
    writer.flush()?;
    Ok(())
}
