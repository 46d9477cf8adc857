//! End-to-end tests of the `petseg` binary: exit codes, file outputs, and
//! seeded determinism.

use std::path::Path;
use std::process::{Command, Output};

use petseg::metrics::{dsc, fnv, fpv, Connectivity};
use petseg::nifti::{read_volume_from_path, write_volume_to_path};
use petseg::volume::{Volume3D, VolumeKind};

fn petseg_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_petseg"))
}

fn run(args: &[&str]) -> Output {
    petseg_bin().args(args).output().expect("binary runs")
}

fn assert_exit(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn write_mask(path: &Path, shape: [usize; 3], spacing: [f32; 3], data: Vec<u8>) {
    let mask = Volume3D::mask(shape, spacing, data).unwrap();
    write_volume_to_path(&mask, None, path).unwrap();
}

fn write_prob(path: &Path, shape: [usize; 3], value: f32) {
    let n = shape[0] * shape[1] * shape[2];
    let prob = Volume3D::from_f32(shape, [2.0; 3], VolumeKind::Prob, vec![value; n]).unwrap();
    write_volume_to_path(&prob, None, path).unwrap();
}

#[test]
fn help_lists_documented_defaults() {
    let output = run(&["infer", "--help"]);
    assert_exit(&output, 0);
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("192"), "window default missing:\n{text}");
    assert!(text.contains("0.5"), "overlap default missing:\n{text}");
    assert!(text.contains("constant"), "blend default missing:\n{text}");
    assert!(text.contains("stub"), "predictor default missing:\n{text}");

    let output = run(&["evaluate", "--help"]);
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("18"), "connectivity default missing:\n{text}");

    let output = run(&["train-toy", "--help"]);
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("0.001"), "lr default missing:\n{text}");
    assert!(text.contains("300") || text.contains("50"), "epoch default missing:\n{text}");
}

#[test]
fn unknown_flag_and_subcommand_exit_1() {
    assert_exit(&run(&["evaluate", "--frobnicate"]), 1);
    assert_exit(&run(&["not-a-subcommand"]), 1);
}

#[test]
fn missing_input_file_exits_2() {
    assert_exit(&run(&["info", "--input", "/definitely/not/here.nii"]), 2);
}

#[test]
fn evaluate_on_empty_directories_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    let pred = dir.path().join("pred");
    std::fs::create_dir_all(&gt).unwrap();
    std::fs::create_dir_all(&pred).unwrap();
    let out = dir.path().join("metrics.csv");
    let output = run(&[
        "evaluate",
        "--gt-dir",
        gt.to_str().unwrap(),
        "--pred-dir",
        pred.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_exit(&output, 0);
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.trim(), "case_id,dsc,fpv_ml,fnv_ml");
}

#[test]
fn evaluate_matches_library_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let gt_dir = dir.path().join("gt");
    let pred_dir = dir.path().join("pred");
    std::fs::create_dir_all(&gt_dir).unwrap();
    std::fs::create_dir_all(&pred_dir).unwrap();

    let shape = [6usize, 6, 6];
    let n = 216;
    let gt_a: Vec<u8> = (0..n).map(|i| u8::from(i % 7 == 0)).collect();
    let pred_a: Vec<u8> = (0..n).map(|i| u8::from(i % 7 == 0 && i % 3 == 0)).collect();
    write_mask(&gt_dir.join("case_a.nii.gz"), shape, [2.0; 3], gt_a.clone());
    write_mask(&pred_dir.join("case_a.nii.gz"), shape, [2.0; 3], pred_a.clone());
    write_mask(&gt_dir.join("case_b.nii"), shape, [2.0; 3], vec![0; n]);
    write_mask(&pred_dir.join("case_b.nii"), shape, [2.0; 3], vec![0; n]);

    let out = dir.path().join("metrics.csv");
    let output = run(&[
        "evaluate",
        "--gt-dir",
        gt_dir.to_str().unwrap(),
        "--pred-dir",
        pred_dir.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--jobs",
        "2",
    ]);
    assert_exit(&output, 0);

    let gt_vol = Volume3D::mask(shape, [2.0; 3], gt_a).unwrap();
    let pred_vol = Volume3D::mask(shape, [2.0; 3], pred_a).unwrap();
    let want_dsc = dsc(&gt_vol, &pred_vol).unwrap();
    let want_fpv = fpv(&gt_vol, &pred_vol, Connectivity::Eighteen).unwrap();
    let want_fnv = fnv(&gt_vol, &pred_vol, Connectivity::Eighteen).unwrap();

    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "case_id,dsc,fpv_ml,fnv_ml");
    let row_a: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(row_a[0], "case_a");
    assert!((row_a[1].parse::<f64>().unwrap() - want_dsc).abs() < 1e-5);
    assert!((row_a[2].parse::<f64>().unwrap() - want_fpv).abs() < 1e-5);
    assert!((row_a[3].parse::<f64>().unwrap() - want_fnv).abs() < 1e-5);
    // the empty negative-control pair scores DSC 1
    let row_b: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(row_b[0], "case_b");
    assert_eq!(row_b[1], "1.00000");
    assert!(lines[3].starts_with("mean,"));
}

#[test]
fn infer_with_stub_writes_a_threshold_mask() {
    let dir = tempfile::tempdir().unwrap();
    let shape = [10usize, 10, 10];
    let n = 1000;
    let pet_data: Vec<f32> = (0..n).map(|i| if i % 9 == 0 { 4.0 } else { 1.0 }).collect();
    let pet = Volume3D::from_f32(shape, [2.0; 3], VolumeKind::PetSuv, pet_data.clone()).unwrap();
    let ct = Volume3D::from_f32(shape, [2.0; 3], VolumeKind::Raw, vec![0.5; n]).unwrap();
    let pet_path = dir.path().join("pet.nii.gz");
    let ct_path = dir.path().join("ct.nii.gz");
    write_volume_to_path(&pet, None, &pet_path).unwrap();
    write_volume_to_path(&ct, None, &ct_path).unwrap();

    let out = dir.path().join("mask.nii.gz");
    let output = run(&[
        "infer",
        "--pet",
        pet_path.to_str().unwrap(),
        "--ct",
        ct_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--window",
        "8",
        "--overlap",
        "0.5",
    ]);
    assert_exit(&output, 0);
    let (mask_raw, _) = read_volume_from_path(&out).unwrap();
    let mask = mask_raw.into_mask().unwrap();
    // stub: foreground wherever SUV > 2.5
    let want: Vec<u8> = pet_data.iter().map(|&v| u8::from(v > 2.5)).collect();
    assert_eq!(mask.values_u8().unwrap(), &want[..]);
}

#[test]
fn ensemble_cli_weighted_mean_and_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.nii.gz");
    let b = dir.path().join("b.nii.gz");
    write_prob(&a, [4, 4, 4], 0.2);
    write_prob(&b, [4, 4, 4], 0.8);

    // weighted mean 0.65 -> probability output
    let prob_out = dir.path().join("prob.nii.gz");
    let output = run(&[
        "ensemble",
        "--inputs",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--weights",
        "1",
        "3",
        "--out",
        prob_out.to_str().unwrap(),
        "--out-kind",
        "prob",
    ]);
    assert_exit(&output, 0);
    let (prob, _) = read_volume_from_path(&prob_out).unwrap();
    for &v in prob.values_f32().unwrap() {
        assert!((v - 0.65).abs() < 1e-6);
    }

    // same inputs thresholded at 0.5 -> all foreground
    let mask_out = dir.path().join("mask.nii.gz");
    let output = run(&[
        "ensemble",
        "--inputs",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--weights",
        "1",
        "3",
        "--out",
        mask_out.to_str().unwrap(),
    ]);
    assert_exit(&output, 0);
    let (mask, _) = read_volume_from_path(&mask_out).unwrap();
    assert!(mask.into_mask().unwrap().values_u8().unwrap().iter().all(|&v| v == 1));

    // mismatched weights are a contract error
    let output = run(&[
        "ensemble",
        "--inputs",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--weights",
        "1",
        "--out",
        mask_out.to_str().unwrap(),
    ]);
    assert_exit(&output, 1);
}

#[test]
fn split_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cases = dir.path().join("cases.csv");
    let mut text = String::from("case_id,patient_id,cohort\n");
    for i in 0..30 {
        let patient = i / 2;
        let cohort = if patient % 3 == 0 { "melanoma" } else { "negative" };
        text.push_str(&format!("img{i:03},pat{patient:02},{cohort}\n"));
    }
    std::fs::write(&cases, text).unwrap();

    let out1 = dir.path().join("folds1.csv");
    let out2 = dir.path().join("folds2.csv");
    for out in [&out1, &out2] {
        let output = run(&[
            "split",
            "--cases",
            cases.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--k",
            "5",
            "--seed",
            "7",
        ]);
        assert_exit(&output, 0);
    }
    let bytes1 = std::fs::read(&out1).unwrap();
    let bytes2 = std::fs::read(&out2).unwrap();
    assert_eq!(bytes1, bytes2, "same seed must give byte-identical folds");

    let csv = String::from_utf8(bytes1).unwrap();
    assert!(csv.starts_with("case_id,fold\n"));
    assert_eq!(csv.lines().count(), 31);
    // patient integrity: both images of a patient share a fold
    let mut folds = std::collections::HashMap::new();
    for line in csv.lines().skip(1) {
        let (case, fold) = line.split_once(',').unwrap();
        let patient = &case[3..].parse::<usize>().unwrap() / 2;
        let entry = folds.entry(patient).or_insert_with(|| fold.to_string());
        assert_eq!(entry.as_str(), fold, "patient {patient} split across folds");
    }
}

#[test]
fn augment_outputs_are_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let shape = [12usize, 12, 12];
    let n = 12 * 12 * 12;
    let pet = Volume3D::from_f32(
        shape,
        [2.0; 3],
        VolumeKind::PetSuv,
        (0..n).map(|i| (i % 13) as f32 / 2.0).collect(),
    )
    .unwrap();
    let ct = Volume3D::from_f32(
        shape,
        [2.0; 3],
        VolumeKind::Raw,
        (0..n).map(|i| (i % 7) as f32 / 7.0).collect(),
    )
    .unwrap();
    let mask_data: Vec<u8> = (0..n).map(|i| u8::from(i % 11 == 0)).collect();
    let pet_path = dir.path().join("pet.nii.gz");
    let ct_path = dir.path().join("ct.nii.gz");
    let mask_path = dir.path().join("mask.nii.gz");
    write_volume_to_path(&pet, None, &pet_path).unwrap();
    write_volume_to_path(&ct, None, &ct_path).unwrap();
    write_mask(&mask_path, shape, [2.0; 3], mask_data);

    let mut outputs = Vec::new();
    for run_dir in ["a", "b"] {
        let out_dir = dir.path().join(run_dir);
        let output = run(&[
            "augment",
            "--pet",
            pet_path.to_str().unwrap(),
            "--ct",
            ct_path.to_str().unwrap(),
            "--mask",
            mask_path.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--patch-size",
            "8",
            "--seed",
            "5",
        ]);
        assert_exit(&output, 0);
        outputs.push(std::fs::read(out_dir.join("pet.nii.gz")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "same seed must reproduce augmented bytes");

    let other_dir = dir.path().join("c");
    let output = run(&[
        "augment",
        "--pet",
        pet_path.to_str().unwrap(),
        "--ct",
        ct_path.to_str().unwrap(),
        "--mask",
        mask_path.to_str().unwrap(),
        "--out-dir",
        other_dir.to_str().unwrap(),
        "--patch-size",
        "8",
        "--seed",
        "6",
    ]);
    assert_exit(&output, 0);
    let different = std::fs::read(other_dir.join("pet.nii.gz")).unwrap();
    assert_ne!(outputs[0], different, "different seeds must differ");
}

#[test]
fn train_toy_writes_epoch_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("records.csv");
    let output = run(&[
        "train-toy",
        "--out",
        out.to_str().unwrap(),
        "--epochs",
        "3",
        "--train-cases",
        "8",
        "--val-cases",
        "4",
        "--patch",
        "4",
    ]);
    assert_exit(&output, 0);
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("epoch,loss,val_dsc\n"));
    assert_eq!(csv.lines().count(), 4);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("best_epoch"), "{stdout}");
}

#[test]
fn losscheck_passes_at_default_tolerance() {
    let output = run(&["losscheck", "--batches", "10"]);
    assert_exit(&output, 0);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("PASS"), "{stdout}");
}

#[test]
fn rank_cli_orders_by_the_weighted_formula() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("alg_a.csv");
    let b = dir.path().join("alg_b.csv");
    std::fs::write(
        &a,
        "case_id,dsc,fpv_ml,fnv_ml\ncase0,0.70,2.0,2.0\nmean,0.70,2.0,2.0\n",
    )
    .unwrap();
    std::fs::write(
        &b,
        "case_id,dsc,fpv_ml,fnv_ml\ncase0,0.60,1.0,1.0\nmean,0.60,1.0,1.0\n",
    )
    .unwrap();
    let out = dir.path().join("ranking.csv");
    let output = run(&[
        "rank",
        "--inputs",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_exit(&output, 0);
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "algorithm,rank_dsc,rank_fpv,rank_fnv,score,final_rank");
    // the hand-checked tie: both score 1.5
    for line in &lines[1..] {
        assert!(line.contains(",1.50000,"), "{line}");
    }
}

/// The documented workflow end to end through files: raw phantom ->
/// preprocess -> five stub probability maps -> weighted ensemble resampled
/// back to the ground-truth grid -> evaluate -> rank.
#[test]
fn full_pipeline_through_files() {
    let dir = tempfile::tempdir().unwrap();

    // raw phantom: 48^3 at 4 mm, cylindrical body, one hot lesion
    let shape = [48usize, 48, 48];
    let n = shape[0] * shape[1] * shape[2];
    let mut activity = vec![0.0f32; n]; // Bq/ml
    let mut ct = vec![-1000.0f32; n];
    let mut gt = vec![0u8; n];
    for z in 0..48 {
        for y in 0..48 {
            for x in 0..48 {
                let idx = x + 48 * (y + 48 * z);
                let dx = x as f64 - 23.5;
                let dy = y as f64 - 23.5;
                if (dx * dx + dy * dy).sqrt() <= 20.0 && (4..44).contains(&z) {
                    ct[idx] = 0.0;
                    activity[idx] = 800.0;
                }
                let lx = x as f64 - 24.0;
                let ly = y as f64 - 24.0;
                let lz = z as f64 - 24.0;
                if (lx * lx + ly * ly + lz * lz).sqrt() <= 4.0 {
                    activity[idx] = 6000.0;
                    gt[idx] = 1;
                }
            }
        }
    }
    let pet_path = dir.path().join("pet_bqml.nii.gz");
    let ct_path = dir.path().join("ct_hu.nii.gz");
    write_volume_to_path(
        &Volume3D::from_f32(shape, [4.0; 3], VolumeKind::Raw, activity).unwrap(),
        None,
        &pet_path,
    )
    .unwrap();
    write_volume_to_path(
        &Volume3D::from_f32(shape, [4.0; 3], VolumeKind::CtHu, ct).unwrap(),
        None,
        &ct_path,
    )
    .unwrap();
    let gt_dir = dir.path().join("gt");
    std::fs::create_dir_all(&gt_dir).unwrap();
    let gt_path = gt_dir.join("case0.nii.gz");
    write_mask(&gt_path, shape, [4.0; 3], gt);

    // SUV sidecar: weight/dose = 1e-3 so SUV = activity / 1000
    let meta = dir.path().join("meta.txt");
    std::fs::write(&meta, "dose_bq=70000000\nweight_g=70000\ndelay_s=0\n").unwrap();

    // preprocess to 2 mm
    let prep = dir.path().join("prep");
    let output = run(&[
        "preprocess",
        "--pet",
        pet_path.to_str().unwrap(),
        "--ct",
        ct_path.to_str().unwrap(),
        "--mask",
        gt_path.to_str().unwrap(),
        "--out-dir",
        prep.to_str().unwrap(),
        "--suv-meta",
        meta.to_str().unwrap(),
    ]);
    assert_exit(&output, 0);

    // five "fold models": stub inference to probability maps
    let mut prob_paths = Vec::new();
    for fold in 0..5 {
        let prob_path = dir.path().join(format!("prob_f{fold}.nii.gz"));
        let output = run(&[
            "infer",
            "--pet",
            prep.join("pet.nii.gz").to_str().unwrap(),
            "--ct",
            prep.join("ct.nii.gz").to_str().unwrap(),
            "--out",
            prob_path.to_str().unwrap(),
            "--out-kind",
            "prob",
            "--window",
            "64",
            "--overlap",
            "0.5",
        ]);
        assert_exit(&output, 0);
        prob_paths.push(prob_path);
    }

    // weighted ensemble, thresholded, resampled back to the original grid
    let pred_dir = dir.path().join("pred");
    std::fs::create_dir_all(&pred_dir).unwrap();
    let pred_path = pred_dir.join("case0.nii.gz");
    let mut args: Vec<String> = vec!["ensemble".into(), "--inputs".into()];
    args.extend(prob_paths.iter().map(|p| p.to_str().unwrap().to_string()));
    args.push("--weights".into());
    for w in ["0.61", "0.62", "0.64", "0.63", "0.63"] {
        args.push(w.into());
    }
    args.extend([
        "--out".to_string(),
        pred_path.to_str().unwrap().to_string(),
        "--threshold".to_string(),
        "0.5".to_string(),
        "--reference".to_string(),
        gt_path.to_str().unwrap().to_string(),
    ]);
    let output =
        petseg_bin().args(&args).output().expect("binary runs");
    assert_exit(&output, 0);

    // evaluate against the planted lesion
    let metrics_path = dir.path().join("metrics.csv");
    let output = run(&[
        "evaluate",
        "--gt-dir",
        gt_dir.to_str().unwrap(),
        "--pred-dir",
        pred_dir.to_str().unwrap(),
        "--out",
        metrics_path.to_str().unwrap(),
    ]);
    assert_exit(&output, 0);
    let csv = std::fs::read_to_string(&metrics_path).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "case0");
    let dsc_value: f64 = row[1].parse().unwrap();
    let fpv_value: f64 = row[2].parse().unwrap();
    let fnv_value: f64 = row[3].parse().unwrap();
    assert!(dsc_value >= 0.9, "pipeline DSC {dsc_value}");
    assert_eq!(fpv_value, 0.0);
    assert_eq!(fnv_value, 0.0);

    // rank two copies of the same metrics: identical scores
    let ranking_path = dir.path().join("ranking.csv");
    let metrics2 = dir.path().join("metrics2.csv");
    std::fs::copy(&metrics_path, &metrics2).unwrap();
    let output = run(&[
        "rank",
        "--inputs",
        metrics_path.to_str().unwrap(),
        metrics2.to_str().unwrap(),
        "--names",
        "average",
        "weighted",
        "--out",
        ranking_path.to_str().unwrap(),
    ]);
    assert_exit(&output, 0);
    let ranking = std::fs::read_to_string(&ranking_path).unwrap();
    let scores: Vec<&str> = ranking
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap())
        .collect();
    assert_eq!(scores[0], scores[1], "identical metrics must tie");
}

#[cfg(unix)]
#[test]
fn external_predictor_protocol_round_trips() {
    use std::os::unix::fs::PermissionsExt;

    let dir = tempfile::tempdir().unwrap();
    // identity predictor: foreground logits = PET values
    let script = dir.path().join("predict.sh");
    std::fs::write(&script, "#!/bin/sh\ncp \"$1\" \"$3\"\n").unwrap();
    std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();

    let shape = [6usize, 6, 6];
    let n = 216;
    let pet_data: Vec<f32> = (0..n).map(|i| if i % 2 == 0 { 3.0 } else { -3.0 }).collect();
    let pet = Volume3D::from_f32(shape, [2.0; 3], VolumeKind::PetSuv, pet_data.clone()).unwrap();
    let ct = Volume3D::from_f32(shape, [2.0; 3], VolumeKind::Raw, vec![0.0; n]).unwrap();
    let pet_path = dir.path().join("pet.nii.gz");
    let ct_path = dir.path().join("ct.nii.gz");
    write_volume_to_path(&pet, None, &pet_path).unwrap();
    write_volume_to_path(&ct, None, &ct_path).unwrap();

    let out = dir.path().join("mask.nii.gz");
    let output = run(&[
        "infer",
        "--pet",
        pet_path.to_str().unwrap(),
        "--ct",
        ct_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--window",
        "6",
        "--predictor",
        "external",
        "--external-cmd",
        script.to_str().unwrap(),
    ]);
    assert_exit(&output, 0);
    let (mask_raw, _) = read_volume_from_path(&out).unwrap();
    let mask = mask_raw.into_mask().unwrap();
    // sigmoid(logit) >= 0.5 exactly where the logit (= PET value) >= 0
    let want: Vec<u8> = pet_data.iter().map(|&v| u8::from(v >= 0.0)).collect();
    assert_eq!(mask.values_u8().unwrap(), &want[..]);
}
