//! Non-randomized input transforms: SUV conversion, CT clipping, fixed-range
//! normalization, body-box cropping, and resampling to a target spacing.
//!
//! The transforms are applied in the order clip → normalize → crop →
//! resample, with SUV conversion happening before cropping so the body box
//! can threshold on SUV. The crop box is computed from CT values in
//! Hounsfield units together with PET SUV, and the same box is applied to
//! PET, CT, and mask.

use crate::error::{Error, Result};
use crate::volume::{PatchRegion, Volume3D, VolumeKind};

/// CT clip bounds in Hounsfield units.
pub const CT_CLIP_MIN: f32 = -1024.0;
pub const CT_CLIP_MAX: f32 = 1024.0;

/// Decay half-life of F-18 in seconds.
pub const F18_HALF_LIFE_S: f64 = 6586.2;

/// Per-case quantities needed for body-weight SUV conversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuvParams {
    /// Injected tracer dose in Bq, referenced to injection time.
    pub injected_dose_bq: f64,
    /// Patient weight in grams.
    pub patient_weight_g: f64,
    /// Seconds elapsed between injection and scan start.
    pub delay_seconds: f64,
    /// Tracer half-life in seconds.
    pub half_life_seconds: f64,
}

impl SuvParams {
    pub fn new(injected_dose_bq: f64, patient_weight_g: f64, delay_seconds: f64) -> Self {
        Self {
            injected_dose_bq,
            patient_weight_g,
            delay_seconds,
            half_life_seconds: F18_HALF_LIFE_S,
        }
    }

    fn validate(&self) -> Result<()> {
        let fields = [
            ("injected_dose_bq", self.injected_dose_bq),
            ("patient_weight_g", self.patient_weight_g),
            ("half_life_seconds", self.half_life_seconds),
        ];
        for (name, v) in fields {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.delay_seconds.is_finite() || self.delay_seconds < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "delay_seconds must be non-negative, got {}",
                self.delay_seconds
            )));
        }
        Ok(())
    }

    /// Dose remaining at scan time: `injected_dose * 2^(-delay/half_life)`.
    pub fn decayed_dose_bq(&self) -> f64 {
        self.injected_dose_bq * (-self.delay_seconds / self.half_life_seconds).exp2()
    }
}

/// Convert a PET activity volume (Bq/ml) to body-weight SUV.
///
/// Each voxel becomes `activity * weight / decayed_dose`; the result is
/// unitless and the output kind is `PetSuv`.
pub fn to_suv(activity: &Volume3D, params: &SuvParams) -> Result<Volume3D> {
    match activity.kind() {
        VolumeKind::Raw | VolumeKind::PetSuv => {}
        other => {
            return Err(Error::Contract(format!(
                "SUV conversion expects a raw activity or PET volume, got {other:?}"
            )))
        }
    }
    params.validate()?;
    let values = activity
        .values_f32()
        .ok_or_else(|| Error::Contract("SUV conversion expects intensity data".into()))?;
    let factor = params.patient_weight_g / params.decayed_dose_bq();
    let out: Vec<f32> = values.iter().map(|&c| (f64::from(c) * factor) as f32).collect();
    Ok(Volume3D::from_f32(activity.shape(), activity.spacing(), VolumeKind::PetSuv, out)?
        .with_origin(activity.origin()))
}

/// Clamp CT intensities to [-1024, 1024] HU.
pub fn clip_ct(ct: &Volume3D) -> Result<Volume3D> {
    if ct.kind() != VolumeKind::CtHu {
        return Err(Error::Contract(format!("clip_ct expects a CT volume, got {:?}", ct.kind())));
    }
    let values = ct.values_f32().expect("CT volumes store f32");
    let out: Vec<f32> = values.iter().map(|&v| v.clamp(CT_CLIP_MIN, CT_CLIP_MAX)).collect();
    Ok(Volume3D::from_f32(ct.shape(), ct.spacing(), VolumeKind::CtHu, out)?
        .with_origin(ct.origin()))
}

/// Map clipped CT values to [0, 1] using the fixed clip bounds
/// (`(v + 1024) / 2048`), not per-image extrema.
pub fn minmax_normalize(ct: &Volume3D) -> Result<Volume3D> {
    if ct.kind() != VolumeKind::CtHu {
        return Err(Error::Contract(format!(
            "minmax_normalize expects a CT volume, got {:?}",
            ct.kind()
        )));
    }
    let values = ct.values_f32().expect("CT volumes store f32");
    if let Some(v) = values.iter().find(|v| !(CT_CLIP_MIN..=CT_CLIP_MAX).contains(*v)) {
        return Err(Error::Contract(format!(
            "value {v} outside the clip range [{CT_CLIP_MIN}, {CT_CLIP_MAX}]; clip first"
        )));
    }
    let span = CT_CLIP_MAX - CT_CLIP_MIN;
    let out: Vec<f32> = values.iter().map(|&v| (v - CT_CLIP_MIN) / span).collect();
    Ok(Volume3D::from_f32(ct.shape(), ct.spacing(), VolumeKind::Raw, out)?
        .with_origin(ct.origin()))
}

/// Foreground thresholds defining the "body" for cropping.
#[derive(Debug, Clone, Copy)]
pub struct BodyBoxConfig {
    /// A voxel is body if CT exceeds this (HU), ...
    pub ct_hu_threshold: f32,
    /// ... or if PET exceeds this (SUV).
    pub pet_suv_threshold: f32,
}

impl Default for BodyBoxConfig {
    fn default() -> Self {
        Self { ct_hu_threshold: -800.0, pet_suv_threshold: 0.1 }
    }
}

/// Result of the body bounding-box scan.
#[derive(Debug, Clone, Copy)]
pub struct BodyBox {
    pub region: PatchRegion,
    /// Set when no voxel passed the thresholds and the whole volume was returned.
    pub empty_foreground: bool,
}

/// Tightest axis-aligned box containing every voxel with CT above the HU
/// threshold or PET above the SUV threshold. The box is meant to be applied
/// jointly to PET, CT, and mask.
pub fn body_bounding_box(
    pet: &Volume3D,
    ct: &Volume3D,
    cfg: &BodyBoxConfig,
) -> Result<BodyBox> {
    if !pet.same_grid(ct) {
        return Err(Error::GeometryMismatch(format!(
            "PET grid {:?}/{:?} does not match CT grid {:?}/{:?}",
            pet.shape(),
            pet.spacing(),
            ct.shape(),
            ct.spacing()
        )));
    }
    let [nx, ny, nz] = pet.shape();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    let mut idx = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let fg = ct.value(idx) > cfg.ct_hu_threshold
                    || pet.value(idx) > cfg.pet_suv_threshold;
                if fg {
                    any = true;
                    let p = [x, y, z];
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                }
                idx += 1;
            }
        }
    }
    if !any {
        return Ok(BodyBox {
            region: PatchRegion::full(pet.shape()),
            empty_foreground: true,
        });
    }
    let region = PatchRegion::new(lo, [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1]);
    Ok(BodyBox { region, empty_foreground: false })
}

/// Interpolation mode for resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Resample onto `target_spacing`. Output shape is
/// `ceil(shape * spacing / target)` per axis; sampling happens in world
/// coordinates (voxel index `i` sits at `origin + i * spacing`) with
/// out-of-range positions clamped to the volume edge. Masks require
/// `Nearest` and stay binary.
pub fn resample(
    volume: &Volume3D,
    target_spacing: [f32; 3],
    mode: Interpolation,
) -> Result<Volume3D> {
    if target_spacing.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "target spacing {target_spacing:?} must be strictly positive"
        )));
    }
    if volume.kind() == VolumeKind::Mask && mode != Interpolation::Nearest {
        return Err(Error::InvalidMode(
            "mask volumes must be resampled with nearest-neighbor interpolation".into(),
        ));
    }
    let shape = volume.shape();
    let spacing = volume.spacing();
    let mut out_shape = [0usize; 3];
    for a in 0..3 {
        let extent = shape[a] as f64 * f64::from(spacing[a]);
        out_shape[a] = (extent / f64::from(target_spacing[a])).ceil().max(1.0) as usize;
    }
    // index scale from output voxel j to input continuous index
    let scale = [
        f64::from(target_spacing[0]) / f64::from(spacing[0]),
        f64::from(target_spacing[1]) / f64::from(spacing[1]),
        f64::from(target_spacing[2]) / f64::from(spacing[2]),
    ];
    let sample_at = |j: [usize; 3]| -> [f64; 3] {
        [j[0] as f64 * scale[0], j[1] as f64 * scale[1], j[2] as f64 * scale[2]]
    };
    resample_grid(volume, out_shape, target_spacing, volume.origin(), mode, sample_at)
}

/// Nearest-neighbor resample of a binary mask onto the grid of `reference`.
pub fn resample_to_reference(pred: &Volume3D, reference: &Volume3D) -> Result<Volume3D> {
    if pred.kind() != VolumeKind::Mask {
        return Err(Error::Contract(format!(
            "resample_to_reference expects a mask, got {:?}",
            pred.kind()
        )));
    }
    let ref_spacing = reference.spacing();
    let ref_origin = reference.origin();
    let spacing = pred.spacing();
    let origin = pred.origin();
    let sample_at = |j: [usize; 3]| -> [f64; 3] {
        let mut u = [0.0f64; 3];
        for a in 0..3 {
            let world = f64::from(ref_origin[a]) + j[a] as f64 * f64::from(ref_spacing[a]);
            u[a] = (world - f64::from(origin[a])) / f64::from(spacing[a]);
        }
        u
    };
    resample_grid(
        pred,
        reference.shape(),
        ref_spacing,
        ref_origin,
        Interpolation::Nearest,
        sample_at,
    )
}

/// Shared sampling loop: fill an output grid by interpolating `volume` at the
/// continuous input index returned by `sample_at` for each output voxel.
pub(crate) fn resample_grid<F>(
    volume: &Volume3D,
    out_shape: [usize; 3],
    out_spacing: [f32; 3],
    out_origin: [f32; 3],
    mode: Interpolation,
    sample_at: F,
) -> Result<Volume3D>
where
    F: Fn([usize; 3]) -> [f64; 3],
{
    let n_out = out_shape[0] * out_shape[1] * out_shape[2];
    match mode {
        Interpolation::Nearest => {
            let mut out: Vec<u8> = Vec::with_capacity(n_out);
            let binary = volume.kind() == VolumeKind::Mask;
            let mut out_f: Vec<f32> = if binary { Vec::new() } else { Vec::with_capacity(n_out) };
            for z in 0..out_shape[2] {
                for y in 0..out_shape[1] {
                    for x in 0..out_shape[0] {
                        let u = sample_at([x, y, z]);
                        let v = sample_nearest(volume, u);
                        if binary {
                            out.push(v as u8);
                        } else {
                            out_f.push(v);
                        }
                    }
                }
            }
            if binary {
                Ok(Volume3D::mask(out_shape, out_spacing, out)?.with_origin(out_origin))
            } else {
                Ok(Volume3D::from_f32(out_shape, out_spacing, volume.kind(), out_f)?
                    .with_origin(out_origin))
            }
        }
        Interpolation::Trilinear => {
            let mut out: Vec<f32> = Vec::with_capacity(n_out);
            for z in 0..out_shape[2] {
                for y in 0..out_shape[1] {
                    for x in 0..out_shape[0] {
                        let u = sample_at([x, y, z]);
                        out.push(sample_trilinear(volume, u));
                    }
                }
            }
            Ok(Volume3D::from_f32(out_shape, out_spacing, volume.kind(), out)?
                .with_origin(out_origin))
        }
    }
}

/// Nearest-neighbor sample at a continuous index, edge-clamped.
pub(crate) fn sample_nearest(volume: &Volume3D, u: [f64; 3]) -> f32 {
    let shape = volume.shape();
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = (u[a] + 0.5).floor();
        idx[a] = r.clamp(0.0, (shape[a] - 1) as f64) as usize;
    }
    volume.at(idx[0], idx[1], idx[2])
}

/// Trilinear sample at a continuous index, edge-clamped.
pub(crate) fn sample_trilinear(volume: &Volume3D, u: [f64; 3]) -> f32 {
    let shape = volume.shape();
    let mut i0 = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let c = u[a].clamp(0.0, (shape[a] - 1) as f64);
        let base = if shape[a] == 1 { 0.0 } else { c.floor().min((shape[a] - 2) as f64) };
        i0[a] = base as usize;
        frac[a] = if shape[a] == 1 { 0.0 } else { c - base };
    }
    let i1 = [
        (i0[0] + 1).min(shape[0] - 1),
        (i0[1] + 1).min(shape[1] - 1),
        (i0[2] + 1).min(shape[2] - 1),
    ];
    let mut acc = 0.0f64;
    for (zi, wz) in [(i0[2], 1.0 - frac[2]), (i1[2], frac[2])] {
        for (yi, wy) in [(i0[1], 1.0 - frac[1]), (i1[1], frac[1])] {
            for (xi, wx) in [(i0[0], 1.0 - frac[0]), (i1[0], frac[0])] {
                let w = wx * wy * wz;
                if w != 0.0 {
                    acc += w * f64::from(volume.at(xi, yi, zi));
                }
            }
        }
    }
    acc as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn ct(shape: [usize; 3], values: Vec<f32>) -> Volume3D {
        Volume3D::from_f32(shape, [1.0; 3], VolumeKind::CtHu, values).unwrap()
    }

    #[test]
    fn suv_example_case() {
        let params = SuvParams::new(3.7e8, 70_000.0, 3600.0);
        let vol =
            Volume3D::from_f32([1, 1, 1], [1.0; 3], VolumeKind::Raw, vec![3619.0]).unwrap();
        let suv = to_suv(&vol, &params).unwrap();
        // independent recomputation of the decay formula
        let expect = 3619.0 * 70_000.0 / (3.7e8 * 2f64.powf(-3600.0 / 6586.2));
        assert!((expect - 1.0).abs() < 1e-3, "hand-check: {expect}");
        assert!((f64::from(suv.value(0)) - expect).abs() < 1e-6);
        assert_eq!(suv.kind(), VolumeKind::PetSuv);
    }

    #[test]
    fn suv_zero_delay_is_plain_ratio() {
        let params = SuvParams::new(2.0e8, 80_000.0, 0.0);
        let vol =
            Volume3D::from_f32([1, 1, 1], [1.0; 3], VolumeKind::Raw, vec![2500.0]).unwrap();
        let suv = to_suv(&vol, &params).unwrap();
        assert_eq!(suv.value(0), (2500.0 * 80_000.0 / 2.0e8) as f32);
    }

    #[test]
    fn suv_of_zero_activity_is_zero() {
        let params = SuvParams::new(3.7e8, 70_000.0, 1800.0);
        let vol = Volume3D::from_f32([2, 2, 2], [1.0; 3], VolumeKind::Raw, vec![0.0; 8]).unwrap();
        let suv = to_suv(&vol, &params).unwrap();
        assert!(suv.values_f32().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn suv_rejects_bad_params() {
        let vol = Volume3D::from_f32([1, 1, 1], [1.0; 3], VolumeKind::Raw, vec![1.0]).unwrap();
        assert!(to_suv(&vol, &SuvParams::new(0.0, 70_000.0, 0.0)).is_err());
        assert!(to_suv(&vol, &SuvParams::new(3.7e8, -1.0, 0.0)).is_err());
    }

    #[test]
    fn suv_is_linear_in_activity_and_inverse_in_dose() {
        let params = SuvParams::new(1.0e8, 70_000.0, 600.0);
        let doubled_dose = SuvParams::new(2.0e8, 70_000.0, 600.0);
        let vol =
            Volume3D::from_f32([1, 1, 1], [1.0; 3], VolumeKind::Raw, vec![1000.0]).unwrap();
        let vol2 =
            Volume3D::from_f32([1, 1, 1], [1.0; 3], VolumeKind::Raw, vec![2000.0]).unwrap();
        let s = f64::from(to_suv(&vol, &params).unwrap().value(0));
        let s_act = f64::from(to_suv(&vol2, &params).unwrap().value(0));
        let s_dose = f64::from(to_suv(&vol, &doubled_dose).unwrap().value(0));
        assert!((s_act / s - 2.0).abs() < 1e-6);
        assert!((s / s_dose - 2.0).abs() < 1e-6);
    }

    #[test]
    fn clip_bounds() {
        let v = ct([3, 1, 1], vec![-2000.0, 500.0, 2000.0]);
        let clipped = clip_ct(&v).unwrap();
        assert_eq!(clipped.values_f32().unwrap(), &[-1024.0, 500.0, 1024.0]);
    }

    #[test]
    fn clip_is_idempotent() {
        let mut r = rng::stream(11, 0);
        let values: Vec<f32> = (0..64).map(|_| r.gen_range(-3000.0..3000.0)).collect();
        let v = ct([4, 4, 4], values);
        let once = clip_ct(&v).unwrap();
        let twice = clip_ct(&once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn normalize_fixed_bounds() {
        let v = ct([3, 1, 1], vec![-1024.0, 0.0, 1024.0]);
        let n = minmax_normalize(&v).unwrap();
        assert_eq!(n.values_f32().unwrap(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_rejects_unclipped_values() {
        let v = ct([1, 1, 1], vec![1500.0]);
        assert!(matches!(minmax_normalize(&v), Err(Error::Contract(_))));
    }

    #[test]
    fn normalize_preserves_order() {
        let mut r = rng::stream(12, 0);
        let mut values: Vec<f32> = (0..101).map(|_| r.gen_range(-1024.0..1024.0)).collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = minmax_normalize(&ct([101, 1, 1], values)).unwrap();
        let out = n.values_f32().unwrap();
        assert!(out.windows(2).all(|w| w[0] <= w[1]));
    }

    fn pet_zero(shape: [usize; 3]) -> Volume3D {
        let n = shape[0] * shape[1] * shape[2];
        Volume3D::from_f32(shape, [1.0; 3], VolumeKind::PetSuv, vec![0.0; n]).unwrap()
    }

    #[test]
    fn body_box_all_air_returns_whole_volume_with_warning() {
        let shape = [4, 5, 6];
        let n = 4 * 5 * 6;
        let air = ct(shape, vec![-1024.0; n]);
        let bb = body_bounding_box(&pet_zero(shape), &air, &BodyBoxConfig::default()).unwrap();
        assert!(bb.empty_foreground);
        assert_eq!(bb.region, PatchRegion::full(shape));
    }

    #[test]
    fn body_box_single_voxel() {
        let shape = [10, 10, 10];
        let mut values = vec![-1024.0f32; 1000];
        values[5 + 10 * (5 + 10 * 5)] = 0.0; // soft tissue at (5,5,5)
        let bb =
            body_bounding_box(&pet_zero(shape), &ct(shape, values), &BodyBoxConfig::default())
                .unwrap();
        assert!(!bb.empty_foreground);
        assert_eq!(bb.region, PatchRegion::new([5, 5, 5], [1, 1, 1]));
    }

    #[test]
    fn body_box_matches_brute_force_on_phantom() {
        // cylinder along z occupying the central half of x/y
        let shape = [16, 16, 8];
        let mut ct_vals = vec![-1024.0f32; 16 * 16 * 8];
        let mut pet_vals = vec![0.0f32; 16 * 16 * 8];
        for z in 0..8 {
            for y in 0..16 {
                for x in 0..16 {
                    let dx = x as f32 - 7.5;
                    let dy = y as f32 - 7.5;
                    if (dx * dx + dy * dy).sqrt() <= 4.0 {
                        let i = x + 16 * (y + 16 * z);
                        ct_vals[i] = 40.0;
                        pet_vals[i] = 1.5;
                    }
                }
            }
        }
        let ct_v = ct(shape, ct_vals.clone());
        let pet_v =
            Volume3D::from_f32(shape, [1.0; 3], VolumeKind::PetSuv, pet_vals.clone()).unwrap();
        let cfg = BodyBoxConfig::default();
        let bb = body_bounding_box(&pet_v, &ct_v, &cfg).unwrap();
        // brute-force scan oracle
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for z in 0..8 {
            for y in 0..16 {
                for x in 0..16 {
                    let i = x + 16 * (y + 16 * z);
                    if ct_vals[i] > cfg.ct_hu_threshold || pet_vals[i] > cfg.pet_suv_threshold {
                        for (a, p) in [x, y, z].into_iter().enumerate() {
                            lo[a] = lo[a].min(p);
                            hi[a] = hi[a].max(p);
                        }
                    }
                }
            }
        }
        assert_eq!(bb.region.start, lo);
        assert_eq!(bb.region.end(), [hi[0] + 1, hi[1] + 1, hi[2] + 1]);
    }

    #[test]
    fn resample_identity_when_spacing_matches() {
        let v = Volume3D::from_f32(
            [3, 3, 3],
            [2.0; 3],
            VolumeKind::PetSuv,
            (0..27).map(|i| i as f32).collect(),
        )
        .unwrap();
        let r = resample(&v, [2.0; 3], Interpolation::Trilinear).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn resample_preserves_constants() {
        let v =
            Volume3D::from_f32([4, 5, 6], [3.0, 2.0, 1.5], VolumeKind::CtHu, vec![7.5; 120])
                .unwrap();
        for target in [[2.0f32; 3], [1.0, 2.0, 4.0]] {
            let r = resample(&v, target, Interpolation::Trilinear).unwrap();
            assert!(r.values_f32().unwrap().iter().all(|&x| (x - 7.5).abs() < 1e-6));
        }
    }

    #[test]
    fn resample_ramp_interleaves_midpoints() {
        // 1D ramp 0,1,2,3 at 4 mm, resampled to 2 mm
        let v = Volume3D::from_f32(
            [4, 1, 1],
            [4.0, 4.0, 4.0],
            VolumeKind::PetSuv,
            vec![0.0, 1.0, 2.0, 3.0],
        )
        .unwrap();
        let r = resample(&v, [2.0, 4.0, 4.0], Interpolation::Trilinear).unwrap();
        assert_eq!(r.shape(), [8, 1, 1]);
        let expect = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.0]; // last sample clamps to the edge
        for (got, want) in r.values_f32().unwrap().iter().zip(expect) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    /// Scalar-loop trilinear oracle, written independently of sample_trilinear.
    fn oracle_trilinear(values: &[f32], shape: [usize; 3], u: [f64; 3]) -> f64 {
        let clamped: Vec<f64> =
            (0..3).map(|a| u[a].clamp(0.0, (shape[a] - 1) as f64)).collect();
        let at = |x: usize, y: usize, z: usize| -> f64 {
            f64::from(values[x + shape[0] * (y + shape[1] * z)])
        };
        let mut total = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let lo = (clamped[a].floor() as usize).min(shape[a].saturating_sub(2));
                let f = if shape[a] == 1 { 0.0 } else { clamped[a] - lo as f64 };
                if corner >> a & 1 == 1 {
                    idx[a] = (lo + 1).min(shape[a] - 1);
                    w *= f;
                } else {
                    idx[a] = lo;
                    w *= 1.0 - f;
                }
            }
            total += w * at(idx[0], idx[1], idx[2]);
        }
        total
    }

    #[test]
    fn resample_matches_scalar_oracle_on_random_volumes() {
        let mut r = rng::stream(13, 0);
        for _ in 0..20 {
            let shape =
                [r.gen_range(2..6usize), r.gen_range(2..6usize), r.gen_range(2..6usize)];
            let n = shape[0] * shape[1] * shape[2];
            let values: Vec<f32> = (0..n).map(|_| r.gen_range(-5.0..5.0)).collect();
            let spacing = [r.gen_range(0.5..4.0f32), r.gen_range(0.5..4.0), r.gen_range(0.5..4.0)];
            let target = [r.gen_range(0.5..4.0f32), r.gen_range(0.5..4.0), r.gen_range(0.5..4.0)];
            let v = Volume3D::from_f32(shape, spacing, VolumeKind::CtHu, values.clone()).unwrap();
            let out = resample(&v, target, Interpolation::Trilinear).unwrap();
            let out_shape = out.shape();
            for z in 0..out_shape[2] {
                for y in 0..out_shape[1] {
                    for x in 0..out_shape[0] {
                        let u = [
                            x as f64 * f64::from(target[0]) / f64::from(spacing[0]),
                            y as f64 * f64::from(target[1]) / f64::from(spacing[1]),
                            z as f64 * f64::from(target[2]) / f64::from(spacing[2]),
                        ];
                        let want = oracle_trilinear(&values, shape, u);
                        let got = f64::from(out.at(x, y, z));
                        assert!((got - want).abs() < 1e-5, "at ({x},{y},{z}): {got} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn trilinear_on_mask_is_a_mode_error() {
        let m = Volume3D::mask([2, 2, 2], [2.0; 3], vec![1; 8]).unwrap();
        assert!(matches!(
            resample(&m, [1.0; 3], Interpolation::Trilinear),
            Err(Error::InvalidMode(_))
        ));
    }

    #[test]
    fn nearest_keeps_masks_binary() {
        let mut r = rng::stream(14, 0);
        for _ in 0..10 {
            let shape =
                [r.gen_range(2..7usize), r.gen_range(2..7usize), r.gen_range(2..7usize)];
            let n = shape[0] * shape[1] * shape[2];
            let data: Vec<u8> = (0..n).map(|_| r.gen_range(0..2u8)).collect();
            let m = Volume3D::mask(shape, [2.0; 3], data).unwrap();
            let out = resample(&m, [1.3, 0.9, 2.4], Interpolation::Nearest).unwrap();
            assert_eq!(out.kind(), VolumeKind::Mask);
            assert!(out.values_u8().unwrap().iter().all(|&b| b <= 1));
        }
    }

    #[test]
    fn resample_keeps_delta_spike_centered() {
        // center of mass of a delta spike must move < one target voxel
        let shape = [9, 9, 9];
        let mut values = vec![0.0f32; 729];
        values[4 + 9 * (4 + 9 * 4)] = 1.0;
        let v = Volume3D::from_f32(shape, [3.0; 3], VolumeKind::PetSuv, values).unwrap();
        let out = resample(&v, [2.0; 3], Interpolation::Trilinear).unwrap();
        let out_shape = out.shape();
        let mut mass = 0.0f64;
        let mut com = [0.0f64; 3];
        for z in 0..out_shape[2] {
            for y in 0..out_shape[1] {
                for x in 0..out_shape[0] {
                    let w = f64::from(out.at(x, y, z));
                    mass += w;
                    com[0] += w * x as f64 * 2.0;
                    com[1] += w * y as f64 * 2.0;
                    com[2] += w * z as f64 * 2.0;
                }
            }
        }
        for c in &mut com {
            *c /= mass;
        }
        for c in com {
            assert!((c - 12.0).abs() < 2.0, "center of mass {com:?}");
        }
    }

    #[test]
    fn resample_to_reference_identity() {
        let m = Volume3D::mask([3, 3, 3], [2.0; 3], vec![1; 27]).unwrap();
        let out = resample_to_reference(&m, &m.clone()).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn resample_to_reference_all_ones() {
        let m = Volume3D::mask([4, 4, 4], [2.0; 3], vec![1; 64]).unwrap();
        let reference = Volume3D::mask([3, 5, 2], [2.5, 1.5, 4.0], vec![0; 30]).unwrap();
        let out = resample_to_reference(&m, &reference).unwrap();
        assert_eq!(out.shape(), [3, 5, 2]);
        assert_eq!(out.spacing(), [2.5, 1.5, 4.0]);
        assert!(out.values_u8().unwrap().iter().all(|&b| b == 1));
    }

    #[test]
    fn resample_to_reference_checkerboard_matches_oracle() {
        let shape = [8, 8, 8];
        let data: Vec<u8> =
            (0..512).map(|i| ((i % 8 + (i / 8) % 8 + (i / 64)) % 2) as u8).collect();
        let m = Volume3D::mask(shape, [2.0; 3], data.clone()).unwrap();
        let reference = Volume3D::mask([4, 4, 4], [4.0; 3], vec![0; 64]).unwrap();
        let out = resample_to_reference(&m, &reference).unwrap();
        // nested-loop nearest-neighbor oracle
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let u: Vec<usize> = [x, y, z]
                        .iter()
                        .map(|&j| {
                            let world = j as f64 * 4.0;
                            let idx = (world / 2.0 + 0.5).floor();
                            idx.clamp(0.0, 7.0) as usize
                        })
                        .collect();
                    let want = data[u[0] + 8 * (u[1] + 8 * u[2])];
                    assert_eq!(out.at(x, y, z) as u8, want);
                }
            }
        }
    }
}
