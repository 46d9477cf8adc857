//! Per-epoch randomized training transforms with a deterministic seeded
//! stream: random cubic patch, one shared affine (integer translation, axial
//! rotation, isotropic scale), a smoothed elastic warp, gamma correction, and
//! Gaussian noise.
//!
//! Spatial transforms sample one parameter set per call and apply it
//! identically to PET, CT, and mask; the mask only ever sees nearest-neighbor
//! resampling and never receives gamma or noise. Each transform draws from
//! its own ChaCha substream, so a fixed seed reproduces the full pipeline
//! byte-for-byte regardless of platform or thread count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::preprocess::{resample_grid, Interpolation};
use crate::rng;
use crate::volume::{crop, PatchRegion, Volume3D, VolumeKind};

/// Parameters of the randomized transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Cubic patch edge in voxels.
    pub patch_size: usize,
    /// Integer voxel shift per axis, sampled uniformly from this inclusive range.
    pub translate_range: (i64, i64),
    /// Axial rotation angle bounds in radians.
    pub rotate_range: (f64, f64),
    /// Isotropic scale sampled from `U(1/scale_factor, scale_factor)`.
    pub scale_factor: f64,
    /// Gaussian sigma bounds (control-grid units) smoothing the elastic field.
    pub elastic_sigma_range: (f64, f64),
    /// Elastic control-point offset bounds in voxels.
    pub elastic_offset_range: (f64, f64),
    /// Voxels between elastic control points.
    pub elastic_grid_spacing: usize,
    /// Gamma exponent bounds.
    pub gamma_range: (f64, f64),
    pub noise_mean: f64,
    pub noise_sigma: f64,
    /// Apply gamma/noise to the PET channel.
    pub intensity_aug_pet: bool,
    /// Apply gamma/noise to the CT channel.
    pub intensity_aug_ct: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            patch_size: 192,
            translate_range: (0, 10),
            rotate_range: (-std::f64::consts::PI / 12.0, std::f64::consts::PI / 12.0),
            scale_factor: 1.1,
            elastic_sigma_range: (0.0, 1.0),
            elastic_offset_range: (0.0, 1.0),
            elastic_grid_spacing: 32,
            gamma_range: (0.7, 1.5),
            noise_mean: 0.0,
            noise_sigma: 1.0,
            intensity_aug_pet: true,
            intensity_aug_ct: true,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::InvalidParameter("patch_size must be positive".into()));
        }
        if self.elastic_grid_spacing == 0 {
            return Err(Error::InvalidParameter("elastic_grid_spacing must be positive".into()));
        }
        let ordered = [
            ("translate_range", self.translate_range.0 as f64, self.translate_range.1 as f64),
            ("rotate_range", self.rotate_range.0, self.rotate_range.1),
            ("elastic_sigma_range", self.elastic_sigma_range.0, self.elastic_sigma_range.1),
            ("elastic_offset_range", self.elastic_offset_range.0, self.elastic_offset_range.1),
            ("gamma_range", self.gamma_range.0, self.gamma_range.1),
        ];
        for (name, lo, hi) in ordered {
            if lo > hi || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} ({lo}, {hi}) is not well-ordered"
                )));
            }
        }
        if self.scale_factor < 1.0 {
            return Err(Error::InvalidParameter(format!(
                "scale_factor must be >= 1, got {}",
                self.scale_factor
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidParameter("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// Substream of this configuration's seed.
    pub fn stream(&self, id: u64) -> ChaCha8Rng {
        rng::stream(self.seed, id)
    }
}

/// Substream ids, one per transform.
mod streams {
    pub const PATCH: u64 = 1;
    pub const AFFINE: u64 = 2;
    pub const ELASTIC: u64 = 3;
    pub const GAMMA_PET: u64 = 4;
    pub const GAMMA_CT: u64 = 5;
    pub const NOISE_PET: u64 = 6;
    pub const NOISE_CT: u64 = 7;
}

fn check_shared_geometry(pet: &Volume3D, ct: &Volume3D, mask: &Volume3D) -> Result<()> {
    if !pet.same_grid(ct) || !pet.same_grid(mask) {
        return Err(Error::GeometryMismatch(
            "PET, CT, and mask must share shape and spacing".into(),
        ));
    }
    Ok(())
}

/// Zero-pad symmetrically so every axis reaches at least `target`.
fn pad_to_at_least(volume: &Volume3D, target: usize) -> Result<Volume3D> {
    let shape = volume.shape();
    if shape.iter().all(|&n| n >= target) {
        return Ok(volume.clone());
    }
    let mut out_shape = [0usize; 3];
    let mut before = [0usize; 3];
    for a in 0..3 {
        out_shape[a] = shape[a].max(target);
        before[a] = (out_shape[a] - shape[a]) / 2;
    }
    let spacing = volume.spacing();
    let origin = volume.origin();
    let new_origin = [
        origin[0] - before[0] as f32 * spacing[0],
        origin[1] - before[1] as f32 * spacing[1],
        origin[2] - before[2] as f32 * spacing[2],
    ];
    let [nx, ny, nz] = shape;
    let [px, py, _] = out_shape;
    match volume.values_u8() {
        Some(src) => {
            let mut data = vec![0u8; out_shape[0] * out_shape[1] * out_shape[2]];
            for z in 0..nz {
                for y in 0..ny {
                    let s = nx * (y + ny * z);
                    let d = before[0] + px * ((y + before[1]) + py * (z + before[2]));
                    data[d..d + nx].copy_from_slice(&src[s..s + nx]);
                }
            }
            Ok(Volume3D::mask(out_shape, spacing, data)?.with_origin(new_origin))
        }
        None => {
            let src = volume.values_f32().expect("intensity volume");
            let mut data = vec![0.0f32; out_shape[0] * out_shape[1] * out_shape[2]];
            for z in 0..nz {
                for y in 0..ny {
                    let s = nx * (y + ny * z);
                    let d = before[0] + px * ((y + before[1]) + py * (z + before[2]));
                    data[d..d + nx].copy_from_slice(&src[s..s + nx]);
                }
            }
            Ok(Volume3D::from_f32(out_shape, spacing, volume.kind(), data)?
                .with_origin(new_origin))
        }
    }
}

/// Uniform patch start for a padded shape.
fn sample_patch_start(
    padded_shape: [usize; 3],
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> [usize; 3] {
    let mut start = [0usize; 3];
    for a in 0..3 {
        let max = padded_shape[a] - patch;
        start[a] = if max == 0 { 0 } else { rng.gen_range(0..=max) };
    }
    start
}

/// Crop one random cubic patch, the same region from all three volumes.
/// Volumes smaller than the patch are zero-padded symmetrically first.
pub fn random_patch(
    pet: &Volume3D,
    ct: &Volume3D,
    mask: &Volume3D,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume3D, Volume3D, Volume3D)> {
    check_shared_geometry(pet, ct, mask)?;
    let pet = pad_to_at_least(pet, cfg.patch_size)?;
    let ct = pad_to_at_least(ct, cfg.patch_size)?;
    let mask = pad_to_at_least(mask, cfg.patch_size)?;
    let start = sample_patch_start(pet.shape(), cfg.patch_size, rng);
    let region = PatchRegion::new(start, [cfg.patch_size; 3]);
    Ok((crop(&pet, &region)?, crop(&ct, &region)?, crop(&mask, &region)?))
}

/// Apply a fixed affine (translation in voxels, axial rotation about the
/// volume center, isotropic scale) to one volume. Intensities are sampled
/// with trilinear interpolation, masks with nearest-neighbor; positions
/// outside the grid clamp to the edge.
pub fn apply_affine(
    volume: &Volume3D,
    translation: [f64; 3],
    angle: f64,
    scale: f64,
) -> Result<Volume3D> {
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::InvalidParameter(format!("scale must be positive, got {scale}")));
    }
    let shape = volume.shape();
    let center = [
        (shape[0] as f64 - 1.0) / 2.0,
        (shape[1] as f64 - 1.0) / 2.0,
        (shape[2] as f64 - 1.0) / 2.0,
    ];
    let (sin, cos) = (-angle).sin_cos(); // inverse rotation
    let inv_scale = 1.0 / scale;
    let sample_at = move |o: [usize; 3]| -> [f64; 3] {
        let vx = o[0] as f64 - center[0] - translation[0];
        let vy = o[1] as f64 - center[1] - translation[1];
        let vz = o[2] as f64 - center[2] - translation[2];
        let rx = vx * cos - vy * sin;
        let ry = vx * sin + vy * cos;
        [
            rx * inv_scale + center[0],
            ry * inv_scale + center[1],
            vz * inv_scale + center[2],
        ]
    };
    let mode = if volume.kind() == VolumeKind::Mask {
        Interpolation::Nearest
    } else {
        Interpolation::Trilinear
    };
    resample_grid(volume, shape, volume.spacing(), volume.origin(), mode, sample_at)
}

/// Sample one affine (translation, axial angle, isotropic scale) and apply it
/// to PET, CT, and mask identically.
pub fn random_affine(
    pet: &Volume3D,
    ct: &Volume3D,
    mask: &Volume3D,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume3D, Volume3D, Volume3D)> {
    check_shared_geometry(pet, ct, mask)?;
    let (t_lo, t_hi) = cfg.translate_range;
    let translation = [
        rng.gen_range(t_lo..=t_hi) as f64,
        rng.gen_range(t_lo..=t_hi) as f64,
        rng.gen_range(t_lo..=t_hi) as f64,
    ];
    let (r_lo, r_hi) = cfg.rotate_range;
    let angle = if r_lo == r_hi { r_lo } else { rng.gen_range(r_lo..r_hi) };
    let scale = if cfg.scale_factor == 1.0 {
        1.0
    } else {
        rng.gen_range(1.0 / cfg.scale_factor..cfg.scale_factor)
    };
    Ok((
        apply_affine(pet, translation, angle, scale)?,
        apply_affine(ct, translation, angle, scale)?,
        apply_affine(mask, translation, angle, scale)?,
    ))
}

/// Smooth, coarse random displacement field: per-axis control-point offsets
/// blurred by a Gaussian and interpolated back to voxel resolution.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    ctrl_dims: [usize; 3],
    grid_spacing: f64,
    /// One lattice of offsets (in voxels) per displacement axis.
    offsets: [Vec<f64>; 3],
}

impl DisplacementField {
    /// Largest control-point offset magnitude; interpolated values never
    /// exceed it (every sample is a convex combination).
    pub fn max_offset(&self) -> f64 {
        self.offsets
            .iter()
            .flat_map(|lattice| lattice.iter())
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
    }

    /// Displacement in voxels at a voxel position.
    pub fn at(&self, pos: [usize; 3]) -> [f64; 3] {
        let [mx, my, mz] = self.ctrl_dims;
        let mut u = [0.0f64; 3];
        for a in 0..3 {
            u[a] = (pos[a] as f64 / self.grid_spacing)
                .clamp(0.0, (self.ctrl_dims[a] - 1) as f64);
        }
        let base = |a: usize| -> (usize, f64) {
            let lo = (u[a].floor() as usize).min(self.ctrl_dims[a].saturating_sub(2));
            if self.ctrl_dims[a] == 1 {
                (0, 0.0)
            } else {
                (lo, u[a] - lo as f64)
            }
        };
        let (x0, fx) = base(0);
        let (y0, fy) = base(1);
        let (z0, fz) = base(2);
        let x1 = (x0 + 1).min(mx - 1);
        let y1 = (y0 + 1).min(my - 1);
        let z1 = (z0 + 1).min(mz - 1);
        let mut d = [0.0f64; 3];
        for (axis, lattice) in self.offsets.iter().enumerate() {
            let at = |x: usize, y: usize, z: usize| lattice[x + mx * (y + my * z)];
            let mut acc = 0.0;
            for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        acc += wx * wy * wz * at(xi, yi, zi);
                    }
                }
            }
            d[axis] = acc;
        }
        d
    }
}

/// Separable Gaussian blur over the control lattice with renormalized borders
/// (every output stays a convex combination of the inputs).
fn smooth_lattice(values: &mut Vec<f64>, dims: [usize; 3], sigma: f64) {
    if sigma < 1e-6 {
        return;
    }
    let radius = ((3.0 * sigma).ceil() as i64).max(1);
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let [mx, my, mz] = dims;
    let idx = |x: usize, y: usize, z: usize| x + mx * (y + my * z);
    for axis in 0..3 {
        let extent = dims[axis] as i64;
        let mut out = vec![0.0f64; values.len()];
        for z in 0..mz {
            for y in 0..my {
                for x in 0..mx {
                    let pos = [x as i64, y as i64, z as i64];
                    let mut acc = 0.0;
                    let mut wsum = 0.0;
                    for (ki, w) in kernel.iter().enumerate() {
                        let q = pos[axis] + ki as i64 - radius;
                        if q < 0 || q >= extent {
                            continue;
                        }
                        let mut p = [x, y, z];
                        p[axis] = q as usize;
                        acc += w * values[idx(p[0], p[1], p[2])];
                        wsum += w;
                    }
                    out[idx(x, y, z)] = acc / wsum;
                }
            }
        }
        *values = out;
    }
}

/// Draw a displacement field for a volume shape: control-point offsets
/// uniform in `elastic_offset_range`, smoothed by a Gaussian with sigma
/// uniform in `elastic_sigma_range`.
pub fn elastic_field(
    shape: [usize; 3],
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> DisplacementField {
    let spacing = cfg.elastic_grid_spacing;
    let ctrl_dims = [
        shape[0].div_ceil(spacing) + 1,
        shape[1].div_ceil(spacing) + 1,
        shape[2].div_ceil(spacing) + 1,
    ];
    let n = ctrl_dims[0] * ctrl_dims[1] * ctrl_dims[2];
    let (s_lo, s_hi) = cfg.elastic_sigma_range;
    let sigma = if s_lo == s_hi { s_lo } else { rng.gen_range(s_lo..s_hi) };
    let (o_lo, o_hi) = cfg.elastic_offset_range;
    let mut offsets: [Vec<f64>; 3] = std::array::from_fn(|_| {
        (0..n)
            .map(|_| if o_lo == o_hi { o_lo } else { rng.gen_range(o_lo..o_hi) })
            .collect()
    });
    for lattice in &mut offsets {
        smooth_lattice(lattice, ctrl_dims, sigma);
    }
    DisplacementField { ctrl_dims, grid_spacing: spacing as f64, offsets }
}

/// Warp one volume by a displacement field: output voxel `x` samples the
/// input at `x + d(x)` (edge-clamped; nearest-neighbor for masks).
pub fn apply_displacement(volume: &Volume3D, field: &DisplacementField) -> Result<Volume3D> {
    let shape = volume.shape();
    let sample_at = |o: [usize; 3]| -> [f64; 3] {
        let d = field.at(o);
        [o[0] as f64 + d[0], o[1] as f64 + d[1], o[2] as f64 + d[2]]
    };
    let mode = if volume.kind() == VolumeKind::Mask {
        Interpolation::Nearest
    } else {
        Interpolation::Trilinear
    };
    resample_grid(volume, shape, volume.spacing(), volume.origin(), mode, sample_at)
}

/// Sample one elastic deformation and apply it to all three volumes.
pub fn random_elastic(
    pet: &Volume3D,
    ct: &Volume3D,
    mask: &Volume3D,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume3D, Volume3D, Volume3D)> {
    check_shared_geometry(pet, ct, mask)?;
    let field = elastic_field(pet.shape(), cfg, rng);
    Ok((
        apply_displacement(pet, &field)?,
        apply_displacement(ct, &field)?,
        apply_displacement(mask, &field)?,
    ))
}

/// Gamma-correct with a fixed exponent: normalize to [0, 1] over the
/// volume's own extent, raise to `gamma`, rescale back. Constant volumes
/// pass through unchanged.
pub fn apply_gamma(volume: &Volume3D, gamma: f64) -> Result<Volume3D> {
    let values = volume
        .values_f32()
        .ok_or_else(|| Error::Contract("gamma correction expects an intensity volume".into()))?;
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi <= lo || !hi.is_finite() || !lo.is_finite() {
        return Ok(volume.clone());
    }
    let (lo, hi) = (f64::from(lo), f64::from(hi));
    let span = hi - lo;
    let out: Vec<f32> = values
        .iter()
        .map(|&v| {
            let t = (f64::from(v) - lo) / span;
            (lo + t.powf(gamma) * span) as f32
        })
        .collect();
    Ok(Volume3D::from_f32(volume.shape(), volume.spacing(), volume.kind(), out)?
        .with_origin(volume.origin()))
}

/// Gamma correction with the exponent drawn from `gamma_range`.
pub fn random_gamma(
    volume: &Volume3D,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Volume3D> {
    let (lo, hi) = cfg.gamma_range;
    let gamma = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    apply_gamma(volume, gamma)
}

/// Add iid Gaussian noise to an intensity volume.
pub fn random_noise(
    volume: &Volume3D,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Volume3D> {
    if volume.kind() == VolumeKind::Mask || volume.kind() == VolumeKind::Prob {
        return Err(Error::Contract(format!(
            "noise is only applied to intensity volumes, got {:?}",
            volume.kind()
        )));
    }
    let values = volume.values_f32().expect("intensity volume");
    let normal = Normal::new(cfg.noise_mean, cfg.noise_sigma)
        .map_err(|e| Error::InvalidParameter(format!("bad noise parameters: {e}")))?;
    let out: Vec<f32> =
        values.iter().map(|&v| v + normal.sample(rng) as f32).collect();
    Ok(Volume3D::from_f32(volume.shape(), volume.spacing(), volume.kind(), out)?
        .with_origin(volume.origin()))
}

/// The full randomized pipeline in order: patch, affine, elastic, gamma,
/// noise. Gamma and noise touch only the intensity channels enabled in the
/// config; the mask goes through the spatial transforms alone.
pub fn augment(
    pet: &Volume3D,
    ct: &Volume3D,
    mask: &Volume3D,
    cfg: &AugmentConfig,
) -> Result<(Volume3D, Volume3D, Volume3D)> {
    cfg.validate()?;
    check_shared_geometry(pet, ct, mask)?;
    let (pet, ct, mask) =
        random_patch(pet, ct, mask, cfg, &mut cfg.stream(streams::PATCH))?;
    let (pet, ct, mask) =
        random_affine(&pet, &ct, &mask, cfg, &mut cfg.stream(streams::AFFINE))?;
    let (mut pet, mut ct, mask) =
        random_elastic(&pet, &ct, &mask, cfg, &mut cfg.stream(streams::ELASTIC))?;
    if cfg.intensity_aug_pet {
        pet = random_gamma(&pet, cfg, &mut cfg.stream(streams::GAMMA_PET))?;
        pet = random_noise(&pet, cfg, &mut cfg.stream(streams::NOISE_PET))?;
    }
    if cfg.intensity_aug_ct {
        ct = random_gamma(&ct, cfg, &mut cfg.stream(streams::GAMMA_CT))?;
        ct = random_noise(&ct, cfg, &mut cfg.stream(streams::NOISE_CT))?;
    }
    Ok((pet, ct, mask))
}
