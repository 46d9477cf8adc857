//! Whole-body inference: sliding-window evaluation of a black-box predictor,
//! overlap blending, binarization, and probability-map ensembling.
//!
//! The predictor is any shape-preserving function from a two-channel patch to
//! two-channel logits; windows are planned so the union covers the volume
//! (volumes smaller than the window are zero-padded and the result cropped
//! back). Per-window foreground probabilities are blended with uniform or
//! Gaussian weights. Accumulation always walks windows in canonical region
//! order, so the output is bitwise independent of evaluation order and of the
//! worker-pool size.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::loss::sigmoid;
use crate::volume::{ChannelVolume, PatchRegion, Volume3D, VolumeKind};

/// A black-box patch predictor: two input channels (PET, CT) to two output
/// channels of logits (background, foreground) of the same spatial shape.
pub trait Predictor: Sync {
    fn predict(&self, input: &ChannelVolume) -> Result<ChannelVolume>;
}

/// Threshold stub predictor for pipeline tests: foreground logit
/// `gain * (SUV - threshold)`, background logit its negation. SUV 2.5 is the
/// conventional crude lesion cutoff; this is test scaffolding, not a model.
#[derive(Debug, Clone, Copy)]
pub struct StubPredictor {
    pub gain: f32,
    pub suv_threshold: f32,
}

impl Default for StubPredictor {
    fn default() -> Self {
        Self { gain: 10.0, suv_threshold: 2.5 }
    }
}

impl Predictor for StubPredictor {
    fn predict(&self, input: &ChannelVolume) -> Result<ChannelVolume> {
        if input.channels() != 2 {
            return Err(Error::Contract(format!(
                "stub predictor expects 2 channels, got {}",
                input.channels()
            )));
        }
        let pet = input.channel(0);
        let n = pet.len();
        let mut data = Vec::with_capacity(2 * n);
        data.extend(pet.iter().map(|&v| -self.gain * (v - self.suv_threshold)));
        data.extend(pet.iter().map(|&v| self.gain * (v - self.suv_threshold)));
        ChannelVolume::new(input.shape(), input.spacing(), 2, data)
            .map(|cv| cv.with_origin(input.origin()))
    }
}

/// How overlapping windows are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlendMode {
    /// Every window contributes uniformly.
    #[default]
    Constant,
    /// Separable Gaussian centered in the window, sigma = window/8.
    Gaussian,
}

/// Ordered window layout covering a (possibly padded) volume.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPlan {
    window: usize,
    overlap: f64,
    original_shape: [usize; 3],
    padded_shape: [usize; 3],
    pad_before: [usize; 3],
    regions: Vec<PatchRegion>,
}

impl WindowPlan {
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn overlap(&self) -> f64 {
        self.overlap
    }

    pub fn original_shape(&self) -> [usize; 3] {
        self.original_shape
    }

    /// Shape after zero-padding up to the window size.
    pub fn padded_shape(&self) -> [usize; 3] {
        self.padded_shape
    }

    pub fn pad_before(&self) -> [usize; 3] {
        self.pad_before
    }

    /// Window regions in padded-volume coordinates.
    pub fn regions(&self) -> &[PatchRegion] {
        &self.regions
    }

    /// Same plan with reordered regions (evaluation-order tests).
    pub fn with_regions(&self, regions: Vec<PatchRegion>) -> Self {
        Self { regions, ..self.clone() }
    }
}

/// Per-axis window starts: multiples of the stride, with the final start
/// clamped so the last window ends exactly at the edge.
fn axis_starts(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    if extent <= window {
        return vec![0];
    }
    let span = extent - window;
    let steps = span.div_ceil(stride);
    (0..=steps).map(|k| (k * stride).min(span)).collect()
}

/// Plan sliding windows of cubic size `window` with the given overlap
/// fraction over a volume of `shape`.
pub fn plan_windows(shape: [usize; 3], window: usize, overlap: f64) -> Result<WindowPlan> {
    if window == 0 {
        return Err(Error::InvalidParameter("window size must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidParameter(format!(
            "overlap must be in [0, 1), got {overlap}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidParameter(format!("shape {shape:?} has a zero component")));
    }
    let stride = ((window as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut padded = [0usize; 3];
    let mut pad_before = [0usize; 3];
    for a in 0..3 {
        padded[a] = shape[a].max(window);
        pad_before[a] = (padded[a] - shape[a]) / 2;
    }
    let xs = axis_starts(padded[0], window, stride);
    let ys = axis_starts(padded[1], window, stride);
    let zs = axis_starts(padded[2], window, stride);
    let mut regions = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                regions.push(PatchRegion::new([x, y, z], [window; 3]));
            }
        }
    }
    Ok(WindowPlan {
        window,
        overlap,
        original_shape: shape,
        padded_shape: padded,
        pad_before,
        regions,
    })
}

/// Zero-pad a channel into the padded frame.
fn pad_channel(values: &[f32], shape: [usize; 3], plan: &WindowPlan) -> Vec<f32> {
    let [nx, ny, nz] = shape;
    let [px, py, pz] = plan.padded_shape;
    let [bx, by, bz] = plan.pad_before;
    let mut out = vec![0.0f32; px * py * pz];
    for z in 0..nz {
        for y in 0..ny {
            let src = nx * (y + ny * z);
            let dst = bx + px * ((y + by) + py * (z + bz));
            out[dst..dst + nx].copy_from_slice(&values[src..src + nx]);
        }
    }
    out
}

/// Blend weight patch for one window, x-fastest.
fn weight_patch(window: usize, blend: BlendMode) -> Vec<f64> {
    match blend {
        BlendMode::Constant => vec![1.0; window * window * window],
        BlendMode::Gaussian => {
            let sigma = window as f64 / 8.0;
            let center = (window as f64 - 1.0) / 2.0;
            let axis: Vec<f64> = (0..window)
                .map(|i| {
                    let d = (i as f64 - center) / sigma;
                    (-0.5 * d * d).exp()
                })
                .collect();
            let mut out = Vec::with_capacity(window * window * window);
            for z in 0..window {
                for y in 0..window {
                    for x in 0..window {
                        out.push(axis[x] * axis[y] * axis[z]);
                    }
                }
            }
            out
        }
    }
}

fn extract_patch(
    padded: &[f32],
    padded_shape: [usize; 3],
    region: &PatchRegion,
    out: &mut Vec<f32>,
) {
    let [px, py, _] = padded_shape;
    let [sx, sy, sz] = region.start;
    let [wx, wy, wz] = region.size;
    for z in 0..wz {
        for y in 0..wy {
            let src = sx + px * ((sy + y) + py * (sz + z));
            out.extend_from_slice(&padded[src..src + wx]);
        }
    }
}

/// Sliding-window inference producing a foreground probability volume.
///
/// Logits from each window pass through the logistic function, are weighted
/// by the blend patch, accumulated, and normalized by the total weight per
/// voxel. `jobs` > 1 evaluates windows on a local thread pool; the output is
/// bitwise identical for any pool size.
pub fn infer(
    pet: &Volume3D,
    ct: &Volume3D,
    predictor: &dyn Predictor,
    plan: &WindowPlan,
    blend: BlendMode,
    jobs: usize,
) -> Result<Volume3D> {
    if !pet.same_grid(ct) {
        return Err(Error::GeometryMismatch("PET and CT grids differ".into()));
    }
    if pet.shape() != plan.original_shape {
        return Err(Error::GeometryMismatch(format!(
            "plan was built for shape {:?}, volume has {:?}",
            plan.original_shape,
            pet.shape()
        )));
    }
    let pet_values = pet
        .values_f32()
        .ok_or_else(|| Error::Contract("inference expects intensity volumes".into()))?;
    let ct_values = ct
        .values_f32()
        .ok_or_else(|| Error::Contract("inference expects intensity volumes".into()))?;

    let padded_pet = pad_channel(pet_values, pet.shape(), plan);
    let padded_ct = pad_channel(ct_values, ct.shape(), plan);
    let padded_shape = plan.padded_shape;
    let spacing = pet.spacing();

    // canonical accumulation order regardless of how the plan lists regions
    let mut regions = plan.regions.clone();
    regions.sort_by_key(|r| (r.start[2], r.start[1], r.start[0]));

    let run_window = |region: &PatchRegion| -> Result<Vec<f32>> {
        let voxels = region.num_voxels();
        let mut data = Vec::with_capacity(2 * voxels);
        extract_patch(&padded_pet, padded_shape, region, &mut data);
        extract_patch(&padded_ct, padded_shape, region, &mut data);
        let input = ChannelVolume::new(region.size, spacing, 2, data)?;
        let output = predictor.predict(&input)?;
        if output.shape() != region.size || output.channels() != 2 {
            return Err(Error::Contract(format!(
                "predictor returned shape {:?} x {} channels for a {:?} window",
                output.shape(),
                output.channels(),
                region.size
            )));
        }
        Ok(output.channel(1).to_vec())
    };

    let outputs: Vec<Vec<f32>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Contract(format!("cannot build thread pool: {e}")))?;
        pool.install(|| regions.par_iter().map(run_window).collect::<Result<Vec<_>>>())?
    } else {
        regions.iter().map(run_window).collect::<Result<Vec<_>>>()?
    };

    let n_padded = padded_shape[0] * padded_shape[1] * padded_shape[2];
    let mut acc = vec![0.0f64; n_padded];
    let mut weight_sum = vec![0.0f64; n_padded];
    let weights = weight_patch(plan.window, blend);
    let [px, py, _] = padded_shape;
    for (region, fg_logits) in regions.iter().zip(&outputs) {
        let [sx, sy, sz] = region.start;
        let [wx, wy, wz] = region.size;
        let mut k = 0usize;
        for z in 0..wz {
            for y in 0..wy {
                let dst = sx + px * ((sy + y) + py * (sz + z));
                for x in 0..wx {
                    let w = weights[k];
                    acc[dst + x] += w * sigmoid(f64::from(fg_logits[k]));
                    weight_sum[dst + x] += w;
                    k += 1;
                }
            }
        }
    }

    // normalize and crop the padding back off
    let [nx, ny, nz] = plan.original_shape;
    let [bx, by, bz] = plan.pad_before;
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = (x + bx) + px * ((y + by) + py * (z + bz));
                debug_assert!(weight_sum[idx] > 0.0, "window plan must cover every voxel");
                let p = (acc[idx] / weight_sum[idx]).clamp(0.0, 1.0);
                out.push(p as f32);
            }
        }
    }
    Ok(Volume3D::from_f32(plan.original_shape, spacing, VolumeKind::Prob, out)?
        .with_origin(pet.origin()))
}

/// Threshold a probability volume into a mask (`>=` keeps the voxel).
pub fn binarize(prob: &Volume3D, threshold: f32) -> Result<Volume3D> {
    if prob.kind() != VolumeKind::Prob {
        return Err(Error::Contract(format!(
            "binarize expects a probability volume, got {:?}",
            prob.kind()
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let values = prob.values_f32().expect("probability volumes store f32");
    let data: Vec<u8> = values.iter().map(|&v| u8::from(v >= threshold)).collect();
    Ok(Volume3D::mask(prob.shape(), prob.spacing(), data)?.with_origin(prob.origin()))
}

/// Voxelwise weighted mean of probability maps; weights are normalized to
/// sum 1 (`None` means uniform).
pub fn ensemble(maps: &[Volume3D], weights: Option<&[f64]>) -> Result<Volume3D> {
    if maps.is_empty() {
        return Err(Error::Contract("ensemble needs at least one probability map".into()));
    }
    let first = &maps[0];
    for m in maps {
        if m.kind() != VolumeKind::Prob {
            return Err(Error::Contract(format!(
                "ensemble expects probability maps, got {:?}",
                m.kind()
            )));
        }
        if !m.same_grid(first) {
            return Err(Error::GeometryMismatch(
                "ensemble inputs must share shape and spacing".into(),
            ));
        }
    }
    let uniform = vec![1.0; maps.len()];
    let w = match weights {
        Some(w) => {
            if w.len() != maps.len() {
                return Err(Error::Contract(format!(
                    "got {} weights for {} maps",
                    w.len(),
                    maps.len()
                )));
            }
            if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(Error::Contract(format!(
                    "weights must be finite and non-negative, got {w:?}"
                )));
            }
            w
        }
        None => &uniform,
    };
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::Contract("ensemble weights must not all be zero".into()));
    }
    let normalized: Vec<f64> = w.iter().map(|x| x / total).collect();
    let n = first.num_voxels();
    let mut out = vec![0.0f64; n];
    for (m, &wi) in maps.iter().zip(&normalized) {
        let values = m.values_f32().expect("probability volumes store f32");
        for (o, &v) in out.iter_mut().zip(values) {
            *o += wi * f64::from(v);
        }
    }
    let data: Vec<f32> = out.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(Volume3D::from_f32(first.shape(), first.spacing(), VolumeKind::Prob, data)?
        .with_origin(first.origin()))
}
