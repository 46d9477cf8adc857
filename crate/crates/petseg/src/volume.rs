//! Dense 3D scalar grids with physical geometry.
//!
//! A [`Volume3D`] couples voxel data with spacing (mm per voxel), a world
//! origin, and a semantic kind. Voxels are stored in x-fastest linear order
//! (`idx = x + nx*(y + ny*z)`), matching the on-disk order of the NIfTI
//! format so no transposes happen at the I/O boundary. The world position of
//! voxel index `(i, j, k)` is `origin + (i*sx, j*sy, k*sz)`.
//!
//! Intensity volumes (CT/PET/probability/raw) hold `f32`; masks hold `u8`
//! restricted to {0, 1}. Conversions between the two are explicit. Values are
//! immutable after construction, so volumes can be shared freely across
//! threads.

use crate::error::{Error, Result};

/// Semantic interpretation of the voxel values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    /// CT attenuation in Hounsfield units.
    CtHu,
    /// PET standardized uptake values.
    PetSuv,
    /// Binary segmentation labels in {0, 1}.
    Mask,
    /// Probabilities in [0, 1].
    Prob,
    /// Unit-free values (e.g. PET activity straight from disk).
    Raw,
}

/// Voxel storage: `f32` for intensity kinds, `u8` for masks.
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::F32(v) => v.len(),
            VoxelData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An axis-aligned sub-box of a volume, in voxel indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRegion {
    pub start: [usize; 3],
    pub size: [usize; 3],
}

impl PatchRegion {
    pub fn new(start: [usize; 3], size: [usize; 3]) -> Self {
        Self { start, size }
    }

    /// The region covering all of `shape`.
    pub fn full(shape: [usize; 3]) -> Self {
        Self { start: [0, 0, 0], size: shape }
    }

    pub fn end(&self) -> [usize; 3] {
        [
            self.start[0] + self.size[0],
            self.start[1] + self.size[1],
            self.start[2] + self.size[2],
        ]
    }

    pub fn num_voxels(&self) -> usize {
        self.size[0] * self.size[1] * self.size[2]
    }

    fn check_within(&self, shape: [usize; 3]) -> Result<()> {
        let end = self.end();
        for a in 0..3 {
            if self.size[a] == 0 {
                return Err(Error::OutOfBounds(format!(
                    "region size {:?} has a zero component",
                    self.size
                )));
            }
            if end[a] > shape[a] {
                return Err(Error::OutOfBounds(format!(
                    "region start {:?} size {:?} exceeds shape {:?}",
                    self.start, self.size, shape
                )));
            }
        }
        Ok(())
    }
}

/// 3D scalar grid with physical spacing, origin, and a semantic kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    shape: [usize; 3],
    spacing: [f32; 3],
    origin: [f32; 3],
    kind: VolumeKind,
    data: VoxelData,
}

impl Volume3D {
    /// Build an intensity volume from `f32` data. `kind` must not be `Mask`.
    pub fn from_f32(
        shape: [usize; 3],
        spacing: [f32; 3],
        kind: VolumeKind,
        data: Vec<f32>,
    ) -> Result<Self> {
        if kind == VolumeKind::Mask {
            return Err(Error::InvalidGeometry(
                "mask volumes are built from u8 data; use Volume3D::mask".into(),
            ));
        }
        check_shape_spacing(shape, spacing, data.len())?;
        if kind == VolumeKind::Prob {
            if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidGeometry(format!(
                    "probability volume contains value {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self { shape, spacing, origin: [0.0; 3], kind, data: VoxelData::F32(data) })
    }

    /// Build a binary mask volume. Every value must be 0 or 1.
    pub fn mask(shape: [usize; 3], spacing: [f32; 3], data: Vec<u8>) -> Result<Self> {
        check_shape_spacing(shape, spacing, data.len())?;
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidGeometry(format!(
                "mask volume contains value {v}, expected 0 or 1"
            )));
        }
        Ok(Self {
            shape,
            spacing,
            origin: [0.0; 3],
            kind: VolumeKind::Mask,
            data: VoxelData::U8(data),
        })
    }

    /// Same volume with a different world origin.
    pub fn with_origin(mut self, origin: [f32; 3]) -> Self {
        self.origin = origin;
        self
    }

    /// Reinterpret an intensity volume under another intensity kind.
    /// Range invariants of the target kind are re-checked.
    pub fn with_kind(self, kind: VolumeKind) -> Result<Self> {
        match self.data {
            VoxelData::U8(_) => Err(Error::InvalidGeometry(
                "cannot change the kind of a mask volume; convert explicitly".into(),
            )),
            VoxelData::F32(data) => {
                Volume3D::from_f32(self.shape, self.spacing, kind, data)
                    .map(|v| v.with_origin(self.origin))
            }
        }
    }

    /// Convert an intensity volume whose values are exactly 0.0/1.0 into a mask.
    pub fn into_mask(self) -> Result<Self> {
        match self.data {
            VoxelData::U8(_) => Ok(self),
            VoxelData::F32(data) => {
                let mut bytes = Vec::with_capacity(data.len());
                for v in &data {
                    if *v == 0.0 {
                        bytes.push(0);
                    } else if *v == 1.0 {
                        bytes.push(1);
                    } else {
                        return Err(Error::Contract(format!(
                            "value {v} is not binary; cannot convert to mask"
                        )));
                    }
                }
                Volume3D::mask(self.shape, self.spacing, bytes).map(|v| v.with_origin(self.origin))
            }
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn num_voxels(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    /// Intensity values, if this is an `f32` volume.
    pub fn values_f32(&self) -> Option<&[f32]> {
        match &self.data {
            VoxelData::F32(v) => Some(v),
            VoxelData::U8(_) => None,
        }
    }

    /// Mask bytes, if this is a mask volume.
    pub fn values_u8(&self) -> Option<&[u8]> {
        match &self.data {
            VoxelData::U8(v) => Some(v),
            VoxelData::F32(_) => None,
        }
    }

    /// Value at linear index, widened to f32.
    pub fn value(&self, idx: usize) -> f32 {
        match &self.data {
            VoxelData::F32(v) => v[idx],
            VoxelData::U8(v) => f32::from(v[idx]),
        }
    }

    /// Linear index of voxel (x, y, z), x-fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    /// Value at voxel coordinates, widened to f32.
    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.value(self.index(x, y, z))
    }

    /// True if shape and spacing both match.
    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.shape == other.shape && self.spacing == other.spacing
    }

    /// All values widened to an `f32` vector (masks become 0.0/1.0).
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            VoxelData::F32(v) => v.clone(),
            VoxelData::U8(v) => v.iter().map(|&b| f32::from(b)).collect(),
        }
    }
}

fn check_shape_spacing(shape: [usize; 3], spacing: [f32; 3], data_len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidGeometry(format!("shape {shape:?} has a zero component")));
    }
    if spacing.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::InvalidGeometry(format!(
            "spacing {spacing:?} must be strictly positive and finite"
        )));
    }
    let expected = shape[0] * shape[1] * shape[2];
    if data_len != expected {
        return Err(Error::InvalidGeometry(format!(
            "data length {data_len} does not match shape {shape:?} ({expected} voxels)"
        )));
    }
    Ok(())
}

/// Volume of one voxel in milliliters: `sx*sy*sz / 1000` for spacing in mm.
pub fn voxel_volume_ml(spacing: [f32; 3]) -> Result<f64> {
    if spacing.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::InvalidGeometry(format!(
            "spacing {spacing:?} must be strictly positive and finite"
        )));
    }
    Ok(f64::from(spacing[0]) * f64::from(spacing[1]) * f64::from(spacing[2]) / 1000.0)
}

/// Extract `region` as a new volume. Origin shifts by `start * spacing`.
pub fn crop(volume: &Volume3D, region: &PatchRegion) -> Result<Volume3D> {
    region.check_within(volume.shape)?;
    let [sx, sy, sz] = region.start;
    let [wx, wy, wz] = region.size;
    let origin = [
        volume.origin[0] + sx as f32 * volume.spacing[0],
        volume.origin[1] + sy as f32 * volume.spacing[1],
        volume.origin[2] + sz as f32 * volume.spacing[2],
    ];
    let data = match &volume.data {
        VoxelData::F32(src) => VoxelData::F32(copy_region(src, volume.shape, region)),
        VoxelData::U8(src) => VoxelData::U8(copy_region(src, volume.shape, region)),
    };
    debug_assert_eq!(data.len(), wx * wy * wz);
    Ok(Volume3D { shape: region.size, spacing: volume.spacing, origin, kind: volume.kind, data })
}

fn copy_region<T: Copy>(src: &[T], shape: [usize; 3], region: &PatchRegion) -> Vec<T> {
    let [nx, ny, _] = shape;
    let [sx, sy, sz] = region.start;
    let [wx, wy, wz] = region.size;
    let mut out = Vec::with_capacity(wx * wy * wz);
    for z in 0..wz {
        for y in 0..wy {
            let row = sx + nx * ((sy + y) + ny * (sz + z));
            out.extend_from_slice(&src[row..row + wx]);
        }
    }
    out
}

/// A multi-channel grid sharing one geometry, channel-major layout
/// (channel, then x-fastest voxels). This is the network-facing tensor shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVolume {
    shape: [usize; 3],
    spacing: [f32; 3],
    origin: [f32; 3],
    channels: usize,
    data: Vec<f32>,
}

impl ChannelVolume {
    /// Build from raw channel-major data.
    pub fn new(
        shape: [usize; 3],
        spacing: [f32; 3],
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidGeometry("channel count must be positive".into()));
        }
        check_shape_spacing(shape, spacing, data.len() / channels)?;
        if data.len() != channels * shape[0] * shape[1] * shape[2] {
            return Err(Error::InvalidGeometry(format!(
                "data length {} does not match {channels} channels of shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, spacing, origin: [0.0; 3], channels, data })
    }

    pub fn with_origin(mut self, origin: [f32; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxels_per_channel(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    /// Values of one channel, x-fastest.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels_per_channel();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Stack two volumes along the channel dimension: channel 0 = `a`, channel 1 = `b`.
pub fn concat_channels(a: &Volume3D, b: &Volume3D) -> Result<ChannelVolume> {
    if a.shape != b.shape || a.spacing != b.spacing {
        return Err(Error::GeometryMismatch(format!(
            "cannot concatenate shape {:?}/spacing {:?} with shape {:?}/spacing {:?}",
            a.shape, a.spacing, b.shape, b.spacing
        )));
    }
    let mut data = Vec::with_capacity(2 * a.num_voxels());
    data.extend(a.to_f32_vec());
    data.extend(b.to_f32_vec());
    Ok(ChannelVolume {
        shape: a.shape,
        spacing: a.spacing,
        origin: a.origin,
        channels: 2,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(shape: [usize; 3]) -> Volume3D {
        let n = shape[0] * shape[1] * shape[2];
        let data: Vec<f32> = (0..n).map(|i| i as f32).collect();
        Volume3D::from_f32(shape, [1.0, 1.0, 1.0], VolumeKind::Raw, data).unwrap()
    }

    #[test]
    fn voxel_volume_examples() {
        assert_eq!(voxel_volume_ml([2.0, 2.0, 2.0]).unwrap(), 0.008);
        assert_eq!(voxel_volume_ml([1.0, 1.0, 1.0]).unwrap(), 0.001);
        assert_eq!(voxel_volume_ml([4.0, 4.0, 2.0]).unwrap(), 0.032);
    }

    #[test]
    fn voxel_volume_rejects_nonpositive_spacing() {
        assert!(voxel_volume_ml([0.0, 1.0, 1.0]).is_err());
        assert!(voxel_volume_ml([1.0, -2.0, 1.0]).is_err());
    }

    #[test]
    fn voxel_volume_multiplicative_per_component() {
        let base = voxel_volume_ml([1.5, 2.5, 3.5]).unwrap();
        let doubled = voxel_volume_ml([3.0, 2.5, 3.5]).unwrap();
        assert!((doubled / base - 2.0).abs() < 1e-12);
    }

    #[test]
    fn crop_full_extent_is_identity() {
        let v = ramp_volume([3, 4, 5]);
        let c = crop(&v, &PatchRegion::full(v.shape())).unwrap();
        assert_eq!(v, c);
    }

    #[test]
    fn crop_interior_matches_index_arithmetic() {
        let v = ramp_volume([4, 4, 4]);
        let region = PatchRegion::new([1, 1, 1], [2, 2, 2]);
        let c = crop(&v, &region).unwrap();
        assert_eq!(c.shape(), [2, 2, 2]);
        // independent oracle: recompute each voxel from source indices
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let expect = ((x + 1) + 4 * ((y + 1) + 4 * (z + 1))) as f32;
                    assert_eq!(c.at(x, y, z), expect);
                }
            }
        }
        assert_eq!(c.origin(), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn crop_out_of_bounds_is_error() {
        let v = ramp_volume([4, 4, 4]);
        let region = PatchRegion::new([2, 0, 0], [3, 4, 4]);
        assert!(matches!(crop(&v, &region), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn nested_crops_compose() {
        let v = ramp_volume([6, 5, 7]);
        let outer = PatchRegion::new([1, 0, 2], [4, 4, 4]);
        let inner = PatchRegion::new([1, 1, 1], [2, 2, 2]);
        let combined = PatchRegion::new([2, 1, 3], [2, 2, 2]);
        let two_step = crop(&crop(&v, &outer).unwrap(), &inner).unwrap();
        let one_step = crop(&v, &combined).unwrap();
        assert_eq!(two_step, one_step);
    }

    #[test]
    fn concat_keeps_geometry_and_order() {
        let a = ramp_volume([2, 2, 2]);
        let b = Volume3D::from_f32(
            [2, 2, 2],
            [1.0, 1.0, 1.0],
            VolumeKind::Raw,
            vec![10.0; 8],
        )
        .unwrap();
        let cv = concat_channels(&a, &b).unwrap();
        assert_eq!(cv.channels(), 2);
        assert_eq!(cv.shape(), [2, 2, 2]);
        assert_eq!(cv.channel(0), a.values_f32().unwrap());
        assert_eq!(cv.channel(1), b.values_f32().unwrap());
    }

    #[test]
    fn concat_equal_inputs_yields_equal_channels() {
        let a = ramp_volume([3, 2, 2]);
        let cv = concat_channels(&a, &a).unwrap();
        assert_eq!(cv.channel(0), cv.channel(1));
    }

    #[test]
    fn concat_rejects_mismatched_shapes() {
        let a = ramp_volume([2, 2, 2]);
        let b = ramp_volume([2, 2, 3]);
        assert!(matches!(concat_channels(&a, &b), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn mask_values_are_checked() {
        assert!(Volume3D::mask([2, 1, 1], [1.0; 3], vec![0, 2]).is_err());
        assert!(Volume3D::mask([2, 1, 1], [1.0; 3], vec![0, 1]).is_ok());
    }

    #[test]
    fn prob_range_is_checked() {
        let bad = Volume3D::from_f32([2, 1, 1], [1.0; 3], VolumeKind::Prob, vec![0.5, 1.5]);
        assert!(bad.is_err());
    }

    #[test]
    fn into_mask_requires_binary_values() {
        let v =
            Volume3D::from_f32([2, 1, 1], [1.0; 3], VolumeKind::Raw, vec![0.0, 0.5]).unwrap();
        assert!(matches!(v.into_mask(), Err(Error::Contract(_))));
        let v =
            Volume3D::from_f32([2, 1, 1], [1.0; 3], VolumeKind::Raw, vec![0.0, 1.0]).unwrap();
        assert_eq!(v.into_mask().unwrap().values_u8().unwrap(), &[0, 1]);
    }
}
