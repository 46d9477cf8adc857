//! Bit-exact NIfTI-1 single-file reader and writer.
//!
//! Handles `.nii` payloads and their gzip form, little- and big-endian files
//! (detected via `sizeof_hdr`), the five datatypes that occur in practice
//! (uint8, int16, int32, float32, float64), `scl_slope`/`scl_inter` value
//! scaling, and `vox_offset`. Header extensions are kept as opaque bytes on
//! read and dropped on write. Only 3D, axis-aligned volumes are accepted;
//! headers carrying rotated or sheared affines are rejected.
//!
//! Field offsets follow the public NIfTI-1 standard; the header is exactly
//! 348 bytes and single-file data starts at `vox_offset` (352 when no
//! extensions are present).

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, NiftiError, Result};
use crate::volume::{Volume3D, VolumeKind};

/// Magic for single-file NIfTI-1 volumes.
pub const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
/// Magic for the two-file (.hdr/.img) form, which is rejected.
pub const MAGIC_PAIR: [u8; 4] = *b"ni1\0";

const HEADER_SIZE: usize = 348;
const DEFAULT_VOX_OFFSET: usize = 352;

/// Supported on-disk voxel datatypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl Datatype {
    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Datatype::Uint8),
            4 => Some(Datatype::Int16),
            8 => Some(Datatype::Int32),
            16 => Some(Datatype::Float32),
            64 => Some(Datatype::Float64),
            _ => None,
        }
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Int32 => 8,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    /// Bits per voxel, as stored in `bitpix`.
    pub fn bitpix(self) -> i16 {
        match self {
            Datatype::Uint8 => 8,
            Datatype::Int16 => 16,
            Datatype::Int32 => 32,
            Datatype::Float32 => 32,
            Datatype::Float64 => 64,
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        (self.bitpix() / 8) as usize
    }
}

/// The full 348-byte NIfTI-1 header record.
///
/// Fields mirror the standard byte-for-byte so that read → write round-trips
/// are exact aside from the documented normalizations (extensions dropped,
/// output always little-endian). `extension` holds the opaque bytes between
/// the header and `vox_offset`, including the 4-byte extender.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub data_type: [u8; 10],
    pub db_name: [u8; 18],
    pub extents: i32,
    pub session_error: i16,
    pub regular: u8,
    pub dim_info: u8,
    pub dim: [i16; 8],
    pub intent_p1: f32,
    pub intent_p2: f32,
    pub intent_p3: f32,
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub slice_start: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub slice_end: i16,
    pub slice_code: u8,
    pub xyzt_units: u8,
    pub cal_max: f32,
    pub cal_min: f32,
    pub slice_duration: f32,
    pub toffset: f32,
    pub glmax: i32,
    pub glmin: i32,
    pub descrip: [u8; 80],
    pub aux_file: [u8; 24],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern_b: f32,
    pub quatern_c: f32,
    pub quatern_d: f32,
    pub qoffset_x: f32,
    pub qoffset_y: f32,
    pub qoffset_z: f32,
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub intent_name: [u8; 16],
    pub magic: [u8; 4],
    /// Opaque extension bytes (extender + extension blocks); never written back.
    pub extension: Vec<u8>,
    /// True when the source file was big-endian.
    pub big_endian: bool,
}

impl Default for NiftiHeader {
    fn default() -> Self {
        NiftiHeader {
            sizeof_hdr: HEADER_SIZE as i32,
            data_type: [0; 10],
            db_name: [0; 18],
            extents: 0,
            session_error: 0,
            regular: b'r',
            dim_info: 0,
            dim: [3, 1, 1, 1, 1, 1, 1, 1],
            intent_p1: 0.0,
            intent_p2: 0.0,
            intent_p3: 0.0,
            intent_code: 0,
            datatype: Datatype::Float32.code(),
            bitpix: Datatype::Float32.bitpix(),
            slice_start: 0,
            pixdim: [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            vox_offset: DEFAULT_VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            slice_end: 0,
            slice_code: 0,
            xyzt_units: 10, // mm | sec
            cal_max: 0.0,
            cal_min: 0.0,
            slice_duration: 0.0,
            toffset: 0.0,
            glmax: 0,
            glmin: 0,
            descrip: [0; 80],
            aux_file: [0; 24],
            qform_code: 0,
            sform_code: 1,
            quatern_b: 0.0,
            quatern_c: 0.0,
            quatern_d: 0.0,
            qoffset_x: 0.0,
            qoffset_y: 0.0,
            qoffset_z: 0.0,
            srow_x: [1.0, 0.0, 0.0, 0.0],
            srow_y: [0.0, 1.0, 0.0, 0.0],
            srow_z: [0.0, 0.0, 1.0, 0.0],
            intent_name: [0; 16],
            magic: MAGIC_SINGLE,
            extension: Vec::new(),
            big_endian: false,
        }
    }
}

impl NiftiHeader {
    /// Volume shape from dim[1..4].
    pub fn shape(&self) -> [usize; 3] {
        [self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize]
    }

    /// Voxel spacing from pixdim[1..4].
    pub fn spacing(&self) -> [f32; 3] {
        [self.pixdim[1], self.pixdim[2], self.pixdim[3]]
    }

    /// Effective slope: a stored slope of 0 means "no scaling".
    pub fn effective_slope(&self) -> f64 {
        if self.scl_slope == 0.0 || !self.scl_slope.is_finite() {
            1.0
        } else {
            f64::from(self.scl_slope)
        }
    }

    pub fn effective_inter(&self) -> f64 {
        if self.scl_inter.is_finite() {
            f64::from(self.scl_inter)
        } else {
            0.0
        }
    }
}

#[allow(clippy::field_reassign_with_default)] // 40+ fields read at fixed offsets
fn parse_header<E: ByteOrder>(bytes: &[u8]) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.sizeof_hdr = E::read_i32(&bytes[0..]);
    h.data_type.copy_from_slice(&bytes[4..14]);
    h.db_name.copy_from_slice(&bytes[14..32]);
    h.extents = E::read_i32(&bytes[32..]);
    h.session_error = E::read_i16(&bytes[36..]);
    h.regular = bytes[38];
    h.dim_info = bytes[39];
    for (i, d) in h.dim.iter_mut().enumerate() {
        *d = E::read_i16(&bytes[40 + 2 * i..]);
    }
    h.intent_p1 = E::read_f32(&bytes[56..]);
    h.intent_p2 = E::read_f32(&bytes[60..]);
    h.intent_p3 = E::read_f32(&bytes[64..]);
    h.intent_code = E::read_i16(&bytes[68..]);
    h.datatype = E::read_i16(&bytes[70..]);
    h.bitpix = E::read_i16(&bytes[72..]);
    h.slice_start = E::read_i16(&bytes[74..]);
    for (i, p) in h.pixdim.iter_mut().enumerate() {
        *p = E::read_f32(&bytes[76 + 4 * i..]);
    }
    h.vox_offset = E::read_f32(&bytes[108..]);
    h.scl_slope = E::read_f32(&bytes[112..]);
    h.scl_inter = E::read_f32(&bytes[116..]);
    h.slice_end = E::read_i16(&bytes[120..]);
    h.slice_code = bytes[122];
    h.xyzt_units = bytes[123];
    h.cal_max = E::read_f32(&bytes[124..]);
    h.cal_min = E::read_f32(&bytes[128..]);
    h.slice_duration = E::read_f32(&bytes[132..]);
    h.toffset = E::read_f32(&bytes[136..]);
    h.glmax = E::read_i32(&bytes[140..]);
    h.glmin = E::read_i32(&bytes[144..]);
    h.descrip.copy_from_slice(&bytes[148..228]);
    h.aux_file.copy_from_slice(&bytes[228..252]);
    h.qform_code = E::read_i16(&bytes[252..]);
    h.sform_code = E::read_i16(&bytes[254..]);
    h.quatern_b = E::read_f32(&bytes[256..]);
    h.quatern_c = E::read_f32(&bytes[260..]);
    h.quatern_d = E::read_f32(&bytes[264..]);
    h.qoffset_x = E::read_f32(&bytes[268..]);
    h.qoffset_y = E::read_f32(&bytes[272..]);
    h.qoffset_z = E::read_f32(&bytes[276..]);
    for (i, v) in h.srow_x.iter_mut().enumerate() {
        *v = E::read_f32(&bytes[280 + 4 * i..]);
    }
    for (i, v) in h.srow_y.iter_mut().enumerate() {
        *v = E::read_f32(&bytes[296 + 4 * i..]);
    }
    for (i, v) in h.srow_z.iter_mut().enumerate() {
        *v = E::read_f32(&bytes[312 + 4 * i..]);
    }
    h.intent_name.copy_from_slice(&bytes[328..344]);
    h.magic.copy_from_slice(&bytes[344..348]);
    h
}

fn encode_header(h: &NiftiHeader) -> Vec<u8> {
    type E = LittleEndian;
    let mut b = vec![0u8; HEADER_SIZE];
    E::write_i32(&mut b[0..], h.sizeof_hdr);
    b[4..14].copy_from_slice(&h.data_type);
    b[14..32].copy_from_slice(&h.db_name);
    E::write_i32(&mut b[32..], h.extents);
    E::write_i16(&mut b[36..], h.session_error);
    b[38] = h.regular;
    b[39] = h.dim_info;
    for (i, d) in h.dim.iter().enumerate() {
        E::write_i16(&mut b[40 + 2 * i..], *d);
    }
    E::write_f32(&mut b[56..], h.intent_p1);
    E::write_f32(&mut b[60..], h.intent_p2);
    E::write_f32(&mut b[64..], h.intent_p3);
    E::write_i16(&mut b[68..], h.intent_code);
    E::write_i16(&mut b[70..], h.datatype);
    E::write_i16(&mut b[72..], h.bitpix);
    E::write_i16(&mut b[74..], h.slice_start);
    for (i, p) in h.pixdim.iter().enumerate() {
        E::write_f32(&mut b[76 + 4 * i..], *p);
    }
    E::write_f32(&mut b[108..], h.vox_offset);
    E::write_f32(&mut b[112..], h.scl_slope);
    E::write_f32(&mut b[116..], h.scl_inter);
    E::write_i16(&mut b[120..], h.slice_end);
    b[122] = h.slice_code;
    b[123] = h.xyzt_units;
    E::write_f32(&mut b[124..], h.cal_max);
    E::write_f32(&mut b[128..], h.cal_min);
    E::write_f32(&mut b[132..], h.slice_duration);
    E::write_f32(&mut b[136..], h.toffset);
    E::write_i32(&mut b[140..], h.glmax);
    E::write_i32(&mut b[144..], h.glmin);
    b[148..228].copy_from_slice(&h.descrip);
    b[228..252].copy_from_slice(&h.aux_file);
    E::write_i16(&mut b[252..], h.qform_code);
    E::write_i16(&mut b[254..], h.sform_code);
    E::write_f32(&mut b[256..], h.quatern_b);
    E::write_f32(&mut b[260..], h.quatern_c);
    E::write_f32(&mut b[264..], h.quatern_d);
    E::write_f32(&mut b[268..], h.qoffset_x);
    E::write_f32(&mut b[272..], h.qoffset_y);
    E::write_f32(&mut b[276..], h.qoffset_z);
    for (i, v) in h.srow_x.iter().enumerate() {
        E::write_f32(&mut b[280 + 4 * i..], *v);
    }
    for (i, v) in h.srow_y.iter().enumerate() {
        E::write_f32(&mut b[296 + 4 * i..], *v);
    }
    for (i, v) in h.srow_z.iter().enumerate() {
        E::write_f32(&mut b[312 + 4 * i..], *v);
    }
    b[328..344].copy_from_slice(&h.intent_name);
    b[344..348].copy_from_slice(&h.magic);
    b
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

/// Resolve the world origin from sform/qform, rejecting non-axis-aligned grids.
fn resolve_origin(h: &NiftiHeader) -> Result<[f32; 3]> {
    let spacing = h.spacing();
    if h.sform_code > 0 {
        let rows = [h.srow_x, h.srow_y, h.srow_z];
        for (r, row) in rows.iter().enumerate() {
            for c in 0..3 {
                let v = row[c];
                if r == c {
                    if v <= 0.0 {
                        return Err(NiftiError::UnsupportedOrientation(format!(
                            "sform diagonal element {r} is {v}; only positive axis-aligned \
                             affines are supported"
                        ))
                        .into());
                    }
                    let tol = 1e-3 * spacing[r].max(v);
                    if (v - spacing[r]).abs() > tol {
                        return Err(NiftiError::BadHeader(format!(
                            "sform scale {v} disagrees with pixdim {} on axis {r}",
                            spacing[r]
                        ))
                        .into());
                    }
                } else if v.abs() > 1e-3 * spacing[c].abs().max(1.0) {
                    return Err(NiftiError::UnsupportedOrientation(format!(
                        "sform affine has off-diagonal element {v} at row {r}; rotated or \
                         sheared grids are not supported"
                    ))
                    .into());
                }
            }
        }
        Ok([rows[0][3], rows[1][3], rows[2][3]])
    } else if h.qform_code > 0 {
        if h.quatern_b.abs() > 1e-6 || h.quatern_c.abs() > 1e-6 || h.quatern_d.abs() > 1e-6 {
            return Err(NiftiError::UnsupportedOrientation(
                "qform quaternion encodes a rotation; only identity orientation is supported"
                    .into(),
            )
            .into());
        }
        if h.pixdim[0] < 0.0 {
            return Err(NiftiError::UnsupportedOrientation(
                "qform qfac = -1 (z axis flip) is not supported".into(),
            )
            .into());
        }
        Ok([h.qoffset_x, h.qoffset_y, h.qoffset_z])
    } else {
        Ok([0.0, 0.0, 0.0])
    }
}

/// Parse a complete single-file NIfTI-1 payload (optionally gzipped).
///
/// Voxel values come back with `scl_slope`/`scl_inter` applied, as `f32`, in
/// x-fastest order, with kind [`VolumeKind::Raw`]; callers assign semantics.
pub fn read_volume(bytes: &[u8]) -> Result<(Volume3D, NiftiHeader)> {
    let decompressed;
    let raw: &[u8] = if is_gzip(bytes) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| NiftiError::BadHeader(format!("gzip stream is corrupt: {e}")))?;
        decompressed = out;
        &decompressed
    } else {
        bytes
    };

    if raw.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated { needed: HEADER_SIZE, got: raw.len() }.into());
    }
    let size_le = LittleEndian::read_i32(&raw[0..4]);
    let size_be = BigEndian::read_i32(&raw[0..4]);
    let header = if size_le == HEADER_SIZE as i32 {
        parse_header::<LittleEndian>(raw)
    } else if size_be == HEADER_SIZE as i32 {
        let mut h = parse_header::<BigEndian>(raw);
        h.big_endian = true;
        h
    } else {
        return Err(NiftiError::BadHeaderSize(size_le).into());
    };

    if header.magic == MAGIC_PAIR {
        return Err(NiftiError::UnsupportedForm.into());
    }
    if header.magic != MAGIC_SINGLE {
        return Err(NiftiError::BadMagic(header.magic).into());
    }
    if header.dim[0] != 3 {
        return Err(NiftiError::NotThreeDimensional(header.dim[0]).into());
    }
    let dims = &header.dim[1..4];
    if dims.iter().any(|&d| d < 1) {
        return Err(NiftiError::BadHeader(format!("non-positive dim entries {dims:?}")).into());
    }
    let shape = header.shape();
    let datatype = Datatype::from_code(header.datatype)
        .ok_or(NiftiError::UnsupportedDatatype(header.datatype))?;
    if header.bitpix != datatype.bitpix() {
        return Err(NiftiError::BitpixMismatch {
            datatype: header.datatype,
            bitpix: header.bitpix,
        }
        .into());
    }
    let spacing = header.spacing();
    if spacing.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(NiftiError::BadHeader(format!("non-positive pixdim {spacing:?}")).into());
    }
    let origin = resolve_origin(&header)?;

    if !header.vox_offset.is_finite() || header.vox_offset < HEADER_SIZE as f32 {
        return Err(
            NiftiError::BadHeader(format!("bad vox_offset {}", header.vox_offset)).into()
        );
    }
    let vox_offset = header.vox_offset as usize;
    let n = shape[0] * shape[1] * shape[2];
    let needed = vox_offset + n * datatype.bytes_per_voxel();
    if raw.len() < needed {
        return Err(NiftiError::Truncated { needed, got: raw.len() }.into());
    }

    let mut header = header;
    if vox_offset > DEFAULT_VOX_OFFSET {
        header.extension = raw[HEADER_SIZE..vox_offset].to_vec();
    }

    let data_bytes = &raw[vox_offset..needed];
    let values = if header.big_endian {
        decode_values::<BigEndian>(data_bytes, datatype, n, &header)
    } else {
        decode_values::<LittleEndian>(data_bytes, datatype, n, &header)
    };

    let volume =
        Volume3D::from_f32(shape, spacing, VolumeKind::Raw, values)?.with_origin(origin);
    Ok((volume, header))
}

fn decode_values<E: ByteOrder>(
    bytes: &[u8],
    datatype: Datatype,
    n: usize,
    header: &NiftiHeader,
) -> Vec<f32> {
    let slope = header.effective_slope();
    let inter = header.effective_inter();
    let scale = |raw: f64| -> f32 { (slope * raw + inter) as f32 };
    let mut out = Vec::with_capacity(n);
    match datatype {
        Datatype::Uint8 => {
            out.extend(bytes.iter().map(|&b| scale(f64::from(b))));
        }
        Datatype::Int16 => {
            for i in 0..n {
                out.push(scale(f64::from(E::read_i16(&bytes[2 * i..]))));
            }
        }
        Datatype::Int32 => {
            for i in 0..n {
                out.push(scale(f64::from(E::read_i32(&bytes[4 * i..]))));
            }
        }
        Datatype::Float32 => {
            for i in 0..n {
                out.push(scale(f64::from(E::read_f32(&bytes[4 * i..]))));
            }
        }
        Datatype::Float64 => {
            for i in 0..n {
                out.push(scale(E::read_f64(&bytes[8 * i..])));
            }
        }
    }
    out
}

/// Encode a volume as an uncompressed single-file NIfTI-1 payload.
///
/// Masks are written as uint8 with slope 1 / inter 0; every other kind is
/// written as float32, so reading the bytes back reproduces shape, spacing,
/// and values exactly. `template` seeds the descriptive header fields;
/// geometry, datatype, scaling, and magic are always derived from the volume.
pub fn write_volume(volume: &Volume3D, template: Option<&NiftiHeader>) -> Result<Vec<u8>> {
    let shape = volume.shape();
    for &n in &shape {
        if n > i16::MAX as usize {
            return Err(NiftiError::Capacity(format!(
                "shape component {n} exceeds the int16 dim field (max 32767)"
            ))
            .into());
        }
    }

    let mut h = template.cloned().unwrap_or_default();
    h.sizeof_hdr = HEADER_SIZE as i32;
    h.dim = [3, shape[0] as i16, shape[1] as i16, shape[2] as i16, 1, 1, 1, 1];
    let spacing = volume.spacing();
    h.pixdim = [1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0];
    let datatype = match volume.kind() {
        VolumeKind::Mask => Datatype::Uint8,
        _ => Datatype::Float32,
    };
    h.datatype = datatype.code();
    h.bitpix = datatype.bitpix();
    h.scl_slope = 1.0;
    h.scl_inter = 0.0;
    h.vox_offset = DEFAULT_VOX_OFFSET as f32;
    let origin = volume.origin();
    h.qform_code = 0;
    h.sform_code = 1;
    h.quatern_b = 0.0;
    h.quatern_c = 0.0;
    h.quatern_d = 0.0;
    h.qoffset_x = origin[0];
    h.qoffset_y = origin[1];
    h.qoffset_z = origin[2];
    h.srow_x = [spacing[0], 0.0, 0.0, origin[0]];
    h.srow_y = [0.0, spacing[1], 0.0, origin[1]];
    h.srow_z = [0.0, 0.0, spacing[2], origin[2]];
    h.magic = MAGIC_SINGLE;
    h.big_endian = false;
    h.extension = Vec::new();

    let n = volume.num_voxels();
    let mut out = Vec::with_capacity(DEFAULT_VOX_OFFSET + n * datatype.bytes_per_voxel());
    out.extend_from_slice(&encode_header(&h));
    out.extend_from_slice(&[0u8; 4]); // extender: no extensions
    match volume.kind() {
        VolumeKind::Mask => {
            out.extend_from_slice(volume.values_u8().expect("mask volumes store u8"));
        }
        _ => {
            let values = volume.values_f32().expect("intensity volumes store f32");
            let mut buf = vec![0u8; 4 * n];
            LittleEndian::write_f32_into(values, &mut buf);
            out.extend_from_slice(&buf);
        }
    }
    Ok(out)
}

/// Like [`write_volume`], gzip-compressed.
pub fn write_volume_gz(volume: &Volume3D, template: Option<&NiftiHeader>) -> Result<Vec<u8>> {
    let plain = write_volume(volume, template)?;
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    std::io::Write::write_all(&mut enc, &plain)?;
    Ok(enc.finish()?)
}

/// Read a volume from a `.nii` or `.nii.gz` file.
pub fn read_volume_from_path<P: AsRef<Path>>(path: P) -> Result<(Volume3D, NiftiHeader)> {
    let bytes = std::fs::read(path.as_ref())?;
    read_volume(&bytes)
}

/// Write a volume to a file, gzip-compressing when the name ends in `.gz`.
pub fn write_volume_to_path<P: AsRef<Path>>(
    volume: &Volume3D,
    template: Option<&NiftiHeader>,
    path: P,
) -> Result<()> {
    let path = path.as_ref();
    let gz = path.extension().map(|e| e.eq_ignore_ascii_case("gz")).unwrap_or(false);
    let bytes =
        if gz { write_volume_gz(volume, template)? } else { write_volume(volume, template)? };
    std::fs::write(path, bytes).map_err(Error::Io)
}
