//! Error types shared across the toolkit.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Top-level error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Volume construction or geometry parameters are invalid (non-positive
    /// spacing, data length mismatch, voxel values outside the kind's range).
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    /// Two volumes that must share shape/spacing do not.
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    /// A region or index falls outside the parent volume.
    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    /// A numeric parameter violates its contract (zero dose, bad weights, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An interpolation mode is not allowed for the volume kind.
    #[error("invalid mode: {0}")]
    InvalidMode(String),

    /// A caller-facing contract was violated (non-binary mask, non-one-hot
    /// targets, empty dataset, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// NIfTI parsing or encoding failed.
    #[error(transparent)]
    Nifti(#[from] NiftiError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Errors specific to the NIfTI-1 reader/writer.
#[derive(Debug, Error)]
pub enum NiftiError {
    /// The magic bytes are neither "n+1\0" nor a recognized variant.
    #[error("bad magic bytes {0:?}, not a NIfTI-1 single-file volume")]
    BadMagic([u8; 4]),

    /// Two-file ("ni1\0") form detected; only single-file volumes are read.
    #[error("two-file NIfTI form (hdr/img pair) is not supported")]
    UnsupportedForm,

    /// sizeof_hdr is not 348 under either byte order.
    #[error("sizeof_hdr is {0}, not 348 under either byte order")]
    BadHeaderSize(i32),

    /// The stream ended before the header or data section was complete.
    #[error("truncated stream: needed {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },

    /// Datatype code outside the supported set (uint8/int16/int32/f32/f64).
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),

    /// dim[0] is not 3.
    #[error("expected a 3-dimensional volume, got dim[0] = {0}")]
    NotThreeDimensional(i16),

    /// bitpix disagrees with the datatype code.
    #[error("bitpix {bitpix} inconsistent with datatype code {datatype}")]
    BitpixMismatch { datatype: i16, bitpix: i16 },

    /// The affine encodes rotation/shear; only axis-aligned grids are handled.
    #[error("unsupported orientation: {0}")]
    UnsupportedOrientation(String),

    /// A header field cannot represent the volume (e.g. shape > 32767).
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Any other malformed header content.
    #[error("bad header: {0}")]
    BadHeader(String),
}
