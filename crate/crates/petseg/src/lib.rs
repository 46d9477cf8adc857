//! Whole-body PET/CT lesion segmentation toolkit.
//!
//! The crate covers every desk-verifiable stage of a lesion-segmentation
//! pipeline: NIfTI volume I/O, preprocessing and augmentation, the
//! Generalized Dice Focal Loss with analytic gradients, a small training
//! harness (Adam + cosine annealing + best-epoch selection), sliding-window
//! inference around a pluggable predictor, probability-map ensembling,
//! connected-component lesion metrics (DSC / FPV / FNV), and challenge-style
//! rank aggregation. The network itself is deliberately out of scope: any
//! shape-preserving two-channel predictor can be plugged in, and a simple
//! threshold stub ships for end-to-end tests.

pub mod augment;
pub mod error;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod nifti;
pub mod preprocess;
pub mod rng;
pub mod splits;
pub mod train;
pub mod volume;

pub use error::{Error, NiftiError, Result};
pub use volume::{ChannelVolume, PatchRegion, Volume3D, VolumeKind};
