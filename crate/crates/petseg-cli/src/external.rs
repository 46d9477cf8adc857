//! Predictor backed by an external command.
//!
//! Per window, PET and CT patches are written as NIfTI files into a fresh
//! temporary directory and the command is invoked as
//!
//! ```text
//! <command...> PET_NII CT_NII OUT_FG_NII OUT_BG_NII
//! ```
//!
//! The command must write float32 NIfTI logit volumes of the same shape to
//! the output paths. The background file may be omitted, in which case the
//! negated foreground logits are used.

use anyhow::{bail, Context, Result};
use std::process::Command;

use petseg::infer::Predictor;
use petseg::nifti::{read_volume_from_path, write_volume_to_path};
use petseg::volume::{ChannelVolume, Volume3D, VolumeKind};

pub struct ExternalPredictor {
    program: String,
    args: Vec<String>,
}

impl ExternalPredictor {
    pub fn new(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = parts.next().context("--external-cmd is empty")?;
        Ok(Self { program, args: parts.collect() })
    }

    fn run(&self, input: &ChannelVolume) -> Result<ChannelVolume> {
        let dir = tempfile::tempdir().context("cannot create a temp dir for the predictor")?;
        let pet_path = dir.path().join("pet.nii");
        let ct_path = dir.path().join("ct.nii");
        let fg_path = dir.path().join("logits_fg.nii");
        let bg_path = dir.path().join("logits_bg.nii");

        let shape = input.shape();
        let spacing = input.spacing();
        let pet = Volume3D::from_f32(shape, spacing, VolumeKind::Raw, input.channel(0).to_vec())?;
        let ct = Volume3D::from_f32(shape, spacing, VolumeKind::Raw, input.channel(1).to_vec())?;
        write_volume_to_path(&pet, None, &pet_path)?;
        write_volume_to_path(&ct, None, &ct_path)?;

        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&pet_path)
            .arg(&ct_path)
            .arg(&fg_path)
            .arg(&bg_path)
            .status()
            .with_context(|| format!("cannot launch predictor command {}", self.program))?;
        if !status.success() {
            bail!("predictor command exited with {status}");
        }

        let (fg, _) = read_volume_from_path(&fg_path)
            .context("predictor did not write readable foreground logits")?;
        if fg.shape() != shape {
            bail!(
                "predictor returned shape {:?}, expected {:?}",
                fg.shape(),
                shape
            );
        }
        let fg_values = fg.to_f32_vec();
        let bg_values = if bg_path.exists() {
            let (bg, _) = read_volume_from_path(&bg_path)?;
            if bg.shape() != shape {
                bail!("background logits have shape {:?}, expected {:?}", bg.shape(), shape);
            }
            bg.to_f32_vec()
        } else {
            fg_values.iter().map(|v| -v).collect()
        };
        let mut data = bg_values;
        data.extend(fg_values);
        Ok(ChannelVolume::new(shape, spacing, 2, data)?)
    }
}

impl Predictor for ExternalPredictor {
    fn predict(&self, input: &ChannelVolume) -> petseg::Result<ChannelVolume> {
        self.run(input)
            .map_err(|e| petseg::Error::Contract(format!("external predictor failed: {e:#}")))
    }
}
