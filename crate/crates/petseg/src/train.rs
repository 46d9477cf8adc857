//! Optimizer/scheduler harness: Adam, half-cosine learning-rate annealing,
//! an epoch loop with per-batch loss averaging, and best-epoch selection by
//! validation Dice score.
//!
//! The model under training is deliberately tiny: a per-voxel affine map on
//! the two input channels with a logit output per class. It is enough to
//! exercise the loss, the optimizer, the schedule, and the selection logic
//! end to end, and it satisfies the same black-box predictor contract as
//! sliding-window inference.

use rand::Rng;

use crate::error::{Error, Result};
use crate::infer::Predictor;
use crate::loss::{self, LossBatch, LossConfig};
use crate::metrics::dsc_from_counts;
use crate::rng;
use crate::volume::ChannelVolume;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates and step counter for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self::with_config(num_params, AdamConfig::default())
    }

    pub fn with_config(num_params: usize, cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "parameter/gradient/state lengths differ: {} vs {} vs {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let AdamConfig { beta1, beta2, eps } = state.cfg;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g;
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g;
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        params[k] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Learning-rate schedule endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub total_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { lr_max: 1e-3, total_epochs: 300 }
    }
}

/// Half-cosine annealing: `lr_max * (1 + cos(pi * epoch / total)) / 2`,
/// decreasing from `lr_max` at epoch 0 to 0 at `total_epochs`.
pub fn cosine_lr(epoch: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if cfg.lr_max <= 0.0 || cfg.total_epochs == 0 {
        return Err(Error::InvalidParameter(format!(
            "schedule needs lr_max > 0 and total_epochs >= 1, got {cfg:?}"
        )));
    }
    if epoch > cfg.total_epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside the schedule range 0..={}",
            cfg.total_epochs
        )));
    }
    let phase = std::f64::consts::PI * epoch as f64 / cfg.total_epochs as f64;
    Ok(cfg.lr_max * (1.0 + phase.cos()) / 2.0)
}

/// Per-voxel affine predictor on (PET, CT): `logit_l = w_l . (pet, ct) + b_l`.
/// Parameter order: `[w0_pet, w0_ct, b0, w1_pet, w1_ct, b1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub params: [f64; 6],
}

impl ToyModel {
    pub fn zeros() -> Self {
        Self { params: [0.0; 6] }
    }

    /// Zero weights with biases set from a foreground prior probability, the
    /// usual initialization for focal losses: the model starts out predicting
    /// background everywhere instead of coin flips.
    pub fn with_foreground_prior(prior: f64) -> Result<Self> {
        if !(prior > 0.0 && prior < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "foreground prior must lie in (0, 1), got {prior}"
            )));
        }
        let logit = (prior / (1.0 - prior)).ln();
        Ok(Self { params: [0.0, 0.0, -logit, 0.0, 0.0, logit] })
    }

    /// Two-channel logits for one sample, channel-major (background first).
    pub fn forward(&self, pet: &[f32], ct: &[f32]) -> Vec<f64> {
        let [w0p, w0c, b0, w1p, w1c, b1] = self.params;
        let n = pet.len();
        let mut logits = Vec::with_capacity(2 * n);
        for j in 0..n {
            logits.push(w0p * f64::from(pet[j]) + w0c * f64::from(ct[j]) + b0);
        }
        for j in 0..n {
            logits.push(w1p * f64::from(pet[j]) + w1c * f64::from(ct[j]) + b1);
        }
        logits
    }

    /// Foreground mask at a probability threshold.
    pub fn predict_mask(&self, pet: &[f32], ct: &[f32], threshold: f64) -> Vec<u8> {
        let [_, _, _, w1p, w1c, b1] = self.params;
        pet.iter()
            .zip(ct)
            .map(|(&p, &c)| {
                let z = w1p * f64::from(p) + w1c * f64::from(c) + b1;
                u8::from(loss::sigmoid(z) >= threshold)
            })
            .collect()
    }
}

impl Predictor for ToyModel {
    fn predict(&self, input: &ChannelVolume) -> Result<ChannelVolume> {
        if input.channels() != 2 {
            return Err(Error::Contract(format!(
                "toy model expects 2 channels, got {}",
                input.channels()
            )));
        }
        let logits = self.forward(input.channel(0), input.channel(1));
        let data: Vec<f32> = logits.into_iter().map(|z| z as f32).collect();
        ChannelVolume::new(input.shape(), input.spacing(), 2, data)
            .map(|cv| cv.with_origin(input.origin()))
    }
}

/// One training patch: PET/CT intensities plus the foreground mask.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub shape: [usize; 3],
    pub pet: Vec<f32>,
    pub ct: Vec<f32>,
    pub mask: Vec<u8>,
}

/// Train/validation patch sets for the harness.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub train: Vec<PatchSample>,
    pub val: Vec<PatchSample>,
}

impl ToyDataset {
    /// Linearly separable data: the lesion is wherever
    /// `pet + 0.5*ct > 2.75`, a plane in feature space.
    pub fn separable(seed: u64, n_train: usize, n_val: usize, shape: [usize; 3]) -> Self {
        Self::generate(seed, n_train, n_val, shape, |pet, ct| pet + 0.5 * ct > 2.75)
    }

    /// Negative-control data: intensities as above, target always background.
    pub fn all_background(seed: u64, n_train: usize, n_val: usize, shape: [usize; 3]) -> Self {
        Self::generate(seed, n_train, n_val, shape, |_, _| false)
    }

    fn generate(
        seed: u64,
        n_train: usize,
        n_val: usize,
        shape: [usize; 3],
        label: impl Fn(f32, f32) -> bool,
    ) -> Self {
        let voxels = shape[0] * shape[1] * shape[2];
        let mut r = rng::stream(seed, 0x70);
        let mut make = |n: usize| -> Vec<PatchSample> {
            (0..n)
                .map(|_| {
                    let pet: Vec<f32> = (0..voxels).map(|_| r.gen_range(0.0..5.0)).collect();
                    let ct: Vec<f32> = (0..voxels).map(|_| r.gen_range(0.0..1.0)).collect();
                    let mask: Vec<u8> =
                        pet.iter().zip(&ct).map(|(&p, &c)| u8::from(label(p, c))).collect();
                    PatchSample { shape, pet, ct, mask }
                })
                .collect()
        };
        let train = make(n_train);
        let val = make(n_val);
        ToyDataset { train, val }
    }
}

/// Loss and validation score of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
}

/// Harness configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    /// Epochs actually run (at most `schedule.total_epochs`).
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    /// Probability threshold for validation masks.
    pub threshold: f64,
    /// Initial foreground prior for the bias terms.
    pub foreground_prior: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            epochs: 300,
            batch_size: 4,
            loss: LossConfig::default(),
            threshold: 0.5,
            foreground_prior: 0.01,
        }
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    /// Epoch with the highest validation DSC (first on ties).
    pub best_epoch: usize,
    /// Parameters snapshotted at the best epoch.
    pub model: ToyModel,
}

/// Index of the epoch with the highest validation DSC; first wins ties.
pub fn select_best_epoch(records: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, rec) in records.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if rec.val_dsc > records[b].val_dsc => best = Some(i),
            _ => {}
        }
    }
    best
}

fn mean_val_dsc(model: &ToyModel, val: &[PatchSample], threshold: f64) -> f64 {
    let mut total = 0.0;
    for sample in val {
        let pred = model.predict_mask(&sample.pet, &sample.ct, threshold);
        let mut inter = 0usize;
        let mut g = 0usize;
        let mut p = 0usize;
        for (a, b) in sample.mask.iter().zip(&pred) {
            g += *a as usize;
            p += *b as usize;
            inter += (*a & *b) as usize;
        }
        total += dsc_from_counts(inter, g, p);
    }
    total / val.len() as f64
}

/// Run the epoch loop: per-batch GDFL + gradient, backprop through the affine
/// model, one Adam step per batch with the cosine learning rate of the epoch,
/// and mean validation DSC after every epoch. Bit-reproducible per seed.
pub fn train(dataset: &ToyDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::Contract("training and validation sets must be non-empty".into()));
    }
    if cfg.epochs == 0 || cfg.epochs > cfg.schedule.total_epochs {
        return Err(Error::Contract(format!(
            "epochs {} must lie in 1..={}",
            cfg.epochs, cfg.schedule.total_epochs
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be at least 1".into()));
    }
    let shape = dataset.train[0].shape;
    for s in dataset.train.iter().chain(&dataset.val) {
        if s.shape != shape {
            return Err(Error::GeometryMismatch(
                "all patches in a dataset must share one shape".into(),
            ));
        }
    }
    let voxels = shape[0] * shape[1] * shape[2];

    let mut model = ToyModel::with_foreground_prior(cfg.foreground_prior)?;
    let mut adam = AdamState::new(6);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, ToyModel, f64)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, &cfg.schedule)?;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in dataset.train.chunks(cfg.batch_size) {
            let n_b = chunk.len();
            let mut logits = Vec::with_capacity(n_b * 2 * voxels);
            let mut fg = Vec::with_capacity(n_b * voxels);
            for sample in chunk {
                logits.extend(model.forward(&sample.pet, &sample.ct));
                fg.extend_from_slice(&sample.mask);
            }
            let batch = LossBatch::from_mask(n_b, shape, logits, &fg)?;
            let report = loss::evaluate(&batch, &cfg.loss);
            loss_sum += report.gdfl;
            batches += 1;

            // backprop dL/dz into the six affine parameters
            let mut grads = [0.0f64; 6];
            for (i, sample) in chunk.iter().enumerate() {
                for l in 0..2 {
                    let off = (i * 2 + l) * voxels;
                    let base = 3 * l;
                    for j in 0..voxels {
                        let dz = report.gradient[off + j];
                        grads[base] += dz * f64::from(sample.pet[j]);
                        grads[base + 1] += dz * f64::from(sample.ct[j]);
                        grads[base + 2] += dz;
                    }
                }
            }
            adam_step(&mut model.params, &grads, &mut adam, lr)?;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_dsc: mean_val_dsc(&model, &dataset.val, cfg.threshold),
        };
        match &best {
            Some((_, _, best_dsc)) if record.val_dsc <= *best_dsc => {}
            _ => best = Some((epoch, model.clone(), record.val_dsc)),
        }
        records.push(record);
    }
    let (best_epoch, best_model, _) = best.expect("at least one epoch ran");
    debug_assert_eq!(select_best_epoch(&records), Some(best_epoch));
    Ok(TrainOutcome { records, best_epoch, model: best_model })
}
