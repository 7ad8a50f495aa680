//! Patch classifier: a small residual CNN trained from scratch with weighted cross-entropy,
//! plain mini-batch SGD, a constant warm-up followed by cosine annealing, and a strict
//! probability threshold for the positive call. Class activation maps come from the last
//! block's feature maps and the linear head.

mod cam;
mod checkpoint;
mod layers;
mod model;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cam::{cam, cam_from_features, Heatmap};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use layers::Conv2d;
pub use model::{TinyResNet, Trace};
pub use train::{batch_gradient, evaluate_scores, train, EpochRecord, PatchSet, TrainOutcome};

use crate::imaging::{self, Image, Tensor};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate training data: {0}")]
    DegenerateData(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Imaging(#[from] imaging::ImagingError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub const NEGATIVE: usize = 0;
pub const POSITIVE: usize = 1;

/// How a raw 8-bit patch becomes a network input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub patch_size: usize,
    pub pad_value: u8,
    pub mean: f64,
    pub std: f64,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            patch_size: 56,
            pad_value: 0,
            mean: imaging::DEFAULT_MEAN,
            std: imaging::DEFAULT_STD,
        }
    }
}

impl Preprocess {
    /// Resize-and-pad to `patch_size`, returning the 8-bit square patch.
    pub fn square(&self, patch: &Image) -> Result<Image, NetError> {
        Ok(imaging::resize_pad(patch, self.patch_size, self.pad_value)?)
    }

    /// Normalize an already square patch.
    pub fn tensor(&self, square: &Image) -> Result<Tensor, NetError> {
        Ok(imaging::normalize(square, self.mean, self.std)?)
    }

    pub fn apply(&self, patch: &Image) -> Result<Tensor, NetError> {
        self.tensor(&self.square(patch)?)
    }
}

/// Full training recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub eta_min: f64,
    /// `(w_neg, w_pos)`; `None` means inverse class frequency of the training split.
    pub class_weights: Option<(f64, f64)>,
    pub seed: u64,
    pub threshold: f64,
    pub base_channels: usize,
    /// Random contrast/brightness/flip/rotation jitter on training patches.
    pub augment: bool,
    pub preprocess: Preprocess,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            base_lr: 0.001,
            warmup_epochs: 20,
            total_epochs: 60,
            eta_min: 0.0,
            class_weights: None,
            seed: 0,
            threshold: 0.9,
            base_channels: TinyResNet::DEFAULT_BASE_CHANNELS,
            augment: false,
            preprocess: Preprocess::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let fail = |m: String| Err(NetError::InvalidConfig(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0) || !(self.eta_min >= 0.0) || self.eta_min > self.base_lr {
            return fail(format!(
                "need 0 <= eta_min <= base_lr, base_lr > 0 (got {} / {})",
                self.eta_min, self.base_lr
            ));
        }
        if self.warmup_epochs >= self.total_epochs {
            return fail(format!(
                "warmup_epochs {} must be < total_epochs {}",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if let Some((wn, wp)) = self.class_weights {
            if !(wn > 0.0 && wp > 0.0) || !wn.is_finite() || !wp.is_finite() {
                return fail(format!("class weights must be positive, got ({wn}, {wp})"));
            }
        }
        if self.base_channels == 0 {
            return fail("base_channels must be positive".into());
        }
        if self.preprocess.patch_size == 0 || !(self.preprocess.std > 0.0) {
            return fail("patch_size and normalization std must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: `base_lr` through the warm-up, then a half-cosine from
/// `base_lr` at the first annealed epoch down to `eta_min` at the final epoch.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64, NetError> {
    if epoch >= cfg.total_epochs {
        return Err(NetError::InvalidInput(format!(
            "epoch {epoch} outside [0, {})",
            cfg.total_epochs
        )));
    }
    if epoch <= cfg.warmup_epochs {
        return Ok(cfg.base_lr);
    }
    let span = cfg.total_epochs - 1 - cfg.warmup_epochs;
    if span == 0 {
        return Ok(cfg.base_lr);
    }
    let progress = (epoch - cfg.warmup_epochs) as f64 / span as f64;
    if progress == 1.0 {
        return Ok(cfg.eta_min);
    }
    Ok(cfg.eta_min
        + 0.5 * (cfg.base_lr - cfg.eta_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Numerically stable two-class softmax.
pub fn softmax(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// `log Σ exp(z) − z[target]`, evaluated as a softplus of the logit gap so it stays exact for
/// large margins.
pub fn cross_entropy(logits: [f64; 2], target: usize) -> f64 {
    let d = logits[1 - target] - logits[target];
    if d > 0.0 {
        d + (-d).exp().ln_1p()
    } else {
        d.exp().ln_1p()
    }
}

/// Weighted mean cross-entropy: `Σ w_y·CE / Σ w_y`. Zero total weight gives 0.
pub fn weighted_ce_loss(logits: &[[f64; 2]], targets: &[usize], weights: (f64, f64)) -> f64 {
    debug_assert_eq!(logits.len(), targets.len());
    let w = |t: usize| if t == POSITIVE { weights.1 } else { weights.0 };
    let total: f64 = targets.iter().map(|&t| w(t)).sum();
    if total == 0.0 {
        return 0.0;
    }
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| w(t) * cross_entropy(z, t))
        .sum::<f64>()
        / total
}

/// Positive-class probability and the strict `p > threshold` call.
pub fn predict(net: &TinyResNet, patch: &Tensor, threshold: f64) -> Result<(f64, bool), NetError> {
    let trace = net.forward(patch)?;
    Ok(call(trace.logits, threshold))
}

/// Positive probability and label from logits.
pub fn call(logits: [f64; 2], threshold: f64) -> (f64, bool) {
    let p = softmax(logits)[POSITIVE];
    (p, p > threshold)
}
