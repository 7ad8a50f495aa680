use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{call, cross_entropy, lr_at, NetError, Preprocess, TinyResNet, TrainConfig, POSITIVE};
use crate::imaging::{augment, AugmentParams, Image, Tensor};
use crate::metrics::{self, ScoredItem};

/// Square 8-bit patches with binary labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchSet {
    pub images: Vec<Image>,
    pub labels: Vec<bool>,
}

impl PatchSet {
    pub fn push(&mut self, image: Image, label: bool) {
        self.images.push(image);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean weighted cross-entropy over the epoch's mini-batches.
    pub train_loss: f64,
    pub val_auroc: Option<f64>,
    pub val_aupr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: TinyResNet,
    pub history: Vec<EpochRecord>,
    pub class_weights: (f64, f64),
}

/// Weighted mean loss over one mini-batch and its gradient for every parameter.
pub fn batch_gradient(
    net: &TinyResNet,
    inputs: &[&Tensor],
    targets: &[usize],
    weights: (f64, f64),
) -> Result<(f64, TinyResNet), NetError> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(NetError::InvalidInput(format!(
            "batch of {} inputs with {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let w = |t: usize| if t == POSITIVE { weights.1 } else { weights.0 };
    let total: f64 = targets.iter().map(|&t| w(t)).sum();
    let mut grad = net.zeros_like();
    if total == 0.0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for (x, &t) in inputs.iter().zip(targets) {
        let trace = net.forward(x)?;
        let scale = w(t) / total;
        loss += scale * cross_entropy(trace.logits, t);
        if scale == 0.0 {
            continue;
        }
        let p = super::softmax(trace.logits);
        let mut d = [scale * p[0], scale * p[1]];
        d[t] -= scale;
        net.backward(&trace, d, &mut grad);
    }
    Ok((loss, grad))
}

/// Positive-class probability for every patch in the set.
pub fn evaluate_scores(
    net: &TinyResNet,
    set: &PatchSet,
    preprocess: &Preprocess,
) -> Result<Vec<f64>, NetError> {
    set.images
        .iter()
        .map(|img| {
            let x = preprocess.tensor(img)?;
            Ok(call(net.forward(&x)?.logits, 0.5).0)
        })
        .collect()
}

fn inverse_frequency(set: &PatchSet) -> (f64, f64) {
    let n = set.len() as f64;
    let pos = set.positives() as f64;
    (n / (2.0 * (n - pos)), n / (2.0 * pos))
}

/// Trains `net` in place with shuffled mini-batches (last partial batch kept) and plain SGD.
/// Deterministic for a fixed `cfg.seed`.
pub fn train(
    mut net: TinyResNet,
    train_set: &PatchSet,
    val_set: Option<&PatchSet>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, NetError> {
    cfg.validate()?;
    let pos = train_set.positives();
    if pos == 0 || pos == train_set.len() {
        return Err(NetError::DegenerateData(format!(
            "training split has {pos} positive of {} patches; both classes are required",
            train_set.len()
        )));
    }
    if net.base_channels != cfg.base_channels {
        return Err(NetError::InvalidConfig(format!(
            "network has {} base channels, config says {}",
            net.base_channels, cfg.base_channels
        )));
    }
    let weights = cfg
        .class_weights
        .unwrap_or_else(|| inverse_frequency(train_set));
    let tensors: Vec<Tensor> = if cfg.augment {
        Vec::new()
    } else {
        train_set
            .images
            .iter()
            .map(|img| cfg.preprocess.tensor(img))
            .collect::<Result<_, _>>()?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.total_epochs);

    for epoch in 0..cfg.total_epochs {
        let lr = lr_at(cfg, epoch)?;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let targets: Vec<usize> = chunk
                .iter()
                .map(|&i| train_set.labels[i] as usize)
                .collect();
            let augmented: Vec<Tensor>;
            let inputs: Vec<&Tensor> = if cfg.augment {
                augmented = chunk
                    .iter()
                    .map(|&i| {
                        let params = AugmentParams::sample(rng.next_u64());
                        cfg.preprocess
                            .tensor(&augment(&train_set.images[i], &params)?)
                    })
                    .collect::<Result<_, NetError>>()?;
                augmented.iter().collect()
            } else {
                chunk.iter().map(|&i| &tensors[i]).collect()
            };
            let (loss, grad) = batch_gradient(&net, &inputs, &targets, weights)?;
            net.sgd_step(&grad, lr);
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen as f64;
        if !train_loss.is_finite() || !net.all_finite() {
            return Err(NetError::InvalidInput(format!(
                "training diverged at epoch {epoch} (loss {train_loss})"
            )));
        }
        let (val_auroc, val_aupr) = match val_set {
            Some(val) if !val.is_empty() => {
                let scores = evaluate_scores(&net, val, &cfg.preprocess)?;
                let items: Vec<ScoredItem> = scores
                    .iter()
                    .zip(&val.labels)
                    .map(|(&s, &t)| ScoredItem::new(s, t))
                    .collect();
                (metrics::auroc(&items).ok(), metrics::aupr(&items).ok())
            }
            _ => (None, None),
        };
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_auroc,
            val_aupr,
        });
    }
    Ok(TrainOutcome {
        net,
        history,
        class_weights: weights,
    })
}
