use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{relu_in_place, relu_mask_grad, Conv2d};
use super::NetError;
use crate::imaging::Tensor;

/// Two-block residual CNN with global average pooling and a two-logit head.
///
/// ```text
/// x ─ conv3x3(C→F) ─ relu ─┬─ conv3x3 ─ relu ─ conv3x3 ─(+)─ relu ─┬─ conv3x3/2 ─ relu ─ conv3x3 ─(+)─ relu ─ gap ─ linear(2F→2)
///                          └───────────── identity ─────┘           └──────── conv1x1/2 ─────────────┘
/// ```
///
/// Logit 0 is the negative class, logit 1 the positive class.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyResNet {
    pub in_channels: usize,
    pub base_channels: usize,
    pub stem: Conv2d,
    pub block1_conv1: Conv2d,
    pub block1_conv2: Conv2d,
    pub block2_conv1: Conv2d,
    pub block2_conv2: Conv2d,
    pub block2_shortcut: Conv2d,
    /// `[class][feature]`, 2 × 2F.
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
}

/// Intermediate activations of one forward pass, kept for backpropagation and CAM.
#[derive(Debug, Clone)]
pub struct Trace {
    pub height: usize,
    pub width: usize,
    pub out_height: usize,
    pub out_width: usize,
    input: Vec<f64>,
    stem_out: Vec<f64>,
    block1_mid: Vec<f64>,
    block1_out: Vec<f64>,
    block2_mid: Vec<f64>,
    /// Last-block feature maps, `2F × out_height × out_width`.
    pub features: Vec<f64>,
    pub pooled: Vec<f64>,
    pub logits: [f64; 2],
}

impl Trace {
    /// On/off state of every ReLU, in network order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        [
            &self.stem_out,
            &self.block1_mid,
            &self.block1_out,
            &self.block2_mid,
            &self.features,
        ]
        .iter()
        .flat_map(|v| v.iter().map(|&a| a > 0.0))
        .collect()
    }

    pub fn feature_channels(&self) -> usize {
        self.pooled.len()
    }

    pub fn feature_map(&self, k: usize) -> &[f64] {
        let n = self.out_height * self.out_width;
        &self.features[k * n..(k + 1) * n]
    }
}

impl TinyResNet {
    pub const DEFAULT_BASE_CHANNELS: usize = 8;

    /// Network with every parameter zero.
    pub fn zeros(in_channels: usize, base_channels: usize) -> Self {
        let f = base_channels;
        Self {
            in_channels,
            base_channels,
            stem: Conv2d::zeros(in_channels, f, 3, 1, 1),
            block1_conv1: Conv2d::zeros(f, f, 3, 1, 1),
            block1_conv2: Conv2d::zeros(f, f, 3, 1, 1),
            block2_conv1: Conv2d::zeros(f, 2 * f, 3, 2, 1),
            block2_conv2: Conv2d::zeros(2 * f, 2 * f, 3, 1, 1),
            block2_shortcut: Conv2d::zeros(f, 2 * f, 1, 2, 0),
            head_weight: vec![0.0; 2 * 2 * f],
            head_bias: vec![0.0; 2],
        }
    }

    /// He-normal convolutions, small normal head, zero biases; deterministic in `seed`.
    pub fn new(in_channels: usize, base_channels: usize, seed: u64) -> Self {
        let f = base_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::he_init(in_channels, f, 3, 1, 1, &mut rng);
        let block1_conv1 = Conv2d::he_init(f, f, 3, 1, 1, &mut rng);
        let block1_conv2 = Conv2d::he_init(f, f, 3, 1, 1, &mut rng);
        let block2_conv1 = Conv2d::he_init(f, 2 * f, 3, 2, 1, &mut rng);
        let block2_conv2 = Conv2d::he_init(2 * f, 2 * f, 3, 1, 1, &mut rng);
        let block2_shortcut = Conv2d::he_init(f, 2 * f, 1, 2, 0, &mut rng);
        let normal = Normal::new(0.0, (1.0 / (2 * f) as f64).sqrt()).expect("valid std");
        let head_weight = (0..4 * f).map(|_| normal.sample(&mut rng)).collect();
        Self {
            in_channels,
            base_channels,
            stem,
            block1_conv1,
            block1_conv2,
            block2_conv1,
            block2_conv2,
            block2_shortcut,
            head_weight,
            head_bias: vec![0.0; 2],
        }
    }

    /// Zeroed network of the same shape, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels, self.base_channels)
    }

    pub fn feature_channels(&self) -> usize {
        2 * self.base_channels
    }

    /// Parameter groups in checkpoint order.
    pub fn params(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("stem.weight", &self.stem.weight),
            ("stem.bias", &self.stem.bias),
            ("block1.conv1.weight", &self.block1_conv1.weight),
            ("block1.conv1.bias", &self.block1_conv1.bias),
            ("block1.conv2.weight", &self.block1_conv2.weight),
            ("block1.conv2.bias", &self.block1_conv2.bias),
            ("block2.conv1.weight", &self.block2_conv1.weight),
            ("block2.conv1.bias", &self.block2_conv1.bias),
            ("block2.conv2.weight", &self.block2_conv2.weight),
            ("block2.conv2.bias", &self.block2_conv2.bias),
            ("block2.shortcut.weight", &self.block2_shortcut.weight),
            ("block2.shortcut.bias", &self.block2_shortcut.bias),
            ("head.weight", &self.head_weight),
            ("head.bias", &self.head_bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("stem.weight", &mut self.stem.weight),
            ("stem.bias", &mut self.stem.bias),
            ("block1.conv1.weight", &mut self.block1_conv1.weight),
            ("block1.conv1.bias", &mut self.block1_conv1.bias),
            ("block1.conv2.weight", &mut self.block1_conv2.weight),
            ("block1.conv2.bias", &mut self.block1_conv2.bias),
            ("block2.conv1.weight", &mut self.block2_conv1.weight),
            ("block2.conv1.bias", &mut self.block2_conv1.bias),
            ("block2.conv2.weight", &mut self.block2_conv2.weight),
            ("block2.conv2.bias", &mut self.block2_conv2.bias),
            ("block2.shortcut.weight", &mut self.block2_shortcut.weight),
            ("block2.shortcut.bias", &mut self.block2_shortcut.bias),
            ("head.weight", &mut self.head_weight),
            ("head.bias", &mut self.head_bias),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    /// `self -= lr * grad`, parameter by parameter.
    pub fn sgd_step(&mut self, grad: &TinyResNet, lr: f64) {
        for ((_, p), (_, g)) in self.params_mut().into_iter().zip(grad.params()) {
            for (pi, gi) in p.iter_mut().zip(g) {
                *pi -= lr * gi;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, p) in self.params_mut() {
            p.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Trace, NetError> {
        let (c, h, w) = x.shape();
        if c != self.in_channels || h == 0 || w == 0 || x.values.len() != c * h * w {
            return Err(NetError::Shape(format!(
                "expected {}xHxW input, got {c}x{h}x{w}",
                self.in_channels
            )));
        }
        let mut stem_out = Vec::new();
        self.stem.forward(&x.values, h, w, &mut stem_out);
        relu_in_place(&mut stem_out);

        let mut block1_mid = Vec::new();
        self.block1_conv1.forward(&stem_out, h, w, &mut block1_mid);
        relu_in_place(&mut block1_mid);
        let mut block1_out = Vec::new();
        self.block1_conv2
            .forward(&block1_mid, h, w, &mut block1_out);
        for (o, r) in block1_out.iter_mut().zip(&stem_out) {
            *o += r;
        }
        relu_in_place(&mut block1_out);

        let mut block2_mid = Vec::new();
        let (oh, ow) = self
            .block2_conv1
            .forward(&block1_out, h, w, &mut block2_mid);
        relu_in_place(&mut block2_mid);
        let mut features = Vec::new();
        self.block2_conv2
            .forward(&block2_mid, oh, ow, &mut features);
        let mut shortcut = Vec::new();
        self.block2_shortcut
            .forward(&block1_out, h, w, &mut shortcut);
        for (o, s) in features.iter_mut().zip(&shortcut) {
            *o += s;
        }
        relu_in_place(&mut features);

        let plane = oh * ow;
        let k = self.feature_channels();
        let pooled: Vec<f64> = (0..k)
            .map(|c| features[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let mut logits = [0.0; 2];
        for (cls, logit) in logits.iter_mut().enumerate() {
            *logit = self.head_bias[cls]
                + self.head_weight[cls * k..(cls + 1) * k]
                    .iter()
                    .zip(&pooled)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
        }
        Ok(Trace {
            height: h,
            width: w,
            out_height: oh,
            out_width: ow,
            input: x.values.clone(),
            stem_out,
            block1_mid,
            block1_out,
            block2_mid,
            features,
            pooled,
            logits,
        })
    }

    /// Backpropagates `d_logits` through a recorded forward pass, accumulating into `grad`.
    pub fn backward(&self, trace: &Trace, d_logits: [f64; 2], grad: &mut TinyResNet) {
        let (h, w) = (trace.height, trace.width);
        let (oh, ow) = (trace.out_height, trace.out_width);
        let k = self.feature_channels();
        let f = self.base_channels;

        // head
        let mut d_pooled = vec![0.0; k];
        for (cls, &dl) in d_logits.iter().enumerate() {
            grad.head_bias[cls] += dl;
            for j in 0..k {
                grad.head_weight[cls * k + j] += dl * trace.pooled[j];
                d_pooled[j] += dl * self.head_weight[cls * k + j];
            }
        }

        // global average pool, then block 2 output relu
        let plane = oh * ow;
        let mut d_b2_pre = vec![0.0; k * plane];
        for c in 0..k {
            d_b2_pre[c * plane..(c + 1) * plane].fill(d_pooled[c] / plane as f64);
        }
        relu_mask_grad(&trace.features, &mut d_b2_pre);

        // block 2 main path and shortcut
        let mut d_b2_mid = vec![0.0; k * plane];
        self.block2_conv2.backward(
            &trace.block2_mid,
            oh,
            ow,
            &d_b2_pre,
            &mut grad.block2_conv2,
            Some(&mut d_b2_mid),
        );
        relu_mask_grad(&trace.block2_mid, &mut d_b2_mid);
        let mut d_b1_out = vec![0.0; f * h * w];
        self.block2_conv1.backward(
            &trace.block1_out,
            h,
            w,
            &d_b2_mid,
            &mut grad.block2_conv1,
            Some(&mut d_b1_out),
        );
        self.block2_shortcut.backward(
            &trace.block1_out,
            h,
            w,
            &d_b2_pre,
            &mut grad.block2_shortcut,
            Some(&mut d_b1_out),
        );

        // block 1
        relu_mask_grad(&trace.block1_out, &mut d_b1_out);
        let mut d_b1_mid = vec![0.0; f * h * w];
        self.block1_conv2.backward(
            &trace.block1_mid,
            h,
            w,
            &d_b1_out,
            &mut grad.block1_conv2,
            Some(&mut d_b1_mid),
        );
        relu_mask_grad(&trace.block1_mid, &mut d_b1_mid);
        // identity branch carries d_b1_out straight through
        let mut d_stem = d_b1_out;
        self.block1_conv1.backward(
            &trace.stem_out,
            h,
            w,
            &d_b1_mid,
            &mut grad.block1_conv1,
            Some(&mut d_stem),
        );
        relu_mask_grad(&trace.stem_out, &mut d_stem);
        self.stem
            .backward(&trace.input, h, w, &d_stem, &mut grad.stem, None);
    }
}
