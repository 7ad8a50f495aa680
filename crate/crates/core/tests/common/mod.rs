//! Brute-force reference implementations shared by the property and acceptance suites.
#![allow(dead_code)]

use lungpatch_core::imaging::Tensor;
use lungpatch_core::lunggrid::{Mask, Rect};
use lungpatch_core::metrics::ScoredItem;
use lungpatch_core::nnet::{batch_gradient, weighted_ce_loss, TinyResNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// AUROC by enumerating every (positive, negative) pair.
pub fn pairwise_auroc(items: &[ScoredItem]) -> f64 {
    let pos: Vec<f64> = items.iter().filter(|i| i.truth).map(|i| i.score).collect();
    let neg: Vec<f64> = items.iter().filter(|i| !i.truth).map(|i| i.score).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Intersection area by counting pixels.
pub fn pixel_overlap(a: &Rect, b: &Rect) -> u64 {
    let mut n = 0;
    for y in a.y..a.y + a.h as i32 {
        for x in a.x..a.x + a.w as i32 {
            if x >= b.x && x < b.x + b.w as i32 && y >= b.y && y < b.y + b.h as i32 {
                n += 1;
            }
        }
    }
    n
}

/// For each nodule, the lowest-index patch of maximal pixel overlap, or `None` if untouched.
pub fn argmax_oracle(patches: &[Rect], nodules: &[Rect]) -> Vec<Option<usize>> {
    nodules
        .iter()
        .map(|n| {
            let areas: Vec<u64> = patches.iter().map(|p| pixel_overlap(p, n)).collect();
            let best = *areas.iter().max()?;
            if best == 0 {
                return None;
            }
            areas.iter().position(|&a| a == best)
        })
        .collect()
}

/// `(area, first raster index, tight box)` of every 8-connected component, via depth-first
/// flood fill.
pub fn flood_components(mask: &Mask) -> Vec<(usize, usize, Rect)> {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let mut seen = vec![false; mask.bits.len()];
    let mut out = Vec::new();
    for start in 0..mask.bits.len() {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        let mut area = 0;
        while let Some(i) = stack.pop() {
            area += 1;
            let (x, y) = (i as i64 % w, i as i64 / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if mask.bits[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        let bbox = Rect::new(
            x0 as i32,
            y0 as i32,
            (x1 - x0 + 1) as u32,
            (y1 - y0 + 1) as u32,
        );
        out.push((area, start, bbox));
    }
    out
}

/// Two largest components (ties: earlier first pixel), ordered left/right by box center.
pub fn lung_boxes_oracle(mask: &Mask) -> Option<(Rect, Rect)> {
    let mut comps = flood_components(mask);
    if comps.len() < 2 {
        return None;
    }
    comps.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let (a, b) = (comps[0].2, comps[1].2);
    let cx = |r: &Rect| r.x as f64 + r.w as f64 / 2.0;
    if cx(&b) < cx(&a) {
        Some((b, a))
    } else {
        Some((a, b))
    }
}

/// True iff the union of `rects` is exactly `bbox`, checked pixel by pixel.
pub fn union_is_exactly(rects: &[Rect], bbox: &Rect) -> bool {
    if rects.iter().any(|r| {
        !(r.x >= bbox.x
            && r.y >= bbox.y
            && r.x + r.w as i32 <= bbox.x + bbox.w as i32
            && r.y + r.h as i32 <= bbox.y + bbox.h as i32)
    }) {
        return false;
    }
    (bbox.y..bbox.y + bbox.h as i32).all(|y| {
        (bbox.x..bbox.x + bbox.w as i32).all(|x| {
            rects
                .iter()
                .any(|r| x >= r.x && x < r.x + r.w as i32 && y >= r.y && y < r.y + r.h as i32)
        })
    })
}

/// Outcome of one finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates skipped because the ±ε perturbation flipped some ReLU on or off.
    pub skipped: usize,
    pub max_rel_err: f64,
}

/// Gradient magnitudes below this are compared absolutely: both sides must be within it.
pub const GRAD_FLOOR: f64 = 1e-7;

fn batch_loss(
    net: &TinyResNet,
    inputs: &[Tensor],
    targets: &[usize],
    weights: (f64, f64),
) -> (f64, Vec<bool>) {
    let mut logits = Vec::with_capacity(inputs.len());
    let mut pattern = Vec::new();
    for x in inputs {
        let t = net.forward(x).unwrap();
        logits.push(t.logits);
        pattern.extend(t.relu_pattern());
    }
    (weighted_ce_loss(&logits, targets, weights), pattern)
}

/// Central differences (`eps`) against the analytic gradient for every parameter.
pub fn gradient_check(
    net: &TinyResNet,
    inputs: &[Tensor],
    targets: &[usize],
    weights: (f64, f64),
    eps: f64,
) -> GradCheck {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let (_, grad) = batch_gradient(net, &refs, targets, weights).unwrap();
    let analytic: Vec<f64> = grad
        .params()
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .collect();
    let mut probe = net.clone();
    let mut report = GradCheck {
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
    };
    let mut flat = 0;
    let groups = probe.params().len();
    for g in 0..groups {
        let len = probe.params()[g].1.len();
        for i in 0..len {
            let orig = probe.params()[g].1[i];
            probe.params_mut()[g].1[i] = orig + eps;
            let (plus, pat_plus) = batch_loss(&probe, inputs, targets, weights);
            probe.params_mut()[g].1[i] = orig - eps;
            let (minus, pat_minus) = batch_loss(&probe, inputs, targets, weights);
            probe.params_mut()[g].1[i] = orig;
            let a = analytic[flat];
            flat += 1;
            if pat_plus != pat_minus {
                report.skipped += 1;
                continue;
            }
            let n = (plus - minus) / (2.0 * eps);
            let err = if a.abs().max(n.abs()) < GRAD_FLOOR {
                0.0
            } else {
                (a - n).abs() / a.abs().max(n.abs())
            };
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    report
}

/// Random network, batch and targets for gradient checking.
pub fn random_grad_case(seed: u64) -> (TinyResNet, Vec<Tensor>, Vec<usize>, (f64, f64)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = rng.random_range(1..=3);
    let mut net = TinyResNet::new(1, f, seed);
    // nonzero biases exercise the bias gradients
    for (_, p) in net.params_mut() {
        if p.len() <= 2 * f {
            p.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let (h, w) = (rng.random_range(4..=9), rng.random_range(4..=9));
    let batch = rng.random_range(1..=4);
    let inputs = (0..batch)
        .map(|_| {
            Tensor::from_values(
                1,
                h,
                w,
                (0..h * w).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap()
        })
        .collect();
    let targets = (0..batch).map(|_| rng.random_range(0..2)).collect();
    let weights = (rng.random_range(0.2..3.0), rng.random_range(0.2..3.0));
    (net, inputs, targets, weights)
}
