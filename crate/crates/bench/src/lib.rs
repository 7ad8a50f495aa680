//! Shared inputs for the criterion benches.

use lungpatch_core::metrics::ScoredItem;
use lungpatch_core::synth::{generate, SynthCase, SynthConfig};
use lungpatch_core::Tensor;

/// One deterministic 256 px synthetic radiograph.
pub fn radiograph() -> SynthCase {
    generate(&SynthConfig {
        n: 1,
        seed: 3,
        ..SynthConfig::default()
    })
    .remove(0)
}

/// `n` scored items with a fixed score/label pattern and frequent ties.
pub fn scored(n: usize) -> Vec<ScoredItem> {
    (0..n)
        .map(|i| ScoredItem::new(((i * 7919) % 101) as f64 / 100.0, (i * 31) % 5 == 0))
        .collect()
}

/// A single-channel `size`×`size` input with a smooth gradient.
pub fn patch(size: usize) -> Tensor {
    let values = (0..size * size)
        .map(|i| ((i % size) as f64 - (i / size) as f64) / size as f64)
        .collect();
    Tensor::from_values(1, size, size, values).unwrap()
}
