//! Deterministic synthetic radiographs with known lung masks and nodule boxes.
//!
//! Each image is a bright background (~200) with two dark lung rectangles (~40) at jittered
//! canonical positions. A fraction of cases carry one bright elliptical nodule (120–180,
//! radii 4–12 px) placed uniformly inside one lung. Faint or small nodules are flagged
//! difficult.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{save_pgm, Image};
use crate::labels::{write_manifest, CaseRecord, NoduleBox, Source, Split};
use crate::lunggrid::{Mask, Rect};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub size: usize,
    /// Fraction of cases with a nodule.
    pub positive_rate: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 200,
            seed: 42,
            size: 256,
            positive_rate: 0.5,
            noise_std: 6.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCase {
    pub record: CaseRecord,
    pub image: Image,
    pub truth: Mask,
}

/// Paths of a written dataset relative to its root.
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";
pub const TRUTH_DIR: &str = "truth";

pub fn truth_path(root: &Path, case_id: &str) -> std::path::PathBuf {
    root.join(TRUTH_DIR).join(format!("{case_id}.pgm"))
}

fn jitter(rng: &mut ChaCha8Rng, base: i32, spread: i32) -> i32 {
    base + rng.random_range(-spread..=spread)
}

fn lung_rects(rng: &mut ChaCha8Rng, size: i32) -> (Rect, Rect) {
    // canonical layout for 256 px, scaled to other sizes
    let s = |v: i32| v * size / 256;
    let lw = jitter(rng, s(80), s(6));
    let lh = jitter(rng, s(170), s(12));
    let left = Rect::new(
        jitter(rng, s(24), s(4)),
        jitter(rng, s(44), s(8)),
        lw as u32,
        lh as u32,
    );
    let rw = jitter(rng, s(80), s(6));
    let rh = jitter(rng, s(170), s(12));
    let right = Rect::new(
        size - s(24) - rw + rng.random_range(-s(4)..=s(4)),
        jitter(rng, s(44), s(8)),
        rw as u32,
        rh as u32,
    );
    (left, right)
}

/// Generates case `index` from the shared RNG stream.
fn generate_case(rng: &mut ChaCha8Rng, cfg: &SynthConfig, index: usize) -> SynthCase {
    let size = cfg.size as i32;
    let case_id = format!("syn-{index:04}");
    let (left, right) = lung_rects(rng, size);
    let mut truth = Mask::new(cfg.size, cfg.size);
    truth.fill_rect(left, true);
    truth.fill_rect(right, true);

    let mut canvas: Vec<f64> = truth
        .bits
        .iter()
        .map(|&lung| if lung { 40.0 } else { 200.0 })
        .collect();

    let mut nodules = Vec::new();
    let mut difficult = false;
    if rng.random_bool(cfg.positive_rate) {
        let lung = if rng.random_bool(0.5) { left } else { right };
        let rx = rng.random_range(4..=12);
        let ry = rng.random_range(4..=12);
        let intensity = rng.random_range(120.0..=180.0);
        let cx = rng.random_range(lung.x + rx..lung.right() - rx);
        let cy = rng.random_range(lung.y + ry..lung.bottom() - ry);
        let (mut x0, mut y0, mut x1, mut y1) = (i32::MAX, i32::MAX, i32::MIN, i32::MIN);
        for y in cy - ry..=cy + ry {
            for x in cx - rx..=cx + rx {
                let dx = (x - cx) as f64 / rx as f64;
                let dy = (y - cy) as f64 / ry as f64;
                if dx * dx + dy * dy <= 1.0 {
                    canvas[(y * size + x) as usize] = intensity;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        nodules.push(NoduleBox::new(
            format!("{case_id}-n0"),
            Rect::from_edges(x0, y0, x1 + 1, y1 + 1),
        ));
        difficult = intensity < 140.0 || rx.max(ry) < 6;
    }

    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("valid noise std");
    let data = canvas
        .iter()
        .map(|v| (v + noise.sample(rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    let image = Image::new(cfg.size, cfg.size, data).expect("valid synthetic image");

    SynthCase {
        record: CaseRecord {
            case_id: case_id.clone(),
            image_path: Path::new(IMAGE_DIR).join(format!("{case_id}.pgm")),
            mask_path: None,
            nodules,
            difficult,
            source: Source::Synthetic,
            split: Split::Unassigned,
        },
        image,
        truth,
    }
}

/// Generates the full dataset in memory.
pub fn generate(cfg: &SynthConfig) -> Vec<SynthCase> {
    assert!(cfg.size >= 64, "synthetic images need at least 64 px");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n)
        .map(|i| generate_case(&mut rng, cfg, i))
        .collect()
}

/// Writes `images/`, `truth/` and `manifest.jsonl` under `root`.
pub fn write_dataset(cfg: &SynthConfig, root: &Path) -> Result<Vec<CaseRecord>> {
    for dir in [root.join(IMAGE_DIR), root.join(TRUTH_DIR)] {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let cases = generate(cfg);
    for c in &cases {
        save_pgm(&c.image, root.join(&c.record.image_path))?;
        save_pgm(&c.truth.to_image(), truth_path(root, &c.record.case_id))?;
    }
    let records: Vec<CaseRecord> = cases.into_iter().map(|c| c.record).collect();
    write_manifest(root.join(MANIFEST_FILE), &records)?;
    Ok(records)
}
