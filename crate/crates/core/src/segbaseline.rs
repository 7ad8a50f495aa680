//! Classical lung segmentation: dark-region threshold, morphological open/close and a
//! two-largest-components filter. Masks computed elsewhere can be injected with [`load_mask`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{load_image, Image, ImagingError};
use crate::lunggrid::{components_by_area, Mask};

#[derive(Debug, Error)]
pub enum SegError {
    #[error("segmentation failed: {qualifying} component(s) above the area floor, need 2")]
    SegmentationFailed { qualifying: usize },
    #[error("mask is {actual:?} but image is {expected:?}")]
    MaskMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("invalid segmentation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Otsu,
    /// Pixels strictly below this intensity are lung candidates.
    Fixed(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub threshold_mode: ThresholdMode,
    pub open_radius: usize,
    pub close_radius: usize,
    /// Minimum component area as a fraction of the image area, in `(0, 0.5)`.
    pub min_component_area: f64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            threshold_mode: ThresholdMode::Otsu,
            open_radius: 2,
            close_radius: 4,
            min_component_area: 0.02,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<(), SegError> {
        if !(self.min_component_area > 0.0 && self.min_component_area < 0.5) {
            return Err(SegError::InvalidConfig(format!(
                "min_component_area {} outside (0, 0.5)",
                self.min_component_area
            )));
        }
        Ok(())
    }
}

/// Otsu's threshold: the intensity `t` maximizing between-class variance of `{v ≤ t}` versus
/// `{v > t}`. The smallest maximizer is returned.
pub fn otsu_threshold(img: &Image) -> u8 {
    let mut hist = [0u64; 256];
    for &v in img.data() {
        hist[v as usize] += 1;
    }
    let total = img.data().len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(v, &c)| v as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best_t, mut best_var) = (0u8, -1.0);
    for t in 0..256 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_t = t as u8;
        }
    }
    best_t
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Erosion (`all == true`) or dilation with a disk; out-of-image neighbours are ignored.
fn morph(mask: &Mask, radius: usize, all: bool) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let offsets = disk_offsets(radius);
    let (w, h) = (mask.width as isize, mask.height as isize);
    let mut out = Mask::new(mask.width, mask.height);
    for y in 0..h {
        for x in 0..w {
            let mut hits = offsets.iter().filter_map(|&(dx, dy)| {
                let (nx, ny) = (x + dx, y + dy);
                (nx >= 0 && ny >= 0 && nx < w && ny < h).then(|| mask.get(nx as usize, ny as usize))
            });
            let v = if all {
                hits.all(|b| b)
            } else {
                hits.any(|b| b)
            };
            out.set(x as usize, y as usize, v);
        }
    }
    out
}

pub fn erode(mask: &Mask, radius: usize) -> Mask {
    morph(mask, radius, true)
}

pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    morph(mask, radius, false)
}

pub fn open(mask: &Mask, radius: usize) -> Mask {
    dilate(&erode(mask, radius), radius)
}

/// Closing evaluated on a background-padded canvas, so gaps between an object and the image
/// border are not filled.
pub fn close(mask: &Mask, radius: usize) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let mut padded = Mask::new(w + 2 * radius, h + 2 * radius);
    for y in 0..h {
        for x in 0..w {
            padded.set(x + radius, y + radius, mask.get(x, y));
        }
    }
    let closed = erode(&dilate(&padded, radius), radius);
    let mut out = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, closed.get(x + radius, y + radius));
        }
    }
    out
}

/// Baseline lung mask: dark pixels, opened then closed, keeping the two largest components
/// whose area exceeds `min_component_area` of the image.
pub fn segment_lungs(img: &Image, cfg: &SegConfig) -> Result<Mask, SegError> {
    cfg.validate()?;
    let below = match cfg.threshold_mode {
        ThresholdMode::Otsu => otsu_threshold(img) as u16 + 1,
        ThresholdMode::Fixed(t) => t as u16,
    };
    let candidates = Mask {
        width: img.width(),
        height: img.height(),
        bits: img.data().iter().map(|&v| (v as u16) < below).collect(),
    };
    let cleaned = close(&open(&candidates, cfg.open_radius), cfg.close_radius);
    let (labels, comps) = components_by_area(&cleaned);
    let floor = cfg.min_component_area * (img.width() * img.height()) as f64;
    let keep: Vec<u32> = comps
        .iter()
        .filter(|c| c.area as f64 > floor)
        .take(2)
        .map(|c| c.label)
        .collect();
    if keep.len() < 2 {
        return Err(SegError::SegmentationFailed {
            qualifying: keep.len(),
        });
    }
    Ok(Mask {
        width: img.width(),
        height: img.height(),
        bits: labels.iter().map(|l| keep.contains(l)).collect(),
    })
}

/// Reads a mask image (PGM or PNG) and thresholds it at 128; dimensions must match the case
/// image.
pub fn load_mask(path: impl AsRef<Path>, expected: (usize, usize)) -> Result<Mask, SegError> {
    let img = load_image(path)?;
    let actual = (img.width(), img.height());
    if actual != expected {
        return Err(SegError::MaskMismatch { expected, actual });
    }
    Ok(Mask::from_image(&img))
}
