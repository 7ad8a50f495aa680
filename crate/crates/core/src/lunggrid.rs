//! Lung masks to per-lung bounding boxes, and boxes to overlapping patch grids.
//!
//! Each lung box is tiled independently by `cols × rows` patches. For a box of width `W`,
//! `C` columns and overlap fraction `ω`, the real-valued patch width is
//! `w = W / (C − (C−1)ω)` and the column stride is `w(1−ω)`, so the last patch ends exactly on
//! the box edge. Offsets and edges are rounded independently; the first patch starts and the
//! last patch ends on the box boundary.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::Image;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("mask has {count} connected component(s); two lungs are required")]
    InsufficientComponents { count: usize },
    #[error("invalid lung box {rect:?}: {reason}")]
    InvalidBox { rect: Rect, reason: String },
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("mask dimensions {actual:?} do not match expected {expected:?}")]
    MaskMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
}

/// Binary raster, row-major; `true` marks lung.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    /// Pixels `>= 128` become lung.
    pub fn from_image(img: &Image) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            bits: img.data().iter().map(|&v| v >= 128).collect(),
        }
    }

    /// 0/255 rendering for PGM output.
    pub fn to_image(&self) -> Image {
        let data = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        Image::new(self.width, self.height, data).expect("mask dimensions are valid")
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    /// Sets every pixel of `rect` (clipped to the mask) to `v`.
    pub fn fill_rect(&mut self, rect: Rect, v: bool) {
        let x0 = rect.x.max(0) as usize;
        let y0 = rect.y.max(0) as usize;
        let x1 = (rect.right().max(0) as usize).min(self.width);
        let y1 = (rect.bottom().max(0) as usize).min(self.height);
        for y in y0..y1 {
            for x in x0..x1 {
                self.set(x, y, v);
            }
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Integer pixel rectangle `[x, x+w) × [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: i32,
    pub y: i32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: i32, y: i32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    /// Rectangle spanning `[x0, x1) × [y0, y1)`; empty spans give zero size.
    pub fn from_edges(x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        Self {
            x: x0,
            y: y0,
            w: (x1 - x0).max(0) as u32,
            h: (y1 - y0).max(0) as u32,
        }
    }

    pub fn right(&self) -> i32 {
        self.x + self.w as i32
    }

    pub fn bottom(&self) -> i32 {
        self.y + self.h as i32
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| Rect::from_edges(x0, y0, x1, y1))
    }

    pub fn intersection_area(&self, other: &Rect) -> u64 {
        self.intersection(other).map_or(0, |r| r.area())
    }

    pub fn contains(&self, px: i32, py: i32) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn translate(&self, dx: i32, dy: i32) -> Rect {
        Rect::new(self.x + dx, self.y + dy, self.w, self.h)
    }
}

/// Patch layout per lung: `cols × rows` patches sharing `overlap` of their extent with each
/// neighbour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(rename = "cols")]
    pub cols_per_lung: u32,
    #[serde(rename = "rows")]
    pub rows_per_lung: u32,
    #[serde(rename = "overlap")]
    pub overlap_fraction: f64,
}

impl GridSpec {
    pub const DEFAULT_OVERLAP: f64 = 0.25;

    /// Two columns by four rows per lung: 16 patches in total.
    pub fn sixteen(overlap: f64) -> Self {
        Self {
            cols_per_lung: 2,
            rows_per_lung: 4,
            overlap_fraction: overlap,
        }
    }

    /// One column of three per lung: 6 patches in total.
    pub fn six(overlap: f64) -> Self {
        Self {
            cols_per_lung: 1,
            rows_per_lung: 3,
            overlap_fraction: overlap,
        }
    }

    /// Preset by total patch count (16 or 6).
    pub fn preset(total: u32, overlap: f64) -> Option<Self> {
        match total {
            16 => Some(Self::sixteen(overlap)),
            6 => Some(Self::six(overlap)),
            _ => None,
        }
    }

    pub fn patches_per_lung(&self) -> usize {
        self.cols_per_lung as usize * self.rows_per_lung as usize
    }

    pub fn total_patches(&self) -> usize {
        2 * self.patches_per_lung()
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.cols_per_lung == 0 || self.rows_per_lung == 0 {
            return Err(GridError::InvalidSpec(format!(
                "need at least one column and row, got {}x{}",
                self.cols_per_lung, self.rows_per_lung
            )));
        }
        if !(0.0..0.5).contains(&self.overlap_fraction) {
            return Err(GridError::InvalidSpec(format!(
                "overlap fraction {} outside [0, 0.5)",
                self.overlap_fraction
            )));
        }
        Ok(())
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::sixteen(Self::DEFAULT_OVERLAP)
    }
}

/// Patch rectangles for both lungs, each list row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub left_rects: Vec<Rect>,
    pub right_rects: Vec<Rect>,
    pub spec: GridSpec,
}

impl PatchGrid {
    /// All patches in global index order: left lung first, then right.
    pub fn rects(&self) -> impl Iterator<Item = &Rect> + '_ {
        self.left_rects.iter().chain(self.right_rects.iter())
    }

    pub fn len(&self) -> usize {
        self.left_rects.len() + self.right_rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> Option<&Rect> {
        self.rects().nth(index)
    }

    /// `"left"` or `"right"` for a global patch index.
    pub fn lung_of(&self, index: usize) -> Option<&'static str> {
        if index < self.left_rects.len() {
            Some("left")
        } else if index < self.len() {
            Some("right")
        } else {
            None
        }
    }
}

// ---------------------------------------------------------------------------
// Connected components

/// Size and tight bounding box of one 8-connected component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Component {
    pub label: u32,
    pub area: usize,
    pub bbox: Rect,
}

/// Labels 8-connected components of `true` pixels. Labels start at 1 in raster-scan order of
/// each component's first pixel; background is 0.
pub fn label_components(mask: &Mask) -> (Vec<u32>, Vec<Component>) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        let label = comps.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0;
        while let Some(idx) = queue.pop_front() {
            let (x, y) = (idx % w, idx / w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let n = ny * w + nx;
                    if mask.bits[n] && labels[n] == 0 {
                        labels[n] = label;
                        queue.push_back(n);
                    }
                }
            }
        }
        comps.push(Component {
            label,
            area,
            bbox: Rect::from_edges(x0 as i32, y0 as i32, x1 as i32 + 1, y1 as i32 + 1),
        });
    }
    (labels, comps)
}

/// Components sorted by descending area; equal areas keep raster-scan order.
pub fn components_by_area(mask: &Mask) -> (Vec<u32>, Vec<Component>) {
    let (labels, mut comps) = label_components(mask);
    comps.sort_by(|a, b| b.area.cmp(&a.area).then(a.label.cmp(&b.label)));
    (labels, comps)
}

/// Tight boxes of the two largest components, returned as `(left, right)` by center x.
pub fn mask_to_lung_boxes(mask: &Mask) -> Result<(Rect, Rect), GridError> {
    let (_, comps) = components_by_area(mask);
    if comps.len() < 2 {
        return Err(GridError::InsufficientComponents { count: comps.len() });
    }
    let (a, b) = (comps[0].bbox, comps[1].bbox);
    if b.center().0 < a.center().0 {
        Ok((b, a))
    } else {
        Ok((a, b))
    }
}

// ---------------------------------------------------------------------------
// Grid construction

/// Integer `[start, end)` spans tiling `[0, extent)` with `count` overlapping segments.
fn axis_spans(extent: u32, count: u32, overlap: f64) -> Vec<(i32, i32)> {
    let extent_f = extent as f64;
    let n = count as f64;
    let size = extent_f / (n - (n - 1.0) * overlap);
    let stride = size * (1.0 - overlap);
    let mut spans: Vec<(i32, i32)> = (0..count)
        .map(|i| {
            let start = (i as f64 * stride).round() as i32;
            let end = (i as f64 * stride + size).round() as i32;
            (start, end)
        })
        .collect();
    spans[0].0 = 0;
    spans[count as usize - 1].1 = extent as i32;
    // rounding of nearly-equal reals must not open a gap between neighbours
    for i in 0..spans.len() - 1 {
        let next_start = spans[i + 1].0;
        if spans[i].1 < next_start {
            spans[i].1 = next_start;
        }
    }
    spans
}

fn lung_rects(bbox: Rect, spec: &GridSpec) -> Result<Vec<Rect>, GridError> {
    if bbox.w < spec.cols_per_lung || bbox.h < spec.rows_per_lung {
        return Err(GridError::InvalidBox {
            rect: bbox,
            reason: format!(
                "too small for {}x{} patches",
                spec.cols_per_lung, spec.rows_per_lung
            ),
        });
    }
    let xs = axis_spans(bbox.w, spec.cols_per_lung, spec.overlap_fraction);
    let ys = axis_spans(bbox.h, spec.rows_per_lung, spec.overlap_fraction);
    let mut rects = Vec::with_capacity(xs.len() * ys.len());
    for &(y0, y1) in &ys {
        for &(x0, x1) in &xs {
            rects.push(Rect::from_edges(
                bbox.x + x0,
                bbox.y + y0,
                bbox.x + x1,
                bbox.y + y1,
            ));
        }
    }
    if let Some(r) = rects.iter().find(|r| r.is_empty()) {
        return Err(GridError::InvalidBox {
            rect: bbox,
            reason: format!("produced empty patch {r:?}"),
        });
    }
    Ok(rects)
}

/// Builds the overlapping patch grid for both lungs.
pub fn build_grid(left: Rect, right: Rect, spec: GridSpec) -> Result<PatchGrid, GridError> {
    spec.validate()?;
    Ok(PatchGrid {
        left_rects: lung_rects(left, &spec)?,
        right_rects: lung_rects(right, &spec)?,
        spec,
    })
}

/// Whether `rects` jointly cover every pixel of `bbox`, by coordinate compression.
fn rects_cover(rects: &[Rect], bbox: &Rect) -> bool {
    if bbox.is_empty() {
        return true;
    }
    let clipped: Vec<Rect> = rects.iter().filter_map(|r| r.intersection(bbox)).collect();
    if clipped.is_empty() {
        return false;
    }
    let mut xs: Vec<i32> = vec![bbox.x, bbox.right()];
    let mut ys: Vec<i32> = vec![bbox.y, bbox.bottom()];
    for r in &clipped {
        xs.extend([r.x, r.right()]);
        ys.extend([r.y, r.bottom()]);
    }
    xs.sort_unstable();
    xs.dedup();
    ys.sort_unstable();
    ys.dedup();
    // each elementary cell is uniformly covered or not; probe its top-left pixel
    ys.windows(2).all(|yw| {
        xs.windows(2)
            .all(|xw| clipped.iter().any(|r| r.contains(xw[0], yw[0])))
    })
}

/// True iff every pixel of each lung box lies in at least one patch of that lung.
pub fn grid_union_covers(grid: &PatchGrid, left: Rect, right: Rect) -> bool {
    rects_cover(&grid.left_rects, &left) && rects_cover(&grid.right_rects, &right)
}
