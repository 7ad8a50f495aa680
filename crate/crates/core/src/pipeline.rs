//! End-to-end glue: case image → lung mask → grid → square patches with labels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imaging::{load_image, Image, PadLayout};
use crate::labels::{assign_patch_labels, CaseRecord, LabelMode, PatchLabelVector, Split};
use crate::lunggrid::{build_grid, mask_to_lung_boxes, GridSpec, Mask, PatchGrid, Rect};
use crate::nnet::{call, cam, Heatmap, PatchSet, Preprocess, TinyResNet, POSITIVE};
use crate::segbaseline::{load_mask, segment_lungs, SegConfig};

/// Placement of one patch, as written to geometry sidecars.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub patch_index: usize,
    pub x: i32,
    pub y: i32,
    pub w: u32,
    pub h: u32,
    pub lung: String,
}

/// Box in square-patch pixel-edge coordinates: `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PatchBox {
    /// True when the center of pixel `(px, py)` falls inside the box.
    pub fn contains_pixel(&self, px: usize, py: usize) -> bool {
        let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
        cx >= self.x0 && cx <= self.x1 && cy >= self.y0 && cy <= self.y1
    }
}

/// Maps the part of `rect` inside `patch` (both in image coordinates) into the square patch
/// produced by resize-and-pad. `None` if they do not overlap.
pub fn map_box_to_patch(rect: &Rect, patch: &Rect, layout: &PadLayout) -> Option<PatchBox> {
    let inter = rect.intersection(patch)?;
    let sx = layout.scaled_w as f64 / patch.w as f64;
    let sy = layout.scaled_h as f64 / patch.h as f64;
    let (px, py) = (layout.pad_left as f64, layout.pad_top as f64);
    Some(PatchBox {
        x0: px + (inter.x - patch.x) as f64 * sx,
        y0: py + (inter.y - patch.y) as f64 * sy,
        x1: px + (inter.right() - patch.x) as f64 * sx,
        y1: py + (inter.bottom() - patch.y) as f64 * sy,
    })
}

/// Lung mask for a case: the manifest mask when present, otherwise the baseline segmenter.
pub fn case_mask(case: &CaseRecord, base: &Path, image: &Image, seg: &SegConfig) -> Result<Mask> {
    match &case.mask_path {
        Some(p) => Ok(load_mask(
            CaseRecord::resolve(base, p),
            (image.width(), image.height()),
        )?),
        None => Ok(segment_lungs(image, seg)?),
    }
}

pub fn grid_for_mask(mask: &Mask, spec: GridSpec) -> Result<PatchGrid> {
    let (left, right) = mask_to_lung_boxes(mask)?;
    Ok(build_grid(left, right, spec)?)
}

pub fn geometry(grid: &PatchGrid) -> Vec<PatchGeometry> {
    grid.rects()
        .enumerate()
        .map(|(i, r)| PatchGeometry {
            patch_index: i,
            x: r.x,
            y: r.y,
            w: r.w,
            h: r.h,
            lung: grid.lung_of(i).unwrap_or("left").into(),
        })
        .collect()
}

/// Crops every grid rectangle from the image.
pub fn crop_patches(image: &Image, grid: &PatchGrid) -> Result<Vec<Image>> {
    grid.rects()
        .map(|r| Ok(image.crop(r.x as usize, r.y as usize, r.w as usize, r.h as usize)?))
        .collect()
}

/// One case cut into square network-ready patches.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub case_id: String,
    pub split: Split,
    pub difficult: bool,
    pub grid: PatchGrid,
    pub squares: Vec<Image>,
    pub labels: PatchLabelVector,
    /// Nodule boxes mapped into each square patch.
    pub nodule_boxes: Vec<Vec<PatchBox>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PrepareOptions {
    pub grid: GridSpec,
    pub label_mode: LabelMode,
    pub preprocess: Preprocess,
    pub seg: SegConfig,
}

/// Runs mask → grid → crop → square → label for an in-memory image.
pub fn prepare_image(
    case: &CaseRecord,
    image: &Image,
    mask: &Mask,
    opts: &PrepareOptions,
) -> Result<PreparedCase> {
    let grid = grid_for_mask(mask, opts.grid)?;
    let labels = assign_patch_labels(&grid, &case.nodules, opts.label_mode)?;
    let size = opts.preprocess.patch_size;
    let mut squares = Vec::with_capacity(grid.len());
    let mut nodule_boxes = Vec::with_capacity(grid.len());
    for (crop, rect) in crop_patches(image, &grid)?.iter().zip(grid.rects()) {
        squares.push(opts.preprocess.square(crop)?);
        let layout = PadLayout::compute(crop.width(), crop.height(), size)?;
        nodule_boxes.push(
            case.nodules
                .iter()
                .filter_map(|n| map_box_to_patch(&n.rect, rect, &layout))
                .collect(),
        );
    }
    Ok(PreparedCase {
        case_id: case.case_id.clone(),
        split: case.split,
        difficult: case.difficult,
        grid,
        squares,
        labels,
        nodule_boxes,
    })
}

/// Loads a case from disk (paths relative to `base`) and prepares it.
pub fn prepare_case(case: &CaseRecord, base: &Path, opts: &PrepareOptions) -> Result<PreparedCase> {
    let image = load_image(CaseRecord::resolve(base, &case.image_path))?;
    let mask = case_mask(case, base, &image, &opts.seg)?;
    prepare_image(case, &image, &mask, opts)
}

/// Patches of all cases in `split`.
pub fn patch_set(cases: &[PreparedCase], split: Split) -> PatchSet {
    let mut set = PatchSet::default();
    for c in cases.iter().filter(|c| c.split == split) {
        for (img, &label) in c.squares.iter().zip(&c.labels.0) {
            set.push(img.clone(), label);
        }
    }
    set
}

/// Positive-class probability of every grid patch, in patch order.
pub fn score_patches(
    net: &TinyResNet,
    image: &Image,
    grid: &PatchGrid,
    preprocess: &Preprocess,
) -> Result<Vec<f64>> {
    crop_patches(image, grid)?
        .iter()
        .map(|crop| {
            let x = preprocess.apply(crop)?;
            Ok(call(net.forward(&x)?.logits, 0.5).0)
        })
        .collect()
}

/// Positive-class activation map of patch `index`, at square-patch resolution.
pub fn patch_cam(
    net: &TinyResNet,
    image: &Image,
    grid: &PatchGrid,
    index: usize,
    preprocess: &Preprocess,
) -> Result<Heatmap> {
    let r = grid.rects().nth(index).ok_or_else(|| {
        crate::nnet::NetError::InvalidInput(format!(
            "patch {index} out of range for {}-patch grid",
            grid.len()
        ))
    })?;
    let crop = image.crop(r.x as usize, r.y as usize, r.w as usize, r.h as usize)?;
    Ok(cam(net, &preprocess.apply(&crop)?, POSITIVE)?)
}
