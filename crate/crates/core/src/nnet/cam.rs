use serde::{Deserialize, Serialize};

use super::{NetError, TinyResNet};
use crate::imaging::{Image, Tensor};

/// Class activation map at input resolution, min-max scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Location of the first maximum in raster order.
    pub fn peak(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// 8-bit rendering (`0 → 0`, `1 → 255`).
    pub fn to_image(&self) -> Image {
        let data = self
            .values
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        Image::new(self.width, self.height, data).expect("heatmap dimensions are valid")
    }
}

/// Bilinear upsampling with pixel-center alignment and edge clamping.
fn upsample(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = map[y0 * w + x0] * (1.0 - tx) + map[y0 * w + x1] * tx;
            let bottom = map[y1 * w + x0] * (1.0 - tx) + map[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// `Σ_k weights[k]·features[k]`, upsampled to `out_h × out_w` and min-max normalized; a
/// constant map becomes all zeros.
pub fn cam_from_features(
    features: &[f64],
    channels: usize,
    fh: usize,
    fw: usize,
    weights: &[f64],
    out_h: usize,
    out_w: usize,
) -> Heatmap {
    let plane = fh * fw;
    let mut map = vec![0.0; plane];
    for (k, &wk) in weights.iter().enumerate().take(channels) {
        for (m, &f) in map.iter_mut().zip(&features[k * plane..(k + 1) * plane]) {
            *m += wk * f;
        }
    }
    let mut values = upsample(&map, fh, fw, out_h, out_w);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        values.fill(0.0);
    }
    Heatmap {
        width: out_w,
        height: out_h,
        values,
    }
}

/// Class activation map of `class` for one input patch.
pub fn cam(net: &TinyResNet, patch: &Tensor, class: usize) -> Result<Heatmap, NetError> {
    if class > 1 {
        return Err(NetError::InvalidInput(format!(
            "class {class} is not 0 or 1"
        )));
    }
    let trace = net.forward(patch)?;
    let k = net.feature_channels();
    Ok(cam_from_features(
        &trace.features,
        k,
        trace.out_height,
        trace.out_width,
        &net.head_weight[class * k..(class + 1) * k],
        patch.height,
        patch.width,
    ))
}
