//! Grayscale rasters, binary PGM I/O and patch preprocessing.
//!
//! Patches go through [`resize_pad`] (longer side scaled to the target, shorter side padded
//! evenly), then [`normalize`] into a [`Tensor`]. Training may additionally run [`augment`]
//! on the 8-bit patch first.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Scalar normalization defaults (red-channel ImageNet statistics applied to grayscale).
pub const DEFAULT_MEAN: f64 = 0.485;
pub const DEFAULT_STD: f64 = 0.229;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("not a binary PGM (expected magic P5)")]
    BadMagic,
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("unsupported PGM maxval {0} (only 255 is accepted)")]
    UnsupportedMaxval(u32),
    #[error("truncated pixel data: expected {expected} bytes, found {actual}")]
    TruncatedData { expected: usize, actual: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("png codec error: {0}")]
    Png(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> ImagingError {
    ImagingError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidInput(format!(
                "zero-dimension image {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(ImagingError::InvalidInput(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Image with every pixel set to `value`. Panics on a zero dimension.
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "zero-dimension image");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Copies out the sub-image `[x, x+w) × [y, y+h)`, which must lie inside the image.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image, ImagingError> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(ImagingError::InvalidInput(format!(
                "crop ({x},{y},{w},{h}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for row in y..y + h {
            let start = row * self.width + x;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Ok(Image {
            width: w,
            height: h,
            data,
        })
    }
}

/// Real-valued tensor, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn from_values(
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self, ImagingError> {
        if values.len() != channels * height * width {
            return Err(ImagingError::InvalidInput(format!(
                "tensor of {} values does not match {channels}x{height}x{width}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ImagingError::InvalidInput("non-finite tensor value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }
}

// ---------------------------------------------------------------------------
// PGM

/// Parses a binary (P5) PGM with maxval 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image, ImagingError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(ImagingError::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            let name = ["width", "height", "maxval"][i];
            return Err(ImagingError::MalformedHeader(format!("missing {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| ImagingError::MalformedHeader(format!("number out of range: {text}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(ImagingError::MalformedHeader(
                "expected single whitespace after maxval".into(),
            ))
        }
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(ImagingError::MalformedHeader(format!(
            "zero dimension {width}x{height}"
        )));
    }
    if maxval != 255 {
        return Err(ImagingError::UnsupportedMaxval(maxval));
    }
    let expected = width as usize * height as usize;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImagingError::TruncatedData {
            expected,
            actual: payload.len(),
        });
    }
    Image::new(
        width as usize,
        height as usize,
        payload[..expected].to_vec(),
    )
}

pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Image, ImagingError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_pgm(&bytes)
}

pub fn save_pgm(img: &Image, path: impl AsRef<Path>) -> Result<(), ImagingError> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&encode_pgm(img)).map_err(|e| io_err(path, e))
}

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Loads a PGM or PNG (converted to 8-bit luma), sniffing the format from the file content.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImagingError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.starts_with(PNG_MAGIC) {
        let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| ImagingError::Png(e.to_string()))?
            .into_luma8();
        let (w, h) = decoded.dimensions();
        Image::new(w as usize, h as usize, decoded.into_raw())
    } else {
        decode_pgm(&bytes)
    }
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>, ImagingError> {
    let mut out = std::io::Cursor::new(Vec::new());
    image::write_buffer_with_format(
        &mut out,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )
    .map_err(|e| ImagingError::Png(e.to_string()))?;
    Ok(out.into_inner())
}

// ---------------------------------------------------------------------------
// Sampling helpers

#[inline]
fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear sample at real coordinates with edge clamping.
#[inline]
fn sample_bilinear(img: &Image, x: f64, y: f64) -> f64 {
    let max_x = (img.width - 1) as f64;
    let max_y = (img.height - 1) as f64;
    let x = x.clamp(0.0, max_x);
    let y = y.clamp(0.0, max_y);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p00 = img.get(x0, y0) as f64;
    let p10 = img.get(x1, y0) as f64;
    let p01 = img.get(x0, y1) as f64;
    let p11 = img.get(x1, y1) as f64;
    let top = p00 + (p10 - p00) * fx;
    let bottom = p01 + (p11 - p01) * fx;
    top + (bottom - top) * fy
}

/// Bilinear resize to exactly `new_w × new_h` using pixel-center alignment.
pub fn resize_bilinear(img: &Image, new_w: usize, new_h: usize) -> Result<Image, ImagingError> {
    if new_w == 0 || new_h == 0 {
        return Err(ImagingError::InvalidInput("zero target size".into()));
    }
    if new_w == img.width && new_h == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / new_w as f64;
    let sy = img.height as f64 / new_h as f64;
    let mut data = Vec::with_capacity(new_w * new_h);
    for y in 0..new_h {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..new_w {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            data.push(to_u8(sample_bilinear(img, src_x, src_y)));
        }
    }
    Image::new(new_w, new_h, data)
}

/// Placement of a resized patch inside its padded square canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PadLayout {
    /// Scale factor applied to both axes.
    pub scale: f64,
    pub scaled_w: usize,
    pub scaled_h: usize,
    pub pad_left: usize,
    pub pad_top: usize,
}

impl PadLayout {
    pub fn compute(width: usize, height: usize, target: usize) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidInput(format!(
                "zero-dimension image {width}x{height}"
            )));
        }
        if target == 0 {
            return Err(ImagingError::InvalidConfig(
                "resize target must be > 0".into(),
            ));
        }
        let longer = width.max(height);
        let scale = target as f64 / longer as f64;
        let (scaled_w, scaled_h) = if width >= height {
            (
                target,
                ((height as f64 * scale).round() as usize).clamp(1, target),
            )
        } else {
            (
                ((width as f64 * scale).round() as usize).clamp(1, target),
                target,
            )
        };
        Ok(Self {
            scale,
            scaled_w,
            scaled_h,
            pad_left: (target - scaled_w) / 2,
            pad_top: (target - scaled_h) / 2,
        })
    }
}

/// Resizes so the longer side equals `target`, keeping the aspect ratio, then pads the shorter
/// side with `pad_value` to a `target × target` square. Odd padding puts the extra pixel on the
/// bottom/right.
pub fn resize_pad(img: &Image, target: usize, pad_value: u8) -> Result<Image, ImagingError> {
    let layout = PadLayout::compute(img.width, img.height, target)?;
    let scaled = resize_bilinear(img, layout.scaled_w, layout.scaled_h)?;
    if layout.scaled_w == target && layout.scaled_h == target {
        return Ok(scaled);
    }
    let mut out = Image::filled(target, target, pad_value);
    for y in 0..layout.scaled_h {
        let dst = (y + layout.pad_top) * target + layout.pad_left;
        out.data[dst..dst + layout.scaled_w]
            .copy_from_slice(&scaled.data[y * layout.scaled_w..(y + 1) * layout.scaled_w]);
    }
    Ok(out)
}

/// `(pixel/255 − mean)/std` as a single-channel tensor.
pub fn normalize(img: &Image, mean: f64, std: f64) -> Result<Tensor, ImagingError> {
    if !(std > 0.0) || !std.is_finite() {
        return Err(ImagingError::InvalidConfig(format!(
            "normalization std must be positive, got {std}"
        )));
    }
    if !mean.is_finite() {
        return Err(ImagingError::InvalidConfig(format!(
            "normalization mean must be finite, got {mean}"
        )));
    }
    let values = img
        .data
        .iter()
        .map(|&p| (p as f64 / 255.0 - mean) / std)
        .collect();
    Ok(Tensor {
        channels: 1,
        height: img.height,
        width: img.width,
        values,
    })
}

// ---------------------------------------------------------------------------
// Augmentation

/// Photometric and geometric jitter applied to a training patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Additive intensity shift in `[-64, 64]`.
    pub brightness_delta: i32,
    /// Contrast gain about mid-gray in `[0.5, 2.0]`.
    pub contrast_factor: f64,
    pub hflip: bool,
    /// Rotation about the image center in `[-15, 15]` degrees.
    pub rotation_deg: f64,
    /// Seed the parameters were drawn from; recorded for reproducibility.
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl AugmentParams {
    pub const BRIGHTNESS_RANGE: (i32, i32) = (-64, 64);
    pub const CONTRAST_RANGE: (f64, f64) = (0.5, 2.0);
    pub const ROTATION_RANGE: (f64, f64) = (-15.0, 15.0);

    pub fn identity() -> Self {
        Self {
            brightness_delta: 0,
            contrast_factor: 1.0,
            hflip: false,
            rotation_deg: 0.0,
            seed: 0,
        }
    }

    /// Draws mild jitter (brightness ±16, contrast 0.8..1.25, rotation ±10°, coin-flip hflip).
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            brightness_delta: rng.random_range(-16..=16),
            contrast_factor: rng.random_range(0.8..=1.25),
            hflip: rng.random_bool(0.5),
            rotation_deg: rng.random_range(-10.0..=10.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        let (bmin, bmax) = Self::BRIGHTNESS_RANGE;
        let (cmin, cmax) = Self::CONTRAST_RANGE;
        let (rmin, rmax) = Self::ROTATION_RANGE;
        if !(bmin..=bmax).contains(&self.brightness_delta) {
            return Err(ImagingError::InvalidConfig(format!(
                "brightness_delta {} outside [{bmin}, {bmax}]",
                self.brightness_delta
            )));
        }
        if !(cmin..=cmax).contains(&self.contrast_factor) {
            return Err(ImagingError::InvalidConfig(format!(
                "contrast_factor {} outside [{cmin}, {cmax}]",
                self.contrast_factor
            )));
        }
        if !(rmin..=rmax).contains(&self.rotation_deg) {
            return Err(ImagingError::InvalidConfig(format!(
                "rotation_deg {} outside [{rmin}, {rmax}]",
                self.rotation_deg
            )));
        }
        Ok(())
    }
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for row in out.data.chunks_exact_mut(img.width) {
        row.reverse();
    }
    out
}

/// Rotates about the image center; samples falling outside the source are `pad_value`.
pub fn rotate(img: &Image, degrees: f64, pad_value: u8) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let max_x = (img.width - 1) as f64;
    let max_y = (img.height - 1) as f64;
    let mut out = Image::filled(img.width, img.height, pad_value);
    for y in 0..img.height {
        let dy = y as f64 - cy;
        for x in 0..img.width {
            let dx = x as f64 - cx;
            // inverse map: destination → source
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            if sx < -1e-9 || sy < -1e-9 || sx > max_x + 1e-9 || sy > max_y + 1e-9 {
                continue;
            }
            out.set(x, y, to_u8(sample_bilinear(img, sx, sy)));
        }
    }
    out
}

/// Applies contrast, brightness, horizontal flip and rotation, in that order.
pub fn augment(img: &Image, p: &AugmentParams) -> Result<Image, ImagingError> {
    p.validate()?;
    let mut out = img.clone();
    if p.contrast_factor != 1.0 || p.brightness_delta != 0 {
        for v in out.data.iter_mut() {
            let c = to_u8(128.0 + p.contrast_factor * (*v as f64 - 128.0));
            *v = (c as i32 + p.brightness_delta).clamp(0, 255) as u8;
        }
    }
    if p.hflip {
        out = hflip(&out);
    }
    Ok(rotate(&out, p.rotation_deg, 0))
}
