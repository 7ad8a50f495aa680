//! Convolution with explicit forward/backward passes over channel-major `f64` planes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

thread_local! {
    // im2col scratch, reused across calls
    static COL: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Square-kernel 2-D convolution with bias. Weights are laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-normal weights, zero bias.
    pub fn he_init<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, stride, padding);
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        for w in conv.weight.iter_mut() {
            *w = normal.sample(rng);
        }
        conv
    }

    pub fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Output positions `[lo, hi)` along one axis whose tap `k` lands inside `[0, n)`.
    #[inline]
    fn valid_range(&self, k: usize, n: usize, out_n: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let k = k as isize;
        // need 0 <= o*s + k - p <= n-1
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        let hi_incl = (n as isize - 1 + p - k).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, out_n as isize);
        (lo.min(hi) as usize, hi as usize)
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfolds `input` into a `(in·k·k) × (oh·ow)` matrix of receptive fields; taps that fall
    /// in the zero padding stay 0.
    fn im2col(&self, input: &[f64], h: usize, w: usize, oh: usize, ow: usize, col: &mut Vec<f64>) {
        let plane = oh * ow;
        col.clear();
        col.resize(self.patch_len() * plane, 0.0);
        let (s, p, k) = (self.stride, self.padding, self.kernel);
        for ic in 0..self.in_channels {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = self.valid_range(ky, h, oh);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = self.valid_range(kx, w, ow);
                    let row = (ic * k + ky) * k + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in oy_lo..oy_hi {
                        let src = &in_plane[(oy * s + ky - p) * w..];
                        let d = &mut dst[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let ix0 = ox_lo + kx - p;
                            d[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + ox_hi - ox_lo]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                d[ox] = src[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adds the folded-back columns into `grad_input` (inverse of [`Self::im2col`]).
    fn col2im_add(
        &self,
        col: &[f64],
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
        grad_input: &mut [f64],
    ) {
        let plane = oh * ow;
        let (s, p, k) = (self.stride, self.padding, self.kernel);
        for ic in 0..self.in_channels {
            let gi = &mut grad_input[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = self.valid_range(ky, h, oh);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = self.valid_range(kx, w, ow);
                    let row = (ic * k + ky) * k + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in oy_lo..oy_hi {
                        let dst = &mut gi[(oy * s + ky - p) * w..];
                        let c = &src[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let ix0 = ox_lo + kx - p;
                            for (d, v) in dst[ix0..ix0 + ox_hi - ox_lo]
                                .iter_mut()
                                .zip(&c[ox_lo..ox_hi])
                            {
                                *d += v;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst[ox * s + kx - p] += c[ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Convolves `input` (`in_channels × h × w`) into `out`, returning the output size.
    pub fn forward(&self, input: &[f64], h: usize, w: usize, out: &mut Vec<f64>) -> (usize, usize) {
        debug_assert_eq!(input.len(), self.in_channels * h * w);
        let (oh, ow) = (self.out_dim(h), self.out_dim(w));
        let plane = oh * ow;
        out.clear();
        out.reserve(self.out_channels * plane);
        for &b in &self.bias {
            out.extend(std::iter::repeat_n(b, plane));
        }
        let kk = self.patch_len();
        COL.with_borrow_mut(|col| {
            self.im2col(input, h, w, oh, ow, col);
            // out[oc, :] += W[oc, :] · col
            unsafe {
                matrixmultiply::dgemm(
                    self.out_channels,
                    kk,
                    plane,
                    1.0,
                    self.weight.as_ptr(),
                    kk as isize,
                    1,
                    col.as_ptr(),
                    plane as isize,
                    1,
                    1.0,
                    out.as_mut_ptr(),
                    plane as isize,
                    1,
                );
            }
        });
        (oh, ow)
    }

    /// Accumulates parameter gradients into `grad` and, when requested, the input gradient
    /// into `grad_input` (which must be zeroed or hold a partial sum).
    pub fn backward(
        &self,
        input: &[f64],
        h: usize,
        w: usize,
        grad_out: &[f64],
        grad: &mut Conv2d,
        grad_input: Option<&mut [f64]>,
    ) {
        let (oh, ow) = (self.out_dim(h), self.out_dim(w));
        let plane = oh * ow;
        assert_eq!(grad_out.len(), self.out_channels * plane);
        assert_eq!(grad.weight.len(), self.weight.len());
        for (oc, gb) in grad.bias.iter_mut().enumerate() {
            *gb += grad_out[oc * plane..(oc + 1) * plane].iter().sum::<f64>();
        }
        let kk = self.patch_len();
        COL.with_borrow_mut(|col| {
            self.im2col(input, h, w, oh, ow, col);
            // dW += G · colᵀ
            unsafe {
                matrixmultiply::dgemm(
                    self.out_channels,
                    plane,
                    kk,
                    1.0,
                    grad_out.as_ptr(),
                    plane as isize,
                    1,
                    col.as_ptr(),
                    1,
                    plane as isize,
                    1.0,
                    grad.weight.as_mut_ptr(),
                    kk as isize,
                    1,
                );
            }
        });
        if let Some(gi) = grad_input {
            assert_eq!(gi.len(), self.in_channels * h * w);
            COL.with_borrow_mut(|dcol| {
                dcol.clear();
                dcol.resize(kk * plane, 0.0);
                // dcol = Wᵀ · G
                unsafe {
                    matrixmultiply::dgemm(
                        kk,
                        self.out_channels,
                        plane,
                        1.0,
                        self.weight.as_ptr(),
                        1,
                        kk as isize,
                        grad_out.as_ptr(),
                        plane as isize,
                        1,
                        0.0,
                        dcol.as_mut_ptr(),
                        plane as isize,
                        1,
                    );
                }
                self.col2im_add(dcol, h, w, oh, ow, gi);
            });
        }
    }
}

#[inline]
pub fn relu_in_place(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes gradient entries where the activation was not positive.
#[inline]
pub fn relu_mask_grad(activation: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}
