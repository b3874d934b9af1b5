//! 3D convolution and pooling kernels over `[C, T, H, W]` buffers.
//!
//! These are the raw numeric routines; [`crate::graph`] wraps them with
//! gradient bookkeeping.

use crate::error::{Error, Result};

const AXES: [&str; 3] = ["time", "height", "width"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; padding split evenly, odd cell trailing.
    Same,
    Valid,
}

/// Filter bank description `C x (T x H x W)` plus stride and padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<Self> {
        if out_channels == 0 {
            return Err(Error::invalid("conv spec", "out_channels must be >= 1"));
        }
        for a in 0..3 {
            if kernel[a] == 0 {
                return Err(Error::invalid("conv spec", format!("{} kernel extent is 0", AXES[a])));
            }
            if stride[a] == 0 {
                return Err(Error::invalid("conv spec", format!("{} stride is 0", AXES[a])));
            }
        }
        Ok(ConvSpec {
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    /// `C x (1 x 3 x 3)` with spatial stride `s`.
    pub fn spatial(out_channels: usize, s: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel: [1, 3, 3],
            stride: [1, s, s],
            padding: Padding::Same,
        }
    }

    /// `C x (3 x 1 x 1)`.
    pub fn temporal(out_channels: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel: [3, 1, 1],
            stride: [1, 1, 1],
            padding: Padding::Same,
        }
    }

    /// `C x (1 x 1 x 1)`.
    pub fn pointwise(out_channels: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel: [1, 1, 1],
            stride: [1, 1, 1],
            padding: Padding::Same,
        }
    }

    pub fn weight_shape(&self, in_channels: usize) -> [usize; 5] {
        let [t, h, w] = self.kernel;
        [self.out_channels, in_channels, t, h, w]
    }

    pub fn is_separable_spatial(&self) -> bool {
        self.kernel[0] == 1
    }

    pub fn is_separable_temporal(&self) -> bool {
        self.kernel[1] == 1 && self.kernel[2] == 1
    }

    pub fn geometry(&self, in_dims: [usize; 4]) -> Result<ConvGeometry> {
        let [c_in, t, h, w] = in_dims;
        let input = [t, h, w];
        let mut out = [0; 3];
        let mut pad = [0; 3];
        for a in 0..3 {
            let (k, s, n) = (self.kernel[a], self.stride[a], input[a]);
            if n == 0 {
                return Err(Error::invalid("conv3d", format!("{} extent is 0", AXES[a])));
            }
            match self.padding {
                Padding::Same => {
                    out[a] = n.div_ceil(s);
                    let total = ((out[a] - 1) * s + k).saturating_sub(n);
                    pad[a] = total / 2;
                }
                Padding::Valid => {
                    if n < k {
                        return Err(Error::shape("conv3d", AXES[a], k, n));
                    }
                    out[a] = (n - k) / s + 1;
                }
            }
        }
        Ok(ConvGeometry {
            c_in,
            c_out: self.out_channels,
            input,
            kernel: self.kernel,
            stride: self.stride,
            pad,
            output: out,
        })
    }
}

/// Fully resolved convolution shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    /// Leading-side padding per axis.
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

/// Output indices `o` in `[lo, hi)` whose tap `o*s + k - p` lands inside `[0, n)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let reach = in_len + p;
    if reach <= k {
        return (0, 0);
    }
    let hi = ((reach - 1 - k) / s + 1).min(out_len);
    (lo.min(hi), hi)
}

impl ConvGeometry {
    pub fn input_len(&self) -> usize {
        self.c_in * self.input.iter().product::<usize>()
    }

    pub fn output_len(&self) -> usize {
        self.c_out * self.output.iter().product::<usize>()
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel.iter().product::<usize>()
    }

    pub fn output_dims(&self) -> [usize; 4] {
        [self.c_out, self.output[0], self.output[1], self.output[2]]
    }

    /// Multiply-accumulates of one forward pass (padding taps excluded).
    pub fn macs(&self) -> u64 {
        let mut per_pair = 0u64;
        self.visit_taps(|_, _, _, len| per_pair += len as u64);
        per_pair * (self.c_in * self.c_out) as u64
    }

    /// Calls `f(tap, out_row, in_row, len)` for every kernel tap and output row that
    /// overlaps the input; `tap` indexes the flattened `(kt, kh, kw)` kernel, rows are
    /// offsets within a single channel plane, and `len` counts contiguous output cells.
    #[inline]
    fn visit_taps(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [ti, hi, wi] = self.input;
        let [to, ho, wo] = self.output;
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.pad;
        for a in 0..kt {
            let (t_lo, t_hi) = valid_range(to, ti, st, a, pt);
            for b in 0..kh {
                let (h_lo, h_hi) = valid_range(ho, hi, sh, b, ph);
                for c in 0..kw {
                    let (w_lo, w_hi) = valid_range(wo, wi, sw, c, pw);
                    if w_lo >= w_hi {
                        continue;
                    }
                    let tap = (a * kh + b) * kw + c;
                    let iw0 = w_lo * sw + c - pw;
                    for ot in t_lo..t_hi {
                        let it = ot * st + a - pt;
                        for oh in h_lo..h_hi {
                            let ih = oh * sh + b - ph;
                            f(
                                tap,
                                (ot * ho + oh) * wo + w_lo,
                                (it * hi + ih) * wi + iw0,
                                w_hi - w_lo,
                            );
                        }
                    }
                }
            }
        }
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Unfolds the input into a `(c_in * taps) x positions` matrix.
    fn im2col(&self, input: &[f32]) -> Vec<f32> {
        let in_plane: usize = self.input.iter().product();
        let (p, taps, sw) = (self.positions(), self.taps(), self.stride[2]);
        let mut col = vec![0.0f32; self.c_in * taps * p];
        for ci in 0..self.c_in {
            let ic = &input[ci * in_plane..(ci + 1) * in_plane];
            let block = &mut col[ci * taps * p..(ci + 1) * taps * p];
            self.visit_taps(|tap, o, i, len| {
                let row = &mut block[tap * p + o..tap * p + o + len];
                if sw == 1 {
                    row.copy_from_slice(&ic[i..i + len]);
                } else {
                    for (j, y) in row.iter_mut().enumerate() {
                        *y = ic[i + j * sw];
                    }
                }
            });
        }
        col
    }

    /// Adjoint of [`Self::im2col`].
    fn col2im(&self, col: &[f32]) -> Vec<f32> {
        let in_plane: usize = self.input.iter().product();
        let (p, taps, sw) = (self.positions(), self.taps(), self.stride[2]);
        let mut gin = vec![0.0f32; self.input_len()];
        for (ci, gc) in gin.chunks_exact_mut(in_plane).enumerate() {
            let block = &col[ci * taps * p..(ci + 1) * taps * p];
            self.visit_taps(|tap, o, i, len| {
                let row = &block[tap * p + o..tap * p + o + len];
                if sw == 1 {
                    for (x, g) in gc[i..i + len].iter_mut().zip(row) {
                        *x += g;
                    }
                } else {
                    for (j, g) in row.iter().enumerate() {
                        gc[i + j * sw] += g;
                    }
                }
            });
        }
        gin
    }

    fn is_identity_unfold(&self) -> bool {
        self.taps() == 1 && self.stride == [1, 1, 1] && self.input == self.output
    }

    fn unfolded<'a>(&self, input: &'a [f32]) -> std::borrow::Cow<'a, [f32]> {
        if self.is_identity_unfold() {
            std::borrow::Cow::Borrowed(input)
        } else {
            std::borrow::Cow::Owned(self.im2col(input))
        }
    }

    pub fn forward(&self, input: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
        debug_assert_eq!(input.len(), self.input_len());
        debug_assert_eq!(weight.len(), self.weight_len());
        let (p, k) = (self.positions(), self.c_in * self.taps());
        let col = self.unfolded(input);
        let mut out = vec![0.0f32; self.output_len()];
        if let Some(b) = bias {
            for (oc, &bv) in out.chunks_exact_mut(p).zip(b) {
                oc.fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        sgemm(self.c_out, k, p, weight, (k, 1), &col, (p, 1), beta, &mut out);
        out
    }

    pub fn backward_input(&self, weight: &[f32], grad_out: &[f32]) -> Vec<f32> {
        let (p, k) = (self.positions(), self.c_in * self.taps());
        let mut gcol = vec![0.0f32; k * p];
        sgemm(k, self.c_out, p, weight, (1, k), grad_out, (p, 1), 0.0, &mut gcol);
        if self.is_identity_unfold() {
            gcol
        } else {
            self.col2im(&gcol)
        }
    }

    pub fn backward_weight(&self, input: &[f32], grad_out: &[f32]) -> Vec<f32> {
        let (p, k) = (self.positions(), self.c_in * self.taps());
        let col = self.unfolded(input);
        let mut gw = vec![0.0f32; self.weight_len()];
        sgemm(self.c_out, p, k, grad_out, (p, 1), &col, (1, p), 0.0, &mut gw);
        gw
    }

    pub fn backward_bias(&self, grad_out: &[f32]) -> Vec<f32> {
        let out_plane: usize = self.output.iter().product();
        grad_out
            .chunks_exact(out_plane)
            .map(|c| c.iter().sum())
            .collect()
    }
}

/// `c = a * b + beta * c` for row-major `c` of shape `m x n`; `a` is `m x k`
/// and `b` is `k x n`, both given with (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(c.len() >= m * n && a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the asserts above bound every index the kernel touches for the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unpadded average pooling geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub input: [usize; 3],
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
}

impl PoolGeometry {
    pub fn new(in_dims: [usize; 4], window: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        let [c, t, h, w] = in_dims;
        let input = [t, h, w];
        let mut output = [0; 3];
        for a in 0..3 {
            if window[a] == 0 {
                return Err(Error::invalid("avg_pool3d", format!("{} window is 0", AXES[a])));
            }
            if stride[a] == 0 {
                return Err(Error::invalid("avg_pool3d", format!("{} stride is 0", AXES[a])));
            }
            if window[a] > input[a] {
                return Err(Error::shape("avg_pool3d", AXES[a], window[a], input[a]));
            }
            output[a] = (input[a] - window[a]) / stride[a] + 1;
        }
        Ok(PoolGeometry {
            channels: c,
            input,
            window,
            stride,
            output,
        })
    }

    pub fn output_dims(&self) -> [usize; 4] {
        [self.channels, self.output[0], self.output[1], self.output[2]]
    }

    fn visit(&self, mut f: impl FnMut(usize, usize)) {
        let [ti, hi, wi] = self.input;
        let [to, ho, wo] = self.output;
        for c in 0..self.channels {
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let o = ((c * to + ot) * ho + oh) * wo + ow;
                        for a in 0..self.window[0] {
                            let it = ot * self.stride[0] + a;
                            for b in 0..self.window[1] {
                                let ih = oh * self.stride[1] + b;
                                let row = ((c * ti + it) * hi + ih) * wi + ow * self.stride[2];
                                for k in 0..self.window[2] {
                                    f(o, row + k);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn inv_count(&self) -> f32 {
        1.0 / self.window.iter().product::<usize>() as f32
    }

    pub fn forward(&self, input: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.channels * self.output.iter().product::<usize>()];
        self.visit(|o, i| out[o] += input[i]);
        let s = self.inv_count();
        out.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn backward(&self, grad_out: &[f32]) -> Vec<f32> {
        let mut gin = vec![0.0; self.channels * self.input.iter().product::<usize>()];
        let s = self.inv_count();
        self.visit(|o, i| gin[i] += grad_out[o] * s);
        gin
    }
}
