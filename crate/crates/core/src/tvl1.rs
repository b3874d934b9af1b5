//! Duality-based TV-L1 optical flow on a coarse-to-fine pyramid.
//!
//! Solver intensities are `[0, 1]` at the API and rescaled to `[0, 255]`
//! internally, which is the range the customary parameter defaults
//! (`lambda 0.15, theta 0.3`) are calibrated for.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow_repr::{dims2, read_header};
use crate::tensor::Tensor;

pub const FLO_MAGIC: f32 = 202021.25;
const GRAD_IS_ZERO: f32 = 1e-10;
const INTENSITY_SCALE: f32 = 255.0;
/// Grayscale weights for R, G, B.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Per-pixel displacement: `u` rightward, `v` downward, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub u: Tensor,
    pub v: Tensor,
}

impl FlowField {
    pub fn new(u: Tensor, v: Tensor) -> Result<Self> {
        let [h, w] = dims2(&u)?;
        let [hv, wv] = dims2(&v)?;
        if h != hv {
            return Err(Error::shape("FlowField", "height", h, hv));
        }
        if w != wv {
            return Err(Error::shape("FlowField", "width", w, wv));
        }
        Ok(FlowField { u, v })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            u: Tensor::zeros(&[h, w]),
            v: Tensor::zeros(&[h, w]),
        }
    }

    pub fn constant(h: usize, w: usize, u: f32, v: f32) -> Self {
        FlowField {
            u: Tensor::full(&[h, w], u),
            v: Tensor::full(&[h, w], v),
        }
    }

    pub fn height(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn mean_magnitude(&self) -> f64 {
        let s: f64 = self
            .u
            .data()
            .iter()
            .zip(self.v.data())
            .map(|(&a, &b)| ((a as f64).powi(2) + (b as f64).powi(2)).sqrt())
            .sum();
        s / self.u.len() as f64
    }

    /// Middlebury `.flo`: magic, width, height, interleaved `(u, v)` rows, little-endian.
    pub fn write_flo(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut buf = Vec::with_capacity(12 + 8 * h * w);
        buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        buf.extend_from_slice(&(w as i32).to_le_bytes());
        buf.extend_from_slice(&(h as i32).to_le_bytes());
        for (u, v) in self.u.data().iter().zip(self.v.data()) {
            buf.extend_from_slice(&u.to_le_bytes());
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read_flo(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let (magic, w, h, body) = read_header(&bytes, "flo file")?;
        if magic != FLO_MAGIC {
            return Err(Error::format("flo file", format!("bad magic {magic}")));
        }
        if body.len() != 8 * w * h {
            return Err(Error::format("flo file", format!("expected {} body bytes, found {}", 8 * w * h, body.len())));
        }
        let vals: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let u = vals.iter().step_by(2).copied().collect();
        let v = vals.iter().skip(1).step_by(2).copied().collect();
        FlowField::new(Tensor::new(vec![h, w], u)?, Tensor::new(vec![h, w], v)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TVL1Params {
    /// Weight of the L1 data term.
    pub lambda_data: f32,
    /// Coupling between the TV and data sub-problems.
    pub theta_coupling: f32,
    /// Dual step; at most 1/8 for the 4-neighbour divergence.
    pub tau_step: f32,
    pub warps: usize,
    pub inner_iterations: usize,
    pub levels: usize,
    pub scale: f32,
    /// 3x3 median filter on the flow after every warp.
    pub median_filter: bool,
}

impl Default for TVL1Params {
    fn default() -> Self {
        TVL1Params {
            lambda_data: 0.15,
            theta_coupling: 0.3,
            tau_step: 0.125,
            warps: 5,
            inner_iterations: 25,
            levels: 3,
            scale: 0.5,
            median_filter: true,
        }
    }
}

impl TVL1Params {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau_step > 0.0 && self.tau_step <= 0.125) {
            return bad(format!("tau_step {} outside (0, 0.125]", self.tau_step));
        }
        if !(self.scale > 0.0 && self.scale < 1.0) {
            return bad(format!("pyramid scale {} outside (0, 1)", self.scale));
        }
        if self.levels == 0 || self.warps == 0 || self.inner_iterations == 0 {
            return bad("levels, warps and inner_iterations must be >= 1".into());
        }
        if !(self.lambda_data > 0.0 && self.theta_coupling > 0.0) {
            return bad("lambda_data and theta_coupling must be positive".into());
        }
        Ok(())
    }

    /// Smallest accepted image extent: two cells of the coarsest level.
    pub fn min_extent(&self) -> usize {
        let cell = (1.0 / self.scale).powi(self.levels as i32 - 1).ceil() as usize;
        2 * cell
    }
}

#[derive(Clone, Debug)]
struct Img {
    w: usize,
    h: usize,
    d: Vec<f32>,
}

impl Img {
    fn new(w: usize, h: usize) -> Self {
        Img { w, h, d: vec![0.0; w * h] }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.d[y * self.w + x]
    }

    /// Bilinear sample with coordinates clamped to the border.
    #[inline]
    fn sample(&self, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.w - 1) as f32);
        let y = y.clamp(0.0, (self.h - 1) as f32);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let (fx, fy) = (x - x0 as f32, y - y0 as f32);
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bot = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    fn gaussian_blur(&self, sigma: f32) -> Img {
        if sigma <= 0.0 {
            return self.clone();
        }
        let r = (3.0 * sigma).ceil() as isize;
        let k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
        let s: f32 = k.iter().sum();
        let k: Vec<f32> = k.iter().map(|v| v / s).collect();
        let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
        let mut tmp = Img::new(self.w, self.h);
        for y in 0..self.h {
            for x in 0..self.w {
                tmp.d[y * self.w + x] = (-r..=r)
                    .map(|i| k[(i + r) as usize] * self.at(clamp(x as isize + i, self.w), y))
                    .sum();
            }
        }
        let mut out = Img::new(self.w, self.h);
        for y in 0..self.h {
            for x in 0..self.w {
                out.d[y * self.w + x] = (-r..=r)
                    .map(|i| k[(i + r) as usize] * tmp.at(x, clamp(y as isize + i, self.h)))
                    .sum();
            }
        }
        out
    }

    /// Resamples to `w x h` with pixel-centre alignment.
    fn resize(&self, w: usize, h: usize) -> Img {
        let sx = self.w as f32 / w as f32;
        let sy = self.h as f32 / h as f32;
        let mut out = Img::new(w, h);
        for y in 0..h {
            for x in 0..w {
                out.d[y * w + x] = self.sample((x as f32 + 0.5) * sx - 0.5, (y as f32 + 0.5) * sy - 0.5);
            }
        }
        out
    }

    fn centered_gradient(&self) -> (Img, Img) {
        let (w, h) = (self.w, self.h);
        let mut gx = Img::new(w, h);
        let mut gy = Img::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
                gx.d[y * w + x] = 0.5 * (self.at(xr, y) - self.at(xl, y));
                gy.d[y * w + x] = 0.5 * (self.at(x, yd) - self.at(x, yu));
            }
        }
        (gx, gy)
    }

    fn median3(&self) -> Img {
        let (w, h) = (self.w, self.h);
        let mut out = Img::new(w, h);
        let mut win = [0.0f32; 9];
        for y in 0..h {
            for x in 0..w {
                let mut n = 0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        win[n] = self.at(xx, yy);
                        n += 1;
                    }
                }
                win.sort_unstable_by(f32::total_cmp);
                out.d[y * w + x] = win[4];
            }
        }
        out
    }
}

/// Forward differences, zero at the trailing border.
fn forward_gradient(u: &Img, gx: &mut [f32], gy: &mut [f32]) {
    let (w, h) = (u.w, u.h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            gx[i] = if x + 1 < w { u.d[i + 1] - u.d[i] } else { 0.0 };
            gy[i] = if y + 1 < h { u.d[i + w] - u.d[i] } else { 0.0 };
        }
    }
}

/// Negative adjoint of [`forward_gradient`].
fn divergence(px: &[f32], py: &[f32], w: usize, h: usize, out: &mut [f32]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut d = 0.0;
            if x + 1 < w {
                d += px[i];
            }
            if x > 0 {
                d -= px[i - 1];
            }
            if y + 1 < h {
                d += py[i];
            }
            if y > 0 {
                d -= py[i - w];
            }
            out[i] = d;
        }
    }
}

fn to_img(t: &Tensor) -> Result<Img> {
    let [h, w] = dims2(t)?;
    Ok(Img {
        w,
        h,
        d: t.data().iter().map(|v| v * INTENSITY_SCALE).collect(),
    })
}

/// Energy trace of the finest level: one vector per warp, one entry per inner iteration.
pub type EnergyTrace = Vec<Vec<f64>>;

/// Estimates flow from `frame_a` to `frame_b` (grayscale `[H, W]`, values in `[0, 1]`).
pub fn tvl1(frame_a: &Tensor, frame_b: &Tensor, params: &TVL1Params) -> Result<FlowField> {
    solve(frame_a, frame_b, params, false).map(|(f, _)| f)
}

/// As [`tvl1`], also returning the linearized TV-L1 energy after every inner
/// iteration of the finest level.
pub fn tvl1_traced(frame_a: &Tensor, frame_b: &Tensor, params: &TVL1Params) -> Result<(FlowField, EnergyTrace)> {
    solve(frame_a, frame_b, params, true)
}

fn solve(a: &Tensor, b: &Tensor, p: &TVL1Params, trace: bool) -> Result<(FlowField, EnergyTrace)> {
    p.validate()?;
    let [h, w] = dims2(a)?;
    let [hb, wb] = dims2(b)?;
    if h != hb {
        return Err(Error::shape("tvl1", "height", h, hb));
    }
    if w != wb {
        return Err(Error::shape("tvl1", "width", w, wb));
    }
    let min = p.min_extent();
    if h < min || w < min {
        return Err(Error::invalid(
            "tvl1",
            format!("{h}x{w} frame is below the {min}px minimum for {} pyramid levels", p.levels),
        ));
    }

    let sigma = 0.6 * (1.0 / (p.scale * p.scale) - 1.0).sqrt();
    let mut pyr0 = vec![to_img(a)?];
    let mut pyr1 = vec![to_img(b)?];
    for l in 1..p.levels {
        let nw = ((w as f32) * p.scale.powi(l as i32)).round().max(1.0) as usize;
        let nh = ((h as f32) * p.scale.powi(l as i32)).round().max(1.0) as usize;
        let i0 = pyr0[l - 1].gaussian_blur(sigma).resize(nw, nh);
        let i1 = pyr1[l - 1].gaussian_blur(sigma).resize(nw, nh);
        pyr0.push(i0);
        pyr1.push(i1);
    }

    let coarse = &pyr0[p.levels - 1];
    let mut u1 = Img::new(coarse.w, coarse.h);
    let mut u2 = Img::new(coarse.w, coarse.h);
    let mut energies = EnergyTrace::new();
    for l in (0..p.levels).rev() {
        let (i0, i1) = (&pyr0[l], &pyr1[l]);
        if u1.w != i0.w || u1.h != i0.h {
            let fx = i0.w as f32 / u1.w as f32;
            let fy = i0.h as f32 / u1.h as f32;
            u1 = u1.resize(i0.w, i0.h);
            u2 = u2.resize(i0.w, i0.h);
            u1.d.iter_mut().for_each(|v| *v *= fx);
            u2.d.iter_mut().for_each(|v| *v *= fy);
        }
        let record = trace && l == 0;
        level(i0, i1, &mut u1, &mut u2, p, record.then_some(&mut energies));
    }
    let flow = FlowField::new(Tensor::new(vec![h, w], u1.d)?, Tensor::new(vec![h, w], u2.d)?)?;
    Ok((flow, energies))
}

fn level(i0: &Img, i1: &Img, u1: &mut Img, u2: &mut Img, p: &TVL1Params, mut trace: Option<&mut EnergyTrace>) {
    let (w, h) = (i0.w, i0.h);
    let n = w * h;
    let (gx, gy) = i1.centered_gradient();
    let lt = p.lambda_data * p.theta_coupling;
    let taut = p.tau_step / p.theta_coupling;
    let mut p11 = vec![0.0f32; n];
    let mut p12 = vec![0.0f32; n];
    let mut p21 = vec![0.0f32; n];
    let mut p22 = vec![0.0f32; n];
    let mut div1 = vec![0.0f32; n];
    let mut div2 = vec![0.0f32; n];
    let mut u1x = vec![0.0f32; n];
    let mut u1y = vec![0.0f32; n];
    let mut u2x = vec![0.0f32; n];
    let mut u2y = vec![0.0f32; n];
    let (mut c1x, mut c1y, mut c2x, mut c2y) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
    let mut c1 = Img::new(w, h);
    let mut c2 = Img::new(w, h);
    let mut i1w = vec![0.0f32; n];
    let mut i1wx = vec![0.0f32; n];
    let mut i1wy = vec![0.0f32; n];
    let mut grad = vec![0.0f32; n];
    let mut rho_c = vec![0.0f32; n];

    for _ in 0..p.warps {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (sx, sy) = (x as f32 + u1.d[i], y as f32 + u2.d[i]);
                i1w[i] = i1.sample(sx, sy);
                i1wx[i] = gx.sample(sx, sy);
                i1wy[i] = gy.sample(sx, sy);
                grad[i] = i1wx[i] * i1wx[i] + i1wy[i] * i1wy[i];
                rho_c[i] = i1w[i] - i1wx[i] * u1.d[i] - i1wy[i] * u2.d[i] - i0.d[i];
            }
        }
        let energy = |u1: &Img, u2: &Img, gx1: &[f32], gy1: &[f32], gx2: &[f32], gy2: &[f32]| -> f64 {
            (0..n)
                .map(|i| {
                    let tv = ((gx1[i] as f64).powi(2) + (gy1[i] as f64).powi(2)).sqrt()
                        + ((gx2[i] as f64).powi(2) + (gy2[i] as f64).powi(2)).sqrt();
                    let rho = rho_c[i] as f64 + i1wx[i] as f64 * u1.d[i] as f64 + i1wy[i] as f64 * u2.d[i] as f64;
                    tv + p.lambda_data as f64 * rho.abs()
                })
                .sum()
        };
        forward_gradient(u1, &mut u1x, &mut u1y);
        forward_gradient(u2, &mut u2x, &mut u2y);
        let mut current = energy(u1, u2, &u1x, &u1y, &u2x, &u2y);
        let mut warp_energy = Vec::new();
        for _ in 0..p.inner_iterations {
            divergence(&p11, &p12, w, h, &mut div1);
            divergence(&p21, &p22, w, h, &mut div2);
            for i in 0..n {
                let rho = rho_c[i] + i1wx[i] * u1.d[i] + i1wy[i] * u2.d[i];
                let (d1, d2) = if rho < -lt * grad[i] {
                    (lt * i1wx[i], lt * i1wy[i])
                } else if rho > lt * grad[i] {
                    (-lt * i1wx[i], -lt * i1wy[i])
                } else if grad[i] > GRAD_IS_ZERO {
                    let f = -rho / grad[i];
                    (f * i1wx[i], f * i1wy[i])
                } else {
                    (0.0, 0.0)
                };
                c1.d[i] = u1.d[i] + d1 + p.theta_coupling * div1[i];
                c2.d[i] = u2.d[i] + d2 + p.theta_coupling * div2[i];
            }
            forward_gradient(&c1, &mut c1x, &mut c1y);
            forward_gradient(&c2, &mut c2x, &mut c2y);
            // The dual always advances from the candidate; the primal iterate only
            // moves when the linearized energy does not increase.
            for i in 0..n {
                let ng1 = 1.0 + taut * (c1x[i] * c1x[i] + c1y[i] * c1y[i]).sqrt();
                let ng2 = 1.0 + taut * (c2x[i] * c2x[i] + c2y[i] * c2y[i]).sqrt();
                p11[i] = (p11[i] + taut * c1x[i]) / ng1;
                p12[i] = (p12[i] + taut * c1y[i]) / ng1;
                p21[i] = (p21[i] + taut * c2x[i]) / ng2;
                p22[i] = (p22[i] + taut * c2y[i]) / ng2;
            }
            let candidate = energy(&c1, &c2, &c1x, &c1y, &c2x, &c2y);
            if candidate <= current {
                std::mem::swap(u1, &mut c1);
                std::mem::swap(u2, &mut c2);
                current = candidate;
            }
            if trace.is_some() {
                warp_energy.push(current);
            }
        }
        if p.median_filter {
            *u1 = u1.median3();
            *u2 = u2.median3();
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(warp_energy);
        }
    }
}

/// Grayscale frame `t` of an RGB `[3, T, H, W]` clip.
pub fn grayscale_frame(clip: &Tensor, t: usize) -> Result<Tensor> {
    let [c, nt, h, w] = clip.dims4("grayscale_frame")?;
    if c != 3 {
        return Err(Error::shape("grayscale_frame", "channels", 3, c));
    }
    if t >= nt {
        return Err(Error::invalid("grayscale_frame", format!("frame {t} of {nt}")));
    }
    let plane = h * w;
    let d = clip.data();
    let g = (0..plane)
        .map(|i| (0..3).map(|ch| LUMA[ch] * d[(ch * nt + t) * plane + i]).sum())
        .collect();
    Tensor::new(vec![h, w], g)
}

/// Flow between consecutive frames of an RGB clip as a `[2, T, H, W]` tensor.
/// Frame `t < T-1` holds the flow from `t` to `t+1`; the last frame repeats `T-2`.
pub fn flow_for_clip(clip: &Tensor, params: &TVL1Params) -> Result<Tensor> {
    let [_, t, h, w] = clip.dims4("flow_for_clip")?;
    if t < 2 {
        return Err(Error::invalid("flow_for_clip", format!("need at least 2 frames, got {t}")));
    }
    let grays = (0..t).map(|i| grayscale_frame(clip, i)).collect::<Result<Vec<_>>>()?;
    let flows = (0..t - 1)
        .into_par_iter()
        .map(|i| tvl1(&grays[i], &grays[i + 1], params))
        .collect::<Result<Vec<_>>>()?;
    let plane = h * w;
    let mut out = vec![0.0; 2 * t * plane];
    for f in 0..t {
        let src = &flows[f.min(t - 2)];
        out[f * plane..(f + 1) * plane].copy_from_slice(src.u.data());
        out[(t + f) * plane..(t + f + 1) * plane].copy_from_slice(src.v.data());
    }
    Tensor::new(vec![2, t, h, w], out)
}

/// Frame `t` of a `[2, T, H, W]` flow clip.
pub fn clip_frame(flow: &Tensor, t: usize) -> Result<FlowField> {
    let [c, nt, h, w] = flow.dims4("clip_frame")?;
    if c != 2 {
        return Err(Error::shape("clip_frame", "channels", 2, c));
    }
    let plane = h * w;
    let d = flow.data();
    FlowField::new(
        Tensor::new(vec![h, w], d[t * plane..(t + 1) * plane].to_vec())?,
        Tensor::new(vec![h, w], d[(nt + t) * plane..(nt + t + 1) * plane].to_vec())?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_validation() {
        assert!(TVL1Params::default().validate().is_ok());
        let p = TVL1Params { tau_step: 0.2, ..Default::default() };
        assert!(p.validate().is_err());
        let p = TVL1Params { scale: 1.0, ..Default::default() };
        assert!(p.validate().is_err());
        let p = TVL1Params { levels: 0, ..Default::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn tiny_frames_rejected() {
        let a = Tensor::zeros(&[6, 6]);
        assert!(tvl1(&a, &a, &TVL1Params::default()).is_err());
    }

    #[test]
    fn clip_needs_two_frames() {
        let c = Tensor::zeros(&[3, 1, 16, 16]);
        assert!(flow_for_clip(&c, &TVL1Params::default()).is_err());
    }

    #[test]
    fn median_of_spike_is_background() {
        let mut img = Img::new(5, 5);
        img.d[12] = 100.0;
        assert_eq!(img.median3().d[12], 0.0);
    }
}
