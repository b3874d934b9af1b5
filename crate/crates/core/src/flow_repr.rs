//! Polar `(mag, sin, cos)` flow encoding, the magnitude-weighted flow loss and
//! endpoint error.
//!
//! Flow clips are `[2, T, H, W]` tensors holding `(u, v)`; encoded clips are
//! `[3, T, H, W]` holding `(mag, sin, cos)` in that channel order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tvl1::{FlowField, FLO_MAGIC};

/// Below this magnitude a vector has no direction; encoded as angle (sin 0, cos 1).
pub const ZERO_MAG: f32 = 1e-6;
/// Magic for serialized encoded planes, distinct from raw `(u, v)` files.
pub const REPR_MAGIC: f32 = 202021.75;
/// Border excluded from interior EPE.
pub const INTERIOR_BORDER: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowRepr3 {
    pub mag: Tensor,
    pub sin_t: Tensor,
    pub cos_t: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowMetrics {
    pub epe: f64,
    pub epe_interior: f64,
    pub per_frame: Vec<f64>,
}

#[inline]
fn encode_vec(u: f32, v: f32) -> (f32, f32, f32) {
    let mag = (u * u + v * v).sqrt();
    if mag < ZERO_MAG {
        (mag, 0.0, 1.0)
    } else {
        let th = v.atan2(u);
        (mag, th.sin(), th.cos())
    }
}

pub fn encode_flow(f: &FlowField) -> FlowRepr3 {
    let shape = f.u.shape().to_vec();
    let n = f.u.len();
    let (mut m, mut s, mut c) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (&u, &v) in f.u.data().iter().zip(f.v.data()) {
        let (a, b, d) = encode_vec(u, v);
        m.push(a);
        s.push(b);
        c.push(d);
    }
    let mk = |d| Tensor::new(shape.clone(), d).expect("same extents");
    FlowRepr3 {
        mag: mk(m),
        sin_t: mk(s),
        cos_t: mk(c),
    }
}

/// `u = mag cos, v = mag sin`; angle channels are used as given, not renormalized.
pub fn decode_flow(r: &FlowRepr3) -> FlowField {
    let u = r.mag.data().iter().zip(r.cos_t.data()).map(|(m, c)| m * c).collect();
    let v = r.mag.data().iter().zip(r.sin_t.data()).map(|(m, s)| m * s).collect();
    let shape = r.mag.shape().to_vec();
    FlowField {
        u: Tensor::new(shape.clone(), u).expect("same extents"),
        v: Tensor::new(shape, v).expect("same extents"),
    }
}

/// Encodes a `[2, ...]` flow clip into `[3, ...]` planes.
pub fn encode_clip(flow: &Tensor) -> Result<Tensor> {
    let s = flow.shape();
    if s.first() != Some(&2) {
        return Err(Error::shape("encode_clip", "channels", 2, s.first().copied().unwrap_or(0)));
    }
    let n = flow.len() / 2;
    let (u, v) = flow.data().split_at(n);
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let (m, sn, c) = encode_vec(u[i], v[i]);
        out[i] = m;
        out[n + i] = sn;
        out[2 * n + i] = c;
    }
    let mut shape = s.to_vec();
    shape[0] = 3;
    Tensor::new(shape, out)
}

/// Decodes `[3, ...]` planes into a `[2, ...]` flow clip.
pub fn decode_clip(repr: &Tensor) -> Result<Tensor> {
    let s = repr.shape();
    if s.first() != Some(&3) {
        return Err(Error::shape("decode_clip", "channels", 3, s.first().copied().unwrap_or(0)));
    }
    let n = repr.len() / 3;
    let d = repr.data();
    let (m, rest) = d.split_at(n);
    let (sn, c) = rest.split_at(n);
    let mut out = Vec::with_capacity(2 * n);
    out.extend(m.iter().zip(c).map(|(a, b)| a * b));
    out.extend(m.iter().zip(sn).map(|(a, b)| a * b));
    let mut shape = s.to_vec();
    shape[0] = 2;
    Tensor::new(shape, out)
}

impl FlowRepr3 {
    /// Stacks into `[3, H, W]`.
    pub fn to_planes(&self) -> Tensor {
        Tensor::stack(&[self.mag.clone(), self.sin_t.clone(), self.cos_t.clone()]).expect("same extents")
    }

    pub fn from_planes(t: &Tensor) -> Result<Self> {
        if t.shape().first() != Some(&3) {
            return Err(Error::shape("FlowRepr3", "channels", 3, t.shape().first().copied().unwrap_or(0)));
        }
        Ok(FlowRepr3 {
            mag: t.channel(0),
            sin_t: t.channel(1),
            cos_t: t.channel(2),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let [h, w] = dims2(&self.mag)?;
        let mut buf = Vec::with_capacity(12 + 12 * h * w);
        buf.extend_from_slice(&REPR_MAGIC.to_le_bytes());
        buf.extend_from_slice(&(w as i32).to_le_bytes());
        buf.extend_from_slice(&(h as i32).to_le_bytes());
        for plane in [&self.mag, &self.sin_t, &self.cos_t] {
            for v in plane.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let (magic, w, h, body) = read_header(&bytes, "flow repr file")?;
        if magic != REPR_MAGIC {
            let hint = if magic == FLO_MAGIC { " (this is a raw (u,v) flow file)" } else { "" };
            return Err(Error::format("flow repr file", format!("bad magic {magic}{hint}")));
        }
        let n = w * h;
        if body.len() != 12 * n {
            return Err(Error::format("flow repr file", format!("expected {} body bytes, found {}", 12 * n, body.len())));
        }
        let vals: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let plane = |i: usize| Tensor::new(vec![h, w], vals[i * n..(i + 1) * n].to_vec()).unwrap();
        Ok(FlowRepr3 {
            mag: plane(0),
            sin_t: plane(1),
            cos_t: plane(2),
        })
    }
}

pub(crate) fn read_header<'a>(bytes: &'a [u8], what: &'static str) -> Result<(f32, usize, usize, &'a [u8])> {
    if bytes.len() < 12 {
        return Err(Error::format(what, "truncated header"));
    }
    let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(Error::format(what, format!("non-positive extents {w}x{h}")));
    }
    Ok((magic, w as usize, h as usize, &bytes[12..]))
}

pub(crate) fn dims2(t: &Tensor) -> Result<[usize; 2]> {
    match *t.shape() {
        [h, w] => Ok([h, w]),
        _ => Err(Error::shape("flow plane", "rank", 2, t.rank())),
    }
}

/// Loss over flat `[3, n]` planes (mag, sin, cos), accumulated in f64.
pub(crate) fn flow_loss_planes(pred: &[f32], target: &[f32]) -> f64 {
    let n = pred.len() / 3;
    let mut acc = 0.0f64;
    for i in 0..n {
        let (pm, ps, pc) = (pred[i] as f64, pred[n + i] as f64, pred[2 * n + i] as f64);
        let (tm, ts, tc) = (target[i] as f64, target[n + i] as f64, target[2 * n + i] as f64);
        acc += (pm - tm).powi(2) + tm * ((ps - ts).powi(2) + (pc - tc).powi(2));
    }
    acc / n.max(1) as f64
}

pub(crate) fn flow_loss_planes_grad(pred: &[f32], target: &[f32], upstream: f32) -> Vec<f32> {
    let n = pred.len() / 3;
    let k = 2.0 * upstream / n.max(1) as f32;
    let mut g = vec![0.0; pred.len()];
    for i in 0..n {
        let tm = target[i];
        g[i] = k * (pred[i] - tm);
        g[n + i] = k * tm * (pred[n + i] - target[n + i]);
        g[2 * n + i] = k * tm * (pred[2 * n + i] - target[2 * n + i]);
    }
    g
}

/// Mean over pixels of `(dmag)^2 + target_mag * ((dsin)^2 + (dcos)^2)`.
///
/// Angle errors are weighted by the target magnitude, so angles are free where
/// the target flow vanishes.
pub fn flow_loss(pred: &FlowRepr3, target: &FlowRepr3) -> Result<f64> {
    check_same("flow_loss", &pred.mag, &target.mag)?;
    for t in [&pred.sin_t, &pred.cos_t, &target.sin_t, &target.cos_t] {
        check_same("flow_loss", &pred.mag, t)?;
    }
    Ok(flow_loss_planes(pred.to_planes().data(), target.to_planes().data()))
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != b.rank() {
        return Err(Error::shape(op, "rank", a.rank(), b.rank()));
    }
    for (i, (x, y)) in a.shape().iter().zip(b.shape()).enumerate() {
        if x != y {
            return Err(Error::shape(op, format!("axis {i}"), *x, *y));
        }
    }
    Ok(())
}

/// Endpoint error between two fields of equal extents.
pub fn endpoint_error(pred: &FlowField, reference: &FlowField) -> Result<FlowMetrics> {
    check_same("endpoint_error", &pred.u, &reference.u)?;
    let [h, w] = dims2(&pred.u)?;
    let (sum, n, isum, ni) = epe_plane(pred.u.data(), pred.v.data(), reference.u.data(), reference.v.data(), h, w);
    let epe = sum / n as f64;
    Ok(FlowMetrics {
        epe,
        epe_interior: if ni > 0 { isum / ni as f64 } else { epe },
        per_frame: vec![epe],
    })
}

fn epe_plane(pu: &[f32], pv: &[f32], ru: &[f32], rv: &[f32], h: usize, w: usize) -> (f64, usize, f64, usize) {
    let (mut sum, mut isum, mut ni) = (0.0f64, 0.0f64, 0usize);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let du = pu[i] as f64 - ru[i] as f64;
            let dv = pv[i] as f64 - rv[i] as f64;
            let e = (du * du + dv * dv).sqrt();
            sum += e;
            let b = INTERIOR_BORDER;
            if y >= b && y + b < h && x >= b && x + b < w {
                isum += e;
                ni += 1;
            }
        }
    }
    (sum, h * w, isum, ni)
}

/// Endpoint error between `[2, T, H, W]` flow clips, one entry per frame.
pub fn endpoint_error_clip(pred: &Tensor, reference: &Tensor) -> Result<FlowMetrics> {
    check_same("endpoint_error", pred, reference)?;
    let [c, t, h, w] = pred.dims4("endpoint_error")?;
    if c != 2 {
        return Err(Error::shape("endpoint_error", "channels", 2, c));
    }
    let plane = h * w;
    let (pu, pv) = pred.data().split_at(t * plane);
    let (ru, rv) = reference.data().split_at(t * plane);
    let (mut sum, mut n, mut isum, mut ni) = (0.0, 0, 0.0, 0);
    let mut per_frame = Vec::with_capacity(t);
    for f in 0..t {
        let r = f * plane..(f + 1) * plane;
        let (s, k, is, ki) = epe_plane(&pu[r.clone()], &pv[r.clone()], &ru[r.clone()], &rv[r], h, w);
        per_frame.push(s / k as f64);
        sum += s;
        n += k;
        isum += is;
        ni += ki;
    }
    let epe = sum / n as f64;
    Ok(FlowMetrics {
        epe,
        epe_interior: if ni > 0 { isum / ni as f64 } else { epe },
        per_frame,
    })
}

/// Average-pools the `(u, v)` components of a `[2, T, H, W]` clip down to
/// `target` extents, then encodes; magnitudes are recomputed after averaging.
pub fn downsample_flow_target(flow_clip: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    let [c, t, h, w] = flow_clip.dims4("downsample_flow_target")?;
    if c != 2 {
        return Err(Error::shape("downsample_flow_target", "channels", 2, c));
    }
    let src = [t, h, w];
    let mut f = [0; 3];
    for a in 0..3 {
        if target[a] == 0 || src[a] % target[a] != 0 {
            return Err(Error::invalid(
                "downsample_flow_target",
                format!("non-integer pooling factor {} / {} on axis {a}", src[a], target[a]),
            ));
        }
        f[a] = src[a] / target[a];
    }
    let pooled = if f == [1, 1, 1] {
        flow_clip.clone()
    } else {
        let g = crate::conv::PoolGeometry::new([2, t, h, w], f, f)?;
        Tensor::new(g.output_dims().to_vec(), g.forward(flow_clip.data()))?
    };
    encode_clip(&pooled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(u: &[f32], v: &[f32], h: usize, w: usize) -> FlowField {
        FlowField::new(
            Tensor::new(vec![h, w], u.to_vec()).unwrap(),
            Tensor::new(vec![h, w], v.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn three_four_five() {
        let r = encode_flow(&field(&[3.0], &[4.0], 1, 1));
        assert!((r.mag.data()[0] - 5.0).abs() < 1e-6);
        assert!((r.cos_t.data()[0] - 0.6).abs() < 1e-6);
        assert!((r.sin_t.data()[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn zero_flow_convention() {
        let r = encode_flow(&field(&[0.0], &[0.0], 1, 1));
        assert_eq!((r.mag.data()[0], r.sin_t.data()[0], r.cos_t.data()[0]), (0.0, 0.0, 1.0));
    }

    #[test]
    fn decode_uses_raw_angles() {
        let t = |v: f32| Tensor::new(vec![1, 1], vec![v]).unwrap();
        let f = decode_flow(&FlowRepr3 {
            mag: t(5.0),
            sin_t: t(0.8),
            cos_t: t(0.6),
        });
        assert!((f.u.data()[0] - 3.0).abs() < 1e-6 && (f.v.data()[0] - 4.0).abs() < 1e-6);
        let f = decode_flow(&FlowRepr3 {
            mag: t(0.0),
            sin_t: t(7.0),
            cos_t: t(-3.0),
        });
        assert_eq!((f.u.data()[0], f.v.data()[0]), (0.0, 0.0));
    }

    #[test]
    fn single_pixel_loss() {
        let t = |v: f32| Tensor::new(vec![1, 1], vec![v]).unwrap();
        let target = FlowRepr3 {
            mag: t(2.0),
            sin_t: t(1.0),
            cos_t: t(0.0),
        };
        let pred = FlowRepr3 {
            mag: t(1.0),
            sin_t: t(0.0),
            cos_t: t(0.0),
        };
        assert!((flow_loss(&pred, &target).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(flow_loss(&target, &target).unwrap(), 0.0);
    }

    #[test]
    fn zero_target_suppresses_angle_term() {
        let z = Tensor::zeros(&[2, 2]);
        let target = encode_flow(&FlowField::new(z.clone(), z.clone()).unwrap());
        let pred = FlowRepr3 {
            mag: z.clone(),
            sin_t: Tensor::new(vec![2, 2], vec![0.3, -0.9, 5.0, 1.0]).unwrap(),
            cos_t: Tensor::new(vec![2, 2], vec![-2.0, 0.1, 0.0, 7.0]).unwrap(),
        };
        assert_eq!(flow_loss(&pred, &target).unwrap(), 0.0);
    }

    #[test]
    fn epe_of_zero_against_three_four() {
        let p = field(&[0.0; 4], &[0.0; 4], 2, 2);
        let r = field(&[3.0; 4], &[4.0; 4], 2, 2);
        assert!((endpoint_error(&p, &r).unwrap().epe - 5.0).abs() < 1e-12);
        assert_eq!(endpoint_error(&r, &r).unwrap().epe, 0.0);
        let bad = field(&[0.0; 6], &[0.0; 6], 2, 3);
        assert!(endpoint_error(&bad, &r).is_err());
    }

    #[test]
    fn downsample_constant_and_cancelling() {
        let mut d = vec![1.0; 2 * 4 * 4];
        d[16..].fill(0.0);
        let clip = Tensor::new(vec![2, 1, 4, 4], d).unwrap();
        let r = downsample_flow_target(&clip, [1, 2, 2]).unwrap();
        for i in 0..4 {
            assert_eq!((r.data()[i], r.data()[4 + i], r.data()[8 + i]), (1.0, 0.0, 1.0));
        }
        // (1,0) and (-1,0) columns cancel inside each 2x2 block
        let u: Vec<f32> = (0..4).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let mut d = u.clone();
        d.extend([0.0; 4]);
        let clip = Tensor::new(vec![2, 1, 2, 2], d).unwrap();
        let r = downsample_flow_target(&clip, [1, 1, 1]).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 1.0]);
        assert!(downsample_flow_target(&clip, [1, 3, 1]).is_err());
    }
}
