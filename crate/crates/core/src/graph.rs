//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order; [`Graph::backward`]
//! walks the tape in reverse. Gradients reaching a node from several consumers
//! are summed. One graph holds one sample's computation; data parallelism is
//! done by building independent graphs and summing parameter gradients.

use crate::conv::{ConvGeometry, ConvSpec, PoolGeometry};
use crate::error::{Error, Result};
use crate::tensor::{Parameters, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    AvgPool {
        x: Var,
        geom: PoolGeometry,
    },
    Relu(Var),
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f32>,
    },
    Mse(Var, Var),
    FlowLoss {
        pred: Var,
        target: Tensor,
    },
    Upsample {
        x: Var,
        factors: [usize; 3],
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    op: Op,
    requires_grad: bool,
    /// Reductions also keep an f64 result for finite-difference oracles.
    exact: Option<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_scaled_into(dst: &mut Option<Vec<f32>>, src: &[f32], s: f32) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += s * b),
        None => *dst = Some(src.iter().map(|b| s * b).collect()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_exact(value, op, requires_grad, None)
    }

    fn push_exact(&mut self, value: Tensor, op: Op, requires_grad: bool, exact: Option<f64>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
            exact,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// A named parameter leaf; `trainable = false` freezes it.
    pub fn param(&mut self, name: &str, t: &Tensor, trainable: bool) -> Var {
        let mut t = t.clone();
        t.clear_grad();
        self.push(t, Op::Param(name.to_string()), trainable)
    }

    /// Looks a parameter up by name and registers it.
    pub fn param_from(&mut self, params: &Parameters, name: &str, trainable: bool) -> Result<Var> {
        Ok(self.param(name, params.require(name)?, trainable))
    }

    /// Like [`Self::param_from`], registering the node as `scope + name`.
    pub fn param_scoped(&mut self, params: &Parameters, scope: &str, name: &str, trainable: bool) -> Result<Var> {
        if scope.is_empty() {
            return self.param_from(params, name, trainable);
        }
        Ok(self.param(&format!("{scope}{name}"), params.require(name)?, trainable))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value.data()[0]
    }

    /// Value of a scalar node, in f64 where the producing reduction kept one.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.exact.unwrap_or(n.value.data()[0] as f64)
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn conv3d(&mut self, x: Var, spec: &ConvSpec, w: Var, b: Option<Var>) -> Result<Var> {
        let xdims = self.value(x).dims4("conv3d")?;
        let ws = self.value(w).shape();
        let expect = spec.weight_shape(xdims[0]);
        if ws.len() != 5 {
            return Err(Error::shape("conv3d", "weight rank", 5, ws.len()));
        }
        const NAMES: [&str; 5] = ["out channels", "in channels", "kernel time", "kernel height", "kernel width"];
        for a in 0..5 {
            if ws[a] != expect[a] {
                return Err(Error::shape("conv3d", NAMES[a], expect[a], ws[a]));
            }
        }
        if let Some(b) = b {
            let bl = self.value(b).len();
            if bl != spec.out_channels {
                return Err(Error::shape("conv3d", "bias", spec.out_channels, bl));
            }
        }
        let geom = spec.geometry(xdims)?;
        let out = geom.forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(geom.output_dims().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Conv3d { x, w, b, geom }, rg))
    }

    pub fn avg_pool3d(&mut self, x: Var, window: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let geom = PoolGeometry::new(self.value(x).dims4("avg_pool3d")?, window, stride)?;
        let t = Tensor::new(geom.output_dims().to_vec(), geom.forward(self.value(x).data()))?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::AvgPool { x, geom }, rg))
    }

    /// Mean over time, height and width: `[C, T, H, W] -> [C, 1, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [_, t, h, w] = self.value(x).dims4("global_avg_pool")?;
        self.avg_pool3d(x, [t, h, w], [t, h, w])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // subgradient at 0 is 0
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// Per-channel `scale * x + shift` on a `[C, ...]` tensor.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().first().ok_or_else(|| Error::invalid("channel_affine", "scalar input"))?;
        for (name, v) in [("scale", scale), ("shift", shift)] {
            let n = self.value(v).len();
            if n != c {
                return Err(Error::shape("channel_affine", name, c, n));
            }
        }
        let plane = xv.len() / c.max(1);
        let (sv, hv) = (self.value(scale).data(), self.value(shift).data());
        let mut out = xv.clone();
        out.clear_grad();
        for (ch, chunk) in out.data_mut().chunks_exact_mut(plane.max(1)).enumerate() {
            chunk.iter_mut().for_each(|v| *v = sv[ch] * *v + hv[ch]);
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(out, Op::ChannelAffine { x, scale, shift }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() {
            return Err(Error::shape(op, "rank", sa.len(), sb.len()));
        }
        for (i, (x, y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                return Err(Error::shape(op, format!("axis {i}"), *x, *y));
            }
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        let exact = match (self.nodes[a.0].exact, self.nodes[b.0].exact) {
            (Some(x), Some(y)) => Some(x + y),
            _ => None,
        };
        Ok(self.push_exact(t, Op::Add(a, b), rg, exact))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        let exact = self.nodes[x.0].exact.map(|e| e * s as f64);
        self.push_exact(t, Op::Scale(x, s), rg, exact)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let mut t = self.value(x).clone().reshape(shape)?;
        t.clear_grad();
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let e: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push_exact(Tensor::scalar(e as f32), Op::Sum(x), rg, Some(e))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let e: f64 = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let rg = self.rg(x);
        self.push_exact(Tensor::scalar(e as f32), Op::Mean(x), rg, Some(e))
    }

    /// `-log softmax(logits)[label]` for a flat logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        let k = z.len();
        if k < 2 {
            return Err(Error::invalid("softmax_cross_entropy", format!("need >= 2 classes, got {k}")));
        }
        if label >= k {
            return Err(Error::invalid("softmax_cross_entropy", format!("label {label} out of range 0..{k}")));
        }
        let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
        let exps: Vec<f64> = z.iter().map(|&v| (v as f64 - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        let loss = s.ln() + m - z[label] as f64;
        let probs = exps.iter().map(|e| (e / s) as f32).collect();
        let rg = self.rg(logits);
        Ok(self.push_exact(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy { logits, label, probs },
            rg,
            Some(loss),
        ))
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let n = x.len().max(1) as f64;
        let e: f64 = x.iter().zip(y).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_exact(Tensor::scalar(e as f32), Op::Mse(a, b), rg, Some(e)))
    }

    /// Magnitude-weighted loss on `[3, ...]` (mag, sin, cos) planes against a
    /// constant target; see [`crate::flow_repr::flow_loss`].
    pub fn flow_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            let (ps, ts) = (pv.shape(), target.shape());
            let axis = ps.iter().zip(ts).position(|(a, b)| a != b).unwrap_or(0);
            return Err(Error::shape(
                "flow_loss",
                format!("axis {axis}"),
                ts.get(axis).copied().unwrap_or(ts.len()),
                ps.get(axis).copied().unwrap_or(ps.len()),
            ));
        }
        if pv.shape().first() != Some(&3) {
            return Err(Error::shape("flow_loss", "channels", 3, pv.shape().first().copied().unwrap_or(0)));
        }
        let e = crate::flow_repr::flow_loss_planes(pv.data(), target.data());
        let rg = self.rg(pred);
        Ok(self.push_exact(
            Tensor::scalar(e as f32),
            Op::FlowLoss { pred, target: target.clone() },
            rg,
            Some(e),
        ))
    }

    /// Nearest-neighbour upsampling of `[C, T, H, W]` by integer factors.
    pub fn upsample_nearest(&mut self, x: Var, factors: [usize; 3]) -> Result<Var> {
        let [c, t, h, w] = self.value(x).dims4("upsample_nearest")?;
        if factors.contains(&0) {
            return Err(Error::invalid("upsample_nearest", "zero factor"));
        }
        let [ft, fh, fw] = factors;
        let (to, ho, wo) = (t * ft, h * fh, w * fw);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * to * ho * wo];
        for ci in 0..c {
            for a in 0..to {
                for b in 0..ho {
                    let srow = ((ci * t + a / ft) * h + b / fh) * w;
                    let drow = ((ci * to + a) * ho + b) * wo;
                    for k in 0..wo {
                        out[drow + k] = src[srow + k / fw];
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, to, ho, wo], out)?, Op::Upsample { x, factors }, rg))
    }

    /// Propagates d(root)/d(node) to every node that requires a gradient.
    /// `root` must be a scalar. Repeated calls accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", "root elements", 1, self.value(root).len()));
        }
        if !self.rg(root) {
            return Ok(());
        }
        add_into(&mut self.nodes[root.0].grad, &[1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            propagate(before, node, &g);
            rest[0].grad = Some(g);
        }
        Ok(())
    }

    /// Gradients of trainable named parameters, in registration order.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Param(name), Some(g)) if n.requires_grad => Some((name.as_str(), g.as_slice())),
            _ => None,
        })
    }

    /// Adds every trainable parameter gradient into the matching tensor of `params`.
    pub fn accumulate_into(&self, params: &mut Parameters) -> Result<()> {
        for (name, g) in self.param_grads() {
            params
                .get_mut(name)
                .ok_or_else(|| Error::invalid("accumulate", format!("unknown parameter {name}")))?
                .accumulate_grad(g);
        }
        Ok(())
    }
}

fn gslot(nodes: &mut [Node], v: Var) -> Option<&mut Option<Vec<f32>>> {
    let n = &mut nodes[v.0];
    n.requires_grad.then_some(&mut n.grad)
}

fn propagate(nodes: &mut [Node], node: &Node, g: &[f32]) {
    match &node.op {
        Op::Input | Op::Param(_) => {}
        Op::Conv3d { x, w, b, geom } => {
            if nodes[x.0].requires_grad {
                let gi = geom.backward_input(nodes[w.0].value.data(), g);
                add_into(&mut nodes[x.0].grad, &gi);
            }
            if nodes[w.0].requires_grad {
                let gw = geom.backward_weight(nodes[x.0].value.data(), g);
                add_into(&mut nodes[w.0].grad, &gw);
            }
            if let Some(slot) = b.and_then(|b| gslot(nodes, b)) {
                add_into(slot, &geom.backward_bias(g));
            }
        }
        Op::AvgPool { x, geom } => {
            if let Some(slot) = gslot(nodes, *x) {
                add_into(slot, &geom.backward(g));
            }
        }
        Op::Relu(x) => {
            if nodes[x.0].requires_grad {
                let gi: Vec<f32> = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gy)| if y > 0.0 { gy } else { 0.0 })
                    .collect();
                add_into(&mut nodes[x.0].grad, &gi);
            }
        }
        Op::ChannelAffine { x, scale, shift } => {
            let c = nodes[scale.0].value.len();
            let plane = g.len() / c;
            if nodes[x.0].requires_grad {
                let sv = nodes[scale.0].value.data();
                let gi: Vec<f32> = g
                    .chunks_exact(plane)
                    .enumerate()
                    .flat_map(|(ch, gc)| gc.iter().map(move |v| v * sv[ch]))
                    .collect();
                add_into(&mut nodes[x.0].grad, &gi);
            }
            if nodes[scale.0].requires_grad {
                let xv = nodes[x.0].value.data();
                let gs: Vec<f32> = g
                    .chunks_exact(plane)
                    .zip(xv.chunks_exact(plane))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                    .collect();
                add_into(&mut nodes[scale.0].grad, &gs);
            }
            if let Some(slot) = gslot(nodes, *shift) {
                let gh: Vec<f32> = g.chunks_exact(plane).map(|gc| gc.iter().sum()).collect();
                add_into(slot, &gh);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(slot) = gslot(nodes, *v) {
                    add_into(slot, g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(slot) = gslot(nodes, *a) {
                add_into(slot, g);
            }
            if let Some(slot) = gslot(nodes, *b) {
                add_scaled_into(slot, g, -1.0);
            }
        }
        Op::Scale(x, s) => {
            if let Some(slot) = gslot(nodes, *x) {
                add_scaled_into(slot, g, *s);
            }
        }
        Op::Reshape(x) => {
            if let Some(slot) = gslot(nodes, *x) {
                add_into(slot, g);
            }
        }
        Op::Sum(x) => {
            let n = nodes[x.0].value.len();
            if let Some(slot) = gslot(nodes, *x) {
                add_into(slot, &vec![g[0]; n]);
            }
        }
        Op::Mean(x) => {
            let n = nodes[x.0].value.len();
            if let Some(slot) = gslot(nodes, *x) {
                add_into(slot, &vec![g[0] / n as f32; n]);
            }
        }
        Op::CrossEntropy { logits, label, probs } => {
            if let Some(slot) = gslot(nodes, *logits) {
                let gi: Vec<f32> = probs
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| g[0] * (p - if k == *label { 1.0 } else { 0.0 }))
                    .collect();
                add_into(slot, &gi);
            }
        }
        Op::Mse(a, b) => {
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            let k = 2.0 * g[0] / av.len().max(1) as f32;
            let diff: Vec<f32> = av.iter().zip(bv).map(|(x, y)| k * (x - y)).collect();
            if let Some(slot) = gslot(nodes, *a) {
                add_into(slot, &diff);
            }
            if let Some(slot) = gslot(nodes, *b) {
                add_scaled_into(slot, &diff, -1.0);
            }
        }
        Op::FlowLoss { pred, target } => {
            if nodes[pred.0].requires_grad {
                let gi = crate::flow_repr::flow_loss_planes_grad(nodes[pred.0].value.data(), target.data(), g[0]);
                add_into(&mut nodes[pred.0].grad, &gi);
            }
        }
        Op::Upsample { x, factors } => {
            if nodes[x.0].requires_grad {
                let [c, t, h, w] = nodes[x.0].value.dims4("upsample").expect("rank checked at forward");
                let [ft, fh, fw] = *factors;
                let (to, ho, wo) = (t * ft, h * fh, w * fw);
                let mut gi = vec![0.0; c * t * h * w];
                for ci in 0..c {
                    for a in 0..to {
                        for b in 0..ho {
                            let srow = ((ci * t + a / ft) * h + b / fh) * w;
                            let drow = ((ci * to + a) * ho + b) * wo;
                            for k in 0..wo {
                                gi[srow + k / fw] += g[drow + k];
                            }
                        }
                    }
                }
                add_into(&mut nodes[x.0].grad, &gi);
            }
        }
    }
}
