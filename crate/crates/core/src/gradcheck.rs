//! Central-difference verification of analytic gradients.
//!
//! Every probed element is also differenced one-sidedly. When the forward and
//! backward slopes disagree by more than [`KINK_TOLERANCE`] the step straddles
//! a non-differentiable point (a ReLU hinge, typically) and the element is
//! counted as skipped instead of scored; a hinge that goes undetected can bias
//! the central difference by at most half that tolerance. A check with more than a tenth of
//! its probes skipped fails.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Parameters, Tensor};

/// Relative disagreement between forward and backward slopes above which a
/// probe is treated as sitting on a kink.
pub const KINK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over scored elements of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// False when any analytic gradient was NaN or infinite.
    pub finite: bool,
    /// Elements scored.
    pub checked: usize,
    /// Elements whose finite differences straddled a kink.
    pub skipped: usize,
    /// Where the largest error occurred.
    pub worst_at: String,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.finite && self.max_rel_error < tol && self.skipped * 10 <= self.checked + self.skipped
    }

    fn non_finite() -> Self {
        GradCheckReport {
            max_rel_error: f64::INFINITY,
            finite: false,
            checked: 0,
            skipped: 0,
            worst_at: String::new(),
        }
    }
}

#[derive(Default)]
struct Tally {
    worst: f64,
    worst_at: String,
    checked: usize,
    skipped: usize,
}

impl Tally {
    /// `eval(delta)` moves the probed element by roughly `delta` and returns
    /// the loss together with the displacement actually applied in f32.
    fn probe(
        &mut self,
        analytic: f64,
        h: f64,
        at: impl FnOnce() -> String,
        mut eval: impl FnMut(f64) -> Result<(f64, f64)>,
    ) -> Result<()> {
        let (mid, _) = eval(0.0)?;
        let (hi, dh) = eval(h)?;
        let (lo, dl) = eval(-h)?;
        let forward = (hi - mid) / dh;
        let backward = (mid - lo) / -dl;
        let central = (hi - lo) / (dh - dl);
        if (forward - backward).abs() / central.abs().max(1.0) > KINK_TOLERANCE {
            self.skipped += 1;
            return Ok(());
        }
        let err = (analytic - central).abs() / central.abs().max(1.0);
        if err > self.worst {
            self.worst = err;
            self.worst_at = format!("{} analytic {analytic:.6} numeric {central:.6}", at());
        }
        self.checked += 1;
        Ok(())
    }

    fn report(self) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.worst,
            finite: true,
            checked: self.checked,
            skipped: self.skipped,
            worst_at: self.worst_at,
        }
    }
}

fn check_epsilon(op: &'static str, epsilon: f64) -> Result<()> {
    if !(1e-4..=1e-2).contains(&epsilon) {
        return Err(Error::invalid(op, format!("epsilon {epsilon} outside [1e-4, 1e-2]")));
    }
    Ok(())
}

fn evaluate<F>(f: &F, inputs: &[Tensor], track: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if track { g.variable(t.clone()) } else { g.input(t.clone()) })
        .collect();
    let mut out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        out = g.sum(out);
    }
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of `f` with respect to every element of every
/// input against central differences taken in f64 around the f32 inputs.
/// Non-scalar outputs are summed first.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_epsilon("finite_difference_check", epsilon)?;
    let (mut g, vars, out) = evaluate(&f, inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    if !analytic.iter().flatten().all(|v| v.is_finite()) {
        return Ok(GradCheckReport::non_finite());
    }

    let mut tally = Tally::default();
    let mut probe = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let x = t.data()[i];
            tally.probe(analytic[k][i] as f64, epsilon, || format!("input[{k}][{i}]"), |d| {
                let moved = x + d as f32;
                probe[k].data_mut()[i] = moved;
                let (g, _, o) = evaluate(&f, &probe, false)?;
                probe[k].data_mut()[i] = x;
                Ok((g.scalar_f64(o), moved as f64 - x as f64))
            })?;
        }
    }
    Ok(tally.report())
}

/// Like [`finite_difference_check`], but over named parameters. `f` builds a
/// scalar loss from `params`; `trainable` is true for the analytic pass.
/// `per_tensor` evenly spaced elements of every parameter tensor are probed.
pub fn parameter_check<F>(params: &Parameters, per_tensor: usize, epsilon: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Parameters, &mut Graph, bool) -> Result<Var>,
{
    check_epsilon("parameter_check", epsilon)?;
    let mut g = Graph::new();
    let out = f(params, &mut g, true)?;
    g.backward(out)?;
    let analytic: HashMap<&str, &[f32]> = g.param_grads().collect();
    if analytic.values().flat_map(|v| v.iter()).any(|v| !v.is_finite()) {
        return Ok(GradCheckReport::non_finite());
    }

    let mut tally = Tally::default();
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        let n = t.len();
        let picks = per_tensor.min(n).max(1);
        for j in 0..picks {
            let i = j * n / picks;
            let x = t.data()[i];
            let a = analytic.get(name).map_or(0.0, |g| g[i] as f64);
            tally.probe(a, epsilon, || format!("{name}[{i}]"), |d| {
                let moved = x + d as f32;
                probe.get_mut(name).expect("cloned").data_mut()[i] = moved;
                let mut g = Graph::new();
                let out = f(&probe, &mut g, false);
                probe.get_mut(name).expect("cloned").data_mut()[i] = x;
                Ok((g.scalar_f64(out?), moved as f64 - x as f64))
            })?;
        }
    }
    Ok(tally.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_is_exact() {
        let x = Tensor::from_fn(&[5], |i| i as f32 * 0.3 - 0.7);
        let r = finite_difference_check(|g, v| Ok(g.sum(v[0])), &[x], 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn epsilon_range_enforced() {
        let x = Tensor::zeros(&[1]);
        assert!(finite_difference_check(|g, v| Ok(g.sum(v[0])), &[x.clone()], 1e-1).is_err());
        assert!(finite_difference_check(|g, v| Ok(g.sum(v[0])), &[x], 1e-5).is_err());
    }

    #[test]
    fn probe_on_a_hinge_is_skipped() {
        // relu(x - 0.0003) at x = 0: the forward step crosses the hinge.
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = finite_difference_check(
            |g, v| {
                let c = g.input(Tensor::new(vec![1], vec![0.0003]).unwrap());
                let d = g.sub(v[0], c)?;
                let r = g.relu(d);
                Ok(g.scale(r, 100.0))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert_eq!((r.checked, r.skipped), (0, 1));
        assert!(!r.passed(1e-3));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // scale's backward is correct; fake a mismatch by differentiating a
        // function whose analytic path sees a constant.
        let x = Tensor::new(vec![2], vec![0.5, -0.25]).unwrap();
        let r = finite_difference_check(
            |g, v| {
                let frozen = g.input(g.value(v[0]).clone());
                let s = g.add(v[0], frozen)?;
                Ok(g.sum(s))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(!r.passed(1e-3), "{r:?}");
    }

    #[test]
    fn non_finite_gradient_is_a_failed_report() {
        let x = Tensor::new(vec![2], vec![f32::INFINITY, 1.0]).unwrap();
        let r = finite_difference_check(
            |g, v| {
                let z = g.input(Tensor::zeros(&[2]));
                let d = g.sub(v[0], z)?;
                let s = g.scale(d, 0.0);
                let m = g.mse(s, v[0])?;
                Ok(m)
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(!r.finite && !r.passed(1.0));
    }
}
