//! Dense f32 tensors and named parameter sets.

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense row-major value grid with an optional gradient slot of the same shape.
///
/// Activations are laid out `[channels, time, height, width]`; convolution
/// kernels `[out_channels, in_channels, time, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", "element count", n, data.len()));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f32]> {
        self.grad.as_deref_mut()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        assert_eq!(g.len(), self.data.len(), "gradient length");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", "element count", self.data.len(), n));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets the tensor as `[C, T, H, W]`.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape.as_slice() {
            [c, t, h, w] => Ok([c, t, h, w]),
            _ => Err(Error::shape(op, "rank", 4, self.rank())),
        }
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Copies channel `c` of a `[C, ...]` tensor.
    pub fn channel(&self, c: usize) -> Tensor {
        let plane: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[c * plane..(c + 1) * plane].to_vec(),
            grad: None,
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::invalid(
                    "stack",
                    format!("shape {:?} differs from {:?}", p.shape, first.shape),
                ));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }
}

/// Ordered, uniquely named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parameters {
    map: IndexMap<String, Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::invalid("parameters", format!("duplicate name {name}")));
        }
        self.map.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid("parameters", format!("missing {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.map.values_mut().for_each(Tensor::clear_grad);
    }

    /// SHA-256 over names, shapes and values; equal digests mean bitwise-equal weights.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.map {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &Parameters, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, t) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let dst = self
                .map
                .get_mut(name)
                .ok_or_else(|| Error::invalid("parameters", format!("missing {name}")))?;
            if dst.shape() != t.shape() {
                return Err(Error::invalid(
                    "parameters",
                    format!("{name}: shape {:?} vs {:?}", dst.shape(), t.shape()),
                ));
            }
            dst.data_mut().copy_from_slice(t.data());
            n += 1;
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(&[2]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
    }

    #[test]
    fn duplicate_parameter_names_rejected() {
        let mut p = Parameters::new();
        p.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f32);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.channel(1).data()[0], 12.0);
    }
}
