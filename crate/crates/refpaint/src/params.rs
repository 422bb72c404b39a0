//! Named parameter store with stable iteration order.
//!
//! Every learnable tensor lives here under a dotted path name (for example
//! `main.enc0.blk1.conv1.w`). Insertion order is the canonical order: the
//! optimizer walks it, the checkpoint writes it, and two stores built from
//! the same config always agree on it.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.idx(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.idx(name);
        &mut self.tensors[i]
    }

    pub fn by_idx(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn by_idx_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name_of(&self, i: usize) -> &str {
        &self.names[i]
    }

    /// Iterate `(name, tensor)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn total_elems(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Largest absolute elementwise difference against another store with the
    /// same layout.
    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        assert_eq!(self.names, other.names, "param stores differ in layout");
        self.tensors
            .iter()
            .zip(other.tensors.iter())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

// ── Initialization ──────────────────────────────────────────────────────────

/// Truncated-normal draw: resample until `|z| ≤ 2σ`.
pub fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Tensor of truncated-normal values with the given std.
pub fn trunc_normal_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| trunc_normal(rng, std)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::stream_rng;

    #[test]
    fn insertion_order_is_stable() {
        let mut p = ParamStore::new();
        p.insert("b.w", Tensor::zeros(vec![2]));
        p.insert("a.w", Tensor::zeros(vec![3]));
        let names: Vec<_> = p.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["b.w", "a.w"]);
        assert_eq!(p.idx("a.w"), 1);
        assert_eq!(p.total_elems(), 5);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_panic() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::zeros(vec![1]));
        p.insert("x", Tensor::zeros(vec![1]));
    }

    #[test]
    fn trunc_normal_respects_bound() {
        let mut rng = stream_rng(1, &[0]);
        for _ in 0..10_000 {
            let v = trunc_normal(&mut rng, 0.02);
            assert!(v.abs() <= 0.04 + 1e-12);
        }
    }
}
