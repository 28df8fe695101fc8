//! Layered continuous parameters and the canonical flattening used by every
//! entropy computation.
//!
//! Positions are flattened layer by layer in registration order, row-major
//! within a layer. Tuples for order-`n` statistics are consecutive,
//! non-overlapping blocks of that flat stream and may straddle layers.

use serde::{Deserialize, Serialize};

use crate::error::{HempError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub layer_id: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub momentum_buffer: Vec<f64>,
}

impl LayerParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    layers: Vec<LayerParams>,
    total_count: usize,
}

/// A flat position resolved to its owning layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlatPos {
    pub layer: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TupleView {
    order: usize,
    tuples: Vec<Vec<usize>>,
    remainder: Vec<usize>,
}

impl TupleView {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Each tuple lists `order` flat positions.
    pub fn tuples(&self) -> &[Vec<usize>] {
        &self.tuples
    }

    pub fn remainder(&self) -> &[usize] {
        &self.remainder
    }

    pub fn tuple_count(&self) -> usize {
        self.tuples.len()
    }

    /// Number of parameters covered by complete tuples.
    pub fn covered(&self) -> usize {
        self.tuples.len() * self.order
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            layers: Vec::new(),
            total_count: 0,
        }
    }

    /// Registers a layer; its id is its registration ordinal.
    pub fn push_layer(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<usize> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(HempError::ShapeMismatch(format!("shape {shape:?} must have positive dims")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(HempError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(HempError::NonFinite(self.total_count + i));
        }
        let layer_id = self.layers.len();
        let momentum_buffer = vec![0.0; values.len()];
        self.total_count += values.len();
        self.layers.push(LayerParams {
            layer_id,
            name: name.into(),
            shape,
            values,
            momentum_buffer,
        });
        Ok(layer_id)
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layer(&self, id: usize) -> &LayerParams {
        &self.layers[id]
    }

    /// Mutable access to values and momentum. Shapes cannot change.
    pub fn layer_mut(&mut self, id: usize) -> (&mut [f64], &mut [f64]) {
        let layer = &mut self.layers[id];
        (&mut layer.values, &mut layer.momentum_buffer)
    }

    pub fn total_count(&self) -> usize {
        self.total_count
    }

    pub fn is_empty(&self) -> bool {
        self.total_count == 0
    }

    pub fn flatten_order(&self) -> Vec<FlatPos> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(layer, l)| (0..l.len()).map(move |offset| FlatPos { layer, offset }))
            .collect()
    }

    /// First flat position of each layer.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.layers
            .iter()
            .map(|l| {
                let start = acc;
                acc += l.len();
                start
            })
            .collect()
    }

    /// Owning layer of every flat position.
    pub fn layer_of_each(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| std::iter::repeat_n(i, l.len()))
            .collect()
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.values.iter().copied()).collect()
    }

    /// Overwrites all values from a flat vector in flatten order.
    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_count {
            return Err(HempError::ShapeMismatch(format!(
                "expected {} values, got {}",
                self.total_count,
                flat.len()
            )));
        }
        let mut rest = flat;
        for layer in &mut self.layers {
            let (head, tail) = rest.split_at(layer.values.len());
            layer.values.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn group_tuples(&self, n: usize) -> Result<TupleView> {
        group_flat(self.total_count, n)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Partitions `0..total` into consecutive blocks of `n` plus a remainder.
pub fn group_flat(total: usize, n: usize) -> Result<TupleView> {
    if n == 0 {
        return Err(HempError::invalid("tuple order must be at least 1"));
    }
    let full = total / n;
    let tuples = (0..full).map(|j| (j * n..(j + 1) * n).collect()).collect();
    let remainder = (full * n..total).collect();
    Ok(TupleView {
        order: n,
        tuples,
        remainder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(sizes: &[usize]) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, &n) in sizes.iter().enumerate() {
            s.push_layer(format!("l{i}"), vec![n], vec![0.0; n]).unwrap();
        }
        s
    }

    #[test]
    fn flatten_two_layers() {
        let s = store(&[2, 3]);
        let order = s.flatten_order();
        assert_eq!(order.len(), 5);
        assert_eq!(order[0], FlatPos { layer: 0, offset: 0 });
        assert_eq!(order[1], FlatPos { layer: 0, offset: 1 });
        assert_eq!(order[2], FlatPos { layer: 1, offset: 0 });
        assert_eq!(s.total_count(), 5);
    }

    #[test]
    fn flatten_empty() {
        assert!(ParamStore::new().flatten_order().is_empty());
    }

    #[test]
    fn flatten_square_row_major() {
        let mut s = ParamStore::new();
        s.push_layer("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let offsets: Vec<_> = s.flatten_order().iter().map(|p| p.offset).collect();
        assert_eq!(offsets, vec![0, 1, 2, 3]);
        assert_eq!(s.flat_values(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn group_examples() {
        let v = store(&[7]).group_tuples(2).unwrap();
        assert_eq!(v.tuple_count(), 3);
        assert_eq!(v.remainder(), &[6]);

        let v = store(&[6]).group_tuples(3).unwrap();
        assert_eq!(v.tuple_count(), 2);
        assert!(v.remainder().is_empty());

        let v = store(&[5]).group_tuples(1).unwrap();
        assert_eq!(v.tuple_count(), 5);
        assert!(v.remainder().is_empty());
    }

    #[test]
    fn group_rejects_zero_order() {
        assert!(store(&[4]).group_tuples(0).is_err());
    }

    #[test]
    fn rejects_bad_layers() {
        let mut s = ParamStore::new();
        assert!(s.push_layer("a", vec![2, 2], vec![0.0; 3]).is_err());
        assert!(matches!(
            s.push_layer("b", vec![2], vec![0.0, f64::NAN]),
            Err(HempError::NonFinite(1))
        ));
        assert!(s.push_layer("c", vec![0], vec![]).is_err());
    }

    #[test]
    fn set_flat_values_roundtrip() {
        let mut s = store(&[2, 3]);
        let v = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        s.set_flat_values(&v).unwrap();
        assert_eq!(s.layer(1).values, vec![3.0, 4.0, 5.0]);
        assert_eq!(s.flat_values(), v);
        assert!(s.set_flat_values(&v[..4]).is_err());
    }

    proptest! {
        #[test]
        fn grouping_is_a_partition(total in 0usize..10_000, n in 1usize..9) {
            let v = group_flat(total, n).unwrap();
            prop_assert!(v.remainder().len() < n);
            let mut seen = vec![false; total];
            for t in v.tuples() {
                prop_assert_eq!(t.len(), n);
                for &p in t {
                    prop_assert!(!seen[p]);
                    seen[p] = true;
                }
            }
            for &p in v.remainder() {
                prop_assert!(!seen[p]);
                seen[p] = true;
            }
            prop_assert!(seen.into_iter().all(|b| b));
        }

        #[test]
        fn flatten_is_stable(sizes in proptest::collection::vec(1usize..50, 0..6)) {
            let s = store(&sizes);
            prop_assert_eq!(s.flatten_order(), s.flatten_order());
            prop_assert_eq!(s.flatten_order().len(), sizes.iter().sum::<usize>());
        }
    }
}
