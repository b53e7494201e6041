//! Named, ordered parameter storage.
//!
//! Parameters live outside any computation graph; each training step binds
//! them into a fresh graph as gradient-tracked leaves. Order is insertion
//! order and is part of the checkpoint contract.

use crate::error::{CoreError, Result};
use crate::tensor::{Graph, NodeId, Real};
use rand::Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

/// An ordered set of named parameters. Immutable snapshots of a `ParamSet`
/// are plain values and may be sent across threads.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    entries: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(CoreError::contract(format!("duplicate parameter `{}`", name)));
        }
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(CoreError::contract(format!(
                "parameter `{}`: shape {:?} does not match {} values",
                name,
                shape,
                value.len()
            )));
        }
        let i = self.entries.len();
        self.index.insert(name.clone(), i);
        self.entries.push(Param { name, shape, value });
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn entry(&self, i: usize) -> &Param<T> {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.entries[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Bind every parameter into `g` as a tracked leaf, in storage order.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Vec<NodeId>> {
        self.entries
            .iter()
            .map(|p| g.leaf(&p.shape, p.value.clone()))
            .collect()
    }

    /// Read gradients back from a graph after `backward`, in storage order.
    pub fn grads_from(&self, g: &Graph<T>, ids: &[NodeId]) -> Vec<Vec<T>> {
        ids.iter().map(|&id| g.grad(id).to_vec()).collect()
    }

    pub fn to_f32(&self) -> ParamSet<f32> {
        let mut out = ParamSet::new();
        for p in &self.entries {
            out.push(
                p.name.clone(),
                p.shape.clone(),
                p.value.iter().map(|v| v.as_f32()).collect(),
            )
            .expect("names already unique");
        }
        out
    }

    pub fn from_f32(src: &ParamSet<f32>) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for p in src.iter() {
            out.push(
                p.name.clone(),
                p.shape.clone(),
                p.value.iter().map(|&v| T::from_f32(v)).collect(),
            )
            .expect("names already unique");
        }
        out
    }
}

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; draws are made in f64
/// so parameter streams are identical across float widths.
pub fn uniform_init<T: Real, R: Rng>(rng: &mut R, fan_in: usize, n: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut p: ParamSet<f64> = ParamSet::new();
        p.push("w", vec![2], vec![1.0, 2.0]).unwrap();
        assert!(p.push("w", vec![1], vec![0.0]).is_err());
    }

    #[test]
    fn f32_round_trip_preserves_order_and_names() {
        let mut p: ParamSet<f64> = ParamSet::new();
        p.push("b", vec![1], vec![0.5]).unwrap();
        p.push("a", vec![2], vec![1.0, -1.0]).unwrap();
        let q = p.to_f32();
        let names: Vec<&str> = q.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["b", "a"]);
    }
}
