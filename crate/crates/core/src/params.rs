//! Named parameter storage shared by the model, optimizer and checkpoints.
//!
//! A [`ParamStore`] is plain owned data (`Send`), so each execution context can
//! [`bind`](ParamStore::bind) its own gradient-tracking leaves and hand the
//! gradients back by name.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{arg_err, Result};
use crate::tensor::Tensor;

/// Rounds to the nearest `f32`; parameters always live on that grid.
pub fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<f64>,
    ) -> Result<()> {
        let name = name.into();
        if data.len() != shape.iter().product::<usize>() {
            return Err(arg_err!(
                "parameter {name}: shape {shape:?} vs {} values",
                data.len()
            ));
        }
        if self.index.contains_key(&name) {
            return Err(arg_err!("duplicate parameter {name}"));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            data: data.into_iter().map(to_f32_grid).collect(),
        });
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.index.get(name).map(|&i| &mut self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Gradient-tracking leaves for one forward/backward pass.
    pub fn bind(&self) -> Params {
        let map = self
            .entries
            .iter()
            .map(|e| {
                let t = Tensor::param(&e.shape, e.data.clone()).expect("validated on insert");
                (e.name.clone(), t)
            })
            .collect();
        Params { map }
    }

    /// Constant (non-tracking) tensors, for inference.
    pub fn bind_frozen(&self) -> Params {
        let map = self
            .entries
            .iter()
            .map(|e| {
                let t = Tensor::new(&e.shape, e.data.clone()).expect("validated on insert");
                (e.name.clone(), t)
            })
            .collect();
        Params { map }
    }

    /// Gradients of a bound set in store order; unreached parameters get zeros.
    pub fn collect_grads(&self, bound: &Params) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .map(|e| {
                bound
                    .map
                    .get(&e.name)
                    .and_then(|t| t.grad())
                    .unwrap_or_else(|| vec![0.0; e.data.len()])
            })
            .collect()
    }
}

/// Name-indexed tensors for one pass.
#[derive(Debug, Clone, Default)]
pub struct Params {
    map: HashMap<String, Tensor>,
}

impl Params {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| arg_err!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }
}

/// Glorot-uniform draw for a weight with the given fan-in/fan-out.
pub fn glorot(rng: &mut impl Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}
