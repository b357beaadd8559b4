//! Named parameter arrays shared by the networks, optimizers and checkpoints.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::Array;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    arrays: Vec<Array>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array) -> usize {
        self.names.push(name.into());
        self.arrays.push(value);
        self.arrays.len() - 1
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[Array] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Array] {
        &mut self.arrays
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.arrays)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> &Array {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        &self.arrays[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        &mut self.arrays[i]
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.arrays
            .iter()
            .flat_map(|a| a.data().iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Dimension(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for a in &mut self.arrays {
            let n = a.len();
            a.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Registers every array as a leaf on `tape`, in order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.arrays.iter().map(|a| tape.leaf(a.clone())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().all(Array::all_finite)
    }
}

/// Concatenates per-array gradients into one flat vector.
pub fn flatten_grads(grads: &[Array]) -> Vec<f64> {
    grads.iter().flat_map(|a| a.data().iter().copied()).collect()
}
