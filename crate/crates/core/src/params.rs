//! Named parameter registry shared by fields, masks and backbones.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group: masks train with their own learning rate; frozen tensors never update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Main,
    Mask,
    Frozen,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    groups: Vec<Group>,
}

/// One serialized tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor. Panics on a duplicate name: names are built by the crate itself.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: Group) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        self.groups.push(group);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(value.shape(), self.values[id.0].shape(), "shape change for {}", self.names[id.0]);
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.groups[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Number of scalars in trainable groups.
    pub fn trainable_count(&self) -> usize {
        self.ids().filter(|&i| self.group(i) != Group::Frozen).map(|i| self.get(i).numel()).sum()
    }

    /// Record every parameter on `tape`. Frozen tensors become constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self
            .values
            .iter()
            .zip(&self.groups)
            .map(|(v, g)| if *g == Group::Frozen { tape.constant(v.clone()) } else { tape.var(v.clone()) })
            .collect();
        Bound { vars }
    }

    /// Record every parameter as a constant, for evaluation without gradients.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound { vars: self.values.iter().map(|v| tape.constant(v.clone())).collect() }
    }

    /// Constant binding except for `id`, which is replaced by `var`. Used to probe the
    /// gradient of one tensor with [`crate::autodiff::finite_diff_check`].
    pub fn bind_override<'t>(&self, tape: &'t Tape, id: ParamId, var: Var<'t>) -> Bound<'t> {
        let mut b = self.bind_constant(tape);
        b.vars[id.0] = var;
        b
    }

    pub fn to_document(&self) -> BTreeMap<String, ShapedArray> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), ShapedArray { shape: v.shape().to_vec(), data: v.data().to_vec() }))
            .collect()
    }

    /// Overwrite values from a document. Every registered name must be present with its shape.
    pub fn load_document(&mut self, doc: &BTreeMap<String, ShapedArray>) -> Result<()> {
        for i in 0..self.values.len() {
            let name = &self.names[i];
            let arr = doc.get(name).ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if arr.shape != self.values[i].shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    arr.shape,
                    self.values[i].shape()
                )));
            }
            self.values[i] = Tensor::new(&arr.shape, arr.data.clone())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("documents always serialize")
    }

    pub fn load_json(&mut self, text: &str) -> Result<()> {
        let doc: BTreeMap<String, ShapedArray> =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        self.load_document(&doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.load_json(&text)
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn tape(&self) -> &'t Tape {
        self.vars[0].tape()
    }

    /// Gradients in store order; untouched parameters get zeros.
    pub fn collect(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.wrt(*v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_is_exact() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::new(&[2], vec![0.1, std::f64::consts::PI / 3.0]).unwrap(), Group::Main);
        s.add("b", Tensor::vector(vec![1e-300, -7.125e17]), Group::Mask);
        let text = s.to_json();
        let mut t = s.clone();
        t.set(a, Tensor::zeros(&[2]));
        t.load_json(&text).unwrap();
        assert_eq!(t.get(a), s.get(a));
        assert_eq!(t.to_json(), text);
    }

    #[test]
    fn load_rejects_missing_and_misshaped() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2, 2]), Group::Main);
        assert!(s.load_json("{}").is_err());
        assert!(s.load_json(r#"{"w":{"shape":[4],"data":[0,0,0,0]}}"#).is_err());
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut s = ParamStore::new();
        let f = s.add("f", Tensor::scalar(1.0), Group::Frozen);
        let m = s.add("m", Tensor::scalar(1.0), Group::Main);
        let tape = Tape::new();
        let b = s.bind(&tape);
        assert!(!b.get(f).requires_grad());
        assert!(b.get(m).requires_grad());
        assert_eq!(s.trainable_count(), 1);
    }
}
