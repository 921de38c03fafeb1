//! Owned tensors and the named parameter store.

use std::collections::HashMap;
use std::fmt;

use crate::error::TensorError;

/// Dense row-major tensor with an optional gradient slot.
///
/// Tensors are plain values: they carry no graph linkage of their own. A
/// [`crate::Tape`] copies a tensor in when it is bound and writes gradients
/// back into the slot after a backward pass.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeData {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Vec<f64>) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        self.grad = Some(g);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Rows of the tensor viewed as a matrix whose last axis is the column axis.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.data.len() / self.cols().max(1),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeData {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

/// Handle of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
///
/// Names are dotted paths (`idm.l0.w`). Insertion order is preserved, which
/// makes checkpoints and checksums deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; panics on a duplicate name since that is a wiring bug.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Parameters whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.names[id.0].starts_with(prefix))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
    }

    /// Overwrites the values of `id`, keeping its shape.
    pub fn set_values(&mut self, id: ParamId, values: &[f64]) -> Result<(), TensorError> {
        let t = &mut self.tensors[id.0];
        if t.data.len() != values.len() {
            return Err(TensorError::ShapeData {
                shape: t.shape.clone(),
                len: values.len(),
            });
        }
        t.data.copy_from_slice(values);
        Ok(())
    }

    /// Copies every tensor of `other` whose name also exists here.
    /// Returns the number of tensors copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize, TensorError> {
        let mut n = 0;
        for (name, t) in other.iter() {
            if let Some(id) = self.id(name) {
                let mine = &self.tensors[id.0];
                if mine.shape != t.shape {
                    return Err(TensorError::ShapeMismatch {
                        op: "load_matching",
                        left: mine.shape.clone(),
                        right: t.shape.clone(),
                    });
                }
                self.tensors[id.0].data.copy_from_slice(&t.data);
                n += 1;
            }
        }
        Ok(n)
    }

    /// Sub-store containing only the parameters under `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            if name.starts_with(prefix) {
                let mut t = t.clone();
                t.clear_grad();
                out.add(name, t);
            }
        }
        out
    }

    /// SHA-256 over names and exact values of the parameters under `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            if !name.starts_with(prefix) {
                continue;
            }
            h.update(name.as_bytes());
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        crate::rng::hex(&h.finalize())
    }
}
