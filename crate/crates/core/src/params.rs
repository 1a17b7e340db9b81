//! Named parameter storage and its binding onto a tape.

use std::collections::HashMap;
use std::path::Path;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{read_cant, write_cant, Real, Tensor};

/// Ordered collection of named tensors. Iteration order is insertion order,
/// which fixes the order of optimizer state and checkpoint files.
#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("parameter `{name}` registered twice")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::Usage(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar count of the parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter as a trainable leaf on `tape`.
    pub fn bind<'t, 's>(&'s self, tape: &'t Tape<T>) -> Result<Bound<'t, 's, T>> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { set: self, vars })
    }

    /// Wraps variables already recorded on a tape, one per parameter in
    /// set order. Used when a caller such as the gradient checker owns the
    /// leaves.
    pub fn bind_vars<'t, 's>(&'s self, vars: &[Var<'t, T>]) -> Result<Bound<'t, 's, T>> {
        if vars.len() != self.len() {
            return Err(Error::Usage(format!(
                "{} variables supplied for {} parameters",
                vars.len(),
                self.len()
            )));
        }
        for ((name, t), v) in self.iter().zip(vars) {
            if v.shape() != t.shape() {
                return Err(Error::dim(
                    "bind_vars",
                    format!("`{name}` expects {:?}, got {:?}", t.shape(), v.shape()),
                ));
            }
        }
        Ok(Bound {
            set: self,
            vars: vars.to_vec(),
        })
    }

    /// Writes one `<name>.cant` file per parameter into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in self.iter() {
            write_cant(dir.join(format!("{name}.cant")), t)?;
        }
        Ok(())
    }

    /// Replaces every tensor with the file of the same name in `dir`.
    /// Shapes must match the current ones.
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let path = dir.join(format!("{name}.cant"));
            let t: Tensor<T> = read_cant(&path)?;
            if t.shape() != slot.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}

/// A [`ParamSet`] recorded on one tape.
pub struct Bound<'t, 's, T: Real> {
    set: &'s ParamSet<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, '_, T> {
    pub fn var(&self, name: &str) -> Result<Var<'t, T>> {
        self.set
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn opt_var(&self, name: &str) -> Option<Var<'t, T>> {
        self.set.index.get(name).map(|&i| self.vars[i])
    }

    /// Gradients aligned with the parameter order of the set.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| grads.take(*v)).collect()
    }
}

/// Kaiming-uniform initializer for a weight with the given fan-in:
/// `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut RngState) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.uniform_in(-bound, bound)))
}
