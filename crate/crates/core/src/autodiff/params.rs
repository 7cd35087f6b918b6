use super::{Gradients, Real, Tape, Tensor, Var};
use crate::{Error, Result};
use std::collections::HashMap;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (n, t) in &self.entries {
            out.insert(n.clone(), t.cast());
        }
        out
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix_stripped(&self, prefix: &str) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (n, t) in &self.entries {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    /// Copies every entry of `other` in under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet<T>) {
        for (n, t) in &other.entries {
            self.insert(format!("{prefix}{n}"), t.clone());
        }
    }

    /// Places every tensor on the tape, as gradient-receiving leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind<'a>(&'a self, tape: &mut Tape<T>, trainable: bool) -> Result<Bound<'a>> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound {
            index: &self.index,
            vars,
        })
    }

    /// Handles for tensors already placed on a tape, in parameter order.
    pub fn bound_to(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.entries.len() {
            return Err(Error::shape("bind", format!("{} handles for {} parameters", vars.len(), self.entries.len())));
        }
        Ok(Bound {
            index: &self.index,
            vars,
        })
    }

    /// Little-endian bytes of every tensor, in order; used for freeze checks.
    pub fn fingerprint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, t) in &self.entries {
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn check_same_layout(&self, other: &ParamSet<T>) -> Result<()> {
        if self.entries.len() != other.entries.len()
            || self
                .entries
                .iter()
                .zip(&other.entries)
                .any(|((na, ta), (nb, tb))| na != nb || ta.shape() != tb.shape())
        {
            return Err(Error::shape("params", "parameter layouts differ"));
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamSet`].
pub struct Bound<'a> {
    index: &'a HashMap<String, usize>,
    vars: Vec<Var>,
}

impl Bound<'_> {
    /// Handle of parameter `name`.
    ///
    /// # Panics
    /// If the name is not part of the bound set; names are fixed by the model code.
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name:?}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with the parameter order.
    pub fn collect<T: Real>(&self, grads: &Gradients<T>, tape: &Tape<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect()
    }
}
