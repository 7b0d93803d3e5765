use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use super::archive::{read_archive, write_archive};
use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub(crate) struct Param {
    pub(crate) name: String,
    pub(crate) value: Rc<Tensor>,
    pub(crate) grad: Option<Tensor>,
    pub(crate) m: Tensor,
    pub(crate) v: Tensor,
}

/// Named trainable tensors together with their gradients and Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    pub(crate) params: Vec<Param>,
    index: BTreeMap<String, usize>,
    pub(crate) adam_step: u64,
}

/// Parameters of one store bound as leaves on a tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }
}

const MOMENT_M: &str = "#adam.m";
const MOMENT_V: &str = "#adam.v";
const ADAM_STEP: &str = "#adam.step";

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if name.contains('#') {
            return Err(Error::config(format!("parameter name `{name}` may not contain '#'")));
        }
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.clone(),
            value: Rc::new(value),
            grad: None,
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
        });
        self.index.insert(name, id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("`{}` has shape {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = Rc::new(value);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn adam_step(&self) -> u64 {
        self.adam_step
    }

    /// Binds every parameter as a gradient-receiving leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, true)
    }

    /// Binds every parameter as a constant; gradients still flow through
    /// the computation to other leaves but not into these parameters.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf_shared(Rc::clone(&p.value), requires_grad))
            .collect();
        Bound { vars }
    }

    /// Adds the gradients of `bound` leaves into the stored gradients.
    pub fn accumulate(&mut self, bound: &Bound<'_>, grads: &Gradients) {
        for (p, var) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*var) {
                match &mut p.grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => p.grad = Some(g.clone()),
                }
            }
        }
    }

    /// Treats unreached parameters as having zero gradient.
    pub fn fill_missing_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape().to_vec()));
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Global L2 norm over all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .map(|g| g.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Copies values (not moments) from `other`, matching by name.
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .ok_or_else(|| Error::config(format!("no parameter `{}` to copy", p.name)))?;
            let v = other.value(src);
            if v.shape() != p.value.shape() {
                return Err(Error::shape("copy_values_from", p.name.clone()));
            }
            p.value = Rc::new(v.clone());
        }
        Ok(())
    }

    /// `self = (1 - tau) * self + tau * other`, matching by position.
    pub fn soft_update_from(&mut self, other: &ParameterStore, tau: f64) {
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            let v = Rc::make_mut(&mut dst.value);
            for (a, b) in v.data_mut().iter_mut().zip(src.value.data()) {
                *a = (1.0 - tau) * *a + tau * b;
            }
        }
    }

    /// Writes values, moments and the optimizer step counter.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut records: Vec<(String, Tensor)> = Vec::with_capacity(self.params.len() * 3 + 1);
        for p in &self.params {
            records.push((p.name.clone(), (*p.value).clone()));
        }
        for p in &self.params {
            records.push((format!("{}{MOMENT_M}", p.name), p.m.clone()));
            records.push((format!("{}{MOMENT_V}", p.name), p.v.clone()));
        }
        // u64 fits exactly in an f64 mantissa for any realistic step count.
        records.push((ADAM_STEP.to_string(), Tensor::scalar(self.adam_step as f64)));
        write_archive(path, &records)
    }

    /// Reads a store written by [`ParameterStore::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let records = read_archive(path)?;
        let mut store = ParameterStore::new();
        let mut moments = Vec::new();
        for (name, t) in records {
            if name == ADAM_STEP {
                store.adam_step = t.item() as u64;
            } else if name.contains('#') {
                moments.push((name, t));
            } else {
                store.add(name, t)?;
            }
        }
        for (name, t) in moments {
            let (base, kind) = match name.rsplit_once('#') {
                Some((base, kind)) => (base, kind),
                None => unreachable!(),
            };
            let id = store.id(base).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                detail: format!("moment for unknown parameter `{base}`"),
            })?;
            let p = &mut store.params[id.0];
            if t.shape() != p.value.shape() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("moment shape mismatch for `{base}`"),
                });
            }
            match kind {
                "adam.m" => p.m = t,
                "adam.v" => p.v = t,
                other => {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        detail: format!("unknown record suffix `{other}`"),
                    })
                }
            }
        }
        Ok(store)
    }

    /// Loads a saved store into this one, requiring identical names and shapes.
    pub fn load_into(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let loaded = Self::load(path)?;
        if loaded.len() != self.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("expected {} parameters, found {}", self.len(), loaded.len()),
            });
        }
        for p in &self.params {
            let ok = loaded
                .id(&p.name)
                .map(|id| loaded.value(id).shape() == p.value.shape())
                .unwrap_or(false);
            if !ok {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("parameter `{}` missing or reshaped", p.name),
                });
            }
        }
        // Restore in this store's order so existing ParamIds stay valid.
        let mut reordered = ParameterStore::new();
        for p in &self.params {
            let src = &loaded.params[loaded.id(&p.name).unwrap().0];
            let id = reordered.add(p.name.clone(), (*src.value).clone())?;
            reordered.params[id.0].m = src.m.clone();
            reordered.params[id.0].v = src.v.clone();
        }
        reordered.adam_step = loaded.adam_step;
        *self = reordered;
        Ok(())
    }

    /// Bitwise equality of names, shapes and values.
    pub fn values_bitwise_eq(&self, other: &ParameterStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
