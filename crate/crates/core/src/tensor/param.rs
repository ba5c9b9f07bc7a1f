use std::cell::RefCell;
use std::collections::BTreeMap;

use super::{Gradients, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named trainable tensor plus its most recent gradient.
#[derive(Clone, Debug)]
pub struct Parameter<F: Real = f32> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Option<Tensor<F>>,
    pub requires_grad: bool,
}

/// Flat, ordered registry of every parameter in a model.
///
/// Order is registration order; checkpoints and the optimizer rely on it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Real = f32> {
    params: Vec<Parameter<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            requires_grad: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set_value",
                p.name.clone(),
                format!("{:?}", p.value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    requires_grad: p.requires_grad,
                })
                .collect(),
        }
    }

    /// Binds this store to a tape for one forward pass.
    pub fn bind<'t, 's>(&'s self, tape: &'t Tape<F>) -> Binding<'t, 's, F> {
        Binding {
            tape,
            store: self,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    /// Stores the gradients collected by a binding into `grad` fields.
    /// Parameters that took no part in the loss get a zero gradient.
    pub fn set_grads(&mut self, grads: Vec<(ParamId, Tensor<F>)>) {
        for p in &mut self.params {
            p.grad = p.requires_grad.then(|| Tensor::zeros(p.value.shape().to_vec()));
        }
        for (id, g) in grads {
            self.params[id.0].grad = Some(g);
        }
    }
}

/// Lazily turns parameters into tape leaves, at most once per pass.
pub struct Binding<'t, 's, F: Real> {
    tape: &'t Tape<F>,
    store: &'s ParamStore<F>,
    vars: RefCell<BTreeMap<ParamId, Var<'t, F>>>,
}

impl<'t, F: Real> Binding<'t, '_, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'t, F> {
        self.vars
            .borrow_mut()
            .entry(id)
            .or_insert_with(|| {
                let p = self.store.get(id);
                if p.requires_grad {
                    self.tape.leaf(p.value.clone())
                } else {
                    self.tape.constant(p.value.clone())
                }
            })
            .clone()
    }

    /// Gradients for every parameter touched in this pass.
    pub fn collect(&self, grads: &Gradients<F>) -> Vec<(ParamId, Tensor<F>)> {
        self.vars
            .borrow()
            .iter()
            .filter(|(_, v)| v.is_tracked())
            .map(|(&id, v)| (id, grads.get_or_zeros(v)))
            .collect()
    }
}
