//! Named parameters, parameter tables and gradient routing.

use std::collections::{BTreeMap, HashMap};

use crate::error::{dim_err, AutodiffError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Identifies one parameter table among several that feed the same tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StoreId(pub u32);

/// Location of a parameter: owning table plus slot within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub store: StoreId,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub id: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    has_grad: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(id: impl Into<String>, value: Tensor<T>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            id: id.into(),
            value,
            grad,
            trainable,
            has_grad: false,
        }
    }

    /// True once a backward pass has accumulated into `grad` since the last reset.
    pub fn has_grad(&self) -> bool {
        self.has_grad
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        if g.shape() != self.value.shape() {
            return dim_err(
                "accumulate_grad",
                format!("{}: {:?} vs {:?}", self.id, g.shape(), self.value.shape()),
            );
        }
        self.grad.add_assign(g);
        self.has_grad = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
        self.has_grad = false;
    }
}

/// Ordered table of uniquely named parameters.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    id: StoreId,
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(id: StoreId) -> Self {
        Self {
            id,
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    /// Re-labels the table; keys handed out earlier become stale.
    pub fn with_id(mut self, id: StoreId) -> Self {
        self.id = id;
        self
    }

    pub fn insert(&mut self, param: Parameter<T>) -> Result<ParamKey> {
        if self.index.contains_key(&param.id) {
            return Err(AutodiffError::Config(format!(
                "duplicate parameter id `{}`",
                param.id
            )));
        }
        let index = self.params.len();
        self.index.insert(param.id.clone(), index);
        self.params.push(param);
        Ok(ParamKey {
            store: self.id,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn key_of(&self, id: &str) -> Option<ParamKey> {
        self.index.get(id).map(|&index| ParamKey {
            store: self.id,
            index,
        })
    }

    pub fn get(&self, id: &str) -> Option<&Parameter<T>> {
        self.index.get(id).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Parameter<T>> {
        self.index.get(id).map(|&i| &mut self.params[i])
    }

    pub fn by_index(&self, index: usize) -> &Parameter<T> {
        &self.params[index]
    }

    pub fn by_index_mut(&mut self, index: usize) -> &mut Parameter<T> {
        &mut self.params[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total scalar count over all entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds every gradient addressed to this table; others are ignored.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (key, g) in grads.iter() {
            if key.store == self.id {
                self.params[key.index].accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn set_trainable(&mut self, ids: &[String], trainable: bool) {
        for id in ids {
            if let Some(p) = self.get_mut(id) {
                p.trainable = trainable;
            }
        }
    }
}

/// Resolves parameter names to values for a forward pass.
pub trait ParamSource<T> {
    fn lookup(&self, id: &str) -> Option<(ParamKey, &Parameter<T>)>;
}

impl<T: Scalar> ParamSource<T> for ParamStore<T> {
    fn lookup(&self, id: &str) -> Option<(ParamKey, &Parameter<T>)> {
        let key = self.key_of(id)?;
        Some((key, &self.params[key.index]))
    }
}

/// Gradients produced by one backward pass, keyed by parameter location.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    map: BTreeMap<ParamKey, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub(crate) fn add(&mut self, key: ParamKey, g: Tensor<T>) {
        match self.map.get_mut(&key) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.map.insert(key, g);
            }
        }
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Tensor<T>> {
        self.map.get(key)
    }

    pub fn get_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor<T>> {
        self.map.get_mut(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
