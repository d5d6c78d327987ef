use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FobaError, Result};
use crate::nn::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(1 / fan_in)` (kaiming-uniform with negative slope √5).
    KaimingUniform { fan_in: usize },
    Constant(f64),
    Values(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub init: Init,
    pub trainable: bool,
}

/// Ordered, named parameter collection.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, init: Init) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(FobaError::config(name, "duplicate parameter name"));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            init,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Same names and shapes, values converted to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    init: p.init.clone(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

pub fn init_tensor<T: Real>(shape: &[usize], init: &Init, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    Ok(match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::Constant(v) => Tensor::full(shape, T::from_f64_lossy(*v)),
        Init::KaimingUniform { fan_in } => {
            let bound = (1.0 / (*fan_in).max(1) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                .collect();
            Tensor::from_vec(shape, data)?
        }
        Init::Values(v) => Tensor::from_f64(shape, v)?,
    })
}

/// Hierarchical parameter registration with dotted names.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    zero_init: bool,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            zero_init: false,
        }
    }

    /// Every weight registered below this builder (and its children) is
    /// zero-initialised; norm scales stay at one.
    pub fn zero_init(mut self, on: bool) -> Self {
        self.zero_init = on;
        self
    }

    pub fn is_zero_init(&self) -> bool {
        self.zero_init
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = self.qualify(name);
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
            zero_init: self.zero_init,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Registers a parameter. Under `zero_init` every scheme except `Ones`
    /// collapses to zeros; the random stream is still advanced so that
    /// sibling parameters keep their values.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = self.qualify(name);
        let mut value = init_tensor(shape, &init, self.rng)?;
        let init = if self.zero_init && init != Init::Ones {
            value = Tensor::zeros(shape);
            Init::Zeros
        } else {
            init
        };
        self.store.insert(&full, value, init)
    }
}
