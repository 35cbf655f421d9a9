use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Float, Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f32),
    /// Uniform on `[-b, b]`.
    Uniform(f32),
    /// Uniform with variance `gain² / fan_in`.
    Fan { fan_in: usize, gain: f32 },
    Normal(f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Named, hierarchically addressed network parameters in registration order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let n: usize = shape.iter().product();
        let value: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
            Init::Fan { fan_in, gain } => {
                let b = gain * (3.0 / fan_in.max(1) as f32).sqrt();
                (0..n).map(|_| self.rng.random_range(-b..=b)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0f32, std).expect("valid normal");
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
        };
        let decay = shape.len() >= 2;
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), shape: shape.to_vec(), value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Overwrites a parameter value; panics on a size mismatch.
    pub fn set(&mut self, id: ParamId, value: &[f32]) {
        let p = &mut self.params[id.0];
        assert_eq!(p.value.len(), value.len(), "set {}: size mismatch", p.name);
        p.value.copy_from_slice(value);
    }

    /// Flattened copy of all parameter values.
    pub fn flat(&self) -> Vec<f32> {
        self.params.iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f32]) {
        assert_eq!(flat.len(), self.num_scalars(), "load_flat size mismatch");
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

/// One forward pass over a [`ParamStore`]: materializes each parameter once
/// as a tensor leaf and carries the train/eval mode.
pub struct Ctx<'a, T: Float = f32> {
    store: &'a ParamStore,
    cache: RefCell<Vec<Option<Tensor<T>>>>,
    train: bool,
    track: bool,
    perturb: Option<(ParamId, usize, f64)>,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore, train: bool, track: bool) -> Self {
        Ctx { store, cache: RefCell::new(vec![None; store.len()]), train, track, perturb: None }
    }

    /// Eval mode without gradient tracking.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, false, false)
    }

    /// Train mode, tracking parameter gradients.
    pub fn train(store: &'a ParamStore) -> Self {
        Self::new(store, true, true)
    }

    /// Adds `delta` to element `index` of one parameter (finite-difference probes).
    pub fn with_perturbation(mut self, id: ParamId, index: usize, delta: f64) -> Self {
        self.perturb = Some((id, index, delta));
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Tensor<T> {
        if let Some(t) = &self.cache.borrow()[id.0] {
            return t.clone();
        }
        let p = self.store.get(id);
        let mut v: Vec<T> = p.value.iter().map(|&x| T::cast(x as f64)).collect();
        if let Some((pid, i, d)) = self.perturb {
            if pid == id {
                v[i] += T::cast(d);
            }
        }
        let t = if self.track { Tensor::leaf(v, &p.shape) } else { Tensor::new(v, &p.shape) };
        self.cache.borrow_mut()[id.0] = Some(t.clone());
        t
    }

    /// Gradients for every parameter touched in this pass, indexed by id.
    pub fn param_grads(&self, g: &Gradients<T>) -> Vec<Option<Vec<T>>> {
        self.cache.borrow().iter().map(|t| t.as_ref().and_then(|t| g.get(t)).map(<[T]>::to_vec)).collect()
    }
}
