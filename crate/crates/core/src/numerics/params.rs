use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Which part of the network a parameter belongs to. Training stages freeze
/// or schedule parameters per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Encoder, query generators, both decoders and the localization heads.
    Detector,
    /// Contextual attention, prefix projection and the caption head.
    Caption,
    /// Never updated (Fourier frequency matrices).
    Fixed,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Detector => "detector",
            ParamGroup::Caption => "caption",
            ParamGroup::Fixed => "fixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "detector" => Some(ParamGroup::Detector),
            "caption" => Some(ParamGroup::Caption),
            "fixed" => Some(ParamGroup::Fixed),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    pub grad: Tensor<f32>,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names are unique paths; registering a name twice panics
    /// because it means two modules were built with the same scope.
    pub fn add(&mut self, name: &str, value: Tensor<f32>, group: ParamGroup) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            group,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Global L2 norm of all gradients, accumulated in f64 in parameter order.
    pub fn grad_norm(&self) -> f64 {
        let mut s = 0.0f64;
        for p in &self.params {
            for &g in p.grad.data() {
                s += (g as f64) * (g as f64);
            }
        }
        s.sqrt()
    }

    /// SHA-256 over the names, shapes and raw bytes of every parameter in `groups`.
    pub fn hash_groups(&self, groups: &[ParamGroup]) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Scoped helper that creates parameters with the default initialization:
/// weights uniform in ±1/√fan_in, biases zero.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
    group: ParamGroup,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, group: ParamGroup) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
            group,
        }
    }

    /// Runs `f` with `name` appended to the parameter path.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_>) -> R) -> R {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut child = Init {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
            group: self.group,
        };
        f(&mut child)
    }

    pub fn with_group<R>(&mut self, group: ParamGroup, f: impl FnOnce(&mut Init<'_>) -> R) -> R {
        let mut child = Init {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix: self.prefix.clone(),
            group,
        };
        f(&mut child)
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f32) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        let path = self.path(name);
        self.store
            .add(&path, Tensor::from_parts(shape.to_vec(), data), self.group)
    }

    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        self.uniform(name, &[fan_in, fan_out], bound)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f32) -> ParamId {
        let path = self.path(name);
        self.store.add(&path, Tensor::full(shape, v), self.group)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.constant(name, shape, 0.0)
    }

    /// Gaussian entries, always registered in the `Fixed` group.
    pub fn gaussian_fixed(&mut self, name: &str, shape: &[usize], sigma: f32) -> ParamId {
        let n = shape.iter().product();
        let normal = Normal::new(0.0f32, sigma).expect("sigma must be positive");
        let data = (0..n).map(|_| normal.sample(&mut *self.rng)).collect();
        let path = self.path(name);
        self.store.add(
            &path,
            Tensor::from_parts(shape.to_vec(), data),
            ParamGroup::Fixed,
        )
    }
}
