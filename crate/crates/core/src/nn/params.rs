use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};

/// Handle to one parameter inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    /// Buffers carry state but never receive gradients.
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }

    pub fn tag(self) -> u8 {
        match self {
            ParamRole::Weight => 0,
            ParamRole::Bias => 1,
            ParamRole::Gamma => 2,
            ParamRole::Beta => 3,
            ParamRole::RunningMean => 4,
            ParamRole::RunningVar => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ParamRole::Weight,
            1 => ParamRole::Bias,
            2 => ParamRole::Gamma,
            3 => ParamRole::Beta,
            4 => ParamRole::RunningMean,
            5 => ParamRole::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub role: ParamRole,
    pub trainable: bool,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named parameter tensors plus a shape-congruent gradient buffer.
#[derive(Clone, Debug)]
pub struct ParameterStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            role,
            trainable: !role.is_buffer(),
            value,
            grad,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Marks every non-buffer parameter whose name starts with `prefix`.
    /// Returns how many parameters changed state.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if !p.role.is_buffer() && p.name.starts_with(prefix) && p.trainable != trainable {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Sets the trainable flag of every non-buffer parameter whose name
    /// satisfies `pred`. Returns how many parameters matched.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if !p.role.is_buffer() && pred(&p.name) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Number of scalar values in non-buffer parameters matching `filter`.
    pub fn count_where(&self, filter: impl Fn(&Parameter<T>) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| !p.role.is_buffer() && filter(p))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.count_where(|p| p.name.starts_with(prefix))
    }

    /// Scalar count over every non-buffer parameter.
    pub fn count(&self) -> usize {
        self.count_where(|_| true)
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    role: p.role,
                    trainable: p.trainable,
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Adds `grads` into the gradient buffer of trainable parameters; frozen
    /// parameters keep exact zeros.
    pub fn accumulate(&mut self, grads: &super::Gradients<T>) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if p.trainable {
                p.grad.add_assign(g);
            }
        }
    }

    /// Exponential moving update of batch-norm running statistics:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn apply_running_stats(&mut self, updates: &[super::RunningStatUpdate<T>], momentum: T) {
        for u in updates {
            let keep = momentum;
            let take = T::one() - momentum;
            for (r, &b) in self.params[u.mean.0].value.data_mut().iter_mut().zip(&u.batch_mean) {
                *r = keep * *r + take * b;
            }
            for (r, &b) in self.params[u.var.0].value.data_mut().iter_mut().zip(&u.batch_var) {
                *r = keep * *r + take * b;
            }
        }
    }

    /// Copies values from `other` for every parameter with the same name and
    /// shape. Returns the number of parameters copied.
    pub fn load_matching(&mut self, other: &ParameterStore<T>) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(&id) = other.index.get(&p.name) {
                let src = &other.params[id.0].value;
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    n += 1;
                }
            }
        }
        n
    }

    /// Sets every non-buffer parameter to `value`.
    pub fn fill_trainable_values(&mut self, value: T) {
        for p in &mut self.params {
            if !p.role.is_buffer() {
                p.value.fill(value);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.all_finite() && p.grad.all_finite())
    }
}

/// Seeded parameter initializer: He-uniform kernels, zero biases, unit
/// batch-norm scale.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Values uniform in `±sqrt(6 / fan_in)`.
    pub fn he_uniform<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(self.rng.gen_range(-bound..bound)))
            .collect();
        Tensor::new(shape, data)
    }
}
